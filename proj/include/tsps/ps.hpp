#pragma once

// Propensity score estimation. Three estimators share one logistic
// machinery: "naive" regresses treatment on the obtained averages, "rc"
// on the EB predictions of the true scores, and "ml" marginalizes the
// obtained scores out of the naive fit with a three-point normal-mixture
// approximation to the logistic-normal integral.

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

#include "tsps/core.hpp"
#include "tsps/hlm.hpp"
#include "tsps/measure.hpp"

namespace tsps {

enum class PsKind { naive, rc, ml };

std::string to_string(PsKind kind);

struct LogisticFit {
  Eigen::VectorXd beta;
  double deviance = 0.0;
  int iterations = 0;
  bool converged = false;
  bool separation = false;  // some fitted probability within 1e-10 of 0/1
  std::vector<int> dropped_columns;  // constant columns excluded from the fit
};

// Iteratively reweighted least squares on [intercept | columns]. The
// intercept is implicit; X holds the non-intercept columns. Requires both
// classes present. Quasi-separation is flagged, not fatal.
LogisticFit fit_logistic(const Eigen::MatrixXd& x, const std::vector<int>& t);

struct PsFit {
  PsKind kind = PsKind::naive;
  double beta0 = 0.0;
  Eigen::VectorXd beta_w;  // per model cell, dataset cell-key order
  Eigen::VectorXd beta_z;  // per covariate
  Eigen::VectorXd prob;    // per school, in (0,1)
  Eigen::VectorXd logit_score;  // log(p / (1-p))
  LogisticFit info;
};

struct MixtureConstants {
  std::array<double, 3> p;  // mixing probabilities, sum to 1
  std::array<double, 3> s;  // scaling constants

  static const MixtureConstants& monahan_stefanski();
};

// Largest |mixture - quadrature oracle| observed on the eta x v acceptance
// grid; frozen as the regression bound for the approximation.
inline constexpr double kMixtureFrozenTolerance = 4.4e-5;

// Sum_t p_t * Phi(s_t * eta / sqrt(1 + s_t^2 * v)).
double mixture_probability(double eta, double v,
                           const MixtureConstants& mix =
                               MixtureConstants::monahan_stefanski());

// Marginal PS for one school: eta = beta0 + xhat'beta_w + z'beta_z and
// v = sum_cells beta_w^2 * error_variance (diagonal Sigma). Entries of
// xhat_row/variance_row may be NaN only where beta_w is zero.
double ml_marginal_ps(double beta0, const Eigen::VectorXd& beta_w,
                      const Eigen::VectorXd& beta_z,
                      const Eigen::VectorXd& xhat_row,
                      const Eigen::VectorXd& variance_row,
                      const Eigen::VectorXd& z);

// Logistic regression of T on (W, Z). Errors if any school has a withheld
// model cell: this estimator cannot score such schools.
PsFit ps_naive(const Dataset& dataset);

// Logistic regression of T on (X-hat, Z); scores every school, including
// those with withheld cells.
PsFit ps_rc(const Dataset& dataset, const EbPredictions& eb);

// Coefficients from the complete-school (W, Z) fit; scores every school
// through the mixture marginal, using EB predictions and the
// measurement-error variances.
PsFit ps_ml(const Dataset& dataset, const EbPredictions& eb,
            const MeasurementModel& sigma);

// Logistic-normal integral by adaptive quadrature, abs error <= 1e-9.
// Test oracle for the mixture approximation; not a production path.
double logistic_normal_oracle(double eta, double v);

}  // namespace tsps

#pragma once

// Two-level hierarchical model with known heteroskedastic residual
// variances: W_ijk = gamma0 + Z_i gamma_z + school effect + subgroup effect
// + measurement error. Variance components (tau1^2, tau2^2) are estimated
// by REML with the fixed effects profiled out by GLS; empirical-Bayes
// (BLUP) predictions recover subgroup average true scores.

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "tsps/core.hpp"
#include "tsps/measure.hpp"

namespace tsps {

struct HlmFit {
  std::string assessment;
  double gamma0 = 0.0;
  Eigen::VectorXd gamma_z;
  double tau1_sq = 0.0;  // school-level variance
  double tau2_sq = 0.0;  // subgroup-within-school variance
  double objective = 0.0;  // restricted log-likelihood at the optimum
  bool converged = false;
  int iterations = 0;
};

// Predictions per (school, cell). Cells a school does not have (no size)
// stay unset; withheld cells are predicted from fixed effects plus the
// school intercept.
struct EbPredictions {
  Eigen::MatrixXd xhat;       // n_schools x n_cells, NaN where unset
  Eigen::MatrixXd cond_var;   // conditional variance of X given the data
  Eigen::VectorXd school_effect;  // delta-hat^(c) per school (one assessment)

  bool has(int school, int cell) const {
    return std::isfinite(xhat(school, cell));
  }
};

// REML fit on the non-withheld cells of one assessment. Requires at least
// two schools with data; throws NumericError naming collinear covariates
// when the GLS system is singular.
HlmFit fit_hlm(const Dataset& dataset, const MeasurementModel& sigma,
               const std::string& assessment);

// Standard BLUP under the fitted model. Withheld (or error-variance-free)
// cells get xhat = fixed effects + predicted school intercept.
EbPredictions predict_eb(const HlmFit& fit, const Dataset& dataset,
                         const MeasurementModel& sigma,
                         const std::string& assessment);

// Restricted log-likelihood at given variance components (gamma profiled
// out). Exposed for optimality audits.
double reml_loglik(const Dataset& dataset, const MeasurementModel& sigma,
                   const std::string& assessment, double tau1_sq, double tau2_sq);

// CSEMs depend on the (unknown) true score, so fit once with CSEMs at the
// obtained averages, then refit with CSEMs at the first pass's EB
// predictions. Returns the second-pass fit and predictions.
std::pair<HlmFit, EbPredictions> fit_hlm_two_pass(
    const Dataset& dataset, const std::map<std::string, CsemTable>& tables,
    const std::string& assessment);

// Convenience: fit every assessment and merge the per-assessment
// predictions into one (n_schools x n_cells) layout.
std::pair<std::vector<HlmFit>, EbPredictions> fit_eb_all(
    const Dataset& dataset, const MeasurementModel& sigma);

}  // namespace tsps

#pragma once

// Data-generating process of the simulation study and the replication
// engine: generate populations, calibrate the treatment-effect amplitude
// to the target ETT, and run the full estimate-and-match pipeline across
// independent replication streams.

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "tsps/core.hpp"
#include "tsps/metrics.hpp"
#include "tsps/numeric.hpp"

namespace tsps {

struct SimConfig {
  int n_schools = 500;
  int n_covariates = 6;
  int n_subgroups = 4;
  std::string design = "mixed";  // "large" | "mixed"

  double tau1 = 40.229;
  double tau2 = 59.149;
  double sigma = 250.0;
  double beta0 = -1.386;
  double beta_w_each = -0.0115;
  double beta_z_each = 0.05;
  int n_beta_z_nonzero = 2;
  double gamma0 = 1500.0;
  // V(Z gamma_z) / V(X); together with tau1/tau2 this pins gamma_z.
  double covariate_signal_fraction = 0.1;

  std::string size_law = "truncated-geometric";
  double moderate_mean = 44.0;
  double small_mean = 6.0;

  double target_ett = 5.5;
  // Amplitude a of g(X) = a * exp(-X / 1000); NaN = calibrate first.
  double effect_amplitude = std::numeric_limits<double>::quiet_NaN();

  std::vector<double> calipers{0.5, 0.7, 1.0};
  double estimation_caliper = 1.0;  // caliper behind matched estimates/balance
  int max_controls_per_treated = 5;
  int max_treated_per_control = 0;  // 0 = number of treated

  int n_replications = 200;
  std::uint64_t master_seed = 12345;
  int n_threads = 0;  // 0 = hardware concurrency

  // Equal value for every gamma_z coordinate implied by the signal fraction.
  double gamma_z_value() const;
};

// Size law and size-class label per subgroup slot.
struct DesignSpec {
  std::vector<DiscreteLaw> size_laws;
  std::vector<std::string> size_class;   // per subgroup
  std::vector<std::string> class_order;  // unique classes, display order
};

DesignSpec design_spec(const SimConfig& config);

// A generated dataset plus the latent truth the estimators never see.
struct SimulatedPopulation {
  Dataset dataset;
  Eigen::MatrixXd x_true;   // n_schools x n_subgroups
  Eigen::MatrixXd noise;    // W - X draw by draw
  Eigen::MatrixXd y0, y1;   // potential outcomes
  Eigen::MatrixXd effect;   // g(Z, X) per cell
};

SimulatedPopulation generate_population(const SimConfig& config, Rng& rng);

// Amplitude a with E[g | T = 1] = target_ett, found by bisection on a
// Monte Carlo sample of at least min_treated_cells treated cells.
double calibrate_effect(const SimConfig& config, std::uint64_t seed,
                        int min_treated_cells = 100000);

enum class Estimator : int { matching = 0, weighting, weighting_unnormalized, pencomp };
constexpr int kNumEstimators = 4;
constexpr std::array<const char*, kNumEstimators> kEstimatorNames{
    "matching", "weighting", "weighting_unnormalized", "pencomp"};

enum class BalanceFamily : int { x_true = 0, w_obtained, x_hat };
constexpr int kNumFamilies = 3;
constexpr std::array<const char*, kNumFamilies> kFamilyNames{"X", "W", "Xhat"};

// Balance samples: unmatched plus one matched sample per PS kind.
constexpr int kNumSamples = 4;
constexpr std::array<const char*, kNumSamples> kSampleNames{
    "unmatched", "matched-naive", "matched-rc", "matched-ml"};

constexpr int kNumKinds = 3;  // naive, rc, ml in PsKind order

struct ReplicationRecord {
  int rep = 0;
  std::uint64_t seed = 0;  // stream: (master_seed, rep)
  bool failed = false;
  std::string error;
  // [caliper index][kind] percent of treated left unmatched
  std::vector<std::array<double, kNumKinds>> unmatched_pct;
  // [kind][estimator][cell]
  std::array<std::array<std::vector<double>, kNumEstimators>, kNumKinds> estimates;
  std::vector<double> marginal;  // per cell, unmatched mean difference
  // [family][sample][cell] signed standardized differences
  std::array<std::array<std::vector<double>, kNumSamples>, kNumFamilies> balance;
  std::array<double, kNumKinds> ess{};  // at the estimation caliper
  double true_ett = 0.0;  // realized mean effect among treated cells
};

struct StudySummary {
  // [caliper index][kind] mean unmatched percent
  std::vector<std::array<double, kNumKinds>> unmatched_pct;
  // bias/rmse vs target ETT, keyed "kind/estimator/class"
  std::map<std::string, McCell> errors;
  std::map<std::string, McCell> marginal_errors;  // keyed by class
  // mean |d_s|, keyed "family/sample/class"
  std::map<std::string, double> balance;
  int n_replications = 0;
  int n_failed = 0;
};

struct StudyResult {
  SimConfig config;  // with the amplitude actually used
  std::vector<ReplicationRecord> records;
  StudySummary summary;
};

// Generates, fits all three PS kinds, matches at every caliper, and
// estimates per replication; aborts if more than 1% of replications fail.
StudyResult run_study(const SimConfig& config);

}  // namespace tsps

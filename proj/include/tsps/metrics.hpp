#pragma once

// Balance diagnostics and Monte Carlo performance reductions.

#include <map>
#include <string>
#include <vector>

namespace tsps {

// Sample SD of the combined (treated + control) values, n-1 denominator.
// Computed once on the unmatched sample and reused as the standardized
// difference denominator so matched and unmatched bars share a scale.
double pooled_sd(const std::vector<double>& values);

// (weighted treated mean - weighted control mean) / pooled_sd. Units with
// zero weight drop out; both groups need positive total weight.
double standardized_difference(const std::vector<double>& values,
                               const std::vector<int>& treatment,
                               const std::vector<double>& weights,
                               double pooled_sd_value);

// One estimator's draws across replications, reduced against the target.
struct McCell {
  double bias = 0.0;
  double rmse = 0.0;
  int n_replications = 0;
};

McCell summarize_errors(const std::vector<double>& estimates, double target);

// Keyed reduction over per-replication estimate draws. Keys are
// caller-defined labels like "ml/matching/small".
std::map<std::string, McCell> summarize_replications(
    const std::map<std::string, std::vector<double>>& draws, double target);

}  // namespace tsps

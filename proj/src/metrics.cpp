#include "tsps/metrics.hpp"

#include <cmath>

#include "tsps/core.hpp"

namespace tsps {

double pooled_sd(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) throw DataError("pooled_sd needs at least 2 values");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(n - 1));
}

double standardized_difference(const std::vector<double>& values,
                               const std::vector<int>& treatment,
                               const std::vector<double>& weights,
                               double pooled_sd_value) {
  if (values.size() != treatment.size() || values.size() != weights.size()) {
    throw DataError("standardized_difference: size mismatch");
  }
  if (pooled_sd_value <= 0.0) {
    throw NumericError("standardized_difference: pooled SD must be positive");
  }
  double tw = 0.0, ts = 0.0, cw = 0.0, cs = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    if (treatment[i] == 1) {
      tw += weights[i];
      ts += weights[i] * values[i];
    } else {
      cw += weights[i];
      cs += weights[i] * values[i];
    }
  }
  if (tw <= 0.0 || cw <= 0.0) {
    throw DataError("standardized_difference: a group has no positive weight");
  }
  return (ts / tw - cs / cw) / pooled_sd_value;
}

McCell summarize_errors(const std::vector<double>& estimates, double target) {
  if (estimates.size() < 2) {
    throw DataError("summarize_errors needs at least 2 replications");
  }
  McCell cell;
  cell.n_replications = static_cast<int>(estimates.size());
  double sum = 0.0, sum_sq = 0.0;
  for (double e : estimates) {
    const double err = e - target;
    sum += err;
    sum_sq += err * err;
  }
  cell.bias = sum / cell.n_replications;
  cell.rmse = std::sqrt(sum_sq / cell.n_replications);
  return cell;
}

std::map<std::string, McCell> summarize_replications(
    const std::map<std::string, std::vector<double>>& draws, double target) {
  std::map<std::string, McCell> out;
  for (const auto& [key, values] : draws) {
    out[key] = summarize_errors(values, target);
  }
  return out;
}

}  // namespace tsps

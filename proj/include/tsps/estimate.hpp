#pragma once

// Treatment-effect estimators targeting the effect on the treated (ETT):
// stratum-weighted matched differences, odds weighting, and PENCOMP
// (counterfactuals from a penalized spline of the PS fit on controls).

#include <optional>
#include <string>

#include "tsps/core.hpp"
#include "tsps/match.hpp"
#include "tsps/ps.hpp"

namespace tsps {

struct EffectEstimate {
  std::string estimator;  // matching | weighting | pencomp | marginal
  std::optional<PsKind> ps_kind;
  CellKey outcome_key;
  double point = 0.0;  // score points
  int n_treated = 0;   // schools effectively contributing
  int n_control = 0;
};

// Weighted treated mean minus odds-weighted control mean over matched
// sets. Sets lacking an outcome on either side are dropped for this
// outcome only.
EffectEstimate matched_difference(const MatchResult& result,
                                  const Dataset& dataset,
                                  const CellKey& outcome_key);

// Treated mean minus the odds-weighted control mean with weights
// e/(1-e). Normalized by the control weight total by default; the
// unnormalized variant divides by the treated count instead.
EffectEstimate odds_weighting(const PsFit& ps, const Dataset& dataset,
                              const CellKey& outcome_key, bool normalized = true);

// Difference in unweighted group means: the estimator that weights
// controls by the marginal odds of intervention in the unmatched sample.
EffectEstimate marginal_difference(const Dataset& dataset,
                                   const CellKey& outcome_key);

struct PencompConfig {
  int max_knots = 20;                   // K = min(max_knots, n_controls / 4)
  double log10_lambda_min = -8.0;
  double log10_lambda_max = 8.0;
  int n_lambda = 41;
  std::optional<double> fixed_lambda;   // bypass GCV when set
  // Treated units whose PS logit falls outside the control support are
  // predicted at the nearest boundary instead of extrapolating the spline.
  bool clamp_to_control_support = true;
};

// Fits outcome ~ linear PS logit + truncated-linear spline on controls
// with a ridge penalty chosen by generalized cross-validation, predicts
// the treated counterfactuals, and averages observed - predicted.
EffectEstimate pencomp(const PsFit& ps, const Dataset& dataset,
                       const CellKey& outcome_key,
                       const PencompConfig& config = PencompConfig{});

}  // namespace tsps

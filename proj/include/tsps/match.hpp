#pragma once

// Optimal full matching within propensity score calipers. Treated units
// with no control inside the caliper are set aside; the rest are
// partitioned into 1:k / k:1 matched sets by a min-cost-flow solve that
// first matches every retained treated unit, then as many eligible
// controls as the ratio bounds allow, then minimizes total within-set
// logit distance. Controls enter weighted means with the odds of
// intervention in their matched set.

#include <vector>

#include "tsps/core.hpp"
#include "tsps/ps.hpp"

namespace tsps {

struct MatchSpec {
  double caliper_logits = 1.0;
  int max_controls_per_treated = 5;
  // 0 means "number of treated units" (effectively unbounded); the
  // replication uses 0, application-style runs default to 10.
  int max_treated_per_control = 10;
};

struct MatchedSet {
  std::vector<int> treated;   // record indices
  std::vector<int> controls;
  // odds of intervention in the set: treated.size() / controls.size()
  double control_weight = 1.0;
};

struct MatchResult {
  std::vector<MatchedSet> sets;
  std::vector<int> unmatched_treated;
  double total_distance = 0.0;
  bool feasible = true;

  int n_matched_treated() const;
  int n_matched_controls() const;
};

MatchResult full_match(const std::vector<double>& logit_scores,
                       const std::vector<int>& treatment, const MatchSpec& spec);

MatchResult full_match(const PsFit& ps, const Dataset& dataset,
                       const MatchSpec& spec);

// Treated count plus the Kish effective size of the control weights.
double effective_sample_size(const MatchResult& result);

}  // namespace tsps

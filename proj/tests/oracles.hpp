#pragma once

// Test-only oracles, kept independent of the implementation paths they
// check: exhaustive enumeration of full matchings, and helpers for
// building small datasets by hand.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "tsps/core.hpp"
#include "tsps/match.hpp"

namespace tsps::testing {

struct EnumerationResult {
  bool feasible = false;       // every retained treated unit placed
  int n_controls_matched = 0;  // lexicographic first objective
  double total_distance = 0.0;
};

// Brute force over every subset of caliper-feasible treated-control edges,
// keeping subsets that form valid full matchings (each edge has a
// degree-one endpoint, every retained treated covered, ratio bounds).
// Among them: max matched controls, then min total distance.
inline EnumerationResult enumerate_full_match(const std::vector<double>& logits,
                                              const std::vector<int>& treatment,
                                              const MatchSpec& spec) {
  std::vector<int> treated, controls;
  for (std::size_t i = 0; i < treatment.size(); ++i) {
    (treatment[i] == 1 ? treated : controls).push_back(static_cast<int>(i));
  }
  struct Edge {
    int t, c;
    double d;
  };
  std::vector<Edge> edges;
  std::vector<bool> retained(treated.size(), false);
  for (std::size_t a = 0; a < treated.size(); ++a) {
    for (std::size_t b = 0; b < controls.size(); ++b) {
      const double d = std::abs(logits[treated[a]] - logits[controls[b]]);
      if (d <= spec.caliper_logits) {
        edges.push_back({static_cast<int>(a), static_cast<int>(b), d});
        retained[a] = true;
      }
    }
  }
  const int k2 = spec.max_controls_per_treated;
  const int k1 = spec.max_treated_per_control > 0
                     ? spec.max_treated_per_control
                     : static_cast<int>(treated.size());
  EnumerationResult best;
  const std::size_t n_edges = edges.size();
  if (n_edges > 22) throw std::runtime_error("enumeration oracle: too many edges");
  for (std::uint64_t mask = 0; mask < (1ULL << n_edges); ++mask) {
    std::vector<int> deg_t(treated.size(), 0), deg_c(controls.size(), 0);
    for (std::size_t e = 0; e < n_edges; ++e) {
      if (mask & (1ULL << e)) {
        ++deg_t[edges[e].t];
        ++deg_c[edges[e].c];
      }
    }
    bool ok = true;
    for (std::size_t a = 0; a < treated.size() && ok; ++a) {
      if (retained[a] && deg_t[a] == 0) ok = false;
      if (deg_t[a] > k2) ok = false;
    }
    for (std::size_t b = 0; b < controls.size() && ok; ++b) {
      if (deg_c[b] > k1) ok = false;
    }
    if (!ok) continue;
    double dist = 0.0;
    for (std::size_t e = 0; e < n_edges && ok; ++e) {
      if (!(mask & (1ULL << e))) continue;
      // full matching structure: every used pair has a degree-one endpoint
      if (deg_t[edges[e].t] > 1 && deg_c[edges[e].c] > 1) ok = false;
      dist += edges[e].d;
    }
    if (!ok) continue;
    int n_matched_controls = 0;
    for (std::size_t b = 0; b < controls.size(); ++b) {
      if (deg_c[b] > 0) ++n_matched_controls;
    }
    if (!best.feasible || n_matched_controls > best.n_controls_matched ||
        (n_matched_controls == best.n_controls_matched &&
         dist < best.total_distance - 1e-12)) {
      best.feasible = true;
      best.n_controls_matched = n_matched_controls;
      best.total_distance = dist;
    }
  }
  return best;
}

// Minimal dataset with one assessment ("test") and the given cells.
inline Dataset make_dataset(
    const std::vector<std::string>& subgroups,
    const std::vector<std::string>& covariate_names,
    const std::vector<int>& treatment,
    const std::vector<std::vector<double>>& covariates,
    const std::vector<std::vector<std::optional<double>>>& obtained,
    const std::vector<std::vector<unsigned>>& sizes, double csem,
    const std::vector<std::vector<std::optional<double>>>& outcomes = {}) {
  Dataset ds;
  ds.assessment_keys = {"test"};
  ds.subgroup_keys = subgroups;
  for (const auto& s : subgroups) ds.cell_keys.push_back({s, "test"});
  ds.covariate_names = covariate_names;
  for (std::size_t i = 0; i < treatment.size(); ++i) {
    SchoolRecord rec;
    rec.school_id = "s" + std::to_string(i + 1);
    rec.treatment = treatment[i];
    rec.covariates = covariates.empty() ? std::vector<double>{} : covariates[i];
    for (std::size_t k = 0; k < subgroups.size(); ++k) {
      SubgroupCell cell;
      cell.subgroup_key = subgroups[k];
      cell.assessment_key = "test";
      cell.size = sizes[i][k];
      cell.obtained_avg = obtained[i][k];
      cell.csem = csem;
      if (!outcomes.empty()) cell.outcome_avg = outcomes[i][k];
      rec.cells.push_back(std::move(cell));
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace tsps::testing

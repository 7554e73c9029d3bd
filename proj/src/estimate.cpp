#include "tsps/estimate.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace tsps {

namespace {

std::optional<double> outcome_of(const Dataset& dataset, int school,
                                 const CellKey& key) {
  const SubgroupCell* cell = dataset.records[school].find_cell(key);
  return cell ? cell->outcome_avg : std::nullopt;
}

}  // namespace

EffectEstimate matched_difference(const MatchResult& result,
                                  const Dataset& dataset,
                                  const CellKey& outcome_key) {
  EffectEstimate est;
  est.estimator = "matching";
  est.outcome_key = outcome_key;
  double treated_sum = 0.0, control_sum = 0.0;
  double treated_wt = 0.0, control_wt = 0.0;
  for (const auto& set : result.sets) {
    std::vector<double> ty, cy;
    for (int i : set.treated) {
      if (const auto y = outcome_of(dataset, i, outcome_key)) ty.push_back(*y);
    }
    for (int j : set.controls) {
      if (const auto y = outcome_of(dataset, j, outcome_key)) cy.push_back(*y);
    }
    if (ty.empty() || cy.empty()) continue;  // set unusable for this outcome
    for (double y : ty) {
      treated_sum += y;
      treated_wt += 1.0;
    }
    for (double y : cy) {
      control_sum += set.control_weight * y;
      control_wt += set.control_weight;
    }
    est.n_treated += static_cast<int>(ty.size());
    est.n_control += static_cast<int>(cy.size());
  }
  if (est.n_treated == 0) {
    throw DataError("matched_difference: no usable matched sets for " +
                    outcome_key.label());
  }
  est.point = treated_sum / treated_wt - control_sum / control_wt;
  return est;
}

EffectEstimate odds_weighting(const PsFit& ps, const Dataset& dataset,
                              const CellKey& outcome_key, bool normalized) {
  EffectEstimate est;
  est.estimator = normalized ? "weighting" : "weighting_unnormalized";
  est.ps_kind = ps.kind;
  est.outcome_key = outcome_key;
  double treated_sum = 0.0;
  double control_sum = 0.0, control_wt = 0.0;
  for (int i = 0; i < dataset.n_schools(); ++i) {
    const auto y = outcome_of(dataset, i, outcome_key);
    if (!y.has_value()) continue;
    if (dataset.records[i].treatment == 1) {
      treated_sum += *y;
      ++est.n_treated;
    } else {
      const double e = ps.prob(i);
      const double odds = e / (1.0 - e);
      control_sum += odds * *y;
      control_wt += odds;
      ++est.n_control;
    }
  }
  if (est.n_treated == 0 || est.n_control == 0) {
    throw DataError("odds_weighting: a group has no outcomes for " +
                    outcome_key.label());
  }
  if (control_wt <= 0.0) {
    throw NumericError("odds_weighting: control odds sum to zero");
  }
  const double denom = normalized ? control_wt : static_cast<double>(est.n_treated);
  est.point = treated_sum / est.n_treated - control_sum / denom;
  return est;
}

EffectEstimate marginal_difference(const Dataset& dataset,
                                   const CellKey& outcome_key) {
  EffectEstimate est;
  est.estimator = "marginal";
  est.outcome_key = outcome_key;
  double treated_sum = 0.0, control_sum = 0.0;
  for (int i = 0; i < dataset.n_schools(); ++i) {
    const auto y = outcome_of(dataset, i, outcome_key);
    if (!y.has_value()) continue;
    if (dataset.records[i].treatment == 1) {
      treated_sum += *y;
      ++est.n_treated;
    } else {
      control_sum += *y;
      ++est.n_control;
    }
  }
  if (est.n_treated == 0 || est.n_control == 0) {
    throw DataError("marginal_difference: a group has no outcomes for " +
                    outcome_key.label());
  }
  est.point = treated_sum / est.n_treated - control_sum / est.n_control;
  return est;
}

EffectEstimate pencomp(const PsFit& ps, const Dataset& dataset,
                       const CellKey& outcome_key, const PencompConfig& config) {
  std::vector<double> cx, cy, tx, ty;
  for (int i = 0; i < dataset.n_schools(); ++i) {
    const auto y = outcome_of(dataset, i, outcome_key);
    if (!y.has_value()) continue;
    if (dataset.records[i].treatment == 1) {
      tx.push_back(ps.logit_score(i));
      ty.push_back(*y);
    } else {
      cx.push_back(ps.logit_score(i));
      cy.push_back(*y);
    }
  }
  const int nc = static_cast<int>(cx.size());
  if (nc < 10) {
    throw DataError("pencomp needs at least 10 controls with outcomes for " +
                    outcome_key.label());
  }
  if (tx.empty()) {
    throw DataError("pencomp: no treated outcomes for " + outcome_key.label());
  }

  const int n_knots = std::min(config.max_knots, nc / 4);
  if (nc < n_knots + 2) {
    throw DataError("pencomp: too few controls for the knot rule");
  }
  if (config.clamp_to_control_support) {
    const auto [lo, hi] = std::minmax_element(cx.begin(), cx.end());
    for (double& x : tx) x = std::min(*hi, std::max(*lo, x));
  }
  // Knots at equally spaced quantiles of the control PS logits.
  std::vector<double> sorted = cx;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> knots(n_knots);
  for (int k = 0; k < n_knots; ++k) {
    const double q = static_cast<double>(k + 1) / (n_knots + 1);
    const double pos = q * (nc - 1);
    const int lo = static_cast<int>(std::floor(pos));
    const int hi = std::min(lo + 1, nc - 1);
    knots[k] = sorted[lo] + (pos - lo) * (sorted[hi] - sorted[lo]);
  }

  const int p = 2 + n_knots;
  auto basis_row = [&](double x) {
    Eigen::RowVectorXd row(p);
    row(0) = 1.0;
    row(1) = x;
    for (int k = 0; k < n_knots; ++k) row(2 + k) = std::max(x - knots[k], 0.0);
    return row;
  };
  Eigen::MatrixXd b(nc, p);
  Eigen::VectorXd y(nc);
  for (int i = 0; i < nc; ++i) {
    b.row(i) = basis_row(cx[i]);
    y(i) = cy[i];
  }
  const Eigen::MatrixXd btb = b.transpose() * b;
  const Eigen::VectorXd bty = b.transpose() * y;
  Eigen::VectorXd penalty = Eigen::VectorXd::Zero(p);
  for (int k = 0; k < n_knots; ++k) penalty(2 + k) = 1.0;

  auto solve_at = [&](double lambda) {
    const Eigen::MatrixXd a = btb + lambda * penalty.asDiagonal().toDenseMatrix();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
    if (ldlt.info() != Eigen::Success) {
      throw NumericError("pencomp: singular spline system");
    }
    const Eigen::VectorXd coef = ldlt.solve(bty);
    const double df = ldlt.solve(btb).trace();
    const Eigen::VectorXd resid = y - b * coef;
    const double denom = std::max(nc - df, 1e-8);
    const double gcv = resid.squaredNorm() * nc / (denom * denom);
    return std::make_pair(gcv, coef);
  };

  Eigen::VectorXd coef;
  if (config.fixed_lambda.has_value()) {
    coef = solve_at(*config.fixed_lambda).second;
  } else {
    // Scan from the smoothest end down; ties keep the larger penalty.
    double best_gcv = 0.0;
    for (int g = config.n_lambda - 1; g >= 0; --g) {
      const double frac = config.n_lambda == 1
                              ? 0.0
                              : static_cast<double>(g) / (config.n_lambda - 1);
      const double lambda = std::pow(
          10.0, config.log10_lambda_min +
                    frac * (config.log10_lambda_max - config.log10_lambda_min));
      const auto [gcv, cand] = solve_at(lambda);
      if (coef.size() == 0 || gcv < best_gcv - 1e-12 * (1.0 + std::abs(best_gcv))) {
        best_gcv = gcv;
        coef = cand;
      }
    }
  }

  double total = 0.0;
  for (std::size_t i = 0; i < tx.size(); ++i) {
    total += ty[i] - basis_row(tx[i]).dot(coef);
  }
  EffectEstimate est;
  est.estimator = "pencomp";
  est.ps_kind = ps.kind;
  est.outcome_key = outcome_key;
  est.n_treated = static_cast<int>(tx.size());
  est.n_control = nc;
  est.point = total / static_cast<double>(tx.size());
  return est;
}

}  // namespace tsps

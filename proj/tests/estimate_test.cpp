#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tsps/estimate.hpp"
#include "tsps/numeric.hpp"

using namespace tsps;

namespace {

// Schools with one cell "a_test"; outcome = given values.
Dataset outcome_dataset(const std::vector<int>& treatment,
                        const std::vector<std::optional<double>>& outcomes) {
  std::vector<std::vector<std::optional<double>>> obtained, outs;
  std::vector<std::vector<unsigned>> sizes;
  for (std::size_t i = 0; i < treatment.size(); ++i) {
    obtained.push_back({1500.0});
    outs.push_back({outcomes[i]});
    sizes.push_back({10});
  }
  return testing::make_dataset({"a"}, {}, treatment, {}, obtained, sizes, 100.0,
                               outs);
}

PsFit fit_with_probs(const std::vector<double>& probs) {
  PsFit fit;
  fit.kind = PsKind::naive;
  fit.prob.resize(static_cast<int>(probs.size()));
  fit.logit_score.resize(static_cast<int>(probs.size()));
  for (std::size_t i = 0; i < probs.size(); ++i) {
    fit.prob(static_cast<int>(i)) = probs[i];
    fit.logit_score(static_cast<int>(i)) = logit(probs[i]);
  }
  return fit;
}

const CellKey kKey{"a", "test"};

}  // namespace

TEST_CASE("matched difference: identical outcomes give zero") {
  const Dataset ds = outcome_dataset({1, 0, 1, 0}, {7.0, 7.0, 7.0, 7.0});
  MatchResult mr;
  mr.sets.push_back({{0}, {1}, 1.0});
  mr.sets.push_back({{2}, {3}, 1.0});
  CHECK(matched_difference(mr, ds, kKey).point == doctest::Approx(0.0));
}

TEST_CASE("matched difference weights controls by the set odds") {
  const Dataset ds = outcome_dataset({1, 0, 0}, {10.0, 6.0, 8.0});
  MatchResult mr;
  mr.sets.push_back({{0}, {1, 2}, 0.5});
  const EffectEstimate est = matched_difference(mr, ds, kKey);
  CHECK(est.point == doctest::Approx(3.0));
  CHECK(est.n_treated == 1);
  CHECK(est.n_control == 2);
}

TEST_CASE("sets lacking one side's outcomes are dropped and counted") {
  const Dataset ds =
      outcome_dataset({1, 0, 1, 0}, {10.0, std::nullopt, 4.0, 1.0});
  MatchResult mr;
  mr.sets.push_back({{0}, {1}, 1.0});  // control outcome missing -> dropped
  mr.sets.push_back({{2}, {3}, 1.0});
  const EffectEstimate est = matched_difference(mr, ds, kKey);
  CHECK(est.point == doctest::Approx(3.0));
  CHECK(est.n_treated == 1);

  MatchResult none;
  none.sets.push_back({{0}, {1}, 1.0});
  CHECK_THROWS_AS(matched_difference(none, ds, kKey), DataError);
}

TEST_CASE("matched difference with unit weights is the plain mean difference") {
  const Dataset ds = outcome_dataset({1, 0, 1, 0}, {10.0, 7.0, 6.0, 3.0});
  MatchResult mr;
  mr.sets.push_back({{0}, {1}, 1.0});
  mr.sets.push_back({{2}, {3}, 1.0});
  CHECK(matched_difference(mr, ds, kKey).point == doctest::Approx(8.0 - 5.0));
}

TEST_CASE("odds weighting: constant scores reduce to the mean difference") {
  const Dataset ds = outcome_dataset({1, 1, 0, 0}, {10.0, 12.0, 4.0, 8.0});
  const PsFit fit = fit_with_probs({0.5, 0.5, 0.5, 0.5});
  CHECK(odds_weighting(fit, ds, kKey).point == doctest::Approx(11.0 - 6.0));
}

TEST_CASE("odds weighting matches direct arithmetic") {
  // controls with odds {1, 3} and outcomes {4, 8}: weighted mean 7
  const Dataset ds = outcome_dataset({1, 0, 0}, {10.0, 4.0, 8.0});
  const PsFit fit = fit_with_probs({0.6, 0.5, 0.75});
  const EffectEstimate est = odds_weighting(fit, ds, kKey);
  CHECK(est.point == doctest::Approx(10.0 - 7.0));
  // unnormalized variant divides by the treated count
  const EffectEstimate raw = odds_weighting(fit, ds, kKey, false);
  CHECK(raw.point == doctest::Approx(10.0 - (1.0 * 4.0 + 3.0 * 8.0) / 1.0));
}

TEST_CASE("marginal difference is the difference in group means") {
  const Dataset ds = outcome_dataset({1, 1, 0, 0}, {10.0, 12.0, 4.0, 8.0});
  CHECK(marginal_difference(ds, kKey).point == doctest::Approx(5.0));
}

TEST_CASE("pencomp recovers a constant shift on noiseless linear outcomes") {
  std::vector<int> treatment;
  std::vector<std::optional<double>> outcomes;
  std::vector<double> probs;
  Rng rng(17);
  for (int i = 0; i < 80; ++i) {
    // controls span a wider range than the treated so no prediction sits
    // outside the control support
    const double p = i < 20 ? 0.25 + 0.5 * rng.uniform() : 0.05 + 0.9 * rng.uniform();
    const double x = logit(p);
    probs.push_back(p);
    if (i < 20) {
      treatment.push_back(1);
      outcomes.push_back(2.0 * x + 1.0 + 5.0);
    } else {
      treatment.push_back(0);
      outcomes.push_back(2.0 * x + 1.0);
    }
  }
  const Dataset ds = outcome_dataset(treatment, outcomes);
  const PsFit fit = fit_with_probs(probs);
  CHECK(pencomp(fit, ds, kKey).point == doctest::Approx(5.0).epsilon(1e-6));
}

TEST_CASE("pencomp on constant outcomes returns zero") {
  std::vector<int> treatment(40, 0);
  std::vector<std::optional<double>> outcomes(40, 3.25);
  std::vector<double> probs(40);
  Rng rng(4);
  for (int i = 0; i < 40; ++i) {
    probs[i] = 0.2 + 0.6 * rng.uniform();
    if (i < 10) treatment[i] = 1;
  }
  const Dataset ds = outcome_dataset(treatment, outcomes);
  CHECK(pencomp(fit_with_probs(probs), ds, kKey).point ==
        doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
}

TEST_CASE("an infinite penalty degenerates pencomp to the linear fit") {
  std::vector<int> treatment;
  std::vector<std::optional<double>> outcomes;
  std::vector<double> probs;
  Rng rng(11);
  for (int i = 0; i < 120; ++i) {
    const double p = 0.1 + 0.8 * rng.uniform();
    probs.push_back(p);
    treatment.push_back(i < 30 ? 1 : 0);
    outcomes.push_back(1.5 * logit(p) + rng.normal());
  }
  const Dataset ds = outcome_dataset(treatment, outcomes);
  const PsFit fit = fit_with_probs(probs);
  PencompConfig huge;
  huge.fixed_lambda = 1e14;
  huge.clamp_to_control_support = false;  // compare against the raw line

  // analytic linear regression on controls
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (int i = 30; i < 120; ++i) {
    const double x = logit(probs[i]);
    const double y = *outcomes[static_cast<std::size_t>(i)];
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++n;
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double intercept = (sy - slope * sx) / n;
  double expected = 0.0;
  for (int i = 0; i < 30; ++i) {
    expected += *outcomes[static_cast<std::size_t>(i)] -
                (intercept + slope * logit(probs[i]));
  }
  expected /= 30.0;
  CHECK(pencomp(fit, ds, kKey, huge).point == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("pencomp needs enough controls") {
  std::vector<int> treatment{1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  std::vector<std::optional<double>> outcomes(11, 1.0);
  std::vector<double> probs(11, 0.4);
  const Dataset ds = outcome_dataset(treatment, outcomes);
  CHECK_THROWS_AS(pencomp(fit_with_probs(probs), ds, kKey), DataError);
}

TEST_CASE("estimators are location equivariant") {
  std::vector<int> treatment;
  std::vector<std::optional<double>> outcomes;
  std::vector<double> probs;
  Rng rng(23);
  for (int i = 0; i < 90; ++i) {
    treatment.push_back(i < 30 ? 1 : 0);
    probs.push_back(0.15 + 0.7 * rng.uniform());
    outcomes.push_back(10.0 * rng.normal());
  }
  const Dataset base = outcome_dataset(treatment, outcomes);
  const PsFit fit = fit_with_probs(probs);
  MatchResult mr;
  for (int i = 0; i < 30; ++i) mr.sets.push_back({{i}, {30 + i, 60 + i}, 0.5});

  const double c = 42.0;
  auto shifted = [&](bool treated_only) {
    std::vector<std::optional<double>> out2 = outcomes;
    for (int i = 0; i < 90; ++i) {
      if (!treated_only || treatment[i] == 1) *out2[i] += c;
    }
    return outcome_dataset(treatment, out2);
  };
  const Dataset all_shift = shifted(false);
  const Dataset treated_shift = shifted(true);

  CHECK(matched_difference(mr, all_shift, kKey).point ==
        doctest::Approx(matched_difference(mr, base, kKey).point).epsilon(1e-10));
  CHECK(odds_weighting(fit, all_shift, kKey).point ==
        doctest::Approx(odds_weighting(fit, base, kKey).point).epsilon(1e-10));
  CHECK(pencomp(fit, all_shift, kKey).point ==
        doctest::Approx(pencomp(fit, base, kKey).point).epsilon(1e-8));

  CHECK(matched_difference(mr, treated_shift, kKey).point ==
        doctest::Approx(matched_difference(mr, base, kKey).point + c).epsilon(1e-10));
  CHECK(odds_weighting(fit, treated_shift, kKey).point ==
        doctest::Approx(odds_weighting(fit, base, kKey).point + c).epsilon(1e-10));
  CHECK(pencomp(fit, treated_shift, kKey).point ==
        doctest::Approx(pencomp(fit, base, kKey).point + c).epsilon(1e-8));
}

// Acceptance suite: one pass/fail line per criterion, with the measured
// values printed beside every sub-check. Exit code is the number of
// failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "tsps/estimate.hpp"
#include "tsps/hlm.hpp"
#include "tsps/io.hpp"
#include "tsps/match.hpp"
#include "tsps/measure.hpp"
#include "tsps/metrics.hpp"
#include "tsps/numeric.hpp"
#include "tsps/ps.hpp"
#include "tsps/sim.hpp"

#include "../oracles.hpp"

using namespace tsps;

namespace {

struct Criterion {
  std::string name;
  bool pass = true;
  std::vector<std::string> details;

  void check(bool ok, const std::string& detail) {
    pass = pass && ok;
    details.push_back(std::string(ok ? "  [ok]   " : "  [FAIL] ") + detail);
  }
  void info(const std::string& detail) { details.push_back("  [info] " + detail); }
};

std::string num(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

double elapsed_s(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
      .count();
}

// ---------------------------------------------------------------------------

Criterion criterion_mixture_fidelity() {
  Criterion c{"1. mixture approximation vs quadrature oracle"};
  const auto start = std::chrono::steady_clock::now();
  constexpr int n_eta = 321, n_v = 101;
  std::vector<double> worst(n_eta, 0.0);
  parallel_for(n_eta, 0, [&](int ei) {
    const double eta = -8.0 + 0.05 * ei;
    for (int vi = 0; vi < n_v; ++vi) {
      const double v = 0.25 * vi;
      const double err =
          std::abs(mixture_probability(eta, v) - logistic_normal_oracle(eta, v));
      worst[ei] = std::max(worst[ei], err);
    }
  });
  double max_err = 0.0;
  for (double w : worst) max_err = std::max(max_err, w);
  const double secs = elapsed_s(start);
  c.check(max_err <= 1e-2, "max |mixture - oracle| = " + num(max_err, 8) + " <= 1e-2");
  c.check(max_err <= kMixtureFrozenTolerance,
          "within frozen regression bound " + num(kMixtureFrozenTolerance, 8));
  c.check(secs < 10.0, "grid runtime " + num(secs, 2) + " s < 10 s");
  return c;
}

SimConfig study_config(const std::string& design, int reps,
                       std::vector<double> calipers, std::uint64_t seed) {
  SimConfig config;
  config.design = design;
  config.n_replications = reps;
  config.calipers = std::move(calipers);
  config.estimation_caliper = 1.0;
  config.master_seed = seed;
  return config;
}

struct Studies {
  StudyResult mixed200;
  StudyResult large200;
  StudyResult mixed500;
};

Criterion criterion_table1(const Studies& studies) {
  Criterion c{"2. Table 1 replication: unmatched-treated percentages"};
  const auto& mixed = studies.mixed200.summary;
  const auto& large = studies.large200.summary;
  struct Row {
    const char* label;
    double got, want, tol;
  };
  // mixed calipers are {0.5, 1.0}; kinds are naive, rc, ml
  const std::vector<Row> rows{
      {"mixed cal 1.0 ml", mixed.unmatched_pct[1][2], 2.0, 3.0},
      {"mixed cal 1.0 rc", mixed.unmatched_pct[1][1], 5.0, 3.0},
      {"mixed cal 1.0 naive", mixed.unmatched_pct[1][0], 21.0, 3.0},
      {"mixed cal 0.5 ml", mixed.unmatched_pct[0][2], 4.0, 4.0},
      {"mixed cal 0.5 rc", mixed.unmatched_pct[0][1], 8.0, 4.0},
      {"mixed cal 0.5 naive", mixed.unmatched_pct[0][0], 28.0, 4.0},
      {"large cal 1.0 ml", large.unmatched_pct[0][2], 7.0, 3.0},
      {"large cal 1.0 rc", large.unmatched_pct[0][1], 8.0, 3.0},
      {"large cal 1.0 naive", large.unmatched_pct[0][0], 10.0, 3.0},
  };
  for (const auto& row : rows) {
    c.check(std::abs(row.got - row.want) <= row.tol,
            std::string(row.label) + " = " + num(row.got, 2) + " vs " +
                num(row.want, 0) + " +- " + num(row.tol, 0));
  }
  return c;
}

Criterion criterion_table2(const Studies& studies) {
  Criterion c{"3. Table 2 replication: small-class bias/RMSE"};
  const auto& errors = studies.mixed500.summary.errors;
  auto cell = [&](const std::string& kind, const std::string& est) {
    return errors.at(kind + "/" + est + "/small");
  };
  const McCell m_ml = cell("ml", "matching"), m_rc = cell("rc", "matching"),
               m_nv = cell("naive", "matching");
  const McCell p_ml = cell("ml", "pencomp"), p_rc = cell("rc", "pencomp"),
               p_nv = cell("naive", "pencomp");
  const McCell w_ml = cell("ml", "weighting"), w_rc = cell("rc", "weighting"),
               w_nv = cell("naive", "weighting");

  c.check(m_ml.rmse <= m_rc.rmse && m_rc.rmse < m_nv.rmse,
          "matching RMSE ordering ml <= rc < naive: " + num(m_ml.rmse, 1) + " / " +
              num(m_rc.rmse, 1) + " / " + num(m_nv.rmse, 1));
  c.check(p_ml.rmse <= p_rc.rmse && p_rc.rmse < p_nv.rmse,
          "pencomp RMSE ordering ml <= rc < naive: " + num(p_ml.rmse, 1) + " / " +
              num(p_rc.rmse, 1) + " / " + num(p_nv.rmse, 1));

  struct Band {
    const char* label;
    double got, want;
  };
  const std::vector<Band> bands{
      {"matching ml", m_ml.rmse, 35.3},   {"matching rc", m_rc.rmse, 34.2},
      {"matching naive", m_nv.rmse, 50.7}, {"pencomp ml", p_ml.rmse, 26.2},
      {"pencomp rc", p_rc.rmse, 24.4},     {"pencomp naive", p_nv.rmse, 31.6},
      {"weighting ml", w_ml.rmse, 25.9},   {"weighting rc", w_rc.rmse, 35.8},
      {"weighting naive", w_nv.rmse, 53.9},
  };
  for (const auto& band : bands) {
    const bool ok = std::abs(band.got - band.want) <= 0.25 * band.want;
    c.check(ok, std::string(band.label) + " RMSE " + num(band.got, 1) + " within +-25% of " +
                    num(band.want, 1));
  }
  c.check(m_ml.bias < 0.0, "ml matching bias negative: " + num(m_ml.bias, 1));
  c.check(p_ml.bias < 0.0, "ml pencomp bias negative: " + num(p_ml.bias, 1));
  c.check(w_ml.bias > 0.0, "ml weighting bias positive: " + num(w_ml.bias, 1));
  return c;
}

Criterion criterion_figure1(const Studies& studies) {
  Criterion c{"4. Figure 1 qualitative balance patterns"};
  const auto& mixed = studies.mixed500.summary.balance;
  const auto& large = studies.large200.summary.balance;
  auto mixed_at = [&](const std::string& key) { return mixed.at(key); };

  for (const std::string cls : {"large", "moderate"}) {
    const auto& src = cls == "large" ? large : mixed;
    const double unmatched = src.at("X/unmatched/" + cls);
    const double naive = src.at("X/matched-naive/" + cls);
    const double rc = src.at("X/matched-rc/" + cls);
    c.check(unmatched > naive && naive >= rc,
            cls + " |d_s(X)|: unmatched " + num(unmatched) + " > naive " +
                num(naive) + " >= rc " + num(rc));
  }
  const double s_ml = mixed_at("X/matched-ml/small");
  const double s_rc = mixed_at("X/matched-rc/small");
  const double s_nv = mixed_at("X/matched-naive/small");
  c.check(s_rc < s_ml && s_rc < s_nv,
          "small |d_s(X)|: rc " + num(s_rc) + " below ml " + num(s_ml) +
              " and naive " + num(s_nv));
  for (const std::string cls : {"large", "moderate", "small"}) {
    const auto& src = cls == "large" ? large : mixed;
    const double ml = src.at("X/matched-ml/" + cls);
    const double un = src.at("X/unmatched/" + cls);
    c.check(ml < un, cls + " |d_s(X)|: matched-ml " + num(ml) + " < unmatched " +
                         num(un));
  }
  const double w_un = mixed_at("W/unmatched/small");
  const double w_ml = mixed_at("W/matched-ml/small");
  const double w_nv = mixed_at("W/matched-naive/small");
  const double ml_gain = w_un - w_ml;
  const double nv_gain = w_un - w_nv;
  c.check(ml_gain < 0.5 * nv_gain,
          "small |d_s(W)| improvement: ml " + num(ml_gain) + " < 50% of naive " +
              num(nv_gain));
  c.info("small |d_s(W)|: unmatched " + num(w_un) + ", ml " + num(w_ml) +
         ", naive " + num(w_nv));
  return c;
}

std::pair<double, double> dgp_moments(const SimConfig& config, int reps) {
  std::vector<double> fracs(reps), gaps(reps);
  parallel_for(reps, 0, [&](int rep) {
    Rng rng = Rng::for_stream(config.master_seed, rep);
    const SimulatedPopulation pop = generate_population(config, rng);
    int treated = 0;
    std::vector<double> all;
    double t_sum = 0.0, c_sum = 0.0;
    int t_n = 0, c_n = 0;
    for (int i = 0; i < config.n_schools; ++i) {
      const int t = pop.dataset.records[i].treatment;
      treated += t;
      for (int k = 0; k < config.n_subgroups; ++k) {
        all.push_back(pop.x_true(i, k));
        if (t == 1) {
          t_sum += pop.x_true(i, k);
          ++t_n;
        } else {
          c_sum += pop.x_true(i, k);
          ++c_n;
        }
      }
    }
    fracs[rep] = static_cast<double>(treated) / config.n_schools;
    gaps[rep] = (t_sum / t_n - c_sum / c_n) / pooled_sd(all);
  });
  double frac = 0.0, gap = 0.0;
  for (int r = 0; r < reps; ++r) {
    frac += fracs[r] / reps;
    gap += gaps[r] / reps;
  }
  return {frac, gap};
}

Criterion criterion_dgp() {
  Criterion c{"5. DGP checks (mixed design)"};
  SimConfig config = study_config("mixed", 0, {1.0}, 41005);
  config.effect_amplitude = 0.0;

  const auto [frac, gap] = dgp_moments(config, 1000);
  c.check(std::abs(frac - 1.0 / 3.0) <= 0.02,
          "treated fraction " + num(frac, 4) + " within 1/3 +- 0.02");
  c.check(std::abs(gap - (-0.7)) <= 0.05,
          "X gap " + num(gap, 4) + " pooled SDs within -0.7 +- 0.05");
  {
    SimConfig large = config;
    large.design = "large";
    const auto [lfrac, lgap] = dgp_moments(large, 1000);
    c.info("all-large design for comparison: fraction " + num(lfrac, 4) +
           ", X gap " + num(lgap, 4));
  }

  const double amplitude = calibrate_effect(config, config.master_seed);
  config.effect_amplitude = amplitude;
  double ett = 0.0;
  long cells = 0;
  for (int rep = 0; rep < 300; ++rep) {
    Rng rng = Rng::for_stream(config.master_seed + 1, rep);
    const SimulatedPopulation pop = generate_population(config, rng);
    for (int i = 0; i < config.n_schools; ++i) {
      if (pop.dataset.records[i].treatment != 1) continue;
      for (int k = 0; k < config.n_subgroups; ++k) {
        ett += pop.effect(i, k);
        ++cells;
      }
    }
  }
  ett /= static_cast<double>(cells);
  c.check(std::abs(ett - 5.5) <= 0.05,
          "calibrated ETT " + num(ett, 4) + " within 5.5 +- 0.05 (amplitude " +
              num(amplitude, 3) + ")");
  return c;
}

Criterion criterion_hlm_oracle() {
  Criterion c{"6. HLM oracle: variance recovery and closed-form shrinkage"};
  SimConfig config = study_config("large", 0, {1.0}, 41006);
  config.effect_amplitude = 0.0;
  const int reps = 200;
  std::vector<double> t1(reps), t2(reps);
  parallel_for(reps, 0, [&](int rep) {
    Rng rng = Rng::for_stream(config.master_seed, rep);
    const SimulatedPopulation pop = generate_population(config, rng);
    const MeasurementModel sigma = build_sigma(pop.dataset);
    const HlmFit fit = fit_hlm(pop.dataset, sigma, "test");
    if (!fit.converged) throw NumericError("HLM fit did not converge");
    t1[rep] = std::sqrt(fit.tau1_sq);
    t2[rep] = std::sqrt(fit.tau2_sq);
  });
  auto mean_se = [&](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x / v.size();
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::make_pair(m, std::sqrt(ss / (v.size() - 1) / v.size()));
  };
  const auto [m1, se1] = mean_se(t1);
  const auto [m2, se2] = mean_se(t2);
  c.check(std::abs(m1 - 40.229) <= 2 * se1,
          "mean tau1-hat " + num(m1) + " within 2 MC SE (" + num(2 * se1) +
              ") of 40.229");
  c.check(std::abs(m2 - 59.149) <= 2 * se2,
          "mean tau2-hat " + num(m2) + " within 2 MC SE (" + num(2 * se2) +
              ") of 59.149");

  // univariate closed-form shrinkage
  const double tau1_sq = 900.0, tau2_sq = 1600.0, gamma0 = 1470.0;
  const double w = 1520.0, csem = 250.0;
  const unsigned m = 10;
  const Dataset ds =
      testing::make_dataset({"a"}, {}, {1}, {{}}, {{w}}, {{m}}, csem);
  HlmFit fit;
  fit.assessment = "test";
  fit.gamma0 = gamma0;
  fit.gamma_z = Eigen::VectorXd(0);
  fit.tau1_sq = tau1_sq;
  fit.tau2_sq = tau2_sq;
  fit.converged = true;
  const EbPredictions eb = predict_eb(fit, ds, build_sigma(ds), "test");
  const double tau_sq = tau1_sq + tau2_sq;
  const double v = csem * csem / m;
  const double expected = gamma0 + tau_sq / (tau_sq + v) * (w - gamma0);
  const double diff = std::abs(eb.xhat(0, 0) - expected);
  c.check(diff <= 1e-10, "closed-form shrinkage |diff| = " + num(diff, 14));
  return c;
}

Criterion criterion_matching_oracle() {
  Criterion c{"7. matching oracle: flow vs enumeration, caliper monotonicity"};
  Rng rng(41007);
  int mismatches = 0, monotonic_violations = 0, infeasible = 0;
  double worst_gap = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const int n_t = 1 + static_cast<int>(rng.uniform_int(4));
    const int n_c = 1 + static_cast<int>(rng.uniform_int(4));
    std::vector<double> logits;
    std::vector<int> treatment;
    for (int i = 0; i < n_t; ++i) {
      logits.push_back(0.1 * static_cast<double>(rng.uniform_int(30)));
      treatment.push_back(1);
    }
    for (int j = 0; j < n_c; ++j) {
      logits.push_back(0.1 * static_cast<double>(rng.uniform_int(30)));
      treatment.push_back(0);
    }
    MatchSpec spec;
    spec.caliper_logits = 0.3 + 0.25 * static_cast<double>(rng.uniform_int(4));
    spec.max_controls_per_treated = 1 + static_cast<int>(rng.uniform_int(5));
    const MatchResult flow = full_match(logits, treatment, spec);
    const auto oracle = testing::enumerate_full_match(logits, treatment, spec);
    if (flow.feasible != oracle.feasible) {
      ++mismatches;
      continue;
    }
    if (oracle.feasible) {
      const double gap = std::abs(flow.total_distance - oracle.total_distance);
      worst_gap = std::max(worst_gap, gap);
      if (flow.n_matched_controls() != oracle.n_controls_matched || gap > 1e-9) {
        ++mismatches;
      }
    } else {
      ++infeasible;
    }
    std::size_t prev = logits.size() + 1;
    for (const double cal : {0.25, 0.5, 1.0, 2.0}) {
      MatchSpec wide = spec;
      wide.caliper_logits = cal;
      const MatchResult r = full_match(logits, treatment, wide);
      if (r.unmatched_treated.size() > prev) ++monotonic_violations;
      prev = r.unmatched_treated.size();
    }
  }
  c.check(mismatches == 0, "flow = enumeration on 500 instances (mismatches: " +
                               std::to_string(mismatches) + ", worst distance gap " +
                               num(worst_gap, 12) + ")");
  c.check(monotonic_violations == 0,
          "caliper monotonicity violations: " + std::to_string(monotonic_violations));
  c.info("ratio-infeasible instances exercised: " + std::to_string(infeasible));
  return c;
}

Criterion criterion_missing_data() {
  Criterion c{"8. missing-data parity with 20% masked cells"};
  SimConfig config = study_config("mixed", 0, {1.0}, 41008);
  config.effect_amplitude = 0.0;

  auto ml_balance = [&](const Dataset& ds) {
    const MeasurementModel sigma = build_sigma(ds);
    const HlmFit fit = fit_hlm(ds, sigma, "test");
    const EbPredictions eb = predict_eb(fit, ds, sigma, "test");
    const PsFit ml = ps_ml(ds, eb, sigma);
    MatchSpec spec;
    spec.caliper_logits = 1.0;
    spec.max_treated_per_control = 0;  // replication convention: unbounded
    const MatchResult mr = full_match(ml, ds, spec);
    std::vector<int> treatment(ds.n_schools());
    for (int i = 0; i < ds.n_schools(); ++i) treatment[i] = ds.records[i].treatment;
    std::vector<double> weights(ds.n_schools(), 0.0);
    for (const auto& set : mr.sets) {
      for (int i : set.treated) weights[i] = 1.0;
      for (int j : set.controls) weights[j] = set.control_weight;
    }
    double total = 0.0;
    for (int k = 0; k < ds.n_cells(); ++k) {
      std::vector<double> xhat(ds.n_schools());
      for (int i = 0; i < ds.n_schools(); ++i) xhat[i] = eb.xhat(i, k);
      total += std::abs(standardized_difference(xhat, treatment, weights,
                                                pooled_sd(xhat)));
    }
    return total / ds.n_cells();
  };

  // Paired datasets: the balance comparison averages out matching noise;
  // the scoring/error checks run on the first pair.
  const int n_pairs = 20;
  std::vector<double> full_balances(n_pairs), masked_balances(n_pairs);
  bool naive_errored = false, all_scored = true;
  int n_masked = 0;
  parallel_for(n_pairs, 0, [&](int pair) {
    Rng rng = Rng::for_stream(config.master_seed, 2 * pair);
    const SimulatedPopulation pop = generate_population(config, rng);
    const Dataset& full = pop.dataset;
    Dataset masked = full;
    Rng mask_rng = Rng::for_stream(config.master_seed, 2 * pair + 1);
    for (auto& rec : masked.records) {
      for (auto& cell : rec.cells) {
        if (mask_rng.uniform() < 0.20) {
          cell.obtained_avg.reset();
          if (pair == 0) ++n_masked;
        }
      }
    }
    if (pair == 0) {
      try {
        ps_naive(masked);
      } catch (const DataError&) {
        naive_errored = true;
      }
      const MeasurementModel sigma = build_sigma(masked);
      const HlmFit fit = fit_hlm(masked, sigma, "test");
      const EbPredictions eb = predict_eb(fit, masked, sigma, "test");
      const PsFit rc = ps_rc(masked, eb);
      const PsFit ml = ps_ml(masked, eb, sigma);
      for (int i = 0; i < masked.n_schools(); ++i) {
        all_scored = all_scored && std::isfinite(rc.logit_score(i)) &&
                     std::isfinite(ml.logit_score(i)) && rc.prob(i) > 0.0 &&
                     rc.prob(i) < 1.0 && ml.prob(i) > 0.0 && ml.prob(i) < 1.0;
      }
    }
    full_balances[pair] = ml_balance(full);
    masked_balances[pair] = ml_balance(masked);
  });
  c.info("masked cells in the first dataset: " + std::to_string(n_masked) +
         " of " + std::to_string(4 * config.n_schools));
  c.check(naive_errored, "ps_naive on masked data raises a data error");
  c.check(all_scored, "rc and ml score every school on the masked data");

  double full_mean = 0.0, masked_mean = 0.0;
  for (int p = 0; p < n_pairs; ++p) {
    full_mean += full_balances[p] / n_pairs;
    masked_mean += masked_balances[p] / n_pairs;
  }
  c.check(std::abs(full_mean - masked_mean) <= 0.05,
          "matched ML balance on X-hat over " + std::to_string(n_pairs) +
              " paired datasets: masked " + num(masked_mean) + " vs unmasked " +
              num(full_mean) + " (diff " + num(std::abs(full_mean - masked_mean)) +
              " <= 0.05)");
  return c;
}

}  // namespace

int main() {
  const auto suite_start = std::chrono::steady_clock::now();
  std::vector<Criterion> results;
  auto guarded = [&](const std::string& name, auto&& fn) {
    try {
      results.push_back(fn());
    } catch (const std::exception& ex) {
      Criterion c{name};
      c.check(false, std::string("criterion aborted: ") + ex.what());
      results.push_back(std::move(c));
    }
  };

  guarded("1. mixture approximation vs quadrature oracle",
          criterion_mixture_fidelity);

  Studies studies;
  {
    const auto t0 = std::chrono::steady_clock::now();
    SimConfig mixed200 = study_config("mixed", 200, {0.5, 1.0}, 41001);
    studies.mixed200 = run_study(mixed200);
    SimConfig large200 = study_config("large", 200, {1.0}, 41002);
    studies.large200 = run_study(large200);
    SimConfig mixed500 = study_config("mixed", 500, {1.0}, 41003);
    studies.mixed500 = run_study(mixed500);
    std::printf("[setup] studies: mixed 200 + large 200 + mixed 500 reps in %.1f s\n",
                elapsed_s(t0));
  }

  guarded("2. Table 1 replication", [&] { return criterion_table1(studies); });
  guarded("3. Table 2 replication", [&] { return criterion_table2(studies); });
  guarded("4. Figure 1 qualitative patterns",
          [&] { return criterion_figure1(studies); });
  guarded("5. DGP checks", criterion_dgp);
  guarded("6. HLM oracle", criterion_hlm_oracle);
  guarded("7. matching oracle", criterion_matching_oracle);
  guarded("8. missing-data parity", criterion_missing_data);

  int failed = 0;
  for (const auto& c : results) {
    std::printf("[%s] %s\n", c.pass ? "PASS" : "FAIL", c.name.c_str());
    for (const auto& d : c.details) std::printf("%s\n", d.c_str());
    if (!c.pass) ++failed;
  }
  std::printf("\n%d of %zu criteria passed; total runtime %.1f s\n",
              static_cast<int>(results.size()) - failed, results.size(),
              elapsed_s(suite_start));
  return failed;
}

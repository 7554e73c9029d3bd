#include "tsps/sim.hpp"

#include <cmath>

#include "tsps/estimate.hpp"
#include "tsps/hlm.hpp"
#include "tsps/match.hpp"
#include "tsps/measure.hpp"
#include "tsps/ps.hpp"

namespace tsps {

namespace {

constexpr double kBetaA = 1.5, kBetaB = 0.5;

double beta_variance() {
  return kBetaA * kBetaB /
         ((kBetaA + kBetaB) * (kBetaA + kBetaB) * (kBetaA + kBetaB + 1.0));
}

}  // namespace

double SimConfig::gamma_z_value() const {
  const double f = covariate_signal_fraction;
  const double tau_total = tau1 * tau1 + tau2 * tau2;
  const double v_signal = tau_total * f / (1.0 - f);
  return std::sqrt(v_signal / (n_covariates * beta_variance()));
}

DesignSpec design_spec(const SimConfig& config) {
  DesignSpec spec;
  if (config.design == "large") {
    for (int k = 0; k < config.n_subgroups; ++k) {
      spec.size_laws.push_back(DiscreteLaw::uniform(1, 120));
      spec.size_class.push_back("large");
    }
    spec.class_order = {"large"};
  } else if (config.design == "mixed") {
    if (config.n_subgroups != 4) {
      throw DataError("mixed design requires 4 subgroups");
    }
    if (config.size_law != "truncated-geometric") {
      throw DataError("unknown size law: " + config.size_law);
    }
    const DiscreteLaw moderate =
        DiscreteLaw::truncated_geometric(1, 120, config.moderate_mean);
    const DiscreteLaw small =
        DiscreteLaw::truncated_geometric(1, 60, config.small_mean);
    spec.size_laws = {moderate, moderate, small, small};
    spec.size_class = {"moderate", "moderate", "small", "small"};
    spec.class_order = {"moderate", "small"};
  } else {
    throw DataError("unknown design: " + config.design);
  }
  return spec;
}

SimulatedPopulation generate_population(const SimConfig& config, Rng& rng) {
  const int n = config.n_schools;
  const int q = config.n_covariates;
  const int n_sub = config.n_subgroups;
  const DesignSpec spec = design_spec(config);
  const double gz = config.gamma_z_value();
  const double amplitude =
      std::isfinite(config.effect_amplitude) ? config.effect_amplitude : 0.0;

  Eigen::MatrixXd z(n, q), x(n, n_sub), w(n, n_sub), eps(n, n_sub);
  Eigen::MatrixXi sizes(n, n_sub);
  for (int i = 0; i < n; ++i) {
    double zsum = 0.0;
    for (int j = 0; j < q; ++j) {
      z(i, j) = rng.beta(kBetaA, kBetaB);
      zsum += z(i, j);
    }
    const double school_effect = rng.normal(0.0, config.tau1);
    for (int k = 0; k < n_sub; ++k) {
      x(i, k) = config.gamma0 + gz * zsum + school_effect +
                rng.normal(0.0, config.tau2);
    }
    for (int k = 0; k < n_sub; ++k) {
      sizes(i, k) = spec.size_laws[k].sample(rng);
    }
    for (int k = 0; k < n_sub; ++k) {
      eps(i, k) = rng.normal(0.0, config.sigma / std::sqrt(sizes(i, k)));
      w(i, k) = x(i, k) + eps(i, k);
    }
  }

  // Treatment assignment centers W and Z at the realized sample means.
  const Eigen::RowVectorXd w_mean = w.colwise().mean();
  const Eigen::RowVectorXd z_mean = z.colwise().mean();
  Eigen::VectorXi t(n);
  for (int i = 0; i < n; ++i) {
    double eta = config.beta0;
    for (int k = 0; k < n_sub; ++k) {
      eta += config.beta_w_each * (w(i, k) - w_mean(k));
    }
    for (int j = 0; j < std::min(config.n_beta_z_nonzero, q); ++j) {
      eta += config.beta_z_each * (z(i, j) - z_mean(j));
    }
    t(i) = rng.bernoulli(inv_logit(eta)) ? 1 : 0;
  }

  SimulatedPopulation pop;
  pop.x_true = x;
  pop.noise = eps;
  pop.effect.resize(n, n_sub);
  pop.y0.resize(n, n_sub);
  pop.y1.resize(n, n_sub);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < n_sub; ++k) {
      const double xi = rng.normal(0.0, config.sigma / std::sqrt(sizes(i, k)));
      pop.effect(i, k) = amplitude * std::exp(-x(i, k) / 1000.0);
      pop.y0(i, k) = x(i, k) + xi;
      pop.y1(i, k) = pop.y0(i, k) + pop.effect(i, k);
    }
  }

  Dataset& ds = pop.dataset;
  ds.assessment_keys = {"test"};
  for (int k = 0; k < n_sub; ++k) {
    ds.subgroup_keys.push_back("sg" + std::to_string(k + 1));
    ds.cell_keys.push_back({ds.subgroup_keys.back(), "test"});
  }
  for (int j = 0; j < q; ++j) ds.covariate_names.push_back("z" + std::to_string(j + 1));
  ds.records.resize(n);
  for (int i = 0; i < n; ++i) {
    SchoolRecord& rec = ds.records[i];
    rec.school_id = "s" + std::to_string(i + 1);
    rec.treatment = t(i);
    rec.covariates.assign(z.row(i).begin(), z.row(i).end());
    for (int k = 0; k < n_sub; ++k) {
      SubgroupCell cell;
      cell.subgroup_key = ds.subgroup_keys[k];
      cell.assessment_key = "test";
      cell.size = static_cast<unsigned>(sizes(i, k));
      cell.obtained_avg = w(i, k);
      cell.csem = config.sigma;
      cell.outcome_avg = t(i) == 1 ? pop.y1(i, k) : pop.y0(i, k);
      rec.cells.push_back(std::move(cell));
    }
  }
  return pop;
}

double calibrate_effect(const SimConfig& config, std::uint64_t seed,
                        int min_treated_cells) {
  SimConfig base = config;
  base.effect_amplitude = 0.0;
  std::vector<double> decay;  // exp(-X/1000) over treated cells
  decay.reserve(min_treated_cells + 4096);
  for (int rep = 0; static_cast<int>(decay.size()) < min_treated_cells; ++rep) {
    if (rep > 10000) {
      throw NumericError("calibrate_effect: no treated cells generated");
    }
    Rng rng = Rng::for_stream(seed, 1000000 + rep);
    const SimulatedPopulation pop = generate_population(base, rng);
    for (int i = 0; i < base.n_schools; ++i) {
      if (pop.dataset.records[i].treatment != 1) continue;
      for (int k = 0; k < base.n_subgroups; ++k) {
        decay.push_back(std::exp(-pop.x_true(i, k) / 1000.0));
      }
    }
  }
  double mean_decay = 0.0;
  for (double d : decay) mean_decay += d;
  mean_decay /= static_cast<double>(decay.size());

  // The treated-mean effect is linear in the amplitude, so bisection on an
  // expanding bracket converges to machine precision.
  auto excess = [&](double a) { return a * mean_decay - config.target_ett; };
  double lo = 0.0, hi = 1.0;
  int guard = 0;
  while (excess(hi) < 0.0) {
    hi *= 2.0;
    if (++guard > 200) {
      throw NumericError("calibrate_effect: failed to bracket the amplitude");
    }
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (excess(mid) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

namespace {

std::vector<double> column(const Eigen::MatrixXd& m, int c) {
  std::vector<double> out(m.rows());
  for (int i = 0; i < m.rows(); ++i) out[i] = m(i, c);
  return out;
}

ReplicationRecord run_replication(const SimConfig& config, int rep) {
  ReplicationRecord rec;
  rec.rep = rep;
  rec.seed = config.master_seed;
  Rng rng = Rng::for_stream(config.master_seed, static_cast<std::uint64_t>(rep));
  const SimulatedPopulation pop = generate_population(config, rng);
  const Dataset& ds = pop.dataset;
  const int n = ds.n_schools();
  const int n_sub = config.n_subgroups;

  const MeasurementModel sigma = build_sigma(ds);
  const HlmFit fit = fit_hlm(ds, sigma, "test");
  const EbPredictions eb = predict_eb(fit, ds, sigma, "test");

  std::array<PsFit, kNumKinds> ps{ps_naive(ds), ps_rc(ds, eb), ps_ml(ds, eb, sigma)};

  std::vector<int> treatment(n);
  int n_treated = 0;
  for (int i = 0; i < n; ++i) {
    treatment[i] = ds.records[i].treatment;
    n_treated += treatment[i];
  }

  double realized = 0.0;
  int realized_n = 0;
  for (int i = 0; i < n; ++i) {
    if (treatment[i] != 1) continue;
    for (int k = 0; k < n_sub; ++k) {
      realized += pop.effect(i, k);
      ++realized_n;
    }
  }
  rec.true_ett = realized_n > 0 ? realized / realized_n : 0.0;

  // Matching at every caliper; estimates and balance use the estimation
  // caliper's matched samples.
  rec.unmatched_pct.assign(config.calipers.size(), {});
  std::array<MatchResult, kNumKinds> matched;
  for (std::size_t ci = 0; ci < config.calipers.size(); ++ci) {
    MatchSpec ms;
    ms.caliper_logits = config.calipers[ci];
    ms.max_controls_per_treated = config.max_controls_per_treated;
    ms.max_treated_per_control = config.max_treated_per_control;
    for (int kind = 0; kind < kNumKinds; ++kind) {
      MatchResult mr = full_match(ps[kind], ds, ms);
      if (!mr.feasible) {
        throw NumericError("full matching infeasible at caliper " +
                           std::to_string(config.calipers[ci]));
      }
      rec.unmatched_pct[ci][kind] =
          100.0 * static_cast<double>(mr.unmatched_treated.size()) / n_treated;
      if (config.calipers[ci] == config.estimation_caliper) {
        matched[kind] = std::move(mr);
      }
    }
  }

  for (int kind = 0; kind < kNumKinds; ++kind) {
    rec.ess[kind] = effective_sample_size(matched[kind]);
    for (int est = 0; est < kNumEstimators; ++est) {
      rec.estimates[kind][est].resize(n_sub);
    }
    for (int k = 0; k < n_sub; ++k) {
      const CellKey key = ds.cell_keys[k];
      rec.estimates[kind][static_cast<int>(Estimator::matching)][k] =
          matched_difference(matched[kind], ds, key).point;
      rec.estimates[kind][static_cast<int>(Estimator::weighting)][k] =
          odds_weighting(ps[kind], ds, key, true).point;
      rec.estimates[kind][static_cast<int>(Estimator::weighting_unnormalized)][k] =
          odds_weighting(ps[kind], ds, key, false).point;
      rec.estimates[kind][static_cast<int>(Estimator::pencomp)][k] =
          pencomp(ps[kind], ds, key).point;
    }
  }
  rec.marginal.resize(n_sub);
  for (int k = 0; k < n_sub; ++k) {
    rec.marginal[k] = marginal_difference(ds, ds.cell_keys[k]).point;
  }

  // Balance on the latent truth, the obtained averages, and the EB
  // predictions; denominators come from the unmatched sample.
  std::vector<double> unit_weights(n, 1.0);
  for (int fam = 0; fam < kNumFamilies; ++fam) {
    for (int s = 0; s < kNumSamples; ++s) {
      rec.balance[fam][s].resize(n_sub);
    }
  }
  for (int k = 0; k < n_sub; ++k) {
    std::array<std::vector<double>, kNumFamilies> values{
        column(pop.x_true, k), column(pop.x_true + pop.noise, k),
        column(eb.xhat, k)};
    for (int fam = 0; fam < kNumFamilies; ++fam) {
      const double sd = pooled_sd(values[fam]);
      rec.balance[fam][0][k] =
          standardized_difference(values[fam], treatment, unit_weights, sd);
      for (int kind = 0; kind < kNumKinds; ++kind) {
        std::vector<double> w(n, 0.0);
        for (const auto& set : matched[kind].sets) {
          for (int i : set.treated) w[i] = 1.0;
          for (int j : set.controls) w[j] = set.control_weight;
        }
        rec.balance[fam][1 + kind][k] =
            standardized_difference(values[fam], treatment, w, sd);
      }
    }
  }
  return rec;
}

}  // namespace

StudyResult run_study(const SimConfig& config_in) {
  SimConfig config = config_in;
  if (!std::isfinite(config.effect_amplitude)) {
    config.effect_amplitude = calibrate_effect(config, config.master_seed);
  }
  const DesignSpec spec = design_spec(config);
  bool uses_estimation_caliper = false;
  for (double c : config.calipers) {
    if (c == config.estimation_caliper) uses_estimation_caliper = true;
  }
  if (!uses_estimation_caliper) {
    throw DataError("estimation_caliper must be one of the calipers");
  }

  StudyResult result;
  result.config = config;
  result.records.resize(config.n_replications);
  parallel_for(config.n_replications, config.n_threads, [&](int rep) {
    try {
      result.records[rep] = run_replication(config, rep);
    } catch (const std::exception& ex) {
      result.records[rep].rep = rep;
      result.records[rep].failed = true;
      result.records[rep].error = ex.what();
    }
  });

  StudySummary& summary = result.summary;
  summary.n_replications = config.n_replications;
  for (const auto& rec : result.records) {
    if (rec.failed) ++summary.n_failed;
  }
  if (summary.n_failed * 100 > config.n_replications) {
    throw NumericError("more than 1% of replications failed; first error: " +
                       [&] {
                         for (const auto& r : result.records) {
                           if (r.failed) return r.error;
                         }
                         return std::string("?");
                       }());
  }

  // Ordered reductions keyed by caliper/kind/estimator/class.
  summary.unmatched_pct.assign(config.calipers.size(), {});
  int n_ok = 0;
  for (const auto& rec : result.records) {
    if (rec.failed) continue;
    ++n_ok;
    for (std::size_t ci = 0; ci < config.calipers.size(); ++ci) {
      for (int kind = 0; kind < kNumKinds; ++kind) {
        summary.unmatched_pct[ci][kind] += rec.unmatched_pct[ci][kind];
      }
    }
  }
  for (auto& row : summary.unmatched_pct) {
    for (double& v : row) v /= std::max(1, n_ok);
  }

  // Per-cell error draws -> per-cell bias/rmse -> class averages.
  for (int kind = 0; kind < kNumKinds; ++kind) {
    for (int est = 0; est < kNumEstimators; ++est) {
      for (const std::string& cls : spec.class_order) {
        std::vector<McCell> cells;
        for (int k = 0; k < config.n_subgroups; ++k) {
          if (spec.size_class[k] != cls) continue;
          std::vector<double> draws;
          for (const auto& rec : result.records) {
            if (!rec.failed) draws.push_back(rec.estimates[kind][est][k]);
          }
          cells.push_back(summarize_errors(draws, config.target_ett));
        }
        McCell avg;
        for (const auto& c : cells) {
          avg.bias += c.bias / cells.size();
          avg.rmse += c.rmse / cells.size();
          avg.n_replications = c.n_replications;
        }
        summary.errors[to_string(static_cast<PsKind>(kind)) + "/" +
                       kEstimatorNames[est] + "/" + cls] = avg;
      }
    }
  }
  for (const std::string& cls : spec.class_order) {
    std::vector<McCell> cells;
    for (int k = 0; k < config.n_subgroups; ++k) {
      if (spec.size_class[k] != cls) continue;
      std::vector<double> draws;
      for (const auto& rec : result.records) {
        if (!rec.failed) draws.push_back(rec.marginal[k]);
      }
      cells.push_back(summarize_errors(draws, config.target_ett));
    }
    McCell avg;
    for (const auto& c : cells) {
      avg.bias += c.bias / cells.size();
      avg.rmse += c.rmse / cells.size();
      avg.n_replications = c.n_replications;
    }
    summary.marginal_errors[cls] = avg;
  }

  for (int fam = 0; fam < kNumFamilies; ++fam) {
    for (int s = 0; s < kNumSamples; ++s) {
      for (const std::string& cls : spec.class_order) {
        double total = 0.0;
        int count = 0;
        for (int k = 0; k < config.n_subgroups; ++k) {
          if (spec.size_class[k] != cls) continue;
          for (const auto& rec : result.records) {
            if (rec.failed) continue;
            total += std::abs(rec.balance[fam][s][k]);
            ++count;
          }
        }
        summary.balance[std::string(kFamilyNames[fam]) + "/" + kSampleNames[s] +
                        "/" + cls] = count > 0 ? total / count : 0.0;
      }
    }
  }
  return result;
}

}  // namespace tsps

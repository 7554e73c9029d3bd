#include "tsps/hlm.hpp"

#include <cmath>
#include <limits>

#include "tsps/numeric.hpp"

namespace tsps {

namespace {

constexpr double kBig = 1e30;

// One school's non-withheld cells on the assessment being fit.
struct SchoolSlice {
  int school = 0;
  std::vector<int> cell_idx;
  std::vector<double> w;
  std::vector<double> v;  // known error variances
};

struct FitData {
  std::vector<SchoolSlice> slices;
  Eigen::MatrixXd design;  // [1, Z] per school with data (row-aligned to slices)
  int n_obs = 0;
  int p = 0;
};

FitData collect(const Dataset& dataset, const MeasurementModel& sigma,
                const std::string& assessment) {
  FitData data;
  data.p = dataset.n_covariates() + 1;
  for (int i = 0; i < dataset.n_schools(); ++i) {
    const auto& rec = dataset.records[i];
    SchoolSlice slice;
    slice.school = i;
    for (int c = 0; c < dataset.n_cells(); ++c) {
      if (dataset.cell_keys[c].assessment != assessment) continue;
      const SubgroupCell* cell = rec.find_cell(dataset.cell_keys[c]);
      if (!cell || cell->withheld()) continue;
      const auto var = sigma.error_variance(i, c);
      if (!var.has_value()) {
        throw DataError("no error variance for school " + rec.school_id +
                        " cell " + dataset.cell_keys[c].label());
      }
      slice.cell_idx.push_back(c);
      slice.w.push_back(*cell->obtained_avg);
      slice.v.push_back(*var);
    }
    if (!slice.cell_idx.empty()) {
      data.n_obs += static_cast<int>(slice.cell_idx.size());
      data.slices.push_back(std::move(slice));
    }
  }
  const int n = static_cast<int>(data.slices.size());
  data.design.resize(n, data.p);
  for (int r = 0; r < n; ++r) {
    data.design(r, 0) = 1.0;
    const auto& z = dataset.records[data.slices[r].school].covariates;
    for (int j = 0; j < data.p - 1; ++j) data.design(r, j + 1) = z[j];
  }
  return data;
}

struct Profile {
  double criterion = kBig;  // -2 * restricted log-likelihood, up to a constant
  Eigen::VectorXd gamma;
  bool ok = false;
};

// Per-school covariance is tau1^2 * J + diag(tau2^2 + v); inverted via the
// rank-one update so each evaluation is O(total cells).
Profile profile_gamma(const FitData& data, double t1, double t2) {
  const int n = static_cast<int>(data.slices.size());
  const int p = data.p;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
  double logdet = 0.0;
  double quad = 0.0;
  for (int r = 0; r < n; ++r) {
    const auto& sl = data.slices[r];
    double s = 0.0, t = 0.0, q = 0.0;
    for (std::size_t k = 0; k < sl.w.size(); ++k) {
      const double d = t2 + sl.v[k];
      logdet += std::log(d);
      s += 1.0 / d;
      t += sl.w[k] / d;
      q += sl.w[k] * sl.w[k] / d;
    }
    const double denom = 1.0 + t1 * s;
    logdet += std::log(denom);
    const double u = s / denom;
    const auto x = data.design.row(r).transpose();
    a.noalias() += u * x * x.transpose();
    b.noalias() += (t / denom) * x;
    quad += q - t1 * t * t / denom;
  }
  Profile out;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return out;
  out.gamma = ldlt.solve(b);
  double logdet_a = 0.0;
  for (int j = 0; j < p; ++j) {
    const double dj = ldlt.vectorD()(j);
    if (dj <= 0.0) return out;
    logdet_a += std::log(dj);
  }
  out.criterion = logdet + logdet_a + (quad - out.gamma.dot(b));
  out.ok = true;
  return out;
}

void check_collinearity(const FitData& data, const Dataset& dataset) {
  const Eigen::MatrixXd gram = data.design.transpose() * data.design;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(gram);
  qr.setThreshold(1e-10);
  if (qr.rank() == data.p) return;
  std::string names;
  const auto& perm = qr.colsPermutation().indices();
  for (int j = qr.rank(); j < data.p; ++j) {
    const int col = perm(j);
    if (!names.empty()) names += ", ";
    names += col == 0 ? "(intercept)" : dataset.covariate_names[col - 1];
  }
  throw NumericError("collinear covariates in HLM design: " + names);
}

}  // namespace

double reml_loglik(const Dataset& dataset, const MeasurementModel& sigma,
                   const std::string& assessment, double tau1_sq, double tau2_sq) {
  const FitData data = collect(dataset, sigma, assessment);
  const Profile prof = profile_gamma(data, tau1_sq, tau2_sq);
  if (!prof.ok) return -kBig;
  return -0.5 * (prof.criterion +
                 (data.n_obs - data.p) * std::log(2.0 * M_PI));
}

HlmFit fit_hlm(const Dataset& dataset, const MeasurementModel& sigma,
               const std::string& assessment) {
  const FitData data = collect(dataset, sigma, assessment);
  if (data.slices.size() < 2) {
    throw DataError("fit_hlm needs at least 2 schools with data on assessment " +
                    assessment);
  }
  check_collinearity(data, dataset);

  double w_mean = 0.0, w_var = 0.0;
  for (const auto& sl : data.slices) {
    for (double w : sl.w) w_mean += w;
  }
  w_mean /= data.n_obs;
  for (const auto& sl : data.slices) {
    for (double w : sl.w) w_var += (w - w_mean) * (w - w_mean);
  }
  w_var /= std::max(1, data.n_obs - 1);
  const double scale = std::max(w_var, 1e-6 * (1.0 + w_mean * w_mean));

  // Variances optimized on the log scale; log -> -inf represents 0.
  auto objective = [&](const std::vector<double>& log_tau) {
    const double t1 = std::exp(std::min(log_tau[0], 50.0));
    const double t2 = std::exp(std::min(log_tau[1], 50.0));
    const Profile prof = profile_gamma(data, t1, t2);
    return prof.ok ? prof.criterion : kBig;
  };

  const std::vector<double> start{std::log(scale / 3.0), std::log(scale / 3.0)};
  SimplexResult opt = nelder_mead(objective, start, 1.0, 1e-8, 500);
  const bool interior1 = std::exp(opt.x[0]) > 1e-7 * scale;
  const bool interior2 = std::exp(opt.x[1]) > 1e-7 * scale;
  if (interior1 && interior2) {
    SimplexResult polished = fd_newton_polish(objective, opt.x, 1e-5, 25);
    polished.converged = polished.converged || opt.converged;
    polished.iterations += opt.iterations;
    opt = polished;
  }

  double t1 = std::exp(opt.x[0]);
  double t2 = std::exp(opt.x[1]);
  double best = opt.value;

  // A coordinate pushed to the floor means the optimum sits on the
  // boundary; snap it to exactly zero when this does not hurt the fit.
  struct Candidate {
    double t1, t2;
  };
  std::vector<Candidate> candidates;
  if (!interior1) candidates.push_back({0.0, t2});
  if (!interior2) candidates.push_back({t1, 0.0});
  if (!interior1 && !interior2) candidates.push_back({0.0, 0.0});
  for (const auto& cand : candidates) {
    const Profile prof = profile_gamma(data, cand.t1, cand.t2);
    if (prof.ok && prof.criterion <= best + 1e-9 * (1.0 + std::abs(best))) {
      t1 = cand.t1;
      t2 = cand.t2;
      best = std::min(best, prof.criterion);
    }
  }

  const Profile prof = profile_gamma(data, t1, t2);
  if (!prof.ok) throw NumericError("HLM fit failed at the optimum");

  HlmFit fit;
  fit.assessment = assessment;
  fit.tau1_sq = t1;
  fit.tau2_sq = t2;
  fit.gamma0 = prof.gamma(0);
  fit.gamma_z = prof.gamma.tail(data.p - 1);
  fit.objective = -0.5 * (prof.criterion +
                          (data.n_obs - data.p) * std::log(2.0 * M_PI));
  fit.converged = opt.converged;
  fit.iterations = opt.iterations;
  return fit;
}

EbPredictions predict_eb(const HlmFit& fit, const Dataset& dataset,
                         const MeasurementModel& sigma,
                         const std::string& assessment) {
  if (!fit.converged) {
    throw NumericError("predict_eb requires a converged HLM fit");
  }
  const int n = dataset.n_schools();
  const int n_cells = dataset.n_cells();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EbPredictions eb;
  eb.xhat = Eigen::MatrixXd::Constant(n, n_cells, nan);
  eb.cond_var = Eigen::MatrixXd::Constant(n, n_cells, nan);
  eb.school_effect = Eigen::VectorXd::Zero(n);

  const double t1 = fit.tau1_sq, t2 = fit.tau2_sq;
  for (int i = 0; i < n; ++i) {
    const auto& rec = dataset.records[i];
    double fixed = fit.gamma0;
    for (int j = 0; j < fit.gamma_z.size(); ++j) {
      fixed += rec.covariates[j] * fit.gamma_z(j);
    }
    // Gather the observed cells that inform this school's random effects.
    std::vector<int> obs_cells;
    std::vector<double> resid, dvec;
    double s = 0.0, rho = 0.0;
    for (int c = 0; c < n_cells; ++c) {
      if (dataset.cell_keys[c].assessment != assessment) continue;
      const SubgroupCell* cell = rec.find_cell(dataset.cell_keys[c]);
      if (!cell || cell->withheld()) continue;
      const auto var = sigma.error_variance(i, c);
      if (!var.has_value()) continue;
      const double d = t2 + *var;
      obs_cells.push_back(c);
      resid.push_back(*cell->obtained_avg - fixed);
      dvec.push_back(d);
      s += 1.0 / d;
      rho += resid.back() / d;
    }
    const double denom = 1.0 + t1 * s;
    const double dc = t1 * rho / denom;
    eb.school_effect(i) = dc;
    const double u = s / denom;  // 1' V^-1 1

    for (int c = 0; c < n_cells; ++c) {
      if (dataset.cell_keys[c].assessment != assessment) continue;
      const SubgroupCell* cell = rec.find_cell(dataset.cell_keys[c]);
      if (!cell) continue;
      auto in_obs = std::find(obs_cells.begin(), obs_cells.end(), c);
      if (in_obs == obs_cells.end()) {
        // withheld: no subgroup-effect prediction, school effect only
        eb.xhat(i, c) = fixed + dc;
        eb.cond_var(i, c) = (t1 + t2) - t1 * t1 * u;
      } else {
        const std::size_t k = in_obs - obs_cells.begin();
        const double dsk = t2 * (resid[k] - dc) / dvec[k];
        eb.xhat(i, c) = fixed + dc + dsk;
        // Var(delta_c + delta_s | W) = a' (G - G Z' V^-1 Z G) a with
        // a = (1, e_k); reduces to (t1 + t2) - a~' V^-1 a~ for
        // a~ = t1 * 1 + t2 * e_k over the observed cells.
        const double da = t1 * s + t2 / dvec[k];
        const double sum_a2 = t1 * t1 * (s - 1.0 / dvec[k]) +
                              (t1 + t2) * (t1 + t2) / dvec[k];
        const double quad = sum_a2 - t1 * da * da / denom;
        eb.cond_var(i, c) = (t1 + t2) - quad;
      }
    }
  }
  return eb;
}

std::pair<HlmFit, EbPredictions> fit_hlm_two_pass(
    const Dataset& dataset, const std::map<std::string, CsemTable>& tables,
    const std::string& assessment) {
  // Pass 1: CSEMs at the obtained averages.
  auto obtained = [&](int school, int cell) -> std::optional<double> {
    const SubgroupCell* c =
        dataset.records[school].find_cell(dataset.cell_keys[cell]);
    return c ? c->obtained_avg : std::nullopt;
  };
  const MeasurementModel sigma1 = build_sigma(dataset, tables, obtained);
  const HlmFit fit1 = fit_hlm(dataset, sigma1, assessment);
  const EbPredictions eb1 = predict_eb(fit1, dataset, sigma1, assessment);

  // Pass 2: CSEMs at the first-pass EB predictions.
  auto predicted = [&](int school, int cell) -> std::optional<double> {
    if (dataset.cell_keys[cell].assessment == assessment &&
        eb1.has(school, cell)) {
      return eb1.xhat(school, cell);
    }
    return obtained(school, cell);
  };
  const MeasurementModel sigma2 = build_sigma(dataset, tables, predicted);
  const HlmFit fit2 = fit_hlm(dataset, sigma2, assessment);
  EbPredictions eb2 = predict_eb(fit2, dataset, sigma2, assessment);
  return {fit2, std::move(eb2)};
}

std::pair<std::vector<HlmFit>, EbPredictions> fit_eb_all(
    const Dataset& dataset, const MeasurementModel& sigma) {
  const int n = dataset.n_schools();
  const int n_cells = dataset.n_cells();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EbPredictions merged;
  merged.xhat = Eigen::MatrixXd::Constant(n, n_cells, nan);
  merged.cond_var = Eigen::MatrixXd::Constant(n, n_cells, nan);
  merged.school_effect = Eigen::VectorXd::Zero(n);

  std::vector<HlmFit> fits;
  bool first = true;
  for (const auto& assessment : dataset.assessment_keys) {
    HlmFit fit = fit_hlm(dataset, sigma, assessment);
    const EbPredictions eb = predict_eb(fit, dataset, sigma, assessment);
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < n_cells; ++c) {
        if (dataset.cell_keys[c].assessment != assessment) continue;
        merged.xhat(i, c) = eb.xhat(i, c);
        merged.cond_var(i, c) = eb.cond_var(i, c);
      }
    }
    if (first) {
      merged.school_effect = eb.school_effect;
      first = false;
    }
    fits.push_back(std::move(fit));
  }
  return {std::move(fits), std::move(merged)};
}

}  // namespace tsps

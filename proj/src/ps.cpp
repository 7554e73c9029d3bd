#include "tsps/ps.hpp"

#include <cmath>
#include <limits>
#include <set>

#include "tsps/numeric.hpp"

namespace tsps {

std::string to_string(PsKind kind) {
  switch (kind) {
    case PsKind::naive: return "naive";
    case PsKind::rc: return "rc";
    case PsKind::ml: return "ml";
  }
  return "?";
}

const MixtureConstants& MixtureConstants::monahan_stefanski() {
  static const MixtureConstants mix{
      {0.252201578098282, 0.585225059235736, 0.162573362665982},
      {0.907930837449693, 0.577787276140136, 0.36403772947977}};
  return mix;
}

double mixture_probability(double eta, double v, const MixtureConstants& mix) {
  if (v < 0.0) throw NumericError("mixture_probability: negative variance");
  double p = 0.0;
  for (int t = 0; t < 3; ++t) {
    p += mix.p[t] * normal_cdf(mix.s[t] * eta /
                               std::sqrt(1.0 + mix.s[t] * mix.s[t] * v));
  }
  return std::min(1.0 - 1e-15, std::max(1e-15, p));
}

double logistic_normal_oracle(double eta, double v) {
  if (v < 0.0) throw NumericError("logistic_normal_oracle: negative variance");
  if (v == 0.0) return inv_logit(eta);
  const double sd = std::sqrt(v);
  auto integrand = [&](double u) {
    const double z = (u - eta) / sd;
    return inv_logit(u) * std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * M_PI));
  };
  // The integrand is bounded by the normal tail; +-14 sd truncates far
  // below the 1e-9 tolerance.
  return adaptive_simpson(integrand, eta - 14.0 * sd, eta + 14.0 * sd, 1e-10);
}

LogisticFit fit_logistic(const Eigen::MatrixXd& x, const std::vector<int>& t) {
  const int n = static_cast<int>(t.size());
  const int q = static_cast<int>(x.cols());
  if (x.rows() != n) throw DataError("fit_logistic: X/T size mismatch");
  int ones = 0;
  for (int v : t) ones += v;
  if (ones == 0 || ones == n) {
    throw DataError("fit_logistic: both treatment classes must be present");
  }

  // Standardize columns internally; constant columns were the caller's job.
  Eigen::VectorXd mean(q), sd(q);
  for (int j = 0; j < q; ++j) {
    mean(j) = x.col(j).mean();
    const double var = (x.col(j).array() - mean(j)).square().sum() / std::max(1, n - 1);
    sd(j) = std::sqrt(var);
    if (sd(j) <= 0.0) {
      throw NumericError("fit_logistic: constant column " + std::to_string(j));
    }
  }
  Eigen::MatrixXd design(n, q + 1);
  design.col(0).setOnes();
  for (int j = 0; j < q; ++j) {
    design.col(j + 1) = (x.col(j).array() - mean(j)) / sd(j);
  }
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y(i) = t[i];

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(q + 1);
  beta(0) = logit(static_cast<double>(ones) / n);

  auto deviance_of = [&](const Eigen::VectorXd& b) {
    double dev = 0.0;
    for (int i = 0; i < n; ++i) {
      const double eta = design.row(i).dot(b);
      // -2[t*log(mu) + (1-t)*log(1-mu)] in a softplus form
      const double sp = eta > 30 ? eta : std::log1p(std::exp(eta));
      dev += 2.0 * (sp - y(i) * eta);
    }
    return dev;
  };

  LogisticFit fit;
  double dev = deviance_of(beta);
  Eigen::VectorXd mu(n), wt(n);
  for (int iter = 1; iter <= 100; ++iter) {
    fit.iterations = iter;
    for (int i = 0; i < n; ++i) {
      mu(i) = inv_logit(design.row(i).dot(beta));
      wt(i) = std::max(mu(i) * (1.0 - mu(i)), 1e-12);
    }
    const Eigen::VectorXd grad = design.transpose() * (y - mu);
    if (grad.lpNorm<Eigen::Infinity>() <= 1e-8) {
      fit.converged = true;
      break;
    }
    Eigen::MatrixXd hess = design.transpose() * wt.asDiagonal() * design;
    // keeps the solve sane when separation drives the weights to zero
    hess.diagonal().array() += 1e-10 * (1.0 + hess.diagonal().maxCoeff());
    Eigen::LDLT<Eigen::MatrixXd> ldlt(hess);
    if (ldlt.info() != Eigen::Success) {
      throw NumericError("fit_logistic: singular information matrix");
    }
    const Eigen::VectorXd step = ldlt.solve(grad);
    double scale = 1.0;
    for (int half = 0; half < 40; ++half) {
      const Eigen::VectorXd cand = beta + scale * step;
      const double cand_dev = deviance_of(cand);
      if (cand_dev <= dev + 1e-12) {
        beta = cand;
        dev = cand_dev;
        break;
      }
      scale *= 0.5;
    }
  }
  for (int i = 0; i < n; ++i) {
    const double p = inv_logit(design.row(i).dot(beta));
    if (p < 1e-10 || p > 1.0 - 1e-10) fit.separation = true;
  }
  // a vanishing deviance means the classes are perfectly predicted
  if (dev < 1e-6 * n) fit.separation = true;
  fit.deviance = dev;

  // Map back to the original column scale.
  fit.beta = Eigen::VectorXd(q + 1);
  fit.beta(0) = beta(0);
  for (int j = 0; j < q; ++j) {
    fit.beta(j + 1) = beta(j + 1) / sd(j);
    fit.beta(0) -= beta(j + 1) * mean(j) / sd(j);
  }
  return fit;
}

namespace {

// Builds [scores | covariates] for the logistic fit, dropping constant
// columns (their coefficient is zero). Rows = the given school subset.
struct PsDesign {
  Eigen::MatrixXd x;           // kept columns only
  std::vector<int> kept;       // column index in the full layout
  std::vector<int> dropped;    // constant columns
  int n_cells = 0;
  int n_cov = 0;
};

PsDesign build_design(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& z) {
  PsDesign d;
  d.n_cells = static_cast<int>(scores.cols());
  d.n_cov = static_cast<int>(z.cols());
  Eigen::MatrixXd full(scores.rows(), d.n_cells + d.n_cov);
  full << scores, z;
  for (int j = 0; j < full.cols(); ++j) {
    const double lo = full.col(j).minCoeff(), hi = full.col(j).maxCoeff();
    if (hi - lo > 0.0) {
      d.kept.push_back(j);
    } else {
      d.dropped.push_back(j);
    }
  }
  d.x.resize(full.rows(), d.kept.size());
  for (std::size_t k = 0; k < d.kept.size(); ++k) d.x.col(k) = full.col(d.kept[k]);
  return d;
}

// Scatters a fit over kept columns back into (beta0, beta_w, beta_z).
void unpack(const PsDesign& d, const LogisticFit& lf, PsFit& out) {
  out.beta0 = lf.beta(0);
  out.beta_w = Eigen::VectorXd::Zero(d.n_cells);
  out.beta_z = Eigen::VectorXd::Zero(d.n_cov);
  for (std::size_t k = 0; k < d.kept.size(); ++k) {
    const int j = d.kept[k];
    if (j < d.n_cells) {
      out.beta_w(j) = lf.beta(k + 1);
    } else {
      out.beta_z(j - d.n_cells) = lf.beta(k + 1);
    }
  }
  out.info = lf;
  out.info.dropped_columns = d.dropped;
}

Eigen::MatrixXd covariate_matrix(const Dataset& dataset) {
  Eigen::MatrixXd z(dataset.n_schools(), dataset.n_covariates());
  for (int i = 0; i < dataset.n_schools(); ++i) {
    for (int j = 0; j < dataset.n_covariates(); ++j) {
      z(i, j) = dataset.records[i].covariates[j];
    }
  }
  return z;
}

void fill_scores(PsFit& fit, const Eigen::MatrixXd& scores, const Eigen::MatrixXd& z) {
  const int n = static_cast<int>(scores.rows());
  fit.prob.resize(n);
  fit.logit_score.resize(n);
  for (int i = 0; i < n; ++i) {
    double eta = fit.beta0;
    for (int c = 0; c < scores.cols(); ++c) {
      if (fit.beta_w(c) != 0.0) eta += fit.beta_w(c) * scores(i, c);
    }
    for (int j = 0; j < z.cols(); ++j) eta += fit.beta_z(j) * z(i, j);
    const double p = inv_logit(eta);
    fit.prob(i) = std::min(1.0 - 1e-15, std::max(1e-15, p));
    fit.logit_score(i) = eta;
  }
}

}  // namespace

double ml_marginal_ps(double beta0, const Eigen::VectorXd& beta_w,
                      const Eigen::VectorXd& beta_z,
                      const Eigen::VectorXd& xhat_row,
                      const Eigen::VectorXd& variance_row,
                      const Eigen::VectorXd& z) {
  double eta = beta0;
  double v = 0.0;
  for (int c = 0; c < beta_w.size(); ++c) {
    if (beta_w(c) == 0.0) continue;
    if (!std::isfinite(xhat_row(c)) || !std::isfinite(variance_row(c))) {
      throw DataError("ml_marginal_ps: missing prediction or variance for a "
                      "cell with nonzero coefficient");
    }
    eta += beta_w(c) * xhat_row(c);
    v += beta_w(c) * beta_w(c) * variance_row(c);
  }
  for (int j = 0; j < beta_z.size(); ++j) eta += beta_z(j) * z(j);
  return mixture_probability(eta, v);
}

PsFit ps_naive(const Dataset& dataset) {
  const int n = dataset.n_schools();
  const int n_cells = dataset.n_cells();
  Eigen::MatrixXd w(n, n_cells);
  std::set<std::string> withheld;
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < n_cells; ++c) {
      const SubgroupCell* cell =
          dataset.records[i].find_cell(dataset.cell_keys[c]);
      if (!cell || cell->withheld()) {
        withheld.insert(dataset.records[i].school_id);
        continue;
      }
      w(i, c) = *cell->obtained_avg;
    }
  }
  if (!withheld.empty()) {
    std::string ids;
    for (const auto& id : withheld) {
      if (!ids.empty()) ids += ", ";
      ids += id;
    }
    throw DataError(
        "ps_naive cannot score schools with withheld or absent averages: " + ids);
  }
  const Eigen::MatrixXd z = covariate_matrix(dataset);
  const PsDesign design = build_design(w, z);
  std::vector<int> t(n);
  for (int i = 0; i < n; ++i) t[i] = dataset.records[i].treatment;

  PsFit fit;
  fit.kind = PsKind::naive;
  if (design.kept.empty()) {
    // all columns constant: intercept-only model
    int ones = 0;
    for (int v : t) ones += v;
    if (ones == 0 || ones == n) {
      throw DataError("ps_naive: both treatment classes must be present");
    }
    LogisticFit lf;
    lf.beta = Eigen::VectorXd::Constant(1, logit(static_cast<double>(ones) / n));
    lf.converged = true;
    PsDesign empty = design;
    unpack(empty, lf, fit);
  } else {
    unpack(design, fit_logistic(design.x, t), fit);
  }
  fill_scores(fit, w, z);
  return fit;
}

PsFit ps_rc(const Dataset& dataset, const EbPredictions& eb) {
  const int n = dataset.n_schools();
  const int n_cells = dataset.n_cells();
  Eigen::MatrixXd xhat(n, n_cells);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < n_cells; ++c) {
      if (!eb.has(i, c)) {
        throw DataError("ps_rc: no EB prediction for school " +
                        dataset.records[i].school_id + " cell " +
                        dataset.cell_keys[c].label());
      }
      xhat(i, c) = eb.xhat(i, c);
    }
  }
  const Eigen::MatrixXd z = covariate_matrix(dataset);
  const PsDesign design = build_design(xhat, z);
  std::vector<int> t(n);
  for (int i = 0; i < n; ++i) t[i] = dataset.records[i].treatment;

  PsFit fit;
  fit.kind = PsKind::rc;
  unpack(design, fit_logistic(design.x, t), fit);
  fill_scores(fit, xhat, z);
  return fit;
}

PsFit ps_ml(const Dataset& dataset, const EbPredictions& eb,
            const MeasurementModel& sigma) {
  const int n = dataset.n_schools();
  const int n_cells = dataset.n_cells();
  const Eigen::MatrixXd z = covariate_matrix(dataset);

  // The coefficient fit uses only schools with every model cell observed.
  std::vector<int> complete;
  Eigen::MatrixXd w(n, n_cells);
  for (int i = 0; i < n; ++i) {
    bool ok = true;
    for (int c = 0; c < n_cells; ++c) {
      const SubgroupCell* cell =
          dataset.records[i].find_cell(dataset.cell_keys[c]);
      if (!cell || cell->withheld()) {
        ok = false;
      } else {
        w(i, c) = *cell->obtained_avg;
      }
    }
    if (ok) complete.push_back(i);
  }
  if (complete.size() < 2) {
    throw DataError("ps_ml: fewer than 2 schools with complete model cells");
  }
  Eigen::MatrixXd w_fit(complete.size(), n_cells);
  Eigen::MatrixXd z_fit(complete.size(), z.cols());
  std::vector<int> t_fit(complete.size());
  for (std::size_t r = 0; r < complete.size(); ++r) {
    w_fit.row(r) = w.row(complete[r]);
    z_fit.row(r) = z.row(complete[r]);
    t_fit[r] = dataset.records[complete[r]].treatment;
  }
  const PsDesign design = build_design(w_fit, z_fit);

  PsFit fit;
  fit.kind = PsKind::ml;
  unpack(design, fit_logistic(design.x, t_fit), fit);

  // Score every school through the marginal mixture.
  fit.prob.resize(n);
  fit.logit_score.resize(n);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd xhat_row(n_cells), var_row(n_cells);
    for (int c = 0; c < n_cells; ++c) {
      xhat_row(c) = eb.has(i, c) ? eb.xhat(i, c) : nan;
      const auto v = sigma.error_variance(i, c);
      var_row(c) = v.has_value() ? *v : nan;
    }
    const double p = ml_marginal_ps(fit.beta0, fit.beta_w, fit.beta_z,
                                    xhat_row, var_row, z.row(i).transpose());
    fit.prob(i) = p;
    fit.logit_score(i) = logit(p);
  }
  return fit;
}

}  // namespace tsps

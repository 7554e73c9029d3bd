#include "tsps/numeric.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace tsps {

double normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

double inv_logit(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p) - std::log1p(-p); }

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

Rng Rng::for_stream(std::uint64_t master_seed, std::uint64_t stream) {
  std::uint64_t state = master_seed;
  std::uint64_t a = splitmix64(state);
  state ^= stream * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL;
  std::uint64_t b = splitmix64(state);
  return Rng(a ^ b);
}

double Rng::uniform() {
  // 53-bit mantissa in [0, 1)
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // Box-Muller; u1 in (0, 1]
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  return static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(engine_()) * n) >> 64);
}

double Rng::gamma(double shape) {
  if (shape <= 0.0) throw std::invalid_argument("gamma shape must be > 0");
  if (shape < 1.0) {
    // Boost to shape+1 and rescale (Marsaglia-Tsang)
    const double u = uniform();
    return gamma(shape + 1.0) * std::pow(u <= 0.0 ? 1e-300 : u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
      return d * v;
    }
  }
}

double Rng::beta(double a, double b) {
  const double x = gamma(a);
  const double y = gamma(b);
  return x / (x + y);
}

DiscreteLaw::DiscreteLaw(int lo, std::vector<double> pmf) : lo_(lo) {
  double total = 0.0;
  for (double p : pmf) total += p;
  if (total <= 0.0) throw std::invalid_argument("DiscreteLaw: empty pmf");
  cdf_.resize(pmf.size());
  double acc = 0.0;
  mean_ = 0.0;
  for (std::size_t i = 0; i < pmf.size(); ++i) {
    acc += pmf[i] / total;
    cdf_[i] = acc;
    mean_ += (lo_ + static_cast<double>(i)) * pmf[i] / total;
  }
  cdf_.back() = 1.0;
}

DiscreteLaw DiscreteLaw::truncated_geometric(int lo, int hi, double target_mean) {
  if (target_mean <= lo || target_mean >= hi) {
    throw std::invalid_argument("truncated_geometric: target mean outside support");
  }
  const int n = hi - lo + 1;
  auto mean_for = [&](double rho) {
    double num = 0.0, den = 0.0;
    for (int i = 0; i < n; ++i) {
      const int m = lo + i;
      const double w = std::pow(1.0 - rho, m);
      num += m * w;
      den += w;
    }
    return num / den;
  };
  double a = 1e-12, b = 1.0 - 1e-12;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (a + b);
    if (mean_for(mid) > target_mean) {
      a = mid;
    } else {
      b = mid;
    }
  }
  const double rho = 0.5 * (a + b);
  std::vector<double> pmf(n);
  for (int i = 0; i < n; ++i) pmf[i] = std::pow(1.0 - rho, lo + i);
  return DiscreteLaw(lo, std::move(pmf));
}

DiscreteLaw DiscreteLaw::uniform(int lo, int hi) {
  return DiscreteLaw(lo, std::vector<double>(hi - lo + 1, 1.0));
}

int DiscreteLaw::sample(Rng& rng) const {
  const double u = rng.uniform();
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  const auto idx = std::min<std::ptrdiff_t>(it - cdf_.begin(),
                                            static_cast<std::ptrdiff_t>(cdf_.size()) - 1);
  return lo_ + static_cast<int>(idx);
}

double DiscreteLaw::mean() const { return mean_; }

SimplexResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                          std::vector<double> start, double step,
                          double rel_tol, int max_iter) {
  const int n = static_cast<int>(start.size());
  std::vector<std::vector<double>> pts(n + 1, start);
  for (int i = 0; i < n; ++i) pts[i + 1][i] += step;
  std::vector<double> vals(n + 1);
  for (int i = 0; i <= n; ++i) vals[i] = f(pts[i]);

  SimplexResult res;
  int iter = 0;
  for (; iter < max_iter; ++iter) {
    // order ascending
    std::vector<int> ord(n + 1);
    for (int i = 0; i <= n; ++i) ord[i] = i;
    std::sort(ord.begin(), ord.end(), [&](int a, int b) { return vals[a] < vals[b]; });
    const int best = ord[0], worst = ord[n], second = ord[n - 1];
    const double spread = std::abs(vals[worst] - vals[best]);
    if (spread <= rel_tol * (std::abs(vals[best]) + rel_tol)) {
      res.converged = true;
      break;
    }
    std::vector<double> centroid(n, 0.0);
    for (int i = 0; i <= n; ++i) {
      if (i == worst) continue;
      for (int d = 0; d < n; ++d) centroid[d] += pts[i][d] / n;
    }
    auto blend = [&](double coef) {
      std::vector<double> p(n);
      for (int d = 0; d < n; ++d) {
        p[d] = centroid[d] + coef * (pts[worst][d] - centroid[d]);
      }
      return p;
    };
    const auto refl = blend(-1.0);
    const double f_refl = f(refl);
    if (f_refl < vals[best]) {
      const auto expa = blend(-2.0);
      const double f_expa = f(expa);
      if (f_expa < f_refl) {
        pts[worst] = expa;
        vals[worst] = f_expa;
      } else {
        pts[worst] = refl;
        vals[worst] = f_refl;
      }
    } else if (f_refl < vals[second]) {
      pts[worst] = refl;
      vals[worst] = f_refl;
    } else {
      const auto contr = blend(f_refl < vals[worst] ? -0.5 : 0.5);
      const double f_contr = f(contr);
      if (f_contr < std::min(f_refl, vals[worst])) {
        pts[worst] = contr;
        vals[worst] = f_contr;
      } else {
        // shrink toward best
        for (int i = 0; i <= n; ++i) {
          if (i == best) continue;
          for (int d = 0; d < n; ++d) {
            pts[i][d] = pts[best][d] + 0.5 * (pts[i][d] - pts[best][d]);
          }
          vals[i] = f(pts[i]);
        }
      }
    }
  }
  int best = 0;
  for (int i = 1; i <= n; ++i) {
    if (vals[i] < vals[best]) best = i;
  }
  res.x = pts[best];
  res.value = vals[best];
  res.iterations = iter;
  return res;
}

SimplexResult fd_newton_polish(const std::function<double(const std::vector<double>&)>& f,
                               std::vector<double> start, double h, int max_iter) {
  const int n = static_cast<int>(start.size());
  SimplexResult res;
  res.x = std::move(start);
  res.value = f(res.x);
  for (int iter = 0; iter < max_iter; ++iter) {
    res.iterations = iter + 1;
    std::vector<double> grad(n);
    std::vector<std::vector<double>> hess(n, std::vector<double>(n, 0.0));
    for (int i = 0; i < n; ++i) {
      auto xp = res.x, xm = res.x;
      xp[i] += h;
      xm[i] -= h;
      const double fp = f(xp), fm = f(xm);
      grad[i] = (fp - fm) / (2 * h);
      hess[i][i] = (fp - 2 * res.value + fm) / (h * h);
    }
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        auto xpp = res.x, xpm = res.x, xmp = res.x, xmm = res.x;
        xpp[i] += h; xpp[j] += h;
        xpm[i] += h; xpm[j] -= h;
        xmp[i] -= h; xmp[j] += h;
        xmm[i] -= h; xmm[j] -= h;
        hess[i][j] = hess[j][i] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4 * h * h);
      }
    }
    double gnorm = 0.0;
    for (double g : grad) gnorm += g * g;
    gnorm = std::sqrt(gnorm);
    if (gnorm < 1e-10) {
      res.converged = true;
      break;
    }
    // Solve hess * step = grad (2x2 or small n; Gaussian elimination)
    std::vector<double> step = grad;
    {
      auto a = hess;
      bool ok = true;
      for (int c = 0; c < n && ok; ++c) {
        int piv = c;
        for (int r = c + 1; r < n; ++r) {
          if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
        }
        if (std::abs(a[piv][c]) < 1e-14) { ok = false; break; }
        std::swap(a[piv], a[c]);
        std::swap(step[piv], step[c]);
        for (int r = c + 1; r < n; ++r) {
          const double fac = a[r][c] / a[c][c];
          for (int k = c; k < n; ++k) a[r][k] -= fac * a[c][k];
          step[r] -= fac * step[c];
        }
      }
      if (ok) {
        for (int c = n - 1; c >= 0; --c) {
          for (int k = c + 1; k < n; ++k) step[c] -= a[c][k] * step[k];
          step[c] /= a[c][c];
        }
      } else {
        for (int c = 0; c < n; ++c) step[c] = grad[c];  // gradient fallback
      }
    }
    double scale = 1.0;
    bool improved = false;
    for (int half = 0; half < 30; ++half) {
      auto cand = res.x;
      for (int d = 0; d < n; ++d) cand[d] -= scale * step[d];
      const double fc = f(cand);
      if (fc <= res.value) {
        improved = (res.value - fc) > 0.0;
        res.x = cand;
        res.value = fc;
        break;
      }
      scale *= 0.5;
    }
    if (!improved && gnorm < 1e-6) {
      res.converged = true;
      break;
    }
    if (!improved) break;
  }
  return res;
}

namespace {

double simpson_rule(const std::function<double(double)>& f, double a, double fa,
                    double b, double fb, double m, double fm) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

double simpson_rec(const std::function<double(double)>& f, double a, double fa,
                   double b, double fb, double m, double fm, double whole,
                   double tol, int depth) {
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = simpson_rule(f, a, fa, m, fm, lm, flm);
  const double right = simpson_rule(f, m, fm, b, fb, rm, frm);
  if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol) {
    return left + right + (left + right - whole) / 15.0;
  }
  return simpson_rec(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) +
         simpson_rec(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1);
}

}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a,
                        double b, double tol) {
  const double m = 0.5 * (a + b);
  const double fa = f(a), fb = f(b), fm = f(m);
  const double whole = simpson_rule(f, a, fa, b, fb, m, fm);
  return simpson_rec(f, a, fa, b, fb, m, fm, whole, tol, 50);
}

void parallel_for(int n, int n_threads, const std::function<void(int)>& fn) {
  if (n_threads <= 0) {
    n_threads = static_cast<int>(std::thread::hardware_concurrency());
    if (n_threads <= 0) n_threads = 1;
  }
  n_threads = std::min(n_threads, n);
  if (n_threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace tsps

#pragma once

// Shared numeric utilities: RNG with reproducible per-stream seeding,
// normal CDF, adaptive quadrature, derivative-free optimization, and a
// small index-parallel work loop.

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

namespace tsps {

double normal_cdf(double x);
double inv_logit(double x);
double logit(double p);

// Deterministic stream-splitting RNG. Replication r of a study draws from
// Rng::for_stream(master_seed, r), so results do not depend on execution
// order or worker count.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  static Rng for_stream(std::uint64_t master_seed, std::uint64_t stream);

  double uniform();  // [0, 1)
  double normal();   // standard normal, Box-Muller
  double normal(double mean, double sd) { return mean + sd * normal(); }
  std::uint64_t uniform_int(std::uint64_t n);  // {0, ..., n-1}
  bool bernoulli(double p) { return uniform() < p; }
  double gamma(double shape);  // unit scale, shape > 0
  double beta(double a, double b);

 private:
  std::mt19937_64 engine_;
};

// Categorical law on {lo, ..., hi} sampled by inverse CDF.
class DiscreteLaw {
 public:
  DiscreteLaw(int lo, std::vector<double> pmf);
  // pmf(m) proportional to (1-rho)^m on {lo..hi}, rho calibrated by
  // bisection so the mean hits target_mean.
  static DiscreteLaw truncated_geometric(int lo, int hi, double target_mean);
  static DiscreteLaw uniform(int lo, int hi);

  int sample(Rng& rng) const;
  double mean() const;
  int lo() const { return lo_; }
  int hi() const { return lo_ + static_cast<int>(cdf_.size()) - 1; }

 private:
  int lo_;
  std::vector<double> cdf_;
  double mean_;
};

struct SimplexResult {
  std::vector<double> x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Nelder-Mead simplex minimization with relative-objective stopping rule.
SimplexResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                          std::vector<double> start, double step,
                          double rel_tol, int max_iter);

// A few damped Newton steps using central-difference derivatives; tightens
// a simplex optimum so finite-difference gradient checks pass.
SimplexResult fd_newton_polish(const std::function<double(const std::vector<double>&)>& f,
                               std::vector<double> start, double h, int max_iter);

// Adaptive Simpson integration of f over [a, b] to absolute tolerance.
double adaptive_simpson(const std::function<double(double)>& f, double a,
                        double b, double tol);

// Runs fn(i) for i in [0, n) across up to n_threads workers. Exceptions are
// rethrown on the calling thread after all workers join.
void parallel_for(int n, int n_threads, const std::function<void(int)>& fn);

}  // namespace tsps

#pragma once

// Gaussian-process path priors with Ornstein-Uhlenbeck kernels.

#include "gslice/common.hpp"
#include "gslice/path.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace gslice::gp {

enum class KernelKind { OU };

struct Kernel {
  KernelKind kind = KernelKind::OU;
  double length_scale = 1.0;
  double variance = 1.0;
  double jitter = 1e-8;

  /// OU kernel with jitter 1e-8 * variance.
  static Kernel ou(double length_scale = 1.0, double variance = 1.0);
  double operator()(double t, double u) const;
  void validate() const;
};

/// K[i][j] = k(a_i, b_j); exactly symmetric when a and b hold the same times.
Matrix gram(const Kernel& k, std::span<const double> a, std::span<const double> b);

class GaussianProcess;

/// Cached mean and Cholesky factor of a process on a fixed grid.
class GridSampler {
 public:
  GridSampler() = default;
  GridSampler(const GaussianProcess& gp, std::span<const double> times);

  std::size_t size() const { return static_cast<std::size_t>(mean_.size()); }
  const Vector& mean() const { return mean_; }
  /// mean + L z with z drawn from `rng`.
  Vector draw(std::mt19937_64& rng) const;

 private:
  Vector mean_;
  Matrix chol_;
  bool degenerate_ = false;
};

class GaussianProcess {
 public:
  static GaussianProcess prior(Kernel kernel, double mean = 0.0);

  /// Posterior given observations; an already conditioned process is
  /// conditioned on the union of its context and the new one. Times must be
  /// distinct.
  GaussianProcess condition(std::span<const double> times, const Vector& values, double sigma_obs) const;

  Vector mean(std::span<const double> times) const;
  Matrix covariance(std::span<const double> a, std::span<const double> b) const;
  Vector variance(std::span<const double> times) const;

  /// n_samples x grid.size() draws mean + L z.
  Matrix sample_matrix(const path::TimeGrid& grid, std::size_t n_samples, std::uint64_t seed) const;
  std::vector<path::Path> sample(const path::TimeGrid& grid, std::size_t n_samples, std::uint64_t seed) const;

  const Kernel& kernel() const { return kernel_; }
  bool conditioned() const { return !ctx_times_.empty(); }
  const std::vector<double>& context_times() const { return ctx_times_; }
  /// Jitter actually added to the context matrix.
  double context_jitter() const { return ctx_jitter_; }

 private:
  Kernel kernel_;
  double prior_mean_ = 0.0;
  double sigma_obs_ = 0.0;
  std::vector<double> ctx_times_;
  Vector ctx_values_;
  Matrix ctx_chol_;  // lower factor
  Vector alpha_;
  double ctx_jitter_ = 0.0;
};

/// Lower Cholesky factor of m + jitter I, escalating jitter by a decade up to
/// `max_escalations` times. Throws when every attempt fails.
Matrix cholesky_with_jitter(const Matrix& m, double jitter, int max_escalations, double* used_jitter = nullptr);

}  // namespace gslice::gp

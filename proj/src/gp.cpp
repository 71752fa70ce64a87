#include "gslice/gp.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace gslice::gp {

Kernel Kernel::ou(double length_scale, double variance) {
  Kernel k;
  k.length_scale = length_scale;
  k.variance = variance;
  k.jitter = 1e-8 * variance;
  k.validate();
  return k;
}

double Kernel::operator()(double t, double u) const { return variance * std::exp(-std::abs(t - u) / length_scale); }

void Kernel::validate() const {
  if (!(length_scale > 0.0) || !std::isfinite(length_scale)) throw Error("Kernel: length_scale must be positive");
  if (!(variance >= 0.0) || !std::isfinite(variance)) throw Error("Kernel: variance must be nonnegative");
  if (!(jitter >= 0.0)) throw Error("Kernel: jitter must be nonnegative");
}

Matrix gram(const Kernel& k, std::span<const double> a, std::span<const double> b) {
  const auto na = static_cast<Eigen::Index>(a.size()), nb = static_cast<Eigen::Index>(b.size());
  Matrix g(na, nb);
  const bool same = a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
  for (Eigen::Index i = 0; i < na; ++i)
    for (Eigen::Index j = same ? i : 0; j < nb; ++j) {
      g(i, j) = k(a[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(j)]);
      if (same) g(j, i) = g(i, j);
    }
  return g;
}

Matrix cholesky_with_jitter(const Matrix& m, double jitter, int max_escalations, double* used_jitter) {
  double j = jitter;
  for (int attempt = 0; attempt <= max_escalations; ++attempt, j *= 10.0) {
    Matrix a = m;
    a.diagonal().array() += j;
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().allFinite()) {
      if (used_jitter) *used_jitter = j;
      return llt.matrixL();
    }
  }
  std::ostringstream msg;
  msg << "Cholesky failed after jitter escalation up to " << j / 10.0 << "; increase the kernel jitter";
  throw Error(msg.str());
}

GaussianProcess GaussianProcess::prior(Kernel kernel, double mean) {
  kernel.validate();
  GaussianProcess gp;
  gp.kernel_ = kernel;
  gp.prior_mean_ = mean;
  return gp;
}

GaussianProcess GaussianProcess::condition(std::span<const double> times, const Vector& values, double sigma_obs) const {
  if (times.empty()) throw Error("condition: empty context");
  if (static_cast<Eigen::Index>(times.size()) != values.size()) throw Error("condition: times and values differ in length");
  if (!(sigma_obs >= 0.0)) throw Error("condition: sigma_obs must be nonnegative");
  if (!values.allFinite()) throw Error("condition: non-finite context value");
  GaussianProcess out = *this;
  out.ctx_times_.assign(ctx_times_.begin(), ctx_times_.end());
  Vector vals(static_cast<Eigen::Index>(ctx_times_.size() + times.size()));
  vals << ctx_values_, values;
  out.ctx_times_.insert(out.ctx_times_.end(), times.begin(), times.end());
  out.ctx_values_ = vals;
  out.sigma_obs_ = conditioned() ? std::max(sigma_obs_, sigma_obs) : sigma_obs;
  auto sorted = out.ctx_times_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw Error("condition: context times must be distinct");

  const Matrix k = gram(kernel_, out.ctx_times_, out.ctx_times_);
  out.ctx_chol_ = cholesky_with_jitter(k, out.sigma_obs_ * out.sigma_obs_ + kernel_.jitter, 3, &out.ctx_jitter_);
  const Vector resid = out.ctx_values_.array() - prior_mean_;
  const auto chol_solve = [&](const Vector& r) -> Vector {
    const Vector y = out.ctx_chol_.triangularView<Eigen::Lower>().solve(r);
    return out.ctx_chol_.transpose().triangularView<Eigen::Upper>().solve(y);
  };
  // Jitter only stabilises the factorisation: refine the weights against
  // K + sigma^2 I so noise-free posteriors still interpolate the context.
  Matrix target = k;
  target.diagonal().array() += out.sigma_obs_ * out.sigma_obs_;
  out.alpha_ = chol_solve(resid);
  for (int it = 0; it < 4; ++it) {
    const Vector r = resid - target * out.alpha_;
    if (r.cwiseAbs().maxCoeff() <= 1e-14 * std::max(1.0, resid.cwiseAbs().maxCoeff())) break;
    out.alpha_ += chol_solve(r);
  }
  return out;
}

Vector GaussianProcess::mean(std::span<const double> times) const {
  Vector m = Vector::Constant(static_cast<Eigen::Index>(times.size()), prior_mean_);
  if (conditioned()) m += gram(kernel_, times, ctx_times_) * alpha_;
  return m;
}

Matrix GaussianProcess::covariance(std::span<const double> a, std::span<const double> b) const {
  Matrix c = gram(kernel_, a, b);
  if (conditioned()) {
    const auto l = ctx_chol_.triangularView<Eigen::Lower>();
    const Matrix va = l.solve(gram(kernel_, ctx_times_, a));
    const bool same = a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
    if (same) {
      c -= va.transpose() * va;
      // Keep exact symmetry.
      c = 0.5 * (c + c.transpose()).eval();
    } else {
      const Matrix vb = l.solve(gram(kernel_, ctx_times_, b));
      c -= va.transpose() * vb;
    }
  }
  return c;
}

Vector GaussianProcess::variance(std::span<const double> times) const {
  Vector v(static_cast<Eigen::Index>(times.size()));
  for (std::size_t i = 0; i < times.size(); ++i) {
    const std::span<const double> t(&times[i], 1);
    v(static_cast<Eigen::Index>(i)) = covariance(t, t)(0, 0);
  }
  return v;
}

GridSampler::GridSampler(const GaussianProcess& gp, std::span<const double> times) : mean_(gp.mean(times)) {
  const Matrix cov = gp.covariance(times, times);
  degenerate_ = cov.isZero(0.0);
  if (!degenerate_) chol_ = cholesky_with_jitter(cov, std::max(gp.kernel().jitter, 1e-10), 3);
}

Vector GridSampler::draw(std::mt19937_64& rng) const {
  if (degenerate_) return mean_;
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector z(mean_.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal(rng);
  return mean_ + chol_.triangularView<Eigen::Lower>() * z;
}

Matrix GaussianProcess::sample_matrix(const path::TimeGrid& grid, std::size_t n_samples, std::uint64_t seed) const {
  const GridSampler sampler(*this, grid.times());
  std::mt19937_64 rng(seed);
  Matrix out(static_cast<Eigen::Index>(n_samples), static_cast<Eigen::Index>(grid.size()));
  for (Eigen::Index s = 0; s < out.rows(); ++s) out.row(s) = sampler.draw(rng).transpose();
  return out;
}

std::vector<path::Path> GaussianProcess::sample(const path::TimeGrid& grid, std::size_t n_samples, std::uint64_t seed) const {
  const Matrix m = sample_matrix(grid, n_samples, seed);
  std::vector<path::Path> out;
  out.reserve(n_samples);
  for (Eigen::Index s = 0; s < m.rows(); ++s) out.emplace_back(grid, Matrix(m.row(s).transpose()), std::vector<std::string>{"x0"});
  return out;
}

}  // namespace gslice::gp

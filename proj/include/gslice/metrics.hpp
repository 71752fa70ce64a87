#pragma once

// Distributional and forecast metrics: quantile CRPS, 1-D W2, finite-support
// W-infinity, NRMSE and the linear predictive score.

#include "gslice/autodiff.hpp"
#include "gslice/common.hpp"

#include <cstdint>
#include <vector>

namespace gslice::metrics {

struct EmpiricalLaw {
  std::vector<Vector> atoms;
  std::vector<double> weights;

  static EmpiricalLaw uniform(std::vector<Vector> atoms);
  std::size_t size() const { return atoms.size(); }
  std::size_t dim() const;
  /// Weights nonnegative, summing to 1 within 1e-12, atoms of equal length.
  void validate() const;
  /// Identical atoms combined, sorted lexicographically.
  EmpiricalLaw merged() const;
};

struct QuantileGrid {
  std::vector<double> levels{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  void validate() const;
};

/// Quantile of sorted data by linear interpolation of order statistics at
/// position n*q - 1/2 (0-based), clamped to the extremes.
double empirical_quantile(const std::vector<double>& sorted, double q);

/// levels x horizon matrix of per-step empirical quantiles of `samples`
/// (n_samples x horizon).
Matrix empirical_quantiles(const Matrix& samples, const QuantileGrid& grid = {});

double pinball(double y, double yhat, double q);

/// Mean over levels of 2 sum_t pinball(y_t, qhat_t) / sum_t |y_t|.
double crps_quantile(const Matrix& samples, const Vector& y, const QuantileGrid& grid = {});

struct WeightedSamples {
  std::vector<double> values;
  std::vector<double> weights;

  static WeightedSamples uniform(std::vector<double> values);
};

/// Exact 1-D W2 through the quantile coupling.
double w2_1d(const WeightedSamples& a, const WeightedSamples& b);

/// Bottleneck transport distance under the sup-norm ground metric. Weights
/// must be rationals with denominators up to `max_denominator`.
double w_inf_finite(const EmpiricalLaw& a, const EmpiricalLaw& b, std::int64_t max_denominator = 1 << 24);

double nrmse(const Vector& forecast_mean, const Vector& y);

/// W = (X^T X + lambda I)^-1 X^T Y.
Matrix ridge_fit(const Matrix& x, const Matrix& y, double lambda);
/// Same solve on the tape (X and Y may be variables).
ad::Var ridge_fit_taped(ad::Var x, ad::Var y, double lambda);

/// Rows of `generated` and `real_test` are sequences; the first context_len
/// entries predict the next pred_len through a ridge fit on `generated`. The
/// score is the quantile CRPS of the point forecasts on the pooled test
/// futures.
double lps(const Matrix& generated, const Matrix& real_test, std::size_t context_len, std::size_t pred_len,
           double ridge_lambda);

}  // namespace gslice::metrics

#pragma once

// Time grids, paths and the deterministic feature channels appended to them
// before they reach a SLiCE backbone.

#include "gslice/common.hpp"

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gslice::path {

class TimeGrid {
 public:
  /// Validates strict monotonicity and detects uniform spacing
  /// (relative tolerance 1e-12 on the step).
  explicit TimeGrid(std::vector<double> times);

  static TimeGrid regular(double start, double step, std::size_t n_points);

  std::span<const double> times() const { return times_; }
  std::size_t size() const { return times_.size(); }
  double operator[](std::size_t i) const { return times_[i]; }
  double front() const { return times_.front(); }
  double back() const { return times_.back(); }
  bool is_regular() const { return step_.has_value(); }
  std::optional<double> step() const { return step_; }

  friend bool operator==(const TimeGrid& a, const TimeGrid& b) { return a.times_ == b.times_; }

 private:
  std::vector<double> times_;
  std::optional<double> step_;
};

class Path {
 public:
  Path(TimeGrid grid, Matrix values, std::vector<std::string> channel_names);
  /// Channels named "x0", "x1", ...
  Path(TimeGrid grid, Matrix values);

  const TimeGrid& grid() const { return grid_; }
  const Matrix& values() const { return values_; }
  const std::vector<std::string>& channel_names() const { return names_; }
  std::size_t length() const { return grid_.size(); }
  std::size_t channels() const { return static_cast<std::size_t>(values_.cols()); }

 private:
  TimeGrid grid_;
  Matrix values_;
  std::vector<std::string> names_;
};

struct AugmentationSpec {
  bool include_time = false;
  bool include_mask = false;
  /// Grid-step offsets, ascending and unique. Lags are taken from channel 0.
  std::vector<std::size_t> lag_offsets;
  bool include_gp_mean = false;
};

/// Appends, in order: time rescaled to [0,1], observation mask, one lag
/// channel per offset, GP mean. `history` holds the grid points immediately
/// preceding `path` (same channels) and must reach back max(lag_offsets)
/// steps when lags are requested. `gp_mean` is required iff include_gp_mean.
Path augment(const Path& path, std::span<const bool> context_mask, const AugmentationSpec& spec,
             const std::optional<Path>& history = std::nullopt,
             const std::optional<Vector>& gp_mean = std::nullopt);

struct GammaGridSpec {
  double shape_k = 1.0;
  double scale_theta = 1.0;
  std::size_t n_points = 2;
  TimeGrid base_grid = TimeGrid::regular(0.0, 1.0, 2);
  std::size_t max_resample_attempts = 10000;
};

/// Irregular subgrid of a regular base grid from normalised Gamma renewal
/// increments; rounding to the base grid uses round-half-to-even and any
/// collision resamples the whole increment vector.
TimeGrid gamma_renewal_grid(const GammaGridSpec& spec, std::uint64_t seed);

/// Continuous target times (before rounding) for one draw of increments;
/// exposed for testing the normalisation.
std::vector<double> gamma_renewal_times(const GammaGridSpec& spec, std::uint64_t seed);

Path resample_zero_order_hold(const Path& path, const TimeGrid& target);
Path resample_linear(const Path& path, const TimeGrid& target);

/// Column-wise concatenation of paths on the same grid.
Path concat_channels(const Path& a, const Path& b);

/// CSV with header `time,<channel_names...>` and 17 significant digits.
void write_csv(std::ostream& out, const Path& path);
Path read_csv(std::istream& in);

}  // namespace gslice::path

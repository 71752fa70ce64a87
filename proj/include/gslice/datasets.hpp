#pragma once

// Synthetic univariate series collections, per-series standardisation and
// context/prediction windowing.

#include "gslice/common.hpp"
#include "gslice/flow.hpp"
#include "gslice/path.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace gslice::data {

/// Series on a shared regular grid t_i = i * dt.
struct Dataset {
  std::string name;
  double dt = 1.0;
  std::vector<Vector> series;

  std::size_t length() const { return series.empty() ? 0 : static_cast<std::size_t>(series.front().size()); }
  void validate() const;
};

/// level + amp sin(2 pi i / period + phase) + OU noise, amplitude and phase
/// drawn per series.
struct SinusoidOUSpec {
  std::size_t n_series = 16;
  std::size_t length = 480;
  double period = 24.0;
  double level = 5.0;
  double amp_min = 0.5;
  double amp_max = 1.5;
  /// Per-step mean reversion and innovation scale of the noise.
  double ou_theta = 0.3;
  double ou_sigma = 0.15;
  double dt = 1.0 / 24.0;
};

/// A fixed seasonal profile whose level and amplitude jump at random change
/// points, plus white noise.
struct SeasonalSpec {
  std::size_t n_series = 16;
  std::size_t length = 480;
  std::size_t period = 24;
  std::size_t n_segments = 4;
  double level = 5.0;
  double level_jump = 1.0;
  double noise = 0.1;
  double dt = 1.0 / 24.0;
};

Dataset sinusoid_ou(const SinusoidOUSpec& spec, std::uint64_t seed);
Dataset piecewise_seasonal(const SeasonalSpec& spec, std::uint64_t seed);

/// CSV with a `time` column followed by one column per series; the grid must
/// be regular.
Dataset read_csv_dataset(const std::string& file);

struct Standardizer {
  double mean = 0.0;
  double scale = 1.0;

  static Standardizer fit(const Vector& x);
  Vector apply(const Vector& x) const { return (x.array() - mean) / scale; }
  Vector invert(const Vector& z) const { return z.array() * scale + mean; }
};

struct WindowSpec {
  std::size_t context_len = 24;
  std::size_t pred_len = 24;
  /// Grid steps between successive window starts.
  std::size_t stride = 1;
  /// Points kept before each window for lag channels.
  std::size_t history_len = 0;
  /// Every `subsample`-th point of the base grid; 2 gives a 2x coarser grid.
  std::size_t subsample = 1;

  std::size_t window_len() const { return context_len + pred_len; }
};

struct IndexedWindow {
  std::size_t series = 0;
  /// Base-grid index of the first window point.
  std::size_t start = 0;
  flow::Window window;
};

/// Windows of a standardised series whose points lie in [begin, end) of the
/// base grid; window times are relative to the window start.
std::vector<IndexedWindow> make_windows(const std::vector<Vector>& standardised, double dt, std::size_t begin,
                                        std::size_t end, const WindowSpec& spec);

}  // namespace gslice::data

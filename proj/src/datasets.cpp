#include "gslice/datasets.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace gslice::data {

void Dataset::validate() const {
  if (series.empty()) throw Error("dataset '" + name + "' has no series");
  if (!(dt > 0.0)) throw Error("dataset '" + name + "': dt must be positive");
  for (const auto& s : series) {
    if (s.size() != series.front().size()) throw Error("dataset '" + name + "': series lengths differ");
    if (!s.allFinite()) throw Error("dataset '" + name + "': non-finite value");
  }
}

Dataset sinusoid_ou(const SinusoidOUSpec& spec, std::uint64_t seed) {
  if (spec.n_series == 0 || spec.length < 2) throw ConfigError("sinusoid_ou: need series of length >= 2");
  if (!(spec.period > 0.0)) throw ConfigError("sinusoid_ou: period must be positive");
  if (!(spec.amp_min <= spec.amp_max)) throw ConfigError("sinusoid_ou: amp_min above amp_max");
  if (!(spec.ou_theta >= 0.0 && spec.ou_theta <= 1.0)) throw ConfigError("sinusoid_ou: ou_theta must lie in [0,1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> amp(spec.amp_min, spec.amp_max), phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset d{"sinusoid_ou", spec.dt, {}};
  for (std::size_t s = 0; s < spec.n_series; ++s) {
    const double a = amp(rng), ph = phase(rng);
    // Start the noise in its stationary law.
    const double stat_sd = spec.ou_theta > 0.0 ? spec.ou_sigma / std::sqrt(1.0 - std::pow(1.0 - spec.ou_theta, 2)) : 0.0;
    double e = stat_sd * normal(rng);
    Vector x(static_cast<Eigen::Index>(spec.length));
    for (std::size_t i = 0; i < spec.length; ++i) {
      if (i > 0) e = (1.0 - spec.ou_theta) * e + spec.ou_sigma * normal(rng);
      x(static_cast<Eigen::Index>(i)) =
          spec.level + a * std::sin(2.0 * std::numbers::pi * static_cast<double>(i) / spec.period + ph) + e;
    }
    d.series.push_back(std::move(x));
  }
  return d;
}

Dataset piecewise_seasonal(const SeasonalSpec& spec, std::uint64_t seed) {
  if (spec.n_series == 0 || spec.length < 2 || spec.period < 2 || spec.n_segments == 0)
    throw ConfigError("piecewise_seasonal: invalid spec");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  // Shared profile: two harmonics with random weights.
  const double w1 = 0.5 + unif(rng), w2 = 0.5 * unif(rng), ph2 = 2.0 * std::numbers::pi * unif(rng);
  Dataset d{"piecewise_seasonal", spec.dt, {}};
  for (std::size_t s = 0; s < spec.n_series; ++s) {
    std::vector<std::size_t> cuts{0};
    for (std::size_t k = 1; k < spec.n_segments; ++k)
      cuts.push_back(static_cast<std::size_t>(unif(rng) * static_cast<double>(spec.length)));
    std::sort(cuts.begin(), cuts.end());
    Vector x(static_cast<Eigen::Index>(spec.length));
    double level = spec.level, amp = 1.0;
    std::size_t seg = 1;
    for (std::size_t i = 0; i < spec.length; ++i) {
      while (seg < cuts.size() && i >= cuts[seg]) {
        level += spec.level_jump * normal(rng);
        amp = 0.5 + unif(rng);
        ++seg;
      }
      const double u = 2.0 * std::numbers::pi * static_cast<double>(i % spec.period) / static_cast<double>(spec.period);
      x(static_cast<Eigen::Index>(i)) = level + amp * (w1 * std::sin(u) + w2 * std::sin(2.0 * u + ph2)) + spec.noise * normal(rng);
    }
    d.series.push_back(std::move(x));
  }
  return d;
}

Dataset read_csv_dataset(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open dataset file '" + file + "'");
  path::Path p = path::read_csv(in);
  if (!p.grid().is_regular()) throw Error("dataset file '" + file + "' is not on a regular grid");
  Dataset d{file, *p.grid().step(), {}};
  for (Eigen::Index c = 0; c < p.values().cols(); ++c) d.series.push_back(p.values().col(c));
  d.validate();
  return d;
}

Standardizer Standardizer::fit(const Vector& x) {
  if (x.size() == 0) throw Error("Standardizer: empty series");
  Standardizer s;
  s.mean = x.mean();
  const double var = (x.array() - s.mean).square().mean();
  s.scale = var > 0.0 ? std::sqrt(var) : 1.0;
  return s;
}

std::vector<IndexedWindow> make_windows(const std::vector<Vector>& standardised, double dt, std::size_t begin,
                                        std::size_t end, const WindowSpec& spec) {
  if (spec.context_len == 0 || spec.pred_len == 0 || spec.stride == 0 || spec.subsample == 0)
    throw ConfigError("WindowSpec: lengths, stride and subsample must be positive");
  const std::size_t n = spec.window_len(), step = spec.subsample;
  const std::size_t span = (n - 1) * step;
  const std::size_t hist = spec.history_len * step;
  std::vector<IndexedWindow> out;
  std::vector<double> times(n);
  for (std::size_t j = 0; j < n; ++j) times[j] = static_cast<double>(j * step) * dt;
  const path::TimeGrid grid(times);
  std::optional<path::TimeGrid> hist_grid;
  if (spec.history_len > 0) {
    std::vector<double> ht(spec.history_len);
    for (std::size_t j = 0; j < spec.history_len; ++j)
      ht[j] = -static_cast<double>((spec.history_len - j) * step) * dt;
    hist_grid.emplace(ht);
  }
  for (std::size_t s = 0; s < standardised.size(); ++s) {
    const Vector& x = standardised[s];
    const std::size_t len = std::min<std::size_t>(end, static_cast<std::size_t>(x.size()));
    for (std::size_t start = std::max(begin, hist); start + span < len; start += spec.stride) {
      Matrix v(static_cast<Eigen::Index>(n), 1);
      for (std::size_t j = 0; j < n; ++j) v(static_cast<Eigen::Index>(j), 0) = x(static_cast<Eigen::Index>(start + j * step));
      IndexedWindow w{s, start, {path::Path(grid, std::move(v)), std::nullopt}};
      if (hist_grid) {
        Matrix h(static_cast<Eigen::Index>(spec.history_len), 1);
        for (std::size_t j = 0; j < spec.history_len; ++j)
          h(static_cast<Eigen::Index>(j), 0) = x(static_cast<Eigen::Index>(start - (spec.history_len - j) * step));
        w.window.history.emplace(*hist_grid, std::move(h));
      }
      out.push_back(std::move(w));
    }
  }
  return out;
}

}  // namespace gslice::data

#include "gslice/path.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

namespace gslice::path {

namespace {

constexpr double kRegularTol = 1e-12;

std::vector<std::string> default_names(std::size_t n) {
  std::vector<std::string> names;
  names.reserve(n);
  for (std::size_t i = 0; i < n; ++i) names.push_back("x" + std::to_string(i));
  return names;
}

void check_target_range(const Path& path, const TimeGrid& target, bool allow_after_last) {
  if (target.front() < path.grid().front())
    throw Error("resample: target time " + std::to_string(target.front()) +
                " precedes first source time " + std::to_string(path.grid().front()));
  if (!allow_after_last && target.back() > path.grid().back())
    throw Error("resample: target time " + std::to_string(target.back()) +
                " follows last source time " + std::to_string(path.grid().back()));
}

std::vector<double> draw_times(const GammaGridSpec& spec, std::mt19937_64& rng) {
  const double span = spec.base_grid.back() - spec.base_grid.front();
  const std::size_t n_inc = spec.n_points - 1;
  std::gamma_distribution<double> gamma(spec.shape_k, spec.scale_theta);
  std::vector<double> inc(n_inc);
  double total = 0.0;
  for (auto& d : inc) {
    d = gamma(rng);
    total += d;
  }
  std::vector<double> tau(spec.n_points, 0.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < n_inc; ++i) {
    acc += inc[i] / total * span;
    tau[i + 1] = acc;
  }
  tau.back() = span;
  return tau;
}

void validate(const GammaGridSpec& spec) {
  if (!(spec.shape_k > 0.0) || !(spec.scale_theta > 0.0))
    throw Error("gamma grid: shape and scale must be positive");
  if (spec.n_points < 2) throw Error("gamma grid: n_points must be at least 2");
  if (spec.n_points > spec.base_grid.size())
    throw Error("gamma grid: n_points exceeds base grid length");
  if (!spec.base_grid.is_regular()) throw Error("gamma grid: base grid must be regular");
  if (spec.max_resample_attempts == 0) throw Error("gamma grid: max_resample_attempts must be positive");
}

}  // namespace

TimeGrid::TimeGrid(std::vector<double> times) : times_(std::move(times)) {
  if (times_.empty()) throw Error("TimeGrid: empty");
  for (std::size_t i = 0; i < times_.size(); ++i) {
    if (!std::isfinite(times_[i])) throw Error("TimeGrid: non-finite time");
    if (i > 0 && !(times_[i] > times_[i - 1])) throw Error("TimeGrid: times not strictly increasing");
  }
  if (times_.size() >= 2) {
    const double step = (times_.back() - times_.front()) / static_cast<double>(times_.size() - 1);
    // Tolerance is relative to the step, widened by the representable
    // resolution of the time values themselves.
    const double scale = std::max({std::abs(step), std::abs(times_.front()), std::abs(times_.back())});
    bool regular = true;
    for (std::size_t i = 1; i < times_.size() && regular; ++i)
      regular = std::abs((times_[i] - times_[i - 1]) - step) <= kRegularTol * scale;
    if (regular) step_ = step;
  }
}

TimeGrid TimeGrid::regular(double start, double step, std::size_t n_points) {
  if (n_points == 0) throw Error("TimeGrid::regular: n_points must be positive");
  if (!(step > 0.0)) throw Error("TimeGrid::regular: step must be positive");
  std::vector<double> t(n_points);
  for (std::size_t i = 0; i < n_points; ++i) t[i] = start + step * static_cast<double>(i);
  TimeGrid g(std::move(t));
  if (n_points >= 2) g.step_ = step;
  return g;
}

Path::Path(TimeGrid grid, Matrix values, std::vector<std::string> channel_names)
    : grid_(std::move(grid)), values_(std::move(values)), names_(std::move(channel_names)) {
  if (static_cast<std::size_t>(values_.rows()) != grid_.size())
    throw Error("Path: row count " + std::to_string(values_.rows()) + " != grid length " +
                std::to_string(grid_.size()));
  if (static_cast<std::size_t>(values_.cols()) != names_.size())
    throw Error("Path: column count does not match channel names");
  if (!values_.allFinite()) throw Error("Path: non-finite values");
}

Path::Path(TimeGrid grid, Matrix values)
    : Path(std::move(grid), values, default_names(static_cast<std::size_t>(values.cols()))) {}

Path augment(const Path& path, std::span<const bool> context_mask, const AugmentationSpec& spec,
             const std::optional<Path>& history, const std::optional<Vector>& gp_mean) {
  const std::size_t n = path.length();
  if (context_mask.size() != n) throw Error("augment: context mask length differs from grid length");
  for (std::size_t i = 1; i < spec.lag_offsets.size(); ++i)
    if (spec.lag_offsets[i] <= spec.lag_offsets[i - 1])
      throw Error("augment: lag offsets must be ascending without duplicates");

  std::vector<Vector> extra;
  std::vector<std::string> names = path.channel_names();

  if (spec.include_time) {
    Vector t(n);
    const double t0 = path.grid().front();
    const double span = path.grid().back() - t0;
    for (std::size_t i = 0; i < n; ++i) t[i] = span > 0.0 ? (path.grid()[i] - t0) / span : 0.0;
    extra.push_back(std::move(t));
    names.push_back("time");
  }
  if (spec.include_mask) {
    Vector m(n);
    for (std::size_t i = 0; i < n; ++i) m[i] = context_mask[i] ? 1.0 : 0.0;
    extra.push_back(std::move(m));
    names.push_back("mask");
  }
  if (!spec.lag_offsets.empty()) {
    if (path.channels() == 0) throw Error("augment: lag features need at least one channel");
    const std::size_t hist_len = history ? history->length() : 0;
    if (history && history->channels() != path.channels())
      throw Error("augment: history channel count differs from path");
    for (std::size_t lag : spec.lag_offsets) {
      if (lag > hist_len)
        throw Error("augment: history does not cover lag offset " + std::to_string(lag) + " (history has " +
                    std::to_string(hist_len) + " points)");
      Vector col(n);
      for (std::size_t i = 0; i < n; ++i) {
        if (i >= lag)
          col[i] = path.values()(static_cast<Eigen::Index>(i - lag), 0);
        else
          col[i] = history->values()(static_cast<Eigen::Index>(hist_len - (lag - i)), 0);
      }
      extra.push_back(std::move(col));
      names.push_back("lag" + std::to_string(lag));
    }
  }
  if (spec.include_gp_mean) {
    if (!gp_mean) throw Error("augment: GP-mean channel requested without a mean vector");
    if (static_cast<std::size_t>(gp_mean->size()) != n) throw Error("augment: GP mean length differs from grid");
    extra.push_back(*gp_mean);
    names.push_back("gp_mean");
  }

  Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(path.channels() + extra.size()));
  out.leftCols(static_cast<Eigen::Index>(path.channels())) = path.values();
  for (std::size_t j = 0; j < extra.size(); ++j)
    out.col(static_cast<Eigen::Index>(path.channels() + j)) = extra[j];
  return Path(path.grid(), std::move(out), std::move(names));
}

std::vector<double> gamma_renewal_times(const GammaGridSpec& spec, std::uint64_t seed) {
  validate(spec);
  std::mt19937_64 rng(seed);
  return draw_times(spec, rng);
}

TimeGrid gamma_renewal_grid(const GammaGridSpec& spec, std::uint64_t seed) {
  validate(spec);
  const double delta = *spec.base_grid.step();
  const auto last_index = static_cast<long long>(spec.base_grid.size() - 1);
  std::mt19937_64 rng(seed);
  for (std::size_t attempt = 1; attempt <= spec.max_resample_attempts; ++attempt) {
    const auto tau = draw_times(spec, rng);
    std::vector<long long> idx(tau.size());
    bool distinct = true;
    for (std::size_t i = 0; i < tau.size(); ++i) {
      // nearbyint honours the default round-to-nearest-even mode.
      idx[i] = std::clamp(static_cast<long long>(std::nearbyint(tau[i] / delta)), 0LL, last_index);
      if (i > 0 && idx[i] <= idx[i - 1]) {
        distinct = false;
        break;
      }
    }
    if (!distinct) continue;
    std::vector<double> times;
    times.reserve(idx.size());
    for (auto m : idx) times.push_back(spec.base_grid[static_cast<std::size_t>(m)]);
    return TimeGrid(std::move(times));
  }
  throw Error("gamma grid: no collision-free draw after " + std::to_string(spec.max_resample_attempts) +
              " attempts");
}

Path resample_zero_order_hold(const Path& path, const TimeGrid& target) {
  check_target_range(path, target, /*allow_after_last=*/true);
  const auto src = path.grid().times();
  Matrix out(static_cast<Eigen::Index>(target.size()), path.values().cols());
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto it = std::upper_bound(src.begin(), src.end(), target[i]);
    const auto j = static_cast<Eigen::Index>(std::distance(src.begin(), it) - 1);
    out.row(static_cast<Eigen::Index>(i)) = path.values().row(j);
  }
  return Path(target, std::move(out), path.channel_names());
}

Path resample_linear(const Path& path, const TimeGrid& target) {
  check_target_range(path, target, /*allow_after_last=*/false);
  const auto src = path.grid().times();
  Matrix out(static_cast<Eigen::Index>(target.size()), path.values().cols());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double t = target[i];
    auto it = std::upper_bound(src.begin(), src.end(), t);
    auto j = static_cast<std::size_t>(std::distance(src.begin(), it) - 1);
    const auto r = static_cast<Eigen::Index>(i);
    if (src[j] == t || j + 1 == src.size()) {
      out.row(r) = path.values().row(static_cast<Eigen::Index>(j));
      continue;
    }
    const double w = (t - src[j]) / (src[j + 1] - src[j]);
    out.row(r) = (1.0 - w) * path.values().row(static_cast<Eigen::Index>(j)) +
                 w * path.values().row(static_cast<Eigen::Index>(j + 1));
  }
  return Path(target, std::move(out), path.channel_names());
}

Path concat_channels(const Path& a, const Path& b) {
  if (!(a.grid() == b.grid())) throw Error("concat_channels: grids differ");
  Matrix v(a.values().rows(), a.values().cols() + b.values().cols());
  v << a.values(), b.values();
  auto names = a.channel_names();
  names.insert(names.end(), b.channel_names().begin(), b.channel_names().end());
  return Path(a.grid(), std::move(v), std::move(names));
}

void write_csv(std::ostream& out, const Path& path) {
  out << "time";
  for (const auto& n : path.channel_names()) out << ',' << n;
  out << '\n';
  std::ostringstream line;
  line << std::setprecision(17);
  for (std::size_t i = 0; i < path.length(); ++i) {
    line.str("");
    line << path.grid()[i];
    for (Eigen::Index c = 0; c < path.values().cols(); ++c)
      line << ',' << path.values()(static_cast<Eigen::Index>(i), c);
    out << line.str() << '\n';
  }
}

Path read_csv(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw Error("read_csv: missing header");
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
  }
  if (cols.empty() || cols.front() != "time") throw Error("read_csv: header must start with 'time'");
  std::vector<double> times;
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw Error("read_csv: bad number '" + cell + "'");
      }
    }
    if (row.size() != cols.size()) throw Error("read_csv: ragged row");
    times.push_back(row.front());
    rows.emplace_back(row.begin() + 1, row.end());
  }
  Matrix v(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size() - 1));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      v(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return Path(TimeGrid(std::move(times)), std::move(v), std::vector<std::string>(cols.begin() + 1, cols.end()));
}

}  // namespace gslice::path

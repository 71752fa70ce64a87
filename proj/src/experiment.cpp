#include "gslice/experiment.hpp"

#include "gslice/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

namespace gslice::exp {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

void check_keys(const json& obj, const std::vector<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

json read_config_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file '" + file.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + file.string() + "' is not valid JSON: " + e.what());
  }
}

namespace {

// Typed reads from one JSON object with the key set checked up front.
struct Section {
  const json& j;
  std::string where;

  Section(const json& obj, std::string name, const std::vector<std::string>& allowed) : j(obj), where(std::move(name)) {
    check_keys(j, allowed, where);
  }

  bool has(const char* key) const { return j.contains(key); }

  template <class T>
  void get(const char* key, T& out) const {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where + "." + key + ": " + e.what());
    }
  }

  const json& at(const char* key) const { return j.at(key); }
};

void check_schema(const json& j) {
  if (!j.contains("schema_version")) throw ConfigError("config lacks schema_version");
  if (!j.at("schema_version").is_number_integer() || j.at("schema_version").get<int>() != kSchemaVersion)
    throw ConfigError("unsupported schema_version (expected " + std::to_string(kSchemaVersion) + ")");
}

template <class Fn>
auto as_config(const std::string& where, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace

HardcoreRunConfig parse_hardcore_config(const json& j) {
  HardcoreRunConfig c;
  check_schema(j);
  Section s(j, "config",
            {"schema_version", "command", "n", "classes", "widths", "seeds", "p", "epochs", "learning_rate",
             "batch_size", "n_train", "n_val", "n_test", "init_scale", "s4d_lin_init", "clip_norm", "analytic",
             "certificates"});
  s.get("n", c.lengths);
  if (s.has("classes")) {
    std::vector<std::string> names;
    s.get("classes", names);
    if (names.size() == 1 && names[0] == "all") names = {"dense_selective", "dense_non_selective", "diagonal_selective"};
    c.classes.clear();
    for (const auto& n : names) c.classes.push_back(as_config("config.classes", [&] { return net::ssm_class_from_string(n); }));
  }
  std::map<std::string, std::size_t> widths;
  s.get("widths", widths);
  c.widths.clear();
  for (auto cls : c.classes) {
    const auto it = widths.find(net::to_string(cls));
    c.widths.push_back(it != widths.end() ? it->second : (cls == net::SsmClass::DenseSelective ? 2 : 8));
  }
  if (s.has("seeds")) {
    if (s.at("seeds").is_number_integer()) {
      std::size_t n = 0;
      s.get("seeds", n);
      c.base.seeds.clear();
      for (std::size_t i = 0; i < n; ++i) c.base.seeds.push_back(i);
    } else {
      s.get("seeds", c.base.seeds);
    }
  }
  s.get("p", c.base.p);
  s.get("epochs", c.base.epochs);
  s.get("learning_rate", c.base.learning_rate);
  s.get("batch_size", c.base.batch_size);
  s.get("n_train", c.base.n_train);
  s.get("n_val", c.base.n_val);
  s.get("n_test", c.base.n_test);
  s.get("init_scale", c.base.init_scale);
  s.get("s4d_lin_init", c.base.s4d_lin_init);
  s.get("clip_norm", c.base.clip_norm);
  s.get("analytic", c.analytic);
  if (s.has("certificates")) {
    Section cs(s.at("certificates"), "config.certificates", {"dims", "trials", "n", "eta"});
    cs.get("dims", c.certificate_dims);
    cs.get("trials", c.certificate_trials);
    cs.get("n", c.certificate_n);
    cs.get("eta", c.eta);
  }
  return c;
}

namespace {

void validate_hardcore(const HardcoreRunConfig& c) {
  if (c.lengths.empty()) throw ConfigError("hardcore: no sequence lengths");
  for (auto n : c.lengths)
    if (n == 0) throw ConfigError("hardcore: sequence length must be at least 1");
  if (c.classes.empty()) throw ConfigError("hardcore: no model classes");
  if (c.base.seeds.empty()) throw ConfigError("hardcore: need at least one seed");
  for (auto d : c.certificate_dims)
    if (d == 0) throw ConfigError("hardcore: certificate dims must be positive");
  if (c.certificate_trials == 0 || c.certificate_n < 2) throw ConfigError("hardcore: certificates need trials > 0, n >= 2");
  if (!(c.eta > 0.0 && c.eta < 0.5)) throw ConfigError("hardcore: eta must lie in (0, 1/2)");
  as_config("hardcore", [&] {
    auto b = c.base;
    b.n = c.lengths.front();
    b.validate();
    return 0;
  });
}

}  // namespace

ForecastConfig default_forecast_config() {
  ForecastConfig c;
  c.model.family = net::FamilyKind::BlockDiagonal;
  c.model.hidden_dim = 16;
  c.model.block_size = 4;
  c.model.n_blocks = 2;
  c.model.width = 16;
  c.aug.include_time = true;
  c.aug.include_mask = true;
  c.aug.include_gp_mean = true;
  c.train.epochs = 100;
  c.train.batches_per_epoch = 16;
  c.train.batch_size = 32;
  c.train.learning_rate = 3e-3;
  c.train.clip_norm = 0.5;
  c.train.ema_decay = 0.99;
  c.sample.n_samples = 100;
  c.sample.n_steps = 16;
  return c;
}

ForecastConfig parse_forecast_config(const json& j) {
  ForecastConfig c = default_forecast_config();
  check_schema(j);
  Section s(j, "config",
            {"schema_version", "command", "seed", "dataset", "windows", "model", "prior", "augment", "train", "sample",
             "eval", "gridshift"});
  s.get("seed", c.seed);
  if (s.has("dataset")) {
    Section d(s.at("dataset"), "config.dataset", {"generator", "file", "seed", "params"});
    d.get("generator", c.dataset.generator);
    d.get("file", c.dataset.file);
    d.get("seed", c.dataset.seed);
    if (!c.dataset.file.empty()) c.dataset.generator = "csv";
    if (d.has("params")) {
      if (c.dataset.generator == "sinusoid_ou") {
        auto& p = c.dataset.sinusoid;
        Section ps(d.at("params"), "config.dataset.params",
                   {"n_series", "length", "period", "level", "amp_min", "amp_max", "ou_theta", "ou_sigma", "dt"});
        ps.get("n_series", p.n_series);
        ps.get("length", p.length);
        ps.get("period", p.period);
        ps.get("level", p.level);
        ps.get("amp_min", p.amp_min);
        ps.get("amp_max", p.amp_max);
        ps.get("ou_theta", p.ou_theta);
        ps.get("ou_sigma", p.ou_sigma);
        ps.get("dt", p.dt);
      } else if (c.dataset.generator == "piecewise_seasonal") {
        auto& p = c.dataset.seasonal;
        Section ps(d.at("params"), "config.dataset.params",
                   {"n_series", "length", "period", "n_segments", "level", "level_jump", "noise", "dt"});
        ps.get("n_series", p.n_series);
        ps.get("length", p.length);
        ps.get("period", p.period);
        ps.get("n_segments", p.n_segments);
        ps.get("level", p.level);
        ps.get("level_jump", p.level_jump);
        ps.get("noise", p.noise);
        ps.get("dt", p.dt);
      } else {
        throw ConfigError("config.dataset.params is only valid with a synthetic generator");
      }
    }
    if (c.dataset.generator != "sinusoid_ou" && c.dataset.generator != "piecewise_seasonal" &&
        c.dataset.generator != "csv")
      throw ConfigError("unknown dataset generator '" + c.dataset.generator + "'");
    if (c.dataset.generator == "csv" && c.dataset.file.empty()) throw ConfigError("config.dataset: csv needs a file");
  }
  if (s.has("windows")) {
    Section w(s.at("windows"), "config.windows", {"context_len", "pred_len", "train_stride", "test_windows"});
    w.get("context_len", c.context_len);
    w.get("pred_len", c.pred_len);
    w.get("train_stride", c.train_stride);
    w.get("test_windows", c.test_windows);
  }
  if (s.has("model")) {
    Section m(s.at("model"), "config.model",
              {"family", "hidden_dim", "block_size", "n_blocks", "width", "exp_mode", "nonlinearity", "bidirectional"});
    std::string name;
    if (m.has("family")) {
      m.get("family", name);
      c.model.family = as_config("config.model.family", [&] { return structmat::family_kind_from_string(name); });
    }
    m.get("hidden_dim", c.model.hidden_dim);
    m.get("block_size", c.model.block_size);
    m.get("n_blocks", c.model.n_blocks);
    m.get("width", c.model.width);
    if (m.has("exp_mode")) {
      m.get("exp_mode", name);
      c.model.exp_mode = as_config("config.model.exp_mode", [&] { return net::exp_mode_from_string(name); });
    }
    if (m.has("nonlinearity")) {
      m.get("nonlinearity", name);
      c.model.nonlinearity = as_config("config.model.nonlinearity", [&] { return net::nonlinearity_from_string(name); });
    }
    bool bidir = false;
    m.get("bidirectional", bidir);
    if (bidir) throw ConfigError("config.model: bidirectional models are not supported (they break causality)");
  }
  if (s.has("prior")) {
    Section p(s.at("prior"), "config.prior", {"kernel", "length_scale", "variance", "jitter", "sigma_obs"});
    std::string kind = "ou";
    p.get("kernel", kind);
    if (kind != "ou") throw ConfigError("config.prior: unknown kernel '" + kind + "'");
    double ell = 1.0, var = 1.0;
    p.get("length_scale", ell);
    p.get("variance", var);
    c.kernel = as_config("config.prior", [&] { return gp::Kernel::ou(ell, var); });
    p.get("jitter", c.kernel.jitter);
    p.get("sigma_obs", c.sigma_obs);
  }
  if (s.has("augment")) {
    Section a(s.at("augment"), "config.augment", {"time", "mask", "gp_mean", "lags"});
    a.get("time", c.aug.include_time);
    a.get("mask", c.aug.include_mask);
    a.get("gp_mean", c.aug.include_gp_mean);
    a.get("lags", c.aug.lag_offsets);
  }
  if (s.has("train")) {
    Section t(s.at("train"), "config.train",
              {"epochs", "batches_per_epoch", "batch_size", "learning_rate", "clip_norm", "ema_decay", "coupling",
               "conditional"});
    t.get("epochs", c.train.epochs);
    t.get("batches_per_epoch", c.train.batches_per_epoch);
    t.get("batch_size", c.train.batch_size);
    t.get("learning_rate", c.train.learning_rate);
    t.get("clip_norm", c.train.clip_norm);
    t.get("ema_decay", c.train.ema_decay);
    if (t.has("coupling")) {
      std::string name;
      t.get("coupling", name);
      c.train.coupling = flow::coupling_from_string(name);
    }
    t.get("conditional", c.train.conditional);
  }
  if (s.has("sample")) {
    Section sm(s.at("sample"), "config.sample", {"n_steps", "n_samples"});
    sm.get("n_steps", c.sample.n_steps);
    sm.get("n_samples", c.sample.n_samples);
  }
  if (s.has("eval")) {
    Section e(s.at("eval"), "config.eval", {"quantiles", "ridge_lambda"});
    e.get("quantiles", c.quantiles.levels);
    e.get("ridge_lambda", c.ridge_lambda);
  }
  if (s.has("gridshift")) {
    Section g(s.at("gridshift"), "config.gridshift",
              {"train_subsamples", "test_subsamples", "gamma_shapes", "irregular_points"});
    g.get("train_subsamples", c.train_subsamples);
    g.get("test_subsamples", c.test_subsamples);
    g.get("gamma_shapes", c.gamma_shapes);
    g.get("irregular_points", c.irregular_points);
  }
  return c;
}

namespace {

void validate_forecast(const ForecastConfig& c) {
  if (c.context_len == 0 || c.pred_len == 0) throw ConfigError("windows: context_len and pred_len must be positive");
  if (c.train_stride == 0 || c.test_windows == 0) throw ConfigError("windows: train_stride and test_windows must be positive");
  as_config("train", [&] {
    c.train.validate();
    return 0;
  });
  as_config("sample", [&] {
    c.sample.validate();
    return 0;
  });
  as_config("eval", [&] {
    c.quantiles.validate();
    return 0;
  });
  if (!(c.sigma_obs >= 0.0)) throw ConfigError("prior: sigma_obs must be nonnegative");
  if (!(c.ridge_lambda >= 0.0)) throw ConfigError("eval: ridge_lambda must be nonnegative");
  for (auto s : c.train_subsamples)
    if (s == 0 || c.context_len % s || c.pred_len % s)
      throw ConfigError("gridshift: subsample factors must divide context_len and pred_len");
  for (auto s : c.test_subsamples)
    if (s == 0 || c.context_len % s || c.pred_len % s)
      throw ConfigError("gridshift: subsample factors must divide context_len and pred_len");
  for (double k : c.gamma_shapes)
    if (!(k > 0.0)) throw ConfigError("gridshift: gamma shapes must be positive");
  if (c.irregular_points < 3 || c.irregular_points > c.context_len + c.pred_len)
    throw ConfigError("gridshift: irregular_points must lie in [3, window length]");
  if (c.train.conditional && !c.aug.lag_offsets.empty() && c.aug.lag_offsets.front() < c.pred_len)
    throw ConfigError("augment: lags must be at least pred_len to avoid reading the forecast region");
  as_config("model", [&] {
    net::StackSpec spec = c.model;
    spec.in_dim = 1 + flow::aug_channel_count(c.aug) + 1;
    net::make_stack(spec, 0);
    return 0;
  });
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{a, b};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

// ---------------------------------------------------------------- forecasting

ForecastSetup make_setup(const ForecastConfig& cfg) {
  ForecastSetup s;
  if (cfg.dataset.generator == "sinusoid_ou")
    s.dataset = data::sinusoid_ou(cfg.dataset.sinusoid, cfg.dataset.seed);
  else if (cfg.dataset.generator == "piecewise_seasonal")
    s.dataset = data::piecewise_seasonal(cfg.dataset.seasonal, cfg.dataset.seed);
  else
    s.dataset = data::read_csv_dataset(cfg.dataset.file);
  s.dataset.validate();
  const std::size_t len = s.dataset.length();
  const std::size_t test_span = cfg.test_windows * cfg.pred_len;
  if (len < test_span + 2 * (cfg.context_len + cfg.pred_len))
    throw ConfigError("dataset series (length " + std::to_string(len) + ") too short for the requested windows");
  s.test_begin = len - test_span;
  for (const auto& x : s.dataset.series) {
    s.scalers.push_back(data::Standardizer::fit(x.head(static_cast<Eigen::Index>(s.test_begin))));
    s.standardised.push_back(s.scalers.back().apply(x));
  }
  s.prior = gp::GaussianProcess::prior(cfg.kernel, 0.0);
  s.cond.context_len = cfg.context_len;
  s.cond.sigma_obs = cfg.sigma_obs;
  s.cond.aug = cfg.aug;
  return s;
}

namespace {

std::size_t max_lag(const path::AugmentationSpec& aug) {
  return aug.lag_offsets.empty() ? 0 : aug.lag_offsets.back();
}

}  // namespace

std::vector<flow::Window> training_windows(const ForecastSetup& setup, const ForecastConfig& cfg,
                                           std::size_t subsample) {
  data::WindowSpec ws;
  ws.context_len = cfg.context_len / subsample;
  ws.pred_len = cfg.pred_len / subsample;
  ws.stride = cfg.train_stride;
  ws.history_len = max_lag(cfg.aug);
  ws.subsample = subsample;
  auto iw = data::make_windows(setup.standardised, setup.dataset.dt, 0, setup.test_begin, ws);
  if (iw.empty()) throw ConfigError("no training windows fit before the test region");
  std::vector<flow::Window> out;
  out.reserve(iw.size());
  for (auto& w : iw) out.push_back(std::move(w.window));
  return out;
}

flow::FlowModel untrained_model(const ForecastConfig& cfg) {
  return flow::FlowModel::make(1, flow::aug_channel_count(cfg.aug), cfg.model, mix_seed(cfg.seed, 1));
}

std::vector<TestCase> regular_test_cases(const ForecastSetup& setup, const ForecastConfig& cfg, std::size_t subsample) {
  std::vector<TestCase> out;
  const std::size_t n = (cfg.context_len + cfg.pred_len) / subsample;
  for (std::size_t s = 0; s < setup.standardised.size(); ++s)
    for (std::size_t w = 0; w < cfg.test_windows; ++w) {
      TestCase c;
      c.series = s;
      c.start = setup.test_begin + w * cfg.pred_len - cfg.context_len;
      for (std::size_t j = 0; j < n; ++j) c.offsets.push_back(j * subsample);
      c.n_context = cfg.context_len / subsample;
      out.push_back(std::move(c));
    }
  return out;
}

std::vector<TestCase> irregular_test_cases(const ForecastSetup& setup, const ForecastConfig& cfg, double shape_k,
                                           std::uint64_t seed) {
  auto out = regular_test_cases(setup, cfg, 1);
  path::GammaGridSpec gs;
  gs.shape_k = shape_k;
  gs.scale_theta = 1.0;
  gs.n_points = cfg.irregular_points;
  gs.base_grid = path::TimeGrid::regular(0.0, 1.0, cfg.context_len + cfg.pred_len);
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Redraw until both the context and the forecast region hold a point.
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (attempt == 1000) throw Error("irregular_test_cases: could not place context and forecast points");
      const auto grid = path::gamma_renewal_grid(gs, mix_seed(mix_seed(seed, i), attempt));
      std::vector<std::size_t> offs;
      for (double t : grid.times()) offs.push_back(static_cast<std::size_t>(std::llround(t)));
      const auto n_ctx = static_cast<std::size_t>(
          std::count_if(offs.begin(), offs.end(), [&](std::size_t o) { return o < cfg.context_len; }));
      if (n_ctx == 0 || n_ctx == offs.size()) continue;
      out[i].offsets = std::move(offs);
      out[i].n_context = n_ctx;
      break;
    }
  }
  return out;
}

std::string to_string(Adapter a) {
  switch (a) {
    case Adapter::Direct: return "direct";
    case Adapter::ZeroOrderHold: return "zero_order_hold";
    case Adapter::GpOversample: return "gp_oversample";
    case Adapter::PriorOnly: return "gp_prior";
  }
  return "?";
}

namespace {

// Linear interpolation holding the end values outside the source range.
double interp_hold(const std::vector<double>& t, const Vector& v, double x) {
  if (x <= t.front()) return v(0);
  if (x >= t.back()) return v(v.size() - 1);
  const auto it = std::upper_bound(t.begin(), t.end(), x);
  const auto j = static_cast<std::size_t>(std::distance(t.begin(), it) - 1);
  if (t[j] == x) return v(static_cast<Eigen::Index>(j));
  const double w = (x - t[j]) / (t[j + 1] - t[j]);
  return (1.0 - w) * v(static_cast<Eigen::Index>(j)) + w * v(static_cast<Eigen::Index>(j + 1));
}

// Last source value at or before x (first value before the start).
double hold(const std::vector<double>& t, const Vector& v, double x) {
  const auto it = std::upper_bound(t.begin(), t.end(), x);
  if (it == t.begin()) return v(0);
  return v(static_cast<Eigen::Index>(std::distance(t.begin(), it) - 1));
}

std::optional<path::Path> case_history(const Vector& z, const TestCase& c, std::size_t lag_max, double dt) {
  if (lag_max == 0) return std::nullopt;
  if (c.offsets.size() < 2) throw Error("lag channels need at least two points");
  const std::size_t step = c.offsets[1] - c.offsets[0];
  for (std::size_t j = 1; j < c.offsets.size(); ++j)
    if (c.offsets[j] - c.offsets[j - 1] != step) throw Error("lag channels need a regular evaluation grid");
  if (c.start < lag_max * step) throw Error("not enough history before the test window for lag channels");
  std::vector<double> t(lag_max);
  Matrix h(static_cast<Eigen::Index>(lag_max), 1);
  for (std::size_t j = 0; j < lag_max; ++j) {
    const std::size_t back = (lag_max - j) * step;
    t[j] = -static_cast<double>(back) * dt;
    h(static_cast<Eigen::Index>(j), 0) = z(static_cast<Eigen::Index>(c.start - back));
  }
  return path::Path(path::TimeGrid(t), h);
}

}  // namespace

Forecasts forecast(const flow::FlowModel& model, const ForecastSetup& setup, const ForecastConfig& cfg,
                   const std::vector<TestCase>& cases, Adapter adapter, std::size_t train_subsample,
                   std::size_t workers) {
  const double dt = setup.dataset.dt;
  const std::size_t lag_max = max_lag(cfg.aug);
  Forecasts f;
  f.samples.resize(cases.size());
  f.targets.resize(cases.size());
  f.times.resize(cases.size());

  parallel_for(cases.size(), workers, [&](std::size_t i) {
    const TestCase& c = cases[i];
    const Vector& z = setup.standardised[c.series];
    const auto& sc = setup.scalers[c.series];
    const std::size_t n = c.offsets.size(), n_pred = n - c.n_context;
    std::vector<double> t(n);
    Vector v(static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < n; ++j) {
      t[j] = static_cast<double>(c.offsets[j]) * dt;
      v(static_cast<Eigen::Index>(j)) = z(static_cast<Eigen::Index>(c.start + c.offsets[j]));
    }
    flow::SampleConfig smp = cfg.sample;
    smp.seed = mix_seed(cfg.seed ^ 0x5a5a5a5aULL, i);
    smp.workers = 1;
    const std::vector<double> t_pred(t.begin() + static_cast<std::ptrdiff_t>(c.n_context), t.end());

    Matrix pred(static_cast<Eigen::Index>(smp.n_samples), static_cast<Eigen::Index>(n_pred));
    if (adapter == Adapter::Direct || adapter == Adapter::PriorOnly) {
      flow::ConditioningSpec cond = setup.cond;
      cond.context_len = c.n_context;
      const flow::Window w{path::Path(path::TimeGrid(t), Matrix(v)), case_history(z, c, lag_max, dt)};
      const auto pw = flow::prepare_window(w, setup.prior, cond, true);
      if (adapter == Adapter::PriorOnly) {
        for (std::size_t k = 0; k < smp.n_samples; ++k) {
          std::seed_seq seq{smp.seed, static_cast<std::uint64_t>(k)};
          std::mt19937_64 rng(seq);
          pred.row(static_cast<Eigen::Index>(k)) = flow::draw_x0(pw, 1, rng).col(0).tail(static_cast<Eigen::Index>(n_pred)).transpose();
        }
      } else {
        const auto out = flow::sample_window(model, pw, w.values.grid(), smp);
        for (std::size_t k = 0; k < smp.n_samples; ++k)
          pred.row(static_cast<Eigen::Index>(k)) = out[k].col(0).tail(static_cast<Eigen::Index>(n_pred)).transpose();
      }
    } else {
      // Run on the training grid over the same physical window.
      const std::size_t m = (cfg.context_len + cfg.pred_len) / train_subsample;
      const std::size_t m_ctx = cfg.context_len / train_subsample;
      std::vector<double> tt(m);
      for (std::size_t j = 0; j < m; ++j) tt[j] = static_cast<double>(j * train_subsample) * dt;
      const std::vector<double> t_ctx(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(c.n_context));
      const Vector v_ctx = v.head(static_cast<Eigen::Index>(c.n_context));
      Vector vt = Vector::Zero(static_cast<Eigen::Index>(m));
      if (adapter == Adapter::ZeroOrderHold) {
        for (std::size_t j = 0; j < m_ctx; ++j) vt(static_cast<Eigen::Index>(j)) = hold(t_ctx, v_ctx, tt[j]);
      } else {
        const auto post = setup.prior.condition(t_ctx, v_ctx, setup.cond.sigma_obs);
        const Vector mean = post.mean(std::span<const double>(tt.data(), m_ctx));
        for (std::size_t j = 0; j < m_ctx; ++j) {
          const auto it = std::find(t_ctx.begin(), t_ctx.end(), tt[j]);
          vt(static_cast<Eigen::Index>(j)) = it != t_ctx.end() ? v_ctx(it - t_ctx.begin()) : mean(static_cast<Eigen::Index>(j));
        }
      }
      TestCase tc = c;
      tc.offsets.clear();
      for (std::size_t j = 0; j < m; ++j) tc.offsets.push_back(j * train_subsample);
      flow::ConditioningSpec cond = setup.cond;
      cond.context_len = m_ctx;
      const flow::Window w{path::Path(path::TimeGrid(tt), Matrix(vt)), case_history(z, tc, lag_max, dt)};
      const auto pw = flow::prepare_window(w, setup.prior, cond, true);
      const auto out = flow::sample_window(model, pw, w.values.grid(), smp);
      for (std::size_t k = 0; k < smp.n_samples; ++k) {
        const Vector col = out[k].col(0);
        for (std::size_t j = 0; j < n_pred; ++j)
          pred(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) =
              adapter == Adapter::ZeroOrderHold ? hold(tt, col, t_pred[j]) : interp_hold(tt, col, t_pred[j]);
      }
    }
    for (Eigen::Index k = 0; k < pred.rows(); ++k) pred.row(k) = sc.invert(pred.row(k).transpose()).transpose();
    f.samples[i] = std::move(pred);
    f.targets[i] = sc.invert(v.tail(static_cast<Eigen::Index>(n_pred)));
    f.times[i] = t_pred;
  });

  Eigen::Index total = 0;
  for (const auto& y : f.targets) total += y.size();
  Matrix all(static_cast<Eigen::Index>(cfg.sample.n_samples), total);
  Vector y(total);
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Eigen::Index k = f.targets[i].size();
    all.middleCols(at, k) = f.samples[i];
    y.segment(at, k) = f.targets[i];
    at += k;
  }
  f.crps = metrics::crps_quantile(all, y, cfg.quantiles);
  f.nrmse = metrics::nrmse(all.colwise().mean().transpose(), y);
  return f;
}

ForecastRun run_forecast(const ForecastConfig& cfg, std::size_t workers) {
  validate_forecast(cfg);
  if (!cfg.train.conditional) throw ConfigError("run_forecast: forecasting needs conditional training");
  const auto setup = make_setup(cfg);
  auto tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, 2);
  tc.workers = workers;
  ForecastRun run{flow::train(untrained_model(cfg), training_windows(setup, cfg, 1), setup.prior, tc, setup.cond), {}, {}};
  const auto cases = regular_test_cases(setup, cfg, 1);
  run.model = forecast(run.trained.model, setup, cfg, cases, Adapter::Direct, 1, workers);
  run.baseline = forecast(run.trained.model, setup, cfg, cases, Adapter::PriorOnly, 1, workers);
  return run;
}

// ---------------------------------------------------------------- output

AtomicOutputDir::AtomicOutputDir(fs::path out) : out_(std::move(out)) {
  if (out_.empty()) throw ConfigError("output directory must not be empty");
  const fs::path parent = fs::absolute(out_).parent_path();
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw Error("cannot create '" + parent.string() + "': " + ec.message());
  std::random_device rd;
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::ostringstream name;
    name << "." << out_.filename().string() << ".tmp-" << std::hex << rd();
    tmp_ = parent / name.str();
    if (fs::create_directory(tmp_, ec)) return;
  }
  throw Error("cannot create a temporary directory next to '" + out_.string() + "'");
}

AtomicOutputDir::~AtomicOutputDir() {
  if (!committed_) {
    std::error_code ec;
    fs::remove_all(tmp_, ec);
  }
}

void AtomicOutputDir::commit() {
  std::error_code ec;
  fs::path old;
  if (fs::exists(out_)) {
    old = tmp_;
    old += ".old";
    fs::rename(out_, old, ec);
    if (ec) throw Error("cannot move aside '" + out_.string() + "': " + ec.message());
  }
  fs::rename(tmp_, out_, ec);
  if (ec) {
    if (!old.empty()) fs::rename(old, out_);
    throw Error("cannot move results into '" + out_.string() + "': " + ec.message());
  }
  committed_ = true;
  if (!old.empty()) fs::remove_all(old, ec);
}

namespace {

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw Error("cannot write '" + p.string() + "'");
  f << std::setprecision(17);
  return f;
}

void write_metrics_header(std::ostream& o) { o << "metric,dataset,model,seed,value\n"; }

void write_metric(std::ostream& o, const std::string& metric, const std::string& dataset, const std::string& model,
                  std::uint64_t seed, double value) {
  o << metric << "," << dataset << "," << model << "," << seed << "," << value << "\n";
}

void write_trace(const fs::path& p, const std::vector<flow::LossRecord>& trace) {
  auto o = open_out(p);
  o << "epoch,batch,loss\n";
  for (const auto& r : trace) o << r.epoch << "," << r.batch << "," << r.loss << "\n";
}

void write_forecasts(const fs::path& quantiles, const fs::path& samples, const Forecasts& f,
                     const std::vector<TestCase>& cases, const metrics::QuantileGrid& grid) {
  auto q = open_out(quantiles);
  q << "window,series,step,time,target";
  for (double l : grid.levels) q << ",q" << l;
  q << "\n";
  auto s = open_out(samples);
  s << "window,sample,step,value\n";
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Matrix qs = metrics::empirical_quantiles(f.samples[i], grid);
    for (Eigen::Index j = 0; j < f.targets[i].size(); ++j) {
      q << i << "," << cases[i].series << "," << j << "," << f.times[i][static_cast<std::size_t>(j)] << ","
        << f.targets[i](j);
      for (Eigen::Index l = 0; l < qs.rows(); ++l) q << "," << qs(l, j);
      q << "\n";
    }
    for (Eigen::Index k = 0; k < f.samples[i].rows(); ++k)
      for (Eigen::Index j = 0; j < f.samples[i].cols(); ++j)
        s << i << "," << k << "," << j << "," << f.samples[i](k, j) << "\n";
  }
}

void write_model(const fs::path& dir, const flow::FlowModel& m) {
  auto manifest = open_out(dir / "model.json");
  std::ofstream blob(dir / "model.bin", std::ios::binary);
  if (!blob) throw Error("cannot write model blob");
  net::write_checkpoint(manifest, blob, m.backbone);
}

std::string dataset_name(const ForecastConfig& cfg) {
  return cfg.dataset.generator == "csv" ? fs::path(cfg.dataset.file).stem().string() : cfg.dataset.generator;
}

}  // namespace

// ---------------------------------------------------------------- commands

int cmd_hardcore(const HardcoreRunConfig& cfg_in, const RunOptions& opts, std::ostream& log) {
  HardcoreRunConfig cfg = cfg_in;
  if (opts.seed)
    for (auto& s : cfg.base.seeds) s += *opts.seed;
  cfg.base.workers = opts.workers;
  validate_hardcore(cfg);
  AtomicOutputDir out(opts.out_dir);

  auto table = open_out(out.file("hardcore_accuracy.csv"));
  table << "model,n,width,exact_accuracy,validity_ratio\n";
  auto per_seed = open_out(out.file("hardcore_per_seed.csv"));
  per_seed << "model,n,width,seed,exact_accuracy,validity_ratio,best_epoch,final_train_loss\n";
  for (std::size_t ci = 0; ci < cfg.classes.size(); ++ci)
    for (std::size_t n : cfg.lengths) {
      auto hc = cfg.base;
      hc.n = n;
      hc.width = cfg.widths[ci];
      const auto r = hardcore::run_benchmark(cfg.classes[ci], hc);
      const auto name = net::to_string(cfg.classes[ci]);
      table << name << "," << n << "," << hc.width << "," << r.exact_accuracy << "," << r.validity_ratio << "\n";
      for (const auto& s : r.per_seed)
        per_seed << name << "," << n << "," << hc.width << "," << s.seed << "," << s.exact_accuracy << ","
                 << s.validity_ratio << "," << s.best_epoch << "," << s.final_train_loss << "\n";
      log << name << " n=" << n << " width=" << hc.width << " exact=" << r.exact_accuracy
          << " valid=" << r.validity_ratio << "\n";
    }

  bool ok = true;
  auto cert = open_out(out.file("certificates.csv"));
  cert << "check,d,n,value,threshold,pass\n";
  auto row = [&](const std::string& check, std::size_t d, std::size_t n, double v, double thr, bool pass) {
    cert << check << "," << d << "," << n << "," << v << "," << thr << "," << (pass ? "true" : "false") << "\n";
    log << (pass ? "PASS " : "FAIL ") << check << " d=" << d << " n=" << n << " value=" << v << "\n";
    ok = ok && pass;
  };
  for (std::size_t d : cfg.certificate_dims) {
    const auto rep = hardcore::separation_certificates(d, cfg.certificate_n, cfg.certificate_trials,
                                                       mix_seed(cfg.base.seeds.front(), d), cfg.eta);
    row("parallelogram_residual", d, 2, rep.max_parallelogram_residual, 1e-9, rep.parallelogram_ok());
    row("winf_non_selective_min", d, 2, rep.min_winf_non_selective, 0.25 - 1e-6, rep.winf_bound_ok());
    row("diagonal_sign_changes_max", d, d + 10, static_cast<double>(rep.max_sign_changes), static_cast<double>(d),
        rep.sign_changes_ok());
    row("diagonal_max_error_min", d, d + 2, rep.min_max_error_diagonal, 0.5, rep.diagonal_error_ok());
    if (d == cfg.certificate_dims.front())
      row("winf_eta_construction", 2, cfg.certificate_n, rep.winf_analytic, cfg.eta, rep.analytic_ok());
  }
  if (cfg.analytic) {
    const auto a = hardcore::analytic_checks(12, 10, 0.01);
    row("realisation_mismatches", 2, a.realisation_n, static_cast<double>(a.realisation_mismatches), 0.0,
        a.realisation_ok());
    row("eta_construction_max_error", 2, a.eta_n, a.eta_max_error, a.eta, a.eta_ok());
  }
  out.commit();
  if (!ok) log << "some certificates failed\n";
  return ok ? 0 : 1;
}

int cmd_forecast(const ForecastConfig& cfg_in, const RunOptions& opts, std::ostream& log) {
  ForecastConfig cfg = cfg_in;
  if (opts.seed) cfg.seed = *opts.seed;
  validate_forecast(cfg);
  const auto setup = make_setup(cfg);
  AtomicOutputDir out(opts.out_dir);
  auto metrics_out = open_out(out.file("metrics.csv"));
  write_metrics_header(metrics_out);
  const auto ds = dataset_name(cfg);
  auto tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, 2);
  tc.workers = opts.workers;

  if (cfg.train.conditional) {
    const auto trained = flow::train(untrained_model(cfg), training_windows(setup, cfg, 1), setup.prior, tc, setup.cond);
    write_trace(out.file("loss_trace.csv"), trained.trace);
    write_model(out.file(""), trained.model);
    const auto cases = regular_test_cases(setup, cfg, 1);
    const auto fm = forecast(trained.model, setup, cfg, cases, Adapter::Direct, 1, opts.workers);
    const auto fb = forecast(trained.model, setup, cfg, cases, Adapter::PriorOnly, 1, opts.workers);
    write_forecasts(out.file("quantiles.csv"), out.file("samples.csv"), fm, cases, cfg.quantiles);
    write_metric(metrics_out, "crps", ds, "gslice", cfg.seed, fm.crps);
    write_metric(metrics_out, "nrmse", ds, "gslice", cfg.seed, fm.nrmse);
    write_metric(metrics_out, "crps", ds, "gp_prior", cfg.seed, fb.crps);
    write_metric(metrics_out, "nrmse", ds, "gp_prior", cfg.seed, fb.nrmse);
    log << "crps gslice=" << fm.crps << " gp_prior=" << fb.crps << " nrmse gslice=" << fm.nrmse
        << " gp_prior=" << fb.nrmse << "\n";
  } else {
    // Unconditional generation scored by the linear predictive score.
    const auto trained = flow::train(untrained_model(cfg), training_windows(setup, cfg, 1), setup.prior, tc, setup.cond);
    write_trace(out.file("loss_trace.csv"), trained.trace);
    write_model(out.file(""), trained.model);
    const auto cases = regular_test_cases(setup, cfg, 1);
    const std::size_t n = cfg.context_len + cfg.pred_len;
    std::vector<double> times(n);
    for (std::size_t j = 0; j < n; ++j) times[j] = static_cast<double>(j) * setup.dataset.dt;
    const path::TimeGrid grid(times);
    const flow::Window w{path::Path(grid, Matrix::Zero(static_cast<Eigen::Index>(n), 1)), std::nullopt};
    const auto pw = flow::prepare_window(w, setup.prior, setup.cond, false);
    auto sc = cfg.sample;
    sc.seed = mix_seed(cfg.seed, 3);
    sc.workers = opts.workers;
    const auto gen = flow::sample_window(trained.model, pw, grid, sc);
    Matrix g(static_cast<Eigen::Index>(gen.size()), static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < gen.size(); ++k) g.row(static_cast<Eigen::Index>(k)) = gen[k].col(0).transpose();
    Matrix prior_draws(g.rows(), g.cols());
    for (Eigen::Index k = 0; k < g.rows(); ++k) {
      std::seed_seq seq{sc.seed, static_cast<std::uint64_t>(k)};
      std::mt19937_64 rng(seq);
      prior_draws.row(k) = flow::draw_x0(pw, 1, rng).col(0).transpose();
    }
    Matrix real(static_cast<Eigen::Index>(cases.size()), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < cases.size(); ++i)
      for (std::size_t j = 0; j < n; ++j)
        real(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            setup.standardised[cases[i].series](static_cast<Eigen::Index>(cases[i].start + cases[i].offsets[j]));
    auto s = open_out(out.file("samples.csv"));
    s << "sample,step,value\n";
    for (Eigen::Index k = 0; k < g.rows(); ++k)
      for (Eigen::Index j = 0; j < g.cols(); ++j) s << k << "," << j << "," << g(k, j) << "\n";
    const double lps_model = metrics::lps(g, real, cfg.context_len, cfg.pred_len, cfg.ridge_lambda);
    const double lps_prior = metrics::lps(prior_draws, real, cfg.context_len, cfg.pred_len, cfg.ridge_lambda);
    write_metric(metrics_out, "lps", ds, "gslice", cfg.seed, lps_model);
    write_metric(metrics_out, "lps", ds, "gp_prior", cfg.seed, lps_prior);
    log << "lps gslice=" << lps_model << " gp_prior=" << lps_prior << "\n";
  }
  metrics_out.close();
  out.commit();
  return 0;
}

int cmd_gridshift(const ForecastConfig& cfg_in, const RunOptions& opts, std::ostream& log) {
  ForecastConfig cfg = cfg_in;
  if (opts.seed) cfg.seed = *opts.seed;
  validate_forecast(cfg);
  if (!cfg.train.conditional) throw ConfigError("gridshift: needs conditional training");
  const auto setup = make_setup(cfg);
  AtomicOutputDir out(opts.out_dir);
  auto reg_out = open_out(out.file("gridshift_regular.csv"));
  reg_out << "train_grid,test_grid,method,crps,nrmse\n";
  auto irr_out = open_out(out.file("gridshift_irregular.csv"));
  irr_out << "train_grid,gamma_k,method,crps,nrmse\n";
  const Adapter methods[] = {Adapter::Direct, Adapter::ZeroOrderHold, Adapter::GpOversample};
  for (std::size_t tr : cfg.train_subsamples) {
    auto tc = cfg.train;
    tc.seed = mix_seed(cfg.seed, 2);
    tc.workers = opts.workers;
    auto cond = setup.cond;
    cond.context_len = cfg.context_len / tr;
    const auto trained = flow::train(untrained_model(cfg), training_windows(setup, cfg, tr), setup.prior, tc, cond);
    write_trace(out.file("loss_trace_train" + std::to_string(tr) + ".csv"), trained.trace);
    for (std::size_t te : cfg.test_subsamples) {
      const auto cases = regular_test_cases(setup, cfg, te);
      for (auto m : methods) {
        const auto f = forecast(trained.model, setup, cfg, cases, m, tr, opts.workers);
        reg_out << tr << "," << te << "," << to_string(m) << "," << f.crps << "," << f.nrmse << "\n";
        log << "train=" << tr << " test=" << te << " " << to_string(m) << " crps=" << f.crps << "\n";
      }
    }
    if (cfg.aug.lag_offsets.empty())
      for (double k : cfg.gamma_shapes) {
        const auto cases = irregular_test_cases(setup, cfg, k, mix_seed(cfg.seed, static_cast<std::uint64_t>(k * 1000)));
        for (auto m : methods) {
          const auto f = forecast(trained.model, setup, cfg, cases, m, tr, opts.workers);
          irr_out << tr << "," << k << "," << to_string(m) << "," << f.crps << "," << f.nrmse << "\n";
          log << "train=" << tr << " gamma_k=" << k << " " << to_string(m) << " crps=" << f.crps << "\n";
        }
      }
    else
      log << "skipping irregular grids: lag channels need regular grids\n";
  }
  reg_out.close();
  irr_out.close();
  out.commit();
  return 0;
}

// ---------------------------------------------------------------- selftest

int cmd_selftest(const RunOptions& opts, std::ostream& log) {
  std::mt19937_64 rng(opts.seed.value_or(0));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t failures = 0;
  auto report = [&](const std::string& name, bool pass, double value) {
    log << (pass ? "PASS " : "FAIL ") << name << " (" << value << ")\n";
    if (!pass) ++failures;
  };

  {  // scan associativity: parallel prefix vs sequential fold, any worker count
    double worst = 0.0;
    for (auto kind : {net::FamilyKind::Diagonal, net::FamilyKind::BlockDiagonal, net::FamilyKind::Dense}) {
      const std::size_t bs = kind == net::FamilyKind::Diagonal ? 1 : kind == net::FamilyKind::Dense ? 4 : 2;
      const auto fam = structmat::StructureFamily::make(kind, 4, bs);
      std::vector<structmat::TransitionOperator> ops;
      for (int k = 0; k < 100; ++k) {
        Vector p(static_cast<Eigen::Index>(fam.packed_size()));
        for (auto& x : p) x = 0.3 * normal(rng);
        ops.push_back(structmat::exp_exact({fam, structmat::unpack(fam, p)}));
      }
      Matrix acc = Matrix::Identity(4, 4);
      std::vector<Matrix> seq;
      for (const auto& op : ops) seq.push_back(acc = op.matrix * acc);
      for (std::size_t w : {1, 2, 8}) {
        const auto par = scan::prefix_products(ops, {w, 0});
        for (std::size_t k = 0; k < ops.size(); ++k)
          worst = std::max(worst, (par[k].matrix - seq[k]).norm() / std::max(1.0, seq[k].norm()));
      }
    }
    report("scan_associativity", worst <= 1e-10, worst);
  }
  {  // gradcheck of the flow-matching loss through a small stack
    net::StackSpec spec;
    spec.hidden_dim = 2;
    spec.width = 3;
    spec.zero_final_readout = false;
    auto model = flow::FlowModel::make(1, 1, spec, 7);
    auto params = net::collect_params(model.backbone);
    Vector flat = params.flatten();
    for (auto& x : flat) x += 0.2 * normal(rng);
    params.unflatten(flat);
    Matrix x0(3, 1), x1(3, 1), aug(3, 1);
    for (int i = 0; i < 3; ++i) {
      x0(i, 0) = normal(rng);
      x1(i, 0) = normal(rng);
      aug(i, 0) = 0.5 * i;
    }
    const auto r = optim::gradcheck(
        [&](ad::Tape& t, const std::vector<ad::Var>& p) { return flow::fm_loss_taped(t, model, p, x0, x1, 0.3, aug); },
        params);
    report("gradcheck_fm_loss", r.max_rel_error <= 1e-5, r.max_rel_error);
  }
  {  // GP Gram matrix is PSD
    std::vector<double> t(10);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.37 * static_cast<double>(i) + 0.1 * std::abs(normal(rng));
    std::sort(t.begin(), t.end());
    const Matrix k = gp::gram(gp::Kernel::ou(1.0, 1.0), t, t);
    const double min_eig = Eigen::SelfAdjointEigenSolver<Matrix>(k).eigenvalues().minCoeff();
    report("gp_gram_psd", min_eig >= -1e-10, min_eig);
  }
  {  // metric axioms
    auto law = [&](std::size_t n) {
      std::vector<double> v(n);
      for (auto& x : v) x = normal(rng);
      return v;
    };
    const auto a = law(5), b = law(5), c = law(5);
    const double ab = metrics::w2_1d(metrics::WeightedSamples::uniform(a), metrics::WeightedSamples::uniform(b));
    const double ba = metrics::w2_1d(metrics::WeightedSamples::uniform(b), metrics::WeightedSamples::uniform(a));
    const double aa = metrics::w2_1d(metrics::WeightedSamples::uniform(a), metrics::WeightedSamples::uniform(a));
    report("w2_symmetry_identity", std::abs(ab - ba) <= 1e-12 && aa <= 1e-12, std::abs(ab - ba));
    auto emp = [](const std::vector<double>& v) {
      std::vector<Vector> atoms;
      for (double x : v) atoms.push_back(Vector::Constant(1, x));
      return metrics::EmpiricalLaw::uniform(atoms);
    };
    const double wab = metrics::w_inf_finite(emp(a), emp(b)), wbc = metrics::w_inf_finite(emp(b), emp(c)),
                 wac = metrics::w_inf_finite(emp(a), emp(c));
    report("winf_triangle", wac <= wab + wbc + 1e-9, wab + wbc - wac);
  }
  {  // separation certificates
    const auto rep = hardcore::separation_certificates(2, 6, 20, 11);
    report("hardcore_certificates", rep.all_pass(), rep.min_winf_non_selective);
    const auto a = hardcore::analytic_checks(8, 8, 0.01);
    report("hardcore_analytic", a.realisation_ok() && a.eta_ok(), a.eta_max_error);
  }
  log << (failures == 0 ? "selftest: all checks passed\n" : "selftest: " + std::to_string(failures) + " failed\n");
  return failures == 0 ? 0 : 1;
}

}  // namespace gslice::exp

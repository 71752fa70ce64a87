#include "gslice/flow.hpp"

#include "gslice/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

namespace gslice::flow {

std::string to_string(Coupling c) { return c == Coupling::Independent ? "independent" : "minibatch_ot"; }

Coupling coupling_from_string(const std::string& name) {
  if (name == "independent") return Coupling::Independent;
  if (name == "minibatch_ot") return Coupling::MinibatchOT;
  throw ConfigError("unknown coupling '" + name + "'");
}

FlowModel FlowModel::make(std::size_t data_channels, std::size_t aug_channels, net::StackSpec spec,
                          std::uint64_t seed) {
  if (data_channels == 0) throw Error("FlowModel: need at least one data channel");
  spec.in_dim = data_channels + aug_channels + 1;
  spec.out_dim = data_channels;
  FlowModel m{net::make_stack(spec, seed), data_channels, aug_channels};
  m.validate();
  return m;
}

void FlowModel::validate() const {
  backbone.validate();
  if (backbone.in_dim() != data_channels + aug_channels + 1)
    throw Error("FlowModel: backbone input width must be data + aug + 1");
  if (backbone.out_dim() != data_channels) throw Error("FlowModel: backbone output width must equal data channels");
}

Matrix model_input(const Matrix& x, const Matrix& aug, double s) {
  if (aug.cols() > 0 && aug.rows() != x.rows()) throw Error("model_input: augmentation rows differ from path length");
  Matrix in(x.rows(), x.cols() + aug.cols() + 1);
  in.leftCols(x.cols()) = x;
  if (aug.cols() > 0) in.middleCols(x.cols(), aug.cols()) = aug;
  in.col(in.cols() - 1).setConstant(s);
  return in;
}

Matrix FlowModel::velocity(double s, const Matrix& x, const Matrix& aug) const {
  if (static_cast<std::size_t>(x.cols()) != data_channels) throw Error("velocity: data channel mismatch");
  if (static_cast<std::size_t>(aug.cols()) != aug_channels) throw Error("velocity: augmentation channel mismatch");
  std::vector<double> t(static_cast<std::size_t>(x.rows()));
  std::iota(t.begin(), t.end(), 0.0);
  const path::Path in(path::TimeGrid(std::move(t)), model_input(x, aug, s));
  return net::forward_stack(backbone, in).values();
}

namespace {

void check_pair(const path::Path& x0, const path::Path& x1, const char* what) {
  if (!(x0.grid() == x1.grid())) throw Error(std::string(what) + ": paths live on different grids");
  if (x0.channels() != x1.channels()) throw Error(std::string(what) + ": channel counts differ");
}

double pair_cost(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("minibatch_ot_pair: paths differ in shape");
  return (a - b).squaredNorm();
}

}  // namespace

path::Path interpolate(const path::Path& x0, const path::Path& x1, double s) {
  check_pair(x0, x1, "interpolate");
  // Endpoints are returned exactly.
  if (s == 0.0) return x0;
  if (s == 1.0) return x1;
  return path::Path(x0.grid(), (1.0 - s) * x0.values() + s * x1.values(), x0.channel_names());
}

path::Path target_velocity(const path::Path& x0, const path::Path& x1) {
  check_pair(x0, x1, "target_velocity");
  return path::Path(x0.grid(), x1.values() - x0.values(), x0.channel_names());
}

double fm_loss(const FlowModel& model, const path::Path& x0, const path::Path& x1, double s, const Matrix& aug) {
  const Matrix xs = interpolate(x0, x1, s).values();
  const Matrix u = target_velocity(x0, x1).values();
  const Matrix f = model.velocity(s, xs, aug);
  return (f - u).squaredNorm() / static_cast<double>(u.size());
}

ad::Var fm_loss_taped(ad::Tape& tape, const FlowModel& model, const std::vector<ad::Var>& params, const Matrix& x0,
                      const Matrix& x1, double s, const Matrix& aug) {
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) throw Error("fm_loss: x0 and x1 differ in shape");
  if (static_cast<std::size_t>(x0.cols()) != model.data_channels) throw Error("fm_loss: data channel mismatch");
  if (static_cast<std::size_t>(aug.cols()) != model.aug_channels) throw Error("fm_loss: augmentation channel mismatch");
  const Matrix xs = (1.0 - s) * x0 + s * x1;
  ad::Var in = tape.constant(model_input(xs, aug, s));
  ad::Var f = net::forward_stack_taped(tape, model.backbone, params, in);
  return ad::mean_squared_error(f, x1 - x0);
}

std::vector<std::size_t> minibatch_ot_pair(const std::vector<Matrix>& x0, const std::vector<Matrix>& x1) {
  if (x0.size() != x1.size()) throw Error("minibatch_ot_pair: batch sizes differ");
  const std::size_t n = x0.size();
  if (n > 64) throw Error("minibatch_ot_pair: batch size above 64");
  if (n == 0) return {};
  Matrix cost(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = pair_cost(x0[i], x1[j]);

  // Hungarian algorithm with potentials, 1-based rows/cols.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> sigma(n);
  for (std::size_t j = 1; j <= n; ++j) sigma[p[j] - 1] = j - 1;
  return sigma;
}

std::vector<std::size_t> brute_force_ot_pair(const std::vector<Matrix>& x0, const std::vector<Matrix>& x1) {
  if (x0.size() != x1.size()) throw Error("brute_force_ot_pair: batch sizes differ");
  if (x0.size() > 8) throw Error("brute_force_ot_pair: batch too large");
  std::vector<std::size_t> perm(x0.size()), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) c += pair_cost(x0[i], x1[perm[i]]);
    if (c < best_cost) {
      best_cost = c;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

void TrainConfig::validate() const {
  if (batches_per_epoch == 0 || batch_size == 0) throw ConfigError("TrainConfig: batch counts must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning_rate must be positive");
  if (!(clip_norm >= 0.0)) throw ConfigError("TrainConfig: clip_norm must be nonnegative");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("TrainConfig: ema_decay must lie in [0,1)");
  if (conditional && coupling == Coupling::MinibatchOT)
    throw ConfigError("TrainConfig: minibatch OT coupling is only available in unconditional mode");
  if (coupling == Coupling::MinibatchOT && batch_size > 64) throw ConfigError("TrainConfig: OT coupling needs batch_size <= 64");
  if (workers == 0) throw ConfigError("TrainConfig: workers must be positive");
}

void SampleConfig::validate() const {
  if (n_steps == 0) throw ConfigError("SampleConfig: n_steps must be at least 1");
  if (n_samples == 0) throw ConfigError("SampleConfig: n_samples must be positive");
  if (workers == 0) throw ConfigError("SampleConfig: workers must be positive");
}

std::size_t aug_channel_count(const path::AugmentationSpec& spec) {
  return (spec.include_time ? 1 : 0) + (spec.include_mask ? 1 : 0) + spec.lag_offsets.size() +
         (spec.include_gp_mean ? 1 : 0);
}

PreparedWindow prepare_window(const Window& window, const gp::GaussianProcess& prior, const ConditioningSpec& cond,
                              bool conditional) {
  const auto& x = window.values;
  const std::size_t n = x.length();
  const auto times = x.grid().times();
  // std::vector<bool> has no contiguous storage to span over.
  std::unique_ptr<bool[]> mask(new bool[n]());
  gp::GaussianProcess law = prior;
  if (conditional) {
    if (x.channels() != 1) throw Error("prepare_window: conditional mode supports a single data channel");
    if (cond.context_len == 0 || cond.context_len >= n)
      throw Error("prepare_window: context length must lie in [1, window length)");
    const std::size_t pred = n - cond.context_len;
    for (std::size_t lag : cond.aug.lag_offsets)
      if (lag < pred)
        throw Error("prepare_window: lag " + std::to_string(lag) + " would read the prediction region (needs >= " +
                    std::to_string(pred) + ")");
    std::fill(mask.get(), mask.get() + cond.context_len, true);
    const Vector ctx = x.values().col(0).head(static_cast<Eigen::Index>(cond.context_len));
    law = prior.condition(times.first(cond.context_len), ctx, cond.sigma_obs);
  } else if (!cond.aug.lag_offsets.empty() || cond.aug.include_mask) {
    throw Error("prepare_window: lag and mask channels need conditional mode");
  }
  PreparedWindow out{gp::GridSampler(law, times), Matrix()};
  // Lags never see the prediction region, but augment reads the full path;
  // blank it to make that explicit.
  Matrix vals = x.values();
  if (conditional) vals.bottomRows(static_cast<Eigen::Index>(n - cond.context_len)).setZero();
  const Vector gp_mean = out.x0_law.mean();
  const auto full =
      path::augment(path::Path(x.grid(), vals, x.channel_names()), std::span<const bool>(mask.get(), n), cond.aug,
                    window.history, cond.aug.include_gp_mean ? std::optional<Vector>(gp_mean) : std::nullopt);
  out.aug = full.values().rightCols(static_cast<Eigen::Index>(aug_channel_count(cond.aug)));
  return out;
}

Matrix draw_x0(const PreparedWindow& w, std::size_t channels, std::mt19937_64& rng) {
  Matrix x(static_cast<Eigen::Index>(w.x0_law.size()), static_cast<Eigen::Index>(channels));
  for (Eigen::Index c = 0; c < x.cols(); ++c) x.col(c) = w.x0_law.draw(rng);
  return x;
}

TrainResult train(const FlowModel& model, const std::vector<Window>& data, const gp::GaussianProcess& prior,
                  const TrainConfig& cfg, const ConditioningSpec& cond) {
  cfg.validate();
  model.validate();
  if (data.empty()) throw Error("train: empty dataset");
  if (aug_channel_count(cond.aug) != model.aug_channels) throw Error("train: augmentation spec does not match model");
  TrainResult res{model, {}};
  if (cfg.epochs == 0) return res;

  std::vector<PreparedWindow> prepared(data.size());
  parallel_for(data.size(), cfg.workers, [&](std::size_t i) {
    if (data[i].values.channels() != model.data_channels) throw Error("train: window channel count mismatch");
    prepared[i] = prepare_window(data[i], prior, cond, cfg.conditional);
  });

  auto params = net::collect_params(model.backbone);
  optim::AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  if (cfg.clip_norm > 0.0) adam.clip_norm = cfg.clip_norm;
  if (cfg.ema_decay > 0.0) adam.ema_decay = cfg.ema_decay;
  auto state = optim::OptimState::init(params, adam);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const std::size_t bsz = cfg.batch_size;
  std::vector<std::size_t> idx(bsz);
  std::vector<Matrix> x0(bsz), x1(bsz);
  std::vector<double> s(bsz);
  std::vector<optim::GradResult> per(bsz);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t batch = 0; batch < cfg.batches_per_epoch; ++batch) {
      for (std::size_t b = 0; b < bsz; ++b) {
        idx[b] = pick(rng);
        x1[b] = data[idx[b]].values.values();
        s[b] = unif(rng);
      }
      for (std::size_t b = 0; b < bsz; ++b) x0[b] = draw_x0(prepared[idx[b]], model.data_channels, rng);
      if (cfg.coupling == Coupling::MinibatchOT) {
        if (cfg.conditional) throw Error("train: OT coupling invoked in conditional mode");
        // Unconditional windows share one prior, so x0 draws can be re-paired.
        const auto sigma = minibatch_ot_pair(x1, x0);
        std::vector<Matrix> paired(bsz);
        for (std::size_t b = 0; b < bsz; ++b) paired[b] = x0[sigma[b]];
        x0 = std::move(paired);
      }
      parallel_for(bsz, cfg.workers, [&](std::size_t b) {
        const Matrix& aug = prepared[idx[b]].aug;
        per[b] = optim::gradient(
            [&](ad::Tape& tape, const std::vector<ad::Var>& p) {
              return fm_loss_taped(tape, res.model, p, x0[b], x1[b], s[b], aug);
            },
            params);
      });
      optim::ParameterSet grads = per[0].grads;
      double loss = per[0].loss;
      for (std::size_t b = 1; b < bsz; ++b) {
        loss += per[b].loss;
        for (std::size_t k = 0; k < grads.size(); ++k) grads[k] += per[b].grads[k];
      }
      const double inv = 1.0 / static_cast<double>(bsz);
      for (std::size_t k = 0; k < grads.size(); ++k) grads[k] *= inv;
      res.trace.push_back({epoch, batch, loss * inv});
      optim::step(params, std::move(grads), state);
      net::load_params(res.model.backbone, params);
    }
  }
  net::load_params(res.model.backbone, state.ema_shadow ? *state.ema_shadow : params);
  return res;
}

Matrix integrate(const VelocityFn& field, const Matrix& x0, std::size_t n_steps) {
  if (n_steps == 0) throw Error("integrate: n_steps must be at least 1");
  Matrix x = x0;
  const double h = 1.0 / static_cast<double>(n_steps);
  for (std::size_t k = 0; k < n_steps; ++k) {
    const double s = static_cast<double>(k) * h;
    const Matrix f = field(s, x);
    if (f.rows() != x.rows() || f.cols() != x.cols()) throw Error("integrate: velocity shape mismatch");
    x += h * f;
    if (!x.allFinite()) throw Error("integrate: non-finite state at flow step " + std::to_string(k));
  }
  return x;
}

path::Path generate(const FlowModel& model, const path::Path& x0, const Matrix& aug, const SampleConfig& cfg) {
  cfg.validate();
  if (x0.channels() != model.data_channels) throw Error("generate: x0 channel count mismatch");
  const Matrix x = integrate([&](double s, const Matrix& cur) { return model.velocity(s, cur, aug); }, x0.values(),
                             cfg.n_steps);
  return path::Path(x0.grid(), x, x0.channel_names());
}

path::Path generate_augmented(const FlowModel& model, const path::Path& frozen, const Matrix& aug,
                              const SampleConfig& cfg) {
  cfg.validate();
  const auto nf = static_cast<Eigen::Index>(frozen.channels());
  if (frozen.channels() >= model.data_channels) throw Error("generate_augmented: model needs output channels");
  const Eigen::Index no = static_cast<Eigen::Index>(model.data_channels) - nf;
  Matrix x0 = Matrix::Zero(static_cast<Eigen::Index>(frozen.length()), nf + no);
  x0.leftCols(nf) = frozen.values();
  const Matrix x = integrate(
      [&](double s, const Matrix& cur) {
        Matrix f = model.velocity(s, cur, aug);
        f.leftCols(nf).setZero();
        return f;
      },
      x0, cfg.n_steps);
  return path::Path(frozen.grid(), x.rightCols(no));
}

std::vector<Matrix> sample_window(const FlowModel& model, const PreparedWindow& w, const path::TimeGrid& grid,
                                  const SampleConfig& cfg) {
  cfg.validate();
  if (w.x0_law.size() != grid.size()) throw Error("sample_window: grid differs from the prepared window");
  std::vector<Matrix> out(cfg.n_samples);
  parallel_for(cfg.n_samples, cfg.workers, [&](std::size_t i) {
    std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(i)};
    std::mt19937_64 rng(seq);
    const Matrix x0 = draw_x0(w, model.data_channels, rng);
    out[i] = integrate([&](double s, const Matrix& cur) { return model.velocity(s, cur, w.aug); }, x0, cfg.n_steps);
  });
  return out;
}

}  // namespace gslice::flow

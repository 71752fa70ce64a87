#include "gslice/datasets.hpp"
#include "gslice/flow.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace gslice;
using namespace gslice::flow;

namespace {

net::StackSpec small_spec() {
  net::StackSpec s;
  s.hidden_dim = 4;
  s.family = net::FamilyKind::Dense;
  s.n_blocks = 1;
  s.width = 4;
  return s;
}

// Backbone whose output is the constant row `v` at every point.
FlowModel constant_model(const RowVector& v, std::size_t aug = 0) {
  FlowModel m = FlowModel::make(static_cast<std::size_t>(v.size()), aug, small_spec(), 1);
  m.backbone.final_readout.layers.back().bias = v.transpose();
  return m;
}

path::Path random_path(std::size_t n, std::size_t ch, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Matrix v(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(ch));
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = nd(rng);
  return path::Path(path::TimeGrid::regular(0.0, 0.5, n), v);
}

}  // namespace

TEST_CASE("interpolant and target velocity") {
  std::mt19937_64 rng(0);
  auto a = random_path(5, 2, rng), b = random_path(5, 2, rng);
  CHECK(interpolate(a, b, 0.0).values() == a.values());
  CHECK(interpolate(a, b, 1.0).values() == b.values());
  path::Path z(a.grid(), Matrix::Zero(5, 2)), two(a.grid(), Matrix::Constant(5, 2, 2.0));
  CHECK((interpolate(z, two, 0.5).values().array() == 1.0).all());
  CHECK(target_velocity(a, a).values().isZero(0.0));
  path::Path shifted(a.grid(), a.values().array() + 1.5);
  CHECK((target_velocity(a, shifted).values().array() - 1.5).abs().maxCoeff() <= 1e-15);
  CHECK(target_velocity(a, b).values() == b.values() - a.values());
  path::Path other(path::TimeGrid::regular(0.0, 1.0, 5), a.values());
  CHECK_THROWS_AS(interpolate(a, other, 0.3), Error);
  CHECK_THROWS_AS(target_velocity(a, random_path(5, 1, rng)), Error);
}

TEST_CASE("fm_loss") {
  std::mt19937_64 rng(1);
  auto x0 = random_path(6, 1, rng);
  path::Path x1(x0.grid(), x0.values().array() + 1.0);
  // Zero backbone against a unit displacement.
  FlowModel zero = FlowModel::make(1, 0, small_spec(), 3);
  CHECK(fm_loss(zero, x0, x1, 0.3, Matrix()) == doctest::Approx(1.0).epsilon(1e-15));
  FlowModel exact = constant_model(RowVector::Ones(1));
  CHECK(fm_loss(exact, x0, x1, 0.7, Matrix()) == 0.0);

  // Random model vs a loop oracle, and invariance to point order.
  auto spec = small_spec();
  spec.zero_final_readout = false;
  FlowModel m = FlowModel::make(2, 1, spec, 9);
  auto a = random_path(7, 2, rng), b = random_path(7, 2, rng);
  Matrix aug = random_path(7, 1, rng).values();
  const double s = 0.37;
  Matrix xs = (1 - s) * a.values() + s * b.values();
  Matrix f = m.velocity(s, xs, aug);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < 7; ++i)
    for (Eigen::Index c = 0; c < 2; ++c) {
      const double d = f(i, c) - (b.values()(i, c) - a.values()(i, c));
      acc += d * d;
    }
  CHECK(std::abs(fm_loss(m, a, b, s, aug) - acc / 14.0) <= 1e-12);
  ad::Tape tape;
  auto params = optim::bind(tape, net::collect_params(m.backbone));
  CHECK(std::abs(fm_loss_taped(tape, m, params, a.values(), b.values(), s, aug).scalar() - acc / 14.0) <= 1e-12);

  // A pointwise backbone (one grid point at a time) has an order-free loss.
  FlowModel c = constant_model(RowVector::Constant(2, 0.4), 1);
  std::vector<Eigen::Index> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix pa(7, 2), pb(7, 2), paug(7, 1);
  for (Eigen::Index i = 0; i < 7; ++i) {
    pa.row(i) = a.values().row(perm[static_cast<std::size_t>(i)]);
    pb.row(i) = b.values().row(perm[static_cast<std::size_t>(i)]);
    paug.row(i) = aug.row(perm[static_cast<std::size_t>(i)]);
  }
  CHECK(fm_loss(c, path::Path(a.grid(), pa), path::Path(a.grid(), pb), s, paug) ==
        doctest::Approx(fm_loss(c, a, b, s, aug)).epsilon(1e-14));
  CHECK_THROWS_AS(fm_loss(m, a, b, s, Matrix()), Error);
}

TEST_CASE("minibatch OT pairing") {
  std::vector<Matrix> one{Matrix::Ones(3, 1)};
  CHECK(minibatch_ot_pair(one, one) == std::vector<std::size_t>{0});
  std::vector<Matrix> x0{Matrix::Constant(1, 1, 0.0), Matrix::Constant(1, 1, 10.0)};
  std::vector<Matrix> x1{Matrix::Constant(1, 1, 9.0), Matrix::Constant(1, 1, 1.0)};
  CHECK(minibatch_ot_pair(x0, x1) == std::vector<std::size_t>{1, 0});
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  auto cost = [](const std::vector<Matrix>& a, const std::vector<Matrix>& b, const std::vector<std::size_t>& s) {
    double c = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) c += (a[i] - b[s[i]]).squaredNorm();
    return c;
  };
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Matrix> a(6), b(6);
    for (auto* v : {&a, &b})
      for (auto& m : *v) {
        m.resize(4, 2);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
      }
    CHECK(cost(a, b, minibatch_ot_pair(a, b)) == doctest::Approx(cost(a, b, brute_force_ot_pair(a, b))).epsilon(1e-12));
  }
  std::vector<Matrix> three(3, Matrix::Zero(1, 1));
  CHECK_THROWS_AS(minibatch_ot_pair(three, one), Error);
}

TEST_CASE("Euler sampler") {
  std::mt19937_64 rng(3);
  auto x0 = random_path(5, 1, rng);
  SampleConfig cfg;
  FlowModel zero = FlowModel::make(1, 0, small_spec(), 3);
  CHECK(generate(zero, x0, Matrix(), cfg).values() == x0.values());
  FlowModel cst = constant_model(RowVector::Constant(1, 0.75));
  for (std::size_t n : {1, 3, 16}) {
    cfg.n_steps = n;
    CHECK((generate(cst, x0, Matrix(), cfg).values().array() - x0.values().array() - 0.75).abs().maxCoeff() <= 1e-14);
  }
  // One step is x0 + F(0, x0).
  auto spec = small_spec();
  spec.zero_final_readout = false;
  FlowModel r = FlowModel::make(1, 0, spec, 4);
  cfg.n_steps = 1;
  CHECK(generate(r, x0, Matrix(), cfg).values() == x0.values() + r.velocity(0.0, x0.values(), Matrix()));

  // dX/ds = x1 - X: Euler error against the exact solution halves per doubling.
  Matrix a = x0.values(), target = random_path(5, 1, rng).values();
  VelocityFn f = [&](double, const Matrix& x) { return Matrix(target - x); };
  const Matrix exact = target + std::exp(-1.0) * (a - target);
  double prev = 0.0;
  for (std::size_t n : {8, 16, 32, 64}) {
    const double err = (integrate(f, a, n) - exact).cwiseAbs().maxCoeff();
    if (prev > 0.0) CHECK(prev / err >= 1.9);
    prev = err;
  }
  VelocityFn blow = [](double, const Matrix& x) { return Matrix(x * 1e200); };
  try {
    integrate(blow, Matrix::Ones(2, 1), 4);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("flow step 1") != std::string::npos);
  }
  CHECK_THROWS_AS(integrate(f, a, 0), Error);
}

TEST_CASE("augmented generation holds the frozen channels") {
  std::mt19937_64 rng(5);
  auto frozen = random_path(4, 1, rng);
  FlowModel m = constant_model(RowVector::Constant(2, 0.5));
  SampleConfig cfg;
  cfg.n_steps = 8;
  auto out = generate_augmented(m, frozen, Matrix(), cfg);
  REQUIRE(out.channels() == 1);
  CHECK((out.values().array() - 0.5).abs().maxCoeff() <= 1e-14);
  CHECK_THROWS_AS(generate_augmented(constant_model(RowVector::Ones(1)), frozen, Matrix(), cfg), Error);
}

TEST_CASE("window preparation") {
  std::mt19937_64 rng(6);
  auto prior = gp::GaussianProcess::prior(gp::Kernel::ou(1.0, 1.0));
  auto w = random_path(8, 1, rng);
  ConditioningSpec cond;
  cond.context_len = 5;
  cond.aug.include_time = true;
  cond.aug.include_mask = true;
  cond.aug.include_gp_mean = true;
  auto pw = prepare_window({w, std::nullopt}, prior, cond, true);
  REQUIRE(pw.aug.cols() == 3);
  CHECK(pw.aug.col(1).head(5).isOnes());
  CHECK(pw.aug.col(1).tail(3).isZero());
  CHECK((pw.aug.col(2).head(5) - w.values().col(0).head(5)).cwiseAbs().maxCoeff() <= 1e-3);
  // The prediction region is never read.
  Matrix changed = w.values();
  changed.bottomRows(3).setConstant(100.0);
  auto pw2 = prepare_window({path::Path(w.grid(), changed), std::nullopt}, prior, cond, true);
  CHECK(pw2.aug == pw.aug);
  CHECK(pw2.x0_law.mean() == pw.x0_law.mean());

  cond.context_len = 8;
  CHECK_THROWS_AS(prepare_window({w, std::nullopt}, prior, cond, true), Error);
  cond.context_len = 5;
  cond.aug.lag_offsets = {2};
  CHECK_THROWS_AS(prepare_window({w, std::nullopt}, prior, cond, true), Error);
  cond.aug.lag_offsets.clear();
  CHECK_THROWS_AS(prepare_window({w, std::nullopt}, prior, cond, false), Error);
  CHECK_THROWS_AS(prepare_window({random_path(8, 2, rng), std::nullopt}, prior, cond, true), Error);
}

TEST_CASE("config validation") {
  TrainConfig t;
  t.coupling = Coupling::MinibatchOT;
  t.conditional = true;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t.conditional = false;
  CHECK_NOTHROW(t.validate());
  t.ema_decay = 1.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  SampleConfig s;
  s.n_steps = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK(coupling_from_string("minibatch_ot") == Coupling::MinibatchOT);
  CHECK_THROWS_AS(coupling_from_string("sinkhorn"), ConfigError);
}

namespace {

std::vector<Window> sinusoid_windows(std::size_t n_series) {
  data::SinusoidOUSpec spec;
  spec.n_series = n_series;
  spec.length = 96;
  auto ds = data::sinusoid_ou(spec, 0);
  std::vector<Vector> z;
  for (const auto& s : ds.series) z.push_back(data::Standardizer::fit(s).apply(s));
  data::WindowSpec ws;
  ws.context_len = 12;
  ws.pred_len = 12;
  ws.stride = 4;
  std::vector<Window> out;
  for (auto& w : data::make_windows(z, ds.dt, 0, 96, ws)) out.push_back(w.window);
  return out;
}

}  // namespace

TEST_CASE("training") {
  auto windows = sinusoid_windows(4);
  auto prior = gp::GaussianProcess::prior(gp::Kernel::ou(1.0, 1.0));
  ConditioningSpec cond;
  cond.context_len = 12;
  cond.aug.include_time = true;
  cond.aug.include_mask = true;
  cond.aug.include_gp_mean = true;
  FlowModel m = FlowModel::make(1, 3, small_spec(), 11);
  TrainConfig cfg;
  cfg.epochs = 0;
  auto r0 = train(m, windows, prior, cfg, cond);
  CHECK(r0.trace.empty());
  CHECK(net::collect_params(r0.model.backbone).flatten() == net::collect_params(m.backbone).flatten());

  cfg.epochs = 30;
  cfg.batches_per_epoch = 4;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-2;
  cfg.ema_decay = 0.9;
  cfg.seed = 5;
  auto r1 = train(m, windows, prior, cfg, cond);
  cfg.workers = 3;
  auto r2 = train(m, windows, prior, cfg, cond);
  REQUIRE(r1.trace.size() == 120);
  for (std::size_t i = 0; i < r1.trace.size(); ++i) CHECK(r1.trace[i].loss == r2.trace[i].loss);
  CHECK(net::collect_params(r1.model.backbone).flatten() == net::collect_params(r2.model.backbone).flatten());
  auto epoch_mean = [&](std::size_t e) {
    double s = 0.0;
    for (std::size_t b = 0; b < 4; ++b) s += r1.trace[e * 4 + b].loss;
    return s / 4.0;
  };
  CHECK(epoch_mean(29) < 0.5 * epoch_mean(0));

  TrainConfig bad = cfg;
  bad.coupling = Coupling::MinibatchOT;
  CHECK_THROWS_AS(train(m, windows, prior, bad, cond), ConfigError);
}

TEST_CASE("unconditional OT training and window sampling") {
  auto windows = sinusoid_windows(2);
  auto prior = gp::GaussianProcess::prior(gp::Kernel::ou(1.0, 1.0));
  ConditioningSpec cond;
  cond.aug.include_time = true;
  FlowModel m = FlowModel::make(1, 1, small_spec(), 12);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batches_per_epoch = 2;
  cfg.batch_size = 8;
  cfg.conditional = false;
  cfg.coupling = Coupling::MinibatchOT;
  auto r = train(m, windows, prior, cfg, cond);
  CHECK(r.trace.size() == 4);
  auto pw = prepare_window(windows[0], prior, cond, false);
  SampleConfig sc;
  sc.n_samples = 5;
  sc.seed = 3;
  auto a = sample_window(r.model, pw, windows[0].values.grid(), sc);
  sc.workers = 4;
  auto b = sample_window(r.model, pw, windows[0].values.grid(), sc);
  REQUIRE(a.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(a[i] == b[i]);
  CHECK(a[0] != a[1]);
}

#include "gslice/optim.hpp"

#include <doctest.h>

#include <random>

using namespace gslice;
using namespace gslice::optim;

TEST_CASE("parameter set bookkeeping") {
  ParameterSet ps;
  ps.add("a", Matrix::Ones(2, 3));
  ps.add("b", Matrix::Constant(1, 2, 2.0));
  CHECK_THROWS_AS(ps.add("a", Matrix::Zero(1, 1)), Error);
  CHECK(ps.n_scalars() == 8);
  Vector flat = ps.flatten();
  flat(7) = -1.0;
  ps.unflatten(flat);
  CHECK(ps.at("b")(0, 1) == -1.0);
  CHECK_THROWS_AS(ps.unflatten(Vector::Zero(3)), Error);
  CHECK_THROWS_AS(ps.at("zz"), Error);
  CHECK(ps.zeros_like().norm() == 0.0);
  CHECK(ps.same_layout(ps.zeros_like()));
}

TEST_CASE("zero gradient leaves parameters and counts the step") {
  ParameterSet ps;
  ps.add("x", Matrix::Constant(2, 2, 3.0));
  auto st = OptimState::init(ps, {});
  ParameterSet before = ps;
  step(ps, ps.zeros_like(), st);
  CHECK(ps.flatten() == before.flatten());
  CHECK(st.step_count == 1);
}

TEST_CASE("global norm clipping") {
  ParameterSet g;
  g.add("a", Matrix::Constant(1, 1, 3.0));
  g.add("b", Matrix::Constant(1, 1, 4.0));
  CHECK(clip_global_norm(g, 0.5) == doctest::Approx(5.0));
  CHECK(g[0](0, 0) == doctest::Approx(0.3));
  CHECK(g[1](0, 0) == doctest::Approx(0.4));
  ParameterSet again = g;
  clip_global_norm(again, 0.5);
  CHECK(again.flatten() == g.flatten());

  // The first Adam step only sees the clipped gradient through its sign, so
  // compare moments instead.
  ParameterSet p;
  p.add("a", Matrix::Zero(1, 1));
  p.add("b", Matrix::Zero(1, 1));
  ParameterSet raw;
  raw.add("a", Matrix::Constant(1, 1, 3.0));
  raw.add("b", Matrix::Constant(1, 1, 4.0));
  AdamConfig cfg;
  cfg.clip_norm = 0.5;
  auto st = OptimState::init(p, cfg);
  step(p, raw, st);
  CHECK(st.m[0](0, 0) == doctest::Approx(0.1 * 0.3));
  CHECK(st.m[1](0, 0) == doctest::Approx(0.1 * 0.4));
}

TEST_CASE("EMA with zero decay tracks the parameters") {
  ParameterSet ps;
  ps.add("x", Matrix::Constant(3, 1, 1.0));
  AdamConfig cfg;
  cfg.ema_decay = 0.0;
  auto st = OptimState::init(ps, cfg);
  ParameterSet g;
  g.add("x", Matrix::Constant(3, 1, 0.5));
  for (int i = 0; i < 3; ++i) {
    step(ps, g, st);
    REQUIRE(st.ema_shadow);
    CHECK(st.ema_shadow->flatten() == ps.flatten());
  }
}

TEST_CASE("Adam converges on a quadratic") {
  // L = 1/2 (x - c)^T Q (x - c)
  Matrix q(3, 3);
  q << 3, 1, 0, 1, 2, 0.5, 0, 0.5, 1;
  Vector c(3);
  c << 1.0, -2.0, 0.5;
  ParameterSet ps;
  ps.add("x", Matrix::Zero(3, 1));
  AdamConfig cfg;
  cfg.learning_rate = 1e-2;
  auto st = OptimState::init(ps, cfg);
  LossFn f = [&](ad::Tape& t, const std::vector<ad::Var>& v) {
    ad::Var d = ad::sub(v[0], t.constant(c));
    return ad::scale(ad::matmul(ad::transpose(d), ad::matmul(t.constant(q), d)), 0.5);
  };
  std::size_t used = 0;
  for (; used < 2000; ++used) {
    if ((ps[0] - c).cwiseAbs().maxCoeff() <= 1e-6) break;
    step(ps, gradient(f, ps).grads, st);
  }
  CHECK((ps[0] - c).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK(used <= 2000);
}

TEST_CASE("gradcheck detects a wrong gradient") {
  ParameterSet ps;
  ps.add("x", Matrix::Constant(2, 1, 0.7));
  // Custom node with a deliberately wrong backward.
  LossFn bad = [](ad::Tape& t, const std::vector<ad::Var>& v) {
    Matrix val(1, 1);
    val(0, 0) = v[0].value().squaredNorm();
    return t.record(val, {v[0]}, [x = v[0]](ad::Tape& tape, std::size_t self) {
      tape.accumulate(x.id(), tape.grad_of(self)(0, 0) * x.value());
    }, "bad");
  };
  CHECK(gradcheck(bad, ps).max_rel_error > 0.1);
  LossFn good = [](ad::Tape&, const std::vector<ad::Var>& v) { return ad::squared_norm(v[0]); };
  CHECK(gradcheck(good, ps).max_rel_error <= 1e-8);
}

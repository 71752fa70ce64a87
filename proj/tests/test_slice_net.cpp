#include "gslice/hardcore.hpp"
#include "gslice/slice_net.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

using namespace gslice;
using namespace gslice::net;

namespace {

Vector randn(Eigen::Index n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  Vector v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

path::Path random_path(std::size_t n, std::size_t ch, std::mt19937_64& rng) {
  Matrix v(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(ch));
  for (Eigen::Index c = 0; c < v.cols(); ++c) v.col(c) = randn(v.rows(), rng, 0.5);
  return path::Path(path::TimeGrid::regular(0.0, 0.1, n), v);
}

SliceStack random_stack(FamilyKind fam, ExpMode mode, std::uint64_t seed, std::size_t in = 2, std::size_t out = 1) {
  StackSpec spec;
  spec.in_dim = in;
  spec.out_dim = out;
  spec.hidden_dim = 4;
  spec.family = fam;
  spec.block_size = fam == FamilyKind::BlockDiagonal ? 2 : 0;
  spec.n_blocks = 2;
  spec.width = 3;
  spec.exp_mode = mode;
  spec.zero_final_readout = false;
  SliceStack s = make_stack(spec, seed);
  std::mt19937_64 rng(seed + 100);
  for (auto& b : s.blocks)
    for (auto& c : b.layer.transition.coeffs) c = randn(c.size(), rng, 0.4);
  return s;
}

std::vector<int> bits(unsigned mask, std::size_t n) {
  std::vector<int> z(n);
  for (std::size_t k = 0; k < n; ++k) z[k] = (mask >> k) & 1u;
  return z;
}

}  // namespace

TEST_CASE("zero transitions keep the hidden state at its initial value") {
  std::mt19937_64 rng(0);
  SliceStack s = random_stack(FamilyKind::Dense, ExpMode::Exact, 1);
  SliceLayer layer = s.blocks[0].layer;
  for (auto& c : layer.transition.coeffs) c.setZero();
  auto p = random_path(10, 2, rng);
  auto h = forward_layer(layer, p);
  Vector h0 = layer.init_map.apply_rows(p.values().topRows(1)).transpose();
  for (Eigen::Index k = 0; k < 10; ++k) CHECK((h.values().row(k).transpose() - h0).norm() == 0.0);
  CHECK_THROWS_AS(forward_layer(layer, random_path(1, 2, rng)), Error);
}

TEST_CASE("dense 2x2 layer against a fine Euler integration") {
  std::mt19937_64 rng(2);
  auto fam = structmat::StructureFamily::dense(2);
  structmat::StructuredTransition trans(fam, {randn(4, rng, 0.08), randn(4, rng, 0.08)});
  SliceLayer layer{trans, Affine(Matrix::Identity(2, 2), Vector::Zero(2)), Affine(Matrix::Zero(2, 2), Vector::Ones(2)),
                   ExpMode::Exact};
  const std::size_t n = 11;
  Matrix x(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / 10.0;
    x(static_cast<Eigen::Index>(i), 0) = std::sin(2.0 * std::numbers::pi * t);
    x(static_cast<Eigen::Index>(i), 1) = std::cos(2.0 * std::numbers::pi * t);
  }
  path::Path p(path::TimeGrid::regular(0.0, 0.1, n), x);
  auto h = forward_layer(layer, p);
  // The control is linear between grid points; Euler with 1e4 substeps per interval.
  const int sub = 10000;
  Matrix a0 = structmat::unpack(fam, trans.coeffs[0]), a1 = structmat::unpack(fam, trans.coeffs[1]);
  Vector state = Vector::Ones(2);
  double worst = 0.0;
  for (std::size_t j = 0; j + 1 < n; ++j) {
    const auto J = static_cast<Eigen::Index>(j);
    Matrix g = a0 * (x(J + 1, 0) - x(J, 0)) + a1 * (x(J + 1, 1) - x(J, 1));
    for (int s = 0; s < sub; ++s) state += g * state / sub;
    worst = std::max(worst, (h.values().row(J + 1).transpose() - state).cwiseAbs().maxCoeff());
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("hard-core realisation is exact on all length-8 inputs") {
  auto hc = hardcore_layer();
  for (unsigned m = 0; m < 256; ++m) {
    auto z = bits(m, 8);
    auto out = hardcore_layer_outputs(hc, z);
    auto target = hardcore::target_map(z);
    for (std::size_t k = 0; k < 8; ++k) CHECK(out[k] == static_cast<double>(target[k]));
  }
}

TEST_CASE("stack identities") {
  std::mt19937_64 rng(3);
  // One block, zero transitions, init = projection, identity readouts.
  SliceStack s;
  auto fam = structmat::StructureFamily::dense(2);
  Matrix proj(2, 3);
  proj << 1, 0, 0, 0, 0, 1;
  s.blocks.push_back({SliceLayer{structmat::StructuredTransition::zeros(fam, 3), Affine(Matrix::Identity(3, 3), Vector::Zero(3)),
                                 Affine(proj, Vector::Zero(2)), ExpMode::Exact},
                      Readout{{Affine(Matrix::Identity(2, 2), Vector::Zero(2))}, Nonlinearity::Identity}, false});
  s.final_readout = Readout{{Affine(Matrix::Identity(2, 2), Vector::Zero(2))}, Nonlinearity::Identity};
  auto p = random_path(6, 3, rng);
  auto out = forward_stack(s, p);
  for (Eigen::Index k = 0; k < 6; ++k) CHECK(out.values().row(k) == (proj * p.values().row(0).transpose()).transpose());

  // Two residual blocks with zero readouts are the identity.
  SliceStack r = random_stack(FamilyKind::Dense, ExpMode::Exact, 4, 3, 3);
  for (auto& b : r.blocks) {
    REQUIRE(b.residual);
    auto& last = b.readout.layers.back();
    last = Affine::zeros(last.out_dim(), last.in_dim());
  }
  r.final_readout = Readout{{Affine(Matrix::Identity(3, 3), Vector::Zero(3))}, Nonlinearity::Identity};
  r.validate();
  CHECK(forward_stack(r, p).values() == p.values());
  CHECK_THROWS_AS(forward_stack(r, random_path(6, 2, rng)), Error);
}

TEST_CASE("stack output is causal") {
  std::mt19937_64 rng(5);
  for (auto fam : {FamilyKind::Diagonal, FamilyKind::BlockDiagonal, FamilyKind::Dense}) {
    for (auto mode : {ExpMode::Exact, ExpMode::FirstOrder}) {
      for (int trial = 0; trial < 5; ++trial) {
        SliceStack s = random_stack(fam, mode, static_cast<std::uint64_t>(trial) + 10);
        auto p = random_path(20, 2, rng);
        auto full = forward_stack(s, p);
        for (std::size_t k : {1, 5, 12}) {
          path::Path cut(path::TimeGrid::regular(0.0, 0.1, k + 1), p.values().topRows(static_cast<Eigen::Index>(k + 1)));
          auto part = forward_stack(s, cut);
          CHECK((part.values() - full.values().topRows(static_cast<Eigen::Index>(k + 1))).cwiseAbs().maxCoeff() <= 1e-12);
        }
      }
    }
  }
}

TEST_CASE("hidden flow is homogeneous in the initial state") {
  std::mt19937_64 rng(6);
  SliceStack s = random_stack(FamilyKind::Dense, ExpMode::Exact, 3);
  SliceLayer layer = s.blocks[0].layer;
  layer.init_map.bias.setZero();
  auto p = random_path(12, 2, rng);
  auto h1 = forward_layer(layer, p);
  layer.init_map.weight *= -2.5;
  auto h2 = forward_layer(layer, p);
  CHECK((h2.values() + 2.5 * h1.values()).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, h1.values().norm()));
}

TEST_CASE("first-order mode converges to exact mode under refinement") {
  SliceStack s = random_stack(FamilyKind::Dense, ExpMode::Exact, 9);
  SliceLayer exact = s.blocks[0].layer, fo = exact;
  fo.exp_mode = ExpMode::FirstOrder;
  double prev = 0.0;
  for (std::size_t n : {16, 32, 64, 128}) {
    Matrix x(static_cast<Eigen::Index>(n + 1), 2);
    for (std::size_t i = 0; i <= n; ++i) {
      const double t = static_cast<double>(i) / static_cast<double>(n);
      x(static_cast<Eigen::Index>(i), 0) = std::sin(3.0 * t);
      x(static_cast<Eigen::Index>(i), 1) = t * t;
    }
    path::Path p(path::TimeGrid::regular(0.0, 1.0 / static_cast<double>(n), n + 1), x);
    const double d = (forward_layer(exact, p).values().bottomRows(1) - forward_layer(fo, p).values().bottomRows(1)).norm();
    if (prev > 0.0) CHECK(prev / d >= 1.8);
    prev = d;
  }
}

TEST_CASE("taped stack matches the plain forward") {
  std::mt19937_64 rng(7);
  for (auto fam : {FamilyKind::Diagonal, FamilyKind::BlockDiagonal, FamilyKind::Dense}) {
    for (auto mode : {ExpMode::Exact, ExpMode::FirstOrder}) {
      SliceStack s = random_stack(fam, mode, 21);
      for (std::size_t len : {1, 2, 9}) {
        auto p = random_path(len, 2, rng);
        ad::Tape tape;
        auto params = optim::bind(tape, collect_params(s));
        ad::Var y = forward_stack_taped(tape, s, params, tape.constant(p.values()));
        CHECK((y.value() - forward_stack(s, p).values()).cwiseAbs().maxCoeff() <= 1e-12);
      }
    }
  }
}

TEST_CASE("parameter and checkpoint round trips") {
  SliceStack s = random_stack(FamilyKind::BlockDiagonal, ExpMode::FirstOrder, 30);
  auto ps = collect_params(s);
  SliceStack t = random_stack(FamilyKind::BlockDiagonal, ExpMode::FirstOrder, 31);
  load_params(t, ps);
  CHECK(collect_params(t).flatten() == ps.flatten());
  std::stringstream man, blob;
  write_checkpoint(man, blob, s);
  SliceStack r = read_checkpoint(man, blob);
  CHECK(collect_params(r).flatten() == ps.flatten());
  CHECK(r.blocks[0].layer.exp_mode == ExpMode::FirstOrder);
  SliceStack other = random_stack(FamilyKind::Dense, ExpMode::Exact, 30, 3);
  CHECK_THROWS_AS(load_params(other, ps), Error);
}

TEST_CASE("exact-flow SSM basics") {
  auto m = random_ssm(SsmClass::DenseSelective, 3, 4);
  m.a0.setZero();
  m.a1.setZero();
  m.beta0.setZero();
  m.beta1.setZero();
  std::vector<int> z{1, 0, 1, 1, 0};
  for (double c : forward_ssm(m, z)) CHECK(c == doctest::Approx(m.w.dot(m.h0) + m.b).epsilon(1e-14));
  std::vector<int> bad{0, 2};
  CHECK_THROWS_AS(forward_ssm(m, bad), Error);

  // Diagonal selective against the plain recursion.
  auto d = random_ssm(SsmClass::DiagonalSelective, 3, 5);
  std::mt19937_64 rng(1);
  std::vector<int> zz(20);
  for (auto& v : zz) v = static_cast<int>(rng() & 1u);
  auto out = forward_ssm(d, zz);
  Vector h = d.h0;
  for (std::size_t k = 0; k < zz.size(); ++k) {
    const double zk = zz[k];
    Vector a = (1.0 - zk) * d.a0 + zk * d.a1;
    h = a.array().exp().matrix().cwiseProduct(h) + d.beta(zk);
    CHECK(std::abs(out[k] - (d.w.dot(h) + d.b)) <= 1e-12 * std::max(1.0, std::abs(out[k])));
  }
}

TEST_CASE("analytic construction") {
  auto m = analytic_construction(0.01);
  std::vector<int> ones{1, 1, 1, 1}, zeros{0, 0, 0}, mix{1, 0, 1};
  auto c = forward_ssm(m, ones);
  const double want[] = {1, 0, 1, 0};
  for (int k = 0; k < 4; ++k) CHECK(std::abs(c[static_cast<std::size_t>(k)] - want[k]) <= 0.01 + 1e-12);
  for (double v : forward_ssm(m, zeros)) CHECK(v == 0.0);
  auto cm = forward_ssm(m, mix);
  auto tm = hardcore::target_map(mix);
  for (int k = 0; k < 3; ++k) CHECK(std::abs(cm[static_cast<std::size_t>(k)] - tm[static_cast<std::size_t>(k)]) <= 0.01 + 1e-12);
  for (unsigned mask = 0; mask < 1024; ++mask) {
    auto z = bits(mask, 10);
    auto th = hardcore::threshold(forward_ssm(m, z));
    CHECK(th == hardcore::target_map(z));
  }
  CHECK_THROWS_AS(analytic_construction(0.5), Error);
  CHECK_THROWS_AS(analytic_construction(0.0), Error);
}

TEST_CASE("non-selective parallelogram identity") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto m = random_ssm(SsmClass::DenseNonSelective, 4, seed, 1.0, 1.0);
    auto y = [&](int a, int b) {
      std::vector<int> z{a, b};
      return forward_ssm(m, z)[1];
    };
    const double r = y(0, 0) + y(1, 1) - y(1, 0) - y(0, 1);
    CHECK(std::abs(r) <= 1e-9 * std::max(1.0, std::abs(y(0, 0)) + std::abs(y(1, 1))));
  }
}

TEST_CASE("diagonal sign-change bound") {
  for (std::size_t d : {2, 3, 4}) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      auto m = random_ssm(SsmClass::DiagonalSelective, d, seed * 7 + d, 1.0, 1.0);
      std::vector<int> ones(d + 10, 1);
      CHECK(hardcore::sign_changes(forward_ssm(m, ones)) <= d);
    }
  }
}

TEST_CASE("taped SSM outputs match forward_ssm") {
  for (auto cls : {SsmClass::DenseSelective, SsmClass::DiagonalSelective, SsmClass::DenseNonSelective}) {
    auto m = random_ssm(cls, 3, 11);
    std::vector<std::vector<int>> z{{1, 0, 1, 1}, {0, 0, 1, 0}};
    ad::Tape tape;
    auto params = optim::bind(tape, ssm_params(m));
    ad::Var out = ssm_outputs_taped(tape, m, params, z);
    for (std::size_t b = 0; b < 2; ++b) {
      auto ref = forward_ssm(m, z[b]);
      for (std::size_t k = 0; k < 4; ++k) CHECK(out.value()(0, static_cast<Eigen::Index>(b * 4 + k)) == doctest::Approx(ref[k]).epsilon(1e-12));
    }
  }
  CHECK(ssm_class_from_string(to_string(SsmClass::DiagonalSelective)) == SsmClass::DiagonalSelective);
  CHECK_THROWS_AS(ssm_class_from_string("mamba"), Error);
}

#include "gslice/scan.hpp"

#include <doctest.h>

#include <random>

using namespace gslice;
using namespace gslice::scan;
using structmat::StructureFamily;

namespace {

TransitionOperator random_op(const StructureFamily& f, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(f.block_size())));
  Vector p(static_cast<Eigen::Index>(f.packed_size()));
  for (auto& x : p) x = nd(rng);
  return {f, structmat::unpack(f, p)};
}

Vector randn(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Vector v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

double rel_err(const Matrix& a, const Matrix& b) { return (a - b).norm() / std::max(1e-300, b.norm()); }

}  // namespace

TEST_CASE("trivial prefix products") {
  auto f = StructureFamily::dense(3);
  std::mt19937_64 rng(0);
  std::vector<TransitionOperator> one{random_op(f, rng)};
  auto out = prefix_products(one);
  REQUIRE(out.size() == 1);
  CHECK(out[0].matrix == one[0].matrix);
  std::vector<TransitionOperator> ids(37, TransitionOperator::identity(f));
  for (const auto& o : prefix_products(ids, {4, 5})) CHECK(o.matrix == Matrix::Identity(3, 3));
  CHECK_THROWS_AS(prefix_products(std::span<const TransitionOperator>{}), Error);
  std::vector<TransitionOperator> mixed{random_op(f, rng), random_op(StructureFamily::dense(2), rng)};
  CHECK_THROWS_AS(prefix_products(mixed), Error);
}

TEST_CASE("prefix products against a sequential fold") {
  std::mt19937_64 rng(1);
  auto f = StructureFamily::dense(2);
  std::vector<TransitionOperator> ops;
  for (int i = 0; i < 64; ++i) ops.push_back(random_op(f, rng));
  Matrix acc = Matrix::Identity(2, 2);
  std::vector<Matrix> ref;
  for (const auto& o : ops) {
    acc = o.matrix * acc;
    ref.push_back(acc);
  }
  for (std::size_t workers : {1, 2, 8}) {
    for (std::size_t chunk : {0, 1, 3, 7, 64, 100}) {
      auto out = prefix_products(ops, {workers, chunk});
      REQUIRE(out.size() == 64);
      double worst = 0.0;
      for (std::size_t k = 0; k < 64; ++k) worst = std::max(worst, rel_err(out[k].matrix, ref[k]));
      CHECK(worst <= 1e-10);
      CHECK((out.back().matrix - acc).norm() <= 1e-10 * acc.norm());
    }
  }
}

TEST_CASE("result is bitwise independent of worker count") {
  std::mt19937_64 rng(2);
  for (const auto& f : {StructureFamily::diagonal(4), StructureFamily::block_diagonal(4, 2), StructureFamily::dense(4)}) {
    std::vector<TransitionOperator> ops;
    for (int i = 0; i < 300; ++i) ops.push_back(random_op(f, rng));
    auto a = prefix_products(ops, {1, 0});
    for (std::size_t w : {2, 3, 8}) {
      auto b = prefix_products(ops, {w, 0});
      for (std::size_t k = 0; k < ops.size(); ++k) CHECK(a[k].matrix == b[k].matrix);
    }
  }
}

TEST_CASE("affine scan") {
  std::mt19937_64 rng(3);
  auto f = StructureFamily::dense(3);
  // Zero offsets reduce to the homogeneous case.
  std::vector<AffineStep> steps;
  std::vector<TransitionOperator> ops;
  for (int i = 0; i < 40; ++i) {
    ops.push_back(random_op(f, rng));
    steps.push_back({ops.back(), Vector::Zero(3)});
  }
  Vector h0 = randn(3, rng);
  auto hs = prefix_affine(steps, h0, {2, 6});
  auto ps = prefix_products(ops, {2, 6});
  for (std::size_t k = 0; k < hs.size(); ++k) CHECK((hs[k] - ps[k].matrix * h0).norm() <= 1e-10 * std::max(1.0, hs[k].norm()));

  // Identity linears with unit offsets count steps.
  std::vector<AffineStep> counts(25, {TransitionOperator::identity(f), Vector::Unit(3, 0)});
  auto c = prefix_affine(counts, Vector::Zero(3), {3, 4});
  for (std::size_t k = 0; k < c.size(); ++k) CHECK(c[k] == static_cast<double>(k + 1) * Vector::Unit(3, 0));

  // Random steps vs the plain recursion.
  std::vector<AffineStep> rs;
  for (int i = 0; i < 128; ++i) rs.push_back({random_op(f, rng), randn(3, rng)});
  Vector h = h0;
  std::vector<Vector> ref;
  for (const auto& s : rs) {
    h = s.linear.matrix * h + s.offset;
    ref.push_back(h);
  }
  for (std::size_t w : {1, 2, 8}) {
    auto out = prefix_affine(rs, h0, {w, 0});
    for (std::size_t k = 0; k < ref.size(); ++k) CHECK((out[k] - ref[k]).norm() <= 1e-10 * std::max(1.0, ref[k].norm()));
  }
  CHECK_THROWS_AS(prefix_affine(std::span<const AffineStep>{}, h0), Error);
  std::vector<AffineStep> bad{{TransitionOperator::identity(f), Vector::Zero(2)}};
  CHECK_THROWS_AS(prefix_affine(bad, h0), Error);
}

TEST_CASE("affine combination is associative") {
  std::mt19937_64 rng(4);
  auto f = StructureFamily::dense(3);
  for (int trial = 0; trial < 100; ++trial) {
    AffineStep a{random_op(f, rng), randn(3, rng)}, b{random_op(f, rng), randn(3, rng)}, c{random_op(f, rng), randn(3, rng)};
    auto l = combine_affine(combine_affine(c, b), a);
    auto r = combine_affine(c, combine_affine(b, a));
    const double scale = std::max(1.0, l.linear.matrix.norm() + l.offset.norm());
    CHECK((l.linear.matrix - r.linear.matrix).norm() <= 1e-11 * scale);
    CHECK((l.offset - r.offset).norm() <= 1e-11 * scale);
  }
}

TEST_CASE("chunk size resolution") {
  CHECK(resolve_chunk_size(100, {}) == 7);
  CHECK(resolve_chunk_size(5, {}) == 1);
  CHECK(resolve_chunk_size(100, {1, 30}) == 30);
}

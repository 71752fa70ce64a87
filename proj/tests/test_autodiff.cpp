#include "gslice/autodiff.hpp"
#include "gslice/optim.hpp"

#include <doctest.h>

#include <random>

using namespace gslice;
using optim::ParameterSet;

namespace {

Matrix randm(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

double check(const optim::LossFn& f, const ParameterSet& ps) { return optim::gradcheck(f, ps).max_rel_error; }

}  // namespace

TEST_CASE("half squared norm has gradient p") {
  std::mt19937_64 rng(0);
  ParameterSet ps;
  ps.add("p", randm(3, 2, rng));
  auto r = optim::gradient([](ad::Tape&, const std::vector<ad::Var>& v) { return ad::scale(ad::squared_norm(v[0]), 0.5); }, ps);
  CHECK((r.grads[0] - ps[0]).norm() <= 1e-15);
  CHECK(r.loss == doctest::Approx(0.5 * ps[0].squaredNorm()));
}

TEST_CASE("scalar first-order exponential by hand") {
  // L = w (1 + a) h0
  ParameterSet ps;
  ps.add("a", Matrix::Constant(1, 1, 0.3));
  ps.add("w", Matrix::Constant(1, 1, -1.2));
  ps.add("h0", Matrix::Constant(1, 1, 0.7));
  auto fam = structmat::StructureFamily::diagonal(1);
  auto r = optim::gradient(
      [&](ad::Tape&, const std::vector<ad::Var>& v) {
        ad::Var e = ad::structured_exp_rows(v[0], fam, structmat::ExpMode::FirstOrder);
        return ad::matmul(ad::matmul(v[1], e), v[2]);
      },
      ps);
  CHECK(r.loss == doctest::Approx(-1.2 * 1.3 * 0.7));
  CHECK(r.grads[0](0, 0) == doctest::Approx(-1.2 * 0.7));
  CHECK(r.grads[1](0, 0) == doctest::Approx(1.3 * 0.7));
  CHECK(r.grads[2](0, 0) == doctest::Approx(-1.2 * 1.3));
}

TEST_CASE("primitive gradchecks") {
  std::mt19937_64 rng(1);
  ParameterSet ps;
  ps.add("a", randm(3, 4, rng));
  ps.add("b", randm(4, 2, rng));
  ps.add("r", randm(1, 4, rng));
  ps.add("c", randm(3, 1, rng));
  ps.add("s", randm(3, 4, rng));
  CHECK(check([](ad::Tape&, const std::vector<ad::Var>& v) { return ad::sum(ad::tanh(ad::matmul(v[0], v[1]))); }, ps) <= 1e-6);
  CHECK(check([](ad::Tape&, const std::vector<ad::Var>& v) {
          return ad::mean(ad::hadamard(ad::add_row(v[0], v[2]), ad::sub(v[4], ad::transpose(ad::transpose(v[0])))));
        }, ps) <= 1e-6);
  CHECK(check([](ad::Tape&, const std::vector<ad::Var>& v) {
          return ad::squared_norm(ad::add_col(ad::relu(v[0]), v[3]));
        }, ps) <= 1e-6);
  CHECK(check([](ad::Tape&, const std::vector<ad::Var>& v) {
          ad::Var x = ad::concat_cols({v[0], v[4]});
          ad::Var y = ad::concat_rows({ad::row(x, 0), ad::row_diff(x)});
          return ad::sum(ad::hadamard(ad::flatten(ad::cols(y, 2, 3)), ad::flatten(ad::cols(y, 1, 3))));
        }, ps) <= 1e-6);
  CHECK(check([](ad::Tape&, const std::vector<ad::Var>& v) {
          return ad::mean_squared_error(ad::add_n({v[0], v[4], ad::scale(v[0], 2.0)}), Matrix::Ones(3, 4));
        }, ps) <= 1e-6);
  CHECK(check([](ad::Tape& t, const std::vector<ad::Var>& v) {
          ad::Var spd = ad::add(ad::matmul(v[1], ad::transpose(v[1])), t.constant(Matrix::Identity(4, 4)));
          return ad::sum(ad::solve_spd(spd, ad::transpose(v[0])));
        }, ps) <= 1e-6);
}

TEST_CASE("structured exponential and scan kernels") {
  std::mt19937_64 rng(2);
  using structmat::ExpMode;
  using structmat::StructureFamily;
  for (const auto& fam : {StructureFamily::diagonal(3), StructureFamily::block_diagonal(4, 2), StructureFamily::dense(3)}) {
    for (auto mode : {ExpMode::Exact, ExpMode::FirstOrder}) {
      ParameterSet ps;
      const auto d = static_cast<Eigen::Index>(fam.dim());
      ps.add("g", randm(5, static_cast<Eigen::Index>(fam.packed_size()), rng, 0.6));
      ps.add("h0", randm(d, 1, rng));
      ps.add("w", randm(6, d, rng));
      auto f = [&](ad::Tape&, const std::vector<ad::Var>& v) {
        ad::Var phi = ad::structured_exp_rows(v[0], fam, mode);
        ad::Var h = ad::structured_linear_scan(phi, v[1], fam);
        return ad::sum(ad::hadamard(h, v[2]));
      };
      CHECK(check(f, ps) <= 1e-6);
      auto g = [&](ad::Tape&, const std::vector<ad::Var>& v) {
        ad::Var e = ad::structured_exp_rows(v[0], fam, mode);
        return ad::squared_norm(ad::matmul(ad::unpack(ad::row(e, 2), fam), v[1]));
      };
      CHECK(check(g, ps) <= 1e-6);
    }
  }
}

TEST_CASE("switched affine scan") {
  std::mt19937_64 rng(3);
  ParameterSet ps;
  ps.add("e0", randm(2, 2, rng, 0.7));
  ps.add("e1", randm(2, 2, rng, 0.7));
  ps.add("b0", randm(2, 1, rng));
  ps.add("b1", randm(2, 1, rng));
  ps.add("h0", randm(2, 1, rng));
  std::vector<std::vector<int>> sym{{0, 1, 1, 0, 1}, {1, 1, 0, 0, 0}};
  auto f = [&](ad::Tape&, const std::vector<ad::Var>& v) {
    return ad::squared_norm(ad::switched_affine_scan({v[0], v[1]}, {v[2], v[3]}, v[4], sym));
  };
  CHECK(check(f, ps) <= 1e-6);
  ad::Tape t;
  auto v = optim::bind(t, ps);
  ad::Var out = ad::switched_affine_scan({v[0], v[1]}, {v[2], v[3]}, v[4], sym);
  Vector h = ps[4];
  for (std::size_t k = 0; k < 5; ++k) {
    h = (sym[1][k] ? ps[1] : ps[0]) * h + (sym[1][k] ? ps[3] : ps[2]);
    CHECK((out.value().col(static_cast<Eigen::Index>(5 + k)) - h).norm() <= 1e-12);
  }
}

TEST_CASE("non-finite values name the operation") {
  ad::Tape t;
  ad::Var x = t.variable(Matrix::Constant(1, 1, 1e308));
  try {
    ad::scale(x, 1e10);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("scale") != std::string::npos);
  }
  ad::Var y = t.variable(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(t.backward(y), Error);
  CHECK_THROWS_AS(ad::matmul(y, t.constant(Matrix::Ones(3, 1))), Error);
}

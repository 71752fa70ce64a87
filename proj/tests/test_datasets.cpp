#include "gslice/datasets.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

using namespace gslice;
using namespace gslice::data;

TEST_CASE("generators are deterministic per seed") {
  SinusoidOUSpec s;
  s.n_series = 3;
  s.length = 100;
  const auto a = sinusoid_ou(s, 5), b = sinusoid_ou(s, 5), c = sinusoid_ou(s, 6);
  REQUIRE(a.series.size() == 3);
  CHECK(a.length() == 100);
  CHECK(a.dt == doctest::Approx(s.dt));
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.series[i] == b.series[i]);
  CHECK(a.series[0] != c.series[0]);
  a.validate();

  SeasonalSpec p;
  p.n_series = 2;
  p.length = 96;
  const auto d = piecewise_seasonal(p, 1), e = piecewise_seasonal(p, 1);
  REQUIRE(d.series.size() == 2);
  CHECK(d.series[1] == e.series[1]);
  d.validate();
}

TEST_CASE("generator spec errors") {
  SinusoidOUSpec s;
  s.length = 1;
  CHECK_THROWS_AS(sinusoid_ou(s, 0), ConfigError);
  s = {};
  s.amp_min = 2.0;
  s.amp_max = 1.0;
  CHECK_THROWS_AS(sinusoid_ou(s, 0), ConfigError);
  s = {};
  s.ou_theta = 1.5;
  CHECK_THROWS_AS(sinusoid_ou(s, 0), ConfigError);
}

TEST_CASE("dataset validation") {
  Dataset d;
  CHECK_THROWS_AS(d.validate(), Error);
  d.series = {Vector::Zero(4), Vector::Zero(5)};
  CHECK_THROWS_AS(d.validate(), Error);
  d.series = {Vector::Zero(4)};
  d.dt = 0.0;
  CHECK_THROWS_AS(d.validate(), Error);
  d.dt = 1.0;
  d.series[0](2) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(d.validate(), Error);
}

TEST_CASE("standardizer round trip") {
  Vector x(5);
  x << 1.0, 2.0, 3.0, 4.0, 10.0;
  const auto s = Standardizer::fit(x);
  const Vector z = s.apply(x);
  CHECK(z.mean() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(z.array().square().mean() == doctest::Approx(1.0));
  CHECK((s.invert(z) - x).cwiseAbs().maxCoeff() < 1e-12);
  const auto c = Standardizer::fit(Vector::Constant(3, 2.5));
  CHECK(c.scale == 1.0);
  CHECK(c.apply(Vector::Constant(1, 2.5))(0) == 0.0);
  CHECK_THROWS_AS(Standardizer::fit(Vector()), Error);
}

TEST_CASE("windows stay inside the range") {
  Vector x(20);
  for (int i = 0; i < 20; ++i) x(i) = i;
  WindowSpec ws;
  ws.context_len = 3;
  ws.pred_len = 2;
  ws.stride = 2;
  const auto w = make_windows({x}, 0.5, 0, 12, ws);
  // starts 0,2,4,6 fit since the last point index start+4 < 12
  REQUIRE(w.size() == 4);
  for (const auto& iw : w) {
    CHECK(iw.series == 0);
    CHECK(iw.start + 4 < 12);
    const auto& p = iw.window.values;
    CHECK(p.grid().times().front() == 0.0);
    CHECK(p.grid().times().back() == doctest::Approx(2.0));
    for (Eigen::Index j = 0; j < 5; ++j) CHECK(p.values()(j, 0) == static_cast<double>(iw.start) + static_cast<double>(j));
    CHECK(!iw.window.history);
  }
}

TEST_CASE("windows with history and subsampling") {
  Vector x(40);
  for (int i = 0; i < 40; ++i) x(i) = 100 + i;
  WindowSpec ws;
  ws.context_len = 2;
  ws.pred_len = 2;
  ws.stride = 5;
  ws.history_len = 3;
  ws.subsample = 2;
  const auto w = make_windows({x, 2 * x}, 1.0, 0, 40, ws);
  REQUIRE(!w.empty());
  for (const auto& iw : w) {
    CHECK(iw.start >= 6);
    REQUIRE(iw.window.history);
    const auto& h = *iw.window.history;
    const auto& ht = h.grid().times();
    REQUIRE(ht.size() == 3);
    CHECK(ht[0] == -6.0);
    CHECK(ht[2] == -2.0);
    const double scale = iw.series == 0 ? 1.0 : 2.0;
    CHECK(h.values()(0, 0) == scale * (100.0 + static_cast<double>(iw.start) - 6.0));
    CHECK(iw.window.values.values()(3, 0) == scale * (100.0 + static_cast<double>(iw.start) + 6.0));
    CHECK(iw.window.values.grid().times()[1] == 2.0);
  }
  ws.stride = 0;
  CHECK_THROWS_AS(make_windows({x}, 1.0, 0, 40, ws), ConfigError);
}

TEST_CASE("csv datasets") {
  const auto dir = std::filesystem::temp_directory_path() / "gslice_test_datasets";
  std::filesystem::create_directories(dir);
  const auto file = (dir / "two.csv").string();
  {
    std::ofstream o(file);
    o << "time,a,b\n0,1,5\n0.5,2,6\n1,3,7\n";
  }
  const auto d = read_csv_dataset(file);
  REQUIRE(d.series.size() == 2);
  CHECK(d.dt == doctest::Approx(0.5));
  CHECK(d.series[1](2) == 7.0);
  {
    std::ofstream o(dir / "irregular.csv");
    o << "time,a\n0,1\n0.5,2\n2,3\n";
  }
  CHECK_THROWS_AS(read_csv_dataset((dir / "irregular.csv").string()), Error);
  const auto missing = (dir / "nope.csv").string();
  try {
    read_csv_dataset(missing);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(missing) != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

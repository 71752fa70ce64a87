#include "gslice/experiment.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

using namespace gslice;
using namespace gslice::exp;
namespace fs = std::filesystem;

namespace {

ForecastConfig small_config() {
  ForecastConfig c = default_forecast_config();
  c.dataset.sinusoid.n_series = 3;
  c.dataset.sinusoid.length = 160;
  c.context_len = 12;
  c.pred_len = 12;
  c.train_stride = 4;
  c.test_windows = 2;
  c.model.hidden_dim = 4;
  c.model.block_size = 2;
  c.model.n_blocks = 1;
  c.model.width = 8;
  c.train.epochs = 2;
  c.train.batches_per_epoch = 2;
  c.train.batch_size = 8;
  c.sample.n_samples = 16;
  c.sample.n_steps = 4;
  c.irregular_points = 10;
  return c;
}

json base_json() { return json{{"schema_version", 1}}; }

std::string config_error(const json& j) {
  try {
    parse_forecast_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("check_keys") {
  CHECK_NOTHROW(check_keys(json{{"a", 1}}, {"a", "b"}, "x"));
  try {
    check_keys(json{{"a", 1}, {"zz", 2}}, {"a"}, "cfg.part");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("zz") != std::string::npos);
    CHECK(std::string(e.what()).find("cfg.part") != std::string::npos);
  }
  CHECK_THROWS_AS(check_keys(json::array(), {}, "x"), ConfigError);
}

TEST_CASE("forecast config parsing") {
  CHECK(config_error(json::object()).find("schema_version") != std::string::npos);
  CHECK(!config_error(json{{"schema_version", 2}}).empty());
  CHECK(config_error(base_json()).empty());

  json j = base_json();
  j["bogus"] = 1;
  CHECK(config_error(j).find("bogus") != std::string::npos);
  j = base_json();
  j["model"] = {{"widht", 3}};
  CHECK(config_error(j).find("widht") != std::string::npos);
  j = base_json();
  j["model"] = {{"bidirectional", true}};
  CHECK(config_error(j).find("bidirectional") != std::string::npos);
  j = base_json();
  j["model"] = {{"family", "sparse"}};
  CHECK(!config_error(j).empty());
  j = base_json();
  j["dataset"] = {{"generator", "nope"}};
  CHECK(!config_error(j).empty());
  j = base_json();
  j["prior"] = {{"kernel", "rbf"}};
  CHECK(!config_error(j).empty());
  j = base_json();
  j["prior"] = {{"length_scale", -1.0}};
  CHECK(!config_error(j).empty());

  j = base_json();
  j["seed"] = 9;
  j["dataset"] = {{"generator", "piecewise_seasonal"}, {"seed", 4}, {"params", {{"n_series", 5}, {"period", 12}}}};
  j["windows"] = {{"context_len", 6}, {"pred_len", 3}};
  j["model"] = {{"family", "dense"}, {"hidden_dim", 5}};
  j["augment"] = {{"lags", {1, 2}}};
  j["train"] = {{"epochs", 7}, {"coupling", "minibatch_ot"}};
  const auto c = parse_forecast_config(j);
  CHECK(c.seed == 9);
  CHECK(c.dataset.generator == "piecewise_seasonal");
  CHECK(c.dataset.seed == 4);
  CHECK(c.dataset.seasonal.n_series == 5);
  CHECK(c.dataset.seasonal.period == 12);
  CHECK(c.context_len == 6);
  CHECK(c.pred_len == 3);
  CHECK(c.model.family == net::FamilyKind::Dense);
  CHECK(c.model.hidden_dim == 5);
  CHECK(c.aug.lag_offsets == std::vector<std::size_t>{1, 2});
  CHECK(c.train.epochs == 7);
  CHECK(c.train.coupling == flow::Coupling::MinibatchOT);

  j = base_json();
  j["dataset"] = {{"file", "x.csv"}};
  CHECK(parse_forecast_config(j).dataset.generator == "csv");
}

TEST_CASE("hardcore config parsing") {
  json j = base_json();
  j["n"] = {8, 16};
  j["classes"] = {"all"};
  j["seeds"] = 2;
  j["widths"] = {{"dense_non_selective", 4}};
  const auto c = parse_hardcore_config(j);
  CHECK(c.lengths == std::vector<std::size_t>{8, 16});
  REQUIRE(c.classes.size() == 3);
  CHECK(c.base.seeds == std::vector<std::uint64_t>{0, 1});
  CHECK(c.widths == std::vector<std::size_t>{2, 4, 8});
  j["classes"] = {"quantum"};
  CHECK_THROWS_AS(parse_hardcore_config(j), ConfigError);
  j = base_json();
  j["certificates"] = {{"trails", 3}};
  CHECK_THROWS_AS(parse_hardcore_config(j), ConfigError);
}

TEST_CASE("config files") {
  const auto dir = fs::temp_directory_path() / "gslice_test_cfg";
  fs::create_directories(dir);
  {
    std::ofstream(dir / "ok.json") << R"({"schema_version": 1, "seed": 3})";
    std::ofstream(dir / "bad.json") << "{ nope";
  }
  CHECK(read_config_file(dir / "ok.json")["seed"] == 3);
  CHECK_THROWS_AS(read_config_file(dir / "bad.json"), ConfigError);
  try {
    read_config_file(dir / "missing.json");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("missing.json") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("atomic output dir") {
  CHECK_THROWS_AS(AtomicOutputDir(""), ConfigError);
  const auto root = fs::temp_directory_path() / "gslice_test_atomic";
  fs::remove_all(root);
  const auto out = root / "run";
  {
    AtomicOutputDir d(out);
    std::ofstream(d.file("a.txt")) << "first";
  }
  // Not committed: nothing appears and the temp dir is gone.
  CHECK(!fs::exists(out));
  CHECK(fs::is_empty(root));
  {
    AtomicOutputDir d(out);
    std::ofstream(d.file("a.txt")) << "first";
    d.commit();
  }
  CHECK(fs::exists(out / "a.txt"));
  {
    AtomicOutputDir d(out);
    std::ofstream(d.file("b.txt")) << "second";
    d.commit();
  }
  CHECK(!fs::exists(out / "a.txt"));
  CHECK(fs::exists(out / "b.txt"));
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(root)) ++entries;
  CHECK(entries == 1);
  fs::remove_all(root);
}

TEST_CASE("setup standardises on the training part") {
  const auto cfg = small_config();
  const auto s = make_setup(cfg);
  CHECK(s.test_begin == 160 - 24);
  REQUIRE(s.standardised.size() == 3);
  for (const auto& z : s.standardised) {
    const Vector train = z.head(static_cast<Eigen::Index>(s.test_begin));
    CHECK(train.mean() == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(train.array().square().mean() == doctest::Approx(1.0));
  }
  auto bad = cfg;
  bad.test_windows = 20;
  CHECK_THROWS_AS(make_setup(bad), ConfigError);

  const auto w = training_windows(s, cfg, 1);
  CHECK(!w.empty());
  for (const auto& x : w) CHECK(x.values.grid().size() == 24);
  const auto w2 = training_windows(s, cfg, 2);
  for (const auto& x : w2) CHECK(x.values.grid().size() == 12);
}

TEST_CASE("test cases") {
  const auto cfg = small_config();
  const auto s = make_setup(cfg);
  const auto reg = regular_test_cases(s, cfg, 1);
  REQUIRE(reg.size() == 6);
  for (const auto& c : reg) {
    CHECK(c.n_context == 12);
    CHECK(c.offsets.size() == 24);
    // prediction points tile the test region
    CHECK(c.start + c.n_context >= s.test_begin);
    CHECK(c.start + c.offsets.back() < 160);
  }
  const auto coarse = regular_test_cases(s, cfg, 2);
  CHECK(coarse[0].offsets.size() == 12);
  CHECK(coarse[0].offsets[1] == 2);
  CHECK(coarse[0].n_context == 6);

  for (double k : {1.0, 100.0}) {
    const auto irr = irregular_test_cases(s, cfg, k, 17);
    REQUIRE(irr.size() == reg.size());
    for (const auto& c : irr) {
      CHECK(c.offsets.size() == 10);
      CHECK(std::is_sorted(c.offsets.begin(), c.offsets.end()));
      CHECK(std::adjacent_find(c.offsets.begin(), c.offsets.end()) == c.offsets.end());
      CHECK(c.offsets.back() < 24);
      CHECK(c.n_context > 0);
      CHECK(c.n_context < c.offsets.size());
      CHECK(c.offsets[c.n_context - 1] < 12);
      CHECK(c.offsets[c.n_context] >= 12);
    }
    const auto again = irregular_test_cases(s, cfg, k, 17);
    CHECK(again[3].offsets == irr[3].offsets);
  }
}

TEST_CASE("adapters match direct on the training grid") {
  const auto cfg = small_config();
  const auto s = make_setup(cfg);
  const auto model = untrained_model(cfg);
  const auto cases = regular_test_cases(s, cfg, 1);
  const auto direct = forecast(model, s, cfg, cases, Adapter::Direct, 1, 1);
  for (auto a : {Adapter::ZeroOrderHold, Adapter::GpOversample}) {
    const auto f = forecast(model, s, cfg, cases, a, 1, 1);
    double worst = 0.0;
    for (std::size_t i = 0; i < cases.size(); ++i)
      worst = std::max(worst, (f.samples[i] - direct.samples[i]).cwiseAbs().maxCoeff());
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("forecast shapes and worker invariance") {
  const auto cfg = small_config();
  const auto s = make_setup(cfg);
  const auto model = untrained_model(cfg);
  const auto cases = regular_test_cases(s, cfg, 1);
  const auto a = forecast(model, s, cfg, cases, Adapter::Direct, 1, 1);
  const auto b = forecast(model, s, cfg, cases, Adapter::Direct, 1, 3);
  REQUIRE(a.samples.size() == cases.size());
  CHECK(a.samples[0].rows() == 16);
  CHECK(a.samples[0].cols() == 12);
  CHECK(a.times[0].front() == doctest::Approx(12 * s.dataset.dt));
  for (std::size_t i = 0; i < cases.size(); ++i) CHECK(a.samples[i] == b.samples[i]);
  CHECK(a.crps == b.crps);
  CHECK(a.crps > 0.0);
  // Targets come back on the original scale.
  const auto& c = cases[0];
  CHECK(a.targets[0](0) == doctest::Approx(s.dataset.series[c.series](static_cast<Eigen::Index>(c.start + 12))));
}

TEST_CASE("untrained model forecasts like the prior") {
  auto cfg = small_config();
  cfg.train.epochs = 0;
  const auto run = run_forecast(cfg, 1);
  CHECK(run.model.crps == doctest::Approx(run.baseline.crps).epsilon(0.2));
}

TEST_CASE("run_forecast is deterministic") {
  const auto cfg = small_config();
  const auto a = run_forecast(cfg, 1);
  const auto b = run_forecast(cfg, 2);
  CHECK(a.model.crps == b.model.crps);
  CHECK(a.baseline.crps == b.baseline.crps);
  auto unc = cfg;
  unc.train.conditional = false;
  CHECK_THROWS_AS(run_forecast(unc, 1), ConfigError);
  auto bad = cfg;
  bad.pred_len = 0;
  CHECK_THROWS_AS(run_forecast(bad, 1), ConfigError);
}

TEST_CASE("forecast command writes tidy metrics") {
  const auto out = fs::temp_directory_path() / "gslice_test_forecast";
  fs::remove_all(out);
  RunOptions opts;
  opts.out_dir = out;
  std::ostringstream log;
  CHECK(cmd_forecast(small_config(), opts, log) == 0);
  std::ifstream m(out / "metrics.csv");
  std::string line;
  std::getline(m, line);
  CHECK(line == "metric,dataset,model,seed,value");
  std::size_t rows = 0;
  while (std::getline(m, line)) ++rows;
  CHECK(rows == 4);
  for (const char* f : {"loss_trace.csv", "quantiles.csv", "samples.csv", "model.json", "model.bin"})
    CHECK(fs::exists(out / f));
  fs::remove_all(out);
}

TEST_CASE("shipped configs parse and validate") {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(GSLICE_CONFIG_DIR)) {
    if (e.path().extension() != ".json") continue;
    CAPTURE(e.path().string());
    const auto j = read_config_file(e.path());
    const std::string cmd = j.at("command").get<std::string>();
    if (cmd == "hardcore") {
      const auto c = parse_hardcore_config(j);
      CHECK(c.base.seeds.size() == 3);
    } else {
      const auto c = parse_forecast_config(j);
      // Setup and windows must fit the configured dataset.
      const auto s = make_setup(c);
      CHECK(!training_windows(s, c, 1).empty());
      CHECK(!regular_test_cases(s, c, 1).empty());
    }
    ++n;
  }
  CHECK(n >= 5);
  // The shipped sinusoid config spells out the defaults.
  const auto c = parse_forecast_config(read_config_file(fs::path(GSLICE_CONFIG_DIR) / "forecast_sinusoid.json"));
  const auto d = default_forecast_config();
  CHECK(c.train.epochs == d.train.epochs);
  CHECK(c.train.clip_norm == d.train.clip_norm);
  CHECK(c.train.ema_decay == d.train.ema_decay);
  CHECK(c.model.hidden_dim == d.model.hidden_dim);
  CHECK(c.dataset.sinusoid.dt == d.dataset.sinusoid.dt);
}

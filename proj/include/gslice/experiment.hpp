#pragma once

// Experiment commands behind the gslice CLI: configuration parsing, the
// forecasting and grid-shift pipelines, and tidy CSV output.

#include "gslice/datasets.hpp"
#include "gslice/flow.hpp"
#include "gslice/gp.hpp"
#include "gslice/hardcore.hpp"
#include "gslice/metrics.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace gslice::exp {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Command-line overrides shared by all commands.
struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::filesystem::path out_dir = "gslice_out";
};

/// Throws ConfigError naming the first key of `obj` not in `allowed`.
void check_keys(const json& obj, const std::vector<std::string>& allowed, const std::string& where);
json read_config_file(const std::filesystem::path& file);

// ---- hard-core ----

struct HardcoreRunConfig {
  std::vector<std::size_t> lengths{8, 32, 128};
  std::vector<net::SsmClass> classes{net::SsmClass::DenseSelective, net::SsmClass::DenseNonSelective,
                                     net::SsmClass::DiagonalSelective};
  /// Widths per class, in `classes` order.
  std::vector<std::size_t> widths{2, 8, 8};
  hardcore::HardcoreConfig base;
  bool analytic = false;
  std::vector<std::size_t> certificate_dims{2, 3, 4};
  std::size_t certificate_trials = 100;
  std::size_t certificate_n = 6;
  double eta = 1e-3;
};

HardcoreRunConfig parse_hardcore_config(const json& j);

// ---- forecasting ----

struct DatasetConfig {
  std::string generator = "sinusoid_ou";
  data::SinusoidOUSpec sinusoid;
  data::SeasonalSpec seasonal;
  std::string file;
  std::uint64_t seed = 0;
};

struct ForecastConfig {
  DatasetConfig dataset;
  std::size_t context_len = 24;
  std::size_t pred_len = 24;
  std::size_t train_stride = 1;
  /// Rolling test windows per series at the end of each series.
  std::size_t test_windows = 4;
  net::StackSpec model;
  gp::Kernel kernel = gp::Kernel::ou(1.0, 1.0);
  double sigma_obs = 1e-4;
  path::AugmentationSpec aug;
  flow::TrainConfig train;
  flow::SampleConfig sample;
  metrics::QuantileGrid quantiles;
  double ridge_lambda = 1e-2;
  std::uint64_t seed = 0;

  // Grid-shift study.
  std::vector<std::size_t> train_subsamples{1};
  std::vector<std::size_t> test_subsamples{1, 2};
  std::vector<double> gamma_shapes{1.0, 10.0, 100.0};
  std::size_t irregular_points = 24;
};

/// Defaults used by the shipped example configs and the acceptance run.
ForecastConfig default_forecast_config();
ForecastConfig parse_forecast_config(const json& j);

/// Data, standardisation and windows shared by training and evaluation.
struct ForecastSetup {
  data::Dataset dataset;
  std::vector<data::Standardizer> scalers;
  std::vector<Vector> standardised;
  std::size_t test_begin = 0;
  gp::GaussianProcess prior;
  flow::ConditioningSpec cond;
};

ForecastSetup make_setup(const ForecastConfig& cfg);

/// Training windows on the grid subsampled by `subsample`.
std::vector<flow::Window> training_windows(const ForecastSetup& setup, const ForecastConfig& cfg,
                                           std::size_t subsample);

flow::FlowModel untrained_model(const ForecastConfig& cfg);

/// One test case: base-grid offsets (relative to `start`) of the evaluation
/// points, the first `n_context` of which are observed.
struct TestCase {
  std::size_t series = 0;
  std::size_t start = 0;
  std::vector<std::size_t> offsets;
  std::size_t n_context = 0;
};

/// Rolling regular test cases on the grid subsampled by `subsample`.
std::vector<TestCase> regular_test_cases(const ForecastSetup& setup, const ForecastConfig& cfg, std::size_t subsample);
/// Gamma-renewal subgrids of each regular (subsample 1) test window.
std::vector<TestCase> irregular_test_cases(const ForecastSetup& setup, const ForecastConfig& cfg, double shape_k,
                                           std::uint64_t seed);

enum class Adapter { Direct, ZeroOrderHold, GpOversample, PriorOnly };
std::string to_string(Adapter a);

struct Forecasts {
  /// Per case: n_samples x n_prediction_points, original scale.
  std::vector<Matrix> samples;
  std::vector<Vector> targets;
  std::vector<std::vector<double>> times;
  double crps = 0.0;
  double nrmse = 0.0;
};

/// Samples prediction points of every case. Direct runs the model on the
/// case's own grid; the adapters run it on the training grid (subsample
/// `train_subsample`) and map back to the case's prediction times. PriorOnly
/// returns the conditional GP draws themselves.
Forecasts forecast(const flow::FlowModel& model, const ForecastSetup& setup, const ForecastConfig& cfg,
                   const std::vector<TestCase>& cases, Adapter adapter, std::size_t train_subsample,
                   std::size_t workers);

struct ForecastRun {
  flow::TrainResult trained;
  Forecasts model;
  Forecasts baseline;
};

ForecastRun run_forecast(const ForecastConfig& cfg, std::size_t workers);

// ---- commands; each returns an exit code ----

int cmd_hardcore(const HardcoreRunConfig& cfg, const RunOptions& opts, std::ostream& log);
int cmd_forecast(const ForecastConfig& cfg, const RunOptions& opts, std::ostream& log);
int cmd_gridshift(const ForecastConfig& cfg, const RunOptions& opts, std::ostream& log);
int cmd_selftest(const RunOptions& opts, std::ostream& log);

/// Writes into a fresh temp directory next to `out`, then swaps it in.
class AtomicOutputDir {
 public:
  explicit AtomicOutputDir(std::filesystem::path out);
  ~AtomicOutputDir();
  AtomicOutputDir(const AtomicOutputDir&) = delete;
  AtomicOutputDir& operator=(const AtomicOutputDir&) = delete;

  std::filesystem::path file(const std::string& name) const { return tmp_ / name; }
  void commit();

 private:
  std::filesystem::path out_;
  std::filesystem::path tmp_;
  bool committed_ = false;
};

}  // namespace gslice::exp

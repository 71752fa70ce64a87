// gslice: experiment runner.
//   gslice <hardcore|forecast|gridshift|selftest> [--config FILE] [--seed N] [--workers N] [--out DIR]
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include "gslice/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

using namespace gslice;

namespace {

std::size_t workers_from_env() {
  const char* v = std::getenv("GSLICE_WORKERS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("GSLICE_WORKERS must be a positive integer, got '") + v + "'");
  return static_cast<std::size_t>(n);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative structured linear CDE experiments"};
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 0;
  std::string out = "gslice_out";
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON config file");
    sub->add_option("--seed", seed, "master seed override");
    sub->add_option("--workers", workers, "worker threads (default: GSLICE_WORKERS or 1)")->check(CLI::PositiveNumber);
    sub->add_option("--out", out, "output directory");
  };

  auto* hc = app.add_subcommand("hardcore", "hard-core benchmark and separation certificates");
  common(hc);
  std::vector<std::size_t> lengths;
  std::vector<std::string> classes;
  std::optional<std::size_t> n_seeds;
  bool analytic = false;
  std::optional<std::size_t> hc_epochs;
  hc->add_option("--n", lengths, "sequence lengths, comma separated")->delimiter(',');
  hc->add_option("--classes", classes, "model classes or 'all'")->delimiter(',');
  hc->add_option("--seeds", n_seeds, "number of seeds");
  hc->add_flag("--analytic", analytic, "also run the exhaustive analytic checks");
  hc->add_option("--epochs", hc_epochs, "training epochs");

  auto* fc = app.add_subcommand("forecast", "train and evaluate a conditional flow model");
  common(fc);
  std::optional<std::size_t> epochs;
  fc->add_option("--epochs", epochs, "training epochs override");

  auto* gs = app.add_subcommand("gridshift", "evaluate one model across grids");
  common(gs);
  gs->add_option("--epochs", epochs, "training epochs override");

  auto* st = app.add_subcommand("selftest", "invariant suite");
  common(st);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    exp::RunOptions opts;
    opts.seed = seed;
    opts.workers = workers > 0 ? workers : workers_from_env();
    opts.out_dir = out;
    const auto json_or_empty = [&]() -> exp::json {
      return config.empty() ? exp::json{{"schema_version", exp::kSchemaVersion}} : exp::read_config_file(config);
    };

    if (hc->parsed()) {
      auto cfg = exp::parse_hardcore_config(json_or_empty());
      if (!lengths.empty()) cfg.lengths = lengths;
      if (!classes.empty()) {
        exp::json j{{"schema_version", exp::kSchemaVersion}, {"classes", classes}};
        const auto parsed = exp::parse_hardcore_config(j);
        cfg.classes = parsed.classes;
        cfg.widths = parsed.widths;
      }
      if (n_seeds) {
        cfg.base.seeds.clear();
        for (std::size_t i = 0; i < *n_seeds; ++i) cfg.base.seeds.push_back(i);
      }
      if (hc_epochs) cfg.base.epochs = *hc_epochs;
      cfg.analytic = cfg.analytic || analytic;
      return exp::cmd_hardcore(cfg, opts, std::cout);
    }
    if (fc->parsed() || gs->parsed()) {
      auto cfg = config.empty() ? exp::default_forecast_config() : exp::parse_forecast_config(json_or_empty());
      if (epochs) cfg.train.epochs = *epochs;
      return fc->parsed() ? exp::cmd_forecast(cfg, opts, std::cout) : exp::cmd_gridshift(cfg, opts, std::cout);
    }
    return exp::cmd_selftest(opts, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "gslice: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "gslice: " << e.what() << "\n";
    return 1;
  }
}

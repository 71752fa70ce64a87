#pragma once

// Hard-core sequence benchmark: target map, exact-flow SSM training harness,
// pushforward laws and the separation checks between model classes.

#include "gslice/metrics.hpp"
#include "gslice/slice_net.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace gslice::hardcore {

using net::SsmClass;
using Sequence = std::vector<int>;

/// C_1 = Z_1, C_k = Z_k (1 - C_{k-1}).
Sequence target_map(std::span<const int> z);
/// No two consecutive ones.
bool is_valid(std::span<const int> c);
/// 1 where x >= 1/2.
Sequence threshold(std::span<const double> x);

struct HardcoreConfig {
  std::size_t n = 8;
  double p = 0.5;
  std::size_t n_train = 1000;
  std::size_t n_val = 200;
  std::size_t n_test = 200;
  std::size_t epochs = 50;
  double learning_rate = 1e-2;
  std::size_t batch_size = 256;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t width = 2;
  /// Standard deviation of the random initialisation.
  double init_scale = 0.1;
  /// Start A from the S4D-Lin base plus noise rather than noise alone.
  bool s4d_lin_init = true;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
  std::size_t workers = 1;

  void validate() const;
};

struct SeedResult {
  std::uint64_t seed = 0;
  double exact_accuracy = 0.0;
  double validity_ratio = 0.0;
  std::size_t best_epoch = 0;
  double final_train_loss = 0.0;
  net::ExactFlowSSM model;
};

struct HardcoreResult {
  SsmClass cls = SsmClass::DenseSelective;
  std::size_t n = 0;
  std::size_t width = 0;
  double exact_accuracy = 0.0;
  double validity_ratio = 0.0;
  std::vector<SeedResult> per_seed;
};

struct Split {
  std::vector<Sequence> z;
  std::vector<Sequence> c;
};

/// i.i.d. Bernoulli(p) inputs of length n with their targets.
Split make_split(std::size_t count, std::size_t n, double p, std::uint64_t seed);

/// Fractions of sequences whose thresholded outputs match exactly / are valid.
std::pair<double, double> evaluate(const net::ExactFlowSSM& model, const Split& data);

SeedResult train_seed(SsmClass cls, const HardcoreConfig& cfg, std::uint64_t seed);
HardcoreResult run_benchmark(SsmClass cls, const HardcoreConfig& cfg);

using SequenceMap = std::function<std::vector<double>(std::span<const int>)>;

SequenceMap target_as_map();
/// Model outputs, thresholded at 1/2 when `thresholded`.
SequenceMap model_as_map(net::ExactFlowSSM model, bool thresholded);

struct PushforwardLaw {
  metrics::EmpiricalLaw law;
  bool exact = false;
  std::size_t n_draws = 0;
  /// Monte-Carlo standard error of each atom's mass (zeros when exact).
  std::vector<double> mass_standard_error;
};

inline constexpr std::size_t kMaxExactLength = 12;

/// Exact enumeration over all 2^n inputs for n <= 12, Monte-Carlo with
/// n_draws samples otherwise.
PushforwardLaw pushforward_law(const SequenceMap& f, std::size_t n, double p, std::size_t n_draws, std::uint64_t seed);

struct CertificateReport {
  std::size_t d = 0;
  std::size_t n = 0;
  std::size_t trials = 0;
  double max_parallelogram_residual = 0.0;
  double min_winf_non_selective = 0.0;
  std::size_t max_sign_changes = 0;
  std::size_t sign_change_violations = 0;
  double min_max_error_diagonal = 0.0;
  double eta = 1e-3;
  double winf_analytic = 0.0;

  bool parallelogram_ok() const { return max_parallelogram_residual <= 1e-9; }
  bool winf_bound_ok() const { return min_winf_non_selective >= 0.25 - 1e-6; }
  bool sign_changes_ok() const { return sign_change_violations == 0; }
  bool diagonal_error_ok() const { return min_max_error_diagonal >= 0.5; }
  bool analytic_ok() const { return winf_analytic <= eta + 1e-12; }
  bool all_pass() const {
    return parallelogram_ok() && winf_bound_ok() && sign_changes_ok() && diagonal_error_ok() && analytic_ok();
  }
};

/// Sign changes of x_k - 1/2, zeros skipped.
std::size_t sign_changes(std::span<const double> x);

/// (a) parallelogram residuals and (b) W-infinity lower bound for random
/// width-d dense non-selective models at n = 2, p = 1/2; (c) sign-change bound
/// and pointwise error for random width-d diagonal models on all-ones inputs
/// (lengths d+10 and d+2); (d) W-infinity of the eta construction at length n,
/// p = 1/2.
CertificateReport separation_certificates(std::size_t d, std::size_t n, std::size_t trials, std::uint64_t seed,
                                          double eta = 1e-3);

struct AnalyticReport {
  std::size_t realisation_n = 0;
  std::size_t realisation_mismatches = 0;
  double realisation_max_error = 0.0;
  std::size_t eta_n = 0;
  double eta = 0.0;
  double eta_max_error = 0.0;

  bool realisation_ok() const { return realisation_mismatches == 0; }
  // The bound is attained with equality; allow for rounding.
  bool eta_ok() const { return eta_max_error <= eta + 1e-12; }
};

/// Exhaustive checks of the width-2 first-order realisation (all 2^n_real
/// inputs, thresholded outputs against the target) and of the eta
/// construction (uniform raw error over all 2^n_eta inputs).
AnalyticReport analytic_checks(std::size_t n_real, std::size_t n_eta, double eta);

}  // namespace gslice::hardcore

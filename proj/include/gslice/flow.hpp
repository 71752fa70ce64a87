#pragma once

// Flow matching on path space with a SLiCE velocity field: interpolants,
// losses, minibatch OT pairing, training loop and flow-time Euler sampling.

#include "gslice/autodiff.hpp"
#include "gslice/common.hpp"
#include "gslice/gp.hpp"
#include "gslice/optim.hpp"
#include "gslice/path.hpp"
#include "gslice/slice_net.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace gslice::flow {

enum class Coupling { Independent, MinibatchOT };
std::string to_string(Coupling c);
Coupling coupling_from_string(const std::string& name);

/// Backbone input = data channels, augmentation channels, flow time s;
/// output = data channels.
struct FlowModel {
  net::SliceStack backbone;
  std::size_t data_channels = 1;
  std::size_t aug_channels = 0;

  /// `spec.in_dim` and `spec.out_dim` are overwritten from the channel counts.
  static FlowModel make(std::size_t data_channels, std::size_t aug_channels, net::StackSpec spec, std::uint64_t seed);
  void validate() const;
  /// F(s, X): points x data_channels.
  Matrix velocity(double s, const Matrix& x, const Matrix& aug) const;
};

/// Rows: [x | aug | s].
Matrix model_input(const Matrix& x, const Matrix& aug, double s);

path::Path interpolate(const path::Path& x0, const path::Path& x1, double s);
path::Path target_velocity(const path::Path& x0, const path::Path& x1);

/// Mean over grid points and data channels of |F(s, X_s) - (x1 - x0)|^2.
double fm_loss(const FlowModel& model, const path::Path& x0, const path::Path& x1, double s, const Matrix& aug);
ad::Var fm_loss_taped(ad::Tape& tape, const FlowModel& model, const std::vector<ad::Var>& params, const Matrix& x0,
                      const Matrix& x1, double s, const Matrix& aug);

/// sigma minimising sum_i |x0_i - x1_sigma(i)|^2 (Hungarian algorithm); x0_i
/// is paired with x1_sigma(i).
std::vector<std::size_t> minibatch_ot_pair(const std::vector<Matrix>& x0, const std::vector<Matrix>& x1);

/// Reference brute force over all permutations (B <= 8).
std::vector<std::size_t> brute_force_ot_pair(const std::vector<Matrix>& x0, const std::vector<Matrix>& x1);

struct TrainConfig {
  std::size_t epochs = 400;
  std::size_t batches_per_epoch = 128;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  /// EMA decay of the returned weights; 0 disables.
  double ema_decay = 0.999;
  Coupling coupling = Coupling::Independent;
  bool conditional = true;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const;
};

struct SampleConfig {
  std::size_t n_steps = 16;
  std::size_t n_samples = 100;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const;
};

/// How a data window is turned into prior and augmentation channels.
struct ConditioningSpec {
  /// Leading grid points observed as context (conditional mode).
  std::size_t context_len = 0;
  double sigma_obs = 1e-4;
  path::AugmentationSpec aug;
};

std::size_t aug_channel_count(const path::AugmentationSpec& spec);

struct Window {
  path::Path values;
  /// Points preceding the window, needed by lag channels.
  std::optional<path::Path> history;
};

/// Prior of x0 for one window (shared by all data channels) plus its
/// augmentation channels.
struct PreparedWindow {
  gp::GridSampler x0_law;
  Matrix aug;
};

/// Conditional mode conditions the prior on the context values of a single
/// data channel; the prediction region of `window.values` is never read.
PreparedWindow prepare_window(const Window& window, const gp::GaussianProcess& prior, const ConditioningSpec& cond,
                              bool conditional);

/// points x channels prior draw.
Matrix draw_x0(const PreparedWindow& w, std::size_t channels, std::mt19937_64& rng);

struct LossRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double loss = 0.0;
};

struct TrainResult {
  FlowModel model;
  std::vector<LossRecord> trace;
};

TrainResult train(const FlowModel& model, const std::vector<Window>& data, const gp::GaussianProcess& prior,
                  const TrainConfig& cfg, const ConditioningSpec& cond);

using VelocityFn = std::function<Matrix(double s, const Matrix& x)>;

/// Explicit Euler in flow time, X <- X + F(s, X) / n_steps.
Matrix integrate(const VelocityFn& field, const Matrix& x0, std::size_t n_steps);

path::Path generate(const FlowModel& model, const path::Path& x0, const Matrix& aug, const SampleConfig& cfg);

/// Terminal projection of an augmented flow: the first frozen.channels()
/// data channels are held at `frozen`, the remaining ones start at zero and
/// follow the model; returns the latter at s = 1.
path::Path generate_augmented(const FlowModel& model, const path::Path& frozen, const Matrix& aug,
                              const SampleConfig& cfg);

/// cfg.n_samples generations for one window (sample i seeded from cfg.seed
/// and i), each points x data_channels.
std::vector<Matrix> sample_window(const FlowModel& model, const PreparedWindow& w, const path::TimeGrid& grid,
                                  const SampleConfig& cfg);

}  // namespace gslice::flow

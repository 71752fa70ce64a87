#pragma once

// Named parameter collections, tape-based gradients and Adam with global-norm
// clipping and an EMA shadow.

#include "gslice/autodiff.hpp"
#include "gslice/common.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace gslice::optim {

class ParameterSet {
 public:
  /// Appends a parameter; names must be unique.
  void add(std::string name, Matrix value);

  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Matrix& operator[](std::size_t i) { return values_[i]; }
  const Matrix& operator[](std::size_t i) const { return values_[i]; }
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  std::size_t n_scalars() const;
  Vector flatten() const;
  void unflatten(const Vector& flat);
  double norm() const;
  bool same_layout(const ParameterSet& other) const;
  ParameterSet zeros_like() const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

/// Registers every parameter as a tape variable, in order.
std::vector<ad::Var> bind(ad::Tape& tape, const ParameterSet& params);

using LossFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GradResult {
  double loss = 0.0;
  ParameterSet grads;
};

GradResult gradient(const LossFn& loss_fn, const ParameterSet& params);

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t n_checked = 0;
};

/// Central finite differences against the tape gradient. Per-entry error is
/// |g - fd| / max(|g|, |fd|, floor). `max_entries` > 0 checks a seeded random
/// subset of scalars.
GradcheckResult gradcheck(const LossFn& loss_fn, const ParameterSet& params, double step = 1e-5,
                          std::size_t max_entries = 0, std::uint64_t seed = 0, double floor = 1e-4);

/// Scales `grads` so its global 2-norm is at most max_norm; returns the norm
/// before clipping.
double clip_global_norm(ParameterSet& grads, double max_norm);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::optional<double> clip_norm;
  std::optional<double> ema_decay;
};

struct OptimState {
  AdamConfig config;
  ParameterSet m;
  ParameterSet v;
  std::size_t step_count = 0;
  std::optional<ParameterSet> ema_shadow;

  static OptimState init(const ParameterSet& params, AdamConfig config);
};

void step(ParameterSet& params, ParameterSet grads, OptimState& state);

}  // namespace gslice::optim

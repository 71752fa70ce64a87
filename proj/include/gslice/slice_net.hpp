#pragma once

// Linear NCDE / SLiCE layers, residual stacks with pointwise readouts, and
// the scalar-input exact-flow state-space models used by the hard-core
// benchmark.

#include "gslice/autodiff.hpp"
#include "gslice/common.hpp"
#include "gslice/optim.hpp"
#include "gslice/path.hpp"
#include "gslice/scan.hpp"
#include "gslice/structmat.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace gslice::net {

using structmat::ExpMode;
using structmat::FamilyKind;
using structmat::StructureFamily;

enum class Nonlinearity { Identity, Tanh, ReLU };
std::string to_string(Nonlinearity n);
Nonlinearity nonlinearity_from_string(const std::string& name);
std::string to_string(ExpMode m);
ExpMode exp_mode_from_string(const std::string& name);

struct Affine {
  Matrix weight;  // out x in
  Vector bias;    // out

  Affine() = default;
  Affine(Matrix w, Vector b);
  static Affine zeros(std::size_t out, std::size_t in);
  /// Weights and bias uniform in [-1/sqrt(in), 1/sqrt(in)].
  static Affine uniform(std::size_t out, std::size_t in, std::uint64_t seed);

  std::size_t in_dim() const { return static_cast<std::size_t>(weight.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight.rows()); }
  /// Applies the map to every row of x (points x in).
  Matrix apply_rows(const Matrix& x) const;
};

struct SliceLayer {
  structmat::StructuredTransition transition;
  Affine control_map;  // n_controls x in
  Affine init_map;     // hidden x in
  ExpMode exp_mode = ExpMode::Exact;

  std::size_t in_dim() const { return control_map.in_dim(); }
  std::size_t hidden_dim() const { return transition.family.dim(); }
  void validate() const;
};

/// Affine layers with the nonlinearity applied between consecutive layers.
struct Readout {
  std::vector<Affine> layers;
  Nonlinearity nonlinearity = Nonlinearity::Tanh;

  std::size_t in_dim() const;
  std::size_t out_dim() const;
  void validate() const;
  Matrix apply_rows(const Matrix& x) const;
};

struct SliceBlock {
  SliceLayer layer;
  Readout readout;
  bool residual = false;
};

struct SliceStack {
  std::vector<SliceBlock> blocks;
  Readout final_readout;

  std::size_t in_dim() const;
  std::size_t out_dim() const;
  void validate() const;
};

struct StackSpec {
  std::size_t in_dim = 1;
  std::size_t out_dim = 1;
  std::size_t hidden_dim = 4;
  /// 0 selects in_dim control channels.
  std::size_t n_controls = 0;
  FamilyKind family = FamilyKind::Dense;
  std::size_t block_size = 0;
  std::size_t n_blocks = 1;
  /// Channel width between blocks.
  std::size_t width = 8;
  ExpMode exp_mode = ExpMode::Exact;
  Nonlinearity nonlinearity = Nonlinearity::Tanh;
  /// Zero final readout, so the initial network outputs zero everywhere.
  bool zero_final_readout = true;
};

/// Transitions start at zero (identity flow); other weights uniform.
SliceStack make_stack(const StackSpec& spec, std::uint64_t seed);

/// Hidden trajectory h_{t_0..t_n} of one layer, channels "h0", "h1", ...
path::Path forward_layer(const SliceLayer& layer, const path::Path& input, const scan::ScanOptions& opts = {});
path::Path forward_stack(const SliceStack& stack, const path::Path& input, const scan::ScanOptions& opts = {});

/// Parameters in a fixed order; biases are stored as 1 x n rows.
optim::ParameterSet collect_params(const SliceStack& stack);
void load_params(SliceStack& stack, const optim::ParameterSet& params);

/// Taped forward of `x` (points x in_dim) with `params` bound in
/// collect_params order; `stack` supplies the architecture only.
ad::Var forward_stack_taped(ad::Tape& tape, const SliceStack& stack, const std::vector<ad::Var>& params, ad::Var x);

/// JSON manifest describing the architecture plus a raw little-endian double
/// blob holding the parameters in manifest order.
void write_checkpoint(std::ostream& manifest, std::ostream& blob, const SliceStack& stack);
SliceStack read_checkpoint(std::istream& manifest, std::istream& blob);

// Exact-flow SSMs over binary inputs:
//   h_k = exp(A(z_k)) h_{k-1} + beta(z_k),  C_k = w.h_k + b,
// with the affine maps written in endpoint form, A(z) = (1-z) A0 + z A1
// (packed) and beta(z) = (1-z) beta0 + z beta1. Non-selective models tie
// A1 = A0.

enum class SsmClass { DenseSelective, DiagonalSelective, DenseNonSelective };
std::string to_string(SsmClass c);
SsmClass ssm_class_from_string(const std::string& name);

struct ExactFlowSSM {
  SsmClass cls = SsmClass::DenseSelective;
  std::size_t width = 2;
  Vector a0, a1;
  Vector beta0, beta1;
  Vector h0;
  Vector w;
  double b = 0.0;

  StructureFamily family() const;
  Matrix generator(double z) const;
  Vector beta(double z) const;
  void validate() const;
};

/// Random parameterisation; entries of A are N(0, a_scale^2), the rest
/// N(0, other_scale^2). DenseNonSelective gets a1 = a0.
ExactFlowSSM random_ssm(SsmClass cls, std::size_t width, std::uint64_t seed, double a_scale = 0.5,
                        double other_scale = 0.5);

/// Adds the S4D-Lin base -1/2 + i pi k (as real 2x2 rotation blocks for
/// dense classes, -1/2 on the diagonal otherwise) to both endpoints of A.
void add_s4d_lin_base(ExactFlowSSM& model);

/// Raw readouts C_1..C_n.
std::vector<double> forward_ssm(const ExactFlowSSM& model, std::span<const int> z);

/// Width-2 dense selective construction with A(0) = log(eta) I, A(1) = pi J,
/// beta(z) = z e1, h0 = 0, w = e1, b = 0. Requires 0 < eta < 1/2.
ExactFlowSSM analytic_construction(double eta);

/// Trainable parameters (a1 omitted for DenseNonSelective).
optim::ParameterSet ssm_params(const ExactFlowSSM& model);
void load_ssm_params(ExactFlowSSM& model, const optim::ParameterSet& params);

/// Raw outputs for a batch of equal-length binary sequences as a
/// 1 x (B*n) row, entry b*n + k-1 holding C_k of sequence b.
ad::Var ssm_outputs_taped(ad::Tape& tape, const ExactFlowSSM& model, const std::vector<ad::Var>& params,
                          const std::vector<std::vector<int>>& z);

// Width-2 first-order SLiCE realisation of the hard-core map, driven by the
// cumulative counts of zeros and ones.

struct HardcoreLayer {
  SliceLayer layer;
  Vector w;
  double b = 0.0;
};

HardcoreLayer hardcore_layer();
/// Path on grid 0..n with channels (#zeros so far, #ones so far).
path::Path hardcore_control_path(std::span<const int> z);
/// Readouts C_1..C_n of the realisation.
std::vector<double> hardcore_layer_outputs(const HardcoreLayer& hc, std::span<const int> z);

}  // namespace gslice::net

#pragma once

// Prefix composition of transition operators and affine steps.
//
// The scan splits the sequence into fixed-size chunks: each chunk is scanned
// locally (in parallel), chunk totals are combined left to right, and each
// chunk then folds in its carry (in parallel). The set of floating-point
// operations depends only on the sequence length and chunk size, so results
// are bitwise identical for any worker count.

#include "gslice/common.hpp"
#include "gslice/structmat.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace gslice::scan {

using structmat::TransitionOperator;

struct ScanOptions {
  std::size_t workers = 1;
  /// 0 selects the default, ceil(length / kDefaultChunks).
  std::size_t chunk_size = 0;
};

inline constexpr std::size_t kDefaultChunks = 16;

std::size_t resolve_chunk_size(std::size_t length, const ScanOptions& opts);

struct AffineStep {
  TransitionOperator linear;
  Vector offset;
};

/// out[k] = ops[k] * ops[k-1] * ... * ops[0].
std::vector<TransitionOperator> prefix_products(std::span<const TransitionOperator> ops, const ScanOptions& opts = {});

/// h_k = linear_k h_{k-1} + offset_k for k = 1..n, returned as h_1..h_n.
std::vector<Vector> prefix_affine(std::span<const AffineStep> steps, const Vector& h0, const ScanOptions& opts = {});

/// Associative combination for the affine monoid: `later` applied after
/// `earlier`, (M, b) o (M', b') = (M M', M b' + b).
AffineStep combine_affine(const AffineStep& later, const AffineStep& earlier);

}  // namespace gslice::scan

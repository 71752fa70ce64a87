#pragma once

// Structured transition-matrix families and interval transition operators.
//
// Packed layout (shared by checkpoints and the autodiff kernels):
//   Diagonal       d reals, the diagonal.
//   BlockDiagonal  (d/b) blocks of b*b reals, row-major inside each block,
//                  blocks in index order.
//   Dense          d*d reals, row-major.
// Diagonal-plus-low-rank and Walsh-Hadamard families would slot into
// FamilyKind; only the three block-structured kinds are implemented.

#include "gslice/common.hpp"

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace gslice::structmat {

enum class FamilyKind { Diagonal, BlockDiagonal, Dense };

std::string to_string(FamilyKind kind);
FamilyKind family_kind_from_string(const std::string& name);

class StructureFamily {
 public:
  static StructureFamily diagonal(std::size_t dim);
  static StructureFamily block_diagonal(std::size_t dim, std::size_t block_size);
  static StructureFamily dense(std::size_t dim);
  /// Validates block_size against the kind; a BlockDiagonal request whose
  /// block size is 1 or dim is normalised to Diagonal or Dense.
  static StructureFamily make(FamilyKind kind, std::size_t dim, std::size_t block_size);

  FamilyKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  std::size_t block_size() const { return block_; }
  std::size_t n_blocks() const { return dim_ / block_; }
  std::size_t packed_size() const { return n_blocks() * block_ * block_; }

  friend bool operator==(const StructureFamily&, const StructureFamily&) = default;

 private:
  StructureFamily(FamilyKind kind, std::size_t dim, std::size_t block) : kind_(kind), dim_(dim), block_(block) {}
  FamilyKind kind_;
  std::size_t dim_;
  std::size_t block_;
};

/// Dense d x d matrix from a packed coefficient vector.
Matrix unpack(const StructureFamily& family, std::span<const double> packed);
Matrix unpack(const StructureFamily& family, const Vector& packed);
/// Packed coefficients of a matrix; entries outside the structure are dropped.
Vector pack(const StructureFamily& family, const Matrix& m);
/// True iff every entry outside the block pattern is exactly zero.
bool respects_structure(const StructureFamily& family, const Matrix& m);
/// Packed form of the identity.
Vector packed_identity(const StructureFamily& family);

struct StructuredTransition {
  StructureFamily family;
  /// One packed vector per control channel.
  std::vector<Vector> coeffs;

  StructuredTransition(StructureFamily fam, std::vector<Vector> c);
  /// All coefficients zero.
  static StructuredTransition zeros(StructureFamily fam, std::size_t n_controls);
  std::size_t n_controls() const { return coeffs.size(); }
  /// n_controls x packed_size, one row per control channel.
  Matrix coeff_matrix() const;
};

/// A d x d matrix tagged with its structure; used for both generators and
/// transition operators.
struct TransitionOperator {
  StructureFamily family;
  Matrix matrix;

  static TransitionOperator identity(const StructureFamily& family);
};

using Generator = TransitionOperator;

enum class ExpMode { Exact, FirstOrder };

Generator assemble_generator(const StructuredTransition& trans, std::span<const double> increments);

TransitionOperator exp_exact(const Generator& generator);
TransitionOperator exp_first_order(const Generator& generator);
TransitionOperator exp_with(ExpMode mode, const Generator& generator);

/// lhs * rhs; block pattern preserved for Diagonal and BlockDiagonal.
TransitionOperator compose(const TransitionOperator& lhs, const TransitionOperator& rhs);

/// Scaling-and-squaring with a degree-13 Taylor series; the scaled matrix has
/// 1-norm at most 0.5.
Matrix expm_dense(const Matrix& g);

/// Reverse-mode derivative of expm_dense: given dL/dexp(G), returns dL/dG by
/// back-propagating through the same truncated series and squarings.
Matrix expm_dense_vjp(const Matrix& g, const Matrix& grad_out);

/// Packed exponential / first-order map and their vector-Jacobian products;
/// `packed` holds one generator.
void exp_packed(const StructureFamily& family, ExpMode mode, std::span<const double> packed, std::span<double> out);
void exp_packed_vjp(const StructureFamily& family, ExpMode mode, std::span<const double> packed,
                    std::span<const double> out_value, std::span<const double> grad_out, std::span<double> grad_in);

/// Transition checkpoint: a JSON header (family, dim, block_size, n_controls)
/// and a CSV body with one packed coefficient vector per row.
void write_checkpoint(std::ostream& header_json, std::ostream& body_csv, const StructuredTransition& trans);
StructuredTransition read_checkpoint(std::istream& header_json, std::istream& body_csv);

}  // namespace gslice::structmat

#include "gslice/structmat.hpp"

#include <json.hpp>

#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

namespace gslice::structmat {

namespace {

constexpr int kTaylorDegree = 13;
constexpr double kScaledNorm = 0.5;

// Small blocks stay on the stack.
using SmallMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, 16, 16>;

template <class M>
int squarings_for(const M& g) {
  const double norm = g.cwiseAbs().colwise().sum().maxCoeff();
  if (!(norm > kScaledNorm)) return 0;
  return std::max(0, static_cast<int>(std::ceil(std::log2(norm / kScaledNorm))));
}

template <class M>
M expm_impl(const M& g) {
  const Eigen::Index n = g.rows();
  const int s = squarings_for(g);
  const M x = g / std::ldexp(1.0, s);
  M p = M::Identity(n, n);
  M tmp(n, n);
  for (int k = kTaylorDegree; k >= 1; --k) {
    tmp.noalias() = x * p;
    p = tmp / static_cast<double>(k);
    p.diagonal().array() += 1.0;
  }
  for (int i = 0; i < s; ++i) {
    tmp.noalias() = p * p;
    p = tmp;
  }
  return p;
}

template <class M>
M expm_vjp_impl(const M& g, const M& grad_out) {
  const Eigen::Index n = g.rows();
  const int s = squarings_for(g);
  const M x = g / std::ldexp(1.0, s);
  // horner[j] holds P_{k} for k = 14 - j (horner[0] = I = P_14).
  std::vector<M> horner;
  horner.reserve(kTaylorDegree + 1);
  horner.push_back(M::Identity(n, n));
  for (int k = kTaylorDegree; k >= 1; --k) {
    M p = x * horner.back() / static_cast<double>(k);
    p.diagonal().array() += 1.0;
    horner.push_back(std::move(p));
  }
  std::vector<M> squares;
  squares.reserve(static_cast<std::size_t>(s) + 1);
  squares.push_back(horner.back());
  for (int i = 0; i < s; ++i) squares.push_back(squares.back() * squares.back());

  M bar = grad_out;
  for (int i = s - 1; i >= 0; --i) {
    const M& e = squares[static_cast<std::size_t>(i)];
    M next = bar * e.transpose() + e.transpose() * bar;
    bar = std::move(next);
  }
  // bar is now dL/dP_1; walk the Horner recursion forward in k.
  M x_bar = M::Zero(n, n);
  for (int k = 1; k <= kTaylorDegree; ++k) {
    const M& p_next = horner[static_cast<std::size_t>(kTaylorDegree - k)];  // P_{k+1}
    x_bar.noalias() += bar * p_next.transpose() / static_cast<double>(k);
    M prev = x.transpose() * bar / static_cast<double>(k);
    bar = std::move(prev);
  }
  return x_bar / std::ldexp(1.0, s);
}

void require_same_dim(const StructureFamily& f, const Matrix& m, const char* what) {
  if (static_cast<std::size_t>(m.rows()) != f.dim() || static_cast<std::size_t>(m.cols()) != f.dim())
    throw Error(std::string(what) + ": matrix is not " + std::to_string(f.dim()) + "x" + std::to_string(f.dim()));
}

template <class Fn>
void for_each_block(const StructureFamily& f, Fn&& fn) {
  const std::size_t b = f.block_size();
  for (std::size_t k = 0; k < f.n_blocks(); ++k) fn(k, k * b, k * b * b);
}

}  // namespace

std::string to_string(FamilyKind kind) {
  switch (kind) {
    case FamilyKind::Diagonal: return "diagonal";
    case FamilyKind::BlockDiagonal: return "block_diagonal";
    case FamilyKind::Dense: return "dense";
  }
  return "unknown";
}

FamilyKind family_kind_from_string(const std::string& name) {
  if (name == "diagonal") return FamilyKind::Diagonal;
  if (name == "block_diagonal") return FamilyKind::BlockDiagonal;
  if (name == "dense") return FamilyKind::Dense;
  throw Error("unknown structure family '" + name + "'");
}

StructureFamily StructureFamily::diagonal(std::size_t dim) { return make(FamilyKind::Diagonal, dim, 1); }
StructureFamily StructureFamily::dense(std::size_t dim) { return make(FamilyKind::Dense, dim, dim); }
StructureFamily StructureFamily::block_diagonal(std::size_t dim, std::size_t block_size) {
  return make(FamilyKind::BlockDiagonal, dim, block_size);
}

StructureFamily StructureFamily::make(FamilyKind kind, std::size_t dim, std::size_t block_size) {
  if (dim == 0) throw Error("StructureFamily: dim must be positive");
  switch (kind) {
    case FamilyKind::Diagonal:
      if (block_size != 1) throw Error("StructureFamily: diagonal family requires block_size 1");
      return {kind, dim, 1};
    case FamilyKind::Dense:
      if (block_size != dim) throw Error("StructureFamily: dense family requires block_size == dim");
      return {kind, dim, dim};
    case FamilyKind::BlockDiagonal:
      if (block_size == 0 || dim % block_size != 0)
        throw Error("StructureFamily: block_size " + std::to_string(block_size) + " does not divide dim " +
                    std::to_string(dim));
      if (block_size == 1) return {FamilyKind::Diagonal, dim, 1};
      if (block_size == dim) return {FamilyKind::Dense, dim, dim};
      return {kind, dim, block_size};
  }
  throw Error("StructureFamily: unknown kind");
}

Matrix unpack(const StructureFamily& f, std::span<const double> packed) {
  if (packed.size() != f.packed_size())
    throw Error("unpack: expected " + std::to_string(f.packed_size()) + " coefficients, got " +
                std::to_string(packed.size()));
  const auto d = static_cast<Eigen::Index>(f.dim());
  Matrix m = Matrix::Zero(d, d);
  const std::size_t b = f.block_size();
  for_each_block(f, [&](std::size_t, std::size_t off, std::size_t poff) {
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t c = 0; c < b; ++c)
        m(static_cast<Eigen::Index>(off + r), static_cast<Eigen::Index>(off + c)) = packed[poff + r * b + c];
  });
  return m;
}

Matrix unpack(const StructureFamily& f, const Vector& packed) {
  return unpack(f, std::span<const double>(packed.data(), static_cast<std::size_t>(packed.size())));
}

Vector pack(const StructureFamily& f, const Matrix& m) {
  require_same_dim(f, m, "pack");
  Vector out(static_cast<Eigen::Index>(f.packed_size()));
  const std::size_t b = f.block_size();
  for_each_block(f, [&](std::size_t, std::size_t off, std::size_t poff) {
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t c = 0; c < b; ++c)
        out[static_cast<Eigen::Index>(poff + r * b + c)] =
            m(static_cast<Eigen::Index>(off + r), static_cast<Eigen::Index>(off + c));
  });
  return out;
}

bool respects_structure(const StructureFamily& f, const Matrix& m) {
  require_same_dim(f, m, "respects_structure");
  const std::size_t b = f.block_size();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      if (static_cast<std::size_t>(r) / b != static_cast<std::size_t>(c) / b && m(r, c) != 0.0) return false;
  return true;
}

Vector packed_identity(const StructureFamily& f) {
  return pack(f, Matrix::Identity(static_cast<Eigen::Index>(f.dim()), static_cast<Eigen::Index>(f.dim())));
}

StructuredTransition::StructuredTransition(StructureFamily fam, std::vector<Vector> c)
    : family(fam), coeffs(std::move(c)) {
  if (coeffs.empty()) throw Error("StructuredTransition: need at least one control channel");
  for (const auto& v : coeffs) {
    if (static_cast<std::size_t>(v.size()) != family.packed_size())
      throw Error("StructuredTransition: coefficient vector length " + std::to_string(v.size()) +
                  " does not match family layout " + std::to_string(family.packed_size()));
    if (!v.allFinite()) throw Error("StructuredTransition: non-finite coefficient");
  }
}

StructuredTransition StructuredTransition::zeros(StructureFamily fam, std::size_t n_controls) {
  return StructuredTransition(fam, std::vector<Vector>(n_controls, Vector::Zero(static_cast<Eigen::Index>(fam.packed_size()))));
}

Matrix StructuredTransition::coeff_matrix() const {
  Matrix m(static_cast<Eigen::Index>(coeffs.size()), static_cast<Eigen::Index>(family.packed_size()));
  for (std::size_t i = 0; i < coeffs.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = coeffs[i].transpose();
  return m;
}

TransitionOperator TransitionOperator::identity(const StructureFamily& family) {
  const auto d = static_cast<Eigen::Index>(family.dim());
  return {family, Matrix::Identity(d, d)};
}

Generator assemble_generator(const StructuredTransition& trans, std::span<const double> increments) {
  if (increments.size() != trans.n_controls())
    throw Error("assemble_generator: expected " + std::to_string(trans.n_controls()) + " increments, got " +
                std::to_string(increments.size()));
  Vector packed = Vector::Zero(static_cast<Eigen::Index>(trans.family.packed_size()));
  for (std::size_t i = 0; i < increments.size(); ++i) packed += increments[i] * trans.coeffs[i];
  return {trans.family, unpack(trans.family, packed)};
}

Matrix expm_dense(const Matrix& g) {
  if (g.rows() != g.cols()) throw Error("expm_dense: matrix not square");
  if (g.rows() <= 16) {
    SmallMatrix s = g;
    return expm_impl(s);
  }
  return expm_impl(g);
}

Matrix expm_dense_vjp(const Matrix& g, const Matrix& grad_out) {
  if (g.rows() <= 16) {
    SmallMatrix s = g;
    SmallMatrix go = grad_out;
    return expm_vjp_impl(s, go);
  }
  return expm_vjp_impl(g, grad_out);
}

TransitionOperator exp_exact(const Generator& gen) {
  const auto& f = gen.family;
  require_same_dim(f, gen.matrix, "exp_exact");
  if (!gen.matrix.allFinite()) throw Error("exp_exact: non-finite generator");
  Vector packed = pack(f, gen.matrix);
  Vector out(packed.size());
  exp_packed(f, ExpMode::Exact, {packed.data(), static_cast<std::size_t>(packed.size())},
             {out.data(), static_cast<std::size_t>(out.size())});
  return {f, unpack(f, out)};
}

TransitionOperator exp_first_order(const Generator& gen) {
  require_same_dim(gen.family, gen.matrix, "exp_first_order");
  // Off-pattern entries of a structured generator are zero by construction.
  Matrix m = unpack(gen.family, pack(gen.family, gen.matrix));
  m.diagonal().array() += 1.0;
  return {gen.family, std::move(m)};
}

TransitionOperator exp_with(ExpMode mode, const Generator& gen) {
  return mode == ExpMode::Exact ? exp_exact(gen) : exp_first_order(gen);
}

TransitionOperator compose(const TransitionOperator& lhs, const TransitionOperator& rhs) {
  if (!(lhs.family == rhs.family))
    throw Error("compose: family mismatch (" + to_string(lhs.family.kind()) + "/" +
                std::to_string(lhs.family.dim()) + " vs " + to_string(rhs.family.kind()) + "/" +
                std::to_string(rhs.family.dim()) + ")");
  const auto& f = lhs.family;
  require_same_dim(f, lhs.matrix, "compose");
  require_same_dim(f, rhs.matrix, "compose");
  const auto d = static_cast<Eigen::Index>(f.dim());
  switch (f.kind()) {
    case FamilyKind::Dense:
      return {f, lhs.matrix * rhs.matrix};
    case FamilyKind::Diagonal: {
      Matrix m = Matrix::Zero(d, d);
      m.diagonal() = lhs.matrix.diagonal().cwiseProduct(rhs.matrix.diagonal());
      return {f, std::move(m)};
    }
    case FamilyKind::BlockDiagonal: {
      Matrix m = Matrix::Zero(d, d);
      const auto b = static_cast<Eigen::Index>(f.block_size());
      for (Eigen::Index k = 0; k < d; k += b)
        m.block(k, k, b, b).noalias() = lhs.matrix.block(k, k, b, b) * rhs.matrix.block(k, k, b, b);
      return {f, std::move(m)};
    }
  }
  throw Error("compose: unknown family");
}

void exp_packed(const StructureFamily& f, ExpMode mode, std::span<const double> packed, std::span<double> out) {
  const std::size_t b = f.block_size();
  if (mode == ExpMode::FirstOrder) {
    for (std::size_t i = 0; i < packed.size(); ++i) out[i] = packed[i];
    for_each_block(f, [&](std::size_t, std::size_t, std::size_t poff) {
      for (std::size_t r = 0; r < b; ++r) out[poff + r * b + r] += 1.0;
    });
    return;
  }
  if (f.kind() == FamilyKind::Diagonal) {
    for (std::size_t i = 0; i < packed.size(); ++i) out[i] = std::exp(packed[i]);
    return;
  }
  const auto bi = static_cast<Eigen::Index>(b);
  for_each_block(f, [&](std::size_t, std::size_t, std::size_t poff) {
    using RowMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using RowMapOut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    RowMap g(packed.data() + poff, bi, bi);
    RowMapOut o(out.data() + poff, bi, bi);
    if (b <= 16) {
      SmallMatrix s = g;
      o = expm_impl(s);
    } else {
      Matrix s = g;
      o = expm_impl(s);
    }
  });
}

void exp_packed_vjp(const StructureFamily& f, ExpMode mode, std::span<const double> packed,
                    std::span<const double> out_value, std::span<const double> grad_out, std::span<double> grad_in) {
  if (mode == ExpMode::FirstOrder) {
    for (std::size_t i = 0; i < packed.size(); ++i) grad_in[i] += grad_out[i];
    return;
  }
  if (f.kind() == FamilyKind::Diagonal) {
    for (std::size_t i = 0; i < packed.size(); ++i) grad_in[i] += grad_out[i] * out_value[i];
    return;
  }
  const std::size_t b = f.block_size();
  const auto bi = static_cast<Eigen::Index>(b);
  for_each_block(f, [&](std::size_t, std::size_t, std::size_t poff) {
    using RowMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using RowMapOut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    RowMap g(packed.data() + poff, bi, bi);
    RowMap go(grad_out.data() + poff, bi, bi);
    RowMapOut gi(grad_in.data() + poff, bi, bi);
    if (b <= 16) {
      SmallMatrix s = g;
      SmallMatrix sg = go;
      gi += expm_vjp_impl(s, sg);
    } else {
      Matrix s = g;
      Matrix sg = go;
      gi += expm_vjp_impl(s, sg);
    }
  });
}

void write_checkpoint(std::ostream& header_json, std::ostream& body_csv, const StructuredTransition& trans) {
  nlohmann::json h;
  h["family"] = to_string(trans.family.kind());
  h["dim"] = trans.family.dim();
  h["block_size"] = trans.family.block_size();
  h["n_controls"] = trans.n_controls();
  header_json << h.dump(2) << '\n';
  body_csv << std::setprecision(17);
  for (const auto& c : trans.coeffs) {
    for (Eigen::Index i = 0; i < c.size(); ++i) body_csv << (i ? "," : "") << c[i];
    body_csv << '\n';
  }
}

StructuredTransition read_checkpoint(std::istream& header_json, std::istream& body_csv) {
  nlohmann::json h;
  try {
    header_json >> h;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("read_checkpoint: bad header: ") + e.what());
  }
  const auto fam = StructureFamily::make(family_kind_from_string(h.at("family").get<std::string>()),
                                         h.at("dim").get<std::size_t>(), h.at("block_size").get<std::size_t>());
  const auto n_controls = h.at("n_controls").get<std::size_t>();
  std::vector<Vector> coeffs;
  std::string line;
  while (coeffs.size() < n_controls && std::getline(body_csv, line)) {
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    coeffs.push_back(Eigen::Map<Vector>(vals.data(), static_cast<Eigen::Index>(vals.size())));
  }
  if (coeffs.size() != n_controls) throw Error("read_checkpoint: body has fewer rows than n_controls");
  return StructuredTransition(fam, std::move(coeffs));
}

}  // namespace gslice::structmat

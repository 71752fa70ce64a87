#include "gslice/autodiff.hpp"

#include <cmath>

namespace gslice::ad {

namespace {

using structmat::ExpMode;
using structmat::FamilyKind;
using structmat::StructureFamily;

Tape& tape_of(std::initializer_list<Var> xs) {
  for (const auto& x : xs)
    if (x.valid()) return *x.tape();
  throw Error("autodiff: operation on unbound Var");
}

void require_same_tape(std::initializer_list<Var> xs) {
  Tape* t = nullptr;
  for (const auto& x : xs) {
    if (!x.valid()) throw Error("autodiff: operation on unbound Var");
    if (t && x.tape() != t) throw Error("autodiff: Vars from different tapes");
    t = x.tape();
  }
}

void require_shape(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw Error(std::string("autodiff ") + op + ": shape mismatch (" + detail + ")");
}

std::string dims(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

}  // namespace

const Matrix& Var::value() const {
  if (!tape_) throw Error("autodiff: value of unbound Var");
  return tape_->value(id_);
}

double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw Error("autodiff: scalar() on " + dims(v) + " node");
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), true, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, Backward fn, const char* op) {
  if (!value.allFinite()) throw Error(std::string("autodiff: non-finite value produced by ") + op);
  bool req = false;
  for (const auto& p : parents) {
    if (p.tape() != this) throw Error(std::string("autodiff ") + op + ": parent from another tape");
    req = req || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Matrix(), req, req ? std::move(fn) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward fn, const char* op) {
  return record(std::move(value), std::vector<Var>(parents), std::move(fn), op);
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  auto& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  n.grad += g;
}

Matrix* Tape::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return &n.grad;
}

void Tape::backward(Var out) {
  if (out.tape() != this) throw Error("autodiff: backward on foreign Var");
  if (nodes_[out.id()].value.size() != 1) throw Error("autodiff: backward target must be 1x1");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[out.id()].requires_grad) return;
  nodes_[out.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t i = out.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
    if (!n.grad.allFinite()) throw Error("autodiff: non-finite gradient at node " + std::to_string(i));
  }
}

Matrix Tape::grad(Var v) const {
  const auto& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var matmul(Var a, Var b) {
  require_same_tape({a, b});
  require_shape(a.cols() == b.rows(), "matmul", dims(a.value()) + " * " + dims(b.value()));
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() * b.value(), {a, b},
                          [ia, ib](Tape& t, std::size_t self) {
                            const Matrix& g = t.grad_of(self);
                            if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                            if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                          },
                          "matmul");
}

Var transpose(Var a) {
  const auto ia = a.id();
  return tape_of({a}).record(a.value().transpose(), {a},
                             [ia](Tape& t, std::size_t self) { t.accumulate(ia, t.grad_of(self).transpose()); },
                             "transpose");
}

Var add(Var a, Var b) {
  require_same_tape({a, b});
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add", dims(a.value()) + " + " + dims(b.value()));
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() + b.value(), {a, b},
                          [ia, ib](Tape& t, std::size_t self) {
                            t.accumulate(ia, t.grad_of(self));
                            t.accumulate(ib, t.grad_of(self));
                          },
                          "add");
}

Var sub(Var a, Var b) {
  require_same_tape({a, b});
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub", dims(a.value()) + " - " + dims(b.value()));
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() - b.value(), {a, b},
                          [ia, ib](Tape& t, std::size_t self) {
                            t.accumulate(ia, t.grad_of(self));
                            t.accumulate(ib, -t.grad_of(self));
                          },
                          "sub");
}

Var hadamard(Var a, Var b) {
  require_same_tape({a, b});
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard", dims(a.value()) + " .* " + dims(b.value()));
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                          [ia, ib](Tape& t, std::size_t self) {
                            const Matrix& g = t.grad_of(self);
                            if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                            if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                          },
                          "hadamard");
}

Var scale(Var a, double c) {
  const auto ia = a.id();
  return tape_of({a}).record(a.value() * c, {a},
                             [ia, c](Tape& t, std::size_t self) { t.accumulate(ia, t.grad_of(self) * c); }, "scale");
}

Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error("autodiff add_n: empty input");
  Matrix v = xs.front().value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    require_shape(xs[i].rows() == v.rows() && xs[i].cols() == v.cols(), "add_n", dims(xs[i].value()));
    v += xs[i].value();
  }
  std::vector<std::size_t> ids;
  for (const auto& x : xs) ids.push_back(x.id());
  return xs.front().tape()->record(std::move(v), xs,
                                   [ids](Tape& t, std::size_t self) {
                                     for (auto i : ids) t.accumulate(i, t.grad_of(self));
                                   },
                                   "add_n");
}

Var add_row(Var a, Var r) {
  require_same_tape({a, r});
  require_shape(r.rows() == 1 && r.cols() == a.cols(), "add_row", dims(a.value()) + " + row " + dims(r.value()));
  const auto ia = a.id(), ir = r.id();
  Matrix v = a.value().rowwise() + r.value().row(0);
  return a.tape()->record(std::move(v), {a, r},
                          [ia, ir](Tape& t, std::size_t self) {
                            t.accumulate(ia, t.grad_of(self));
                            if (t.needs_grad(ir)) t.accumulate(ir, t.grad_of(self).colwise().sum());
                          },
                          "add_row");
}

Var add_col(Var a, Var c) {
  require_same_tape({a, c});
  require_shape(c.cols() == 1 && c.rows() == a.rows(), "add_col", dims(a.value()) + " + col " + dims(c.value()));
  const auto ia = a.id(), ic = c.id();
  Matrix v = a.value().colwise() + c.value().col(0);
  return a.tape()->record(std::move(v), {a, c},
                          [ia, ic](Tape& t, std::size_t self) {
                            t.accumulate(ia, t.grad_of(self));
                            if (t.needs_grad(ic)) t.accumulate(ic, t.grad_of(self).rowwise().sum());
                          },
                          "add_col");
}

Var solve_spd(Var a, Var b) {
  require_same_tape({a, b});
  require_shape(a.rows() == a.cols() && a.rows() == b.rows(), "solve_spd", dims(a.value()) + " \\ " + dims(b.value()));
  Eigen::LLT<Matrix> llt(a.value());
  if (llt.info() != Eigen::Success) throw Error("autodiff solve_spd: matrix is not positive definite");
  Matrix x = llt.solve(b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(x), {a, b},
                          [ia, ib, llt](Tape& t, std::size_t self) {
                            const Matrix b_bar = llt.solve(t.grad_of(self));
                            if (t.needs_grad(ib)) t.accumulate(ib, b_bar);
                            if (t.needs_grad(ia)) t.accumulate(ia, -b_bar * t.value(self).transpose());
                          },
                          "solve_spd");
}

Var row_diff(Var a) {
  require_shape(a.rows() >= 2, "row_diff", dims(a.value()));
  const auto ia = a.id();
  const Eigen::Index m = a.rows() - 1;
  Matrix v = a.value().bottomRows(m) - a.value().topRows(m);
  return tape_of({a}).record(std::move(v), {a},
                             [ia, m](Tape& t, std::size_t self) {
                               Matrix* g = t.grad_buffer(ia);
                               if (!g) return;
                               const Matrix& go = t.grad_of(self);
                               g->bottomRows(m) += go;
                               g->topRows(m) -= go;
                             },
                             "row_diff");
}

Var row(Var a, Eigen::Index i) {
  require_shape(i >= 0 && i < a.rows(), "row", dims(a.value()) + " row " + std::to_string(i));
  const auto ia = a.id();
  return tape_of({a}).record(a.value().row(i), {a},
                             [ia, i](Tape& t, std::size_t self) {
                               Matrix* g = t.grad_buffer(ia);
                               if (g) g->row(i) += t.grad_of(self);
                             },
                             "row");
}

Var cols(Var a, Eigen::Index start, Eigen::Index count) {
  require_shape(start >= 0 && count >= 0 && start + count <= a.cols(), "cols", dims(a.value()));
  const auto ia = a.id();
  return tape_of({a}).record(a.value().middleCols(start, count), {a},
                             [ia, start, count](Tape& t, std::size_t self) {
                               Matrix* g = t.grad_buffer(ia);
                               if (g) g->middleCols(start, count) += t.grad_of(self);
                             },
                             "cols");
}

Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error("autodiff concat_cols: empty input");
  Eigen::Index total = 0;
  for (const auto& x : xs) {
    require_shape(x.rows() == xs.front().rows(), "concat_cols", dims(x.value()));
    total += x.cols();
  }
  Matrix v(xs.front().rows(), total);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const auto& x : xs) {
    v.middleCols(off, x.cols()) = x.value();
    spans.emplace_back(x.id(), off);
    off += x.cols();
  }
  return xs.front().tape()->record(std::move(v), xs,
                                   [spans](Tape& t, std::size_t self) {
                                     for (const auto& [id, o] : spans) {
                                       Matrix* g = t.grad_buffer(id);
                                       if (g) *g += t.grad_of(self).middleCols(o, g->cols());
                                     }
                                   },
                                   "concat_cols");
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error("autodiff concat_rows: empty input");
  Eigen::Index total = 0;
  for (const auto& x : xs) {
    require_shape(x.cols() == xs.front().cols(), "concat_rows", dims(x.value()));
    total += x.rows();
  }
  Matrix v(total, xs.front().cols());
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const auto& x : xs) {
    v.middleRows(off, x.rows()) = x.value();
    spans.emplace_back(x.id(), off);
    off += x.rows();
  }
  return xs.front().tape()->record(std::move(v), xs,
                                   [spans](Tape& t, std::size_t self) {
                                     for (const auto& [id, o] : spans) {
                                       Matrix* g = t.grad_buffer(id);
                                       if (g) *g += t.grad_of(self).middleRows(o, g->rows());
                                     }
                                   },
                                   "concat_rows");
}

Var flatten(Var a) {
  const auto ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix v(r * c, 1);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) v(i * c + j, 0) = a.value()(i, j);
  return tape_of({a}).record(std::move(v), {a},
                             [ia, r, c](Tape& t, std::size_t self) {
                               Matrix* g = t.grad_buffer(ia);
                               if (!g) return;
                               const Matrix& go = t.grad_of(self);
                               for (Eigen::Index i = 0; i < r; ++i)
                                 for (Eigen::Index j = 0; j < c; ++j) (*g)(i, j) += go(i * c + j, 0);
                             },
                             "flatten");
}

Var tanh(Var a) {
  const auto ia = a.id();
  Matrix v = a.value().array().tanh().matrix();
  return tape_of({a}).record(std::move(v), {a},
                             [ia](Tape& t, std::size_t self) {
                               const Matrix& y = t.value(self);
                               t.accumulate(ia, t.grad_of(self).cwiseProduct((1.0 - y.array().square()).matrix()));
                             },
                             "tanh");
}

Var relu(Var a) {
  const auto ia = a.id();
  Matrix v = a.value().cwiseMax(0.0);
  return tape_of({a}).record(std::move(v), {a},
                             [ia](Tape& t, std::size_t self) {
                               const Matrix& x = t.value(ia);
                               t.accumulate(ia, (x.array() > 0.0).select(t.grad_of(self), 0.0).matrix());
                             },
                             "relu");
}

Var sum(Var a) {
  const auto ia = a.id();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  const Eigen::Index r = a.rows(), c = a.cols();
  return tape_of({a}).record(std::move(v), {a},
                             [ia, r, c](Tape& t, std::size_t self) {
                               t.accumulate(ia, Matrix::Constant(r, c, t.grad_of(self)(0, 0)));
                             },
                             "sum");
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mean_squared_error(Var a, const Matrix& target) {
  require_shape(a.rows() == target.rows() && a.cols() == target.cols(), "mean_squared_error",
                dims(a.value()) + " vs " + dims(target));
  const auto ia = a.id();
  const double n = static_cast<double>(target.size());
  Matrix v(1, 1);
  v(0, 0) = (a.value() - target).squaredNorm() / n;
  return tape_of({a}).record(std::move(v), {a},
                             [ia, target, n](Tape& t, std::size_t self) {
                               t.accumulate(ia, (t.value(ia) - target) * (2.0 * t.grad_of(self)(0, 0) / n));
                             },
                             "mean_squared_error");
}

Var squared_norm(Var a) {
  const auto ia = a.id();
  Matrix v(1, 1);
  v(0, 0) = a.value().squaredNorm();
  return tape_of({a}).record(std::move(v), {a},
                             [ia](Tape& t, std::size_t self) {
                               t.accumulate(ia, t.value(ia) * (2.0 * t.grad_of(self)(0, 0)));
                             },
                             "squared_norm");
}

Var structured_exp_rows(Var packed, const StructureFamily& family, ExpMode mode) {
  const auto p = static_cast<Eigen::Index>(family.packed_size());
  require_shape(packed.cols() == p, "structured_exp_rows", dims(packed.value()));
  // Row-major copy so each generator is contiguous.
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMajor in = packed.value();
  RowMajor out(in.rows(), in.cols());
  const auto ps = static_cast<std::size_t>(p);
  for (Eigen::Index r = 0; r < in.rows(); ++r)
    structmat::exp_packed(family, mode, {in.data() + r * p, ps}, {out.data() + r * p, ps});
  const auto ip = packed.id();
  return tape_of({packed}).record(Matrix(out), {packed},
                                  [ip, family, mode, p, ps](Tape& t, std::size_t self) {
                                    Matrix* g = t.grad_buffer(ip);
                                    if (!g) return;
                                    const RowMajor in = t.value(ip);
                                    const RowMajor out = t.value(self);
                                    const RowMajor go = t.grad_of(self);
                                    RowMajor gi = RowMajor::Zero(in.rows(), in.cols());
                                    for (Eigen::Index r = 0; r < in.rows(); ++r)
                                      structmat::exp_packed_vjp(family, mode, {in.data() + r * p, ps},
                                                                {out.data() + r * p, ps}, {go.data() + r * p, ps},
                                                                {gi.data() + r * p, ps});
                                    *g += gi;
                                  },
                                  "structured_exp_rows");
}

Var unpack(Var packed_row, const StructureFamily& family) {
  require_shape(packed_row.rows() == 1 && packed_row.cols() == static_cast<Eigen::Index>(family.packed_size()),
                "unpack", dims(packed_row.value()));
  const Matrix& v = packed_row.value();
  Matrix m = structmat::unpack(family, std::span<const double>(v.data(), family.packed_size()));
  const auto ip = packed_row.id();
  return tape_of({packed_row}).record(std::move(m), {packed_row},
                                      [ip, family](Tape& t, std::size_t self) {
                                        t.accumulate(ip, structmat::pack(family, t.grad_of(self)).transpose());
                                      },
                                      "unpack");
}

namespace {

// y = block-diag(packed) * x for one packed generator.
void packed_matvec(const StructureFamily& f, const double* packed, const double* x, double* y) {
  const std::size_t b = f.block_size();
  for (std::size_t k = 0; k < f.n_blocks(); ++k) {
    const double* blk = packed + k * b * b;
    const std::size_t off = k * b;
    for (std::size_t r = 0; r < b; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < b; ++c) acc += blk[r * b + c] * x[off + c];
      y[off + r] = acc;
    }
  }
}

// y = block-diag(packed)^T * x.
void packed_matvec_t(const StructureFamily& f, const double* packed, const double* x, double* y) {
  const std::size_t b = f.block_size();
  for (std::size_t k = 0; k < f.n_blocks(); ++k) {
    const double* blk = packed + k * b * b;
    const std::size_t off = k * b;
    for (std::size_t c = 0; c < b; ++c) {
      double acc = 0.0;
      for (std::size_t r = 0; r < b; ++r) acc += blk[r * b + c] * x[off + r];
      y[off + c] = acc;
    }
  }
}

}  // namespace

Var structured_linear_scan(Var transitions, Var h0, const StructureFamily& family) {
  require_same_tape({transitions, h0});
  const auto d = static_cast<Eigen::Index>(family.dim());
  const auto p = static_cast<Eigen::Index>(family.packed_size());
  require_shape(transitions.cols() == p, "structured_linear_scan", dims(transitions.value()));
  require_shape(h0.rows() == d && h0.cols() == 1, "structured_linear_scan", "h0 " + dims(h0.value()));
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMajor phi = transitions.value();
  const Eigen::Index m = phi.rows();
  RowMajor h(m + 1, d);
  h.row(0) = h0.value().col(0).transpose();
  for (Eigen::Index k = 0; k < m; ++k) packed_matvec(family, phi.data() + k * p, h.data() + k * d, h.data() + (k + 1) * d);
  const auto it = transitions.id(), ih = h0.id();
  return transitions.tape()->record(
      Matrix(h), {transitions, h0},
      [it, ih, family, d, p, m](Tape& t, std::size_t self) {
        const RowMajor phi = t.value(it);
        const RowMajor h = t.value(self);
        const RowMajor hbar = t.grad_of(self);
        RowMajor phibar = RowMajor::Zero(m, p);
        const std::size_t b = family.block_size();
        Vector acc = hbar.row(m).transpose();
        Vector next(d);
        for (Eigen::Index k = m - 1; k >= 0; --k) {
          const double* hk = h.data() + k * d;
          double* gb = phibar.data() + k * p;
          for (std::size_t blk = 0; blk < family.n_blocks(); ++blk) {
            const std::size_t off = blk * b;
            for (std::size_t r = 0; r < b; ++r)
              for (std::size_t c = 0; c < b; ++c) gb[blk * b * b + r * b + c] += acc[static_cast<Eigen::Index>(off + r)] * hk[off + c];
          }
          packed_matvec_t(family, phi.data() + k * p, acc.data(), next.data());
          acc = next + hbar.row(k).transpose();
        }
        if (t.needs_grad(it)) t.accumulate(it, Matrix(phibar));
        t.accumulate(ih, acc);
      },
      "structured_linear_scan");
}

Var switched_affine_scan(const std::vector<Var>& transitions, const std::vector<Var>& offsets, Var h0,
                         const std::vector<std::vector<int>>& symbols) {
  if (transitions.empty() || transitions.size() != offsets.size())
    throw Error("autodiff switched_affine_scan: need one offset per transition");
  if (symbols.empty()) throw Error("autodiff switched_affine_scan: empty batch");
  const Eigen::Index d = h0.rows();
  require_shape(h0.cols() == 1, "switched_affine_scan", "h0 " + dims(h0.value()));
  for (std::size_t k = 0; k < transitions.size(); ++k) {
    require_shape(transitions[k].rows() == d && transitions[k].cols() == d, "switched_affine_scan",
                  "transition " + dims(transitions[k].value()));
    require_shape(offsets[k].rows() == d && offsets[k].cols() == 1, "switched_affine_scan",
                  "offset " + dims(offsets[k].value()));
  }
  const std::size_t n = symbols.front().size();
  for (const auto& s : symbols) {
    if (s.size() != n) throw Error("autodiff switched_affine_scan: ragged symbol sequences");
    for (int v : s)
      if (v < 0 || static_cast<std::size_t>(v) >= transitions.size())
        throw Error("autodiff switched_affine_scan: symbol out of range");
  }
  const auto B = static_cast<Eigen::Index>(symbols.size());
  const auto N = static_cast<Eigen::Index>(n);
  Matrix h(d, B * N);
  for (Eigen::Index b = 0; b < B; ++b) {
    Vector cur = h0.value().col(0);
    for (Eigen::Index k = 0; k < N; ++k) {
      const auto s = static_cast<std::size_t>(symbols[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)]);
      Vector nxt = transitions[s].value() * cur + offsets[s].value().col(0);
      h.col(b * N + k) = nxt;
      cur = std::move(nxt);
    }
  }
  std::vector<Var> parents(transitions);
  parents.insert(parents.end(), offsets.begin(), offsets.end());
  parents.push_back(h0);
  std::vector<std::size_t> t_ids, o_ids;
  for (const auto& v : transitions) t_ids.push_back(v.id());
  for (const auto& v : offsets) o_ids.push_back(v.id());
  const auto ih = h0.id();
  return h0.tape()->record(
      std::move(h), parents,
      [t_ids, o_ids, ih, symbols, d, B, N](Tape& t, std::size_t self) {
        const Matrix& h = t.value(self);
        const Matrix& hbar = t.grad_of(self);
        const std::size_t K = t_ids.size();
        std::vector<Matrix> ebar(K, Matrix::Zero(d, d));
        std::vector<Vector> bbar(K, Vector::Zero(d));
        Vector h0bar = Vector::Zero(d);
        const Vector h0v = t.value(ih).col(0);
        for (Eigen::Index b = 0; b < B; ++b) {
          Vector acc = Vector::Zero(d);
          for (Eigen::Index k = N - 1; k >= 0; --k) {
            acc += hbar.col(b * N + k);
            const auto s = static_cast<std::size_t>(symbols[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)]);
            if (k > 0)
              ebar[s].noalias() += acc * h.col(b * N + k - 1).transpose();
            else
              ebar[s].noalias() += acc * h0v.transpose();
            bbar[s] += acc;
            acc = t.value(t_ids[s]).transpose() * acc;
          }
          h0bar += acc;
        }
        for (std::size_t s = 0; s < K; ++s) {
          t.accumulate(t_ids[s], ebar[s]);
          t.accumulate(o_ids[s], bbar[s]);
        }
        t.accumulate(ih, h0bar);
      },
      "switched_affine_scan");
}

}  // namespace gslice::ad

#include "gslice/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace gslice::optim {

void ParameterSet::add(std::string name, Matrix value) {
  if (contains(name)) throw Error("ParameterSet: duplicate parameter name '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

bool ParameterSet::contains(const std::string& name) const {
  for (const auto& n : names_)
    if (n == name) return true;
  return false;
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw Error("ParameterSet: no parameter named '" + name + "'");
}

Matrix& ParameterSet::at(const std::string& name) { return values_[index_of(name)]; }
const Matrix& ParameterSet::at(const std::string& name) const { return values_[index_of(name)]; }

std::size_t ParameterSet::n_scalars() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

Vector ParameterSet::flatten() const {
  Vector out(static_cast<Eigen::Index>(n_scalars()));
  Eigen::Index off = 0;
  for (const auto& v : values_) {
    out.segment(off, v.size()) = v.reshaped();
    off += v.size();
  }
  return out;
}

void ParameterSet::unflatten(const Vector& flat) {
  if (flat.size() != static_cast<Eigen::Index>(n_scalars())) throw Error("ParameterSet::unflatten: size mismatch");
  Eigen::Index off = 0;
  for (auto& v : values_) {
    v.reshaped() = flat.segment(off, v.size());
    off += v.size();
  }
}

double ParameterSet::norm() const {
  double s = 0.0;
  for (const auto& v : values_) s += v.squaredNorm();
  return std::sqrt(s);
}

bool ParameterSet::same_layout(const ParameterSet& o) const {
  if (o.size() != size()) return false;
  for (std::size_t i = 0; i < size(); ++i)
    if (o.names_[i] != names_[i] || o.values_[i].rows() != values_[i].rows() || o.values_[i].cols() != values_[i].cols())
      return false;
  return true;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet z;
  for (std::size_t i = 0; i < size(); ++i) z.add(names_[i], Matrix::Zero(values_[i].rows(), values_[i].cols()));
  return z;
}

std::vector<ad::Var> bind(ad::Tape& tape, const ParameterSet& params) {
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) vars.push_back(tape.variable(params[i]));
  return vars;
}

GradResult gradient(const LossFn& loss_fn, const ParameterSet& params) {
  ad::Tape tape;
  const auto vars = bind(tape, params);
  const ad::Var loss = loss_fn(tape, vars);
  if (!std::isfinite(loss.scalar())) throw Error("gradient: loss is not finite");
  tape.backward(loss);
  GradResult r;
  r.loss = loss.scalar();
  for (std::size_t i = 0; i < params.size(); ++i) r.grads.add(params.name(i), tape.grad(vars[i]));
  return r;
}

namespace {

double eval_loss(const LossFn& loss_fn, const ParameterSet& params) {
  ad::Tape tape;
  return loss_fn(tape, bind(tape, params)).scalar();
}

}  // namespace

GradcheckResult gradcheck(const LossFn& loss_fn, const ParameterSet& params, double step, std::size_t max_entries,
                          std::uint64_t seed, double floor) {
  const Vector g = gradient(loss_fn, params).grads.flatten();
  const Vector x = params.flatten();
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.size()));
  std::iota(idx.begin(), idx.end(), 0);
  if (max_entries > 0 && max_entries < idx.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_entries);
  }
  GradcheckResult r;
  ParameterSet p = params;
  for (const auto i : idx) {
    Vector xp = x, xm = x;
    xp(i) += step;
    xm(i) -= step;
    p.unflatten(xp);
    const double fp = eval_loss(loss_fn, p);
    p.unflatten(xm);
    const double fm = eval_loss(loss_fn, p);
    const double fd = (fp - fm) / (2.0 * step);
    const double err = std::abs(g(i) - fd) / std::max({std::abs(g(i)), std::abs(fd), floor});
    r.max_rel_error = std::max(r.max_rel_error, err);
    ++r.n_checked;
  }
  return r;
}

double clip_global_norm(ParameterSet& grads, double max_norm) {
  const double n = grads.norm();
  if (n > max_norm && n > 0.0) {
    const double c = max_norm / n;
    for (std::size_t i = 0; i < grads.size(); ++i) grads[i] *= c;
  }
  return n;
}

OptimState OptimState::init(const ParameterSet& params, AdamConfig config) {
  OptimState s;
  s.config = config;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  if (config.ema_decay) s.ema_shadow = params;
  return s;
}

void step(ParameterSet& params, ParameterSet grads, OptimState& state) {
  if (!params.same_layout(grads) || !params.same_layout(state.m))
    throw Error("optim::step: parameter / gradient / state layouts disagree");
  const auto& c = state.config;
  if (c.clip_norm) clip_global_norm(grads, *c.clip_norm);
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    params[i].array() -= c.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  }
  if (c.ema_decay) {
    if (!state.ema_shadow) state.ema_shadow = params;
    const double d = *c.ema_decay;
    for (std::size_t i = 0; i < params.size(); ++i)
      (*state.ema_shadow)[i] = d * (*state.ema_shadow)[i] + (1.0 - d) * params[i];
  }
}

}  // namespace gslice::optim

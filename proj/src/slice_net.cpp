#include "gslice/slice_net.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>

namespace gslice::net {

namespace {

using json = nlohmann::json;

std::vector<std::string> hidden_names(std::size_t d) {
  std::vector<std::string> n;
  for (std::size_t i = 0; i < d; ++i) n.push_back("h" + std::to_string(i));
  return n;
}

Matrix as_row(const Vector& v) { return v.transpose(); }
Vector from_row(const Matrix& m) { return m.transpose().reshaped(); }

ad::Var apply_nonlinearity(Nonlinearity n, ad::Var x) {
  switch (n) {
    case Nonlinearity::Tanh: return ad::tanh(x);
    case Nonlinearity::ReLU: return ad::relu(x);
    case Nonlinearity::Identity: break;
  }
  return x;
}

Matrix apply_nonlinearity(Nonlinearity n, const Matrix& x) {
  switch (n) {
    case Nonlinearity::Tanh: return x.array().tanh().matrix();
    case Nonlinearity::ReLU: return x.cwiseMax(0.0);
    case Nonlinearity::Identity: break;
  }
  return x;
}

// Walks a bound parameter list in collect_params order.
struct Cursor {
  const std::vector<ad::Var>& vars;
  std::size_t i = 0;
  ad::Var next() {
    if (i >= vars.size()) throw Error("forward_stack_taped: parameter list too short");
    return vars[i++];
  }
};

ad::Var affine_rows_taped(ad::Var x, ad::Var w, ad::Var b) { return ad::add_row(ad::matmul(x, ad::transpose(w)), b); }

ad::Var readout_taped(const Readout& r, Cursor& c, ad::Var x) {
  for (std::size_t j = 0; j < r.layers.size(); ++j) {
    ad::Var w = c.next();
    ad::Var b = c.next();
    x = affine_rows_taped(x, w, b);
    if (j + 1 < r.layers.size()) x = apply_nonlinearity(r.nonlinearity, x);
  }
  return x;
}

void collect_readout(const Readout& r, const std::string& prefix, optim::ParameterSet& ps) {
  for (std::size_t j = 0; j < r.layers.size(); ++j) {
    ps.add(prefix + std::to_string(j) + ".w", r.layers[j].weight);
    ps.add(prefix + std::to_string(j) + ".b", as_row(r.layers[j].bias));
  }
}

void load_readout(Readout& r, const std::string& prefix, const optim::ParameterSet& ps) {
  for (std::size_t j = 0; j < r.layers.size(); ++j) {
    r.layers[j].weight = ps.at(prefix + std::to_string(j) + ".w");
    r.layers[j].bias = from_row(ps.at(prefix + std::to_string(j) + ".b"));
  }
}

json readout_json(const Readout& r) {
  json dims = json::array();
  if (!r.layers.empty()) dims.push_back(r.layers.front().in_dim());
  for (const auto& l : r.layers) dims.push_back(l.out_dim());
  return {{"nonlinearity", to_string(r.nonlinearity)}, {"dims", dims}};
}

Readout readout_from_json(const json& j) {
  Readout r;
  r.nonlinearity = nonlinearity_from_string(j.at("nonlinearity").get<std::string>());
  const auto dims = j.at("dims").get<std::vector<std::size_t>>();
  for (std::size_t k = 1; k < dims.size(); ++k) r.layers.push_back(Affine::zeros(dims[k], dims[k - 1]));
  return r;
}

void check_binary(std::span<const int> z, const char* who) {
  for (int v : z)
    if (v != 0 && v != 1) throw Error(std::string(who) + ": input entries must be 0 or 1");
}

}  // namespace

std::string to_string(Nonlinearity n) {
  switch (n) {
    case Nonlinearity::Identity: return "identity";
    case Nonlinearity::Tanh: return "tanh";
    case Nonlinearity::ReLU: return "relu";
  }
  return "?";
}

Nonlinearity nonlinearity_from_string(const std::string& name) {
  if (name == "identity") return Nonlinearity::Identity;
  if (name == "tanh") return Nonlinearity::Tanh;
  if (name == "relu") return Nonlinearity::ReLU;
  throw ConfigError("unknown nonlinearity '" + name + "'");
}

std::string to_string(ExpMode m) { return m == ExpMode::Exact ? "exact" : "first_order"; }

ExpMode exp_mode_from_string(const std::string& name) {
  if (name == "exact") return ExpMode::Exact;
  if (name == "first_order") return ExpMode::FirstOrder;
  throw ConfigError("unknown exp_mode '" + name + "'");
}

Affine::Affine(Matrix w, Vector b) : weight(std::move(w)), bias(std::move(b)) {
  if (weight.rows() != bias.size()) throw Error("Affine: bias length does not match weight rows");
}

Affine Affine::zeros(std::size_t out, std::size_t in) {
  return {Matrix::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)),
          Vector::Zero(static_cast<Eigen::Index>(out))};
}

Affine Affine::uniform(std::size_t out, std::size_t in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double a = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(in, 1)));
  std::uniform_real_distribution<double> u(-a, a);
  Affine f = zeros(out, in);
  for (Eigen::Index i = 0; i < f.weight.rows(); ++i)
    for (Eigen::Index j = 0; j < f.weight.cols(); ++j) f.weight(i, j) = u(rng);
  for (Eigen::Index i = 0; i < f.bias.size(); ++i) f.bias(i) = u(rng);
  return f;
}

Matrix Affine::apply_rows(const Matrix& x) const {
  if (static_cast<std::size_t>(x.cols()) != in_dim())
    throw Error("Affine: input has " + std::to_string(x.cols()) + " channels, expected " + std::to_string(in_dim()));
  Matrix y = x * weight.transpose();
  y.rowwise() += bias.transpose();
  return y;
}

void SliceLayer::validate() const {
  if (control_map.out_dim() != transition.n_controls())
    throw Error("SliceLayer: control map outputs " + std::to_string(control_map.out_dim()) + " channels but transition has " +
                std::to_string(transition.n_controls()) + " controls");
  if (init_map.out_dim() != hidden_dim()) throw Error("SliceLayer: init map output does not match hidden dimension");
  if (init_map.in_dim() != control_map.in_dim()) throw Error("SliceLayer: init map and control map input widths differ");
}

std::size_t Readout::in_dim() const {
  if (layers.empty()) throw Error("Readout: no layers");
  return layers.front().in_dim();
}

std::size_t Readout::out_dim() const {
  if (layers.empty()) throw Error("Readout: no layers");
  return layers.back().out_dim();
}

void Readout::validate() const {
  if (layers.empty()) throw Error("Readout: no layers");
  for (std::size_t j = 1; j < layers.size(); ++j)
    if (layers[j].in_dim() != layers[j - 1].out_dim()) throw Error("Readout: layer dimensions do not chain");
}

Matrix Readout::apply_rows(const Matrix& x) const {
  Matrix y = x;
  for (std::size_t j = 0; j < layers.size(); ++j) {
    y = layers[j].apply_rows(y);
    if (j + 1 < layers.size()) y = apply_nonlinearity(nonlinearity, y);
  }
  return y;
}

std::size_t SliceStack::in_dim() const {
  if (blocks.empty()) return final_readout.in_dim();
  return blocks.front().layer.in_dim();
}

std::size_t SliceStack::out_dim() const { return final_readout.out_dim(); }

void SliceStack::validate() const {
  std::size_t width = in_dim();
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto& b = blocks[k];
    b.layer.validate();
    b.readout.validate();
    if (b.layer.in_dim() != width)
      throw Error("SliceStack: block " + std::to_string(k) + " expects " + std::to_string(b.layer.in_dim()) +
                  " channels, receives " + std::to_string(width));
    if (b.readout.in_dim() != b.layer.hidden_dim())
      throw Error("SliceStack: block " + std::to_string(k) + " readout input does not match hidden dimension");
    if (b.residual && b.readout.out_dim() != width)
      throw Error("SliceStack: residual block " + std::to_string(k) + " changes channel width");
    width = b.readout.out_dim();
  }
  final_readout.validate();
  if (final_readout.in_dim() != width) throw Error("SliceStack: final readout input width mismatch");
}

SliceStack make_stack(const StackSpec& spec, std::uint64_t seed) {
  if (spec.in_dim == 0 || spec.out_dim == 0 || spec.hidden_dim == 0 || spec.width == 0)
    throw ConfigError("make_stack: dimensions must be positive");
  std::mt19937_64 seeds(seed);
  std::size_t block = spec.block_size;
  if (block == 0) block = spec.family == FamilyKind::Diagonal ? 1 : spec.hidden_dim;
  const auto fam = StructureFamily::make(spec.family, spec.hidden_dim, block);

  SliceStack s;
  std::size_t width = spec.in_dim;
  for (std::size_t k = 0; k < spec.n_blocks; ++k) {
    const std::size_t n_ctrl = spec.n_controls ? spec.n_controls : width;
    SliceBlock b{SliceLayer{structmat::StructuredTransition::zeros(fam, n_ctrl), Affine::uniform(n_ctrl, width, seeds()),
                            Affine::uniform(spec.hidden_dim, width, seeds()), spec.exp_mode},
                 Readout{{Affine::uniform(spec.width, spec.hidden_dim, seeds()), Affine::uniform(spec.width, spec.width, seeds())},
                         spec.nonlinearity},
                 width == spec.width};
    s.blocks.push_back(std::move(b));
    width = spec.width;
  }
  s.final_readout.nonlinearity = spec.nonlinearity;
  s.final_readout.layers.push_back(spec.zero_final_readout ? Affine::zeros(spec.out_dim, width)
                                                           : Affine::uniform(spec.out_dim, width, seeds()));
  s.validate();
  return s;
}

path::Path forward_layer(const SliceLayer& layer, const path::Path& input, const scan::ScanOptions& opts) {
  layer.validate();
  if (input.length() < 2) throw Error("forward_layer: path needs at least two grid points");
  const Matrix u = layer.control_map.apply_rows(input.values());
  const Vector h0 = layer.init_map.apply_rows(input.values().topRows(1)).transpose();
  const auto n = static_cast<Eigen::Index>(input.length());

  std::vector<structmat::TransitionOperator> ops;
  ops.reserve(static_cast<std::size_t>(n - 1));
  Vector incr(u.cols());
  for (Eigen::Index j = 0; j + 1 < n; ++j) {
    incr = (u.row(j + 1) - u.row(j)).transpose();
    const auto gen =
        structmat::assemble_generator(layer.transition, {incr.data(), static_cast<std::size_t>(incr.size())});
    ops.push_back(structmat::exp_with(layer.exp_mode, gen));
  }
  const auto prefix = scan::prefix_products(ops, opts);

  Matrix h(n, h0.size());
  h.row(0) = h0.transpose();
  for (Eigen::Index k = 1; k < n; ++k) h.row(k) = (prefix[static_cast<std::size_t>(k - 1)].matrix * h0).transpose();
  return path::Path(input.grid(), std::move(h), hidden_names(layer.hidden_dim()));
}

path::Path forward_stack(const SliceStack& stack, const path::Path& input, const scan::ScanOptions& opts) {
  stack.validate();
  if (input.channels() != stack.in_dim())
    throw Error("forward_stack: input has " + std::to_string(input.channels()) + " channels, stack expects " +
                std::to_string(stack.in_dim()));
  Matrix cur = input.values();
  for (const auto& b : stack.blocks) {
    // A single grid point has the degenerate trajectory h = init_map(x_0).
    const Matrix h = input.length() == 1 ? b.layer.init_map.apply_rows(cur)
                                         : forward_layer(b.layer, path::Path(input.grid(), cur), opts).values();
    Matrix out = b.readout.apply_rows(h);
    if (b.residual) out += cur;
    cur = std::move(out);
  }
  return path::Path(input.grid(), stack.final_readout.apply_rows(cur));
}

optim::ParameterSet collect_params(const SliceStack& stack) {
  optim::ParameterSet ps;
  for (std::size_t k = 0; k < stack.blocks.size(); ++k) {
    const auto& b = stack.blocks[k];
    const std::string p = "block" + std::to_string(k) + ".";
    ps.add(p + "transition", b.layer.transition.coeff_matrix());
    ps.add(p + "control.w", b.layer.control_map.weight);
    ps.add(p + "control.b", as_row(b.layer.control_map.bias));
    ps.add(p + "init.w", b.layer.init_map.weight);
    ps.add(p + "init.b", as_row(b.layer.init_map.bias));
    collect_readout(b.readout, p + "readout", ps);
  }
  collect_readout(stack.final_readout, "final", ps);
  return ps;
}

void load_params(SliceStack& stack, const optim::ParameterSet& ps) {
  if (!collect_params(stack).same_layout(ps)) throw Error("load_params: parameter layout does not match the stack");
  for (std::size_t k = 0; k < stack.blocks.size(); ++k) {
    auto& b = stack.blocks[k];
    const std::string p = "block" + std::to_string(k) + ".";
    const Matrix& c = ps.at(p + "transition");
    for (Eigen::Index i = 0; i < c.rows(); ++i) b.layer.transition.coeffs[static_cast<std::size_t>(i)] = c.row(i).transpose();
    b.layer.control_map.weight = ps.at(p + "control.w");
    b.layer.control_map.bias = from_row(ps.at(p + "control.b"));
    b.layer.init_map.weight = ps.at(p + "init.w");
    b.layer.init_map.bias = from_row(ps.at(p + "init.b"));
    load_readout(b.readout, p + "readout", ps);
  }
  load_readout(stack.final_readout, "final", ps);
}

ad::Var forward_stack_taped(ad::Tape& tape, const SliceStack& stack, const std::vector<ad::Var>& params, ad::Var x) {
  (void)tape;
  if (x.rows() < 1) throw Error("forward_stack_taped: empty path");
  if (static_cast<std::size_t>(x.cols()) != stack.in_dim()) throw Error("forward_stack_taped: input width mismatch");
  Cursor c{params};
  ad::Var cur = x;
  for (const auto& b : stack.blocks) {
    const auto& fam = b.layer.transition.family;
    ad::Var trans = c.next();
    ad::Var cw = c.next(), cb = c.next(), iw = c.next(), ib = c.next();
    if (x.rows() == 1) {
      (void)trans;
      ad::Var h = affine_rows_taped(cur, iw, ib);
      ad::Var out = readout_taped(b.readout, c, h);
      cur = b.residual ? ad::add(out, cur) : out;
      continue;
    }
    ad::Var u = affine_rows_taped(cur, cw, cb);
    ad::Var gens = ad::matmul(ad::row_diff(u), trans);
    ad::Var phi = ad::structured_exp_rows(gens, fam, b.layer.exp_mode);
    ad::Var h0 = ad::transpose(affine_rows_taped(ad::row(cur, 0), iw, ib));
    ad::Var h = ad::structured_linear_scan(phi, h0, fam);
    ad::Var out = readout_taped(b.readout, c, h);
    cur = b.residual ? ad::add(out, cur) : out;
  }
  cur = readout_taped(stack.final_readout, c, cur);
  if (c.i != params.size()) throw Error("forward_stack_taped: parameter list too long");
  return cur;
}

void write_checkpoint(std::ostream& manifest, std::ostream& blob, const SliceStack& stack) {
  stack.validate();
  json m;
  m["format"] = "gslice-stack";
  m["version"] = 1;
  m["in_dim"] = stack.in_dim();
  json blocks = json::array();
  for (const auto& b : stack.blocks) {
    const auto& f = b.layer.transition.family;
    blocks.push_back({{"family", structmat::to_string(f.kind())},
                      {"dim", f.dim()},
                      {"block_size", f.block_size()},
                      {"n_controls", b.layer.transition.n_controls()},
                      {"in_dim", b.layer.in_dim()},
                      {"exp_mode", to_string(b.layer.exp_mode)},
                      {"residual", b.residual},
                      {"readout", readout_json(b.readout)}});
  }
  m["blocks"] = blocks;
  m["final_readout"] = readout_json(stack.final_readout);
  const auto ps = collect_params(stack);
  json params = json::array();
  for (std::size_t i = 0; i < ps.size(); ++i) params.push_back({{"name", ps.name(i)}, {"rows", ps[i].rows()}, {"cols", ps[i].cols()}});
  m["parameters"] = params;
  manifest << m.dump(2) << "\n";

  static_assert(std::endian::native == std::endian::little, "checkpoint blob assumes little-endian doubles");
  const Vector flat = ps.flatten();
  blob.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (!blob) throw Error("write_checkpoint: failed writing parameter blob");
}

SliceStack read_checkpoint(std::istream& manifest, std::istream& blob) {
  json m;
  try {
    manifest >> m;
  } catch (const json::exception& e) {
    throw Error(std::string("read_checkpoint: bad manifest: ") + e.what());
  }
  if (m.value("format", "") != "gslice-stack" || m.value("version", 0) != 1)
    throw Error("read_checkpoint: unsupported manifest format");
  SliceStack s;
  for (const auto& jb : m.at("blocks")) {
    const auto fam = StructureFamily::make(structmat::family_kind_from_string(jb.at("family").get<std::string>()),
                                           jb.at("dim").get<std::size_t>(), jb.at("block_size").get<std::size_t>());
    const auto n_ctrl = jb.at("n_controls").get<std::size_t>();
    const auto in = jb.at("in_dim").get<std::size_t>();
    s.blocks.push_back(SliceBlock{SliceLayer{structmat::StructuredTransition::zeros(fam, n_ctrl), Affine::zeros(n_ctrl, in),
                                             Affine::zeros(fam.dim(), in), exp_mode_from_string(jb.at("exp_mode").get<std::string>())},
                                  readout_from_json(jb.at("readout")), jb.at("residual").get<bool>()});
  }
  s.final_readout = readout_from_json(m.at("final_readout"));
  s.validate();
  auto ps = collect_params(s);
  const auto& jp = m.at("parameters");
  if (jp.size() != ps.size()) throw Error("read_checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (jp[i].at("name").get<std::string>() != ps.name(i) || jp[i].at("rows").get<Eigen::Index>() != ps[i].rows() ||
        jp[i].at("cols").get<Eigen::Index>() != ps[i].cols())
      throw Error("read_checkpoint: parameter '" + ps.name(i) + "' does not match the architecture");
  Vector flat(static_cast<Eigen::Index>(ps.n_scalars()));
  blob.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (blob.gcount() != static_cast<std::streamsize>(flat.size() * sizeof(double)))
    throw Error("read_checkpoint: parameter blob truncated");
  ps.unflatten(flat);
  load_params(s, ps);
  return s;
}

std::string to_string(SsmClass c) {
  switch (c) {
    case SsmClass::DenseSelective: return "dense_selective";
    case SsmClass::DiagonalSelective: return "diagonal_selective";
    case SsmClass::DenseNonSelective: return "dense_non_selective";
  }
  return "?";
}

SsmClass ssm_class_from_string(const std::string& name) {
  if (name == "dense_selective") return SsmClass::DenseSelective;
  if (name == "diagonal_selective") return SsmClass::DiagonalSelective;
  if (name == "dense_non_selective") return SsmClass::DenseNonSelective;
  throw ConfigError("unknown model class '" + name + "'");
}

StructureFamily ExactFlowSSM::family() const {
  return cls == SsmClass::DiagonalSelective ? StructureFamily::diagonal(width) : StructureFamily::dense(width);
}

Matrix ExactFlowSSM::generator(double z) const { return structmat::unpack(family(), Vector((1.0 - z) * a0 + z * a1)); }

Vector ExactFlowSSM::beta(double z) const { return (1.0 - z) * beta0 + z * beta1; }

void ExactFlowSSM::validate() const {
  const auto p = static_cast<Eigen::Index>(family().packed_size());
  const auto d = static_cast<Eigen::Index>(width);
  if (a0.size() != p || a1.size() != p) throw Error("ExactFlowSSM: generator coefficients have the wrong length");
  if (beta0.size() != d || beta1.size() != d || h0.size() != d || w.size() != d)
    throw Error("ExactFlowSSM: vector parameters must have length width");
  if (cls == SsmClass::DenseNonSelective && a1 != a0)
    throw Error("ExactFlowSSM: dense non-selective model must have input-independent A");
}

ExactFlowSSM random_ssm(SsmClass cls, std::size_t width, std::uint64_t seed, double a_scale, double other_scale) {
  if (width == 0) throw ConfigError("random_ssm: width must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  ExactFlowSSM m;
  m.cls = cls;
  m.width = width;
  const auto p = static_cast<Eigen::Index>(m.family().packed_size());
  const auto d = static_cast<Eigen::Index>(width);
  auto draw = [&](Eigen::Index k, double s) {
    Vector v(k);
    for (Eigen::Index i = 0; i < k; ++i) v(i) = s * n(rng);
    return v;
  };
  m.a0 = draw(p, a_scale);
  m.a1 = draw(p, a_scale);
  if (cls == SsmClass::DenseNonSelective) m.a1 = m.a0;
  m.beta0 = draw(d, other_scale);
  m.beta1 = draw(d, other_scale);
  m.h0 = draw(d, other_scale);
  m.w = draw(d, other_scale);
  m.b = other_scale * n(rng);
  return m;
}

std::vector<double> forward_ssm(const ExactFlowSSM& model, std::span<const int> z) {
  model.validate();
  check_binary(z, "forward_ssm");
  if (z.empty()) return {};
  const auto fam = model.family();
  const scan::AffineStep step0{structmat::exp_exact({fam, model.generator(0.0)}), model.beta(0.0)};
  const scan::AffineStep step1{structmat::exp_exact({fam, model.generator(1.0)}), model.beta(1.0)};
  std::vector<scan::AffineStep> steps;
  steps.reserve(z.size());
  for (int v : z) steps.push_back(v ? step1 : step0);
  const auto h = scan::prefix_affine(steps, model.h0);
  std::vector<double> out;
  out.reserve(h.size());
  for (const auto& hk : h) out.push_back(model.w.dot(hk) + model.b);
  return out;
}

void add_s4d_lin_base(ExactFlowSSM& m) {
  const auto fam = m.family();
  const auto d = static_cast<Eigen::Index>(m.width);
  Matrix base = -0.5 * Matrix::Identity(d, d);
  if (m.cls != SsmClass::DiagonalSelective)
    for (Eigen::Index k = 0; k + 1 < d; k += 2) {
      const double freq = std::numbers::pi * static_cast<double>(k / 2 + 1);
      base(k, k + 1) = -freq;
      base(k + 1, k) = freq;
    }
  const Vector packed = structmat::pack(fam, base);
  m.a0 += packed;
  m.a1 += packed;
}

ExactFlowSSM analytic_construction(double eta) {
  if (!(eta > 0.0 && eta < 0.5)) throw Error("analytic_construction: eta must lie in (0, 1/2)");
  const auto fam = StructureFamily::dense(2);
  Matrix j(2, 2);
  j << 0.0, -1.0, 1.0, 0.0;
  const Matrix g0 = std::log(eta) * Matrix::Identity(2, 2);
  const Matrix g1 = std::numbers::pi * j;
  ExactFlowSSM m;
  m.cls = SsmClass::DenseSelective;
  m.width = 2;
  m.a0 = structmat::pack(fam, g0);
  m.a1 = structmat::pack(fam, g1);
  m.beta0 = Vector::Zero(2);
  m.beta1 = Vector::Unit(2, 0);
  m.h0 = Vector::Zero(2);
  m.w = Vector::Unit(2, 0);
  m.b = 0.0;
  return m;
}

optim::ParameterSet ssm_params(const ExactFlowSSM& model) {
  model.validate();
  optim::ParameterSet ps;
  ps.add("a0", as_row(model.a0));
  if (model.cls != SsmClass::DenseNonSelective) ps.add("a1", as_row(model.a1));
  ps.add("beta0", model.beta0);
  ps.add("beta1", model.beta1);
  ps.add("h0", model.h0);
  ps.add("w", model.w);
  ps.add("b", Matrix::Constant(1, 1, model.b));
  return ps;
}

void load_ssm_params(ExactFlowSSM& model, const optim::ParameterSet& ps) {
  if (!ssm_params(model).same_layout(ps)) throw Error("load_ssm_params: parameter layout does not match the model");
  model.a0 = from_row(ps.at("a0"));
  model.a1 = model.cls != SsmClass::DenseNonSelective ? from_row(ps.at("a1")) : model.a0;
  model.beta0 = ps.at("beta0").col(0);
  model.beta1 = ps.at("beta1").col(0);
  model.h0 = ps.at("h0").col(0);
  model.w = ps.at("w").col(0);
  model.b = ps.at("b")(0, 0);
}

ad::Var ssm_outputs_taped(ad::Tape& tape, const ExactFlowSSM& model, const std::vector<ad::Var>& params,
                          const std::vector<std::vector<int>>& z) {
  (void)tape;
  for (const auto& s : z) check_binary(s, "ssm_outputs_taped");
  const bool selective = model.cls != SsmClass::DenseNonSelective;
  if (params.size() != (selective ? 7u : 6u)) throw Error("ssm_outputs_taped: wrong number of parameters");
  std::size_t i = 0;
  ad::Var a0 = params[i++];
  ad::Var a1 = selective ? params[i++] : ad::Var();
  ad::Var beta0 = params[i++], beta1 = params[i++], h0 = params[i++], w = params[i++], b = params[i++];
  const auto fam = model.family();
  ad::Var gens = ad::concat_rows({a0, selective ? a1 : a0});
  ad::Var e = ad::structured_exp_rows(gens, fam, ExpMode::Exact);
  ad::Var e0 = ad::unpack(ad::row(e, 0), fam);
  ad::Var e1 = ad::unpack(ad::row(e, 1), fam);
  ad::Var h = ad::switched_affine_scan({e0, e1}, {beta0, beta1}, h0, z);
  return ad::add_col(ad::matmul(ad::transpose(w), h), b);
}

HardcoreLayer hardcore_layer() {
  const auto fam = StructureFamily::dense(2);
  Matrix m0(2, 2), m1(2, 2);
  // Column action: M0 sends both states to s0, M1 swaps them.
  m0 << 1.0, 1.0, 0.0, 0.0;
  m1 << 0.0, 1.0, 1.0, 0.0;
  const Matrix id = Matrix::Identity(2, 2);
  structmat::StructuredTransition trans(fam, {structmat::pack(fam, Matrix(m0 - id)), structmat::pack(fam, Matrix(m1 - id))});
  Affine ctrl(Matrix::Identity(2, 2), Vector::Zero(2));
  Affine init(Matrix::Zero(2, 2), Vector::Unit(2, 0));
  HardcoreLayer hc{SliceLayer{std::move(trans), std::move(ctrl), std::move(init), ExpMode::FirstOrder}, Vector::Unit(2, 1), 0.0};
  hc.layer.validate();
  return hc;
}

path::Path hardcore_control_path(std::span<const int> z) {
  check_binary(z, "hardcore_control_path");
  const auto n = static_cast<Eigen::Index>(z.size());
  Matrix v = Matrix::Zero(n + 1, 2);
  for (Eigen::Index k = 0; k < n; ++k) {
    v.row(k + 1) = v.row(k);
    v(k + 1, z[static_cast<std::size_t>(k)] ? 1 : 0) += 1.0;
  }
  return path::Path(path::TimeGrid::regular(0.0, 1.0, static_cast<std::size_t>(n + 1)), std::move(v), {"zeros", "ones"});
}

std::vector<double> hardcore_layer_outputs(const HardcoreLayer& hc, std::span<const int> z) {
  if (z.empty()) return {};
  const auto h = forward_layer(hc.layer, hardcore_control_path(z));
  std::vector<double> out;
  for (Eigen::Index k = 1; k < h.values().rows(); ++k) out.push_back(h.values().row(k).dot(hc.w) + hc.b);
  return out;
}

}  // namespace gslice::net

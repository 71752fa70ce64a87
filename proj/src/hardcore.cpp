#include "gslice/hardcore.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

namespace gslice::hardcore {

namespace {

void check_binary(std::span<const int> z, const char* who) {
  for (int v : z)
    if (v != 0 && v != 1) throw Error(std::string(who) + ": entries must be 0 or 1");
}

Vector to_vector(const std::vector<double>& x) { return Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size())); }

Sequence bits_of(std::uint64_t mask, std::size_t n) {
  Sequence z(n);
  for (std::size_t k = 0; k < n; ++k) z[k] = static_cast<int>((mask >> k) & 1u);
  return z;
}

Matrix target_row(const std::vector<Sequence>& c, std::span<const std::size_t> idx) {
  const std::size_t n = c.front().size();
  Matrix t(1, static_cast<Eigen::Index>(idx.size() * n));
  for (std::size_t b = 0; b < idx.size(); ++b)
    for (std::size_t k = 0; k < n; ++k) t(0, static_cast<Eigen::Index>(b * n + k)) = c[idx[b]][k];
  return t;
}

}  // namespace

Sequence target_map(std::span<const int> z) {
  check_binary(z, "target_map");
  Sequence c(z.size());
  int prev = 0;
  for (std::size_t k = 0; k < z.size(); ++k) prev = c[k] = z[k] * (1 - prev);
  return c;
}

bool is_valid(std::span<const int> c) {
  check_binary(c, "is_valid");
  for (std::size_t k = 1; k < c.size(); ++k)
    if (c[k] && c[k - 1]) return false;
  return true;
}

Sequence threshold(std::span<const double> x) {
  Sequence s(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) s[k] = x[k] >= 0.5 ? 1 : 0;
  return s;
}

void HardcoreConfig::validate() const {
  if (n < 1) throw ConfigError("hardcore: n must be at least 1");
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("hardcore: p must lie in [0,1]");
  if (n_train == 0 || n_val == 0 || n_test == 0 || batch_size == 0 || width == 0)
    throw ConfigError("hardcore: sample counts, batch size and width must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("hardcore: learning_rate must be positive");
  if (seeds.empty()) throw ConfigError("hardcore: at least one seed required");
}

Split make_split(std::size_t count, std::size_t n, double p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution bern(p);
  Split s;
  for (std::size_t i = 0; i < count; ++i) {
    Sequence z(n);
    for (auto& v : z) v = bern(rng) ? 1 : 0;
    s.c.push_back(target_map(z));
    s.z.push_back(std::move(z));
  }
  return s;
}

std::pair<double, double> evaluate(const net::ExactFlowSSM& model, const Split& data) {
  std::size_t exact = 0, valid = 0;
  for (std::size_t i = 0; i < data.z.size(); ++i) {
    const auto out = threshold(net::forward_ssm(model, data.z[i]));
    exact += out == data.c[i];
    valid += is_valid(out);
  }
  const double m = static_cast<double>(data.z.size());
  return {static_cast<double>(exact) / m, static_cast<double>(valid) / m};
}

SeedResult train_seed(SsmClass cls, const HardcoreConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  // Independent streams for data splits, initialisation and shuffling.
  std::seed_seq sseq{seed, std::uint64_t{0x5eed}};
  std::vector<std::uint64_t> sub(5);
  sseq.generate(sub.begin(), sub.end());
  const Split train = make_split(cfg.n_train, cfg.n, cfg.p, sub[0]);
  const Split val = make_split(cfg.n_val, cfg.n, cfg.p, sub[1]);
  const Split test = make_split(cfg.n_test, cfg.n, cfg.p, sub[2]);
  std::mt19937_64 shuffle_rng(sub[4]);

  net::ExactFlowSSM model = net::random_ssm(cls, cfg.width, sub[3], cfg.init_scale, cfg.init_scale);
  if (cfg.s4d_lin_init) net::add_s4d_lin_base(model);
  auto params = net::ssm_params(model);
  optim::AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  if (cfg.clip_norm > 0.0) adam.clip_norm = cfg.clip_norm;
  auto state = optim::OptimState::init(params, adam);

  SeedResult res;
  res.seed = seed;
  net::ExactFlowSSM best = model;
  auto [best_acc, best_valid] = evaluate(model, val);
  std::vector<std::size_t> order(cfg.n_train);
  std::iota(order.begin(), order.end(), 0);

  try {
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      double loss_sum = 0.0;
      std::size_t n_batches = 0;
      for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
        const std::span<const std::size_t> idx(order.data() + lo, std::min(cfg.batch_size, order.size() - lo));
        std::vector<Sequence> zb;
        for (auto i : idx) zb.push_back(train.z[i]);
        const Matrix target = target_row(train.c, idx);
        auto g = optim::gradient(
            [&](ad::Tape& tape, const std::vector<ad::Var>& vars) {
              return ad::mean_squared_error(net::ssm_outputs_taped(tape, model, vars, zb), target);
            },
            params);
        optim::step(params, std::move(g.grads), state);
        loss_sum += g.loss;
        ++n_batches;
      }
      net::load_ssm_params(model, params);
      res.final_train_loss = loss_sum / static_cast<double>(n_batches);
      const auto [acc, valid] = evaluate(model, val);
      if (acc > best_acc || (acc == best_acc && valid > best_valid)) {
        best_acc = acc;
        best_valid = valid;
        best = model;
        res.best_epoch = epoch;
      }
    }
  } catch (const Error&) {
    // Diverged; keep the best epoch seen so far.
  }
  std::tie(res.exact_accuracy, res.validity_ratio) = evaluate(best, test);
  res.model = best;
  return res;
}

HardcoreResult run_benchmark(SsmClass cls, const HardcoreConfig& cfg) {
  cfg.validate();
  HardcoreResult r;
  r.cls = cls;
  r.n = cfg.n;
  r.width = cfg.width;
  r.per_seed.resize(cfg.seeds.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.workers, cfg.seeds.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) r.per_seed[i] = train_seed(cls, cfg, cfg.seeds[i]);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex mu;
    std::size_t next = 0;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard lock(mu);
            if (next >= cfg.seeds.size() || failure) return;
            i = next++;
          }
          try {
            r.per_seed[i] = train_seed(cls, cfg, cfg.seeds[i]);
          } catch (...) {
            std::lock_guard lock(mu);
            failure = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  for (const auto& s : r.per_seed) {
    r.exact_accuracy += s.exact_accuracy;
    r.validity_ratio += s.validity_ratio;
  }
  r.exact_accuracy /= static_cast<double>(r.per_seed.size());
  r.validity_ratio /= static_cast<double>(r.per_seed.size());
  return r;
}

SequenceMap target_as_map() {
  return [](std::span<const int> z) {
    const auto c = target_map(z);
    return std::vector<double>(c.begin(), c.end());
  };
}

SequenceMap model_as_map(net::ExactFlowSSM model, bool thresholded) {
  return [model = std::move(model), thresholded](std::span<const int> z) {
    auto out = net::forward_ssm(model, z);
    if (thresholded)
      for (auto& v : out) v = v >= 0.5 ? 1.0 : 0.0;
    return out;
  };
}

PushforwardLaw pushforward_law(const SequenceMap& f, std::size_t n, double p, std::size_t n_draws, std::uint64_t seed) {
  if (n == 0) throw Error("pushforward_law: n must be positive");
  if (!(p >= 0.0 && p <= 1.0)) throw Error("pushforward_law: p must lie in [0,1]");
  PushforwardLaw out;
  metrics::EmpiricalLaw raw;
  if (n <= kMaxExactLength) {
    out.exact = true;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
      const auto z = bits_of(mask, n);
      const auto ones = static_cast<int>(std::count(z.begin(), z.end(), 1));
      const double w = std::pow(p, ones) * std::pow(1.0 - p, static_cast<int>(n) - ones);
      if (w == 0.0) continue;
      raw.atoms.push_back(to_vector(f(z)));
      raw.weights.push_back(w);
    }
    // Renormalise away the rounding in the product weights.
    const double s = std::accumulate(raw.weights.begin(), raw.weights.end(), 0.0);
    for (auto& w : raw.weights) w /= s;
    out.law = raw.merged();
    out.mass_standard_error.assign(out.law.size(), 0.0);
    return out;
  }
  if (n_draws == 0) throw Error("pushforward_law: n_draws must be positive beyond the enumeration limit");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution bern(p);
  for (std::size_t i = 0; i < n_draws; ++i) {
    Sequence z(n);
    for (auto& v : z) v = bern(rng) ? 1 : 0;
    raw.atoms.push_back(to_vector(f(z)));
  }
  raw.weights.assign(n_draws, 1.0 / static_cast<double>(n_draws));
  out.n_draws = n_draws;
  out.law = raw.merged();
  for (double w : out.law.weights) out.mass_standard_error.push_back(std::sqrt(w * (1.0 - w) / static_cast<double>(n_draws)));
  return out;
}

std::size_t sign_changes(std::span<const double> x) {
  std::size_t changes = 0;
  int last = 0;
  for (double v : x) {
    const double s = v - 0.5;
    if (s == 0.0) continue;
    const int sg = s > 0.0 ? 1 : -1;
    if (last != 0 && sg != last) ++changes;
    last = sg;
  }
  return changes;
}

CertificateReport separation_certificates(std::size_t d, std::size_t n, std::size_t trials, std::uint64_t seed, double eta) {
  if (n < 2) throw Error("separation_certificates: n must be at least 2");
  if (d == 0 || trials == 0) throw Error("separation_certificates: d and trials must be positive");
  CertificateReport rep;
  rep.d = d;
  rep.n = n;
  rep.trials = trials;
  rep.eta = eta;
  rep.min_winf_non_selective = std::numeric_limits<double>::infinity();
  rep.min_max_error_diagonal = std::numeric_limits<double>::infinity();
  std::mt19937_64 seeds(seed);

  const auto mu2 = pushforward_law(target_as_map(), 2, 0.5, 0, 0).law;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto m = net::random_ssm(SsmClass::DenseNonSelective, d, seeds());
    const double y00 = net::forward_ssm(m, std::vector<int>{0, 0})[1];
    const double y01 = net::forward_ssm(m, std::vector<int>{0, 1})[1];
    const double y10 = net::forward_ssm(m, std::vector<int>{1, 0})[1];
    const double y11 = net::forward_ssm(m, std::vector<int>{1, 1})[1];
    const double scale = std::max({1.0, std::abs(y00), std::abs(y01), std::abs(y10), std::abs(y11)});
    rep.max_parallelogram_residual = std::max(rep.max_parallelogram_residual, std::abs(y00 + y11 - y10 - y01) / scale);
    const auto law = pushforward_law(model_as_map(m, false), 2, 0.5, 0, 0).law;
    rep.min_winf_non_selective = std::min(rep.min_winf_non_selective, metrics::w_inf_finite(law, mu2));
  }

  for (std::size_t t = 0; t < trials; ++t) {
    const auto m = net::random_ssm(SsmClass::DiagonalSelective, d, seeds());
    const std::vector<int> ones_long(d + 10, 1);
    const auto out = net::forward_ssm(m, ones_long);
    const std::size_t sc = sign_changes(out);
    rep.max_sign_changes = std::max(rep.max_sign_changes, sc);
    if (sc > d) ++rep.sign_change_violations;
    const std::vector<int> ones_short(d + 2, 1);
    const auto y = net::forward_ssm(m, ones_short);
    const auto c = target_map(ones_short);
    double err = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) err = std::max(err, std::abs(y[k] - c[k]));
    rep.min_max_error_diagonal = std::min(rep.min_max_error_diagonal, err);
  }

  const auto analytic = pushforward_law(model_as_map(net::analytic_construction(eta), false), n, 0.5, 0, 0).law;
  const auto target = pushforward_law(target_as_map(), n, 0.5, 0, 0).law;
  rep.winf_analytic = metrics::w_inf_finite(analytic, target);
  return rep;
}

namespace {

std::vector<int> bits(std::size_t code, std::size_t n) {
  std::vector<int> z(n);
  for (std::size_t k = 0; k < n; ++k) z[k] = static_cast<int>((code >> k) & 1U);
  return z;
}

}  // namespace

AnalyticReport analytic_checks(std::size_t n_real, std::size_t n_eta, double eta) {
  if (n_real == 0 || n_eta == 0 || n_real > 20 || n_eta > 20) throw Error("analytic_checks: lengths must lie in [1, 20]");
  AnalyticReport rep;
  rep.realisation_n = n_real;
  rep.eta_n = n_eta;
  rep.eta = eta;
  const auto hc = net::hardcore_layer();
  for (std::size_t code = 0; code < (std::size_t{1} << n_real); ++code) {
    const auto z = bits(code, n_real);
    const auto y = net::hardcore_layer_outputs(hc, z);
    const auto c = target_map(z);
    if (threshold(y) != c) ++rep.realisation_mismatches;
    for (std::size_t k = 0; k < y.size(); ++k) rep.realisation_max_error = std::max(rep.realisation_max_error, std::abs(y[k] - c[k]));
  }
  const auto m = net::analytic_construction(eta);
  for (std::size_t code = 0; code < (std::size_t{1} << n_eta); ++code) {
    const auto z = bits(code, n_eta);
    const auto y = net::forward_ssm(m, z);
    const auto c = target_map(z);
    for (std::size_t k = 0; k < y.size(); ++k) rep.eta_max_error = std::max(rep.eta_max_error, std::abs(y[k] - c[k]));
  }
  return rep;
}

}  // namespace gslice::hardcore

#include "gslice/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <queue>

namespace gslice::metrics {

namespace {

// Dinic max-flow on a small dense graph.
class MaxFlow {
 public:
  explicit MaxFlow(std::size_t n) : adj_(n), level_(n), it_(n) {}

  void add_edge(std::size_t u, std::size_t v, std::int64_t cap) {
    adj_[u].push_back({v, cap, adj_[v].size()});
    adj_[v].push_back({u, 0, adj_[u].size() - 1});
  }

  std::int64_t run(std::size_t s, std::size_t t) {
    std::int64_t flow = 0;
    while (bfs(s, t)) {
      std::fill(it_.begin(), it_.end(), 0);
      while (std::int64_t f = dfs(s, t, std::numeric_limits<std::int64_t>::max())) flow += f;
    }
    return flow;
  }

 private:
  struct Edge {
    std::size_t to;
    std::int64_t cap;
    std::size_t rev;
  };

  bool bfs(std::size_t s, std::size_t t) {
    std::fill(level_.begin(), level_.end(), -1);
    std::queue<std::size_t> q;
    level_[s] = 0;
    q.push(s);
    while (!q.empty()) {
      const auto u = q.front();
      q.pop();
      for (const auto& e : adj_[u])
        if (e.cap > 0 && level_[e.to] < 0) {
          level_[e.to] = level_[u] + 1;
          q.push(e.to);
        }
    }
    return level_[t] >= 0;
  }

  std::int64_t dfs(std::size_t u, std::size_t t, std::int64_t f) {
    if (u == t) return f;
    for (auto& i = it_[u]; i < adj_[u].size(); ++i) {
      auto& e = adj_[u][i];
      if (e.cap <= 0 || level_[e.to] != level_[u] + 1) continue;
      if (std::int64_t d = dfs(e.to, t, std::min(f, e.cap)); d > 0) {
        e.cap -= d;
        adj_[e.to][e.rev].cap += d;
        return d;
      }
    }
    return 0;
  }

  std::vector<std::vector<Edge>> adj_;
  std::vector<int> level_;
  std::vector<std::size_t> it_;
};

// Best rational approximation with denominator <= max_den (continued fractions).
std::pair<std::int64_t, std::int64_t> to_rational(double x, std::int64_t max_den) {
  std::int64_t p0 = 0, q0 = 1, p1 = 1, q1 = 0;
  double r = x;
  for (int iter = 0; iter < 64; ++iter) {
    const double a = std::floor(r);
    const auto ai = static_cast<std::int64_t>(a);
    const std::int64_t q2 = ai * q1 + q0;
    if (q2 > max_den) break;
    const std::int64_t p2 = ai * p1 + p0;
    p0 = p1, q0 = q1, p1 = p2, q1 = q2;
    if (std::abs(static_cast<double>(p1) / static_cast<double>(q1) - x) <= 1e-15) break;
    const double frac = r - a;
    if (frac < 1e-300) break;
    r = 1.0 / frac;
  }
  return {p1, q1};
}

std::vector<std::int64_t> integer_masses(const std::vector<double>& w, std::int64_t denom) {
  std::vector<std::int64_t> m;
  m.reserve(w.size());
  for (double x : w) m.push_back(std::llround(x * static_cast<double>(denom)));
  return m;
}

double sup_distance(const Vector& a, const Vector& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

EmpiricalLaw EmpiricalLaw::uniform(std::vector<Vector> atoms) {
  if (atoms.empty()) throw Error("EmpiricalLaw: no atoms");
  EmpiricalLaw l;
  l.weights.assign(atoms.size(), 1.0 / static_cast<double>(atoms.size()));
  l.atoms = std::move(atoms);
  return l;
}

std::size_t EmpiricalLaw::dim() const {
  if (atoms.empty()) throw Error("EmpiricalLaw: no atoms");
  return static_cast<std::size_t>(atoms.front().size());
}

void EmpiricalLaw::validate() const {
  if (atoms.empty()) throw Error("EmpiricalLaw: no atoms");
  if (atoms.size() != weights.size()) throw Error("EmpiricalLaw: atom and weight counts differ");
  double s = 0.0;
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    if (atoms[i].size() != atoms.front().size()) throw Error("EmpiricalLaw: atoms have different lengths");
    if (!(weights[i] >= 0.0)) throw Error("EmpiricalLaw: negative weight");
    s += weights[i];
  }
  if (std::abs(s - 1.0) > 1e-12) throw Error("EmpiricalLaw: weights sum to " + std::to_string(s));
}

EmpiricalLaw EmpiricalLaw::merged() const {
  validate();
  auto less = [](const Vector& a, const Vector& b) {
    return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
  };
  std::map<Vector, double, decltype(less)> acc(less);
  for (std::size_t i = 0; i < atoms.size(); ++i) acc[atoms[i]] += weights[i];
  EmpiricalLaw out;
  for (const auto& [a, w] : acc) {
    out.atoms.push_back(a);
    out.weights.push_back(w);
  }
  return out;
}

void QuantileGrid::validate() const {
  if (levels.empty()) throw Error("QuantileGrid: no levels");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (!(levels[i] > 0.0 && levels[i] < 1.0)) throw Error("QuantileGrid: levels must lie in (0,1)");
    if (i > 0 && !(levels[i] > levels[i - 1])) throw Error("QuantileGrid: levels must be sorted and distinct");
  }
}

double empirical_quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw Error("empirical_quantile: no data");
  const double pos = static_cast<double>(sorted.size()) * q - 0.5;
  if (pos <= 0.0) return sorted.front();
  const double last = static_cast<double>(sorted.size() - 1);
  if (pos >= last) return sorted.back();
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double f = pos - static_cast<double>(lo);
  return sorted[lo] + f * (sorted[lo + 1] - sorted[lo]);
}

Matrix empirical_quantiles(const Matrix& samples, const QuantileGrid& grid) {
  grid.validate();
  if (samples.rows() < 1) throw Error("empirical_quantiles: need at least one sample");
  Matrix q(static_cast<Eigen::Index>(grid.levels.size()), samples.cols());
  std::vector<double> col(static_cast<std::size_t>(samples.rows()));
  for (Eigen::Index t = 0; t < samples.cols(); ++t) {
    for (Eigen::Index s = 0; s < samples.rows(); ++s) col[static_cast<std::size_t>(s)] = samples(s, t);
    std::sort(col.begin(), col.end());
    for (std::size_t l = 0; l < grid.levels.size(); ++l)
      q(static_cast<Eigen::Index>(l), t) = empirical_quantile(col, grid.levels[l]);
  }
  return q;
}

double pinball(double y, double yhat, double q) { return (y - yhat) * (q - (y < yhat ? 1.0 : 0.0)); }

double crps_quantile(const Matrix& samples, const Vector& y, const QuantileGrid& grid) {
  if (samples.cols() != y.size()) throw Error("crps_quantile: sample horizon does not match target length");
  const double mass = y.cwiseAbs().sum();
  if (!(mass > 0.0)) throw Error("crps_quantile: target has zero absolute mass");
  const Matrix q = empirical_quantiles(samples, grid);
  double total = 0.0;
  for (std::size_t l = 0; l < grid.levels.size(); ++l) {
    double loss = 0.0;
    for (Eigen::Index t = 0; t < y.size(); ++t) loss += pinball(y(t), q(static_cast<Eigen::Index>(l), t), grid.levels[l]);
    total += 2.0 * loss / mass;
  }
  return total / static_cast<double>(grid.levels.size());
}

WeightedSamples WeightedSamples::uniform(std::vector<double> values) {
  if (values.empty()) throw Error("WeightedSamples: no values");
  WeightedSamples s;
  s.weights.assign(values.size(), 1.0 / static_cast<double>(values.size()));
  s.values = std::move(values);
  return s;
}

double w2_1d(const WeightedSamples& a, const WeightedSamples& b) {
  auto prep = [](const WeightedSamples& s) {
    if (s.values.empty() || s.values.size() != s.weights.size()) throw Error("w2_1d: malformed weighted samples");
    std::vector<std::pair<double, double>> v;
    double total = 0.0;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      if (!(s.weights[i] >= 0.0) || !std::isfinite(s.values[i])) throw Error("w2_1d: invalid value or weight");
      v.emplace_back(s.values[i], s.weights[i]);
      total += s.weights[i];
    }
    if (!(total > 0.0)) throw Error("w2_1d: zero total weight");
    for (auto& p : v) p.second /= total;
    std::sort(v.begin(), v.end());
    return v;
  };
  const auto va = prep(a), vb = prep(b);
  std::size_t i = 0, j = 0;
  double ra = va[0].second, rb = vb[0].second, acc = 0.0;
  while (i < va.size() && j < vb.size()) {
    const double m = std::min(ra, rb);
    const double d = va[i].first - vb[j].first;
    acc += m * d * d;
    ra -= m;
    rb -= m;
    if (ra <= 1e-15) {
      if (++i < va.size()) ra = va[i].second;
    }
    if (rb <= 1e-15) {
      if (++j < vb.size()) rb = vb[j].second;
    }
  }
  return std::sqrt(std::max(acc, 0.0));
}

double w_inf_finite(const EmpiricalLaw& a_in, const EmpiricalLaw& b_in, std::int64_t max_denominator) {
  const EmpiricalLaw a = a_in.merged(), b = b_in.merged();
  if (a.dim() != b.dim()) throw Error("w_inf_finite: atom dimensions differ");
  if (a.size() > 64 || b.size() > 64) throw Error("w_inf_finite: at most 64 distinct atoms per law");

  std::int64_t denom = 1;
  for (const auto* law : {&a, &b})
    for (double w : law->weights) {
      const auto [p, q] = to_rational(w, max_denominator);
      if (std::abs(static_cast<double>(p) / static_cast<double>(q) - w) > 1e-12)
        throw Error("w_inf_finite: weight " + std::to_string(w) +
                    " is not a small-denominator rational; resample to uniform weights");
      denom = std::lcm(denom, q);
      if (denom > (std::int64_t{1} << 50)) throw Error("w_inf_finite: common weight denominator too large");
    }
  const auto ma = integer_masses(a.weights, denom), mb = integer_masses(b.weights, denom);
  if (std::accumulate(ma.begin(), ma.end(), std::int64_t{0}) != denom ||
      std::accumulate(mb.begin(), mb.end(), std::int64_t{0}) != denom)
    throw Error("w_inf_finite: rational weights do not sum to one");

  const std::size_t na = a.size(), nb = b.size();
  Matrix dist(static_cast<Eigen::Index>(na), static_cast<Eigen::Index>(nb));
  std::vector<double> cand;
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = sup_distance(a.atoms[i], b.atoms[j]);
      cand.push_back(dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());

  auto feasible = [&](double r) {
    const std::size_t s = na + nb, t = na + nb + 1;
    MaxFlow g(na + nb + 2);
    for (std::size_t i = 0; i < na; ++i)
      if (ma[i] > 0) g.add_edge(s, i, ma[i]);
    for (std::size_t j = 0; j < nb; ++j)
      if (mb[j] > 0) g.add_edge(na + j, t, mb[j]);
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < nb; ++j)
        if (dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) <= r) g.add_edge(i, na + j, denom);
    return g.run(s, t) == denom;
  };

  std::size_t lo = 0, hi = cand.size() - 1;
  while (lo < hi) {
    const std::size_t mid = (lo + hi) / 2;
    if (feasible(cand[mid]))
      hi = mid;
    else
      lo = mid + 1;
  }
  return cand[lo];
}

double nrmse(const Vector& forecast_mean, const Vector& y) {
  if (forecast_mean.size() != y.size() || y.size() == 0) throw Error("nrmse: length mismatch");
  const double scale = y.cwiseAbs().mean();
  if (!(scale > 0.0)) throw Error("nrmse: target has zero absolute mass");
  return std::sqrt((forecast_mean - y).squaredNorm() / static_cast<double>(y.size())) / scale;
}

Matrix ridge_fit(const Matrix& x, const Matrix& y, double lambda) {
  if (x.rows() != y.rows()) throw Error("ridge_fit: X and Y row counts differ");
  if (lambda < 0.0) throw Error("ridge_fit: lambda must be nonnegative");
  Matrix a = x.transpose() * x;
  a.diagonal().array() += lambda;
  Eigen::LLT<Matrix> llt(a);
  const double scale = std::max(a.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  if (llt.info() != Eigen::Success || llt.matrixL().toDenseMatrix().diagonal().minCoeff() <= 1e-7 * std::sqrt(scale))
    throw Error("ridge_fit: normal equations are singular; use ridge_lambda > 0");
  return llt.solve(x.transpose() * y);
}

ad::Var ridge_fit_taped(ad::Var x, ad::Var y, double lambda) {
  ad::Tape& t = *x.tape();
  const auto p = x.cols();
  ad::Var a = ad::add(ad::matmul(ad::transpose(x), x), t.constant(lambda * Matrix::Identity(p, p)));
  return ad::solve_spd(a, ad::matmul(ad::transpose(x), y));
}

double lps(const Matrix& generated, const Matrix& real_test, std::size_t context_len, std::size_t pred_len,
           double ridge_lambda) {
  const auto c = static_cast<Eigen::Index>(context_len), p = static_cast<Eigen::Index>(pred_len);
  if (context_len == 0 || pred_len == 0) throw Error("lps: context_len and pred_len must be positive");
  if (generated.cols() < c + p || real_test.cols() < c + p)
    throw Error("lps: sequences shorter than context_len + pred_len");
  const Matrix w = ridge_fit(generated.leftCols(c), generated.middleCols(c, p), ridge_lambda);
  const Matrix pred = real_test.leftCols(c) * w;
  const Matrix truth = real_test.middleCols(c, p);
  const Vector y = truth.transpose().reshaped();
  const Matrix yhat = pred.transpose().reshaped().transpose();
  return crps_quantile(yhat, y);
}

}  // namespace gslice::metrics

#include "gslice/scan.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

namespace gslice::scan {

namespace {

// Runs fn(chunk) for every chunk index on up to `workers` threads.
template <class Fn>
void parallel_chunks(std::size_t n_chunks, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n_chunks));
  if (workers == 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) fn(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t c = next++; c < n_chunks; c = next++) {
        try {
          fn(c);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// Inclusive scan out[k] = x[k] o out[k-1] with `combine(later, earlier)`.
template <class T, class Combine>
std::vector<T> chunked_scan(std::span<const T> xs, const ScanOptions& opts, Combine combine) {
  const std::size_t n = xs.size();
  const std::size_t chunk = resolve_chunk_size(n, opts);
  const std::size_t n_chunks = (n + chunk - 1) / chunk;
  std::vector<T> out(xs.begin(), xs.end());

  parallel_chunks(n_chunks, opts.workers, [&](std::size_t c) {
    const std::size_t lo = c * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    for (std::size_t k = lo + 1; k < hi; ++k) out[k] = combine(xs[k], out[k - 1]);
  });

  // carry[c] is the product of everything before chunk c.
  std::vector<T> carry;
  carry.reserve(n_chunks);
  for (std::size_t c = 1; c < n_chunks; ++c) {
    const T& total = out[std::min(n, c * chunk) - 1];
    carry.push_back(c == 1 ? total : combine(total, carry.back()));
  }

  parallel_chunks(n_chunks, opts.workers, [&](std::size_t c) {
    if (c == 0) return;
    const std::size_t lo = c * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    const T& pre = carry[c - 1];
    for (std::size_t k = lo; k < hi; ++k) out[k] = combine(out[k], pre);
  });
  return out;
}

}  // namespace

std::size_t resolve_chunk_size(std::size_t length, const ScanOptions& opts) {
  if (opts.chunk_size > 0) return opts.chunk_size;
  return std::max<std::size_t>(1, (length + kDefaultChunks - 1) / kDefaultChunks);
}

AffineStep combine_affine(const AffineStep& later, const AffineStep& earlier) {
  return {structmat::compose(later.linear, earlier.linear), later.linear.matrix * earlier.offset + later.offset};
}

std::vector<TransitionOperator> prefix_products(std::span<const TransitionOperator> ops, const ScanOptions& opts) {
  if (ops.empty()) throw Error("prefix_products: empty operator sequence");
  for (const auto& op : ops)
    if (!(op.family == ops.front().family)) throw Error("prefix_products: heterogeneous operator families");
  return chunked_scan<TransitionOperator>(
      ops, opts, [](const TransitionOperator& later, const TransitionOperator& earlier) {
        return structmat::compose(later, earlier);
      });
}

std::vector<Vector> prefix_affine(std::span<const AffineStep> steps, const Vector& h0, const ScanOptions& opts) {
  if (steps.empty()) throw Error("prefix_affine: empty step sequence");
  const auto d = steps.front().linear.family.dim();
  if (static_cast<std::size_t>(h0.size()) != d) throw Error("prefix_affine: h0 dimension mismatch");
  for (const auto& s : steps)
    if (!(s.linear.family == steps.front().linear.family) || static_cast<std::size_t>(s.offset.size()) != d)
      throw Error("prefix_affine: step dimensions disagree");
  const auto composite = chunked_scan<AffineStep>(steps, opts, combine_affine);
  std::vector<Vector> h;
  h.reserve(composite.size());
  for (const auto& c : composite) h.push_back(c.linear.matrix * h0 + c.offset);
  return h;
}

}  // namespace gslice::scan

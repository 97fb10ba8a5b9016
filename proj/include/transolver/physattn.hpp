#pragma once

// Physics-Attention for a single head and its multi-head wrapper.
//
// A head soft-assigns N points to M slices (w = softmax(Linear2(x))), pools the
// points into M physical states, runs self-attention over the states, and
// scatters the result back to the points with the same weights. Three
// evaluation orders are provided and are equal up to rounding:
//
//   original : s = (w d⁻¹)ᵀ Linear1(x),          x_out = Linear3(w s')
//   fast     : s = Linear1((wᵀx) d⁻¹),           x_out = w Linear3(s')
//   tiled    : fast order, with (wᵀx, d) accumulated tile by tile so that no
//              more than tile_size×M slice weights are ever resident.
//
// The fast order normalizes before Linear1, so it agrees with the original
// even when Linear1 has a bias. Linear3's bias passes through w because every
// row of w sums to one.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "transolver/counters.hpp"
#include "transolver/error.hpp"
#include "transolver/linalg.hpp"

namespace transolver {

enum class AttnMode { original, fast, tiled };

inline const char* to_string(AttnMode m) {
  switch (m) {
    case AttnMode::original: return "original";
    case AttnMode::fast: return "fast";
    case AttnMode::tiled: return "tiled";
  }
  return "?";
}

inline AttnMode parse_attn_mode(const std::string& s) {
  if (s == "original") return AttnMode::original;
  if (s == "fast") return AttnMode::fast;
  if (s == "tiled") return AttnMode::tiled;
  throw ShapeError("unknown attention mode '" + s + "'");
}

// Learnable weights of one head. Linear maps are y = x W + b with W stored
// (in × out); biases are 1×out rows, or empty when the head is bias-free.
template <class T = double>
struct HeadParams {
  Matrix<T> w1, b1;  // Linear1: C_h -> C_h
  Matrix<T> w2, b2;  // Linear2: C_h -> M (slice logits)
  Matrix<T> w3, b3;  // Linear3: C_h -> C_h
  Matrix<T> wq, wk, wv, wo;  // state self-attention, C_h -> C_h each

  std::size_t channels() const { return w1.rows(); }
  std::size_t slices() const { return w2.cols(); }
  bool has_bias() const { return !b1.empty(); }

  static HeadParams init(std::size_t channels, std::size_t slices, Rng& rng, bool bias = true) {
    auto layer = [&](std::size_t in, std::size_t out, Matrix<T>& w, Matrix<T>* b) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      w = rng.uniform_matrix<T>(in, out, -bound, bound);
      if (b) *b = rng.uniform_matrix<T>(1, out, -bound, bound);
    };
    HeadParams p;
    layer(channels, channels, p.w1, bias ? &p.b1 : nullptr);
    layer(channels, slices, p.w2, bias ? &p.b2 : nullptr);
    layer(channels, channels, p.w3, bias ? &p.b3 : nullptr);
    layer(channels, channels, p.wq, nullptr);
    layer(channels, channels, p.wk, nullptr);
    layer(channels, channels, p.wv, nullptr);
    layer(channels, channels, p.wo, nullptr);
    return p;
  }

  // Visits every tensor with a stable name; empty biases are skipped.
  template <class F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

  void validate() const {
    const std::size_t c = channels(), m = slices();
    auto need = [&](const Matrix<T>& t, std::size_t r, std::size_t k, const char* name) {
      if (t.rows() != r || t.cols() != k)
        throw ShapeError(std::string("HeadParams.") + name + " has shape " + t.shape_str() +
                         ", expected " + std::to_string(r) + "x" + std::to_string(k));
    };
    need(w2, c, m, "w2");
    need(w3, c, c, "w3");
    need(wq, c, c, "wq");
    need(wk, c, c, "wk");
    need(wv, c, c, "wv");
    need(wo, c, c, "wo");
    if (has_bias()) {
      need(b1, 1, c, "b1");
      need(b2, 1, m, "b2");
      need(b3, 1, c, "b3");
    }
  }

 private:
  template <class Self, class F>
  static void visit(Self& p, F& f) {
    f("w1", p.w1);
    if (!p.b1.empty()) f("b1", p.b1);
    f("w2", p.w2);
    if (!p.b2.empty()) f("b2", p.b2);
    f("w3", p.w3);
    if (!p.b3.empty()) f("b3", p.b3);
    f("wq", p.wq);
    f("wk", p.wk);
    f("wv", p.wv);
    f("wo", p.wo);
  }
};

// N×M row-stochastic assignment of points to slices.
template <class T = double>
struct SliceWeights {
  Matrix<T> values;
};

// M×C_h matrix of slice-level states.
template <class T = double>
struct PhysicalStates {
  Matrix<T> values;
};

// Running (s_raw, d) pair: s_raw = Σ_t w⁽ᵗ⁾ᵀ x⁽ᵗ⁾ and d = Σ_t colsum(w⁽ᵗ⁾).
template <class T = double>
struct SliceAccumulator {
  Matrix<T> s_raw;
  std::vector<T> d;
  std::size_t tiles_seen = 0;

  SliceAccumulator() = default;
  SliceAccumulator(std::size_t slices, std::size_t channels)
      : s_raw(slices, channels), d(slices, T(0)) {}

  void add(const Matrix<T>& w_tile, const Matrix<T>& x_tile) {
    matmul_tn_acc(w_tile, x_tile, s_raw);
    for (std::size_t i = 0; i < w_tile.rows(); ++i)
      for (std::size_t j = 0; j < w_tile.cols(); ++j) d[j] += w_tile(i, j);
    ++tiles_seen;
  }

  void merge(const SliceAccumulator& o) {
    s_raw += o.s_raw;
    for (std::size_t j = 0; j < d.size(); ++j) d[j] += o.d[j];
    tiles_seen += o.tiles_seen;
  }

  // s_raw d⁻¹ (each slice row divided by its mass).
  Matrix<T> normalized() const {
    Matrix<T> u = s_raw;
    for (std::size_t j = 0; j < d.size(); ++j) {
      if (!(d[j] >= T(1e-30)))
        throw DegenerateError("degenerate slice " + std::to_string(j) + ": mass " +
                              std::to_string(static_cast<double>(d[j])));
      const T inv = T(1) / d[j];
      for (auto& v : u.row(j)) v *= inv;
    }
    return u;
  }
};

namespace detail {
template <class T>
void require_head_input(const Matrix<T>& x, const HeadParams<T>& p) {
  if (x.cols() != p.channels())
    throw ShapeError("head input has " + std::to_string(x.cols()) + " channels, head expects " +
                     std::to_string(p.channels()));
}
}  // namespace detail

// softmax(Linear2(x)) for the given rows.
template <class T>
Matrix<T> slice_weights(const Matrix<T>& x, const HeadParams<T>& p) {
  detail::require_head_input(x, p);
  Matrix<T> w = softmax_rows(linear(x, p.w2, p.b2));
  if (auto* c = counters()) c->note_weight_buffer(w.size());
  return w;
}

template <class T>
struct SliceResult {
  PhysicalStates<T> states;
  SliceWeights<T> weights;
};

template <class T>
SliceResult<T> slice_original(const Matrix<T>& x, const HeadParams<T>& p) {
  if (x.rows() == 0) throw ShapeError("slice_original: empty input");
  Matrix<T> x_proj = linear(x, p.w1, p.b1);
  Matrix<T> w = slice_weights(x, p);
  SliceAccumulator<T> acc(p.slices(), p.channels());
  acc.add(w, x_proj);
  return {{acc.normalized()}, {std::move(w)}};
}

template <class T>
SliceResult<T> slice_fast(const Matrix<T>& x, const HeadParams<T>& p) {
  if (x.rows() == 0) throw ShapeError("slice_fast: empty input");
  Matrix<T> w = slice_weights(x, p);
  SliceAccumulator<T> acc(p.slices(), p.channels());
  acc.add(w, x);
  return {{linear(acc.normalized(), p.w1, p.b1)}, {std::move(w)}};
}

template <class T>
Matrix<T> deslice_original(const PhysicalStates<T>& s_prime, const SliceWeights<T>& w,
                           const HeadParams<T>& p) {
  return linear(matmul(w.values, s_prime.values), p.w3, p.b3);
}

template <class T>
Matrix<T> deslice_fast(const PhysicalStates<T>& s_prime, const SliceWeights<T>& w,
                       const HeadParams<T>& p) {
  return matmul(w.values, linear(s_prime.values, p.w3, p.b3));
}

// Intermediates of the state self-attention, retained for the backward pass.
template <class T>
struct AttentionTrace {
  Matrix<T> q, k, v, probs, mixed;
};

// softmax(Q Kᵀ / sqrt(C_h)) V Wo over the M state tokens.
template <class T>
PhysicalStates<T> states_attention(const PhysicalStates<T>& s, const HeadParams<T>& p,
                                   AttentionTrace<T>* trace = nullptr) {
  if (s.values.rows() == 0) throw ShapeError("states_attention: no states");
  Matrix<T> q = matmul(s.values, p.wq);
  Matrix<T> k = matmul(s.values, p.wk);
  Matrix<T> v = matmul(s.values, p.wv);
  Matrix<T> scores = matmul_nt(q, k);
  scores *= T(1) / std::sqrt(static_cast<T>(p.channels()));
  Matrix<T> probs = softmax_rows(scores);
  Matrix<T> mixed = matmul(probs, v);
  PhysicalStates<T> out{matmul(mixed, p.wo)};
  if (trace) *trace = {std::move(q), std::move(k), std::move(v), std::move(probs), std::move(mixed)};
  return out;
}

// Linear3(Attention(s)): the post-projection states that get scattered to points.
template <class T>
Matrix<T> project_states(const PhysicalStates<T>& s, const HeadParams<T>& p) {
  return linear(states_attention(s, p).values, p.w3, p.b3);
}

template <class T>
Matrix<T> physattn_original(const Matrix<T>& x, const HeadParams<T>& p) {
  auto [s, w] = slice_original(x, p);
  return deslice_original(states_attention(s, p), w, p);
}

template <class T>
Matrix<T> physattn_fast(const Matrix<T>& x, const HeadParams<T>& p) {
  auto [s, w] = slice_fast(x, p);
  return deslice_fast(states_attention(s, p), w, p);
}

// Half-open row ranges of at most `size` rows covering [0, n).
struct RowRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const RowRange&) const = default;
};

inline std::vector<RowRange> partition_rows(std::size_t n, std::size_t size) {
  if (size == 0) throw ShapeError("partition size must be >= 1");
  std::vector<RowRange> out;
  out.reserve((n + size - 1) / size);
  for (std::size_t b = 0; b < n; b += size) out.push_back({b, std::min(n, b + size)});
  return out;
}

struct TileOptions {
  std::size_t tile_size = 0;  // 0 means one tile
  bool parallel = false;
  std::size_t threads = 0;    // 0: hardware concurrency
};

namespace detail {
inline std::size_t worker_count(const TileOptions& opt, std::size_t work_items) {
  std::size_t t = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(t, work_items));
}

// Runs fn(group_index, first_item, last_item) over contiguous item groups.
template <class F>
void run_groups(std::size_t items, std::size_t groups, F&& fn) {
  std::vector<std::jthread> pool;
  const std::size_t per = (items + groups - 1) / groups;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t b = g * per, e = std::min(items, b + per);
    if (b >= e) break;
    pool.emplace_back([&fn, g, b, e] { fn(g, b, e); });
  }
}
}  // namespace detail

// Accumulates (s_raw, d) over tiles without keeping any tile's weights.
// In parallel mode each worker sums a contiguous run of tiles and the partial
// sums are merged in worker order; the result matches the sequential sum up
// to reassociation (well inside 1e-8 relative).
template <class T>
SliceAccumulator<T> accumulate_tiles(const Matrix<T>& x, const HeadParams<T>& p,
                                     const std::vector<RowRange>& tiles, const TileOptions& opt) {
  SliceAccumulator<T> acc(p.slices(), p.channels());
  if (!opt.parallel || tiles.size() < 2) {
    for (const auto& t : tiles) {
      const Matrix<T> xt = x.rows_range(t.begin, t.end);
      acc.add(slice_weights(xt, p), xt);
    }
    return acc;
  }
  const std::size_t groups = detail::worker_count(opt, tiles.size());
  std::vector<SliceAccumulator<T>> partial(groups, SliceAccumulator<T>(p.slices(), p.channels()));
  detail::run_groups(tiles.size(), groups, [&](std::size_t g, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const Matrix<T> xt = x.rows_range(tiles[i].begin, tiles[i].end);
      partial[g].add(slice_weights(xt, p), xt);
    }
  });
  for (const auto& part : partial) acc.merge(part);
  return acc;
}

// Tiled fast-order Physics-Attention for one head.
//
// First sweep: per tile, w⁽ᵗ⁾ = softmax(Linear2(x⁽ᵗ⁾)) is folded into (s_raw, d)
// and dropped. Then s = Linear1(s_raw d⁻¹) and s'_out = Linear3(Attention(s)).
// Second sweep: per tile, w⁽ᵗ⁾ is recomputed and x_out⁽ᵗ⁾ = w⁽ᵗ⁾ s'_out. With a
// single tile the weights from the first sweep are reused, which makes the
// degenerate tiling bit-identical to physattn_fast.
template <class T>
Matrix<T> physattn_tiled(const Matrix<T>& x, const HeadParams<T>& p, const TileOptions& opt,
                         SliceAccumulator<T>* accumulator_out = nullptr) {
  detail::require_head_input(x, p);
  const std::size_t n = x.rows();
  if (n == 0) throw ShapeError("physattn_tiled: empty input");
  const std::size_t tile = opt.tile_size == 0 ? n : opt.tile_size;
  if (tile > n)
    throw ShapeError("tile_size " + std::to_string(tile) + " exceeds N=" + std::to_string(n));

  if (tile == n) {
    Matrix<T> w = slice_weights(x, p);
    SliceAccumulator<T> acc(p.slices(), p.channels());
    acc.add(w, x);
    const Matrix<T> s_out = project_states(PhysicalStates<T>{linear(acc.normalized(), p.w1, p.b1)}, p);
    if (accumulator_out) *accumulator_out = acc;
    return matmul(w, s_out);
  }

  const auto tiles = partition_rows(n, tile);
  SliceAccumulator<T> acc = accumulate_tiles(x, p, tiles, opt);
  const Matrix<T> s_out = project_states(PhysicalStates<T>{linear(acc.normalized(), p.w1, p.b1)}, p);

  Matrix<T> out(n, p.channels());
  auto emit = [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const Matrix<T> xt = x.rows_range(tiles[i].begin, tiles[i].end);
      out.set_rows(tiles[i].begin, matmul(slice_weights(xt, p), s_out));
    }
  };
  if (opt.parallel) {
    detail::run_groups(tiles.size(), detail::worker_count(opt, tiles.size()),
                       [&](std::size_t, std::size_t b, std::size_t e) { emit(b, e); });
  } else {
    emit(0, tiles.size());
  }
  if (accumulator_out) *accumulator_out = std::move(acc);
  return out;
}

template <class T>
Matrix<T> physattn_tiled(const Matrix<T>& x, const HeadParams<T>& p, std::size_t tile_size) {
  if (tile_size == 0) throw ShapeError("tile_size must be >= 1");
  return physattn_tiled(x, p, TileOptions{tile_size});
}

template <class T>
Matrix<T> physattn_head(const Matrix<T>& x, const HeadParams<T>& p, AttnMode mode,
                        const TileOptions& opt = {}) {
  switch (mode) {
    case AttnMode::original: return physattn_original(x, p);
    case AttnMode::fast: return physattn_fast(x, p);
    case AttnMode::tiled: return physattn_tiled(x, p, opt);
  }
  throw ShapeError("unknown attention mode");
}

// Splits the C channels into H contiguous blocks, runs each head on its block
// and writes the head outputs back into the same channel positions.
template <class T>
Matrix<T> multihead_physattn(const Matrix<T>& x, std::span<const HeadParams<T>> heads,
                             AttnMode mode, const TileOptions& opt = {}) {
  const std::size_t h = heads.size();
  if (h == 0) throw ShapeError("multihead_physattn: no heads");
  if (x.cols() % h != 0)
    throw ShapeError("channels " + std::to_string(x.cols()) + " not divisible by heads " +
                     std::to_string(h));
  const std::size_t ch = x.cols() / h;
  Matrix<T> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < h; ++i) {
    if (heads[i].channels() != ch)
      throw ShapeError("head " + std::to_string(i) + " expects " +
                       std::to_string(heads[i].channels()) + " channels, block has " +
                       std::to_string(ch));
    out.set_col_block(i * ch, physattn_head(x.col_block(i * ch, ch), heads[i], mode, opt));
  }
  return out;
}

}  // namespace transolver

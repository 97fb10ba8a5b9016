#pragma once

// Analytical time/space model of one Physics-Attention layer.
//
// Terms are polynomials in the symbols N (points), M (slices), C (channels
// per head), T (tiles), N_t (points per tile), H (heads), L (layers). Every
// matmul is counted in multiply-adds with one multiply-add = 2 FLOPs; softmax
// costs 4 FLOPs per element. The multiply-add and softmax-element totals are
// exactly what OpCounters records when the matching kernel runs, so the model
// can be checked against real executions.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "transolver/error.hpp"

namespace transolver {

enum class Sym : std::size_t { N, M, C, T, Nt, H, L };
inline constexpr std::size_t kSymCount = 7;
inline constexpr std::array<const char*, kSymCount> kSymNames{"N", "M", "C", "T", "N_t", "H", "L"};

struct Monomial {
  double coeff = 1.0;
  std::array<int, kSymCount> exps{};

  bool mentions(Sym s) const { return exps[static_cast<std::size_t>(s)] > 0; }
};

// Values for each symbol.
using SymValues = std::array<double, kSymCount>;

class Polynomial {
 public:
  Polynomial() = default;
  Polynomial(std::initializer_list<Monomial> terms) : terms_(terms) {}

  const std::vector<Monomial>& terms() const { return terms_; }

  double evaluate(const SymValues& v) const {
    double total = 0.0;
    for (const auto& t : terms_) {
      double x = t.coeff;
      for (std::size_t s = 0; s < kSymCount; ++s)
        for (int e = 0; e < t.exps[s]; ++e) x *= v[s];
      total += x;
    }
    return total;
  }

  bool mentions(Sym s) const {
    for (const auto& t : terms_)
      if (t.mentions(s)) return true;
    return false;
  }

  bool n_dependent() const { return mentions(Sym::N) || mentions(Sym::Nt); }

  Polynomial scaled(double k) const {
    Polynomial p = *this;
    for (auto& t : p.terms_) t.coeff *= k;
    return p;
  }

  Polynomial operator+(const Polynomial& o) const {
    Polynomial p = *this;
    p.terms_.insert(p.terms_.end(), o.terms_.begin(), o.terms_.end());
    return p;
  }

  std::string to_string() const {
    if (terms_.empty()) return "0";
    std::string out;
    for (const auto& t : terms_) {
      if (!out.empty()) out += " + ";
      std::string mono;
      if (t.coeff != 1.0) {
        const double r = std::round(t.coeff);
        mono = r == t.coeff ? std::to_string(static_cast<long long>(r)) : std::to_string(t.coeff);
      }
      for (std::size_t s = 0; s < kSymCount; ++s) {
        if (t.exps[s] == 0) continue;
        if (!mono.empty()) mono += "*";
        mono += kSymNames[s];
        if (t.exps[s] > 1) mono += "^" + std::to_string(t.exps[s]);
      }
      out += mono.empty() ? "1" : mono;
    }
    return out;
  }

 private:
  std::vector<Monomial> terms_;
};

// Builds H·L·coeff·Π sym^exp.
inline Monomial per_head(double coeff, std::initializer_list<std::pair<Sym, int>> factors) {
  Monomial m;
  m.coeff = coeff;
  m.exps[static_cast<std::size_t>(Sym::H)] = 1;
  m.exps[static_cast<std::size_t>(Sym::L)] = 1;
  for (auto [s, e] : factors) m.exps[static_cast<std::size_t>(s)] += e;
  return m;
}

enum class CostVariant { original, optimized };

inline const char* to_string(CostVariant v) { return v == CostVariant::original ? "original" : "optimized"; }

struct CostTerm {
  std::string op;
  Polynomial madds;          // multiply-adds
  Polynomial softmax_elems;  // elements through softmax
  Polynomial space;          // elements held by the operation's output
  bool recompute = false;    // checkpoint recomputation of an earlier row

  Polynomial time_flops() const { return madds.scaled(2.0) + softmax_elems.scaled(4.0); }
  bool n_dependent() const { return time_flops().n_dependent(); }
  bool space_n_dependent() const { return space.n_dependent(); }
};

// Numeric configuration; C is the total width, split evenly over H heads.
struct CostDims {
  double n = 0, m = 0, c = 0, h = 1, l = 1;
  double tile_size = 0;  // 0 or >= n: untiled

  SymValues values() const {
    if (!(n > 0 && m > 0 && c > 0 && h > 0 && l > 0)) throw ShapeError("cost model: dimensions must be positive");
    const double nt = (tile_size > 0 && tile_size < n) ? tile_size : n;
    return {n, m, c / h, std::ceil(n / nt), nt, h, l};
  }
  bool tiled() const { return tile_size > 0 && tile_size < n; }
};

struct CostReport {
  CostVariant variant = CostVariant::original;
  std::vector<CostTerm> terms;
  double time_flops = 0.0;
  double madds = 0.0;
  double softmax_elems = 0.0;
  double space_elems = 0.0;
  std::size_t n_related_time = 0;
  std::size_t n_related_space = 0;
};

// Per-operation terms of the original or optimized evaluation order. With a
// tile size below N the optimized report uses N_t for the slice-weight buffer
// and adds the second-sweep recomputation of Softmax(Linear2(x)).
inline CostReport cost_model(CostVariant variant, const CostDims& dims) {
  using enum Sym;
  const SymValues v = dims.values();
  const Monomial attn_proj = per_head(4, {{M, 1}, {C, 2}});
  const Monomial attn_mix = per_head(2, {{M, 2}, {C, 1}});
  const Polynomial attention_space{per_head(1, {{M, 2}}), per_head(1, {{M, 1}, {C, 1}})};

  CostReport r;
  r.variant = variant;
  if (variant == CostVariant::original) {
    r.terms = {
        {"Linear1(x)", {per_head(1, {{N, 1}, {C, 2}})}, {}, {per_head(1, {{N, 1}, {C, 1}})}},
        {"Softmax(Linear2(x))", {per_head(1, {{N, 1}, {C, 1}, {M, 1}})}, {per_head(1, {{N, 1}, {M, 1}})},
         {per_head(1, {{N, 1}, {M, 1}})}},
        {"(w d^-1)^T x_proj", {per_head(1, {{N, 1}, {M, 1}, {C, 1}})}, {}, {per_head(1, {{M, 1}, {C, 1}})}},
        {"Attention(s)", {attn_proj, attn_mix}, {per_head(1, {{M, 2}})}, attention_space},
        {"w s'", {per_head(1, {{N, 1}, {M, 1}, {C, 1}})}, {}, {per_head(1, {{N, 1}, {C, 1}})}},
        {"Linear3(w s')", {per_head(1, {{N, 1}, {C, 2}})}, {}, {per_head(1, {{N, 1}, {C, 1}})}},
    };
  } else {
    const Sym wrows = dims.tiled() ? Nt : N;
    r.terms = {
        {"Softmax(Linear2(x))", {per_head(1, {{N, 1}, {C, 1}, {M, 1}})}, {per_head(1, {{N, 1}, {M, 1}})},
         {per_head(1, {{wrows, 1}, {M, 1}})}},
        {"w^T x", {per_head(1, {{N, 1}, {M, 1}, {C, 1}})}, {}, {per_head(1, {{M, 1}, {C, 1}})}},
        {"Linear1(s_raw) d^-1", {per_head(1, {{M, 1}, {C, 2}})}, {}, {per_head(1, {{M, 1}, {C, 1}})}},
        {"Attention(s)", {attn_proj, attn_mix}, {per_head(1, {{M, 2}})}, attention_space},
        {"Linear3(s')", {per_head(1, {{M, 1}, {C, 2}})}, {}, {per_head(1, {{M, 1}, {C, 1}})}},
        {"w s'_out", {per_head(1, {{N, 1}, {M, 1}, {C, 1}})}, {}, {per_head(1, {{N, 1}, {C, 1}})}},
    };
    if (dims.tiled()) {
      CostTerm re{"Softmax(Linear2(x)) [tile recompute]", {per_head(1, {{N, 1}, {C, 1}, {M, 1}})},
                  {per_head(1, {{N, 1}, {M, 1}})}, {per_head(1, {{Nt, 1}, {M, 1}})}};
      re.recompute = true;
      r.terms.push_back(re);
    }
  }
  for (const auto& t : r.terms) {
    r.madds += t.madds.evaluate(v);
    r.softmax_elems += t.softmax_elems.evaluate(v);
    r.time_flops += t.time_flops().evaluate(v);
    r.space_elems += t.space.evaluate(v);
    if (t.recompute) continue;
    r.n_related_time += t.n_dependent() ? 1 : 0;
    r.n_related_space += t.space_n_dependent() ? 1 : 0;
  }
  return r;
}

enum class Scaling { none, n, n_tile };

inline const char* to_string(Scaling s) {
  switch (s) {
    case Scaling::none: return "none";
    case Scaling::n: return "N";
    case Scaling::n_tile: return "N_t";
  }
  return "?";
}

struct BufferEstimate {
  std::string name;
  double elems = 0.0;   // all heads of one layer
  double bytes = 0.0;
  Scaling scaling = Scaling::none;
  bool retained = false;  // kept for the backward pass when training
};

struct MemoryReport {
  std::vector<BufferEstimate> buffers;
  double peak_bytes = 0.0;
  double weight_buffer_bytes = 0.0;  // largest live slice-weight buffer, all heads
  bool retains_nm_buffer = false;
};

struct MemoryDims {
  CostDims dims;
  double element_bytes = 8.0;
};

// Activation memory of one Physics-Attention layer. In inference every buffer
// of the layer is counted as live at once. In training the retained buffers
// are held for all L layers and the layer's transient buffers come on top.
// The tiled optimized order checkpoints each tile, so its slice weights are
// transient and sized N_t × M.
inline MemoryReport memory_model(CostVariant variant, const MemoryDims& md, bool training) {
  const SymValues v = md.dims.values();
  const double n = v[0], m = v[1], c = v[2], nt = v[4], h = v[5], layers = v[6];
  const bool tiled = variant == CostVariant::optimized && md.dims.tiled();
  MemoryReport rep;
  auto add = [&](std::string name, double per_head_elems, Scaling s, bool retained) {
    const double e = per_head_elems * h;
    rep.buffers.push_back({std::move(name), e, e * md.element_bytes, s, retained});
  };
  add("x (input)", n * c, Scaling::n, false);
  if (variant == CostVariant::original) {
    add("x_proj", n * c, Scaling::n, true);
    add("w", n * m, Scaling::n, true);
    add("s", m * c, Scaling::none, false);
    add("attention", m * m + m * c, Scaling::none, false);
    add("w s'", n * c, Scaling::n, true);
  } else {
    if (tiled)
      add("w (tile)", nt * m, Scaling::n_tile, false);
    else
      add("w", n * m, Scaling::n, true);
    add("s_raw", m * c, Scaling::none, false);
    add("s", m * c, Scaling::none, false);
    add("attention", m * m + m * c, Scaling::none, false);
    add("s'_out", m * c, Scaling::none, false);
  }
  add("x_out", n * c, Scaling::n, false);

  double retained = 0.0, all = 0.0;
  for (const auto& b : rep.buffers) {
    all += b.bytes;
    if (b.retained) retained += b.bytes;
    if (b.name.rfind("w", 0) == 0 && b.name != "w s'")
      rep.weight_buffer_bytes = std::max(rep.weight_buffer_bytes, b.bytes);
    if (b.retained && b.name == "w") rep.retains_nm_buffer = true;
  }
  rep.peak_bytes = training ? retained * layers + (all - retained) : all;
  return rep;
}

}  // namespace transolver

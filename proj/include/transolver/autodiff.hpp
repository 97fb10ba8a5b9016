#pragma once

// Reverse-mode differentiation of the fixed model graph.
//
// Each sublayer records a small tape on the way forward and replays it in
// reverse. Physics-Attention heads record what their evaluation order needs:
//
//   original : x_proj, w and w s' are kept (three N-sized intermediates)
//   fast     : w is kept; everything else is slice-sized (M × C_h)
//   tiled    : only (s_raw, d) and the slice-level intermediates are kept;
//              the backward pass recomputes w⁽ᵗ⁾ tile by tile, in two sweeps
//              (first to gather ∂s'_out, then to push gradients into the
//              points), so no N×M buffer survives the forward pass.

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "transolver/counters.hpp"
#include "transolver/error.hpp"
#include "transolver/linalg.hpp"
#include "transolver/model.hpp"
#include "transolver/physattn.hpp"

namespace transolver {

// One gradient buffer per learnable tensor, shaped like ModelParams.
using GradStore = ModelParams;

namespace detail {

template <class T>
void accumulate_bias(Matrix<T>& gb, const Matrix<T>& g) {
  if (gb.empty()) return;
  gb += column_sums(g);
}

template <class T>
Matrix<T> gelu_backward(const Matrix<T>& pre, const Matrix<T>& g) {
  Matrix<T> out(g.rows(), g.cols());
  for (std::size_t i = 0; i < g.size(); ++i) out.data()[i] = g.data()[i] * gelu_grad(pre.data()[i]);
  return out;
}

}  // namespace detail

// Returns ∂L/∂s and accumulates into the attention weight gradients.
template <class T>
Matrix<T> states_attention_backward(const Matrix<T>& s, const AttentionTrace<T>& tr,
                                    const HeadParams<T>& p, const Matrix<T>& g_out, HeadParams<T>& g) {
  matmul_tn_acc(tr.mixed, g_out, g.wo);
  const Matrix<T> g_mixed = matmul_nt(g_out, p.wo);
  const Matrix<T> g_probs = matmul_nt(g_mixed, tr.v);
  const Matrix<T> g_v = matmul_tn(tr.probs, g_mixed);
  Matrix<T> g_scores = softmax_rows_backward(tr.probs, g_probs);
  g_scores *= T(1) / std::sqrt(static_cast<T>(p.channels()));
  const Matrix<T> g_q = matmul(g_scores, tr.k);
  const Matrix<T> g_k = matmul_tn(g_scores, tr.q);
  matmul_tn_acc(s, g_q, g.wq);
  matmul_tn_acc(s, g_k, g.wk);
  matmul_tn_acc(s, g_v, g.wv);
  Matrix<T> g_s = matmul_nt(g_q, p.wq);
  g_s += matmul_nt(g_k, p.wk);
  g_s += matmul_nt(g_v, p.wv);
  return g_s;
}

template <class T>
struct HeadTape {
  AttnMode mode = AttnMode::fast;
  std::size_t tile = 0;        // rows per tile (tiled mode)
  bool weights_retained = false;
  Matrix<T> x;                 // head input
  Matrix<T> w;                 // slice weights (original / fast only)
  Matrix<T> x_proj;            // original: Linear1(x)
  Matrix<T> x_mixed;           // original: w s'
  SliceAccumulator<T> acc;     // (wᵀx, d) or (wᵀx_proj, d)
  Matrix<T> u;                 // fast/tiled: s_raw d⁻¹
  Matrix<T> s;                 // states entering attention
  AttentionTrace<T> attn;
  Matrix<T> a;                 // attention output s'
  Matrix<T> s_out;             // fast/tiled: Linear3(s')

  HeadTape() = default;
  HeadTape(const HeadTape&) = delete;
  HeadTape& operator=(const HeadTape&) = delete;
  HeadTape(HeadTape&& o) noexcept { *this = std::move(o); }
  HeadTape& operator=(HeadTape&& o) noexcept {
    release();
    mode = o.mode;
    tile = o.tile;
    weights_retained = std::exchange(o.weights_retained, false);
    x = std::move(o.x);
    w = std::move(o.w);
    x_proj = std::move(o.x_proj);
    x_mixed = std::move(o.x_mixed);
    acc = std::move(o.acc);
    u = std::move(o.u);
    s = std::move(o.s);
    attn = std::move(o.attn);
    a = std::move(o.a);
    s_out = std::move(o.s_out);
    return *this;
  }
  ~HeadTape() { release(); }

  void retain_weights() {
    weights_retained = true;
    if (auto* c = counters()) c->retain_weights(w.size());
  }
  void release() {
    if (!weights_retained) return;
    weights_retained = false;
    if (auto* c = counters()) c->release_weights(w.size());
  }
};

template <class T>
Matrix<T> head_forward_train(const Matrix<T>& x, const HeadParams<T>& p, AttnMode mode,
                             std::size_t tile_size, HeadTape<T>& tape) {
  const std::size_t n = x.rows();
  if (n == 0) throw ShapeError("head forward: empty input");
  tape.mode = mode;
  tape.x = x;
  if (mode == AttnMode::original) {
    tape.x_proj = linear(x, p.w1, p.b1);
    tape.w = slice_weights(x, p);
    tape.retain_weights();
    tape.acc = SliceAccumulator<T>(p.slices(), p.channels());
    tape.acc.add(tape.w, tape.x_proj);
    tape.s = tape.acc.normalized();
    tape.a = states_attention(PhysicalStates<T>{tape.s}, p, &tape.attn).values;
    tape.x_mixed = matmul(tape.w, tape.a);
    return linear(tape.x_mixed, p.w3, p.b3);
  }

  const std::size_t tile = (mode == AttnMode::tiled && tile_size != 0) ? tile_size : n;
  if (tile > n) throw ShapeError("tile_size " + std::to_string(tile) + " exceeds N=" + std::to_string(n));
  tape.tile = tile;
  tape.acc = SliceAccumulator<T>(p.slices(), p.channels());
  if (mode == AttnMode::fast) {
    tape.w = slice_weights(x, p);
    tape.retain_weights();
    tape.acc.add(tape.w, x);
  } else {
    for (const auto& t : partition_rows(n, tile)) {
      const Matrix<T> xt = x.rows_range(t.begin, t.end);
      tape.acc.add(slice_weights(xt, p), xt);
    }
  }
  tape.u = tape.acc.normalized();
  tape.s = linear(tape.u, p.w1, p.b1);
  tape.a = states_attention(PhysicalStates<T>{tape.s}, p, &tape.attn).values;
  tape.s_out = linear(tape.a, p.w3, p.b3);
  if (mode == AttnMode::fast) return matmul(tape.w, tape.s_out);
  Matrix<T> y(n, p.channels());
  for (const auto& t : partition_rows(n, tile)) {
    const Matrix<T> xt = x.rows_range(t.begin, t.end);
    y.set_rows(t.begin, matmul(slice_weights(xt, p), tape.s_out));
  }
  return y;
}

// Returns ∂L/∂x for the head input; accumulates parameter gradients into g.
template <class T>
Matrix<T> head_backward(const HeadTape<T>& tape, const HeadParams<T>& p, const Matrix<T>& gy,
                        HeadParams<T>& g) {
  const Matrix<T>& x = tape.x;
  const std::size_t n = x.rows(), m = p.slices();

  if (tape.mode == AttnMode::original) {
    matmul_tn_acc(tape.x_mixed, gy, g.w3);
    detail::accumulate_bias(g.b3, gy);
    const Matrix<T> g_xm = matmul_nt(gy, p.w3);
    Matrix<T> g_w = matmul_nt(g_xm, tape.a);
    const Matrix<T> g_a = matmul_tn(tape.w, g_xm);
    const Matrix<T> g_s = states_attention_backward(tape.s, tape.attn, p, g_a, g);
    Matrix<T> g_v(m, p.channels());
    std::vector<T> g_d(m, T(0));
    for (std::size_t j = 0; j < m; ++j) {
      const T inv = T(1) / tape.acc.d[j];
      for (std::size_t c = 0; c < p.channels(); ++c) {
        g_v(j, c) = g_s(j, c) * inv;
        g_d[j] -= g_s(j, c) * tape.s(j, c) * inv;
      }
    }
    g_w += matmul_nt(tape.x_proj, g_v);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g_w(i, j) += g_d[j];
    const Matrix<T> g_xp = matmul(tape.w, g_v);
    matmul_tn_acc(x, g_xp, g.w1);
    detail::accumulate_bias(g.b1, g_xp);
    Matrix<T> gx = matmul_nt(g_xp, p.w1);
    const Matrix<T> g_z = softmax_rows_backward(tape.w, g_w);
    matmul_tn_acc(x, g_z, g.w2);
    detail::accumulate_bias(g.b2, g_z);
    gx += matmul_nt(g_z, p.w2);
    return gx;
  }

  // Fast and tiled share one code path; the fast order is a single tile whose
  // weights were kept from the forward pass.
  const bool stored = tape.mode == AttnMode::fast;
  const auto tiles = partition_rows(n, stored ? n : tape.tile);
  // Points at the stored weights, or recomputes the tile's weights into scratch.
  auto weights_for = [&](const Matrix<T>& xt, Matrix<T>& scratch) -> const Matrix<T>& {
    if (stored) return tape.w;
    scratch = slice_weights(xt, p);
    return scratch;
  };

  Matrix<T> g_sout(m, p.channels());
  for (const auto& t : tiles) {
    const Matrix<T> xt = x.rows_range(t.begin, t.end);
    Matrix<T> scratch;
    matmul_tn_acc(weights_for(xt, scratch), gy.rows_range(t.begin, t.end), g_sout);
  }
  matmul_tn_acc(tape.a, g_sout, g.w3);
  detail::accumulate_bias(g.b3, g_sout);
  const Matrix<T> g_a = matmul_nt(g_sout, p.w3);
  const Matrix<T> g_s = states_attention_backward(tape.s, tape.attn, p, g_a, g);
  matmul_tn_acc(tape.u, g_s, g.w1);
  detail::accumulate_bias(g.b1, g_s);
  const Matrix<T> g_u = matmul_nt(g_s, p.w1);
  Matrix<T> g_raw(m, p.channels());
  std::vector<T> g_d(m, T(0));
  for (std::size_t j = 0; j < m; ++j) {
    const T inv = T(1) / tape.acc.d[j];
    for (std::size_t c = 0; c < p.channels(); ++c) {
      g_raw(j, c) = g_u(j, c) * inv;
      g_d[j] -= g_u(j, c) * tape.u(j, c) * inv;
    }
  }

  Matrix<T> gx(n, p.channels());
  for (const auto& t : tiles) {
    const Matrix<T> xt = x.rows_range(t.begin, t.end);
    Matrix<T> scratch;
    const Matrix<T>& wt = weights_for(xt, scratch);
    Matrix<T> g_w = matmul_nt(gy.rows_range(t.begin, t.end), tape.s_out);
    g_w += matmul_nt(xt, g_raw);
    for (std::size_t i = 0; i < g_w.rows(); ++i)
      for (std::size_t j = 0; j < m; ++j) g_w(i, j) += g_d[j];
    Matrix<T> gxt = matmul(wt, g_raw);
    const Matrix<T> g_z = softmax_rows_backward(wt, g_w);
    matmul_tn_acc(xt, g_z, g.w2);
    detail::accumulate_bias(g.b2, g_z);
    gxt += matmul_nt(g_z, p.w2);
    gx.set_rows(t.begin, gxt);
  }
  return gx;
}

struct LayerTape {
  LayerNormCache<double> ln1, ln2;
  Matrix<double> h1, h2;
  std::vector<HeadTape<double>> heads;
  Matrix<double> ffn_pre, ffn_act;
};

struct ModelTape {
  Matrix<double> input, embed_pre, embed_act;
  std::vector<LayerTape> layers;
  Matrix<double> x_final;
};

inline Matrix<double> forward_train(const ModelParams& p, const MeshBatch& mesh, const ModelConfig& cfg,
                                    ModelTape& tape) {
  check_input(cfg, p, mesh);
  if (mesh.size() == 0) throw ShapeError("forward: empty mesh");
  tape.input = embed_input(p, mesh);
  tape.embed_pre = linear(tape.input, p.embed_w1, p.embed_b1);
  tape.embed_act = gelu(tape.embed_pre);
  Matrix<double> x = linear(tape.embed_act, p.embed_w2, p.embed_b2);
  const std::size_t ch = cfg.head_channels();
  const std::size_t tile = cfg.mode == AttnMode::tiled ? cfg.tile_size : 0;
  tape.layers.clear();
  tape.layers.resize(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerParams& lp = p.layers[l];
    LayerTape& lt = tape.layers[l];
    lt.h1 = layer_norm(x, lp.ln1_gain, lp.ln1_shift, kLayerNormEps, &lt.ln1);
    lt.heads.resize(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const Matrix<double> y =
          head_forward_train(lt.h1.col_block(h * ch, ch), lp.heads[h], cfg.mode, tile, lt.heads[h]);
      for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t c = 0; c < ch; ++c) x(i, h * ch + c) += y(i, c);
    }
    lt.h2 = layer_norm(x, lp.ln2_gain, lp.ln2_shift, kLayerNormEps, &lt.ln2);
    lt.ffn_pre = linear(lt.h2, lp.ffn_w1, lp.ffn_b1);
    lt.ffn_act = gelu(lt.ffn_pre);
    x += linear(lt.ffn_act, lp.ffn_w2, lp.ffn_b2);
  }
  tape.x_final = x;
  return linear(x, p.head_w, p.head_b);
}

// Accumulates parameter gradients for upstream gradient gy = ∂L/∂ŷ.
inline void backward_from_output(const ModelParams& p, const ModelConfig& cfg, const ModelTape& tape,
                                 const Matrix<double>& gy, GradStore& g) {
  matmul_tn_acc(tape.x_final, gy, g.head_w);
  detail::accumulate_bias(g.head_b, gy);
  Matrix<double> gx = matmul_nt(gy, p.head_w);
  const std::size_t ch = cfg.head_channels();
  for (std::size_t l = cfg.layers; l-- > 0;) {
    const LayerParams& lp = p.layers[l];
    const LayerTape& lt = tape.layers[l];
    LayerParams& gl = g.layers[l];

    matmul_tn_acc(lt.ffn_act, gx, gl.ffn_w2);
    detail::accumulate_bias(gl.ffn_b2, gx);
    const Matrix<double> g_pre = detail::gelu_backward(lt.ffn_pre, matmul_nt(gx, lp.ffn_w2));
    matmul_tn_acc(lt.h2, g_pre, gl.ffn_w1);
    detail::accumulate_bias(gl.ffn_b1, g_pre);
    gx += layer_norm_backward(lt.ln2, lp.ln2_gain, matmul_nt(g_pre, lp.ffn_w1), gl.ln2_gain, gl.ln2_shift);

    Matrix<double> g_h1(gx.rows(), gx.cols());
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const Matrix<double> g_head =
          head_backward(lt.heads[h], lp.heads[h], gx.col_block(h * ch, ch), gl.heads[h]);
      g_h1.set_col_block(h * ch, g_head);
    }
    gx += layer_norm_backward(lt.ln1, lp.ln1_gain, g_h1, gl.ln1_gain, gl.ln1_shift);
  }
  matmul_tn_acc(tape.embed_act, gx, g.embed_w2);
  detail::accumulate_bias(g.embed_b2, gx);
  const Matrix<double> g_pre = detail::gelu_backward(tape.embed_pre, matmul_nt(gx, p.embed_w2));
  matmul_tn_acc(tape.input, g_pre, g.embed_w1);
  detail::accumulate_bias(g.embed_b1, g_pre);
}

// Relative L2 loss ‖ŷ − y‖ / ‖y‖ and its gradient with respect to ŷ.
// At ŷ = y the loss is not differentiable; the zero subgradient is returned.
inline double rel_l2_loss(const Matrix<double>& pred, const Matrix<double>& target, Matrix<double>* grad) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ShapeError("loss: prediction " + pred.shape_str() + " vs target " + target.shape_str());
  double rr = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = pred.data()[i] - target.data()[i];
    rr += r * r;
    yy += target.data()[i] * target.data()[i];
  }
  if (yy == 0.0) throw DegenerateError("relative L2 loss: target has zero norm");
  const double rn = std::sqrt(rr), yn = std::sqrt(yy);
  if (grad) {
    *grad = Matrix<double>(pred.rows(), pred.cols());
    if (rn > 0.0) {
      const double scale = 1.0 / (rn * yn);
      for (std::size_t i = 0; i < pred.size(); ++i)
        grad->data()[i] = (pred.data()[i] - target.data()[i]) * scale;
    }
  }
  return rn / yn;
}

struct LossAndGrads {
  double loss = 0.0;
  GradStore grads;
};

inline LossAndGrads backward(const ModelParams& p, const MeshBatch& mesh, const Matrix<double>& targets,
                             const ModelConfig& cfg) {
  if (targets.rows() != mesh.size() || targets.cols() != cfg.out_dim)
    throw ShapeError("targets must be " + std::to_string(mesh.size()) + "x" + std::to_string(cfg.out_dim) +
                     ", got " + targets.shape_str());
  ModelTape tape;
  const Matrix<double> pred = forward_train(p, mesh, cfg, tape);
  Matrix<double> gy;
  LossAndGrads out{rel_l2_loss(pred, targets, &gy), p.zeros_like()};
  backward_from_output(p, cfg, tape, gy, out.grads);
  return out;
}

}  // namespace transolver

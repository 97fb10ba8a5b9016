#pragma once

// The full network: point embedding, L pre-norm Physics-Attention blocks with
// feed-forward sublayers, and a pointwise output head.
//
//   x⁰ = Embed(normalize(coords) ‖ features)
//   x  ← x + MultiHeadPhysAttn(LN₁(x))
//   x  ← x + FFN(LN₂(x))
//   y  = Head(x)

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "transolver/error.hpp"
#include "transolver/linalg.hpp"
#include "transolver/mesh.hpp"
#include "transolver/physattn.hpp"

namespace transolver {

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t channels = 32;
  std::size_t slices = 16;
  std::size_t in_dim = 3;
  std::size_t out_dim = 1;
  std::size_t ffn_hidden = 64;
  AttnMode mode = AttnMode::fast;
  std::size_t tile_size = 0;  // 0: one tile
  bool bias = true;           // biases on Linear1/2/3

  std::size_t head_channels() const { return channels / heads; }

  void validate() const {
    if (heads == 0 || channels == 0 || slices == 0 || in_dim == 0 || out_dim == 0 || ffn_hidden == 0)
      throw ShapeError("model config: all counts must be >= 1");
    if (channels % heads != 0)
      throw ShapeError("model config: channels " + std::to_string(channels) +
                       " not divisible by heads " + std::to_string(heads));
  }

  // Architecture identity; the evaluation mode and tiling are excluded.
  std::string canonical() const {
    return "L=" + std::to_string(layers) + ";H=" + std::to_string(heads) + ";C=" +
           std::to_string(channels) + ";M=" + std::to_string(slices) + ";in=" +
           std::to_string(in_dim) + ";out=" + std::to_string(out_dim) + ";ffn=" +
           std::to_string(ffn_hidden) + ";bias=" + (bias ? "1" : "0");
  }
};

// Per-axis min-max scaling of coordinates to [0, 1], fitted once on training data.
struct InputNormalizer {
  Matrix<double> lo;  // 1 × d
  Matrix<double> hi;  // 1 × d

  static InputNormalizer identity(std::size_t dims) {
    return {Matrix<double>(1, dims, 0.0), Matrix<double>(1, dims, 1.0)};
  }

  static InputNormalizer fit(const Matrix<double>& coords) {
    if (coords.rows() == 0) throw ShapeError("normalizer: no points");
    InputNormalizer n{coords.rows_range(0, 1), coords.rows_range(0, 1)};
    for (std::size_t i = 1; i < coords.rows(); ++i)
      for (std::size_t j = 0; j < coords.cols(); ++j) {
        n.lo(0, j) = std::min(n.lo(0, j), coords(i, j));
        n.hi(0, j) = std::max(n.hi(0, j), coords(i, j));
      }
    return n;
  }

  Matrix<double> apply(const Matrix<double>& coords) const {
    if (coords.cols() != lo.cols())
      throw ShapeError("normalizer: expected " + std::to_string(lo.cols()) + " coordinate columns, got " +
                       std::to_string(coords.cols()));
    Matrix<double> out(coords.rows(), coords.cols());
    for (std::size_t j = 0; j < coords.cols(); ++j) {
      const double span = hi(0, j) - lo(0, j);
      const double inv = span > 0.0 ? 1.0 / span : 0.0;
      for (std::size_t i = 0; i < coords.rows(); ++i) out(i, j) = (coords(i, j) - lo(0, j)) * inv;
    }
    return out;
  }
};

struct LayerParams {
  Matrix<double> ln1_gain, ln1_shift;
  std::vector<HeadParams<double>> heads;
  Matrix<double> ln2_gain, ln2_shift;
  Matrix<double> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct ModelParams {
  Matrix<double> embed_w1, embed_b1, embed_w2, embed_b2;
  std::vector<LayerParams> layers;
  Matrix<double> head_w, head_b;
  InputNormalizer normalizer;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed, std::size_t coord_dims = 3) {
    cfg.validate();
    if (coord_dims > cfg.in_dim) throw ShapeError("coordinate dims exceed model in_dim");
    Rng rng(seed);
    auto dense = [&](std::size_t in, std::size_t out, Matrix<double>& w, Matrix<double>& b) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      w = rng.uniform_matrix(in, out, -bound, bound);
      b = rng.uniform_matrix(1, out, -bound, bound);
    };
    ModelParams p;
    dense(cfg.in_dim, cfg.channels, p.embed_w1, p.embed_b1);
    dense(cfg.channels, cfg.channels, p.embed_w2, p.embed_b2);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      LayerParams lp;
      lp.ln1_gain = Matrix<double>(1, cfg.channels, 1.0);
      lp.ln1_shift = Matrix<double>(1, cfg.channels, 0.0);
      for (std::size_t h = 0; h < cfg.heads; ++h)
        lp.heads.push_back(HeadParams<double>::init(cfg.head_channels(), cfg.slices, rng, cfg.bias));
      lp.ln2_gain = Matrix<double>(1, cfg.channels, 1.0);
      lp.ln2_shift = Matrix<double>(1, cfg.channels, 0.0);
      dense(cfg.channels, cfg.ffn_hidden, lp.ffn_w1, lp.ffn_b1);
      dense(cfg.ffn_hidden, cfg.channels, lp.ffn_w2, lp.ffn_b2);
      p.layers.push_back(std::move(lp));
    }
    dense(cfg.channels, cfg.out_dim, p.head_w, p.head_b);
    p.normalizer = InputNormalizer::identity(coord_dims);
    return p;
  }

  // Same tensor layout, all zeros.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.for_each_tensor([](const std::string&, Matrix<double>& t, bool) { t.fill(0.0); });
    return z;
  }

  // Visits every learnable tensor in a fixed order: f(name, tensor, decays).
  // `decays` marks weight matrices (subject to weight decay).
  template <class F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

  // Learnable tensors followed by the coordinate normalizer bounds.
  template <class F>
  void for_each_stored_tensor(F&& f) const {
    visit(*this, f);
    f(std::string("normalizer.lo"), normalizer.lo, false);
    f(std::string("normalizer.hi"), normalizer.hi, false);
  }
  template <class F>
  void for_each_stored_tensor(F&& f) {
    visit(*this, f);
    f(std::string("normalizer.lo"), normalizer.lo, false);
    f(std::string("normalizer.hi"), normalizer.hi, false);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const Matrix<double>& t, bool) { n += t.size(); });
    return n;
  }

 private:
  template <class Self, class F>
  static void visit(Self& p, F& f) {
    f(std::string("embed.w1"), p.embed_w1, true);
    f(std::string("embed.b1"), p.embed_b1, false);
    f(std::string("embed.w2"), p.embed_w2, true);
    f(std::string("embed.b2"), p.embed_b2, false);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      auto& lp = p.layers[l];
      const std::string pre = "layers." + std::to_string(l) + ".";
      f(pre + "ln1.gain", lp.ln1_gain, false);
      f(pre + "ln1.shift", lp.ln1_shift, false);
      for (std::size_t h = 0; h < lp.heads.size(); ++h) {
        const std::string hp = pre + "heads." + std::to_string(h) + ".";
        lp.heads[h].for_each_tensor([&](const char* name, auto& t) {
          f(hp + name, t, name[0] == 'w');
        });
      }
      f(pre + "ln2.gain", lp.ln2_gain, false);
      f(pre + "ln2.shift", lp.ln2_shift, false);
      f(pre + "ffn.w1", lp.ffn_w1, true);
      f(pre + "ffn.b1", lp.ffn_b1, false);
      f(pre + "ffn.w2", lp.ffn_w2, true);
      f(pre + "ffn.b2", lp.ffn_b2, false);
    }
    f(std::string("head.w"), p.head_w, true);
    f(std::string("head.b"), p.head_b, false);
  }
};

// Closed-form scalar parameter count.
inline std::size_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels, ch = cfg.head_channels(), m = cfg.slices, f = cfg.ffn_hidden;
  const std::size_t embed = cfg.in_dim * c + c + c * c + c;
  const std::size_t head_bias = cfg.bias ? (2 * ch + m) : 0;
  const std::size_t per_head = 6 * ch * ch + ch * m + head_bias;
  const std::size_t per_layer = 4 * c + cfg.heads * per_head + (c * f + f + f * c + c);
  return embed + cfg.layers * per_layer + c * cfg.out_dim + cfg.out_dim;
}

// Concatenation of normalized coordinates and features, N × in_dim.
inline Matrix<double> embed_input(const ModelParams& p, const MeshBatch& mesh) {
  Matrix<double> nc = p.normalizer.apply(mesh.coords);
  if (mesh.features.cols() == 0) return nc;
  if (mesh.features.rows() != mesh.size()) throw ShapeError("features row count mismatch");
  Matrix<double> in(mesh.size(), nc.cols() + mesh.features.cols());
  in.set_col_block(0, nc);
  in.set_col_block(nc.cols(), mesh.features);
  return in;
}

inline Matrix<double> embed(const ModelParams& p, const Matrix<double>& input) {
  return linear(gelu(linear(input, p.embed_w1, p.embed_b1)), p.embed_w2, p.embed_b2);
}

inline Matrix<double> feed_forward(const LayerParams& lp, const Matrix<double>& h) {
  return linear(gelu(linear(h, lp.ffn_w1, lp.ffn_b1)), lp.ffn_w2, lp.ffn_b2);
}

inline void check_input(const ModelConfig& cfg, const ModelParams& p, const MeshBatch& mesh) {
  cfg.validate();
  if (p.layers.size() != cfg.layers)
    throw ShapeError("params have " + std::to_string(p.layers.size()) + " layers, config says " +
                     std::to_string(cfg.layers));
  const std::size_t in = mesh.coords.cols() + mesh.features.cols();
  if (in != cfg.in_dim)
    throw ShapeError("mesh provides " + std::to_string(in) + " input columns, model expects " +
                     std::to_string(cfg.in_dim));
  if (p.embed_w1.rows() != cfg.in_dim) throw ShapeError("embedding weight does not match in_dim");
  for (std::size_t l = 0; l < p.layers.size(); ++l)
    if (p.layers[l].heads.size() != cfg.heads)
      throw ShapeError("layer " + std::to_string(l) + " has " + std::to_string(p.layers[l].heads.size()) +
                       " heads, config says " + std::to_string(cfg.heads));
}

struct ForwardOptions {
  bool parallel = false;
  // When set, receives s'_out = Linear3(Attention(s)) per layer and head.
  std::vector<std::vector<Matrix<double>>>* states_out = nullptr;
  // When set, sees LN₁(x) entering each attention sublayer.
  std::function<void(std::size_t layer, const Matrix<double>& normed)> on_attention_input = {};
};

inline Matrix<double> forward(const ModelParams& p, const MeshBatch& mesh, const ModelConfig& cfg,
                              const ForwardOptions& opt = {}) {
  check_input(cfg, p, mesh);
  if (mesh.size() == 0) throw ShapeError("forward: empty mesh");
  Matrix<double> x = embed(p, embed_input(p, mesh));
  const TileOptions tiles{cfg.mode == AttnMode::tiled ? cfg.tile_size : 0, opt.parallel};
  if (opt.states_out) opt.states_out->assign(cfg.layers, {});
  const std::size_t ch = cfg.head_channels();
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerParams& lp = p.layers[l];
    const Matrix<double> h = layer_norm(x, lp.ln1_gain, lp.ln1_shift, kLayerNormEps);
    if (opt.on_attention_input) opt.on_attention_input(l, h);
    x += multihead_physattn<double>(h, lp.heads, cfg.mode, tiles);
    if (opt.states_out) {
      for (std::size_t k = 0; k < cfg.heads; ++k) {
        const Matrix<double> xh = h.col_block(k * ch, ch);
        (*opt.states_out)[l].push_back(project_states(slice_fast(xh, lp.heads[k]).states, lp.heads[k]));
      }
    }
    x += feed_forward(lp, layer_norm(x, lp.ln2_gain, lp.ln2_shift, kLayerNormEps));
  }
  return linear(x, p.head_w, p.head_b);
}

// 64-bit FNV-1a.
class Fnv1a {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }
  void real(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

// Checksum over the architecture string and the little-endian parameter blob.
inline std::uint64_t model_fingerprint(const ModelParams& p, const ModelConfig& cfg) {
  Fnv1a h;
  const std::string arch = cfg.canonical();
  h.bytes(arch.data(), arch.size());
  p.for_each_stored_tensor([&](const std::string&, const Matrix<double>& t, bool) {
    h.u64(t.rows());
    h.u64(t.cols());
    for (double v : t.data()) h.real(v);
  });
  return h.value();
}

}  // namespace transolver

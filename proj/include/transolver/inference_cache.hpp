#pragma once

// Decoupled inference: physical state caching followed by per-point decoding.
//
// Caching. Layer l's states need every point's layer-l input, and that input
// depends on the finished states of layers 1..l-1. The cache is therefore
// built frontier by frontier: for layer l each chunk is embedded, decoded
// through layers 1..l-1 against the states already cached, and folded into
// layer l's (s_raw, d) accumulators; once all chunks are in, the layer's
// s'_out = Linear3(Attention(Linear1(s_raw d⁻¹))) is cached.
//
//   CacheStrategy::recompute  re-reads the source for every layer and keeps
//                             one chunk resident: O(K·L²) chunk-layer passes,
//                             O(chunk) memory.
//   CacheStrategy::carry      reads the source once and keeps each chunk's
//                             hidden state between frontiers: O(K·L) passes,
//                             O(N·C) memory.
//
// Decoding. A query point runs the same residual blocks as the forward pass,
// with every Physics-Attention sublayer replaced by
// softmax(Linear2(LN₁(x))) · s'_out against the cache. Points are independent,
// so decoding a mesh reproduces the monolithic forward pass.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "transolver/checkpoint.hpp"
#include "transolver/error.hpp"
#include "transolver/mesh.hpp"
#include "transolver/mesh_io.hpp"
#include "transolver/model.hpp"
#include "transolver/physattn.hpp"

namespace transolver {

struct StateCache {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t slices = 0;
  std::size_t head_channels = 0;
  std::uint64_t fingerprint = 0;
  std::vector<std::vector<Matrix<double>>> states;  // [layer][head], M × C_h

  // Final (s_raw, d) per layer and head from the build; not persisted.
  std::vector<std::vector<SliceAccumulator<double>>> accumulators;
};

// Index ranges that partition [0, N) into chunks of at most chunk_size points.
struct ChunkPlan {
  std::size_t chunk_size = 0;
  std::vector<RowRange> ranges;
  std::size_t count() const { return ranges.size(); }
};

inline ChunkPlan make_chunk_plan(std::size_t n, std::size_t chunk_size) {
  return {chunk_size, partition_rows(n, chunk_size)};
}

// A re-readable sequence of point chunks in index order.
class MeshSource {
 public:
  virtual ~MeshSource() = default;
  virtual void for_each_chunk(std::size_t chunk_size,
                              const std::function<void(const MeshBatch&)>& fn) const = 0;
};

class InMemorySource final : public MeshSource {
 public:
  explicit InMemorySource(const MeshBatch& mesh) : mesh_(mesh) {}
  void for_each_chunk(std::size_t chunk_size, const std::function<void(const MeshBatch&)>& fn) const override {
    for (const auto& r : make_chunk_plan(mesh_.size(), chunk_size).ranges) fn(mesh_.slice(r.begin, r.end));
  }

 private:
  const MeshBatch& mesh_;
};

class FileSource final : public MeshSource {
 public:
  explicit FileSource(std::string path) : path_(std::move(path)) {}
  void for_each_chunk(std::size_t chunk_size, const std::function<void(const MeshBatch&)>& fn) const override {
    ChunkedMeshReader reader(path_);
    while (auto chunk = reader.next(chunk_size)) fn(*chunk);
  }

 private:
  std::string path_;
};

namespace detail {

inline void require_cache_matches(const StateCache& cache, const ModelParams& p, const ModelConfig& cfg) {
  const std::uint64_t fp = model_fingerprint(p, cfg);
  if (cache.fingerprint != fp)
    throw FingerprintError("state cache fingerprint mismatch: cache was built with a different model");
  if (cache.layers != cfg.layers || cache.heads != cfg.heads || cache.slices != cfg.slices ||
      cache.head_channels != cfg.head_channels() || cache.states.size() != cfg.layers)
    throw FingerprintError("state cache dimensions do not match the model");
}

// The decoding form of block l: attention against cached states, then the FFN.
inline void decode_block(const LayerParams& lp, const std::vector<Matrix<double>>& states, std::size_t ch,
                         Matrix<double>& x) {
  const Matrix<double> h = layer_norm(x, lp.ln1_gain, lp.ln1_shift, kLayerNormEps);
  for (std::size_t k = 0; k < lp.heads.size(); ++k) {
    const Matrix<double> y = matmul(slice_weights(h.col_block(k * ch, ch), lp.heads[k]), states[k]);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t c = 0; c < ch; ++c) x(i, k * ch + c) += y(i, c);
  }
  x += feed_forward(lp, layer_norm(x, lp.ln2_gain, lp.ln2_shift, kLayerNormEps));
}

inline void accumulate_block(const LayerParams& lp, std::size_t ch, const Matrix<double>& x,
                             std::vector<SliceAccumulator<double>>& accs) {
  const Matrix<double> h = layer_norm(x, lp.ln1_gain, lp.ln1_shift, kLayerNormEps);
  for (std::size_t k = 0; k < lp.heads.size(); ++k) {
    const Matrix<double> xh = h.col_block(k * ch, ch);
    accs[k].add(slice_weights(xh, lp.heads[k]), xh);
  }
}

inline std::vector<Matrix<double>> finalize_block(const LayerParams& lp,
                                                  const std::vector<SliceAccumulator<double>>& accs) {
  std::vector<Matrix<double>> out;
  for (std::size_t k = 0; k < lp.heads.size(); ++k) {
    const auto& hp = lp.heads[k];
    out.push_back(project_states(PhysicalStates<double>{linear(accs[k].normalized(), hp.w1, hp.b1)}, hp));
  }
  return out;
}

}  // namespace detail

enum class CacheStrategy { recompute, carry };

inline StateCache build_cache(const ModelParams& p, const ModelConfig& cfg, const MeshSource& source,
                              std::size_t chunk_size, CacheStrategy strategy = CacheStrategy::recompute) {
  cfg.validate();
  if (chunk_size == 0) throw ShapeError("chunk_size must be >= 1");
  const std::size_t ch = cfg.head_channels();
  StateCache cache;
  cache.layers = cfg.layers;
  cache.heads = cfg.heads;
  cache.slices = cfg.slices;
  cache.head_channels = ch;
  cache.fingerprint = model_fingerprint(p, cfg);
  cache.states.resize(cfg.layers);
  cache.accumulators.resize(cfg.layers);

  auto fresh = [&] {
    return std::vector<SliceAccumulator<double>>(cfg.heads, SliceAccumulator<double>(cfg.slices, ch));
  };

  std::size_t points = 0;
  if (strategy == CacheStrategy::carry) {
    std::vector<Matrix<double>> hidden;
    source.for_each_chunk(chunk_size, [&](const MeshBatch& chunk) {
      check_input(cfg, p, chunk);
      points += chunk.size();
      hidden.push_back(embed(p, embed_input(p, chunk)));
    });
    if (points == 0) throw ShapeError("build_cache: empty mesh stream");
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      auto accs = fresh();
      for (const auto& x : hidden) detail::accumulate_block(p.layers[l], ch, x, accs);
      cache.states[l] = detail::finalize_block(p.layers[l], accs);
      cache.accumulators[l] = std::move(accs);
      if (l + 1 < cfg.layers)
        for (auto& x : hidden) detail::decode_block(p.layers[l], cache.states[l], ch, x);
    }
    return cache;
  }

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto accs = fresh();
    points = 0;
    source.for_each_chunk(chunk_size, [&](const MeshBatch& chunk) {
      check_input(cfg, p, chunk);
      points += chunk.size();
      if (chunk.size() == 0) return;
      Matrix<double> x = embed(p, embed_input(p, chunk));
      for (std::size_t k = 0; k < l; ++k) detail::decode_block(p.layers[k], cache.states[k], ch, x);
      detail::accumulate_block(p.layers[l], ch, x, accs);
    });
    if (points == 0) throw ShapeError("build_cache: empty mesh stream");
    cache.states[l] = detail::finalize_block(p.layers[l], accs);
    cache.accumulators[l] = std::move(accs);
  }
  if (cfg.layers == 0) {
    source.for_each_chunk(chunk_size, [&](const MeshBatch& chunk) { points += chunk.size(); });
    if (points == 0) throw ShapeError("build_cache: empty mesh stream");
  }
  return cache;
}

inline StateCache build_cache(const ModelParams& p, const ModelConfig& cfg, const MeshBatch& mesh,
                              std::size_t chunk_size, CacheStrategy strategy = CacheStrategy::recompute) {
  return build_cache(p, cfg, InMemorySource(mesh), chunk_size, strategy);
}

namespace detail {
inline Matrix<double> decode_rows(const StateCache& cache, const ModelParams& p, const ModelConfig& cfg,
                                  const MeshBatch& query) {
  Matrix<double> x = embed(p, embed_input(p, query));
  for (std::size_t l = 0; l < cfg.layers; ++l)
    decode_block(p.layers[l], cache.states[l], cfg.head_channels(), x);
  return linear(x, p.head_w, p.head_b);
}
}  // namespace detail

// Predictions for arbitrary query points. Rows are computed independently, so
// the parallel split is bit-identical to the sequential one.
inline Matrix<double> decode_points(const StateCache& cache, const ModelParams& p, const ModelConfig& cfg,
                                    const MeshBatch& query, bool parallel = false, std::size_t threads = 0) {
  detail::require_cache_matches(cache, p, cfg);
  if (query.size() == 0) return Matrix<double>(0, cfg.out_dim);
  check_input(cfg, p, query);
  if (!parallel) return detail::decode_rows(cache, p, cfg, query);
  Matrix<double> out(query.size(), cfg.out_dim);
  const TileOptions opt{0, true, threads};
  const std::size_t groups = detail::worker_count(opt, query.size());
  detail::run_groups(query.size(), groups, [&](std::size_t, std::size_t b, std::size_t e) {
    out.set_rows(b, detail::decode_rows(cache, p, cfg, query.slice(b, e)));
  });
  return out;
}

struct DecodeSummary {
  std::size_t points = 0;
  std::size_t chunks = 0;
};

using PredictionSink = std::function<void(const MeshBatch& chunk, const Matrix<double>& predictions)>;

inline DecodeSummary decode_stream(const StateCache& cache, const ModelParams& p, const ModelConfig& cfg,
                                   const MeshSource& queries, std::size_t chunk_size, const PredictionSink& sink) {
  detail::require_cache_matches(cache, p, cfg);
  DecodeSummary summary;
  queries.for_each_chunk(chunk_size, [&](const MeshBatch& chunk) {
    const Matrix<double> pred = decode_points(cache, p, cfg, chunk);
    try {
      sink(chunk, pred);
    } catch (const std::exception& e) {
      throw std::runtime_error("decode_stream: output failed at chunk " + std::to_string(summary.chunks) +
                               ": " + e.what());
    }
    summary.points += chunk.size();
    ++summary.chunks;
  });
  return summary;
}

// Cache files: <dir>/cache.json + <dir>/cache.bin (s'_out matrices, layer-major
// then head, row-major M × C_h, little-endian binary64).
inline void save_cache(const std::filesystem::path& dir, const StateCache& cache) {
  std::filesystem::create_directories(dir);
  std::string blob;
  for (const auto& layer : cache.states)
    for (const auto& s : layer)
      for (double v : s.data()) detail::put_f64_le(blob, v);
  char fp[17];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(cache.fingerprint));
  nlohmann::ordered_json manifest = {{"format_version", kCheckpointFormatVersion},
                                     {"layers", cache.layers},
                                     {"heads", cache.heads},
                                     {"slices", cache.slices},
                                     {"head_channels", cache.head_channels},
                                     {"fingerprint", fp},
                                     {"dtype", "f64"},
                                     {"order", "layer,head,slice,channel"},
                                     {"blob", "cache.bin"}};
  detail::write_file(dir / "cache.bin", blob);
  detail::write_file(dir / "cache.json", manifest.dump(2) + "\n");
}

inline StateCache load_cache(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::ordered_json::parse(detail::read_file(dir / "cache.json"));
  if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw FormatError("unsupported cache format version", 0, 0);
  StateCache cache;
  cache.layers = manifest.at("layers").get<std::size_t>();
  cache.heads = manifest.at("heads").get<std::size_t>();
  cache.slices = manifest.at("slices").get<std::size_t>();
  cache.head_channels = manifest.at("head_channels").get<std::size_t>();
  cache.fingerprint = std::stoull(manifest.at("fingerprint").get<std::string>(), nullptr, 16);
  const std::string blob = detail::read_file(dir / manifest.at("blob").get<std::string>());
  const std::size_t per = cache.slices * cache.head_channels;
  if (blob.size() != cache.layers * cache.heads * per * 8)
    throw FormatError("cache blob size does not match manifest", 0, blob.size());
  std::size_t off = 0;
  cache.states.resize(cache.layers);
  for (auto& layer : cache.states)
    for (std::size_t h = 0; h < cache.heads; ++h) {
      Matrix<double> s(cache.slices, cache.head_channels);
      for (auto& v : s.data()) {
        v = detail::get_f64_le(blob, off);
        off += 8;
      }
      layer.push_back(std::move(s));
    }
  return cache;
}

}  // namespace transolver

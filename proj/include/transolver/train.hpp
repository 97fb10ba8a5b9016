#pragma once

// Geometry-amortized training: every step draws a fresh uniform subset of a
// training mesh, back-propagates the relative L2 loss on that subset, clips
// the global gradient norm and takes an AdamW step on a warm-up + cosine
// learning-rate schedule. Validation decodes the full mesh through the state
// cache, so validation meshes may be much larger than a training subset.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "transolver/autodiff.hpp"
#include "transolver/error.hpp"
#include "transolver/inference_cache.hpp"
#include "transolver/mesh.hpp"
#include "transolver/mesh_io.hpp"
#include "transolver/metrics.hpp"
#include "transolver/model.hpp"

namespace transolver {

// Uniform sample of n points without replacement (partial Fisher-Yates).
// The result keeps the original point indices.
inline MeshBatch amortized_sample(const MeshBatch& mesh, std::size_t n, Rng& rng) {
  const std::size_t total = mesh.size();
  if (n == 0 || n > total)
    throw ShapeError("subset size " + std::to_string(n) + " outside [1, " + std::to_string(total) + "]");
  std::vector<std::size_t> idx(total);
  for (std::size_t i = 0; i < total; ++i) idx[i] = i;
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.index(total - i)]);
  idx.resize(n);
  return mesh.gather(idx);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// A parameter tensor paired with its gradient.
struct ParamSlot {
  std::span<double> value;
  std::span<const double> grad;
  bool decays = false;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(std::span<const ParamSlot> slots, double lr) {
    if (m_.empty()) {
      for (const auto& s : slots) {
        m_.emplace_back(s.value.size(), 0.0);
        v_.emplace_back(s.value.size(), 0.0);
      }
    }
    if (m_.size() != slots.size()) throw ShapeError("AdamW: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < slots.size(); ++k) {
      auto& m = m_[k];
      auto& v = v_[k];
      const auto& s = slots[k];
      for (std::size_t i = 0; i < s.value.size(); ++i) {
        const double g = s.grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg_.eps);
        if (s.decays) upd += cfg_.weight_decay * s.value[i];
        s.value[i] -= lr * upd;
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Linear warm-up to base_lr, then cosine decay to min_lr.
struct CosineSchedule {
  double base_lr = 1e-3;
  double min_lr = 1e-6;
  std::size_t total_steps = 1;
  double warmup_fraction = 0.05;

  double operator()(std::size_t step) const {
    const double floor = std::min(min_lr, base_lr);
    const auto warm = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
    if (step < warm) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    const double span = static_cast<double>(std::max<std::size_t>(1, total_steps - warm));
    const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
    return floor + (base_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

inline std::vector<ParamSlot> param_slots(ModelParams& p, const GradStore& g) {
  std::vector<ParamSlot> slots;
  p.for_each_tensor([&](const std::string&, Matrix<double>& t, bool decays) {
    slots.push_back({t.data(), {}, decays});
  });
  std::size_t k = 0;
  g.for_each_tensor([&](const std::string&, const Matrix<double>& t, bool) { slots[k++].grad = t.data(); });
  return slots;
}

inline double global_grad_norm(const GradStore& g) {
  double s = 0.0;
  g.for_each_tensor([&](const std::string&, const Matrix<double>& t, bool) {
    for (double v : t.data()) s += v * v;
  });
  return std::sqrt(s);
}

inline void scale_grads(GradStore& g, double k) {
  g.for_each_tensor([&](const std::string&, Matrix<double>& t, bool) { t *= k; });
}

struct TrainConfig {
  std::size_t epochs = 10;
  double lr = 1e-3;
  double min_lr = 1e-6;
  double warmup_fraction = 0.05;
  AdamWConfig adamw{};
  std::size_t subset_size = 2048;  // 0: train on the full mesh
  std::size_t steps_per_epoch = 0; // 0: Σ ceil(N_i / n) over the training meshes
  double grad_clip = 1.0;          // <= 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t val_chunk_size = 4096;
  std::size_t validate_every = 1;  // epochs; 0 validates only after the last epoch
  bool fit_normalizer = true;

  void validate() const {
    if (!(lr >= 0.0)) throw ShapeError("train config: lr must be >= 0");
    if (epochs == 0) throw ShapeError("train config: epochs must be >= 1");
    if (val_chunk_size == 0) throw ShapeError("train config: val_chunk_size must be >= 1");
  }
};

struct EpochMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_rel_l2 = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochMetrics> log;
  double initial_val_rel_l2 = 0.0;
  double final_val_rel_l2 = 0.0;
};

// Full-mesh relative L2 through the cache path, averaged over meshes.
inline double validate_cached(const ModelParams& p, const ModelConfig& cfg, std::span<const MeshBatch> meshes,
                              std::size_t chunk_size) {
  double total = 0.0;
  for (const auto& m : meshes) {
    if (!m.targets) throw ShapeError("validation mesh has no targets");
    const StateCache cache = build_cache(p, cfg, m, chunk_size);
    total += rel_l2(decode_points(cache, p, cfg, m), *m.targets);
  }
  return total / static_cast<double>(meshes.size());
}

inline void write_metrics_header(std::ostream& os) { os << "step,epoch,lr,train_loss,val_relL2\n"; }

inline void write_metrics_row(std::ostream& os, const EpochMetrics& e) {
  std::string line = std::to_string(e.step) + "," + std::to_string(e.epoch) + ",";
  append_real(line, e.lr);
  line += ",";
  append_real(line, e.train_loss);
  line += ",";
  append_real(line, e.val_rel_l2);
  os << line << '\n';
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

inline TrainResult train(const ModelConfig& cfg, ModelParams params, std::span<const MeshBatch> train_set,
                         std::span<const MeshBatch> val_set, const TrainConfig& tcfg,
                         const EpochCallback& on_epoch = {}) {
  tcfg.validate();
  if (train_set.empty()) throw ShapeError("train: empty dataset");
  for (const auto& m : train_set) {
    if (!m.targets) throw ShapeError("train: training mesh has no targets");
    if (tcfg.subset_size > m.size())
      throw ShapeError("train: subset size " + std::to_string(tcfg.subset_size) + " exceeds mesh size " +
                       std::to_string(m.size()));
  }
  if (val_set.empty()) val_set = train_set;

  if (tcfg.fit_normalizer) {
    MeshBatch all;
    for (const auto& m : train_set) all.append(MeshBatch{m.coords, Matrix<double>(m.size(), 0), {}, {}, {}, {}});
    params.normalizer = InputNormalizer::fit(all.coords);
  }

  std::size_t steps_per_epoch = tcfg.steps_per_epoch;
  if (steps_per_epoch == 0) {
    for (const auto& m : train_set) {
      const std::size_t n = tcfg.subset_size ? tcfg.subset_size : m.size();
      steps_per_epoch += (m.size() + n - 1) / n;
    }
  }
  const CosineSchedule schedule{tcfg.lr, tcfg.min_lr, steps_per_epoch * tcfg.epochs, tcfg.warmup_fraction};

  TrainResult result;
  result.initial_val_rel_l2 = validate_cached(params, cfg, val_set, tcfg.val_chunk_size);
  AdamW opt(tcfg.adamw);
  Rng rng(tcfg.seed);
  std::size_t step = 0;
  double last_val = result.initial_val_rel_l2;
  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t k = 0; k < steps_per_epoch; ++k, ++step) {
      const MeshBatch& mesh = train_set[step % train_set.size()];
      const MeshBatch batch = tcfg.subset_size ? amortized_sample(mesh, tcfg.subset_size, rng) : mesh;
      LossAndGrads lg = backward(params, batch, *batch.targets, cfg);
      if (!std::isfinite(lg.loss))
        throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(step), step);
      if (tcfg.grad_clip > 0.0) {
        const double gn = global_grad_norm(lg.grads);
        if (gn > tcfg.grad_clip) scale_grads(lg.grads, tcfg.grad_clip / gn);
      }
      lr = schedule(step);
      const auto slots = param_slots(params, lg.grads);
      opt.step(slots, lr);
      loss_sum += lg.loss;
    }
    EpochMetrics em{step, epoch, lr, loss_sum / static_cast<double>(steps_per_epoch)};
    const bool validate_now =
        epoch == tcfg.epochs || (tcfg.validate_every != 0 && epoch % tcfg.validate_every == 0);
    if (validate_now) {
      last_val = validate_cached(params, cfg, val_set, tcfg.val_chunk_size);
      em.val_rel_l2 = last_val;
    }
    result.log.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  result.final_val_rel_l2 = last_val;
  result.params = std::move(params);
  return result;
}

}  // namespace transolver

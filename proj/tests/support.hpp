#pragma once

// Fixtures and oracles shared by the unit tests and the acceptance runner.

#include <cmath>
#include <string>
#include <vector>

#include "transolver/transolver.hpp"

namespace transolver::testing {

inline MeshBatch random_mesh(std::size_t n, std::uint64_t seed, std::size_t out_dim = 1) {
  Rng rng(seed);
  MeshBatch m;
  m.coords = rng.uniform_matrix(n, 3, -1, 1);
  m.features = Matrix<double>(n, 0);
  m.targets = rng.uniform_matrix(n, out_dim, -1, 1);
  return m;
}

// Fibonacci sphere carrying the manufactured pressure as its target.
inline MeshBatch manufactured_sphere(std::size_t n) {
  MeshBatch m = gen_sphere_mesh(n);
  m.targets = manufactured_field(m.coords);
  return m;
}

struct GradCheck {
  double worst = 0.0;
  std::string worst_tensor;
};

using ext = long double;

// Learnable tensors in ModelParams visiting order, widened to extended precision.
inline std::vector<Matrix<ext>> widen(const ModelParams& p) {
  std::vector<Matrix<ext>> out;
  p.for_each_tensor([&](const std::string&, const Matrix<double>& t, bool) { out.push_back(t.cast<ext>()); });
  return out;
}

// Reference forward pass in extended precision: same block structure as the
// model, evaluated with the templated kernels at T = long double. Finite
// differences of this loss resolve gradients many orders below what double
// evaluation allows.
inline ext forward_loss_ext(const std::vector<Matrix<ext>>& t, const MeshBatch& mesh, const ModelConfig& cfg,
                            const InputNormalizer& norm) {
  std::size_t k = 0;
  auto next = [&]() -> const Matrix<ext>& { return t[k++]; };
  const Matrix<ext> in = norm.apply(mesh.coords).cast<ext>();
  const auto& ew1 = next();
  const auto& eb1 = next();
  const auto& ew2 = next();
  const auto& eb2 = next();
  Matrix<ext> x = linear(gelu(linear(in, ew1, eb1)), ew2, eb2);
  const TileOptions tiles{cfg.mode == AttnMode::tiled ? cfg.tile_size : 0};
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& g1 = next();
    const auto& sh1 = next();
    std::vector<HeadParams<ext>> heads(cfg.heads);
    for (auto& h : heads) {
      h.w1 = next();
      if (cfg.bias) h.b1 = next();
      h.w2 = next();
      if (cfg.bias) h.b2 = next();
      h.w3 = next();
      if (cfg.bias) h.b3 = next();
      h.wq = next();
      h.wk = next();
      h.wv = next();
      h.wo = next();
    }
    x += multihead_physattn<ext>(layer_norm(x, g1, sh1, ext(kLayerNormEps)), heads, cfg.mode, tiles);
    const auto& g2 = next();
    const auto& sh2 = next();
    const auto& fw1 = next();
    const auto& fb1 = next();
    const auto& fw2 = next();
    const auto& fb2 = next();
    x += linear(gelu(linear(layer_norm(x, g2, sh2, ext(kLayerNormEps)), fw1, fb1)), fw2, fb2);
  }
  const auto& hw = next();
  const auto& hb = next();
  const Matrix<ext> y = linear(x, hw, hb);
  const Matrix<ext> target = mesh.targets->cast<ext>();
  ext rr = 0, yy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const ext r = y.data()[i] - target.data()[i];
    rr += r * r;
    yy += target.data()[i] * target.data()[i];
  }
  return std::sqrt(rr) / std::sqrt(yy);
}

// Central differences (step h) of the relative L2 loss for every learnable
// scalar, compared per tensor as ‖g − g_fd‖_F / ‖g_fd‖_F. The worst tensor
// is reported.
inline GradCheck finite_difference_check(const ModelParams& p, const MeshBatch& mesh, const ModelConfig& cfg,
                                         double h = 1e-5) {
  const auto analytic = backward(p, mesh, *mesh.targets, cfg).grads;
  std::vector<const Matrix<double>*> grads;
  std::vector<std::string> names;
  analytic.for_each_tensor([&](const std::string& n, const Matrix<double>& t, bool) {
    grads.push_back(&t);
    names.push_back(n);
  });
  auto probe = widen(p);
  GradCheck out;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    Matrix<ext>& t = probe[k];
    Matrix<double> fd(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const ext keep = t.data()[i];
      t.data()[i] = keep + ext(h);
      const ext up = forward_loss_ext(probe, mesh, cfg, p.normalizer);
      t.data()[i] = keep - ext(h);
      const ext down = forward_loss_ext(probe, mesh, cfg, p.normalizer);
      t.data()[i] = keep;
      fd.data()[i] = static_cast<double>((up - down) / (2 * ext(h)));
    }
    const double err = relative_error(*grads[k], fd);
    if (err > out.worst) {
      out.worst = err;
      out.worst_tensor = names[k];
    }
  }
  return out;
}

inline double max_grad_difference(const GradStore& a, const GradStore& b) {
  std::vector<const Matrix<double>*> bs;
  b.for_each_tensor([&](const std::string&, const Matrix<double>& t, bool) { bs.push_back(&t); });
  double worst = 0.0;
  std::size_t k = 0;
  a.for_each_tensor([&](const std::string&, const Matrix<double>& t, bool) {
    worst = std::max(worst, relative_error(t, *bs[k++]));
  });
  return worst;
}

inline ModelConfig gradcheck_config(AttnMode mode) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.channels = 8;
  c.slices = 4;
  c.in_dim = 3;
  c.out_dim = 1;
  c.ffn_hidden = 8;
  c.mode = mode;
  c.tile_size = mode == AttnMode::tiled ? 7 : 0;
  return c;
}

}  // namespace transolver::testing

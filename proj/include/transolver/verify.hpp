#pragma once

// Randomized equivalence suite: original vs fast vs tiled orders of a single
// head, and of the full model stack. Shared by the check-equivalence command
// and the acceptance runner.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "transolver/linalg.hpp"
#include "transolver/mesh.hpp"
#include "transolver/model.hpp"
#include "transolver/physattn.hpp"

namespace transolver {

struct EquivalenceOptions {
  std::size_t seeds = 100;
  std::size_t max_n = 2048;
  std::uint64_t base_seed = 0;
  std::size_t stack_seeds = 5;
  double head_tol = 1e-10;
  double stack_tol = 1e-9;
};

struct EquivalenceCase {
  std::uint64_t seed = 0;
  std::string level;    // "head" or "stack"
  std::string variant;  // e.g. "fast", "tiled/7"
  std::size_t n = 0, channels = 0, slices = 0;
  double rel_err = 0.0;
};

struct EquivalenceReport {
  std::vector<EquivalenceCase> cases;
  double worst_head = 0.0;
  double worst_stack = 0.0;
  EquivalenceCase worst_head_case, worst_stack_case;
  bool passed = false;
};

inline EquivalenceReport run_equivalence_suite(const EquivalenceOptions& opt) {
  if (opt.max_n < 8) throw ShapeError("equivalence suite: max_n must be >= 8");
  EquivalenceReport rep;
  auto record = [&](EquivalenceCase c) {
    const bool head = c.level == "head";
    double& worst = head ? rep.worst_head : rep.worst_stack;
    if (c.rel_err >= worst) {
      worst = c.rel_err;
      (head ? rep.worst_head_case : rep.worst_stack_case) = c;
    }
    rep.cases.push_back(std::move(c));
  };
  const std::size_t channel_choices[] = {4, 8, 16, 32};
  const std::size_t slice_choices[] = {2, 4, 8, 16};

  for (std::size_t s = 0; s < opt.seeds; ++s) {
    const std::uint64_t seed = opt.base_seed + s;
    Rng rng(seed);
    const std::size_t n = 8 + rng.index(opt.max_n - 7);
    const std::size_t c = channel_choices[rng.index(4)];
    const std::size_t m = slice_choices[rng.index(4)];
    const bool bias = rng.index(2) == 1;
    const auto x = rng.uniform_matrix(n, c, -1, 1);
    const auto p = HeadParams<double>::init(c, m, rng, bias);
    const auto ref = physattn_original(x, p);
    record({seed, "head", "fast", n, c, m, relative_error(physattn_fast(x, p), ref)});
    for (std::size_t t : {n, std::max<std::size_t>(1, n / 4), std::max<std::size_t>(1, n / 8), std::size_t{7}})
      record({seed, "head", "tiled/" + std::to_string(t), n, c, m, relative_error(physattn_tiled(x, p, t), ref)});
  }

  for (std::size_t s = 0; s < opt.stack_seeds; ++s) {
    const std::uint64_t seed = opt.base_seed + 1'000'003 + s;
    Rng rng(seed);
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.channels = 16;
    cfg.slices = 8;
    cfg.ffn_hidden = 32;
    const std::size_t n = 64 + rng.index(std::max<std::size_t>(1, opt.max_n - 63));
    MeshBatch mesh;
    mesh.coords = rng.uniform_matrix(n, 3, -1, 1);
    mesh.features = Matrix<double>(n, 0);
    const auto p = ModelParams::init(cfg, seed);
    cfg.mode = AttnMode::original;
    const auto ref = forward(p, mesh, cfg);
    cfg.mode = AttnMode::fast;
    record({seed, "stack", "fast", n, cfg.channels, cfg.slices, relative_error(forward(p, mesh, cfg), ref)});
    cfg.mode = AttnMode::tiled;
    for (std::size_t t : {std::max<std::size_t>(1, n / 4), std::size_t{7}}) {
      cfg.tile_size = t;
      record({seed, "stack", "tiled/" + std::to_string(t), n, cfg.channels, cfg.slices,
              relative_error(forward(p, mesh, cfg), ref)});
    }
  }
  rep.passed = rep.worst_head <= opt.head_tol && rep.worst_stack <= opt.stack_tol;
  return rep;
}

}  // namespace transolver

#include <gtest/gtest.h>

#include "support.hpp"

using namespace transolver;

namespace {

struct Measured {
  std::uint64_t madds = 0;
  std::uint64_t softmax = 0;
};

// Runs one multi-head layer through the requested path with counters on.
Measured measure(AttnMode mode, std::size_t n, std::size_t c, std::size_t m, std::size_t h, std::size_t tile,
                 std::uint64_t seed) {
  Rng rng(seed);
  const auto x = rng.uniform_matrix(n, c, -1, 1);
  std::vector<HeadParams<double>> heads;
  for (std::size_t i = 0; i < h; ++i) heads.push_back(HeadParams<double>::init(c / h, m, rng));
  OpCounters oc;
  {
    CounterScope scope(oc);
    multihead_physattn<double>(x, heads, mode, {tile});
  }
  return {oc.madds, oc.softmax_elems};
}

double ratio(double n, double c, double m, double h) {
  const CostDims d{n, m, c, h, 1};
  return cost_model(CostVariant::optimized, d).time_flops / cost_model(CostVariant::original, d).time_flops;
}

}  // namespace

TEST(CostModel, NRelatedTermCounts) {
  const CostDims d{4096, 16, 64, 2, 3};
  const auto orig = cost_model(CostVariant::original, d);
  const auto opt = cost_model(CostVariant::optimized, d);
  EXPECT_EQ(orig.terms.size(), 6u);
  EXPECT_EQ(opt.terms.size(), 6u);
  EXPECT_EQ(orig.n_related_time, 5u);
  EXPECT_EQ(orig.n_related_space, 4u);
  EXPECT_EQ(opt.n_related_time, 3u);
  EXPECT_EQ(opt.n_related_space, 2u);
  // Tiling swaps N for N_t in the weight buffer but keeps the counts.
  const auto tiled = cost_model(CostVariant::optimized, {4096, 16, 64, 2, 3, 512});
  EXPECT_EQ(tiled.n_related_time, 3u);
  EXPECT_EQ(tiled.n_related_space, 2u);
}

TEST(CostModel, NDependentFlagFollowsSymbols) {
  for (auto v : {CostVariant::original, CostVariant::optimized})
    for (const auto& t : cost_model(v, {100, 8, 16, 1, 1, 10}).terms) {
      const auto f = t.time_flops();
      EXPECT_EQ(t.n_dependent(), f.mentions(Sym::N) || f.mentions(Sym::Nt)) << t.op;
    }
}

TEST(CostModel, TermsMatchExpectedPolynomials) {
  const auto orig = cost_model(CostVariant::original, {1, 1, 1});
  EXPECT_EQ(orig.terms[0].madds.to_string(), "N*C^2*H*L");
  EXPECT_EQ(orig.terms[0].space.to_string(), "N*C*H*L");
  EXPECT_EQ(orig.terms[1].space.to_string(), "N*M*H*L");
  EXPECT_EQ(orig.terms[3].madds.to_string(), "4*M*C^2*H*L + 2*M^2*C*H*L");
  EXPECT_EQ(orig.terms[3].space.to_string(), "M^2*H*L + M*C*H*L");
  const auto opt = cost_model(CostVariant::optimized, {1, 1, 1});
  EXPECT_EQ(opt.terms[2].madds.to_string(), "M*C^2*H*L");
  EXPECT_EQ(opt.terms[4].madds.to_string(), "M*C^2*H*L");
}

TEST(CostModel, FlopReductionAtLargeScale) {
  // N = 1e6, C = 256, M = 64, H = 8.
  const double r = ratio(1e6, 256, 64, 8);
  EXPECT_LE(r, 0.85);
  // Closed form per head: (2NCM + 4NM) + ... divided by the original.
  const double n = 1e6, c = 32, m = 64;
  const double orig = 2 * (2 * n * c * c + 2 * n * m * c + n * c * m + 4 * m * c * c + 2 * m * m * c) + 4 * (n * m + m * m);
  const double opt = 2 * (2 * n * m * c + n * c * m + 2 * m * c * c + 4 * m * c * c + 2 * m * m * c) + 4 * (n * m + m * m);
  EXPECT_NEAR(r, opt / orig, 1e-12);
}

TEST(CostModel, OptimizedWinsWheneverChannelsCoverSlices) {
  for (double c : {8.0, 16.0, 32.0, 64.0, 128.0})
    for (double m : {4.0, 8.0, 16.0, 32.0, 64.0}) {
      if (c < m) continue;
      for (double n : {1e3, 1e5, 1e7}) EXPECT_LT(ratio(n, c, m, 1), 1.0) << n << " " << c << " " << m;
    }
}

TEST(CostModel, AttentionIndependentOfN) {
  for (auto v : {CostVariant::original, CostVariant::optimized}) {
    const auto a = cost_model(v, {100, 16, 32});
    const auto b = cost_model(v, {1e6, 16, 32});
    for (std::size_t i = 0; i < a.terms.size(); ++i)
      if (a.terms[i].op == "Attention(s)") {
        EXPECT_FALSE(a.terms[i].n_dependent());
        EXPECT_EQ(a.terms[i].madds.evaluate(CostDims{100, 16, 32}.values()),
                  b.terms[i].madds.evaluate(CostDims{1e6, 16, 32}.values()));
      }
  }
}

TEST(CostModel, RejectsNonPositiveDims) {
  EXPECT_THROW(cost_model(CostVariant::original, {0, 4, 8}), ShapeError);
  EXPECT_THROW(cost_model(CostVariant::original, {10, 4, -1}), ShapeError);
}

TEST(Counters, FastPathMatchesPolynomialExactly) {
  const auto got = measure(AttnMode::fast, 512, 32, 16, 1, 0, 1);
  const auto r = cost_model(CostVariant::optimized, {512, 16, 32, 1, 1});
  EXPECT_EQ(static_cast<double>(got.madds), r.madds);
  EXPECT_EQ(static_cast<double>(got.softmax), r.softmax_elems);
  const auto orig = measure(AttnMode::original, 512, 32, 16, 1, 0, 1);
  EXPECT_GT(orig.madds, got.madds);
  EXPECT_EQ(static_cast<double>(orig.madds), cost_model(CostVariant::original, {512, 16, 32, 1, 1}).madds);
}

TEST(Counters, PropertySweepAgreesWithModel) {
  Rng rng(2);
  const std::size_t ns[] = {64, 300, 1024, 4096};
  const std::size_t ms[] = {4, 8, 16, 64};
  const std::size_t cs[] = {8, 16, 32, 64};
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = ns[rng.index(4)], m = ms[rng.index(4)], c = cs[rng.index(4)];
    const std::size_t h = c >= 16 && rng.index(2) ? 2 : 1;
    for (AttnMode mode : {AttnMode::original, AttnMode::fast, AttnMode::tiled}) {
      const std::size_t tile = mode == AttnMode::tiled ? n / 4 + 1 : 0;
      const auto got = measure(mode, n, c, m, h, tile, 100 + trial);
      const CostDims d{double(n), double(m), double(c), double(h), 1, double(tile)};
      const auto r = cost_model(mode == AttnMode::original ? CostVariant::original : CostVariant::optimized, d);
      EXPECT_EQ(static_cast<double>(got.madds), r.madds) << to_string(mode) << " n=" << n << " m=" << m << " c=" << c;
      EXPECT_EQ(static_cast<double>(got.softmax), r.softmax_elems) << to_string(mode);
    }
  }
}

TEST(Counters, AttentionCostIndependentOfN) {
  Rng rng(3);
  const auto s = rng.uniform_matrix(16, 8, -1, 1);
  const auto p = HeadParams<double>::init(8, 16, rng);
  OpCounters oc;
  {
    CounterScope scope(oc);
    states_attention(PhysicalStates<double>{s}, p);
  }
  const double expect = cost_model(CostVariant::optimized, {1, 16, 8}).terms[3].madds.evaluate(CostDims{1, 16, 8}.values());
  EXPECT_EQ(static_cast<double>(oc.madds), expect);
}

TEST(MemoryModel, TileSweepIsNonIncreasing) {
  const double sizes[] = {800e3, 200e3, 100e3, 20e3, 10e3, 5e3};
  for (bool training : {true, false}) {
    double prev = std::numeric_limits<double>::infinity();
    for (double t : sizes) {
      const auto rep = memory_model(CostVariant::optimized, {{800e3, 64, 256, 8, 8, t}}, training);
      EXPECT_LE(rep.peak_bytes, prev) << t;
      prev = rep.peak_bytes;
    }
  }
  const auto full = memory_model(CostVariant::optimized, {{800e3, 64, 256, 8, 8, 800e3}}, true);
  const auto small = memory_model(CostVariant::optimized, {{800e3, 64, 256, 8, 8, 5e3}}, true);
  EXPECT_LT(small.peak_bytes, full.peak_bytes);
}

TEST(MemoryModel, TiledWeightBufferIndependentOfN) {
  for (double n : {1e5, 1e6, 1e7}) {
    const auto rep = memory_model(CostVariant::optimized, {{n, 64, 32, 1, 1, 4096}}, true);
    EXPECT_EQ(rep.weight_buffer_bytes, 4096.0 * 64 * 8);
    EXPECT_FALSE(rep.retains_nm_buffer);
    for (const auto& b : rep.buffers) EXPECT_FALSE(b.retained && b.scaling == Scaling::n && b.name[0] == 'w');
  }
  const auto f32 = memory_model(CostVariant::optimized, {{1e6, 64, 32, 1, 1, 4096}, 4}, true);
  EXPECT_EQ(f32.weight_buffer_bytes, 4096.0 * 64 * 4);
}

TEST(MemoryModel, TilingShrinksWeightBufferByNOverNt) {
  const double n = 1e6, nt = 1e4;
  const auto untiled = memory_model(CostVariant::optimized, {{n, 64, 32, 1, 1}}, false);
  const auto tiled = memory_model(CostVariant::optimized, {{n, 64, 32, 1, 1, nt}}, false);
  EXPECT_DOUBLE_EQ(untiled.weight_buffer_bytes / tiled.weight_buffer_bytes, n / nt);
  EXPECT_TRUE(untiled.retains_nm_buffer);
  EXPECT_TRUE(memory_model(CostVariant::original, {{n, 64, 32, 1, 1}}, true).retains_nm_buffer);
}

TEST(MemoryModel, MeasuredWeightPeakMatchesModel) {
  const std::size_t n = 1000, m = 16, c = 8, tile = 64;
  for (std::size_t t : {std::size_t{0}, tile}) {
    Rng rng(4);
    const auto x = rng.uniform_matrix(n, c, -1, 1);
    const auto p = HeadParams<double>::init(c, m, rng);
    OpCounters oc;
    {
      CounterScope scope(oc);
      physattn_head(x, p, t ? AttnMode::tiled : AttnMode::fast, {t});
    }
    const auto rep = memory_model(CostVariant::optimized, {{double(n), double(m), double(c), 1, 1, double(t)}, 8}, false);
    EXPECT_EQ(static_cast<double>(oc.peak_weight_elems) * 8, rep.weight_buffer_bytes) << t;
  }
}

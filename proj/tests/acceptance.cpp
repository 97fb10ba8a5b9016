// Acceptance runner: one [PASS]/[FAIL] line per criterion, nonzero exit if
// any criterion fails. Thresholds and budgets are pinned below.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"
#include "transolver/verify.hpp"

using namespace transolver;
using namespace transolver::testing;

namespace {

// Equivalence
constexpr double kHeadTol = 1e-10;
constexpr double kStackTol = 1e-9;
constexpr std::size_t kEquivalenceSeeds = 100;
constexpr std::size_t kEquivalenceMaxN = 2048;
// FLOP ratio
constexpr double kFlopRatioMax = 0.85;
// Decoupled inference
constexpr double kCacheTol = 1e-9;
// Gradients
constexpr double kFdTol = 1e-5;
constexpr double kCheckpointTol = 1e-8;
// Training smoke test
constexpr double kTrainRelL2Max = 0.2;
constexpr double kTrainImprovementMin = 10.0;
// Quadrature
constexpr double kSlopeLo = -0.7;
constexpr double kSlopeHi = -0.3;
constexpr std::size_t kQuadratureReps = 40;
constexpr std::size_t kMonotoneStepsMin = 3;
// Metric identities
constexpr double kIdentityTol = 1e-12;

// Runtime budgets in seconds.
constexpr double kBudget[] = {0, 120, 60, 1, 60, 120, 300, 1800, 300, 1};

using Clock = std::chrono::steady_clock;

int failures = 0;

void report(int id, const std::string& title, bool ok, const std::string& detail, Clock::time_point start) {
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  const bool in_budget = secs <= kBudget[id];
  const bool pass = ok && in_budget;
  if (!pass) ++failures;
  std::ostringstream os;
  os.precision(3);
  os << (pass ? "[PASS] " : "[FAIL] ") << "AC" << id << " " << title << ": " << detail << " (" << secs << " s";
  if (!in_budget) os << ", over the " << kBudget[id] << " s budget";
  os << ")";
  std::cout << os.str() << std::endl;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

void ac1_equivalence() {
  const auto t0 = Clock::now();
  EquivalenceOptions opt;
  opt.seeds = kEquivalenceSeeds;
  opt.max_n = kEquivalenceMaxN;
  opt.head_tol = kHeadTol;
  opt.stack_tol = kStackTol;
  const auto rep = run_equivalence_suite(opt);
  report(1, "equivalence of original/fast/tiled orders", rep.passed,
         "head worst " + sci(rep.worst_head) + " (" + rep.worst_head_case.variant + ", seed " +
             std::to_string(rep.worst_head_case.seed) + ") <= " + sci(kHeadTol) + ", stack worst " +
             sci(rep.worst_stack) + " <= " + sci(kStackTol) + " over " + std::to_string(opt.seeds) + " seeds",
         t0);
}

struct Measured {
  std::uint64_t madds = 0, softmax = 0;
};

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

void ac2_complexity_counts() {
  const auto t0 = Clock::now();
  const CostDims d{4096, 16, 64, 2, 3};
  const auto orig = cost_model(CostVariant::original, d);
  const auto opt = cost_model(CostVariant::optimized, d);
  const bool counts = orig.n_related_time == 5 && orig.n_related_space == 4 && opt.n_related_time == 3 &&
                      opt.n_related_space == 2;
  Rng rng(2);
  const std::size_t ns[] = {64, 300, 1024, 4096};
  const std::size_t ms[] = {4, 8, 16, 64};
  const std::size_t cs[] = {8, 16, 32, 64};
  std::size_t checked = 0, mismatched = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = ns[rng.index(4)], m = ms[rng.index(4)], c = cs[rng.index(4)];
    const std::size_t h = c >= 16 && rng.index(2) ? 2 : 1;
    for (AttnMode mode : {AttnMode::original, AttnMode::fast, AttnMode::tiled}) {
      const std::size_t tile = mode == AttnMode::tiled ? n / 4 + 1 : 0;
      const auto got = measure(mode, n, c, m, h, tile, 100 + trial);
      const auto r = cost_model(mode == AttnMode::original ? CostVariant::original : CostVariant::optimized,
                                {double(n), double(m), double(c), double(h), 1, double(tile)});
      ++checked;
      if (static_cast<double>(got.madds) != r.madds || static_cast<double>(got.softmax) != r.softmax_elems)
        ++mismatched;
    }
  }
  report(2, "complexity model term counts", counts && mismatched == 0,
         "N-related terms original " + std::to_string(orig.n_related_time) + "/" +
             std::to_string(orig.n_related_space) + ", optimized " + std::to_string(opt.n_related_time) + "/" +
             std::to_string(opt.n_related_space) + "; counters vs model: " + std::to_string(mismatched) +
             " mismatches in " + std::to_string(checked) + " runs (20 configs x 3 modes)",
         t0);
}

void ac3_flop_ratio() {
  const auto t0 = Clock::now();
  const CostDims d{1e6, 64, 256, 8, 1};
  const double r = cost_model(CostVariant::optimized, d).time_flops / cost_model(CostVariant::original, d).time_flops;
  report(3, "FLOP reduction at N=1e6 C=256 M=64 H=8", r <= kFlopRatioMax,
         "optimized/original = " + sci(r) + " <= " + sci(kFlopRatioMax), t0);
}

void ac4_tiling_memory() {
  const auto t0 = Clock::now();
  const double sizes[] = {800e3, 200e3, 100e3, 20e3, 10e3, 5e3};
  bool monotone = true;
  std::string trend;
  double prev = std::numeric_limits<double>::infinity();
  for (double t : sizes) {
    const auto rep = memory_model(CostVariant::optimized, {{800e3, 64, 256, 8, 8, t}}, true);
    monotone = monotone && rep.peak_bytes <= prev;
    prev = rep.peak_bytes;
    trend += (trend.empty() ? "" : " ") + sci(rep.peak_bytes / 1e9);
  }
  // Counter check: a tiled training step retains no N×M weight buffer.
  auto cfg = gradcheck_config(AttnMode::tiled);
  cfg.tile_size = 64;
  const auto mesh = random_mesh(1024, 4);
  OpCounters oc;
  {
    CounterScope scope(oc);
    backward(ModelParams::init(cfg, 4), mesh, *mesh.targets, cfg);
  }
  const bool none_retained = oc.peak_retained_weight_elems == 0 && oc.peak_weight_elems <= 64 * cfg.slices;
  report(4, "tiling memory model", monotone && none_retained,
         "peak GB over tiles 800k..5k: " + trend + (monotone ? " (non-increasing)" : " (increases)") +
             "; tiled backward retained N*M elems = " + std::to_string(oc.peak_retained_weight_elems) +
             ", live weight peak = " + std::to_string(oc.peak_weight_elems),
         t0);
}

void ac5_decoupled_inference() {
  const auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.layers = 4;
  cfg.heads = 2;
  cfg.channels = 32;
  cfg.slices = 16;
  cfg.ffn_hidden = 64;
  const std::size_t n = 4096;
  const auto mesh = random_mesh(n, 5);
  const auto p = ModelParams::init(cfg, 5);
  const auto ref = forward(p, mesh, cfg);
  double worst = 0.0;
  for (std::size_t chunk : {n, n / 3, n / 7}) {
    const auto cache = build_cache(p, cfg, mesh, chunk);
    worst = std::max(worst, relative_error(decode_points(cache, p, cfg, mesh), ref));
  }
  report(5, "chunked cache + decode vs monolithic forward", worst <= kCacheTol,
         "N=4096 L=4 chunks {N, N/3, N/7}: worst rel err " + sci(worst) + " <= " + sci(kCacheTol), t0);
}

void ac6_gradients() {
  const auto t0 = Clock::now();
  const auto mesh = random_mesh(32, 6);
  double worst = 0.0;
  std::string detail;
  for (AttnMode mode : {AttnMode::original, AttnMode::fast, AttnMode::tiled}) {
    const auto cfg = gradcheck_config(mode);
    const auto r = finite_difference_check(ModelParams::init(cfg, 6), mesh, cfg);
    worst = std::max(worst, r.worst);
    detail += std::string(to_string(mode)) + " " + sci(r.worst) + ", ";
  }
  const auto fast = gradcheck_config(AttnMode::fast);
  const auto tiled = gradcheck_config(AttnMode::tiled);
  const auto p = ModelParams::init(fast, 6);
  const double ck = max_grad_difference(backward(p, mesh, *mesh.targets, tiled).grads,
                                        backward(p, mesh, *mesh.targets, fast).grads);
  report(6, "gradients vs central differences", worst <= kFdTol && ck <= kCheckpointTol,
         "worst tensor rel err " + detail + "limit " + sci(kFdTol) + "; checkpointed vs retained " + sci(ck) +
             " <= " + sci(kCheckpointTol),
         t0);
}

ModelConfig smoke_model() {
  ModelConfig c;
  c.layers = 2;
  c.heads = 4;
  c.channels = 32;
  c.slices = 16;
  c.ffn_hidden = 64;
  c.mode = AttnMode::tiled;
  c.tile_size = 512;
  return c;
}

TrainConfig smoke_training() {
  TrainConfig t;
  t.epochs = 200;
  t.lr = 2e-3;
  t.subset_size = 2048;
  t.seed = 0;
  t.validate_every = 0;
  return t;
}

bool same_bits(const TrainResult& a, const TrainResult& b) {
  if (a.log.size() != b.log.size()) return false;
  for (std::size_t i = 0; i < a.log.size(); ++i)
    if (std::memcmp(&a.log[i].train_loss, &b.log[i].train_loss, sizeof(double)) != 0) return false;
  std::vector<const Matrix<double>*> tb;
  b.params.for_each_stored_tensor([&](const std::string&, const Matrix<double>& t, bool) { tb.push_back(&t); });
  bool same = true;
  std::size_t k = 0;
  a.params.for_each_stored_tensor([&](const std::string&, const Matrix<double>& t, bool) {
    const auto& u = *tb[k++];
    same = same && t.data().size() == u.data().size() &&
           std::memcmp(t.data().data(), u.data().data(), t.data().size() * sizeof(double)) == 0;
  });
  return same && k == tb.size();
}

TrainResult ac7_training(const MeshBatch& sphere) {
  const auto t0 = Clock::now();
  const auto cfg = smoke_model();
  const auto tcfg = smoke_training();
  const std::vector<MeshBatch> data{sphere};
  auto first = train(cfg, ModelParams::init(cfg, 0), data, {}, tcfg);
  const auto second = train(cfg, ModelParams::init(cfg, 0), data, {}, tcfg);
  const double improvement = first.initial_val_rel_l2 / first.final_val_rel_l2;
  const bool repro = same_bits(first, second) && first.final_val_rel_l2 == second.final_val_rel_l2;
  report(7, "amortized training smoke test",
         first.final_val_rel_l2 <= kTrainRelL2Max && improvement >= kTrainImprovementMin && repro,
         "20k sphere, n=2048, 200 epochs: rel L2 " + sci(first.initial_val_rel_l2) + " -> " +
             sci(first.final_val_rel_l2) + " (limit " + sci(kTrainRelL2Max) + "), improvement " + sci(improvement) +
             "x (min " + sci(kTrainImprovementMin) + "x), two runs bit-identical: " + (repro ? "yes" : "no"),
         t0);
  return first;
}

void ac8_quadrature(const MeshBatch& sphere, const TrainResult& trained) {
  const auto t0 = Clock::now();
  const FlowConstants fc;
  const ScalarField field = manufactured_pressure;
  const double ref = reference_drag_coefficient(field, fc);
  const std::size_t sizes[] = {100, 1000, 10000};
  const auto conv = quadrature_convergence(field, sizes, ref, fc, kQuadratureReps, 7);
  const bool slope_ok = conv.slope >= kSlopeLo && conv.slope <= kSlopeHi;

  // Caches from nested subsets of the training mesh, each decoding the full mesh.
  const auto cfg = smoke_model();
  Rng rng(8);
  const MeshBatch shuffled = amortized_sample(sphere, sphere.size(), rng);
  std::vector<double> err;
  std::string series;
  for (double frac : {0.05, 0.20, 0.50, 1.00}) {
    const auto k = static_cast<std::size_t>(frac * static_cast<double>(sphere.size()));
    const auto cache = build_cache(trained.params, cfg, shuffled.slice(0, k), 4096);
    err.push_back(rel_l2(decode_points(cache, trained.params, cfg, sphere), *sphere.targets));
    series += (series.empty() ? "" : " ") + sci(err.back());
  }
  const std::size_t steps = (err[1] <= err[0]) + (err[2] <= err[1]) + (err[3] <= err[2]) + (err[3] <= err[0]);
  report(8, "quadrature convergence and cache fidelity", slope_ok && steps >= kMonotoneStepsMin,
         "Cd error slope " + sci(conv.slope) + " in [" + sci(kSlopeLo) + ", " + sci(kSlopeHi) +
             "]; rel L2 from {5,20,50,100}% caches: " + series + ", non-increasing in " + std::to_string(steps) +
             " of 4 comparisons (min " + std::to_string(kMonotoneStepsMin) + ")",
         t0);
}

void ac9_metric_identities() {
  const auto t0 = Clock::now();
  Rng rng(9);
  const auto truth = rng.uniform_matrix(50, 2, -2, 3);
  const auto perfect = metrics(truth, truth);
  Matrix<double> mean_pred(truth.rows(), truth.cols());
  for (std::size_t j = 0; j < truth.cols(); ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < truth.rows(); ++i) m += truth(i, j);
    m /= static_cast<double>(truth.rows());
    for (std::size_t i = 0; i < truth.rows(); ++i) mean_pred(i, j) = m;
  }
  const auto mean = metrics(mean_pred, truth);
  const double zero_rel = rel_l2(Matrix<double>(truth.rows(), truth.cols()), truth);
  bool ok = perfect.rel_l2 <= kIdentityTol && std::abs(zero_rel - 1.0) <= kIdentityTol;
  for (std::size_t j = 0; j < truth.cols(); ++j) {
    ok = ok && perfect.r2[j] && std::abs(*perfect.r2[j] - 1.0) <= kIdentityTol && perfect.mae[j] <= kIdentityTol;
    ok = ok && mean.r2[j] && std::abs(*mean.r2[j]) <= kIdentityTol;
  }
  report(9, "metric identities", ok,
         "perfect: rel L2 " + sci(perfect.rel_l2) + ", R2 " + sci(perfect.r2[0].value_or(NAN)) + ", MAE " +
             sci(perfect.mae[0]) + "; zero: rel L2 " + sci(zero_rel) + "; mean: R2 " +
             sci(mean.r2[0].value_or(NAN)),
         t0);
}

}  // namespace

int main() {
  const std::vector<std::function<void()>> quick{ac1_equivalence, ac2_complexity_counts, ac3_flop_ratio,
                                                  ac4_tiling_memory, ac5_decoupled_inference, ac6_gradients};
  for (const auto& f : quick) {
    try {
      f();
    } catch (const std::exception& e) {
      ++failures;
      std::cout << "[FAIL] criterion aborted: " << e.what() << std::endl;
    }
  }
  try {
    const MeshBatch sphere = manufactured_sphere(20000);
    const TrainResult trained = ac7_training(sphere);
    ac8_quadrature(sphere, trained);
  } catch (const std::exception& e) {
    ++failures;
    std::cout << "[FAIL] AC7/AC8 aborted: " << e.what() << std::endl;
  }
  try {
    ac9_metric_identities();
  } catch (const std::exception& e) {
    ++failures;
    std::cout << "[FAIL] AC9 aborted: " << e.what() << std::endl;
  }
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : "all criteria passed") << std::endl;
  return failures ? 1 : 0;
}

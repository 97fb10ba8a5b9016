// transolver_cli: training, caching, decoding, verification and cost reports.
//
// Exit codes: 0 ok, 1 internal error, 2 bad input, 3 verification or
// fingerprint failure.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "transolver/transolver.hpp"

namespace fs = std::filesystem;
using namespace transolver;

namespace {

// Bad user input detected by the CLI itself (missing files, bad flags).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A verification command ran and found a violated tolerance.
class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 0;
  std::string mode = "fast";
  std::size_t tile_size = 0;
  std::size_t chunk_size = 4096;
  std::string precision = "f64";
  bool parallel = false;
  std::string out = "out";
  ModelConfig model;
  TrainConfig train;
};

std::string real(double v) {
  std::string s;
  append_real(s, v);
  return s;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw InputError(std::string("missing ") + what + " path");
  if (!fs::is_regular_file(path)) throw InputError(std::string(what) + " not found: " + path);
}

void require_dir(const std::string& path, const char* what) {
  if (!fs::is_directory(path)) throw InputError(std::string(what) + " not found: " + path);
}

void require_f64(const Globals& g, const char* cmd) {
  if (g.precision != "f64")
    throw InputError(std::string(cmd) + ": --precision f32 is only supported by bench");
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

MeshBatch load_mesh(const std::string& path) {
  require_file(path, "mesh file");
  MeshBatch m = read_mesh(path);
  m.validate();
  return m;
}

// Loads a checkpoint; --mode / --tile-size override the stored evaluation order
// when given explicitly.
Checkpoint load_model(const std::string& dir, const Globals& g, const CLI::App& app) {
  require_dir(dir, "checkpoint directory");
  Checkpoint ck = load_checkpoint(dir);
  if (app.get_option("--mode")->count()) ck.config.mode = parse_attn_mode(g.mode);
  if (app.get_option("--tile-size")->count()) ck.config.tile_size = g.tile_size;
  ck.config.validate();
  return ck;
}

// Writes query geometry plus predictions as target columns t1..tk.
void write_predictions(std::ostream& os, const MeshBatch& chunk, const Matrix<double>& pred) {
  MeshBatch rows;
  rows.coords = chunk.coords;
  rows.features = Matrix<double>(chunk.size(), 0);
  rows.normals = chunk.normals;
  rows.areas = chunk.areas;
  rows.targets = pred;
  write_mesh_rows(os, rows);
}

MeshLayout prediction_layout(const MeshLayout& query, std::size_t out_dim) {
  return {query.normals, query.area, out_dim};
}

// ---------------------------------------------------------------- commands

struct TrainArgs {
  std::vector<std::string> data, val;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  require_f64(g, "train");
  if (a.data.empty()) throw InputError("train: no --data files given");
  std::vector<MeshBatch> train_set, val_set;
  for (const auto& p : a.data) train_set.push_back(load_mesh(p));
  for (const auto& p : a.val) val_set.push_back(load_mesh(p));
  for (const auto* set : {&train_set, &val_set})
    for (const auto& m : *set)
      if (!m.targets) throw InputError("train: mesh files need target columns t1..tk");
  ModelConfig cfg = g.model;
  cfg.in_dim = 3;
  cfg.out_dim = train_set.front().targets->cols();
  cfg.mode = parse_attn_mode(g.mode);
  cfg.tile_size = g.tile_size;
  for (const auto* set : {&train_set, &val_set})
    for (const auto& m : *set)
      if (m.targets->cols() != cfg.out_dim) throw InputError("train: meshes disagree on the number of targets");
  cfg.validate();

  TrainConfig t = g.train;
  t.seed = g.seed + 1;
  t.val_chunk_size = g.chunk_size;

  fs::create_directories(g.out);
  std::ofstream metrics = open_out(fs::path(g.out) / "metrics.csv");
  write_metrics_header(metrics);
  const auto result = train(cfg, ModelParams::init(cfg, g.seed), train_set, val_set, t, [&](const EpochMetrics& e) {
    write_metrics_row(metrics, e);
    metrics.flush();
  });
  save_checkpoint(g.out, cfg, result.params);
  std::cout << "initial_val_rel_l2," << real(result.initial_val_rel_l2) << "\n"
            << "final_val_rel_l2," << real(result.final_val_rel_l2) << "\n"
            << "final_train_loss," << real(result.log.back().train_loss) << "\n";
  return 0;
}

struct InferArgs {
  std::string checkpoint, mesh;
};

int cmd_infer(const Globals& g, const CLI::App& app, const InferArgs& a) {
  require_f64(g, "infer");
  const auto ck = load_model(a.checkpoint, g, app);
  const MeshBatch mesh = load_mesh(a.mesh);
  fs::create_directories(g.out);
  std::ofstream os = open_out(fs::path(g.out) / "predictions.csv");
  write_mesh_header(os, prediction_layout(MeshLayout::of(mesh), ck.config.out_dim));
  if (mesh.size() > 0) {
    ForwardOptions opt;
    opt.parallel = g.parallel;
    const Matrix<double> pred = forward(ck.params, mesh, ck.config, opt);
    write_predictions(os, mesh, pred);
    if (mesh.targets && mesh.targets->cols() == ck.config.out_dim)
      std::cout << "rel_l2," << real(rel_l2(pred, *mesh.targets)) << "\n";
  }
  std::cout << "points," << mesh.size() << "\n";
  return 0;
}

struct CacheArgs {
  std::string checkpoint, mesh, strategy = "recompute";
};

int cmd_cache(const Globals& g, const CLI::App& app, const CacheArgs& a) {
  require_f64(g, "cache");
  const auto ck = load_model(a.checkpoint, g, app);
  require_file(a.mesh, "mesh file");
  if (a.strategy != "recompute" && a.strategy != "carry") throw InputError("unknown --strategy '" + a.strategy + "'");
  const auto strategy = a.strategy == "carry" ? CacheStrategy::carry : CacheStrategy::recompute;
  const StateCache cache = build_cache(ck.params, ck.config, FileSource(a.mesh), g.chunk_size, strategy);
  save_cache(g.out, cache);
  std::cout << "layers," << cache.layers << "\nheads," << cache.heads << "\n";
  if (cache.layers > 0) std::cout << "chunks," << cache.accumulators.front().front().tiles_seen << "\n";
  return 0;
}

struct DecodeArgs {
  std::string checkpoint, cache, query;
};

int cmd_decode(const Globals& g, const CLI::App& app, const DecodeArgs& a) {
  require_f64(g, "decode");
  const auto ck = load_model(a.checkpoint, g, app);
  require_dir(a.cache, "cache directory");
  require_file(a.query, "query mesh");
  const StateCache cache = load_cache(a.cache);
  fs::create_directories(g.out);
  std::ofstream os = open_out(fs::path(g.out) / "predictions.csv");
  write_mesh_header(os, prediction_layout(ChunkedMeshReader(a.query).layout(), ck.config.out_dim));
  const auto summary = decode_stream(cache, ck.params, ck.config, FileSource(a.query), g.chunk_size,
                                     [&](const MeshBatch& chunk, const Matrix<double>& pred) {
                                       write_predictions(os, chunk, pred);
                                       if (!os) throw std::runtime_error("write failed");
                                     });
  std::cout << "points," << summary.points << "\nchunks," << summary.chunks << "\n";
  return 0;
}

struct CheckArgs {
  std::size_t seeds = 100, max_n = 2048, stack_seeds = 5;
  double tol = 1e-10, stack_tol = 1e-9;
};

int cmd_check(const Globals& g, const CheckArgs& a) {
  require_f64(g, "check-equivalence");
  EquivalenceOptions opt{a.seeds, a.max_n, g.seed, a.stack_seeds, a.tol, a.stack_tol};
  const auto rep = run_equivalence_suite(opt);
  fs::create_directories(g.out);
  std::ofstream os = open_out(fs::path(g.out) / "equivalence.csv");
  os << "seed,level,variant,n,channels,slices,rel_err\n";
  for (const auto& c : rep.cases)
    os << c.seed << ',' << c.level << ',' << c.variant << ',' << c.n << ',' << c.channels << ',' << c.slices << ','
       << real(c.rel_err) << '\n';
  auto describe = [](const EquivalenceCase& c) {
    return c.variant + " seed=" + std::to_string(c.seed) + " n=" + std::to_string(c.n);
  };
  std::cout << "head_worst," << real(rep.worst_head) << "," << describe(rep.worst_head_case) << "\n"
            << "stack_worst," << real(rep.worst_stack) << "," << describe(rep.worst_stack_case) << "\n"
            << "cases," << rep.cases.size() << "\n"
            << (rep.passed ? "PASS" : "FAIL") << "\n";
  if (!rep.passed) throw VerificationFailure("equivalence tolerance exceeded");
  return 0;
}

struct FlopsArgs {
  double n = 1e6;
  std::vector<double> tile_sweep;
  bool training = true;
};

int cmd_flops(const Globals& g, const FlopsArgs& a) {
  require_f64(g, "flops");
  g.model.validate();
  const double c = double(g.model.channels), m = double(g.model.slices), h = double(g.model.heads),
               l = double(g.model.layers ? g.model.layers : 1);
  const CostDims dims{a.n, m, c, h, l, double(g.tile_size)};
  fs::create_directories(g.out);
  std::ofstream os = open_out(fs::path(g.out) / "flops.csv");
  os << "variant,op,time_flops,space_bytes,n_dependent\n";
  const auto vals = dims.values();
  double totals[2] = {0, 0};
  for (auto v : {CostVariant::original, CostVariant::optimized}) {
    const auto rep = cost_model(v, dims);
    for (const auto& t : rep.terms)
      os << to_string(v) << ',' << '"' << t.op << '"' << ',' << real(t.time_flops().evaluate(vals)) << ','
         << real(8.0 * t.space.evaluate(vals)) << ',' << (t.n_dependent() ? 1 : 0) << '\n';
    totals[v == CostVariant::optimized] = rep.time_flops;
    std::cout << to_string(v) << ",n_related_time," << rep.n_related_time << ",n_related_space,"
              << rep.n_related_space << ",time_flops," << real(rep.time_flops) << "\n";
  }
  std::cout << "ratio," << real(totals[1] / totals[0]) << "\n";

  std::vector<double> tiles = a.tile_sweep;
  if (tiles.empty()) tiles.push_back(double(g.tile_size));
  std::ofstream ms = open_out(fs::path(g.out) / "memory.csv");
  ms << "variant,tile_size,training,peak_bytes,weight_buffer_bytes,retains_nm_buffer\n";
  for (auto v : {CostVariant::original, CostVariant::optimized})
    for (double t : tiles) {
      const auto rep = memory_model(v, {{a.n, m, c, h, l, t}, 8.0}, a.training);
      ms << to_string(v) << ',' << real(t) << ',' << (a.training ? 1 : 0) << ',' << real(rep.peak_bytes) << ','
         << real(rep.weight_buffer_bytes) << ',' << (rep.retains_nm_buffer ? 1 : 0) << '\n';
    }
  return 0;
}

struct BenchArgs {
  std::vector<std::size_t> sizes{4096, 16384};
  std::size_t repeats = 3;
};

template <class T>
void bench_one(const Globals& g, std::size_t n, std::size_t repeats, std::ostream& os) {
  Rng rng(g.seed);
  const std::size_t ch = g.model.head_channels();
  const auto x = rng.uniform_matrix<T>(n, g.model.channels, T(-1), T(1));
  std::vector<HeadParams<T>> heads;
  for (std::size_t i = 0; i < g.model.heads; ++i) heads.push_back(HeadParams<T>::init(ch, g.model.slices, rng));
  for (AttnMode mode : {AttnMode::original, AttnMode::fast, AttnMode::tiled}) {
    const std::size_t tile = mode == AttnMode::tiled ? (g.tile_size ? std::min(g.tile_size, n) : std::max<std::size_t>(1, n / 8)) : 0;
    std::vector<double> secs;
    OpCounters oc;
    for (std::size_t r = 0; r < repeats; ++r) {
      OpCounters run;
      const auto t0 = std::chrono::steady_clock::now();
      {
        CounterScope scope(run);
        multihead_physattn<T>(x, heads, mode, {tile, g.parallel});
      }
      secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      oc = run;
    }
    std::sort(secs.begin(), secs.end());
    os << to_string(mode) << ',' << g.precision << ',' << n << ',' << tile << ',' << real(secs[secs.size() / 2])
       << ',' << oc.madds << ',' << oc.peak_weight_elems << '\n';
  }
}

int cmd_bench(const Globals& g, const BenchArgs& a) {
  if (g.precision != "f32" && g.precision != "f64") throw InputError("--precision must be f32 or f64");
  if (a.repeats == 0) throw InputError("bench: --repeats must be >= 1");
  g.model.validate();
  fs::create_directories(g.out);
  std::ofstream os = open_out(fs::path(g.out) / "bench.csv");
  os << "mode,precision,n,tile_size,seconds,madds,peak_weight_elems\n";
  for (std::size_t n : a.sizes) {
    if (n == 0) throw InputError("bench: sizes must be >= 1");
    if (g.precision == "f32")
      bench_one<float>(g, n, a.repeats, os);
    else
      bench_one<double>(g, n, a.repeats, os);
  }
  std::cout << "wrote " << (fs::path(g.out) / "bench.csv").string() << "\n";
  return 0;
}

struct IntegrateArgs {
  std::vector<std::string> pred, truth;
  FlowConstants fc;
  std::vector<double> drag_dir{1, 0, 0}, lift_dir{0, 0, 1};
};

int cmd_integrate(const Globals& g, IntegrateArgs a) {
  require_f64(g, "integrate");
  if (a.pred.empty()) throw InputError("integrate: no --pred files given");
  if (!a.truth.empty() && a.truth.size() != a.pred.size())
    throw InputError("integrate: --truth must list one file per --pred file");
  a.fc.drag_dir = {a.drag_dir[0], a.drag_dir[1], a.drag_dir[2]};
  a.fc.lift_dir = {a.lift_dir[0], a.lift_dir[1], a.lift_dir[2]};
  a.fc.validate();
  fs::create_directories(g.out);
  std::ofstream os = open_out(fs::path(g.out) / "coefficients.csv");
  os << "file,cd,cl" << (a.truth.empty() ? "" : ",cd_true,cl_true,field_rel_l2") << '\n';
  std::vector<double> cd, cl, cd_t, cl_t;
  for (std::size_t i = 0; i < a.pred.size(); ++i) {
    const MeshBatch pred = load_mesh(a.pred[i]);
    if (!pred.targets) throw InputError(a.pred[i] + ": no pressure column t1");
    std::optional<MeshBatch> truth;
    if (!a.truth.empty()) {
      truth = load_mesh(a.truth[i]);
      if (!truth->targets || truth->size() != pred.size())
        throw InputError(a.truth[i] + ": truth must have the same points and a t1 column");
    }
    const MeshBatch& geom = truth && truth->normals ? *truth : pred;
    if (!geom.normals || !geom.areas) throw InputError(a.pred[i] + ": normals and area columns are required");
    auto pressure = [](const MeshBatch& m) {
      std::vector<double> p(m.size());
      for (std::size_t k = 0; k < m.size(); ++k) p[k] = (*m.targets)(k, 0);
      return p;
    };
    const auto f = integrate_force(geom, pressure(pred), nullptr, a.fc);
    cd.push_back(f.cd);
    cl.push_back(f.cl);
    os << a.pred[i] << ',' << real(f.cd) << ',' << real(f.cl);
    if (truth) {
      const auto ft = integrate_force(geom, pressure(*truth), nullptr, a.fc);
      cd_t.push_back(ft.cd);
      cl_t.push_back(ft.cl);
      const Matrix<double> pm(pred.size(), 1, pressure(pred)), tm(pred.size(), 1, pressure(*truth));
      os << ',' << real(ft.cd) << ',' << real(ft.cl) << ',' << real(rel_l2(pm, tm));
    }
    os << '\n';
  }
  if (!cd_t.empty()) {
    auto show = [](const std::optional<double>& r) { return r ? real(*r) : std::string("undefined"); };
    std::cout << "cd_r2," << show(r2_score(cd, cd_t)) << "\ncd_mae," << real(mae(cd, cd_t)) << "\ncl_r2,"
              << show(r2_score(cl, cl_t)) << "\ncl_mae," << real(mae(cl, cl_t)) << "\n";
  } else {
    for (std::size_t i = 0; i < cd.size(); ++i) std::cout << "cd," << real(cd[i]) << ",cl," << real(cl[i]) << "\n";
  }
  return 0;
}

struct SampleArgs {
  std::string mesh;
  std::size_t n = 2048;
};

int cmd_sample(const Globals& g, const SampleArgs& a) {
  require_f64(g, "sample-subset");
  const MeshBatch mesh = load_mesh(a.mesh);
  if (a.n == 0 || a.n > mesh.size())
    throw InputError("sample-subset: --n must be in [1, " + std::to_string(mesh.size()) + "]");
  Rng rng(g.seed);
  const MeshBatch sub = amortized_sample(mesh, a.n, rng);
  fs::create_directories(g.out);
  std::ofstream os = open_out(fs::path(g.out) / "subset.csv");
  write_mesh(os, sub);
  std::ofstream is = open_out(fs::path(g.out) / "subset_indices.csv");
  is << "index\n";
  for (std::size_t i = 0; i < sub.size(); ++i) is << sub.original_index(i) << '\n';
  std::cout << "points," << sub.size() << "\n";
  return 0;
}

struct ExportArgs {
  std::string checkpoint, mesh;
  std::size_t layer = 0, head = 0;
};

int cmd_export(const Globals& g, const CLI::App& app, const ExportArgs& a) {
  require_f64(g, "export-slices");
  const auto ck = load_model(a.checkpoint, g, app);
  if (a.layer >= ck.config.layers) throw InputError("export-slices: --layer out of range");
  if (a.head >= ck.config.heads) throw InputError("export-slices: --head out of range");
  const MeshBatch mesh = load_mesh(a.mesh);
  const std::size_t ch = ck.config.head_channels();
  Matrix<double> w;
  ForwardOptions opt;
  opt.on_attention_input = [&](std::size_t l, const Matrix<double>& h) {
    if (l == a.layer) w = slice_weights(h.col_block(a.head * ch, ch), ck.params.layers[l].heads[a.head]);
  };
  forward(ck.params, mesh, ck.config, opt);
  fs::create_directories(g.out);
  std::ofstream os = open_out(fs::path(g.out) / "slices.csv");
  os << "index";
  for (std::size_t j = 1; j <= w.cols(); ++j) os << ",w" << j;
  os << '\n';
  std::string line;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    line = std::to_string(mesh.original_index(i));
    for (double v : w.row(i)) {
      line += ',';
      append_real(line, v);
    }
    os << line << '\n';
  }
  std::cout << "points," << w.rows() << "\nslices," << w.cols() << "\n";
  return 0;
}

struct GenArgs {
  std::size_t n = 20000;
  std::string kind = "fibonacci";
  std::size_t reference_points = 1'000'000;
};

int cmd_gen(const Globals& g, const GenArgs& a) {
  require_f64(g, "gen-mesh");
  if (a.n < 4) throw InputError("gen-mesh: --n must be >= 4");
  MeshBatch mesh;
  if (a.kind == "fibonacci") {
    mesh = gen_sphere_mesh(a.n);
  } else if (a.kind == "random") {
    Rng rng(g.seed);
    mesh = random_sphere_sample(a.n, rng);
  } else {
    throw InputError("gen-mesh: unknown --kind '" + a.kind + "'");
  }
  mesh.targets = manufactured_field(mesh.coords);
  fs::create_directories(g.out);
  write_mesh((fs::path(g.out) / "mesh.csv").string(), mesh);
  const FlowConstants fc;
  const MeshBatch ref_mesh = gen_sphere_mesh(a.reference_points);
  const auto ref = integrate_force(ref_mesh, manufactured_field(ref_mesh.coords), fc);
  const auto here = integrate_force(mesh, *mesh.targets, fc);
  nlohmann::ordered_json j = {{"field", "sin(3x)*cos(2y)+z^2"},
                              {"surface", "unit sphere"},
                              {"reference_points", a.reference_points},
                              {"reference_quadrature", "fibonacci, equal areas"},
                              {"p_inf", fc.p_inf},
                              {"rho_inf", fc.rho_inf},
                              {"v_inf", fc.v_inf},
                              {"a_ref", fc.a_ref},
                              {"drag_dir", fc.drag_dir},
                              {"lift_dir", fc.lift_dir},
                              {"reference_cd", ref.cd},
                              {"reference_cl", ref.cl},
                              {"reference_force", ref.force},
                              {"mesh_points", a.n},
                              {"mesh_kind", a.kind},
                              {"mesh_cd", here.cd},
                              {"mesh_cl", here.cl}};
  std::ofstream os = open_out(fs::path(g.out) / "reference.json");
  os << j.dump(2) << '\n';
  std::cout << "points," << a.n << "\nreference_cd," << real(ref.cd) << "\nmesh_cd," << real(here.cd) << "\n";
  return 0;
}

std::string toml_value(const std::string& v) {
  double d = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), d);
  if (!v.empty() && r.ec == std::errc() && r.ptr == v.data() + v.size()) return v;
  if (v == "true" || v == "false") return v;
  return nlohmann::json(v).dump();
}

// Resolved settings: every global value, then the chosen subcommand's options.
void write_run_config(const CLI::App& cmd, const Globals& g) {
  fs::create_directories(g.out);
  std::ofstream os = open_out(fs::path(g.out) / "run_config.toml");
  const ModelConfig& m = g.model;
  const TrainConfig& t = g.train;
  os << "seed = " << g.seed << "\nmode = \"" << g.mode << "\"\ntile-size = " << g.tile_size
     << "\nchunk-size = " << g.chunk_size << "\nprecision = \"" << g.precision
     << "\"\nparallel = " << (g.parallel ? "true" : "false") << "\nout = " << nlohmann::json(g.out).dump() << "\n"
     << "layers = " << m.layers << "\nheads = " << m.heads << "\nchannels = " << m.channels
     << "\nslices = " << m.slices << "\nffn-hidden = " << m.ffn_hidden << "\nbias = " << (m.bias ? "true" : "false")
     << "\nepochs = " << t.epochs << "\nlr = " << real(t.lr) << "\nmin-lr = " << real(t.min_lr)
     << "\nwarmup-fraction = " << real(t.warmup_fraction) << "\nweight-decay = " << real(t.adamw.weight_decay)
     << "\nsubset-size = " << t.subset_size << "\nsteps-per-epoch = " << t.steps_per_epoch
     << "\ngrad-clip = " << real(t.grad_clip) << "\nvalidate-every = " << t.validate_every << "\n\n";
  os << "[" << cmd.get_name() << "]\n";
  for (const CLI::Option* o : cmd.get_options()) {
    const std::string name = o->get_single_name();
    if (name == "help") continue;
    std::vector<std::string> vals;
    if (o->count()) {
      vals = o->results();
    } else {
      std::string d = o->get_default_str();
      if (d == "{}" || d == "[]") d.clear();
      if (!d.empty() && d.front() == '[' && d.back() == ']') d = d.substr(1, d.size() - 2);
      for (std::size_t b = 0; !d.empty();) {
        const std::size_t e = d.find(',', b);
        vals.push_back(d.substr(b, e == std::string::npos ? std::string::npos : e - b));
        if (e == std::string::npos) break;
        b = e + 1;
      }
    }
    const bool list = o->get_expected_max() > 1;
    if (vals.empty()) continue;
    os << name << " = ";
    if (list) os << "[";
    for (std::size_t i = 0; i < vals.size(); ++i) os << (i ? ", " : "") << toml_value(vals[i]);
    if (list) os << "]";
    os << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-Attention training, caching and verification"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML config file; flags override its values");
  app.option_defaults()->always_capture_default();

  Globals g;
  app.add_option("--seed", g.seed, "Seed for initialization and sampling");
  app.add_option("--mode", g.mode, "Attention evaluation order")->check(CLI::IsMember({"original", "fast", "tiled"}));
  app.add_option("--tile-size", g.tile_size, "Points per tile in tiled mode (0: whole mesh)");
  app.add_option("--chunk-size", g.chunk_size, "Points per chunk for streamed cache/decode/validation")
      ->check(CLI::PositiveNumber);
  app.add_option("--precision", g.precision, "f64, or f32 for bench only")->check(CLI::IsMember({"f32", "f64"}));
  app.add_flag("--parallel", g.parallel, "Enable parallel tiles and decoding");
  app.add_option("--out", g.out, "Output directory");

  auto* model = app.add_option_group("model");
  model->add_option("--layers", g.model.layers);
  model->add_option("--heads", g.model.heads);
  model->add_option("--channels", g.model.channels);
  model->add_option("--slices", g.model.slices);
  model->add_option("--ffn-hidden", g.model.ffn_hidden);
  model->add_option("--bias", g.model.bias, "Biases in Linear1/2/3");
  auto* training = app.add_option_group("training");
  training->add_option("--epochs", g.train.epochs);
  training->add_option("--lr", g.train.lr);
  training->add_option("--min-lr", g.train.min_lr);
  training->add_option("--warmup-fraction", g.train.warmup_fraction);
  training->add_option("--weight-decay", g.train.adamw.weight_decay);
  training->add_option("--subset-size", g.train.subset_size, "Points per step (0: full mesh)");
  training->add_option("--steps-per-epoch", g.train.steps_per_epoch, "0: sum of ceil(N/n) over meshes");
  training->add_option("--grad-clip", g.train.grad_clip);
  training->add_option("--validate-every", g.train.validate_every);

  auto sub = [&](const char* name, const char* desc) {
    auto* s = app.add_subcommand(name, desc);
    s->fallthrough();
    s->configurable();
    return s;
  };

  TrainArgs train_a;
  auto* train_c = sub("train", "Geometry-amortized training; writes checkpoint and metrics.csv");
  train_c->add_option("--data", train_a.data, "Training mesh files (with targets)")->required();
  train_c->add_option("--val", train_a.val, "Validation mesh files (default: training meshes)");

  InferArgs infer_a;
  auto* infer_c = sub("infer", "Monolithic forward pass over a mesh");
  infer_c->add_option("--checkpoint", infer_a.checkpoint)->required();
  infer_c->add_option("--mesh", infer_a.mesh)->required();

  CacheArgs cache_a;
  auto* cache_c = sub("cache", "Build the physical state cache from a mesh file in chunks");
  cache_c->add_option("--checkpoint", cache_a.checkpoint)->required();
  cache_c->add_option("--mesh", cache_a.mesh)->required();
  cache_c->add_option("--strategy", cache_a.strategy, "recompute or carry");

  DecodeArgs decode_a;
  auto* decode_c = sub("decode", "Decode query points against a state cache");
  decode_c->add_option("--checkpoint", decode_a.checkpoint)->required();
  decode_c->add_option("--cache", decode_a.cache)->required();
  decode_c->add_option("--query", decode_a.query)->required();

  CheckArgs check_a;
  auto* check_c = sub("check-equivalence", "Randomized original/fast/tiled equivalence suite");
  check_c->add_option("--seeds", check_a.seeds);
  check_c->add_option("--max-n", check_a.max_n);
  check_c->add_option("--stack-seeds", check_a.stack_seeds);
  check_c->add_option("--tol", check_a.tol);
  check_c->add_option("--stack-tol", check_a.stack_tol);

  FlopsArgs flops_a;
  auto* flops_c = sub("flops", "Analytical FLOP and memory report");
  flops_c->add_option("--n", flops_a.n, "Number of mesh points");
  flops_c->add_option("--tile-sweep", flops_a.tile_sweep, "Tile sizes for memory.csv");
  flops_c->add_option("--training", flops_a.training, "Memory model for training (retained buffers)");

  BenchArgs bench_a;
  auto* bench_c = sub("bench", "Latency of the three evaluation orders (informational)");
  bench_c->add_option("--sizes", bench_a.sizes);
  bench_c->add_option("--repeats", bench_a.repeats);

  IntegrateArgs int_a;
  auto* int_c = sub("integrate", "Drag/lift from predicted pressure; R2/MAE against truth");
  int_c->add_option("--pred", int_a.pred)->required();
  int_c->add_option("--truth", int_a.truth);
  int_c->add_option("--p-inf", int_a.fc.p_inf);
  int_c->add_option("--rho-inf", int_a.fc.rho_inf);
  int_c->add_option("--v-inf", int_a.fc.v_inf);
  int_c->add_option("--a-ref", int_a.fc.a_ref)->default_str(real(int_a.fc.a_ref));
  int_c->add_option("--drag-dir", int_a.drag_dir)->expected(3);
  int_c->add_option("--lift-dir", int_a.lift_dir)->expected(3);

  SampleArgs sample_a;
  auto* sample_c = sub("sample-subset", "Uniform subset of a mesh without replacement");
  sample_c->add_option("--mesh", sample_a.mesh)->required();
  sample_c->add_option("--n", sample_a.n);

  ExportArgs export_a;
  auto* export_c = sub("export-slices", "Per-point slice weights of one layer and head");
  export_c->add_option("--checkpoint", export_a.checkpoint)->required();
  export_c->add_option("--mesh", export_a.mesh)->required();
  export_c->add_option("--layer", export_a.layer);
  export_c->add_option("--head", export_a.head);

  GenArgs gen_a;
  auto* gen_c = sub("gen-mesh", "Sphere mesh with the manufactured field and a reference-integral JSON");
  gen_c->add_option("--n", gen_a.n);
  gen_c->add_option("--kind", gen_a.kind, "fibonacci or random");
  gen_c->add_option("--reference-points", gen_a.reference_points);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const CLI::App* chosen = app.get_subcommands().front();
  try {
    write_run_config(*chosen, g);
    if (chosen == train_c) return cmd_train(g, train_a);
    if (chosen == infer_c) return cmd_infer(g, app, infer_a);
    if (chosen == cache_c) return cmd_cache(g, app, cache_a);
    if (chosen == decode_c) return cmd_decode(g, app, decode_a);
    if (chosen == check_c) return cmd_check(g, check_a);
    if (chosen == flops_c) return cmd_flops(g, flops_a);
    if (chosen == bench_c) return cmd_bench(g, bench_a);
    if (chosen == int_c) return cmd_integrate(g, int_a);
    if (chosen == sample_c) return cmd_sample(g, sample_a);
    if (chosen == export_c) return cmd_export(g, app, export_a);
    if (chosen == gen_c) return cmd_gen(g, gen_a);
    return 1;
  } catch (const VerificationFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const FingerprintError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DegenerateError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}

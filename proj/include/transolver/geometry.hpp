#pragma once

// Synthetic surface meshes, manufactured fields, and surface-force quadrature.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <vector>

#include "transolver/error.hpp"
#include "transolver/linalg.hpp"
#include "transolver/mesh.hpp"

namespace transolver {

using Vec3 = std::array<double, 3>;

inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

struct FlowConstants {
  double p_inf = 0.0;
  double rho_inf = 1.0;
  double v_inf = 1.0;
  double a_ref = std::numbers::pi;  // frontal area of the unit sphere
  Vec3 drag_dir{1.0, 0.0, 0.0};
  Vec3 lift_dir{0.0, 0.0, 1.0};

  void validate() const {
    if (!(rho_inf > 0.0) || !(v_inf > 0.0) || !(a_ref > 0.0))
      throw DegenerateError("flow constants: rho_inf, v_inf and A_ref must be positive");
    if (std::abs(norm(drag_dir) - 1.0) > 1e-9 || std::abs(norm(lift_dir) - 1.0) > 1e-9)
      throw DegenerateError("flow constants: drag/lift directions must be unit vectors");
  }

  double dynamic_pressure_area() const { return 0.5 * rho_inf * v_inf * v_inf * a_ref; }
};

// Fibonacci lattice on the unit sphere: exact outward normals, equal areas 4π/n.
inline MeshBatch gen_sphere_mesh(std::size_t n_points) {
  if (n_points < 4) throw ShapeError("gen_sphere_mesh: need at least 4 points");
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  const double n = static_cast<double>(n_points);
  MeshBatch m;
  m.coords = Matrix<double>(n_points, 3);
  m.features = Matrix<double>(n_points, 0);
  m.areas = Matrix<double>(n_points, 1, 4.0 * std::numbers::pi / n);
  for (std::size_t i = 0; i < n_points; ++i) {
    const double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * static_cast<double>(i);
    m.coords(i, 0) = r * std::cos(phi);
    m.coords(i, 1) = r * std::sin(phi);
    m.coords(i, 2) = z;
  }
  m.normals = m.coords;
  for (std::size_t i = 0; i < n_points; ++i) {
    auto r = m.normals->row(i);
    const double len = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
    for (auto& v : r) v /= len;
  }
  return m;
}

// Area-uniform random points on the unit sphere, each carrying weight 4π/n.
inline MeshBatch random_sphere_sample(std::size_t n_points, Rng& rng) {
  if (n_points == 0) throw ShapeError("random_sphere_sample: need at least one point");
  MeshBatch m;
  m.coords = Matrix<double>(n_points, 3);
  m.features = Matrix<double>(n_points, 0);
  m.areas = Matrix<double>(n_points, 1, 4.0 * std::numbers::pi / static_cast<double>(n_points));
  for (std::size_t i = 0; i < n_points; ++i) {
    Vec3 g{};
    double len = 0.0;
    while (len < 1e-12) {
      g = {rng.normal(), rng.normal(), rng.normal()};
      len = norm(g);
    }
    for (int k = 0; k < 3; ++k) m.coords(i, k) = g[k] / len;
  }
  m.normals = m.coords;
  return m;
}

// p(x, y, z) = sin(3x) cos(2y) + z²
inline double manufactured_pressure(double x, double y, double z) {
  return std::sin(3.0 * x) * std::cos(2.0 * y) + z * z;
}

inline Matrix<double> manufactured_field(const Matrix<double>& coords) {
  if (coords.cols() != 3) throw ShapeError("manufactured_field: coordinates must be 3-D");
  Matrix<double> p(coords.rows(), 1);
  for (std::size_t i = 0; i < coords.rows(); ++i)
    p(i, 0) = manufactured_pressure(coords(i, 0), coords(i, 1), coords(i, 2));
  return p;
}

// Tangential shear: g(x) = (cos y, sin z, x y) with its normal component removed.
inline Matrix<double> manufactured_shear(const Matrix<double>& coords, const Matrix<double>& normals) {
  Matrix<double> tau(coords.rows(), 3);
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    const Vec3 g{std::cos(coords(i, 1)), std::sin(coords(i, 2)), coords(i, 0) * coords(i, 1)};
    const Vec3 n{normals(i, 0), normals(i, 1), normals(i, 2)};
    const double gn = dot(g, n);
    for (int k = 0; k < 3; ++k) tau(i, k) = g[k] - gn * n[k];
  }
  return tau;
}

struct ForceResult {
  Vec3 force{};
  double cd = 0.0;
  double cl = 0.0;
};

// F = Σ_i [-(p_i - p∞) n_i + τ_i] ΔS_i, Cd = F·d̂ / (½ρ∞v∞²A), Cl likewise.
inline ForceResult integrate_force(const MeshBatch& mesh, std::span<const double> pressure,
                                   const Matrix<double>* shear, const FlowConstants& fc) {
  if (!mesh.normals || !mesh.areas) throw ShapeError("integrate_force: mesh needs normals and areas");
  fc.validate();
  const std::size_t n = mesh.size();
  if (pressure.size() != n) throw ShapeError("integrate_force: pressure length mismatch");
  if (shear && (shear->rows() != n || shear->cols() != 3))
    throw ShapeError("integrate_force: shear must be N x 3");
  ForceResult r;
  for (std::size_t i = 0; i < n; ++i) {
    const double ds = (*mesh.areas)(i, 0);
    const double dp = pressure[i] - fc.p_inf;
    for (int k = 0; k < 3; ++k) {
      double f = -dp * (*mesh.normals)(i, k);
      if (shear) f += (*shear)(i, k);
      r.force[k] += f * ds;
    }
  }
  const double q = fc.dynamic_pressure_area();
  r.cd = dot(r.force, fc.drag_dir) / q;
  r.cl = dot(r.force, fc.lift_dir) / q;
  return r;
}

inline ForceResult integrate_force(const MeshBatch& mesh, const Matrix<double>& pressure,
                                   const FlowConstants& fc) {
  if (pressure.cols() != 1) throw ShapeError("integrate_force: pressure must be one column");
  return integrate_force(mesh, pressure.data(), nullptr, fc);
}

// Least-squares slope of log(y) against log(x), skipping non-positive y.
inline double loglog_slope(std::span<const double> x, std::span<const double> y) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t k = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(y[i] > 0.0)) continue;
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++k;
  }
  if (k < 2) throw DegenerateError("loglog_slope: fewer than two positive errors");
  const double kk = static_cast<double>(k);
  return (kk * sxy - sx * sy) / (kk * sxx - sx * sx);
}

using ScalarField = std::function<double(double, double, double)>;

// Drag coefficient of a pressure field on a given surface sample (no shear).
inline double drag_coefficient(const MeshBatch& mesh, const ScalarField& field, const FlowConstants& fc) {
  std::vector<double> p(mesh.size());
  for (std::size_t i = 0; i < mesh.size(); ++i)
    p[i] = field(mesh.coords(i, 0), mesh.coords(i, 1), mesh.coords(i, 2));
  return integrate_force(mesh, p, nullptr, fc).cd;
}

// High-resolution Fibonacci quadrature used as the reference value.
inline double reference_drag_coefficient(const ScalarField& field, const FlowConstants& fc,
                                         std::size_t n_points = 1'000'000) {
  return drag_coefficient(gen_sphere_mesh(n_points), field, fc);
}

struct ConvergencePoint {
  std::size_t n_samples = 0;
  double error = 0.0;  // RMS |Cd - Cd_ref| over repetitions
};

struct ConvergenceReport {
  std::vector<ConvergencePoint> points;
  double slope = 0.0;
};

// Cd error of random area-uniform sphere sampling at each N_s, RMS over
// `repetitions` independent draws, and the fitted log-log slope.
inline ConvergenceReport quadrature_convergence(const ScalarField& field,
                                                std::span<const std::size_t> sample_sizes,
                                                double reference_cd, const FlowConstants& fc,
                                                std::size_t repetitions, std::uint64_t seed) {
  if (sample_sizes.size() < 3) throw ShapeError("quadrature_convergence: need >= 3 sample sizes");
  const auto [lo, hi] = std::minmax_element(sample_sizes.begin(), sample_sizes.end());
  if (static_cast<double>(*hi) < 10.0 * static_cast<double>(*lo))
    throw ShapeError("quadrature_convergence: sample sizes must span at least one decade");
  Rng rng(seed);
  ConvergenceReport rep;
  std::vector<double> xs, ys;
  for (std::size_t ns : sample_sizes) {
    double sq = 0.0;
    for (std::size_t r = 0; r < repetitions; ++r) {
      const double e = drag_coefficient(random_sphere_sample(ns, rng), field, fc) - reference_cd;
      sq += e * e;
    }
    const double rms = std::sqrt(sq / static_cast<double>(repetitions));
    rep.points.push_back({ns, rms});
    xs.push_back(static_cast<double>(ns));
    ys.push_back(rms);
  }
  rep.slope = loglog_slope(xs, ys);
  return rep;
}

}  // namespace transolver

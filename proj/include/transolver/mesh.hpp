#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "transolver/error.hpp"
#include "transolver/linalg.hpp"

namespace transolver {

// A sampled geometry. Every optional block, when present, has one row per point.
struct MeshBatch {
  Matrix<double> coords;                  // N × C_in
  Matrix<double> features;                // N × F, F may be 0
  std::optional<Matrix<double>> normals;  // N × 3, unit length
  std::optional<Matrix<double>> areas;    // N × 1, quadrature weights ΔS_i
  std::optional<Matrix<double>> targets;  // N × out_dim
  std::vector<std::size_t> indices;       // original point indices; empty means 0..N-1

  std::size_t size() const { return coords.rows(); }

  std::size_t original_index(std::size_t i) const { return indices.empty() ? i : indices[i]; }

  // Throws ShapeError / DegenerateError when an invariant is violated.
  void validate() const {
    const std::size_t n = size();
    auto rows_match = [&](const Matrix<double>& m, const char* what) {
      if (m.rows() != n)
        throw ShapeError(std::string("mesh ") + what + " has " + std::to_string(m.rows()) +
                         " rows, coords have " + std::to_string(n));
    };
    if (features.cols() > 0) rows_match(features, "features");
    if (normals) {
      rows_match(*normals, "normals");
      if (normals->cols() != 3) throw ShapeError("mesh normals must have 3 columns");
      for (std::size_t i = 0; i < n; ++i) {
        auto r = normals->row(i);
        const double len = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
        if (std::abs(len - 1.0) > 1e-9)
          throw DegenerateError("normal " + std::to_string(i) + " is not unit length");
      }
    }
    if (areas) {
      rows_match(*areas, "areas");
      for (std::size_t i = 0; i < n; ++i)
        if (!((*areas)(i, 0) > 0.0))
          throw DegenerateError("area " + std::to_string(i) + " is not positive");
    }
    if (targets) rows_match(*targets, "targets");
    if (!indices.empty() && indices.size() != n) throw ShapeError("mesh index list length mismatch");
  }

  MeshBatch slice(std::size_t begin, std::size_t end) const {
    MeshBatch out;
    out.coords = coords.rows_range(begin, end);
    out.features = features.cols() ? features.rows_range(begin, end) : Matrix<double>(end - begin, 0);
    if (normals) out.normals = normals->rows_range(begin, end);
    if (areas) out.areas = areas->rows_range(begin, end);
    if (targets) out.targets = targets->rows_range(begin, end);
    out.indices.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) out.indices.push_back(original_index(i));
    return out;
  }

  MeshBatch gather(const std::vector<std::size_t>& rows) const {
    auto pick = [&](const Matrix<double>& m) {
      Matrix<double> out(rows.size(), m.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        auto src = m.row(rows[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
      }
      return out;
    };
    MeshBatch out;
    out.coords = pick(coords);
    out.features = pick(features);
    if (normals) out.normals = pick(*normals);
    if (areas) out.areas = pick(*areas);
    if (targets) out.targets = pick(*targets);
    out.indices.reserve(rows.size());
    for (std::size_t r : rows) out.indices.push_back(original_index(r));
    return out;
  }

  // Appends another batch with the same column layout.
  void append(const MeshBatch& o) {
    auto cat = [](Matrix<double>& a, const Matrix<double>& b) {
      if (a.rows() == 0 && a.cols() == 0) {
        a = b;
        return;
      }
      if (a.cols() != b.cols()) throw ShapeError("append: column mismatch");
      Matrix<double> out(a.rows() + b.rows(), a.cols());
      out.set_rows(0, a);
      out.set_rows(a.rows(), b);
      a = std::move(out);
    };
    const std::size_t before = size();
    const bool had_indices = !indices.empty() || !o.indices.empty();
    if (had_indices && indices.empty())
      for (std::size_t i = 0; i < before; ++i) indices.push_back(i);
    cat(coords, o.coords);
    if (features.rows() == 0 && features.cols() == 0 && o.features.cols() == 0)
      features = Matrix<double>(size(), 0);
    else
      cat(features, o.features);
    auto cat_opt = [&](std::optional<Matrix<double>>& a, const std::optional<Matrix<double>>& b) {
      if (!b) {
        if (a) throw ShapeError("append: optional block missing in appended batch");
        return;
      }
      if (!a) {
        if (before != 0) throw ShapeError("append: optional block missing in base batch");
        a = Matrix<double>();
      }
      cat(*a, *b);
    };
    cat_opt(normals, o.normals);
    cat_opt(areas, o.areas);
    cat_opt(targets, o.targets);
    if (had_indices)
      for (std::size_t i = 0; i < o.size(); ++i) indices.push_back(o.original_index(i) + (o.indices.empty() ? before : 0));
  }
};

}  // namespace transolver

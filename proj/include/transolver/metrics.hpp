#pragma once

// Field and coefficient error metrics.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "transolver/error.hpp"
#include "transolver/linalg.hpp"

namespace transolver {

// ‖ŷ − y‖₂ / ‖y‖₂ jointly over every entry.
inline double rel_l2(const Matrix<double>& pred, const Matrix<double>& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
    throw ShapeError("rel_l2: shape mismatch " + pred.shape_str() + " vs " + truth.shape_str());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data()[i] - truth.data()[i];
    num += d * d;
    den += truth.data()[i] * truth.data()[i];
  }
  if (den == 0.0) throw DegenerateError("rel_l2: truth has zero norm");
  return std::sqrt(num) / std::sqrt(den);
}

// 1 − Σ(y − ŷ)² / Σ(y − ȳ)²; nullopt when the truth series is constant.
inline std::optional<double> r2_score(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw ShapeError("r2_score: length mismatch");
  if (truth.size() < 2) return std::nullopt;
  double mean = 0.0;
  for (double y : truth) mean += y;
  mean /= static_cast<double>(truth.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot == 0.0) return std::nullopt;
  return 1.0 - ss_res / ss_tot;
}

inline double mae(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw ShapeError("mae: length mismatch");
  if (truth.empty()) throw ShapeError("mae: empty series");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += std::abs(truth[i] - pred[i]);
  return s / static_cast<double>(truth.size());
}

struct MetricsReport {
  double rel_l2 = 0.0;
  std::vector<std::optional<double>> r2;  // per column
  std::vector<double> mae;                // per column
};

// Rows are samples, columns are scalar series.
inline MetricsReport metrics(const Matrix<double>& pred, const Matrix<double>& truth) {
  MetricsReport rep;
  rep.rel_l2 = rel_l2(pred, truth);
  for (std::size_t j = 0; j < truth.cols(); ++j) {
    std::vector<double> p(pred.rows()), t(truth.rows());
    for (std::size_t i = 0; i < truth.rows(); ++i) {
      p[i] = pred(i, j);
      t[i] = truth(i, j);
    }
    rep.r2.push_back(r2_score(p, t));
    rep.mae.push_back(mae(p, t));
  }
  return rep;
}

}  // namespace transolver

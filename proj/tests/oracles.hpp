#pragma once
// Reference computations used to check the engine. They share no code with
// the library beyond its data types.

#include "semid/common.hpp"
#include "semid/seq2seq.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace semid::oracle {

/// Best 2-partition of a handful of points by brute force over all labelings.
/// Returns centroids ordered by their first coordinate.
inline Matrix exhaustive_two_means(const Matrix& pts) {
  const int n = static_cast<int>(pts.rows());
  double best = std::numeric_limits<double>::infinity();
  Matrix best_c;
  for (int mask = 1; mask < (1 << n) - 1; ++mask) {
    Matrix c = Matrix::Zero(2, pts.cols());
    int count[2] = {0, 0};
    for (int i = 0; i < n; ++i) {
      const int g = (mask >> i) & 1;
      c.row(g) += pts.row(i);
      ++count[g];
    }
    c.row(0) /= count[0];
    c.row(1) /= count[1];
    double inertia = 0.0;
    for (int i = 0; i < n; ++i) inertia += (pts.row(i) - c.row((mask >> i) & 1)).squaredNorm();
    if (inertia < best - 1e-15) {
      best = inertia;
      best_c = c;
    }
  }
  if (best_c(0, 0) > best_c(1, 0)) best_c.row(0).swap(best_c.row(1));
  return best_c;
}

/// Greedy residual encoding by explicit enumeration of every codeword.
inline std::vector<int> per_level_argmin(const std::vector<Matrix>& codebooks, std::vector<double> r) {
  std::vector<int> codes;
  for (const auto& cb : codebooks) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < cb.rows(); ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < r.size(); ++j) {
        const double diff = r[j] - cb(k, static_cast<Eigen::Index>(j));
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    for (std::size_t j = 0; j < r.size(); ++j) r[j] -= cb(best, static_cast<Eigen::Index>(j));
    codes.push_back(best);
  }
  return codes;
}

/// Scores every catalog sequence and sorts by log-prob, ties by item id.
inline std::vector<std::pair<std::string, double>> exhaustive_ranking(
    const seq2seq::Model& model, const std::vector<int>& context,
    const std::vector<std::pair<std::string, std::vector<int>>>& catalog) {
  std::vector<std::pair<std::string, double>> scored;
  for (const auto& [id, tokens] : catalog) scored.emplace_back(id, model.sequence_log_prob(context, tokens));
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return scored;
}

/// Two-sided Student-t p-value by composite Simpson integration of the density.
inline double student_t_two_sided(double t, double df) {
  const double log_norm = std::lgamma((df + 1) / 2) - std::lgamma(df / 2) - 0.5 * std::log(df * M_PI);
  auto pdf = [&](double x) { return std::exp(log_norm - (df + 1) / 2 * std::log1p(x * x / df)); };
  const double a = std::abs(t);
  const int n = 20000;
  const double h = a / n;
  double s = pdf(0) + pdf(a);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * pdf(i * h);
  return 1.0 - 2.0 * s * h / 3.0;
}

/// Central difference d f / d p[i].
inline double central_difference(const std::function<double()>& f, double& p, double eps = 1e-5) {
  const double saved = p;
  p = saved + eps;
  const double up = f();
  p = saved - eps;
  const double down = f();
  p = saved;
  return (up - down) / (2 * eps);
}

inline double relative_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / scale;
}

}  // namespace semid::oracle

#include "mmpid/sinkhorn.hpp"

#include <algorithm>
#include <cmath>

#include "mmpid/error.hpp"
#include "mmpid/numeric.hpp"

namespace mmpid {

namespace {

void check_feasible(std::span<const double> kernel, std::size_t rows, std::size_t cols,
                    std::span<const double> row_targets, std::span<const double> col_targets) {
  if (kernel.size() != rows * cols || row_targets.size() != rows || col_targets.size() != cols) {
    throw DomainError("sinkhorn: kernel and target shapes disagree");
  }
  for (double k : kernel)
    if (!(k >= 0.0) || !std::isfinite(k)) throw DomainError("sinkhorn: kernel must be finite and non-negative");
  for (double t : row_targets)
    if (!(t >= 0.0)) throw DomainError("sinkhorn: negative row target");
  for (double t : col_targets)
    if (!(t >= 0.0)) throw DomainError("sinkhorn: negative column target");

  const double rt = pairwise_sum(row_targets);
  const double ct = pairwise_sum(col_targets);
  if (std::abs(rt - ct) > 1e-9 * std::max(1.0, std::max(rt, ct))) {
    throw InfeasibleError("sinkhorn: row target mass " + format_double(rt) + " differs from column target mass " +
                          format_double(ct));
  }
  for (std::size_t i = 0; i < rows; ++i) {
    if (row_targets[i] <= 0.0) continue;
    bool reachable = false;
    for (std::size_t j = 0; j < cols && !reachable; ++j) reachable = kernel[i * cols + j] > 0.0 && col_targets[j] > 0.0;
    if (!reachable) throw InfeasibleError("sinkhorn: row " + std::to_string(i) + " has target mass but no support");
  }
  for (std::size_t j = 0; j < cols; ++j) {
    if (col_targets[j] <= 0.0) continue;
    bool reachable = false;
    for (std::size_t i = 0; i < rows && !reachable; ++i) reachable = kernel[i * cols + j] > 0.0 && row_targets[i] > 0.0;
    if (!reachable) throw InfeasibleError("sinkhorn: column " + std::to_string(j) + " has target mass but no support");
  }
}

}  // namespace

double marginal_residual(std::span<const double> m, std::size_t rows, std::size_t cols,
                         std::span<const double> row_targets, std::span<const double> col_targets) {
  double worst = 0.0;
  std::vector<double> col(cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      r += m[i * cols + j];
      col[j] += m[i * cols + j];
    }
    worst = std::max(worst, std::abs(r - row_targets[i]));
  }
  for (std::size_t j = 0; j < cols; ++j) worst = std::max(worst, std::abs(col[j] - col_targets[j]));
  return worst;
}

ScalingResult sinkhorn_scaling(std::span<const double> kernel, std::size_t rows, std::size_t cols,
                               std::span<const double> row_targets,
                               std::span<const double> col_targets, const SinkhornOptions& opts,
                               SinkhornHistory* history) {
  check_feasible(kernel, rows, cols, row_targets, col_targets);
  if (opts.max_iters < 1) throw DomainError("sinkhorn: max_iters must be >= 1");

  ScalingResult s;
  s.u.assign(rows, 0.0);
  s.v.assign(cols, 1.0);
  if (history) {
    history->u.clear();
    history->v.clear();
  }
  std::vector<double> row_mass(rows), col_mass(cols);
  for (int t = 1; t <= opts.max_iters; ++t) {
    for (std::size_t i = 0; i < rows; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += kernel[i * cols + j] * s.v[j];
      row_mass[i] = acc;
      s.u[i] = row_targets[i] > 0.0 ? row_targets[i] / acc : 0.0;
    }
    std::fill(col_mass.begin(), col_mass.end(), 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      const double ui = s.u[i];
      if (ui == 0.0) continue;
      for (std::size_t j = 0; j < cols; ++j) col_mass[j] += kernel[i * cols + j] * ui;
    }
    for (std::size_t j = 0; j < cols; ++j) s.v[j] = col_targets[j] > 0.0 ? col_targets[j] / col_mass[j] : 0.0;
    if (history) {
      history->u.push_back(s.u);
      history->v.push_back(s.v);
    }
    s.iterations = t;
    // Columns are exact after the v update; only rows can deviate.
    if (opts.tol > 0.0 || t == opts.max_iters) {
      double worst = 0.0;
      for (std::size_t i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < cols; ++j) acc += kernel[i * cols + j] * s.v[j];
        worst = std::max(worst, std::abs(s.u[i] * acc - row_targets[i]));
      }
      s.residual = worst;
      if (opts.tol > 0.0 && worst <= opts.tol) break;
    }
  }
  if (!std::isfinite(s.residual)) throw NumericError("sinkhorn: non-finite scaling");
  return s;
}

void apply_scaling(std::span<const double> kernel, std::size_t rows, std::size_t cols,
                   const ScalingResult& s, std::span<double> out) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = s.u[i] * kernel[i * cols + j] * s.v[j];
}

}  // namespace mmpid

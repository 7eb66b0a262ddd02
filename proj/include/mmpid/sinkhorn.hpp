#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mmpid {

struct SinkhornOptions {
  int max_iters = 1000;
  // Stop once the max-abs marginal deviation falls to tol. 0 runs exactly max_iters.
  double tol = 0.0;
};

// Iterates of the scaling vectors, kept for reverse-mode differentiation.
// u[t], v[t] are the vectors after half-steps t = 1..T; v0 is all ones.
struct SinkhornHistory {
  std::vector<std::vector<double>> u;
  std::vector<std::vector<double>> v;
};

struct ScalingResult {
  std::vector<double> u;  // row scaling
  std::vector<double> v;  // column scaling
  int iterations = 0;
  double residual = 0.0;  // max-abs marginal deviation after the last iteration
};

// Finds u, v so that diag(u) K diag(v) has row sums `row_targets` and column
// sums `col_targets`. K is rows x cols row-major and non-negative. Rows and
// columns with zero target are frozen at zero scaling.
// Throws InfeasibleError when the target totals differ or a positive target
// meets only zero kernel entries.
ScalingResult sinkhorn_scaling(std::span<const double> kernel, std::size_t rows, std::size_t cols,
                               std::span<const double> row_targets,
                               std::span<const double> col_targets, const SinkhornOptions& opts,
                               SinkhornHistory* history = nullptr);

// Writes diag(u) K diag(v) into out.
void apply_scaling(std::span<const double> kernel, std::size_t rows, std::size_t cols,
                   const ScalingResult& s, std::span<double> out);

// Max-abs deviation of the row/column sums of m from the targets.
double marginal_residual(std::span<const double> m, std::size_t rows, std::size_t cols,
                         std::span<const double> row_targets, std::span<const double> col_targets);

}  // namespace mmpid

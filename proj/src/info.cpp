#include "mmpid/info.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mmpid/error.hpp"
#include "mmpid/numeric.hpp"

namespace mmpid {

namespace {

void validate_simplex(std::span<const double> probs, const char* what) {
  if (probs.empty()) throw DomainError(std::string(what) + ": empty distribution");
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0) throw DomainError(std::string(what) + ": negative or non-finite entry");
  }
  const double total = pairwise_sum(probs);
  if (std::abs(total - 1.0) > kSimplexTol) {
    throw DomainError(std::string(what) + ": entries sum to " + format_double(total) + ", expected 1");
  }
}

using AxisMask = unsigned;

AxisMask mask_of(std::span<const Axis> axes) {
  AxisMask m = 0;
  for (Axis a : axes) {
    const AxisMask bit = 1u << static_cast<int>(a);
    if (m & bit) throw DomainError("axis listed twice in one group");
    m |= bit;
  }
  return m;
}

// Flattened marginal over the axes in `mask`; cell order is irrelevant for entropies.
std::vector<double> marginal_cells(const JointPmf& j, AxisMask mask) {
  const auto& d = j.dims();
  std::array<std::size_t, 3> keep{};
  for (int ax = 0; ax < 3; ++ax) keep[ax] = (mask >> ax) & 1u ? d[ax] : 1;
  std::vector<double> out(keep[0] * keep[1] * keep[2], 0.0);
  for (std::size_t a = 0; a < d[0]; ++a)
    for (std::size_t b = 0; b < d[1]; ++b)
      for (std::size_t y = 0; y < d[2]; ++y) {
        const std::size_t ia = (mask & 1u) ? a : 0;
        const std::size_t ib = (mask & 2u) ? b : 0;
        const std::size_t iy = (mask & 4u) ? y : 0;
        out[(ia * keep[1] + ib) * keep[2] + iy] += j(a, b, y);
      }
  return out;
}

double entropy_of_mask(const JointPmf& j, AxisMask mask) {
  if (mask == 0) return 0.0;
  return entropy(marginal_cells(j, mask));
}

}  // namespace

Pmf::Pmf(std::vector<double> probs) : probs_(std::move(probs)) { validate_simplex(probs_, "Pmf"); }

Pmf Pmf::uniform(std::size_t k) {
  if (k == 0) throw DomainError("Pmf::uniform: empty alphabet");
  return Pmf(std::vector<double>(k, 1.0 / static_cast<double>(k)));
}

JointPmf::JointPmf(std::size_t n1, std::size_t n2, std::size_t k, std::vector<double> table)
    : dims_{n1, n2, k}, table_(std::move(table)) {
  if (n1 == 0 || n2 == 0 || k == 0) throw DomainError("JointPmf: zero-sized axis");
  if (table_.size() != n1 * n2 * k) throw DomainError("JointPmf: table size does not match dims");
  validate_simplex(table_, "JointPmf");
}

JointPmf JointPmf::from_weights(std::size_t n1, std::size_t n2, std::size_t k,
                                std::vector<double> weights) {
  for (double w : weights)
    if (!std::isfinite(w) || w < 0.0) throw DomainError("JointPmf::from_weights: negative or non-finite weight");
  const double total = pairwise_sum(weights);
  if (!(total > 0.0)) throw DomainError("JointPmf::from_weights: all weights zero");
  for (double& w : weights) w /= total;
  return JointPmf(n1, n2, k, std::move(weights));
}

Pmf JointPmf::marginal(Axis axis) const {
  const AxisMask m = 1u << static_cast<int>(axis);
  return Pmf(marginal_cells(*this, m));
}

std::vector<double> JointPmf::marginal2(Axis a, Axis b) const {
  if (a == b) throw DomainError("marginal2: repeated axis");
  if (static_cast<int>(a) > static_cast<int>(b)) std::swap(a, b);
  return marginal_cells(*this, (1u << static_cast<int>(a)) | (1u << static_cast<int>(b)));
}

double entropy(std::span<const double> probs) {
  validate_simplex(probs, "entropy");
  std::vector<double> terms;
  terms.reserve(probs.size());
  for (double p : probs) {
    if (p > kZeroProb) terms.push_back(-p * std::log2(p));
  }
  return std::max(0.0, pairwise_sum(terms));
}

double entropy(const Pmf& p) { return entropy(p.probs()); }

double clamp_information(double v, const char* what) {
  if (v < -kSimplexTol) {
    throw ConsistencyError(std::string(what) + " is negative beyond tolerance: " + format_double(v));
  }
  return v < 0.0 ? 0.0 : v;
}

double mutual_information(const JointPmf& j, std::span<const Axis> group_a,
                          std::span<const Axis> group_b) {
  if (group_a.empty() || group_b.empty()) throw DomainError("mutual_information: empty axis group");
  const AxisMask ma = mask_of(group_a);
  const AxisMask mb = mask_of(group_b);
  if (ma & mb) throw DomainError("mutual_information: axis groups overlap");
  const double v = entropy_of_mask(j, ma) + entropy_of_mask(j, mb) - entropy_of_mask(j, ma | mb);
  return clamp_information(v, "mutual information");
}

double mutual_information(const JointPmf& j, std::initializer_list<Axis> group_a,
                          std::initializer_list<Axis> group_b) {
  return mutual_information(j, std::span<const Axis>(group_a.begin(), group_a.size()),
                            std::span<const Axis>(group_b.begin(), group_b.size()));
}

double conditional_mi(const JointPmf& j, Axis a, Axis b, Axis given) {
  if (a == b || a == given || b == given) throw DomainError("conditional_mi: axes must be distinct");
  const AxisMask ma = 1u << static_cast<int>(a);
  const AxisMask mb = 1u << static_cast<int>(b);
  const AxisMask mc = 1u << static_cast<int>(given);
  const double v = entropy_of_mask(j, ma | mc) + entropy_of_mask(j, mb | mc) -
                   entropy_of_mask(j, ma | mb | mc) - entropy_of_mask(j, mc);
  return clamp_information(v, "conditional mutual information");
}

double co_information(const JointPmf& j) {
  return mutual_information(j, {Axis::X1}, {Axis::Y}) + mutual_information(j, {Axis::X2}, {Axis::Y}) -
         mutual_information(j, {Axis::X1, Axis::X2}, {Axis::Y});
}

}  // namespace mmpid

#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace mmpid {

// Probabilities below this are treated as exact zeros.
inline constexpr double kZeroProb = 1e-12;
// Tolerance for simplex sums and for clamping tiny negative information values.
inline constexpr double kSimplexTol = 1e-9;

// A probability mass function over a finite alphabet.
class Pmf {
 public:
  Pmf() = default;
  // Throws DomainError unless probs is a valid simplex.
  explicit Pmf(std::vector<double> probs);

  static Pmf uniform(std::size_t k);

  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> probs() const noexcept { return probs_; }

 private:
  std::vector<double> probs_;
};

enum class Axis : int { X1 = 0, X2 = 1, Y = 2 };

// Joint table over (X1, X2, Y), stored row-major with Y fastest.
class JointPmf {
 public:
  JointPmf() = default;
  // Throws DomainError unless entries are non-negative and sum to 1.
  JointPmf(std::size_t n1, std::size_t n2, std::size_t k, std::vector<double> table);

  // Normalizes non-negative weights; throws if all zero or any negative.
  static JointPmf from_weights(std::size_t n1, std::size_t n2, std::size_t k,
                               std::vector<double> weights);

  std::size_t n1() const noexcept { return dims_[0]; }
  std::size_t n2() const noexcept { return dims_[1]; }
  std::size_t k() const noexcept { return dims_[2]; }
  const std::array<std::size_t, 3>& dims() const noexcept { return dims_; }
  std::size_t index(std::size_t a, std::size_t b, std::size_t y) const noexcept {
    return (a * dims_[1] + b) * dims_[2] + y;
  }
  double operator()(std::size_t a, std::size_t b, std::size_t y) const { return table_[index(a, b, y)]; }
  std::span<const double> table() const noexcept { return table_; }

  // Marginal over a single axis.
  Pmf marginal(Axis axis) const;
  // Two-axis marginal P(a, b), row-major in (a, b), a < b in axis order.
  std::vector<double> marginal2(Axis a, Axis b) const;

 private:
  std::array<std::size_t, 3> dims_{0, 0, 0};
  std::vector<double> table_;
};

// Shannon entropy in bits.
double entropy(const Pmf& p);
double entropy(std::span<const double> probs);

// I(A; B) in bits where A and B are disjoint non-empty sets of axes.
double mutual_information(const JointPmf& j, std::initializer_list<Axis> group_a,
                          std::initializer_list<Axis> group_b);
double mutual_information(const JointPmf& j, std::span<const Axis> group_a,
                          std::span<const Axis> group_b);

// I(A; B | C) in bits for three distinct axes.
double conditional_mi(const JointPmf& j, Axis a, Axis b, Axis given);

// I(X1;Y) + I(X2;Y) - I(X1,X2;Y). May be negative.
double co_information(const JointPmf& j);

// Clamps a value within -kSimplexTol of zero to zero; throws ConsistencyError
// for anything more negative.
double clamp_information(double v, const char* what);

}  // namespace mmpid

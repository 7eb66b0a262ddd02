#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmpid/info.hpp"

namespace mmpid {

// Redundancy, the two unique informations and synergy, in bits.
struct PidAtoms {
  double redundancy = 0.0;
  double unique1 = 0.0;
  double unique2 = 0.0;
  double synergy = 0.0;
  double total = 0.0;  // I(X1,X2;Y) under the true distribution

  double sum() const noexcept { return redundancy + unique1 + unique2 + synergy; }
  bool operator==(const PidAtoms&) const = default;
};

// Absolute residuals of the four consistency identities, plus the residual of
// the alternative R = I_Q(X1,X2;Y) formula, which is reported but not used.
struct ConsistencyResiduals {
  double sum = 0.0;          // R + U1 + U2 + S = I(X1,X2;Y)
  double source1 = 0.0;      // R + U1 = I(X1;Y)
  double source2 = 0.0;      // R + U2 = I(X2;Y)
  double coinformation = 0.0;  // R - S = co-information
  double alt_redundancy = 0.0;   // |R - I_Q(X1,X2;Y)|

  double max_identity() const noexcept;
};

// The information terms the atoms are assembled from.
struct InfoTerms {
  double mi_x1 = 0.0;     // I_P(X1;Y)
  double mi_x2 = 0.0;     // I_P(X2;Y)
  double mi_joint = 0.0;  // I_P(X1,X2;Y)
  double mi_q = 0.0;      // I_Q(X1,X2;Y) at the minimizer
};

struct AtomReport {
  PidAtoms atoms;  // clamped at zero
  PidAtoms raw;    // as assembled
  ConsistencyResiduals residuals;  // of the clamped atoms
  InfoTerms terms;
};

// Assembles atoms from the information terms and checks the identities.
// When strict, throws ConsistencyError if an atom is below -1e-4 or an
// identity residual exceeds 1e-4; otherwise only clamps and reports.
AtomReport assemble_atoms(const InfoTerms& terms, bool strict = true);

// The marginal-matching set: all joints sharing P's (x1, y) and (x2, y) marginals.
class AdmissibleSet {
 public:
  explicit AdmissibleSet(JointPmf target);

  const JointPmf& target() const noexcept { return target_; }
  const std::vector<double>& x1y() const noexcept { return x1y_; }  // n1 x k
  const std::vector<double>& x2y() const noexcept { return x2y_; }  // n2 x k

 private:
  JointPmf target_;
  std::vector<double> x1y_;
  std::vector<double> x2y_;
};

// True iff both pairwise source-target marginals of q are within tol of the set's.
bool check_marginals(const JointPmf& q, const AdmissibleSet& set, double tol);

enum class StepRule { Fixed, Backtracking };

struct SolveOptions {
  int max_iters = 10000;
  double tol = 1e-9;  // relative objective change
  double step = 0.1;
  StepRule step_rule = StepRule::Fixed;
  std::uint64_t seed = 0;
};

struct SolveResult {
  JointPmf q;
  std::vector<double> objective_trace;  // I_Q(X1,X2;Y) in bits per accepted iterate
  bool converged = false;
  int iterations = 0;
};

// Minimizes I_Q(X1,X2;Y) over the admissible set of p by exponentiated-gradient
// mirror descent on the per-label couplings, re-projected by Sinkhorn scaling.
// Deterministic; the seed is carried for interface symmetry and has no effect.
SolveResult solve(const JointPmf& p, const SolveOptions& opts = {});

// Atoms from p and a minimizer q. Throws DomainError if q is not admissible within 1e-6.
PidAtoms compute_atoms(const JointPmf& p, const JointPmf& q);
AtomReport evaluate_atoms(const JointPmf& p, const JointPmf& q);

struct Decomposition {
  SolveResult solve;
  AtomReport report;
};

Decomposition decompose(const JointPmf& p, const SolveOptions& opts = {});

std::string to_string(StepRule rule);
StepRule parse_step_rule(const std::string& s);

}  // namespace mmpid

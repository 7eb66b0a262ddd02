#include "mmpid/pid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mmpid/error.hpp"
#include "mmpid/numeric.hpp"
#include "mmpid/sinkhorn.hpp"

namespace mmpid {

namespace {

constexpr double kAtomErrorTol = 1e-4;
constexpr double kAdmissibleTol = 1e-6;

// I_Q(X1,X2;Y) in bits from a raw table (need not be validated).
double joint_information(const std::vector<double>& q, std::size_t n1, std::size_t n2, std::size_t k) {
  std::vector<double> qy(k, 0.0), qxx(n1 * n2, 0.0);
  for (std::size_t c = 0; c < n1 * n2; ++c)
    for (std::size_t y = 0; y < k; ++y) {
      qy[y] += q[c * k + y];
      qxx[c] += q[c * k + y];
    }
  std::vector<double> terms;
  terms.reserve(q.size());
  for (std::size_t c = 0; c < n1 * n2; ++c)
    for (std::size_t y = 0; y < k; ++y) {
      const double v = q[c * k + y];
      if (v > 0.0) terms.push_back(v * std::log2(v / (qxx[c] * qy[y])));
    }
  return pairwise_sum(terms);
}

std::vector<double> pair_marginal(const JointPmf& j, Axis source) { return j.marginal2(source, Axis::Y); }

}  // namespace

double ConsistencyResiduals::max_identity() const noexcept {
  return std::max(std::max(sum, source1), std::max(source2, coinformation));
}

AtomReport assemble_atoms(const InfoTerms& t, bool strict) {
  AtomReport r;
  r.terms = t;
  r.raw.total = t.mi_joint;
  r.raw.synergy = t.mi_joint - t.mi_q;
  r.raw.unique1 = t.mi_q - t.mi_x2;
  r.raw.unique2 = t.mi_q - t.mi_x1;
  r.raw.redundancy = t.mi_x1 - r.raw.unique1;

  const std::pair<const char*, double> named[] = {{"redundancy", r.raw.redundancy},
                                                   {"unique1", r.raw.unique1},
                                                   {"unique2", r.raw.unique2},
                                                   {"synergy", r.raw.synergy}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw NumericError(std::string("atom ") + name + " is not finite");
    if (strict && v < -kAtomErrorTol) {
      throw ConsistencyError(std::string("non-negativity violated: ") + name + " = " + format_double(v));
    }
  }
  r.atoms = r.raw;
  r.atoms.redundancy = std::max(0.0, r.raw.redundancy);
  r.atoms.unique1 = std::max(0.0, r.raw.unique1);
  r.atoms.unique2 = std::max(0.0, r.raw.unique2);
  r.atoms.synergy = std::max(0.0, r.raw.synergy);

  const PidAtoms& a = r.atoms;
  r.residuals.sum = std::abs(a.sum() - t.mi_joint);
  r.residuals.source1 = std::abs(a.redundancy + a.unique1 - t.mi_x1);
  r.residuals.source2 = std::abs(a.redundancy + a.unique2 - t.mi_x2);
  r.residuals.coinformation = std::abs((a.redundancy - a.synergy) - (t.mi_x1 + t.mi_x2 - t.mi_joint));
  r.residuals.alt_redundancy = std::abs(a.redundancy - t.mi_q);

  const std::pair<const char*, double> identities[] = {
      {"R + U1 + U2 + S = I(X1,X2;Y)", r.residuals.sum},
      {"R + U1 = I(X1;Y)", r.residuals.source1},
      {"R + U2 = I(X2;Y)", r.residuals.source2},
      {"R - S = co-information", r.residuals.coinformation}};
  for (const auto& [name, v] : identities) {
    if (strict && !(v <= kAtomErrorTol)) {
      throw ConsistencyError(std::string("identity violated: ") + name + " (residual " + format_double(v) + ")");
    }
  }
  return r;
}

AdmissibleSet::AdmissibleSet(JointPmf target)
    : target_(std::move(target)),
      x1y_(pair_marginal(target_, Axis::X1)),
      x2y_(pair_marginal(target_, Axis::X2)) {}

bool check_marginals(const JointPmf& q, const AdmissibleSet& set, double tol) {
  if (q.dims() != set.target().dims()) throw DomainError("check_marginals: dimension mismatch");
  const auto q1 = pair_marginal(q, Axis::X1);
  const auto q2 = pair_marginal(q, Axis::X2);
  double worst = 0.0;
  for (std::size_t i = 0; i < q1.size(); ++i) worst = std::max(worst, std::abs(q1[i] - set.x1y()[i]));
  for (std::size_t i = 0; i < q2.size(); ++i) worst = std::max(worst, std::abs(q2[i] - set.x2y()[i]));
  return worst <= tol;
}

SolveResult solve(const JointPmf& p, const SolveOptions& opts) {
  if (opts.max_iters < 1) throw DomainError("solve: max_iters must be >= 1");
  if (!(opts.tol > 0.0)) throw DomainError("solve: tol must be > 0");
  if (!(opts.step > 0.0)) throw DomainError("solve: step must be > 0");

  const std::size_t n1 = p.n1(), n2 = p.n2(), k = p.k();
  const Pmf py = p.marginal(Axis::Y);
  const auto x1y = pair_marginal(p, Axis::X1);
  const auto x2y = pair_marginal(p, Axis::X2);
  const double mi_p = joint_information(std::vector<double>(p.table().begin(), p.table().end()), n1, n2, k);

  std::size_t live_labels = 0;
  for (std::size_t y = 0; y < k; ++y) live_labels += py[y] > kZeroProb;
  if (live_labels < 2) {
    SolveResult r{p, {mi_p}, true, 0};
    return r;
  }

  // Per-label conditional marginals and coupling tables C_y (n1 x n2).
  std::vector<std::vector<double>> rows(k), cols(k), coupling(k);
  for (std::size_t y = 0; y < k; ++y) {
    rows[y].assign(n1, 0.0);
    cols[y].assign(n2, 0.0);
    coupling[y].assign(n1 * n2, 0.0);
    if (py[y] <= kZeroProb) continue;
    for (std::size_t a = 0; a < n1; ++a) rows[y][a] = x1y[a * k + y] / py[y];
    for (std::size_t b = 0; b < n2; ++b) cols[y][b] = x2y[b * k + y] / py[y];
    for (std::size_t a = 0; a < n1; ++a)
      for (std::size_t b = 0; b < n2; ++b) coupling[y][a * n2 + b] = rows[y][a] * cols[y][b];
  }

  auto assemble = [&](const std::vector<std::vector<double>>& c) {
    std::vector<double> q(n1 * n2 * k, 0.0);
    for (std::size_t y = 0; y < k; ++y) {
      if (py[y] <= kZeroProb) continue;
      for (std::size_t cell = 0; cell < n1 * n2; ++cell) q[cell * k + y] = py[y] * c[y][cell];
    }
    return q;
  };

  const SinkhornOptions projection{10000, 1e-14};
  std::vector<double> q = assemble(coupling);
  double objective = joint_information(q, n1, n2, k);

  SolveResult result{p, {objective}, false, 0};
  double step = opts.step;
  const double max_step = opts.step * 64.0;
  std::vector<std::vector<double>> trial(k);
  std::vector<double> qxx(n1 * n2), qy(k);

  for (int it = 1; it <= opts.max_iters; ++it) {
    result.iterations = it;
    std::fill(qxx.begin(), qxx.end(), 0.0);
    std::fill(qy.begin(), qy.end(), 0.0);
    for (std::size_t cell = 0; cell < n1 * n2; ++cell)
      for (std::size_t y = 0; y < k; ++y) {
        qxx[cell] += q[cell * k + y];
        qy[y] += q[cell * k + y];
      }

    if (opts.step_rule == StepRule::Backtracking) step = std::min(max_step, step * 2.0);
    bool accepted = false;
    double next_objective = objective;
    std::vector<double> next_q;
    while (step > 1e-14) {
      for (std::size_t y = 0; y < k; ++y) {
        trial[y].assign(n1 * n2, 0.0);
        if (py[y] <= kZeroProb) continue;
        for (std::size_t cell = 0; cell < n1 * n2; ++cell) {
          const double qv = q[cell * k + y];
          if (qv <= 0.0) continue;
          const double grad = std::log(qv / (qxx[cell] * qy[y]));
          trial[y][cell] = coupling[y][cell] * std::exp(-step * grad);
        }
        const auto s = sinkhorn_scaling(trial[y], n1, n2, rows[y], cols[y], projection);
        std::vector<double> projected(n1 * n2);
        apply_scaling(trial[y], n1, n2, s, projected);
        trial[y] = std::move(projected);
      }
      auto candidate = assemble(trial);
      const double value = joint_information(candidate, n1, n2, k);
      if (std::isfinite(value) && value <= objective) {
        accepted = true;
        next_objective = value;
        next_q = std::move(candidate);
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // No step size decreases the objective: stationary up to rounding.
      result.converged = true;
      break;
    }
    const double change = objective - next_objective;
    coupling.swap(trial);
    q = std::move(next_q);
    objective = next_objective;
    result.objective_trace.push_back(objective);
    if (change <= opts.tol * std::max(objective, 1e-12)) {
      result.converged = true;
      break;
    }
  }

  if (mi_p < objective) {
    // p is itself admissible and better than the final iterate.
    result.q = p;
    result.objective_trace.push_back(mi_p);
  } else {
    result.q = JointPmf::from_weights(n1, n2, k, q);
  }
  return result;
}

AtomReport evaluate_atoms(const JointPmf& p, const JointPmf& q) {
  const AdmissibleSet set(p);
  if (!check_marginals(q, set, kAdmissibleTol)) {
    throw DomainError("compute_atoms: q does not preserve the source-target marginals of p");
  }
  InfoTerms t;
  t.mi_x1 = mutual_information(p, {Axis::X1}, {Axis::Y});
  t.mi_x2 = mutual_information(p, {Axis::X2}, {Axis::Y});
  t.mi_joint = mutual_information(p, {Axis::X1, Axis::X2}, {Axis::Y});
  t.mi_q = mutual_information(q, {Axis::X1, Axis::X2}, {Axis::Y});
  return assemble_atoms(t);
}

PidAtoms compute_atoms(const JointPmf& p, const JointPmf& q) { return evaluate_atoms(p, q).atoms; }

Decomposition decompose(const JointPmf& p, const SolveOptions& opts) {
  Decomposition d{solve(p, opts), {}};
  d.report = evaluate_atoms(p, d.solve.q);
  return d;
}

std::string to_string(StepRule rule) { return rule == StepRule::Fixed ? "fixed" : "backtracking"; }

StepRule parse_step_rule(const std::string& s) {
  if (s == "fixed") return StepRule::Fixed;
  if (s == "backtracking") return StepRule::Backtracking;
  throw DomainError("unknown step rule '" + s + "' (expected fixed or backtracking)");
}

}  // namespace mmpid

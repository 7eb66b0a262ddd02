#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "mmpid/error.hpp"
#include "mmpid/pid.hpp"
#include "mmpid/sinkhorn.hpp"
#include "mmpid/synth.hpp"
#include "support.hpp"

using namespace mmpid;

namespace {

void check_atoms(const PidAtoms& a, double r, double u1, double u2, double s, double tol) {
  CHECK(std::abs(a.redundancy - r) <= tol);
  CHECK(std::abs(a.unique1 - u1) <= tol);
  CHECK(std::abs(a.unique2 - u2) <= tol);
  CHECK(std::abs(a.synergy - s) <= tol);
}

}  // namespace

TEST_CASE("sinkhorn scaling meets its targets") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  std::vector<double> k(12);
  for (auto& v : k) v = u(rng);
  const std::vector<double> r = {0.1, 0.2, 0.3, 0.4};
  const std::vector<double> c = {0.5, 0.25, 0.25};
  const ScalingResult s = sinkhorn_scaling(k, 4, 3, r, c, {200, 0.0});
  std::vector<double> m(12);
  apply_scaling(k, 4, 3, s, m);
  CHECK(marginal_residual(m, 4, 3, r, c) <= 1e-12);
  CHECK(s.iterations == 200);
}

TEST_CASE("sinkhorn residual shrinks with more iterations") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.01, 5.0);
  std::vector<double> k(36);
  for (auto& v : k) v = u(rng);
  const std::vector<double> r(6, 1.0 / 6.0);
  const std::vector<double> c = {0.05, 0.1, 0.15, 0.2, 0.2, 0.3};
  double prev = 1.0;
  for (int it = 1; it <= 30; ++it) {
    const ScalingResult s = sinkhorn_scaling(k, 6, 6, r, c, {it, 0.0});
    CHECK(s.residual <= prev + 1e-15);
    prev = s.residual;
  }
}

TEST_CASE("sinkhorn infeasibility") {
  const std::vector<double> k = {1.0, 0.0, 0.0, 1.0};
  CHECK_THROWS_AS(sinkhorn_scaling(k, 2, 2, std::vector<double>{0.5, 0.5}, std::vector<double>{0.4, 0.4}, {}),
                  InfeasibleError);
  const std::vector<double> k2 = {1.0, 0.0, 1.0, 0.0};
  CHECK_THROWS_AS(sinkhorn_scaling(k2, 2, 2, std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}, {}),
                  InfeasibleError);
  // Zero targets freeze their rows.
  const std::vector<double> k3 = {1.0, 1.0, 1.0, 1.0};
  const ScalingResult s = sinkhorn_scaling(k3, 2, 2, std::vector<double>{1.0, 0.0}, std::vector<double>{0.5, 0.5}, {});
  CHECK(s.u[1] == 0.0);
}

TEST_CASE("check_marginals") {
  const JointPmf p = gate_joint({Gate::And, 0.1});
  const AdmissibleSet set(p);
  CHECK(check_marginals(p, set, 1e-12));
  std::vector<double> t(p.table().begin(), p.table().end());
  t[p.index(0, 0, 0)] -= 0.05;
  t[p.index(0, 0, 1)] += 0.05;
  CHECK_FALSE(check_marginals(JointPmf(2, 2, 2, t), set, 1e-6));
  CHECK_THROWS_AS(check_marginals(JointPmf(1, 1, 2, {0.5, 0.5}), set, 1e-6), DomainError);
  CHECK(check_marginals(solve(p).q, set, 1e-6));
}

TEST_CASE("gate decompositions") {
  check_atoms(decompose(gate_joint({Gate::Xor})).report.atoms, 0, 0, 0, 1, 1e-6);
  check_atoms(decompose(gate_joint({Gate::Copy})).report.atoms, 1, 0, 0, 0, 1e-6);
  check_atoms(decompose(gate_joint({Gate::Unq1})).report.atoms, 0, 1, 0, 0, 1e-6);
  check_atoms(decompose(gate_joint({Gate::Unq2})).report.atoms, 0, 0, 1, 0, 1e-6);
  const Decomposition d = decompose(gate_joint({Gate::And}));
  check_atoms(d.report.atoms, 0.311278124459133, 0, 0, 0.5, 1e-6);
  CHECK(d.report.terms.mi_q == doctest::Approx(0.311278124459133).epsilon(1e-6));
  CHECK(d.report.atoms.total == doctest::Approx(0.811278124459133).epsilon(1e-12));
}

TEST_CASE("xor minimizer is the independent coupling") {
  const SolveResult r = solve(gate_joint({Gate::Xor}));
  for (double v : r.q.table()) CHECK(v == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(r.objective_trace.back() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("a source independent of everything else adds no synergy") {
  // Y is a noisy copy of X1; X2 is independent of both, so P already attains the minimum.
  const double px1[2] = {0.3, 0.7};
  const double px2[3] = {0.5, 0.2, 0.3};
  std::vector<double> t(12);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 3; ++b)
      for (int y = 0; y < 2; ++y) t[(a * 3 + b) * 2 + y] = px1[a] * px2[b] * (y == a ? 0.9 : 0.1);
  const JointPmf p(2, 3, 2, t);
  const Decomposition d = decompose(p);
  CHECK(d.report.terms.mi_q == doctest::Approx(d.report.terms.mi_joint).epsilon(1e-9));
  CHECK(d.report.atoms.synergy <= 1e-9);
  CHECK(d.report.atoms.unique2 <= 1e-9);
  CHECK(d.report.atoms.redundancy <= 1e-9);
}

TEST_CASE("conditional independence alone does not make P the minimizer") {
  // Q(x1, x2 | y) = P(x1 | y) P(x2 | y) is the solver's starting point; the oracle finds lower I_Q.
  const double py[2] = {0.4, 0.6};
  const double p1[2][2] = {{0.7, 0.3}, {0.2, 0.8}};
  const double p2[2][2] = {{0.1, 0.9}, {0.5, 0.5}};
  std::vector<double> t(8);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int y = 0; y < 2; ++y) t[(a * 2 + b) * 2 + y] = py[y] * p1[y][a] * p2[y][b];
  const JointPmf p(2, 2, 2, t);
  const Decomposition d = decompose(p);
  const OracleResult o = brute_force_search(p);
  CHECK(d.report.terms.mi_q < d.report.terms.mi_joint - 0.05);
  CHECK(std::abs(d.report.terms.mi_q - o.report.terms.mi_q) <= 1e-6);
}

TEST_CASE("solver trace is non-increasing and feasible") {
  std::mt19937_64 rng(4);
  for (StepRule rule : {StepRule::Fixed, StepRule::Backtracking}) {
    for (int t = 0; t < 10; ++t) {
      const JointPmf p = testing::random_joint(rng, 3, 4, 3, t % 2 ? 5 : 0);
      SolveOptions opts;
      opts.step_rule = rule;
      const SolveResult r = solve(p, opts);
      for (std::size_t i = 1; i < r.objective_trace.size(); ++i) {
        CHECK(r.objective_trace[i] <= r.objective_trace[i - 1] + 1e-9);
      }
      CHECK(check_marginals(r.q, AdmissibleSet(p), 1e-6));
      CHECK(mutual_information(r.q, {Axis::X1, Axis::X2}, {Axis::Y}) <=
            mutual_information(p, {Axis::X1, Axis::X2}, {Axis::Y}) + 1e-9);
    }
  }
}

TEST_CASE("non-convergence returns the best iterate with a flag") {
  SolveOptions opts;
  opts.max_iters = 3;
  const SolveResult r = solve(gate_joint({Gate::And}), opts);
  CHECK_FALSE(r.converged);
  CHECK(r.iterations <= 3);
  CHECK(check_marginals(r.q, AdmissibleSet(gate_joint({Gate::And})), 1e-6));
}

TEST_CASE("single-label joints short-circuit to zero atoms") {
  const JointPmf p(2, 2, 1, {0.25, 0.25, 0.25, 0.25});
  const Decomposition d = decompose(p);
  CHECK(d.report.atoms.sum() == 0.0);
  CHECK(d.solve.converged);
}

TEST_CASE("random 4x4x4 joints satisfy the consistency identities") {
  std::mt19937_64 rng(20);
  for (int t = 0; t < 40; ++t) {
    const JointPmf p = testing::random_joint(rng, 4, 4, 4, t % 4 == 0 ? 6 : 0);
    const Decomposition d = decompose(p);
    const PidAtoms& a = d.report.atoms;
    const PidAtoms& raw = d.report.raw;
    for (double v : {raw.redundancy, raw.unique1, raw.unique2, raw.synergy}) CHECK(v >= -1e-6);
    CHECK(std::abs(a.sum() - a.total) <= 1e-6);
    CHECK(std::abs(a.redundancy + a.unique1 - mutual_information(p, {Axis::X1}, {Axis::Y})) <= 1e-6);
    CHECK(std::abs(a.redundancy + a.unique2 - mutual_information(p, {Axis::X2}, {Axis::Y})) <= 1e-6);
    CHECK(std::abs(a.redundancy - a.synergy - co_information(p)) <= 1e-6);
  }
}

TEST_CASE("atoms are invariant to relabelling Y") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 5; ++t) {
    const JointPmf p = testing::random_joint(rng, 3, 3, 3);
    const PidAtoms a = decompose(p).report.atoms;
    const PidAtoms b = decompose(testing::permute_labels(p, {1, 2, 0})).report.atoms;
    CHECK(std::abs(a.redundancy - b.redundancy) <= 1e-9);
    CHECK(std::abs(a.unique1 - b.unique1) <= 1e-9);
    CHECK(std::abs(a.unique2 - b.unique2) <= 1e-9);
    CHECK(std::abs(a.synergy - b.synergy) <= 1e-9);
  }
}

TEST_CASE("compute_atoms rejects inadmissible couplings") {
  const JointPmf p = gate_joint({Gate::And});
  CHECK_THROWS_AS(compute_atoms(p, gate_joint({Gate::Xor})), DomainError);
  const PidAtoms a = compute_atoms(p, solve(p).q);
  CHECK(a.synergy == doctest::Approx(0.5).epsilon(1e-6));
  // P itself is admissible but not the minimizer; its redundancy comes out negative.
  CHECK_THROWS_AS(compute_atoms(p, p), ConsistencyError);
}

TEST_CASE("alternative redundancy residual is reported") {
  const AtomReport r = decompose(gate_joint({Gate::And})).report;
  // At the optimum I_Q equals R + U1 + U2, so the residual is U1 + U2 here.
  CHECK(r.residuals.alt_redundancy == doctest::Approx(0.0).epsilon(1e-6));
  const AtomReport u = decompose(gate_joint({Gate::Unq1})).report;
  CHECK(u.residuals.alt_redundancy == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("assemble_atoms strictness") {
  InfoTerms t{0.2, 0.2, 0.1, 0.5};  // I_Q above the joint information
  CHECK_THROWS_AS(assemble_atoms(t), ConsistencyError);
  const AtomReport r = assemble_atoms(t, false);
  CHECK(r.atoms.synergy == 0.0);
  CHECK(r.raw.synergy == doctest::Approx(-0.4));
}

TEST_CASE("step rule names") {
  CHECK(parse_step_rule("backtracking") == StepRule::Backtracking);
  CHECK(to_string(StepRule::Fixed) == "fixed");
  CHECK_THROWS_AS(parse_step_rule("newton"), DomainError);
}

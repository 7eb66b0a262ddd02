#include <cmath>
#include <random>

#include "doctest.h"
#include "mmpid/error.hpp"
#include "mmpid/synth.hpp"
#include "support.hpp"

using namespace mmpid;

TEST_CASE("gate joints") {
  const JointPmf x = gate_joint({Gate::Xor});
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      CHECK(x(a, b, a ^ b) == 0.25);
      CHECK(x(a, b, 1 - (a ^ b)) == 0.0);
    }
  const JointPmf c = gate_joint({Gate::Copy});
  CHECK(c(0, 0, 0) == 0.5);
  CHECK(c(1, 1, 1) == 0.5);
  const JointPmf n = gate_joint({Gate::And, 0.1});
  CHECK(n(1, 1, 1) == doctest::Approx(0.25 * 0.9));
  CHECK(n(0, 0, 1) == doctest::Approx(0.25 * 0.1));
  CHECK_THROWS_AS(gate_joint({Gate::And, 0.5}), DomainError);
  CHECK(parse_gate("XOR") == Gate::Xor);
  CHECK_THROWS_AS(parse_gate("nand"), DomainError);
}

TEST_CASE("sampled gate joints are seeded") {
  const GateSpec spec{Gate::Or, 0.05, 5000, 42};
  const JointPmf a = sample_gate_joint(spec);
  const JointPmf b = sample_gate_joint(spec);
  CHECK(std::equal(a.table().begin(), a.table().end(), b.table().begin()));
  const JointPmf exact = gate_joint(spec);
  for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(a.table()[i] - exact.table()[i]) < 0.02);
}

TEST_CASE("oracle on noiseless gates") {
  auto near = [](const PidAtoms& a, double r, double u1, double u2, double s) {
    CHECK(std::abs(a.redundancy - r) <= 1e-3);
    CHECK(std::abs(a.unique1 - u1) <= 1e-3);
    CHECK(std::abs(a.unique2 - u2) <= 1e-3);
    CHECK(std::abs(a.synergy - s) <= 1e-3);
  };
  near(brute_force_pid(gate_joint({Gate::Xor})), 0, 0, 0, 1);
  near(brute_force_pid(gate_joint({Gate::And})), 0.311278, 0, 0, 0.5);
  near(brute_force_pid(gate_joint({Gate::Unq1})), 0, 1, 0, 0);
  near(brute_force_pid(gate_joint({Gate::Copy})), 1, 0, 0, 0);
}

TEST_CASE("noisy AND shrinks every nonzero atom") {
  const PidAtoms clean = brute_force_pid(gate_joint({Gate::And}));
  const PidAtoms noisy = brute_force_pid(gate_joint({Gate::And, 0.1}));
  CHECK(noisy.redundancy < clean.redundancy);
  CHECK(noisy.synergy < clean.synergy);
  // Values measured with the oracle.
  CHECK(noisy.redundancy == doctest::Approx(0.146793).epsilon(1e-5));
  CHECK(noisy.synergy == doctest::Approx(0.265502).epsilon(1e-5));
}

TEST_CASE("oracle agrees with the solver on noisy gates") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> noise(0.0, 0.45);
  const Gate gates[] = {Gate::Xor, Gate::And, Gate::Or, Gate::Copy, Gate::Unq1, Gate::Unq2};
  for (int t = 0; t < 12; ++t) {
    const JointPmf p = gate_joint({gates[t % 6], noise(rng)});
    const PidAtoms o = brute_force_pid(p);
    const PidAtoms s = decompose(p).report.atoms;
    CHECK(std::abs(o.redundancy - s.redundancy) <= 1e-3);
    CHECK(std::abs(o.unique1 - s.unique1) <= 1e-3);
    CHECK(std::abs(o.unique2 - s.unique2) <= 1e-3);
    CHECK(std::abs(o.synergy - s.synergy) <= 1e-3);
  }
}

TEST_CASE("oracle agrees with the solver on small random tables") {
  std::mt19937_64 rng(78);
  for (int t = 0; t < 4; ++t) {
    const JointPmf p = testing::random_joint(rng, 2, 3, 2);
    const PidAtoms o = brute_force_pid(p);
    const PidAtoms s = decompose(p).report.atoms;
    CHECK(std::abs(o.synergy - s.synergy) <= 1e-3);
    CHECK(std::abs(o.redundancy - s.redundancy) <= 1e-3);
  }
}

TEST_CASE("oracle refuses large tables") {
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(brute_force_pid(testing::random_joint(rng, 5, 2, 2)), CapabilityError);
}

TEST_CASE("flip noise strictly reduces total information") {
  for (Gate g : {Gate::Xor, Gate::And, Gate::Or, Gate::Copy, Gate::Unq1, Gate::Unq2}) {
    double prev = 2.0;
    for (double noise : {0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.49}) {
      const double total = mutual_information(gate_joint({g, noise}), {Axis::X1, Axis::X2}, {Axis::Y});
      CHECK(total < prev);
      prev = total;
    }
  }
}

TEST_CASE("continuous generator is seeded and finite") {
  const ContinuousSpec spec{Structure::Redundancy, 3, 4.0, 200, 9};
  const RecordSet a = gen_continuous(spec);
  const RecordSet b = gen_continuous(spec);
  CHECK(a.records == b.records);
  CHECK(a.manifest == b.manifest);
  for (const auto& r : a.records) {
    for (double v : r.x1) CHECK(std::isfinite(v));
    CHECK(*r.gold >= 0);
    CHECK(*r.gold < 2);
    validate_record(r, a.manifest);
  }
  CHECK(parse_structure("unique2") == Structure::Unique2);
}

TEST_CASE("discretized oracle recovers the planted structure") {
  struct Case {
    Structure s;
    int dominant;  // index into R, U1, U2, S
  };
  for (const Case c : {Case{Structure::Synergy, 3}, Case{Structure::Redundancy, 0}, Case{Structure::Unique1, 1},
                       Case{Structure::Unique2, 2}}) {
    const RecordSet set = gen_continuous({c.s, 4, 4.0, 2000, 5});
    const PidAtoms a = brute_force_pid(discretize_records(set.records));
    const double v[4] = {a.redundancy, a.unique1, a.unique2, a.synergy};
    CHECK(std::max_element(v, v + 4) - v == c.dominant);
  }
  const RecordSet none = gen_continuous({Structure::Independent, 4, 4.0, 2000, 5});
  const PidAtoms z = brute_force_pid(discretize_records(none.records));
  for (double v : {z.redundancy, z.unique1, z.unique2, z.synergy}) CHECK(v <= 0.05);
}

TEST_CASE("large separation reproduces the gate profile") {
  const RecordSet set = gen_continuous({Structure::Synergy, 2, 10.0, 1000, 3});
  const PidAtoms a = brute_force_pid(discretize_records(set.records));
  const PidAtoms xor_atoms = brute_force_pid(gate_joint({Gate::Xor}));
  CHECK(a.synergy > std::max({a.redundancy, a.unique1, a.unique2}));
  CHECK(std::abs(a.synergy - xor_atoms.synergy) < 0.05);
}

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "mmpid/info.hpp"
#include "mmpid/ingest.hpp"
#include "mmpid/pid.hpp"

namespace mmpid {

// Two uniform bits pushed through a named gate. COPY duplicates one bit into
// both sources and the label; UNQ1/UNQ2 copy one source into the label.
enum class Gate { Xor, And, Or, Copy, Unq1, Unq2 };

std::string to_string(Gate g);
Gate parse_gate(const std::string& s);

struct GateSpec {
  Gate gate = Gate::Xor;
  double flip_noise = 0.0;  // probability of flipping Y, in [0, 0.5)
  std::size_t n_samples = 0;  // 0 = exact joint
  std::uint64_t seed = 0;
};

// Exact 2x2x2 joint for the gate with Y flipped with probability flip_noise.
JointPmf gate_joint(const GateSpec& spec);
// Empirical joint of spec.n_samples draws from gate_joint(spec).
JointPmf sample_gate_joint(const GateSpec& spec);

struct OracleResult {
  JointPmf q;
  AtomReport report;
};

// Minimizes I_Q(X1,X2;Y) over the admissible set by grid search with local
// refinement, independently of the mirror-descent solver. Exhaustive for up
// to two free coupling coordinates; cyclic grid line searches along 2x2
// cycle moves otherwise. Throws CapabilityError above 4x4x4.
OracleResult brute_force_search(const JointPmf& p, std::size_t grid_resolution = 50);
PidAtoms brute_force_pid(const JointPmf& p, std::size_t grid_resolution = 50);

enum class Structure { Synergy, Redundancy, Unique1, Unique2, Independent };

std::string to_string(Structure s);
Structure parse_structure(const std::string& s);

struct ContinuousSpec {
  Structure structure = Structure::Synergy;
  std::size_t dim = 4;
  double cluster_separation = 4.0;
  std::size_t n_samples = 1000;
  std::uint64_t seed = 0;
};

// Gaussian-cluster features around +/- separation/2 per dimension, driven by
// two latent bits. Score fields hold the exact posterior label distributions
// given both, the vision-only and the text-only features.
RecordSet gen_continuous(const ContinuousSpec& spec);

// Empirical 2x2xK joint after per-dimension median splits, collapsed per
// modality by majority (ties go to bin 0). Y is each record's gold label.
JointPmf discretize_records(std::span<const SampleRecord> records);

}  // namespace mmpid

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mmpid/analysis.hpp"
#include "mmpid/batch.hpp"
#include "mmpid/error.hpp"
#include "mmpid/ingest.hpp"
#include "mmpid/pid.hpp"
#include "mmpid/synth.hpp"

namespace py = pybind11;
using namespace mmpid;

namespace {

JointPmf joint_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3) throw DomainError("joint table must be 3-dimensional (x1, x2, y)");
  const double* d = a.data();
  return JointPmf(a.shape(0), a.shape(1), a.shape(2), std::vector<double>(d, d + a.size()));
}

py::array_t<double> joint_to_array(const JointPmf& p) {
  py::array_t<double> out({p.n1(), p.n2(), p.k()});
  std::copy(p.table().begin(), p.table().end(), out.mutable_data());
  return out;
}

py::dict atoms_dict(const PidAtoms& a) {
  py::dict d;
  d["redundancy"] = a.redundancy;
  d["unique1"] = a.unique1;
  d["unique2"] = a.unique2;
  d["synergy"] = a.synergy;
  d["total"] = a.total;
  return d;
}

py::dict report_dict(const AtomReport& r) {
  py::dict d = atoms_dict(r.atoms);
  d["raw"] = atoms_dict(r.raw);
  d["mi_x1"] = r.terms.mi_x1;
  d["mi_x2"] = r.terms.mi_x2;
  d["mi_joint"] = r.terms.mi_joint;
  d["mi_q"] = r.terms.mi_q;
  d["max_residual"] = r.residuals.max_identity();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Partial information decomposition of multimodal predictions";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DomainError>(m, "DomainError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ConsistencyError>(m, "ConsistencyError", base.ptr());
  py::register_exception<CapabilityError>(m, "CapabilityError", base.ptr());
  py::register_exception<DegenerateError>(m, "DegenerateError", base.ptr());
  py::register_exception<InfeasibleError>(m, "InfeasibleError", base.ptr());

  m.def(
      "decompose",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& joint, int max_iters, double tol,
         double step, const std::string& step_rule) {
        SolveOptions o;
        o.max_iters = max_iters;
        o.tol = tol;
        o.step = step;
        o.step_rule = parse_step_rule(step_rule);
        const Decomposition d = decompose(joint_from_array(joint), o);
        py::dict r = report_dict(d.report);
        r["converged"] = d.solve.converged;
        r["iterations"] = d.solve.iterations;
        r["coupling"] = joint_to_array(d.solve.q);
        return r;
      },
      py::arg("joint"), py::arg("max_iters") = 10000, py::arg("tol") = 1e-9, py::arg("step") = 0.1,
      py::arg("step_rule") = "fixed", "Atoms (bits) of a joint table indexed [x1, x2, y].");

  m.def(
      "brute_force_pid",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& joint, std::size_t grid) {
        return report_dict(brute_force_search(joint_from_array(joint), grid).report);
      },
      py::arg("joint"), py::arg("grid_resolution") = 50);

  m.def(
      "gate_joint",
      [](const std::string& gate, double noise, std::size_t samples, std::uint64_t seed) {
        GateSpec g;
        g.gate = parse_gate(gate);
        g.flip_noise = noise;
        g.n_samples = samples;
        g.seed = seed;
        return joint_to_array(samples == 0 ? gate_joint(g) : sample_gate_joint(g));
      },
      py::arg("gate"), py::arg("noise") = 0.0, py::arg("samples") = 0, py::arg("seed") = 0);

  m.def(
      "pid_shares",
      [](double r, double u1, double u2, double s) {
        const Shares sh = pid_shares({r, u1, u2, s, r + u1 + u2 + s});
        return std::vector<double>(sh.begin(), sh.end());
      },
      py::arg("redundancy"), py::arg("unique1"), py::arg("unique2"), py::arg("synergy"));

  m.def(
      "spearman",
      [](const std::vector<double>& xs, const std::vector<double>& ys, bool exact) {
        const CorrelationResult c =
            spearman(xs, ys, exact ? PValueMethod::ExactPermutation : PValueMethod::TApproximation);
        return py::make_tuple(c.rho, c.p_value);
      },
      py::arg("xs"), py::arg("ys"), py::arg("exact") = false, "Returns (rho, p_value).");

  m.def(
      "threshold_regularize",
      [](const std::vector<double>& scores, double tau) {
        const RegularizedPrediction r = threshold_regularize(scores, tau);
        const auto p = r.probs.probs();
        return py::make_tuple(std::vector<double>(p.begin(), p.end()), r.fallback_used);
      },
      py::arg("scores"), py::arg("tau") = kDefaultTau, "Returns (probs, fallback_used).");

  m.def(
      "split_sizes",
      [](std::size_t n, std::size_t train_parts, std::size_t test_parts) {
        const SplitIndices s = split_indices(n, {train_parts, test_parts, 0});
        return py::make_tuple(s.train.size(), s.test.size());
      },
      py::arg("n"), py::arg("train_parts") = 3, py::arg("test_parts") = 1);

  m.def(
      "estimate_continuous",
      [](const std::string& structure, std::size_t dim, double separation, std::size_t samples, std::uint64_t seed,
         int epochs) {
        ContinuousSpec spec;
        spec.structure = parse_structure(structure);
        spec.dim = dim;
        spec.cluster_separation = separation;
        spec.n_samples = samples;
        spec.seed = seed;
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.seed = seed;
        BatchEstimate est;
        PidAtoms oracle;
        {
          py::gil_scoped_release release;
          const RecordSet set = gen_continuous(spec);
          const auto [tr, te] = split_dataset<SampleRecord>(set.records, {3, 1, seed});
          est = estimate_atoms(train(tr, cfg), te, 1);
          oracle = brute_force_pid(discretize_records(te));
        }
        py::dict d;
        d["batch"] = report_dict(est.report);
        d["oracle"] = atoms_dict(oracle);
        d["test_count"] = est.test_count;
        return d;
      },
      py::arg("structure"), py::arg("dim") = 4, py::arg("separation") = 4.0, py::arg("samples") = 1000,
      py::arg("seed") = 0, py::arg("epochs") = 8,
      "Planted continuous structure: learned-coupling atoms and the discretized oracle on the test split.");
}

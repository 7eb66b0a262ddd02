#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <functional>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mmpid/analysis.hpp"
#include "mmpid/batch.hpp"
#include "mmpid/error.hpp"
#include "mmpid/ingest.hpp"
#include "mmpid/numeric.hpp"
#include "mmpid/pid.hpp"
#include "mmpid/synth.hpp"

namespace mmpid::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kVersion = "1.0.0";
constexpr const char* kOutEnv = "MMPID_OUT_DIR";

struct Options {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::string out_dir = ".";
  bool man = false;

  // inputs
  std::string gate;
  double noise = 0.0;
  std::size_t samples = 0;
  std::string joint;
  std::string records;
  std::vector<std::string> inputs;
  std::string estimator;

  // discrete solver
  int max_iters = 10000;
  double tol = 1e-9;
  double step = 0.1;
  std::string step_rule = "fixed";
  std::size_t grid = 50;

  // coupling estimator
  double tau = kDefaultTau;
  std::string label_mode = "soft";
  double lr = 1e-3;
  int epochs = 8;
  std::size_t batch = 256;
  std::size_t test_batch = 256;
  int sinkhorn_iters = 100;
  std::size_t hidden = 32;
  std::size_t embed = 8;
  std::size_t train_parts = 3;
  std::size_t test_parts = 1;
  std::string save_model;

  // analysis
  std::vector<std::string> scaling_order;
  std::size_t bootstrap = 0;
  std::string terms = "atoms";
  std::string x_column = "accuracy";
  bool exact = false;

  // synth
  std::string structure;
  std::size_t dim = 4;
  double separation = 4.0;
  std::string output;
  std::string model;
  std::string dataset;
  std::string family;
  std::string regime;
  std::string size;
  std::optional<int> layer;
  std::string checkpoint;

  // stats
  std::string modality = "vision";
};

// ---------------------------------------------------------------- app

void add_solver_options(CLI::App* sub, Options& o) {
  sub->add_option("--max-iters", o.max_iters, "Mirror-descent iteration cap")->capture_default_str()->group("Solver");
  sub->add_option("--tol", o.tol, "Relative objective change at which the solver stops")
      ->capture_default_str()
      ->group("Solver");
  sub->add_option("--step", o.step, "Mirror-descent step size")->capture_default_str()->group("Solver");
  sub->add_option("--step-rule", o.step_rule, "Step rule")
      ->check(CLI::IsMember({"fixed", "backtracking"}))
      ->capture_default_str()
      ->group("Solver");
}

void add_batch_options(CLI::App* sub, Options& o) {
  sub->add_option("--tau", o.tau, "Threshold below which probe scores fall back to uniform")
      ->capture_default_str()
      ->group("Coupling estimator");
  sub->add_option("--label-mode", o.label_mode, "Sinkhorn target construction")
      ->check(CLI::IsMember({"soft", "sample", "argmax"}))
      ->capture_default_str()
      ->group("Coupling estimator");
  sub->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str()->group("Coupling estimator");
  sub->add_option("--epochs", o.epochs, "Training epochs")->capture_default_str()->group("Coupling estimator");
  sub->add_option("--batch-size", o.batch, "Training batch size")->capture_default_str()->group("Coupling estimator");
  sub->add_option("--test-batch-size", o.test_batch, "Evaluation batch size")
      ->capture_default_str()
      ->group("Coupling estimator");
  sub->add_option("--sinkhorn-iters", o.sinkhorn_iters, "Unrolled Sinkhorn iterations")
      ->capture_default_str()
      ->group("Coupling estimator");
  sub->add_option("--hidden", o.hidden, "Encoder hidden width")->capture_default_str()->group("Coupling estimator");
  sub->add_option("--embed-dim", o.embed, "Encoder embedding width per label")
      ->capture_default_str()
      ->group("Coupling estimator");
  sub->add_option("--train-parts", o.train_parts, "Train share of the split ratio")
      ->capture_default_str()
      ->group("Coupling estimator");
  sub->add_option("--test-parts", o.test_parts, "Test share of the split ratio")
      ->capture_default_str()
      ->group("Coupling estimator");
}

void add_grid_option(CLI::App* sub, Options& o) {
  sub->add_option("--grid", o.grid, "Oracle grid resolution per free coordinate")->capture_default_str()->group("Solver");
}

std::unique_ptr<CLI::App> build_app(Options& o) {
  auto app = std::make_unique<CLI::App>("Partial information decomposition of multimodal probe exports", "mmpid");
  app->fallthrough();
  app->set_version_flag("--version", std::string("mmpid ") + kVersion);
  app->set_config("--config", "", "TOML or INI file with option values; command-line flags override it");
  app->add_option("--seed", o.seed, "Seed for splits, estimator training and synthetic data")->capture_default_str();
  app->add_option("--threads", o.threads, "Worker threads (0 = all cores); results do not depend on it")
      ->capture_default_str();
  app->add_option("--out", o.out_dir, "Output directory")->envname(kOutEnv)->capture_default_str();
  app->add_flag("--man", o.man, "Print the manual page in roff format and exit");
  app->require_subcommand(0, 1);

  auto* dec = app->add_subcommand("decompose", "Decompose one joint table, gate or records file into PID atoms");
  auto* in_group = dec->add_option_group("input", "Exactly one input source");
  in_group->add_option("--gate", o.gate, "Built-in gate: xor, and, or, copy, unq1, unq2");
  in_group->add_option("--joint", o.joint, "JSON joint table {\"dims\": [n1, n2, k], \"table\": [...]}");
  in_group->add_option("--in", o.records, "Records file (JSONL wire format)");
  in_group->require_option(1);
  dec->add_option("--noise", o.noise, "Label flip probability for --gate")->capture_default_str();
  dec->add_option("--samples", o.samples, "Draw this many samples from the gate (0 = exact joint)")
      ->capture_default_str();
  dec->add_option("--estimator", o.estimator,
                  "discrete or oracle for tables; batch (default) or discrete for records")
      ->check(CLI::IsMember({"discrete", "oracle", "batch"}));
  dec->add_option("--save-model", o.save_model, "Write the trained coupling model here (batch only)");
  add_solver_options(dec, o);
  add_grid_option(dec, o);
  add_batch_options(dec, o);

  auto* prof = app->add_subcommand("profile", "Per-file atoms, shares and accuracies over many records files");
  prof->add_option("inputs", o.inputs, "Records files")->required();
  prof->add_option("--estimator", o.estimator, "batch (default) or discrete")
      ->check(CLI::IsMember({"discrete", "batch"}));
  prof->add_option("--scaling-order", o.scaling_order,
                   "Manifest size labels from small to large; emits scaling deltas for each family")
      ->delimiter(',')
      ->expected(3);
  prof->add_option("--bootstrap", o.bootstrap, "Percentile bootstrap resamples for per-regime share intervals (0 = off)")
      ->capture_default_str();
  add_solver_options(prof, o);
  add_batch_options(prof, o);

  auto* cor = app->add_subcommand("correlate", "Spearman correlations between accuracy and PID terms per dataset");
  cor->add_option("inputs", o.inputs, "Profile tables written by 'profile'")->required();
  cor->add_option("--terms", o.terms, "Correlate against raw atoms or their shares")
      ->check(CLI::IsMember({"atoms", "shares"}))
      ->capture_default_str();
  cor->add_option("--x", o.x_column, "Outcome column")
      ->check(CLI::IsMember({"accuracy", "d_vision"}))
      ->capture_default_str();
  cor->add_flag("--exact", o.exact, "Exact permutation p-values (n <= 10)");

  auto* tr = app->add_subcommand("trace", "Layer-wise or checkpoint-wise atoms over tagged records files");
  tr->add_option("inputs", o.inputs, "Records files, one per layer or checkpoint")->required();
  tr->add_option("--estimator", o.estimator, "batch (default) or discrete")->check(CLI::IsMember({"discrete", "batch"}));
  add_solver_options(tr, o);
  add_batch_options(tr, o);

  auto* syn = app->add_subcommand("synth", "Write a synthetic gate joint or planted-structure records file");
  auto* syn_kind = syn->add_option_group("kind", "Exactly one generator");
  syn_kind->add_option("--gate", o.gate, "Gate joint: xor, and, or, copy, unq1, unq2");
  syn_kind->add_option("--structure", o.structure, "Records: synergy, redundancy, unique1, unique2, independent");
  syn_kind->require_option(1);
  syn->add_option("--noise", o.noise, "Label flip probability for --gate")->capture_default_str();
  syn->add_option("--samples", o.samples, "Sample count (gate: 0 = exact joint; structure: 0 = 1000)")
      ->capture_default_str();
  syn->add_option("--dim", o.dim, "Feature dimension per modality")->capture_default_str();
  syn->add_option("--separation", o.separation, "Distance between cluster centres per dimension")
      ->capture_default_str();
  syn->add_option("-o,--output", o.output, "Output file (default: inside --out)");
  syn->add_option("--model", o.model, "Model id written to the manifest");
  syn->add_option("--dataset", o.dataset, "Dataset name written to the manifest");
  syn->add_option("--family", o.family, "Family label written to the manifest");
  syn->add_option("--regime", o.regime, "Regime label written to the manifest");
  syn->add_option("--size", o.size, "Size label written to the manifest");
  syn->add_option("--layer", o.layer, "Layer index attached to every record");
  syn->add_option("--checkpoint", o.checkpoint, "Checkpoint tag attached to every record");

  auto* st = app->add_subcommand("stats", "Per-dimension feature mean and deviation of one modality");
  st->add_option("--in", o.records, "Records file")->required();
  st->add_option("--modality", o.modality, "vision or text")
      ->check(CLI::IsMember({"vision", "text"}))
      ->capture_default_str();
  st->add_option("-o,--output", o.output, "Output file (default: inside --out)");

  auto* val = app->add_subcommand("validate", "Lint a records file and its manifest");
  val->add_option("input", o.records, "Records file")->required();

  app->footer("Exit status: 0 success, 2 input error, 3 numeric failure, 4 unsupported request.");
  return app;
}

// ---------------------------------------------------------------- helpers

int exit_code(const std::exception& e) {
  if (dynamic_cast<const CapabilityError*>(&e)) return kExitCapability;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const DomainError*>(&e) ||
      dynamic_cast<const DegenerateError*>(&e))
    return kExitInput;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const ConsistencyError*>(&e) ||
      dynamic_cast<const InfeasibleError*>(&e))
    return kExitNumeric;
  if (dynamic_cast<const json::exception*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return kExitInput;
  return 1;
}

json resolved_config(const CLI::App& app, const CLI::App& sub) {
  static const std::set<std::string> skip = {"help", "config", "out", "threads", "man", "version"};
  json cfg = json::object();
  auto collect = [&](const CLI::App& a, json& into) {
    for (const CLI::Option* opt : a.get_options()) {
      const std::string name = opt->get_single_name();
      if (name.empty() || skip.count(name)) continue;
      const auto& res = opt->results();
      if (!res.empty()) {
        into[name] = res.size() == 1 && opt->get_expected_max() <= 1 ? json(res[0]) : json(res);
      } else if (!opt->get_default_str().empty()) {
        into[name] = opt->get_default_str();
      }
    }
  };
  collect(app, cfg);
  json& sub_cfg = cfg[sub.get_name()] = json::object();
  collect(sub, sub_cfg);
  for (const CLI::App* group : sub.get_subcommands([](const CLI::App*) { return true; })) collect(*group, sub_cfg);
  return cfg;
}

std::string write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << text;
  return path.string();
}

json atoms_json(const PidAtoms& a) {
  return {{"R", a.redundancy}, {"U1", a.unique1}, {"U2", a.unique2}, {"S", a.synergy}, {"total", a.total}};
}

json report_json(const AtomReport& r) {
  json j;
  j["atoms"] = atoms_json(r.atoms);
  j["raw_atoms"] = atoms_json(r.raw);
  if (r.atoms.sum() > kDegenerateTotal) {
    const Shares s = pid_shares(r.atoms);
    j["shares"] = {{"R", s[0]}, {"U1", s[1]}, {"U2", s[2]}, {"S", s[3]}};
  } else {
    j["shares"] = nullptr;
  }
  j["residuals"] = {{"sum", r.residuals.sum},
                    {"source1", r.residuals.source1},
                    {"source2", r.residuals.source2},
                    {"coinformation", r.residuals.coinformation},
                    {"alternative_redundancy", r.residuals.alt_redundancy}};
  j["terms"] = {{"I_x1_y", r.terms.mi_x1},
                {"I_x2_y", r.terms.mi_x2},
                {"I_x1x2_y", r.terms.mi_joint},
                {"I_q_x1x2_y", r.terms.mi_q}};
  return j;
}

JointPmf read_joint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!j.contains("dims") || !j.contains("table")) throw FormatError(path.string() + ": expected 'dims' and 'table'");
  const auto dims = j["dims"].get<std::vector<std::size_t>>();
  if (dims.size() != 3) throw FormatError(path.string() + ": 'dims' must hold three sizes");
  return JointPmf(dims[0], dims[1], dims[2], j["table"].get<std::vector<double>>());
}

std::string joint_json(const JointPmf& p) {
  json j;
  j["dims"] = {p.n1(), p.n2(), p.k()};
  j["table"] = std::vector<double>(p.table().begin(), p.table().end());
  return j.dump() + "\n";
}

std::uint64_t joint_digest(const JointPmf& p) {
  Fnv1a h;
  for (auto d : p.dims()) h.u64(d);
  for (double v : p.table()) h.f64(v);
  return h.value();
}

SolveOptions solve_options(const Options& o) {
  SolveOptions s;
  s.max_iters = o.max_iters;
  s.tol = o.tol;
  s.step = o.step;
  s.step_rule = parse_step_rule(o.step_rule);
  s.seed = o.seed;
  return s;
}

TrainConfig train_config(const Options& o) {
  TrainConfig c;
  c.learning_rate = o.lr;
  c.epochs = o.epochs;
  c.batch_size = o.batch;
  c.test_batch_size = o.test_batch;
  c.sinkhorn_iters = o.sinkhorn_iters;
  c.hidden = o.hidden;
  c.embed_dim = o.embed;
  c.tau = o.tau;
  c.label_mode = parse_label_mode(o.label_mode);
  c.seed = o.seed;
  return c;
}

struct Estimated {
  AtomReport report;
  json detail;
};

Estimated estimate_records(const RecordSet& set, const std::string& estimator, const Options& o) {
  Estimated e;
  if (estimator == "discrete") {
    const JointPmf p = discretize_records(set.records);
    const Decomposition d = decompose(p, solve_options(o));
    e.report = d.report;
    e.detail = {{"estimator", "discrete"},
                {"discretization", "median-split"},
                {"iterations", d.solve.iterations},
                {"converged", d.solve.converged}};
    return e;
  }
  if (estimator != "batch") throw CapabilityError("estimator '" + estimator + "' does not accept records input");
  const auto [train_set, test_set] =
      split_dataset<SampleRecord>(set.records, SplitSpec{o.train_parts, o.test_parts, o.seed});
  const CouplingModel model = train(train_set, train_config(o));
  if (!o.save_model.empty()) save_model(o.save_model, model);
  const BatchEstimate est = estimate_atoms(model, test_set, o.threads);
  e.report = est.report;
  e.detail = {{"estimator", "batch"},
              {"train_count", train_set.size()},
              {"test_count", est.test_count},
              {"max_sinkhorn_residual", est.max_sinkhorn_residual},
              {"loss_trace", model.loss_trace},
              {"model_digest", hex64(model_digest(model))}};
  return e;
}

std::optional<double> accuracy(std::span<const SampleRecord> records, bool text_only) {
  std::size_t n = 0, hit = 0;
  for (const auto& r : records) {
    if (!r.gold) continue;
    const std::optional<int>& pred = text_only ? r.pred_text : r.pred;
    const int guess = pred ? *pred : static_cast<int>(argmax(text_only ? r.scores_t : r.scores_mm));
    ++n;
    hit += guess == *r.gold;
  }
  if (n == 0) return std::nullopt;
  return static_cast<double>(hit) / static_cast<double>(n);
}

template <typename T>
std::optional<T> common_tag(std::span<const SampleRecord> records, std::optional<T> SampleRecord::*field,
                            const std::string& what, const std::string& file) {
  std::optional<T> tag;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& v = records[i].*field;
    if (i == 0) {
      tag = v;
    } else if (v != tag) {
      throw FormatError(file + ": records carry more than one " + what);
    }
  }
  return tag;
}

ProfileReport profile_records(const std::string& path, const RecordSet& set, const Estimated& est) {
  ProfileReport r;
  r.model = set.manifest.model;
  r.dataset = set.manifest.dataset;
  r.layer = common_tag<int>(set.records, &SampleRecord::layer, "layer", path);
  r.checkpoint = common_tag<std::string>(set.records, &SampleRecord::checkpoint, "checkpoint", path);
  r.family = set.manifest.family;
  r.regime = set.manifest.regime;
  r.size = set.manifest.size;
  r.atoms = est.report.atoms;
  attach_shares(r);
  r.accuracy = accuracy(set.records, false);
  r.accuracy_text_only = accuracy(set.records, true);
  r.manifest_digest = hex64(manifest_digest(set.manifest));
  return r;
}

std::vector<std::string> filtered_diff(const Manifest& a, const Manifest& b, const std::set<std::string>& fields) {
  std::vector<std::string> out;
  for (auto& line : manifest_diff(a, b)) {
    const std::string key = line.substr(0, line.find(':'));
    if (fields.empty() ? key != "feature_sidecar" : fields.count(key) > 0) out.push_back(line);
  }
  return out;
}

[[noreturn]] void manifest_mismatch(const std::string& a, const std::string& b, const std::vector<std::string>& diff) {
  std::string msg = "inconsistent manifests between " + a + " and " + b;
  for (const auto& d : diff) msg += "\n  " + d;
  throw FormatError(msg);
}

std::vector<RecordSet> load_all(const std::vector<std::string>& paths) {
  std::vector<RecordSet> sets;
  sets.reserve(paths.size());
  for (const auto& p : paths) sets.push_back(read_record_set(p));
  return sets;
}

std::uint64_t combined_digest(const std::vector<std::string>& digests) {
  Fnv1a h;
  for (const auto& d : digests) h.str(d).u64(0);
  return h.value();
}

json provenance(const CLI::App& app, const CLI::App& sub, const json& inputs, const std::string& digest) {
  json j;
  j["tool"] = "mmpid";
  j["version"] = kVersion;
  j["command"] = sub.get_name();
  j["config"] = resolved_config(app, sub);
  j["inputs"] = inputs;
  j["manifest_digest"] = digest;
  return j;
}

std::string fixed1(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", *v);
  std::string s = buf;
  return s == "-0.0" ? "0.0" : s;
}

// ---------------------------------------------------------------- commands

int cmd_decompose(const CLI::App& app, const CLI::App& sub, const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir;
  json result, inputs = json::array();
  std::string digest;
  ProfileReport row;

  if (!o.records.empty()) {
    const std::string estimator = o.estimator.empty() ? "batch" : o.estimator;
    if (estimator == "oracle") throw CapabilityError("the oracle estimator takes joint tables, not records");
    const RecordSet set = read_record_set(o.records);
    const Estimated est = estimate_records(set, estimator, o);
    row = profile_records(o.records, set, est);
    digest = row.manifest_digest;
    inputs.push_back({{"path", o.records}, {"manifest_digest", digest}});
    result = report_json(est.report);
    result["estimator"] = est.detail;
  } else {
    const std::string estimator = o.estimator.empty() ? "discrete" : o.estimator;
    if (estimator == "batch") {
      throw CapabilityError("the batch estimator needs records with continuous features, not a joint table");
    }
    JointPmf p;
    if (!o.gate.empty()) {
      const GateSpec spec{parse_gate(o.gate), o.noise, o.samples, o.seed};
      p = o.samples > 0 ? sample_gate_joint(spec) : gate_joint(spec);
      row.model = "gate";
      row.dataset = to_string(spec.gate);
      inputs.push_back({{"gate", to_string(spec.gate)}});
    } else {
      p = read_joint(o.joint);
      row.model = "joint";
      row.dataset = fs::path(o.joint).stem().string();
      inputs.push_back({{"path", o.joint}});
    }
    digest = hex64(joint_digest(p));
    inputs[0]["manifest_digest"] = digest;
    AtomReport report;
    json detail;
    if (estimator == "oracle") {
      const OracleResult r = brute_force_search(p, o.grid);
      report = r.report;
      detail = {{"estimator", "oracle"}, {"grid", o.grid}};
    } else {
      const Decomposition d = decompose(p, solve_options(o));
      report = d.report;
      detail = {{"estimator", "discrete"}, {"iterations", d.solve.iterations}, {"converged", d.solve.converged}};
    }
    row.atoms = report.atoms;
    attach_shares(row);
    row.manifest_digest = digest;
    result = report_json(report);
    result["estimator"] = detail;
  }
  result["manifest_digest"] = digest;
  const json prov = provenance(app, sub, inputs, digest);
  result["provenance"] = prov;
  write_text(dir / "atoms.json", result.dump(2) + "\n");
  profile_table(std::span<const ProfileReport>(&row, 1)).write(dir / "atoms.csv");
  write_text(dir / "provenance.json", prov.dump(2) + "\n");
  const PidAtoms& a = row.atoms;
  out << "R=" << format_double(a.redundancy) << " U1=" << format_double(a.unique1) << " U2="
      << format_double(a.unique2) << " S=" << format_double(a.synergy) << " total=" << format_double(a.total) << "\n";
  return kExitOk;
}

void check_profile_manifests(const std::vector<std::string>& paths, const std::vector<RecordSet>& sets) {
  std::map<std::string, std::size_t> first_of_dataset, first_of_model;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const Manifest& m = sets[i].manifest;
    auto [d, new_d] = first_of_dataset.emplace(m.dataset, i);
    if (!new_d) {
      auto diff = filtered_diff(sets[d->second].manifest, m, {"k", "format"});
      if (!diff.empty()) manifest_mismatch(paths[d->second], paths[i], diff);
    }
    auto [mo, new_m] = first_of_model.emplace(m.model, i);
    if (!new_m) {
      auto diff = filtered_diff(sets[mo->second].manifest, m,
                                {"dim_x1", "dim_x2", "pooling", "exporter_version", "family", "regime", "size", "format"});
      if (!diff.empty()) manifest_mismatch(paths[mo->second], paths[i], diff);
    }
  }
}

int cmd_profile(const CLI::App& app, const CLI::App& sub, const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir;
  const std::string estimator = o.estimator.empty() ? "batch" : o.estimator;
  const auto sets = load_all(o.inputs);
  check_profile_manifests(o.inputs, sets);

  std::vector<ProfileReport> reports;
  json inputs = json::array();
  std::vector<std::string> digests;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const Estimated est = estimate_records(sets[i], estimator, o);
    reports.push_back(profile_records(o.inputs[i], sets[i], est));
    digests.push_back(reports.back().manifest_digest);
    inputs.push_back({{"path", o.inputs[i]}, {"manifest_digest", digests.back()}, {"estimator", est.detail}});
  }
  const std::string digest = hex64(combined_digest(digests));
  const json prov = provenance(app, sub, inputs, digest);

  profile_table(reports).write(dir / "profile.csv");

  const FamilyMediansResult medians = family_medians(reports);
  for (const auto& w : medians.warnings) out << "warning: " << w << "\n";
  if (!medians.rows.empty()) family_medians_table(medians).write(dir / "family_medians.csv");

  if (!o.scaling_order.empty()) {
    CsvTable t({"family", "regime", "dataset", "from", "to", "d_accuracy", "d_share_S", "d_share_U2"});
    std::map<std::tuple<std::string, std::string, std::string>, std::map<std::string, const ProfileReport*>> groups;
    for (const auto& r : reports) {
      if (r.family && r.regime && r.size) groups[{*r.family, *r.regime, r.dataset}][*r.size] = &r;
    }
    for (const auto& [key, by_size] : groups) {
      std::vector<const ProfileReport*> chain;
      for (const auto& s : o.scaling_order) {
        auto it = by_size.find(s);
        if (it != by_size.end()) chain.push_back(it->second);
      }
      if (chain.size() != 3) {
        out << "warning: " << std::get<0>(key) << "/" << std::get<1>(key) << "/" << std::get<2>(key)
            << " lacks one of the requested sizes; no scaling rows\n";
        continue;
      }
      for (const DeltaRow& d : scaling_deltas(*chain[0], *chain[1], *chain[2])) {
        t.add_row({std::get<0>(key), std::get<1>(key), std::get<2>(key), d.from, d.to, fixed1(d.d_accuracy),
                   fixed1(d.d_synergy), fixed1(d.d_u2)});
      }
    }
    if (t.rows().empty()) {
      out << "warning: no family/regime/dataset group has all of the requested sizes; scaling.csv is empty\n";
    }
    t.write(dir / "scaling.csv");
  }

  if (o.bootstrap > 0) {
    CsvTable t({"regime", "measure", "mean", "ci_lo", "ci_hi", "n"});
    std::map<std::string, std::array<std::vector<double>, 2>> by_regime;
    for (const auto& r : reports) {
      if (r.regime && r.shares) {
        by_regime[*r.regime][0].push_back((*r.shares)[3]);
        by_regime[*r.regime][1].push_back((*r.shares)[2]);
      }
    }
    for (const auto& [regime, vals] : by_regime) {
      for (int m = 0; m < 2; ++m) {
        const auto& v = vals[static_cast<std::size_t>(m)];
        const Interval ci = bootstrap_mean_ci(v, o.bootstrap, o.seed);
        t.add_row({regime, m == 0 ? "share_S" : "share_U2", cell(pairwise_sum(v) / static_cast<double>(v.size())),
                   cell(ci.lo), cell(ci.hi), std::to_string(v.size())});
      }
    }
    t.write(dir / "regime_bootstrap.csv");
  }

  std::map<std::string, std::array<ChartSeries, 2>> per_dataset;
  for (const auto& r : reports) {
    auto& s = per_dataset[r.dataset];
    for (int m = 0; m < 2; ++m) {
      auto& series = s[static_cast<std::size_t>(m)];
      series.name = std::string(m == 0 ? "share_S/" : "share_U2/") + r.dataset;
      series.x.push_back(static_cast<double>(series.x.size()));
      series.y.push_back(r.shares ? (*r.shares)[m == 0 ? 3 : 2] : 0.0);
      series.labels.push_back(r.model);
    }
  }
  std::vector<ChartSeries> series;
  for (auto& [name, s] : per_dataset) series.insert(series.end(), s.begin(), s.end());
  write_text(dir / "chart.json", chart_bundle(series, prov.dump()));
  write_text(dir / "provenance.json", prov.dump(2) + "\n");
  out << "profiled " << reports.size() << " file(s) into " << (dir / "profile.csv").string() << "\n";
  return kExitOk;
}

int cmd_correlate(const CLI::App& app, const CLI::App& sub, const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir;
  std::vector<ProfileReport> reports;
  json inputs = json::array();
  for (const auto& p : o.inputs) {
    auto rows = read_profile_table(p);
    inputs.push_back({{"path", p}, {"rows", rows.size()}});
    reports.insert(reports.end(), rows.begin(), rows.end());
  }
  std::vector<std::string> digests;
  for (const auto& r : reports) digests.push_back(r.manifest_digest);
  const std::string digest = hex64(combined_digest(digests));
  const json prov = provenance(app, sub, inputs, digest);

  std::map<std::string, std::vector<const ProfileReport*>> by_dataset;
  for (const auto& r : reports) by_dataset[r.dataset].push_back(&r);

  static const char* kTerms[4] = {"R", "U1", "U2", "S"};
  const bool shares = o.terms == "shares";
  CsvTable t({"dataset", "x", "term", "rho", "p_value", "n", "manifest_digest"});
  std::vector<ChartSeries> series;
  for (const auto& [dataset, rows] : by_dataset) {
    std::vector<double> xs;
    std::vector<std::array<double, 4>> terms;
    for (const ProfileReport* r : rows) {
      std::optional<double> x = r->accuracy;
      if (o.x_column == "d_vision") {
        x = r->accuracy && r->accuracy_text_only ? std::optional(d_vision(*r->accuracy, *r->accuracy_text_only))
                                                 : std::nullopt;
      }
      if (!x) continue;
      if (shares && !r->shares) continue;
      xs.push_back(*x);
      terms.push_back(shares ? *r->shares
                             : std::array<double, 4>{r->atoms.redundancy, r->atoms.unique1, r->atoms.unique2,
                                                     r->atoms.synergy});
    }
    if (xs.size() < 3) {
      throw DomainError("dataset '" + dataset + "' has " + std::to_string(xs.size()) +
                        " usable row(s); correlation needs at least 3");
    }
    if (std::adjacent_find(xs.begin(), xs.end(), std::not_equal_to<>()) == xs.end()) {
      throw DegenerateError("dataset '" + dataset + "': " + o.x_column + " is constant; no correlation is defined");
    }
    ChartSeries s;
    s.name = "rho/" + dataset;
    for (std::size_t k = 0; k < 4; ++k) {
      std::vector<double> ys;
      for (const auto& tv : terms) ys.push_back(tv[k]);
      const std::string term = shares ? std::string("share_") + kTerms[k] : kTerms[k];
      // A constant term (e.g. U2 zero everywhere) gets a blank row rather than sinking the dataset.
      if (std::adjacent_find(ys.begin(), ys.end(), std::not_equal_to<>()) == ys.end()) {
        out << "warning: " << dataset << "/" << term << " is constant; rho left blank\n";
        t.add_row({dataset, o.x_column, term, "", "", std::to_string(ys.size()), digest});
        continue;
      }
      const CorrelationResult c =
          spearman(xs, ys, o.exact ? PValueMethod::ExactPermutation : PValueMethod::TApproximation);
      t.add_row({dataset, o.x_column, term, cell(c.rho), cell(c.p_value), std::to_string(c.n), digest});
      s.x.push_back(static_cast<double>(k));
      s.y.push_back(c.rho);
      s.labels.push_back(term);
    }
    series.push_back(std::move(s));
  }
  t.write(dir / "correlations.csv");
  write_text(dir / "chart.json", chart_bundle(series, prov.dump()));
  write_text(dir / "provenance.json", prov.dump(2) + "\n");
  out << "wrote " << (dir / "correlations.csv").string() << "\n";
  return kExitOk;
}

int cmd_trace(const CLI::App& app, const CLI::App& sub, const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir;
  const std::string estimator = o.estimator.empty() ? "batch" : o.estimator;
  const auto sets = load_all(o.inputs);
  for (std::size_t i = 1; i < sets.size(); ++i) {
    auto diff = filtered_diff(sets[0].manifest, sets[i].manifest, {});
    if (!diff.empty()) manifest_mismatch(o.inputs[0], o.inputs[i], diff);
  }
  std::vector<ProfileReport> reports;
  json inputs = json::array();
  std::vector<std::string> digests;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const Estimated est = estimate_records(sets[i], estimator, o);
    reports.push_back(profile_records(o.inputs[i], sets[i], est));
    digests.push_back(reports.back().manifest_digest);
    inputs.push_back({{"path", o.inputs[i]}, {"manifest_digest", digests.back()}});
  }
  const auto rows = trace(reports);
  const std::string digest = hex64(combined_digest(digests));
  const json prov = provenance(app, sub, inputs, digest);
  trace_table(rows).write(dir / "trace.csv");

  std::vector<ChartSeries> series(4);
  static const char* kNames[4] = {"R", "U1", "U2", "S"};
  for (std::size_t k = 0; k < 4; ++k) series[k].name = kNames[k];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const PidAtoms& a = rows[i].report.atoms;
    const double v[4] = {a.redundancy, a.unique1, a.unique2, a.synergy};
    for (std::size_t k = 0; k < 4; ++k) {
      series[k].x.push_back(static_cast<double>(i));
      series[k].y.push_back(v[k]);
      series[k].labels.push_back(rows[i].key);
    }
  }
  write_text(dir / "chart.json", chart_bundle(series, prov.dump()));
  write_text(dir / "provenance.json", prov.dump(2) + "\n");
  out << "traced " << rows.size() << " row(s) into " << (dir / "trace.csv").string() << "\n";
  return kExitOk;
}

int cmd_synth(const Options& o, std::ostream& out) {
  const fs::path dir = o.out_dir;
  if (!o.gate.empty()) {
    const GateSpec spec{parse_gate(o.gate), o.noise, o.samples, o.seed};
    const JointPmf p = o.samples > 0 ? sample_gate_joint(spec) : gate_joint(spec);
    const fs::path path = o.output.empty() ? dir / ("gate-" + to_string(spec.gate) + ".json") : fs::path(o.output);
    out << "wrote " << write_text(path, joint_json(p)) << "\n";
    return kExitOk;
  }
  ContinuousSpec spec;
  spec.structure = parse_structure(o.structure);
  spec.dim = o.dim;
  spec.cluster_separation = o.separation;
  spec.n_samples = o.samples > 0 ? o.samples : 1000;
  spec.seed = o.seed;
  RecordSet set = gen_continuous(spec);
  if (!o.model.empty()) set.manifest.model = o.model;
  if (!o.dataset.empty()) set.manifest.dataset = o.dataset;
  if (!o.family.empty()) set.manifest.family = o.family;
  if (!o.regime.empty()) set.manifest.regime = o.regime;
  if (!o.size.empty()) set.manifest.size = o.size;
  for (auto& r : set.records) {
    r.model = set.manifest.model;
    r.dataset = set.manifest.dataset;
    r.layer = o.layer;
    if (!o.checkpoint.empty()) r.checkpoint = o.checkpoint;
  }
  const fs::path path = o.output.empty() ? dir / (set.manifest.dataset + ".jsonl") : fs::path(o.output);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_record_set(path, set);
  out << "wrote " << path.string() << " (" << set.records.size() << " records)\n";
  return kExitOk;
}

int cmd_stats(const Options& o, std::ostream& out) {
  const RecordSet set = read_record_set(o.records);
  const Modality m = parse_modality(o.modality);
  const ModalityStats stats = compute_modality_stats(set.records, m);
  const fs::path path = o.output.empty() ? fs::path(o.out_dir) / ("stats-" + o.modality + ".json") : fs::path(o.output);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_modality_stats(path, stats);
  out << "wrote " << path.string() << " (" << stats.count << " records, " << stats.floored.size()
      << " floored dimension(s))\n";
  return kExitOk;
}

int cmd_validate(const Options& o, std::ostream& out, std::ostream& err) {
  const ValidationReport rep = validate_file(o.records);
  if (rep.ok()) {
    out << "ok: " << rep.records << " record(s)\n";
    return kExitOk;
  }
  for (const auto& e : rep.errors) err << o.records << ": " << e << "\n";
  err << rep.errors.size() << " error(s)\n";
  return kExitInput;
}

std::string roff_escape(std::string s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') out += "\\e";
    else if (c == '-') out += "\\-";
    else out += c;
  }
  if (!out.empty() && (out[0] == '.' || out[0] == '\'')) out = "\\&" + out;
  return out;
}

void roff_options(std::ostringstream& m, const CLI::App& a) {
  std::vector<const CLI::App*> scopes = {&a};
  for (const CLI::App* g : a.get_subcommands([](const CLI::App* s) { return s->get_name().empty(); }))
    scopes.push_back(g);
  for (const CLI::App* scope : scopes) {
    for (const CLI::Option* opt : scope->get_options()) {
      if (opt->get_single_name() == "help") continue;
      std::string names;
      for (const auto& s : opt->get_snames()) names += (names.empty() ? "-" : ", -") + s;
      for (const auto& l : opt->get_lnames()) names += (names.empty() ? "--" : ", --") + l;
      if (names.empty()) names = opt->get_name();
      m << ".TP\n.B " << roff_escape(names) << "\n" << roff_escape(opt->get_description());
      if (!opt->get_default_str().empty()) m << " (default: " << roff_escape(opt->get_default_str()) << ")";
      if (!opt->get_envname().empty()) m << " (environment: " << opt->get_envname() << ")";
      m << "\n";
    }
  }
}

}  // namespace

std::string man_page() {
  Options o;
  auto app = build_app(o);
  std::ostringstream m;
  m << ".TH MMPID 1 \"\" \"mmpid " << kVersion << "\" \"User Commands\"\n";
  m << ".SH NAME\nmmpid \\- " << roff_escape(app->get_description()) << "\n";
  m << ".SH SYNOPSIS\n.B mmpid\n[global options] command [options]\n";
  m << ".SH GLOBAL OPTIONS\n";
  roff_options(m, *app);
  m << ".SH COMMANDS\n";
  for (const CLI::App* sub : app->get_subcommands([](const CLI::App*) { return true; })) {
    m << ".SS " << sub->get_name() << "\n" << roff_escape(sub->get_description()) << "\n";
    roff_options(m, *sub);
  }
  m << ".SH ENVIRONMENT\n.TP\n.B " << kOutEnv << "\nDefault for \\-\\-out.\n";
  m << ".SH EXIT STATUS\n.TP\n0\nSuccess.\n.TP\n2\nUnparseable arguments, malformed input files, "
       "inconsistent manifests or invalid values.\n.TP\n3\nNumeric, convergence or consistency failure.\n"
       ".TP\n4\nThe requested estimator cannot handle the input.\n";
  return m.str();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  auto app = build_app(o);
  try {
    app->parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app->exit(e, out, err);
    return code == 0 ? kExitOk : kExitInput;
  }
  if (o.man) {
    out << man_page();
    return kExitOk;
  }
  set_default_threads(o.threads);
  const auto subs = app->get_subcommands();
  if (subs.empty()) {
    err << app->help();
    return kExitInput;
  }
  const CLI::App& sub = *subs.front();
  const std::string name = sub.get_name();
  try {
    if (name == "decompose") return cmd_decompose(*app, sub, o, out);
    if (name == "profile") return cmd_profile(*app, sub, o, out);
    if (name == "correlate") return cmd_correlate(*app, sub, o, out);
    if (name == "trace") return cmd_trace(*app, sub, o, out);
    if (name == "synth") return cmd_synth(o, out);
    if (name == "stats") return cmd_stats(o, out);
    if (name == "validate") return cmd_validate(o, out, err);
  } catch (const std::exception& e) {
    err << "mmpid " << name << ": " << e.what() << "\n";
    return exit_code(e);
  }
  return kExitInput;
}

}  // namespace mmpid::cli

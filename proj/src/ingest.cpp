#include "mmpid/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "mmpid/error.hpp"
#include "mmpid/numeric.hpp"

namespace mmpid {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(PoolingMode m) {
  switch (m) {
    case PoolingMode::Mean: return "mean";
    case PoolingMode::Last: return "last";
    case PoolingMode::Max: return "max";
  }
  return "mean";
}

PoolingMode parse_pooling(const std::string& s) {
  if (s == "mean") return PoolingMode::Mean;
  if (s == "last") return PoolingMode::Last;
  if (s == "max") return PoolingMode::Max;
  throw DomainError("unknown pooling mode '" + s + "' (expected mean, last or max)");
}

std::string to_string(Modality m) { return m == Modality::Vision ? "vision" : "text"; }

Modality parse_modality(const std::string& s) {
  if (s == "vision") return Modality::Vision;
  if (s == "text") return Modality::Text;
  throw DomainError("unknown modality '" + s + "' (expected vision or text)");
}

// ---------------------------------------------------------------- manifest

namespace {

json manifest_to_json(const Manifest& m) {
  json j;
  j["format"] = m.format;
  j["dataset"] = m.dataset;
  j["k"] = m.k;
  j["dim_x1"] = m.dim_x1;
  j["dim_x2"] = m.dim_x2;
  j["pooling"] = to_string(m.pooling);
  j["model"] = m.model;
  j["exporter_version"] = m.exporter_version;
  if (m.family) j["family"] = *m.family;
  if (m.regime) j["regime"] = *m.regime;
  if (m.size) j["size"] = *m.size;
  if (m.feature_sidecar) j["feature_sidecar"] = *m.feature_sidecar;
  return j;
}

template <typename T>
T require(const json& j, const char* key, long line) {
  auto it = j.find(key);
  if (it == j.end()) throw FormatError(std::string("missing field '") + key + "'", line);
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw FormatError(std::string("field '") + key + "' has the wrong type", line);
  }
}

template <typename T>
std::optional<T> optional_field(const json& j, const char* key, long line) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw FormatError(std::string("field '") + key + "' has the wrong type", line);
  }
}

Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.format = require<std::string>(j, "format", -1);
  if (m.format != kWireFormatVersion) throw FormatError("unsupported manifest format '" + m.format + "'");
  m.dataset = require<std::string>(j, "dataset", -1);
  m.k = require<std::size_t>(j, "k", -1);
  m.dim_x1 = require<std::size_t>(j, "dim_x1", -1);
  m.dim_x2 = require<std::size_t>(j, "dim_x2", -1);
  try {
    m.pooling = parse_pooling(require<std::string>(j, "pooling", -1));
  } catch (const DomainError& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  m.model = require<std::string>(j, "model", -1);
  m.exporter_version = require<std::string>(j, "exporter_version", -1);
  m.family = optional_field<std::string>(j, "family", -1);
  m.regime = optional_field<std::string>(j, "regime", -1);
  m.size = optional_field<std::string>(j, "size", -1);
  m.feature_sidecar = optional_field<std::string>(j, "feature_sidecar", -1);
  if (m.k < kMinOptions || m.k > kMaxOptions) {
    throw FormatError("manifest: k = " + std::to_string(m.k) + " outside [2, 26]");
  }
  return m;
}

void check_finite(std::span<const double> v, const char* field, long line) {
  for (double x : v)
    if (!std::isfinite(x)) throw FormatError(std::string("non-finite value in '") + field + "'", line);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << text;
}

json record_to_json(const SampleRecord& r, std::optional<std::size_t> feature_row) {
  json j;
  j["id"] = r.id;
  j["dataset"] = r.dataset;
  j["model"] = r.model;
  if (r.layer) j["layer"] = *r.layer;
  if (r.checkpoint) j["checkpoint"] = *r.checkpoint;
  if (feature_row) {
    j["feature_row"] = *feature_row;
  } else {
    j["x1"] = r.x1;
    j["x2"] = r.x2;
  }
  j["scores_mm"] = r.scores_mm;
  j["scores_v"] = r.scores_v;
  j["scores_t"] = r.scores_t;
  if (r.gold) j["gold"] = *r.gold;
  if (r.pred) j["pred"] = *r.pred;
  if (r.pred_text) j["pred_text"] = *r.pred_text;
  if (!r.tokens_x1.empty()) j["tokens_x1"] = r.tokens_x1;
  if (!r.tokens_x2.empty()) j["tokens_x2"] = r.tokens_x2;
  return j;
}

SampleRecord record_from_json(const json& j, long line, std::optional<std::size_t>* feature_row) {
  if (!j.is_object()) throw FormatError("record is not an object", line);
  SampleRecord r;
  r.id = require<std::string>(j, "id", line);
  r.dataset = require<std::string>(j, "dataset", line);
  r.model = require<std::string>(j, "model", line);
  r.layer = optional_field<int>(j, "layer", line);
  r.checkpoint = optional_field<std::string>(j, "checkpoint", line);
  *feature_row = optional_field<std::size_t>(j, "feature_row", line);
  if (!*feature_row) {
    r.x1 = require<std::vector<double>>(j, "x1", line);
    r.x2 = require<std::vector<double>>(j, "x2", line);
  }
  r.scores_mm = require<std::vector<double>>(j, "scores_mm", line);
  r.scores_v = require<std::vector<double>>(j, "scores_v", line);
  r.scores_t = require<std::vector<double>>(j, "scores_t", line);
  r.gold = optional_field<int>(j, "gold", line);
  r.pred = optional_field<int>(j, "pred", line);
  r.pred_text = optional_field<int>(j, "pred_text", line);
  if (auto t = optional_field<std::vector<std::vector<double>>>(j, "tokens_x1", line)) r.tokens_x1 = std::move(*t);
  if (auto t = optional_field<std::vector<std::vector<double>>>(j, "tokens_x2", line)) r.tokens_x2 = std::move(*t);
  return r;
}

fs::path sibling(const fs::path& records_path, const std::string& suffix) {
  fs::path p = records_path;
  p.replace_extension();
  p += suffix;
  return p;
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

}  // namespace

std::uint64_t manifest_digest(const Manifest& m) { return Fnv1a().str(manifest_to_json(m).dump()).value(); }

fs::path manifest_path_for(const fs::path& records_path) { return sibling(records_path, ".manifest.json"); }

std::vector<std::string> manifest_diff(const Manifest& a, const Manifest& b) {
  const json ja = manifest_to_json(a), jb = manifest_to_json(b);
  std::vector<std::string> out;
  json keys = ja;
  keys.update(jb);
  for (auto it = keys.begin(); it != keys.end(); ++it) {
    const std::string va = ja.contains(it.key()) ? ja[it.key()].dump() : "<absent>";
    const std::string vb = jb.contains(it.key()) ? jb[it.key()].dump() : "<absent>";
    if (va != vb) out.push_back(it.key() + ": " + va + " != " + vb);
  }
  return out;
}

// ---------------------------------------------------------------- records

void validate_record(const SampleRecord& r, const Manifest& m, long line) {
  if (r.id.empty()) throw FormatError("empty id", line);
  if (r.dataset != m.dataset) throw FormatError("dataset '" + r.dataset + "' differs from manifest", line);
  if (r.model != m.model) throw FormatError("model '" + r.model + "' differs from manifest", line);
  const std::size_t k = r.scores_mm.size();
  if (k < kMinOptions || k > kMaxOptions) throw FormatError("candidate count outside [2, 26]", line);
  if (r.scores_v.size() != k || r.scores_t.size() != k) throw FormatError("score vectors differ in length", line);
  if (k != m.k) throw FormatError("candidate count " + std::to_string(k) + " differs from manifest k", line);
  for (const auto* scores : {&r.scores_mm, &r.scores_v, &r.scores_t}) {
    check_finite(*scores, "scores", line);
    for (double s : *scores)
      if (s < 0.0 || s > 1.0) throw FormatError("score outside [0, 1]", line);
  }
  if (r.x1.size() != m.dim_x1) throw FormatError("x1 dimension differs from manifest", line);
  if (r.x2.size() != m.dim_x2) throw FormatError("x2 dimension differs from manifest", line);
  check_finite(r.x1, "x1", line);
  check_finite(r.x2, "x2", line);
  for (const auto& [opt, name] : {std::pair{r.gold, "gold"}, {r.pred, "pred"}, {r.pred_text, "pred_text"}}) {
    if (opt && (*opt < 0 || static_cast<std::size_t>(*opt) >= k)) {
      throw FormatError(std::string("'") + name + "' index out of range", line);
    }
  }
  for (const auto& tok : r.tokens_x1) {
    if (tok.size() != m.dim_x1) throw FormatError("tokens_x1 dimension differs from manifest", line);
    check_finite(tok, "tokens_x1", line);
  }
  for (const auto& tok : r.tokens_x2) {
    if (tok.size() != m.dim_x2) throw FormatError("tokens_x2 dimension differs from manifest", line);
    check_finite(tok, "tokens_x2", line);
  }
}

void write_record_set(const fs::path& records_path, const RecordSet& set, bool force_sidecar) {
  Manifest manifest = set.manifest;
  const bool sidecar =
      force_sidecar || manifest.dim_x1 > kSidecarDimThreshold || manifest.dim_x2 > kSidecarDimThreshold;
  manifest.feature_sidecar.reset();
  if (sidecar) manifest.feature_sidecar = sibling(records_path, ".features.bin").filename().string();

  std::string lines;
  std::string blob;
  json index;
  index["dim_x1"] = manifest.dim_x1;
  index["dim_x2"] = manifest.dim_x2;
  index["ids"] = json::array();
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    const SampleRecord& r = set.records[i];
    validate_record(r, manifest, static_cast<long>(i + 1));
    if (sidecar) {
      for (double v : r.x1) put_f32(blob, static_cast<float>(v));
      for (double v : r.x2) put_f32(blob, static_cast<float>(v));
      index["ids"].push_back(r.id);
    }
    lines += record_to_json(r, sidecar ? std::optional<std::size_t>(i) : std::nullopt).dump();
    lines += '\n';
  }
  index["rows"] = set.records.size();
  if (records_path.has_parent_path()) fs::create_directories(records_path.parent_path());
  write_text(records_path, lines);
  write_text(manifest_path_for(records_path), manifest_to_json(manifest).dump(2) + "\n");
  if (sidecar) {
    write_text(sibling(records_path, ".features.bin"), blob);
    write_text(sibling(records_path, ".features.idx"), index.dump(2) + "\n");
  }
}

namespace {

Manifest read_manifest(const fs::path& records_path) {
  const fs::path mp = manifest_path_for(records_path);
  try {
    return manifest_from_json(json::parse(read_text(mp)));
  } catch (const json::parse_error& e) {
    throw FormatError(mp.string() + ": " + e.what());
  }
}

struct Sidecar {
  std::string blob;
  std::vector<std::string> ids;
};

Sidecar read_sidecar(const fs::path& records_path, const Manifest& m) {
  Sidecar s;
  const fs::path bin = records_path.parent_path() / *m.feature_sidecar;
  s.blob = read_text(bin);
  fs::path idx = bin;
  idx.replace_extension(".idx");
  json j;
  try {
    j = json::parse(read_text(idx));
  } catch (const json::parse_error& e) {
    throw FormatError(idx.string() + ": " + e.what());
  }
  s.ids = require<std::vector<std::string>>(j, "ids", -1);
  const auto rows = require<std::size_t>(j, "rows", -1);
  if (rows != s.ids.size() || s.blob.size() != rows * (m.dim_x1 + m.dim_x2) * 4) {
    throw FormatError(bin.string() + ": size does not match index");
  }
  return s;
}

void attach_features(SampleRecord& r, const Sidecar& s, const Manifest& m, std::size_t row, long line) {
  if (row >= s.ids.size()) throw FormatError("feature_row out of range", line);
  if (s.ids[row] != r.id) throw FormatError("feature_row id mismatch", line);
  const auto* base = reinterpret_cast<const unsigned char*>(s.blob.data()) + row * (m.dim_x1 + m.dim_x2) * 4;
  r.x1.resize(m.dim_x1);
  r.x2.resize(m.dim_x2);
  for (std::size_t d = 0; d < m.dim_x1; ++d) r.x1[d] = get_f32(base + 4 * d);
  for (std::size_t d = 0; d < m.dim_x2; ++d) r.x2[d] = get_f32(base + 4 * (m.dim_x1 + d));
}

template <typename OnError>
RecordSet parse_records(const fs::path& records_path, OnError on_error) {
  RecordSet set;
  set.manifest = read_manifest(records_path);
  std::optional<Sidecar> sidecar;
  if (set.manifest.feature_sidecar) sidecar = read_sidecar(records_path, set.manifest);

  std::ifstream in(records_path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + records_path.string());
  std::string text;
  long line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      json j;
      try {
        j = json::parse(text);
      } catch (const json::parse_error& e) {
        throw FormatError(std::string("malformed record: ") + e.what(), line_no);
      }
      std::optional<std::size_t> row;
      SampleRecord r = record_from_json(j, line_no, &row);
      if (row) {
        if (!sidecar) throw FormatError("feature_row given but manifest has no feature sidecar", line_no);
        attach_features(r, *sidecar, set.manifest, *row, line_no);
      }
      validate_record(r, set.manifest, line_no);
      set.records.push_back(std::move(r));
    } catch (const FormatError& e) {
      on_error(e);
    }
  }
  return set;
}

}  // namespace

RecordSet read_record_set(const fs::path& records_path) {
  return parse_records(records_path, [](const FormatError& e) { throw e; });
}

ValidationReport validate_file(const fs::path& records_path) {
  ValidationReport report;
  try {
    RecordSet set = parse_records(records_path, [&](const FormatError& e) { report.errors.push_back(e.what()); });
    report.records = set.records.size();
    std::vector<std::string> ids;
    for (const auto& r : set.records) ids.push_back(r.id);
    std::sort(ids.begin(), ids.end());
    for (std::size_t i = 1; i < ids.size(); ++i)
      if (ids[i] == ids[i - 1]) report.errors.push_back("duplicate id '" + ids[i] + "'");
  } catch (const FormatError& e) {
    report.errors.push_back(e.what());
  }
  return report;
}

// ---------------------------------------------------------------- stats

ModalityStats compute_modality_stats(std::span<const SampleRecord> records, Modality modality) {
  if (records.size() < 2) throw DomainError("compute_modality_stats: need at least 2 records");
  auto features = [modality](const SampleRecord& r) -> const std::vector<double>& {
    return modality == Modality::Vision ? r.x1 : r.x2;
  };
  const std::size_t dim = features(records[0]).size();
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (features(records[i]).size() != dim) {
      throw FormatError("compute_modality_stats: record " + records[i].id + " has feature dimension " +
                        std::to_string(features(records[i]).size()) + ", expected " + std::to_string(dim));
    }
  }
  const std::size_t n = records.size();
  ModalityStats s;
  s.modality = modality;
  s.count = n;
  s.mu.resize(dim);
  s.sigma.resize(dim);
  std::vector<double> column(n);
  for (std::size_t d = 0; d < dim; ++d) {
    for (std::size_t i = 0; i < n; ++i) column[i] = features(records[i])[d];
    const double mean = pairwise_sum(column) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) column[i] = (column[i] - mean) * (column[i] - mean);
    double sd = std::sqrt(pairwise_sum(column) / static_cast<double>(n - 1));
    if (sd < kSigmaFloor) {
      sd = kSigmaFloor;
      s.floored.push_back(d);
    }
    s.mu[d] = mean;
    s.sigma[d] = sd;
  }
  return s;
}

void write_modality_stats(const fs::path& path, const ModalityStats& s) {
  check_finite(s.mu, "mu", -1);
  check_finite(s.sigma, "sigma", -1);
  json j;
  j["modality"] = to_string(s.modality);
  j["dim"] = s.mu.size();
  j["count"] = s.count;
  j["mu"] = s.mu;
  j["sigma"] = s.sigma;
  j["floored"] = s.floored;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text(path, j.dump(2) + "\n");
}

ModalityStats read_modality_stats(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  ModalityStats s;
  try {
    s.modality = parse_modality(require<std::string>(j, "modality", -1));
  } catch (const DomainError& e) {
    throw FormatError(e.what());
  }
  s.count = require<std::size_t>(j, "count", -1);
  s.mu = require<std::vector<double>>(j, "mu", -1);
  s.sigma = require<std::vector<double>>(j, "sigma", -1);
  s.floored = require<std::vector<std::size_t>>(j, "floored", -1);
  if (s.mu.size() != require<std::size_t>(j, "dim", -1) || s.sigma.size() != s.mu.size()) {
    throw FormatError(path.string() + ": mu/sigma length does not match dim");
  }
  for (double v : s.sigma)
    if (!(v >= 0.0)) throw FormatError(path.string() + ": negative sigma");
  return s;
}

// ---------------------------------------------------------------- scoring

double length_normalized_score(double candidate_loglik, std::size_t token_count) {
  if (token_count == 0) throw DomainError("length_normalized_score: token_count must be >= 1");
  if (!(candidate_loglik <= 0.0)) throw DomainError("length_normalized_score: log-likelihood must be <= 0");
  return std::exp(candidate_loglik / static_cast<double>(token_count));
}

RegularizedPrediction threshold_regularize(std::span<const double> scores, double tau) {
  if (scores.size() < kMinOptions) throw DomainError("threshold_regularize: need at least 2 candidates");
  for (double s : scores)
    if (!(s >= 0.0) || !std::isfinite(s)) throw DomainError("threshold_regularize: scores must be finite and >= 0");
  if (!(tau >= 0.0)) throw DomainError("threshold_regularize: tau must be >= 0");
  const double total = pairwise_sum(scores);
  if (total >= tau && total > 0.0) {
    std::vector<double> probs(scores.begin(), scores.end());
    for (double& p : probs) p /= total;
    return {Pmf(std::move(probs)), false};
  }
  return {Pmf::uniform(scores.size()), true};
}

Pmf aggregate_marginal(std::span<const RegularizedPrediction> preds) {
  if (preds.empty()) throw DomainError("aggregate_marginal: no predictions");
  const std::size_t k = preds[0].probs.size();
  std::vector<double> column(preds.size());
  std::vector<double> out(k);
  for (const auto& p : preds)
    if (p.probs.size() != k) throw DomainError("aggregate_marginal: predictions have different label counts");
  for (std::size_t y = 0; y < k; ++y) {
    for (std::size_t i = 0; i < preds.size(); ++i) column[i] = preds[i].probs[y];
    out[y] = pairwise_sum(column) / static_cast<double>(preds.size());
  }
  // Renormalize away rounding so the result is an exact simplex.
  const double total = pairwise_sum(out);
  for (double& v : out) v /= total;
  return Pmf(std::move(out));
}

std::vector<double> pool_tokens(std::span<const std::vector<double>> tokens, PoolingMode mode) {
  if (tokens.empty()) throw DomainError("pool_tokens: empty token sequence");
  const std::size_t dim = tokens[0].size();
  for (const auto& t : tokens)
    if (t.size() != dim) throw DomainError("pool_tokens: tokens differ in dimension");
  switch (mode) {
    case PoolingMode::Last: return tokens.back();
    case PoolingMode::Max: {
      std::vector<double> out = tokens[0];
      for (const auto& t : tokens)
        for (std::size_t d = 0; d < dim; ++d) out[d] = std::max(out[d], t[d]);
      return out;
    }
    case PoolingMode::Mean: break;
  }
  std::vector<double> out(dim), column(tokens.size());
  for (std::size_t d = 0; d < dim; ++d) {
    for (std::size_t i = 0; i < tokens.size(); ++i) column[i] = tokens[i][d];
    out[d] = pairwise_sum(column) / static_cast<double>(tokens.size());
  }
  return out;
}

ProbePredictions regularize_record(const SampleRecord& r, double tau) {
  return {threshold_regularize(r.scores_mm, tau), threshold_regularize(r.scores_v, tau),
          threshold_regularize(r.scores_t, tau)};
}

// ---------------------------------------------------------------- splits

SplitIndices split_indices(std::size_t n, const SplitSpec& spec) {
  if (spec.train_parts == 0 || spec.test_parts == 0) throw DomainError("split: both ratio parts must be positive");
  const std::size_t parts = spec.train_parts + spec.test_parts;
  if (n < 4 || n < parts) {
    throw DomainError("split: " + std::to_string(n) + " records cannot be split " + std::to_string(spec.train_parts) +
                      ":" + std::to_string(spec.test_parts));
  }
  const std::size_t n_test = (n * spec.test_parts + parts - 1) / parts;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);
  SplitIndices out;
  out.train.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_test));
  out.test.assign(order.end() - static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw DomainError("argmax: empty vector");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace mmpid

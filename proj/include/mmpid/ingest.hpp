#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmpid/info.hpp"

namespace mmpid {

inline constexpr double kDefaultTau = 0.3;
inline constexpr std::size_t kMinOptions = 2;
inline constexpr std::size_t kMaxOptions = 26;
// Feature vectors wider than this are written to the binary sidecar.
inline constexpr std::size_t kSidecarDimThreshold = 4096;
inline constexpr const char* kWireFormatVersion = "mmpid-records/1";

enum class PoolingMode { Mean, Last, Max };
enum class Modality { Vision, Text };

std::string to_string(PoolingMode m);
PoolingMode parse_pooling(const std::string& s);
std::string to_string(Modality m);
Modality parse_modality(const std::string& s);

// One exported multiple-choice probe. x1 is the pooled vision feature, x2 the
// pooled text feature. The three score vectors hold raw per-candidate scores
// in [0, 1] from the multimodal, vision-only and text-only passes.
struct SampleRecord {
  std::string id;
  std::string dataset;
  std::string model;
  std::optional<int> layer;
  std::optional<std::string> checkpoint;
  std::vector<double> x1;
  std::vector<double> x2;
  std::vector<double> scores_mm;
  std::vector<double> scores_v;
  std::vector<double> scores_t;
  std::optional<int> gold;
  std::optional<int> pred;       // exporter's first-token prediction, multimodal
  std::optional<int> pred_text;  // same, image removed
  // Optional token-level payload for re-pooling ablations.
  std::vector<std::vector<double>> tokens_x1;
  std::vector<std::vector<double>> tokens_x2;

  std::size_t options() const noexcept { return scores_mm.size(); }
  bool operator==(const SampleRecord&) const = default;
};

// Sidecar description shipped alongside every records file.
struct Manifest {
  std::string dataset;
  std::size_t k = 0;
  std::size_t dim_x1 = 0;
  std::size_t dim_x2 = 0;
  PoolingMode pooling = PoolingMode::Mean;
  std::string model;
  std::string exporter_version;
  std::string format = kWireFormatVersion;
  // Analysis grouping labels supplied by the operator, never inferred.
  std::optional<std::string> family;
  std::optional<std::string> regime;
  std::optional<std::string> size;
  // Relative path of the binary feature sidecar when features are external.
  std::optional<std::string> feature_sidecar;

  bool operator==(const Manifest&) const = default;
};

std::uint64_t manifest_digest(const Manifest& m);

// Returns "<stem>.manifest.json" next to the records file.
std::filesystem::path manifest_path_for(const std::filesystem::path& records_path);

// Fields that differ between two manifests, formatted "field: a != b".
std::vector<std::string> manifest_diff(const Manifest& a, const Manifest& b);

struct RecordSet {
  Manifest manifest;
  std::vector<SampleRecord> records;
};

// Checks one record against the manifest; throws FormatError naming the field.
void validate_record(const SampleRecord& r, const Manifest& m, long line = -1);

// Writes records plus manifest (and the feature sidecar when any feature
// dimension exceeds the threshold, or when force_sidecar is set).
void write_record_set(const std::filesystem::path& records_path, const RecordSet& set,
                      bool force_sidecar = false);
// Reads and validates; FormatError carries the 1-based line number.
RecordSet read_record_set(const std::filesystem::path& records_path);

struct ValidationReport {
  std::size_t records = 0;
  std::vector<std::string> errors;  // "line N: ..." entries
  bool ok() const noexcept { return errors.empty(); }
};
// Lints a records file without stopping at the first bad line.
ValidationReport validate_file(const std::filesystem::path& records_path);

// Per-dimension statistics of one modality's pooled features.
struct ModalityStats {
  Modality modality = Modality::Vision;
  std::vector<double> mu;
  std::vector<double> sigma;
  std::size_t count = 0;
  std::vector<std::size_t> floored;  // dimensions whose sigma was floored

  bool operator==(const ModalityStats&) const = default;
};

inline constexpr double kSigmaFloor = 1e-8;

ModalityStats compute_modality_stats(std::span<const SampleRecord> records, Modality modality);
void write_modality_stats(const std::filesystem::path& path, const ModalityStats& stats);
ModalityStats read_modality_stats(const std::filesystem::path& path);

// exp(loglik / token_count).
double length_normalized_score(double candidate_loglik, std::size_t token_count);

struct RegularizedPrediction {
  Pmf probs;
  bool fallback_used = false;
};

// Renormalizes the scores when their total reaches tau, else returns uniform.
RegularizedPrediction threshold_regularize(std::span<const double> scores, double tau = kDefaultTau);

// Mean of the regularized predictions (pairwise summation per label).
Pmf aggregate_marginal(std::span<const RegularizedPrediction> preds);

std::vector<double> pool_tokens(std::span<const std::vector<double>> tokens, PoolingMode mode);

// Regularized conditionals of one record.
struct ProbePredictions {
  RegularizedPrediction multimodal;
  RegularizedPrediction vision;
  RegularizedPrediction text;
};
ProbePredictions regularize_record(const SampleRecord& r, double tau = kDefaultTau);

struct SplitSpec {
  std::size_t train_parts = 3;
  std::size_t test_parts = 1;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Seeded shuffle; the test part receives ceil(n * test / (train + test)).
SplitIndices split_indices(std::size_t n, const SplitSpec& spec);

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_dataset(std::span<const T> items, const SplitSpec& spec) {
  const SplitIndices idx = split_indices(items.size(), spec);
  std::pair<std::vector<T>, std::vector<T>> out;
  out.first.reserve(idx.train.size());
  out.second.reserve(idx.test.size());
  for (std::size_t i : idx.train) out.first.push_back(items[i]);
  for (std::size_t i : idx.test) out.second.push_back(items[i]);
  return out;
}

// Index of the largest score (first on ties).
std::size_t argmax(std::span<const double> v);

}  // namespace mmpid

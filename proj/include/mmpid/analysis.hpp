#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmpid/pid.hpp"

namespace mmpid {

// Share order everywhere: R, U1, U2, S.
using Shares = std::array<double, 4>;

inline constexpr double kDegenerateTotal = 1e-9;

struct ProfileReport {
  std::string model;
  std::string dataset;
  std::optional<int> layer;
  std::optional<std::string> checkpoint;
  std::optional<std::string> family;
  std::optional<std::string> regime;
  std::optional<std::string> size;
  PidAtoms atoms;
  std::optional<Shares> shares;  // empty when the spectrum total is <= 1e-9
  std::optional<double> accuracy;
  std::optional<double> accuracy_text_only;
  std::string manifest_digest;

  bool operator==(const ProfileReport&) const = default;
};

// Atoms over their sum. Throws DegenerateError when the sum is <= 1e-9.
Shares pid_shares(const PidAtoms& atoms);
// Fills report.shares, leaving it empty for a degenerate spectrum.
void attach_shares(ProfileReport& report);

struct CorrelationResult {
  double rho = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
};

enum class PValueMethod { TApproximation, ExactPermutation };

// Tie-corrected Spearman rank correlation (Pearson on average ranks). The
// exact permutation p-value is available for n <= 10.
CorrelationResult spearman(std::span<const double> xs, std::span<const double> ys,
                           PValueMethod method = PValueMethod::TApproximation);

// Average ranks (1-based), ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> v);

// Accuracy drop when the image is removed; negative values are allowed.
double d_vision(double acc_multimodal, double acc_text_only);

struct FamilyMedian {
  std::string family;
  std::string regime;
  double median_synergy_share = 0.0;
  double median_u2_share = 0.0;
  std::size_t models = 0;
};

struct FamilyMediansResult {
  std::vector<FamilyMedian> rows;  // sorted by (family, regime)
  std::vector<std::string> warnings;
};

// Per (family, regime): shares are averaged per model over datasets, then the
// median over models is taken (midpoint for even counts).
FamilyMediansResult family_medians(std::span<const ProfileReport> reports);

double median(std::vector<double> values);

struct DeltaRow {
  std::string from;
  std::string to;
  std::optional<double> d_accuracy;  // percentage points
  std::optional<double> d_synergy;
  std::optional<double> d_u2;
};

// Small -> mid and mid -> large changes in accuracy and S/U2 shares, in points.
std::array<DeltaRow, 2> scaling_deltas(const ProfileReport& small, const ProfileReport& mid,
                                       const ProfileReport& large);

struct TraceRow {
  std::string key;            // layer index or checkpoint tag
  std::optional<int> stage;   // parsed from checkpoint tags "s<stage>c<index>"
  bool gap_before = false;    // missing keys between this row and the previous one
  bool stage_start = false;   // first row of a new stage after the first stage
  ProfileReport report;
};

// Orders reports by layer or by checkpoint. All reports must be keyed the same
// way; duplicate keys raise FormatError.
std::vector<TraceRow> trace(std::span<const ProfileReport> reports);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Percentile bootstrap interval of the mean.
Interval bootstrap_mean_ci(std::span<const double> values, std::size_t resamples = 10000, std::uint64_t seed = 0,
                           double level = 0.95);

// ---------------------------------------------------------------- emission

// Comma-separated table writer: header row, '.' decimals, LF endings.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);
  void add_row(std::vector<std::string> cells);
  std::string str() const;
  const std::vector<std::vector<std::string>>& rows() const noexcept { return rows_; }
  void write(const std::filesystem::path& path) const;

  static std::vector<std::map<std::string, std::string>> read(const std::filesystem::path& path);

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

std::string cell(double v);
std::string cell(const std::optional<double>& v);
std::string cell(const std::optional<std::string>& v);
std::string cell(const std::optional<int>& v);

CsvTable profile_table(std::span<const ProfileReport> reports);
std::vector<ProfileReport> read_profile_table(const std::filesystem::path& path);
CsvTable trace_table(std::span<const TraceRow> rows);
CsvTable family_medians_table(const FamilyMediansResult& result);

struct ChartSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<std::string> labels;  // optional categorical x labels
};

// JSON chart bundle: {"provenance": ..., "series": [...]}; provenance is a
// JSON object serialized by the caller.
std::string chart_bundle(std::span<const ChartSeries> series, const std::string& provenance_json);

}  // namespace mmpid

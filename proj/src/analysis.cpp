#include "mmpid/analysis.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mmpid/error.hpp"
#include "mmpid/numeric.hpp"

namespace mmpid {

Shares pid_shares(const PidAtoms& a) {
  const double total = a.sum();
  if (!(total > kDegenerateTotal)) {
    throw DegenerateError("pid_shares: spectrum total " + format_double(total) + " is too small to normalize");
  }
  return {a.redundancy / total, a.unique1 / total, a.unique2 / total, a.synergy / total};
}

void attach_shares(ProfileReport& report) {
  if (report.atoms.sum() > kDegenerateTotal) {
    report.shares = pid_shares(report.atoms);
  } else {
    report.shares.reset();
  }
}

// ---------------------------------------------------------------- spearman

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace {

double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

bool constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
}

}  // namespace

CorrelationResult spearman(std::span<const double> xs, std::span<const double> ys, PValueMethod method) {
  if (xs.size() != ys.size()) throw DomainError("spearman: inputs differ in length");
  if (xs.size() < 3) throw DomainError("spearman: need at least 3 paired observations");
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw DomainError("spearman: non-finite input");
  if (constant(xs) || constant(ys)) throw DegenerateError("spearman: correlation undefined for a constant input");

  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  CorrelationResult out;
  out.n = xs.size();
  out.rho = pearson(rx, ry);

  if (method == PValueMethod::ExactPermutation) {
    if (out.n > 10) throw CapabilityError("spearman: exact permutation p-values are limited to n <= 10");
    std::vector<double> perm = ry;
    std::sort(perm.begin(), perm.end());
    std::size_t extreme = 0, total = 0;
    do {
      ++total;
      if (std::abs(pearson(rx, perm)) >= std::abs(out.rho) - 1e-12) ++extreme;
    } while (std::next_permutation(perm.begin(), perm.end()));
    out.p_value = static_cast<double>(extreme) / static_cast<double>(total);
    return out;
  }

  const double df = static_cast<double>(out.n - 2);
  if (std::abs(out.rho) >= 1.0) {
    out.p_value = 0.0;
  } else {
    const double t = out.rho * std::sqrt(df / (1.0 - out.rho * out.rho));
    const boost::math::students_t dist(df);
    out.p_value = std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
  }
  return out;
}

double d_vision(double acc_multimodal, double acc_text_only) {
  if (!(acc_multimodal >= 0.0 && acc_multimodal <= 1.0 && acc_text_only >= 0.0 && acc_text_only <= 1.0)) {
    throw DomainError("d_vision: accuracies must lie in [0, 1]");
  }
  return acc_multimodal - acc_text_only;
}

// ---------------------------------------------------------------- families

double median(std::vector<double> values) {
  if (values.empty()) throw DomainError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

FamilyMediansResult family_medians(std::span<const ProfileReport> reports) {
  FamilyMediansResult out;
  // (family, regime) -> model -> shares per dataset
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::vector<Shares>>> cells;
  for (const auto& r : reports) {
    if (!r.family || !r.regime) {
      out.warnings.push_back("report " + r.model + "/" + r.dataset + " has no family or regime label; skipped");
      continue;
    }
    if (!r.shares) {
      out.warnings.push_back("report " + r.model + "/" + r.dataset + " has a degenerate spectrum; skipped");
      continue;
    }
    cells[{*r.family, *r.regime}][r.model].push_back(*r.shares);
  }
  for (const auto& [key, models] : cells) {
    std::vector<double> s, u2;
    for (const auto& [model, shares] : models) {
      double ss = 0.0, uu = 0.0;
      for (const auto& sh : shares) {
        ss += sh[3];
        uu += sh[2];
      }
      s.push_back(ss / static_cast<double>(shares.size()));
      u2.push_back(uu / static_cast<double>(shares.size()));
    }
    out.rows.push_back({key.first, key.second, median(s), median(u2), models.size()});
  }
  return out;
}

// ---------------------------------------------------------------- scaling

std::array<DeltaRow, 2> scaling_deltas(const ProfileReport& small, const ProfileReport& mid,
                                       const ProfileReport& large) {
  if (small.family != mid.family || mid.family != large.family) {
    throw DomainError("scaling_deltas: reports belong to different families");
  }
  if (small.regime != mid.regime || mid.regime != large.regime) {
    throw DomainError("scaling_deltas: reports belong to different regimes");
  }
  auto row = [](const ProfileReport& a, const ProfileReport& b) {
    DeltaRow d;
    d.from = a.size.value_or(a.model);
    d.to = b.size.value_or(b.model);
    if (a.accuracy && b.accuracy) d.d_accuracy = 100.0 * (*b.accuracy - *a.accuracy);
    if (a.shares && b.shares) {
      d.d_synergy = 100.0 * ((*b.shares)[3] - (*a.shares)[3]);
      d.d_u2 = 100.0 * ((*b.shares)[2] - (*a.shares)[2]);
    }
    return d;
  };
  return {row(small, mid), row(mid, large)};
}

// ---------------------------------------------------------------- trace

namespace {

struct CheckpointKey {
  std::optional<int> stage;
  std::optional<int> index;
  std::string tag;
};

CheckpointKey parse_checkpoint(const std::string& tag) {
  static const std::regex pattern(R"(^[sS](\d+)[cC](\d+)$)");
  std::smatch m;
  CheckpointKey k{std::nullopt, std::nullopt, tag};
  if (std::regex_match(tag, m, pattern)) {
    k.stage = std::stoi(m[1].str());
    k.index = std::stoi(m[2].str());
  }
  return k;
}

}  // namespace

std::vector<TraceRow> trace(std::span<const ProfileReport> reports) {
  std::vector<TraceRow> rows;
  if (reports.empty()) return rows;
  const bool by_layer = reports[0].layer.has_value();
  for (const auto& r : reports) {
    if (by_layer != r.layer.has_value() || (!by_layer && !r.checkpoint)) {
      throw FormatError("trace: reports must all carry a layer index or all carry a checkpoint tag");
    }
  }
  if (by_layer) {
    std::vector<ProfileReport> sorted(reports.begin(), reports.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return *a.layer < *b.layer; });
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (i > 0 && *sorted[i].layer == *sorted[i - 1].layer) {
        throw FormatError("trace: duplicate layer " + std::to_string(*sorted[i].layer));
      }
      TraceRow row;
      row.key = std::to_string(*sorted[i].layer);
      row.gap_before = i > 0 && *sorted[i].layer - *sorted[i - 1].layer > 1;
      row.report = sorted[i];
      rows.push_back(std::move(row));
    }
    return rows;
  }

  std::vector<std::pair<CheckpointKey, const ProfileReport*>> keyed;
  for (const auto& r : reports) keyed.emplace_back(parse_checkpoint(*r.checkpoint), &r);
  const bool structured = std::all_of(keyed.begin(), keyed.end(), [](const auto& k) { return k.first.stage.has_value(); });
  std::stable_sort(keyed.begin(), keyed.end(), [structured](const auto& a, const auto& b) {
    if (structured) return std::tie(*a.first.stage, *a.first.index) < std::tie(*b.first.stage, *b.first.index);
    return a.first.tag < b.first.tag;
  });
  for (std::size_t i = 0; i < keyed.size(); ++i) {
    const CheckpointKey& k = keyed[i].first;
    if (i > 0) {
      const CheckpointKey& prev = keyed[i - 1].first;
      const bool same = structured ? (*k.stage == *prev.stage && *k.index == *prev.index) : k.tag == prev.tag;
      if (same) throw FormatError("trace: duplicate checkpoint " + k.tag);
    }
    TraceRow row;
    row.key = k.tag;
    row.report = *keyed[i].second;
    if (structured) {
      row.stage = k.stage;
      if (i > 0) {
        const CheckpointKey& prev = keyed[i - 1].first;
        row.stage_start = *k.stage != *prev.stage;
        row.gap_before = row.stage_start ? (*k.stage - *prev.stage > 1 || *k.index > 1) : *k.index - *prev.index > 1;
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------- bootstrap

Interval bootstrap_mean_ci(std::span<const double> values, std::size_t resamples, std::uint64_t seed, double level) {
  if (values.empty()) throw DomainError("bootstrap: no values");
  if (resamples == 0 || !(level > 0.0 && level < 1.0)) throw DomainError("bootstrap: bad resample count or level");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(resamples), draw(values.size());
  for (std::size_t b = 0; b < resamples; ++b) {
    for (auto& d : draw) d = values[pick(rng)];
    means[b] = pairwise_sum(draw) / static_cast<double>(draw.size());
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(resamples - 1, lo + 1);
    return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
  };
  const double alpha = 1.0 - level;
  return {quantile(alpha / 2.0), quantile(1.0 - alpha / 2.0)};
}

// ---------------------------------------------------------------- CSV

namespace {

std::string escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line, long line_no) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw FormatError("unterminated quoted field", line_no);
  out.push_back(std::move(cur));
  return out;
}

std::optional<double> parse_optional_double(const std::string& s, const char* field, long line) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw FormatError(std::string("field '") + field + "' is not a finite number", line);
  }
  return v;
}

std::optional<std::string> optional_text(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return s;
}

}  // namespace

std::string cell(double v) { return format_double(v); }
std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }
std::string cell(const std::optional<std::string>& v) { return v.value_or(""); }
std::string cell(const std::optional<int>& v) { return v ? std::to_string(*v) : std::string(); }

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

void CsvTable::add_row(std::vector<std::string> cells) {
  if (cells.size() != header_.size()) throw DomainError("CsvTable: row width differs from header");
  rows_.push_back(std::move(cells));
}

std::string CsvTable::str() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += escape(cells[i]);
    }
    out += '\n';
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  return out;
}

void CsvTable::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << str();
}

std::vector<std::map<std::string, std::string>> CsvTable::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string text;
  long line_no = 0;
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, text)) {
    ++line_no;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.empty()) continue;
    auto cells = split_csv_line(text, line_no);
    if (header.empty()) {
      header = std::move(cells);
      continue;
    }
    if (cells.size() != header.size()) throw FormatError("row width differs from header", line_no);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  if (header.empty()) throw FormatError(path.string() + ": empty table");
  return rows;
}

namespace {

const std::vector<std::string> kProfileHeader = {
    "model",   "dataset", "layer",   "checkpoint", "family",   "regime",   "size",     "R",
    "U1",      "U2",      "S",       "total",      "share_R",  "share_U1", "share_U2", "share_S",
    "accuracy", "accuracy_text_only", "d_vision", "d_vision_negative", "manifest_digest"};

}  // namespace

CsvTable profile_table(std::span<const ProfileReport> reports) {
  CsvTable t(kProfileHeader);
  for (const auto& r : reports) {
    std::optional<double> dv;
    if (r.accuracy && r.accuracy_text_only) dv = d_vision(*r.accuracy, *r.accuracy_text_only);
    std::vector<std::string> row = {r.model, r.dataset, cell(r.layer), cell(r.checkpoint), cell(r.family),
                                    cell(r.regime), cell(r.size), cell(r.atoms.redundancy), cell(r.atoms.unique1),
                                    cell(r.atoms.unique2), cell(r.atoms.synergy), cell(r.atoms.total)};
    for (int i = 0; i < 4; ++i) row.push_back(r.shares ? cell((*r.shares)[static_cast<std::size_t>(i)]) : "");
    row.push_back(cell(r.accuracy));
    row.push_back(cell(r.accuracy_text_only));
    row.push_back(cell(dv));
    row.push_back(dv ? (*dv < 0.0 ? "1" : "0") : "");
    row.push_back(r.manifest_digest);
    t.add_row(std::move(row));
  }
  return t;
}

std::vector<ProfileReport> read_profile_table(const std::filesystem::path& path) {
  const auto rows = CsvTable::read(path);
  std::vector<ProfileReport> out;
  long line = 1;
  for (const auto& row : rows) {
    ++line;
    auto get = [&](const char* key) -> const std::string& {
      auto it = row.find(key);
      if (it == row.end()) throw FormatError(path.string() + ": missing column '" + key + "'");
      return it->second;
    };
    auto num = [&](const char* key) {
      auto v = parse_optional_double(get(key), key, line);
      if (!v) throw FormatError(std::string("field '") + key + "' is empty", line);
      return *v;
    };
    ProfileReport r;
    r.model = get("model");
    r.dataset = get("dataset");
    if (!get("layer").empty()) r.layer = static_cast<int>(num("layer"));
    r.checkpoint = optional_text(get("checkpoint"));
    r.family = optional_text(get("family"));
    r.regime = optional_text(get("regime"));
    r.size = optional_text(get("size"));
    r.atoms.redundancy = num("R");
    r.atoms.unique1 = num("U1");
    r.atoms.unique2 = num("U2");
    r.atoms.synergy = num("S");
    r.atoms.total = num("total");
    if (!get("share_R").empty()) r.shares = Shares{num("share_R"), num("share_U1"), num("share_U2"), num("share_S")};
    r.accuracy = parse_optional_double(get("accuracy"), "accuracy", line);
    r.accuracy_text_only = parse_optional_double(get("accuracy_text_only"), "accuracy_text_only", line);
    r.manifest_digest = get("manifest_digest");
    out.push_back(std::move(r));
  }
  return out;
}

CsvTable trace_table(std::span<const TraceRow> rows) {
  CsvTable t({"key", "stage", "stage_start", "gap_before", "model", "dataset", "R", "U1", "U2", "S", "total",
              "share_R", "share_U1", "share_U2", "share_S", "accuracy", "manifest_digest"});
  for (const auto& row : rows) {
    const auto& r = row.report;
    std::vector<std::string> cells = {row.key,
                                      cell(row.stage),
                                      row.stage_start ? "1" : "0",
                                      row.gap_before ? "1" : "0",
                                      r.model,
                                      r.dataset,
                                      cell(r.atoms.redundancy),
                                      cell(r.atoms.unique1),
                                      cell(r.atoms.unique2),
                                      cell(r.atoms.synergy),
                                      cell(r.atoms.total)};
    for (int i = 0; i < 4; ++i) cells.push_back(r.shares ? cell((*r.shares)[static_cast<std::size_t>(i)]) : "");
    cells.push_back(cell(r.accuracy));
    cells.push_back(r.manifest_digest);
    t.add_row(std::move(cells));
  }
  return t;
}

CsvTable family_medians_table(const FamilyMediansResult& result) {
  CsvTable t({"family", "regime", "median_share_S", "median_share_U2", "models"});
  for (const auto& r : result.rows) {
    t.add_row({r.family, r.regime, cell(r.median_synergy_share), cell(r.median_u2_share), std::to_string(r.models)});
  }
  return t;
}

std::string chart_bundle(std::span<const ChartSeries> series, const std::string& provenance_json) {
  nlohmann::json j;
  j["provenance"] = nlohmann::json::parse(provenance_json);
  j["series"] = nlohmann::json::array();
  for (const auto& s : series) {
    nlohmann::json e;
    e["name"] = s.name;
    e["x"] = s.x;
    e["y"] = s.y;
    if (!s.labels.empty()) e["labels"] = s.labels;
    j["series"].push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

}  // namespace mmpid

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "mmpid/error.hpp"
#include "mmpid/ingest.hpp"
#include "mmpid/synth.hpp"

using namespace mmpid;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mmpid-ingest-tests";
  fs::create_directories(dir);
  return dir / name;
}

RecordSet small_set(std::size_t n, std::size_t dim) {
  RecordSet set;
  set.manifest.dataset = "toy";
  set.manifest.k = 3;
  set.manifest.dim_x1 = dim;
  set.manifest.dim_x2 = dim;
  set.manifest.model = "m";
  set.manifest.exporter_version = "test/1";
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    SampleRecord r;
    r.id = "r" + std::to_string(i);
    r.dataset = "toy";
    r.model = "m";
    for (std::size_t d = 0; d < dim; ++d) {
      r.x1.push_back(static_cast<float>(g(rng)));
      r.x2.push_back(static_cast<float>(g(rng)));
    }
    for (int c = 0; c < 3; ++c) {
      r.scores_mm.push_back(u(rng));
      r.scores_v.push_back(u(rng) / 3.0);
      r.scores_t.push_back(u(rng) * 1e-3);
    }
    r.gold = static_cast<int>(i % 3);
    if (i % 2) r.pred = 1;
    if (i % 4 == 0) r.layer = static_cast<int>(i);
    if (i % 5 == 0) r.checkpoint = "s1c" + std::to_string(i);
    set.records.push_back(std::move(r));
  }
  return set;
}

}  // namespace

TEST_CASE("length-normalized scores") {
  CHECK(length_normalized_score(-1.0, 1) == doctest::Approx(0.36787944117144233));
  CHECK(length_normalized_score(-2.0, 2) == length_normalized_score(-1.0, 1));
  CHECK(length_normalized_score(0.0, 3) == 1.0);
  CHECK_THROWS_AS(length_normalized_score(-1.0, 0), DomainError);
  CHECK_THROWS_AS(length_normalized_score(0.5, 1), DomainError);
}

TEST_CASE("threshold regularization branches") {
  const std::vector<double> a = {0.3, 0.2};
  const RegularizedPrediction ra = threshold_regularize(a, 0.3);
  CHECK_FALSE(ra.fallback_used);
  CHECK(ra.probs[0] == doctest::Approx(0.6));
  CHECK(ra.probs[1] == doctest::Approx(0.4));

  const std::vector<double> b = {0.05, 0.05};
  const RegularizedPrediction rb = threshold_regularize(b, 0.3);
  CHECK(rb.fallback_used);
  CHECK(rb.probs[0] == 0.5);

  // 0.25 + 0.05 == 0.3 exactly in binary: the boundary takes the renormalized branch.
  const std::vector<double> c = {0.25, 0.05};
  REQUIRE(c[0] + c[1] == 0.3);
  const RegularizedPrediction rc = threshold_regularize(c, 0.3);
  CHECK_FALSE(rc.fallback_used);
  CHECK(rc.probs[0] == doctest::Approx(0.25 / 0.3));

  const std::vector<double> zero = {0.0, 0.0, 0.0};
  const RegularizedPrediction rz = threshold_regularize(zero, 0.0);
  CHECK(rz.fallback_used);
  CHECK(rz.probs[2] == doctest::Approx(1.0 / 3.0));

  CHECK_THROWS_AS(threshold_regularize(std::vector<double>{0.5}, 0.3), DomainError);
  CHECK_THROWS_AS(threshold_regularize(std::vector<double>{0.5, -0.1}, 0.3), DomainError);
}

TEST_CASE("fallback frequency is monotone in tau") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 0.3);
  std::vector<std::vector<double>> scores(500, std::vector<double>(4));
  for (auto& s : scores)
    for (auto& v : s) v = u(rng);
  std::size_t prev = 0;
  for (double tau : {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.8, 1.2}) {
    std::size_t fallbacks = 0;
    for (const auto& s : scores) {
      const RegularizedPrediction r = threshold_regularize(s, tau);
      double total = 0.0;
      for (double p : r.probs.probs()) total += p;
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
      fallbacks += r.fallback_used;
    }
    CHECK(fallbacks >= prev);
    prev = fallbacks;
  }
}

TEST_CASE("soft aggregation") {
  const std::vector<double> s = {0.2, 0.6};
  std::vector<RegularizedPrediction> same(7, threshold_regularize(s));
  const Pmf m = aggregate_marginal(same);
  CHECK(m[0] == doctest::Approx(0.25));
  std::vector<RegularizedPrediction> opposite = {threshold_regularize(std::vector<double>{1.0, 0.0}),
                                                 threshold_regularize(std::vector<double>{0.0, 1.0})};
  CHECK(aggregate_marginal(opposite)[0] == 0.5);
  std::vector<RegularizedPrediction> mixed = {threshold_regularize(std::vector<double>{1.0, 0.0}),
                                              threshold_regularize(std::vector<double>{0.1, 0.1, 0.5})};
  CHECK_THROWS_AS(aggregate_marginal(mixed), DomainError);
  CHECK_THROWS_AS(aggregate_marginal(std::vector<RegularizedPrediction>{}), DomainError);
}

TEST_CASE("aggregation is order invariant and commutes with concatenation") {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<RegularizedPrediction> all;
  for (int i = 0; i < 301; ++i) {
    std::vector<double> s = {u(rng), u(rng), u(rng), u(rng)};
    all.push_back(threshold_regularize(s));
  }
  const Pmf whole = aggregate_marginal(all);
  auto shuffled = all;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const Pmf again = aggregate_marginal(shuffled);
  for (std::size_t y = 0; y < 4; ++y) CHECK(std::abs(whole[y] - again[y]) <= 1e-12);

  const std::span<const RegularizedPrediction> a(all.data(), 120), b(all.data() + 120, 181);
  const Pmf pa = aggregate_marginal(a), pb = aggregate_marginal(b);
  for (std::size_t y = 0; y < 4; ++y) {
    CHECK(std::abs(whole[y] - (120.0 * pa[y] + 181.0 * pb[y]) / 301.0) <= 1e-12);
  }
}

TEST_CASE("token pooling") {
  const std::vector<std::vector<double>> one = {{1.5, -2.0}};
  for (PoolingMode m : {PoolingMode::Mean, PoolingMode::Last, PoolingMode::Max}) CHECK(pool_tokens(one, m) == one[0]);
  const std::vector<std::vector<double>> two = {{0.0}, {2.0}};
  CHECK(pool_tokens(two, PoolingMode::Mean)[0] == 1.0);
  CHECK(pool_tokens(two, PoolingMode::Max)[0] == 2.0);
  CHECK(pool_tokens(two, PoolingMode::Last)[0] == 2.0);
  const std::vector<std::vector<double>> three = {{3.0, 1.0}, {0.0, 5.0}, {1.0, 0.0}};
  CHECK(pool_tokens(three, PoolingMode::Max) == std::vector<double>{3.0, 5.0});
  CHECK(pool_tokens(three, PoolingMode::Last) == std::vector<double>{1.0, 0.0});
  CHECK_THROWS_AS(pool_tokens(std::vector<std::vector<double>>{}, PoolingMode::Mean), DomainError);
  CHECK_THROWS_AS(pool_tokens(std::vector<std::vector<double>>{{1.0}, {1.0, 2.0}}, PoolingMode::Mean), DomainError);
  CHECK(parse_pooling("max") == PoolingMode::Max);
}

TEST_CASE("modality statistics") {
  std::vector<SampleRecord> recs(2);
  recs[0].x1 = {0.0, 5.0};
  recs[1].x1 = {2.0, 5.0};
  const ModalityStats s = compute_modality_stats(recs, Modality::Vision);
  CHECK(s.mu[0] == 1.0);
  CHECK(s.sigma[0] == doctest::Approx(std::sqrt(2.0)));
  CHECK(s.sigma[1] == kSigmaFloor);
  CHECK(s.floored == std::vector<std::size_t>{1});
  CHECK(s.count == 2);

  std::vector<SampleRecord> rev = {recs[1], recs[0]};
  CHECK(compute_modality_stats(rev, Modality::Vision).mu == s.mu);

  const fs::path p = scratch("stats.json");
  write_modality_stats(p, s);
  CHECK(read_modality_stats(p) == s);

  CHECK_THROWS_AS(compute_modality_stats(std::span<const SampleRecord>(recs.data(), 1), Modality::Vision), DomainError);
  recs[1].x1 = {1.0};
  CHECK_THROWS_AS(compute_modality_stats(recs, Modality::Vision), FormatError);
}

TEST_CASE("split sizes follow the dataset table") {
  const std::pair<std::size_t, std::size_t> rows[] = {{4329, 1083}, {3000, 750}, {2150, 538}, {2000, 500}};
  for (auto [n, test] : rows) {
    const SplitIndices s = split_indices(n, {3, 1, 0});
    CHECK(s.test.size() == test);
    CHECK(s.train.size() == n - test);
    std::vector<std::size_t> all = s.train;
    all.insert(all.end(), s.test.begin(), s.test.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < n; ++i) REQUIRE(all[i] == i);
  }
  CHECK(split_indices(100, {3, 1, 5}).test == split_indices(100, {3, 1, 5}).test);
  CHECK(split_indices(100, {3, 1, 5}).test != split_indices(100, {3, 1, 6}).test);
  CHECK_THROWS_AS(split_indices(3, {3, 1, 0}), DomainError);
  CHECK_THROWS_AS(split_indices(10, {0, 1, 0}), DomainError);
}

TEST_CASE("records round-trip bit-exactly") {
  const RecordSet set = small_set(25, 6);
  const fs::path p = scratch("round.jsonl");
  write_record_set(p, set);
  const RecordSet back = read_record_set(p);
  CHECK(back.manifest == set.manifest);
  REQUIRE(back.records.size() == set.records.size());
  for (std::size_t i = 0; i < set.records.size(); ++i) CHECK(back.records[i] == set.records[i]);
  CHECK(fs::exists(manifest_path_for(p)));
  CHECK(validate_file(p).ok());
}

TEST_CASE("wide features go to the binary sidecar") {
  RecordSet set = small_set(3, kSidecarDimThreshold + 1);
  const fs::path p = scratch("wide.jsonl");
  write_record_set(p, set);
  const RecordSet back = read_record_set(p);
  REQUIRE(back.manifest.feature_sidecar.has_value());
  CHECK(fs::file_size(p.parent_path() / *back.manifest.feature_sidecar) ==
        3 * 2 * (kSidecarDimThreshold + 1) * sizeof(float));
  for (std::size_t i = 0; i < 3; ++i) CHECK(back.records[i] == set.records[i]);

  const RecordSet forced = small_set(4, 5);
  const fs::path q = scratch("forced.jsonl");
  write_record_set(q, forced, true);
  const RecordSet qb = read_record_set(q);
  CHECK(qb.manifest.feature_sidecar.has_value());
  CHECK(qb.records == forced.records);
}

TEST_CASE("malformed lines name their line number") {
  const RecordSet set = small_set(5, 2);
  const fs::path p = scratch("bad.jsonl");
  write_record_set(p, set);
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  in.close();
  lines[2] = "{\"id\": \"broken\"";
  lines[3].replace(lines[3].find("\"scores_mm\":["), 13, "\"scores_mm\":[1e300,");
  std::ofstream(p) << lines[0] << "\n" << lines[1] << "\n" << lines[2] << "\n" << lines[3] << "\n" << lines[4] << "\n";
  try {
    read_record_set(p);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.line() == 3);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  const ValidationReport rep = validate_file(p);
  CHECK(rep.errors.size() == 2);
  CHECK(rep.records == 3);
}

TEST_CASE("record validation") {
  RecordSet set = small_set(2, 2);
  SampleRecord r = set.records[0];
  CHECK_NOTHROW(validate_record(r, set.manifest));
  r.scores_v.pop_back();
  CHECK_THROWS_AS(validate_record(r, set.manifest), FormatError);
  r = set.records[0];
  r.x1.push_back(0.0);
  CHECK_THROWS_AS(validate_record(r, set.manifest), FormatError);
  r = set.records[0];
  r.x2[0] = std::nan("");
  CHECK_THROWS_AS(validate_record(r, set.manifest), FormatError);
  r = set.records[0];
  r.gold = 3;
  CHECK_THROWS_AS(validate_record(r, set.manifest), FormatError);
}

TEST_CASE("duplicate ids are reported by the linter") {
  RecordSet set = small_set(3, 2);
  set.records[2].id = set.records[0].id;
  const fs::path p = scratch("dup.jsonl");
  write_record_set(p, set);
  const ValidationReport rep = validate_file(p);
  CHECK_FALSE(rep.ok());
}

TEST_CASE("manifest helpers") {
  Manifest a = small_set(1, 2).manifest;
  Manifest b = a;
  CHECK(manifest_digest(a) == manifest_digest(b));
  CHECK(manifest_diff(a, b).empty());
  b.k = 4;
  b.family = "fam";
  const auto d = manifest_diff(a, b);
  CHECK(d.size() == 2);
  CHECK(manifest_digest(a) != manifest_digest(b));
  CHECK(manifest_path_for("dir/x.jsonl") == fs::path("dir/x.manifest.json"));
}

TEST_CASE("regularized record conditionals") {
  const RecordSet set = small_set(1, 2);
  const ProbePredictions p = regularize_record(set.records[0]);
  CHECK(p.text.fallback_used);
  CHECK_FALSE(p.multimodal.fallback_used);
}

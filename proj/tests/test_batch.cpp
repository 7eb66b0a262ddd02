#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "mmpid/batch.hpp"
#include "mmpid/error.hpp"
#include "mmpid/synth.hpp"

using namespace mmpid;
namespace fs = std::filesystem;

namespace {

FeatureMatrix random_features(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
  std::normal_distribution<double> g(0.0, 1.0);
  FeatureMatrix m(n, dim);
  for (auto& v : m.data) v = g(rng);
  return m;
}

BatchInputs random_batch(std::mt19937_64& rng, std::size_t n, std::size_t dim, std::size_t k) {
  BatchInputs b;
  b.x1 = random_features(rng, n, dim);
  b.x2 = random_features(rng, n, dim);
  std::vector<ProbePredictions> preds(n);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (auto& p : preds) {
    std::vector<double> s1(k), s2(k), s3(k);
    for (std::size_t y = 0; y < k; ++y) {
      s1[y] = u(rng);
      s2[y] = u(rng);
      s3[y] = u(rng);
    }
    p.multimodal = threshold_regularize(s1, 0.0);
    p.vision = threshold_regularize(s2, 0.0);
    p.text = threshold_regularize(s3, 0.0);
  }
  b.targets = make_targets(preds, {}, LabelMode::Soft);
  return b;
}

}  // namespace

TEST_CASE("zero encoders give an all-ones similarity") {
  EncoderParams p(3, 2, 4, 5, 2);
  std::mt19937_64 rng(1);
  const SimilarityTensor a = build_similarity(p, random_features(rng, 6, 3), random_features(rng, 6, 2));
  CHECK(a.n1() == 6);
  CHECK(a.labels() == 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (double v : a.slice(y)) CHECK(v == 1.0);

  const SimilarityTensor one = build_similarity(p, random_features(rng, 1, 3), random_features(rng, 1, 2));
  CHECK(one.n1() == 1);
  CHECK(one.n2() == 1);
  CHECK(one.labels() == 4);
}

TEST_CASE("hand-set two-label similarity") {
  // Identity hidden layers on positive inputs; vision heads (1, 2), text heads (3, -1).
  EncoderParams p(1, 1, 2, 1, 1);
  p.vision.params() = {1, 0, 1, 0, 1, 2, 0, 0};
  p.text.params() = {1, 0, 1, 0, 3, -1, 0, 0};
  FeatureMatrix x1(2, 1), x2(2, 1);
  x1.data = {1.0, 0.5};
  x2.data = {0.2, 1.0};
  const SimilarityTensor a = build_similarity(p, x1, x2);
  CHECK(a.at(0, 0, 0) == doctest::Approx(std::exp(0.6)));
  CHECK(a.at(0, 1, 0) == doctest::Approx(std::exp(3.0)));
  CHECK(a.at(1, 0, 0) == doctest::Approx(std::exp(0.3)));
  CHECK(a.at(1, 1, 0) == doctest::Approx(std::exp(1.5)));
  CHECK(a.at(0, 0, 1) == doctest::Approx(std::exp(-0.4)));
  CHECK(a.at(0, 1, 1) == doctest::Approx(std::exp(-2.0)));
  CHECK(a.at(1, 0, 1) == doctest::Approx(std::exp(-0.2)));
  CHECK(a.at(1, 1, 1) == doctest::Approx(std::exp(-1.0)));
}

TEST_CASE("logits are clamped and non-finite outputs raise") {
  EncoderParams p(1, 1, 1, 1, 1);
  p.vision.params() = {1, 0, 1, 0, 100, 0};
  p.text.params() = {1, 0, 1, 0, 100, 0};
  FeatureMatrix x(1, 1);
  x.data = {1.0};
  CHECK(build_similarity(p, x, x).at(0, 0, 0) == doctest::Approx(std::exp(30.0)));
  p.vision.params()[4] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(build_similarity(p, x, x), NumericError);
}

TEST_CASE("sinkhorn projection") {
  SimilarityTensor ones(3, 3, 2);
  for (std::size_t y = 0; y < 2; ++y)
    for (auto& v : ones.slice(y)) v = 1.0;
  const std::vector<double> uniform(6, 1.0 / 6.0);
  const ProjectedCoupling q = sinkhorn_project(ones, uniform, uniform, 10);
  for (std::size_t y = 0; y < 2; ++y)
    for (double v : q.q.slice(y)) CHECK(v == doctest::Approx(1.0 / 18.0).epsilon(1e-14));

  // A coupling that already meets its marginals is a fixed point.
  const ProjectedCoupling again = sinkhorn_project(q.q, uniform, uniform, 50);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t c = 0; c < 9; ++c) CHECK(std::abs(again.q.slice(y)[c] - q.q.slice(y)[c]) <= 1e-12);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 3.0);
  const std::size_t n = 16, k = 3;
  SimilarityTensor a(n, n, k);
  for (std::size_t y = 0; y < k; ++y)
    for (auto& v : a.slice(y)) v = u(rng);
  const BatchInputs b = random_batch(rng, n, 2, k);
  const ProjectedCoupling p = sinkhorn_project(a, b.targets.rows, b.targets.cols, 200);
  CHECK(p.residual <= 1e-6);
  CHECK(p.q.total() == doctest::Approx(1.0).epsilon(1e-12));
  double prev = 1.0;
  for (int it : {1, 2, 4, 8, 16, 32, 64, 128}) {
    const double r = sinkhorn_project(a, b.targets.rows, b.targets.cols, it).l1_residual;
    CHECK(r <= prev + 1e-15);
    prev = r;
  }
}

TEST_CASE("soft targets carry the unimodal conditionals") {
  std::mt19937_64 rng(5);
  const BatchInputs b = random_batch(rng, 8, 2, 3);
  double rs = 0.0, cs = 0.0;
  for (double v : b.targets.rows) rs += v;
  for (double v : b.targets.cols) cs += v;
  CHECK(rs == doctest::Approx(1.0));
  CHECK(cs == doctest::Approx(1.0));
  for (std::size_t y = 0; y < 3; ++y) {
    double r = 0.0, c = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      r += b.targets.rows[i * 3 + y];
      c += b.targets.cols[i * 3 + y];
    }
    CHECK(r == doctest::Approx(c).epsilon(1e-12));
  }
}

TEST_CASE("hard targets place mass on the drawn label") {
  std::vector<ProbePredictions> preds(4);
  for (auto& p : preds) {
    p.multimodal = threshold_regularize(std::vector<double>{0.9, 0.1}, 0.0);
    p.vision = p.text = p.multimodal;
  }
  const std::vector<int> labels = draw_labels(preds, LabelMode::Argmax, 0);
  CHECK(labels == std::vector<int>{0, 0, 0, 0});
  const BatchTargets t = make_targets(preds, labels, LabelMode::Argmax);
  CHECK(t.rows[0] == 0.25);
  CHECK(t.rows[1] == 0.0);
  CHECK(draw_labels(preds, LabelMode::Sample, 7) == draw_labels(preds, LabelMode::Sample, 7));
  CHECK_THROWS_AS(make_targets(preds, std::vector<int>{0, 1}, LabelMode::Sample), DomainError);
}

TEST_CASE("analytic gradient matches central differences") {
  std::mt19937_64 rng(12);
  const std::size_t dim = 3, k = 3;
  const BatchInputs batch = random_batch(rng, 4, dim, k);
  EncoderParams params(dim, dim, k, 32, 8);
  params.vision.initialize(rng);
  params.text.initialize(rng);
  EncoderParams grad(dim, dim, k, 32, 8);
  batch_objective(params, batch, 100, kDefaultLogitClamp, &grad);

  const double h = 1e-5;
  double worst = 0.0;
  for (int which = 0; which < 2; ++which) {
    auto& theta = which == 0 ? params.vision.params() : params.text.params();
    const auto& g = which == 0 ? grad.vision.params() : grad.text.params();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double keep = theta[i];
      theta[i] = keep + h;
      const double up = batch_objective(params, batch, 100, kDefaultLogitClamp);
      theta[i] = keep - h;
      const double down = batch_objective(params, batch, 100, kDefaultLogitClamp);
      theta[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double err = std::abs(fd - g[i]) / std::max(std::abs(fd) + std::abs(g[i]), 1e-6);
      worst = std::max(worst, err);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("coupling information of simple couplings") {
  SimilarityTensor q(2, 2, 2);
  // Label 0 on (0,0), label 1 on (1,1): Y is a function of the pair.
  q.at(0, 0, 0) = 0.5;
  q.at(1, 1, 1) = 0.5;
  CHECK(coupling_information(q) == doctest::Approx(1.0));
  SimilarityTensor flat(2, 2, 2);
  for (std::size_t y = 0; y < 2; ++y)
    for (auto& v : flat.slice(y)) v = 0.125;
  CHECK(coupling_information(flat) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("training is deterministic and degenerate labels are refused") {
  const RecordSet set = gen_continuous({Structure::Redundancy, 3, 4.0, 300, 2});
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 4;
  const CouplingModel a = train(set.records, cfg);
  const CouplingModel b = train(set.records, cfg);
  CHECK(a.loss_trace == b.loss_trace);
  CHECK(model_digest(a) == model_digest(b));
  CHECK(a.loss_trace.size() == 2);
  cfg.seed = 5;
  CHECK(model_digest(train(set.records, cfg)) != model_digest(a));

  const std::vector<int> same(set.records.size(), 1);
  CHECK_THROWS_AS(train(set.records, same, cfg), DegenerateError);
  cfg.batch_size = 1;
  CHECK_THROWS_AS(train(set.records, cfg), DomainError);
}

TEST_CASE("estimation is identical across thread counts") {
  const RecordSet set = gen_continuous({Structure::Unique1, 3, 4.0, 400, 3});
  const auto [tr, te] = split_dataset<SampleRecord>(set.records, {3, 1, 3});
  TrainConfig cfg;
  cfg.epochs = 1;
  const CouplingModel m = train(tr, cfg);
  const BatchEstimate a = estimate_atoms(m, te, 1);
  const BatchEstimate b = estimate_atoms(m, te, 4);
  CHECK(a.report.atoms.synergy == b.report.atoms.synergy);
  CHECK(a.report.atoms.redundancy == b.report.atoms.redundancy);
  CHECK(a.report.terms.mi_q == b.report.terms.mi_q);
  CHECK(a.test_count == te.size());
  CHECK(std::abs(a.report.atoms.sum() - a.report.atoms.total) <= 1e-6 + a.report.residuals.sum);
  CHECK_THROWS_AS(estimate_atoms(m, std::span<const SampleRecord>{}, 1), DomainError);
}

TEST_CASE("independent noise yields near-zero atoms") {
  const RecordSet set = gen_continuous({Structure::Independent, 4, 4.0, 1000, 8});
  const auto [tr, te] = split_dataset<SampleRecord>(set.records, {3, 1, 8});
  const BatchEstimate e = estimate_atoms(train(tr, TrainConfig{}), te, 1);
  for (double v : {e.report.atoms.redundancy, e.report.atoms.unique1, e.report.atoms.unique2, e.report.atoms.synergy}) {
    CHECK(v <= 0.05);
  }
}

TEST_CASE("model files round-trip bit-exactly") {
  const RecordSet set = gen_continuous({Structure::Synergy, 2, 4.0, 200, 1});
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.label_mode = LabelMode::Sample;
  const CouplingModel m = train(set.records, cfg);
  const fs::path p = fs::temp_directory_path() / "mmpid-model-test.bin";
  save_model(p, m);
  const CouplingModel back = load_model(p);
  CHECK(back == m);
  CHECK(serialize_model(back) == serialize_model(m));

  auto bytes = serialize_model(m);
  bytes[0] = 'X';
  CHECK_THROWS_AS(deserialize_model(bytes), FormatError);
  bytes = serialize_model(m);
  bytes.pop_back();
  CHECK_THROWS_AS(deserialize_model(bytes), FormatError);
  bytes = serialize_model(m);
  bytes.push_back(0);
  CHECK_THROWS_AS(deserialize_model(bytes), FormatError);
}

TEST_CASE("label mode names") {
  CHECK(parse_label_mode("argmax") == LabelMode::Argmax);
  CHECK(to_string(LabelMode::Soft) == "soft");
  CHECK_THROWS_AS(parse_label_mode("hard"), DomainError);
}

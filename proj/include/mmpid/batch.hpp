#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mmpid/ingest.hpp"
#include "mmpid/pid.hpp"
#include "mmpid/sinkhorn.hpp"

namespace mmpid {

// Row-major dense matrix of features, one sample per row.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }
  bool operator==(const FeatureMatrix&) const = default;
};

// Three linear layers (in -> hidden -> hidden -> out) with ReLU between.
// Parameters live in one flat vector: W1, b1, W2, b2, W3, b3 (W row-major out x in).
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out);

  std::size_t input_dim() const noexcept { return in_; }
  std::size_t hidden_dim() const noexcept { return hidden_; }
  std::size_t output_dim() const noexcept { return out_; }

  std::vector<double>& params() noexcept { return params_; }
  const std::vector<double>& params() const noexcept { return params_; }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  void initialize(std::mt19937_64& rng);

  struct Cache {
    FeatureMatrix input, h1, h2;  // post-activation hidden layers
  };
  FeatureMatrix forward(const FeatureMatrix& x, Cache* cache = nullptr) const;
  // Accumulates d loss / d params into grad (same layout as params()).
  void backward(const Cache& cache, const FeatureMatrix& grad_out, std::vector<double>& grad) const;

  bool operator==(const Mlp&) const = default;

 private:
  std::size_t in_ = 0, hidden_ = 0, out_ = 0;
  std::vector<double> params_;
};

// Vision and text encoders. Each maps a feature vector to `labels` rows of
// width `embed_dim`; row y is the label-conditioned embedding f(x, y).
struct EncoderParams {
  Mlp vision;
  Mlp text;
  std::size_t labels = 0;
  std::size_t embed_dim = 0;

  EncoderParams() = default;
  EncoderParams(std::size_t dim_x1, std::size_t dim_x2, std::size_t labels, std::size_t hidden,
                std::size_t embed_dim);
  bool operator==(const EncoderParams&) const = default;
};

// A[i][j][y] = exp(<f1(x1_i, y), f2(x2_j, y)>), stored label-major.
class SimilarityTensor {
 public:
  SimilarityTensor() = default;
  SimilarityTensor(std::size_t n1, std::size_t n2, std::size_t labels);

  std::size_t n1() const noexcept { return n1_; }
  std::size_t n2() const noexcept { return n2_; }
  std::size_t labels() const noexcept { return labels_; }
  double& at(std::size_t i, std::size_t j, std::size_t y) { return data_[(y * n1_ + i) * n2_ + j]; }
  double at(std::size_t i, std::size_t j, std::size_t y) const { return data_[(y * n1_ + i) * n2_ + j]; }
  std::span<double> slice(std::size_t y) { return {data_.data() + y * n1_ * n2_, n1_ * n2_}; }
  std::span<const double> slice(std::size_t y) const { return {data_.data() + y * n1_ * n2_, n1_ * n2_}; }
  double total() const;

 private:
  std::size_t n1_ = 0, n2_ = 0, labels_ = 0;
  std::vector<double> data_;
};

inline constexpr double kDefaultLogitClamp = 30.0;

SimilarityTensor build_similarity(const EncoderParams& params, const FeatureMatrix& x1_batch,
                                  const FeatureMatrix& x2_batch, double logit_clamp = kDefaultLogitClamp);

struct ProjectedCoupling {
  SimilarityTensor q;      // sums to 1
  double residual = 0.0;   // max-abs deviation of the (i,y) and (j,y) marginals
  double l1_residual = 0.0;
};

// Scales each label slice of a so its row sums match row_targets[i*K + y]
// and its column sums match col_targets[j*K + y].
ProjectedCoupling sinkhorn_project(const SimilarityTensor& a, std::span<const double> row_targets,
                                   std::span<const double> col_targets, int iters);

// I_Q(X1,X2;Y) in bits treating each batch row/column as a distinct source value.
double coupling_information(const SimilarityTensor& q);

enum class LabelMode { Soft, Sample, Argmax };
std::string to_string(LabelMode m);
LabelMode parse_label_mode(const std::string& s);

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int epochs = 8;
  std::size_t batch_size = 256;
  std::size_t test_batch_size = 256;
  int sinkhorn_iters = 100;
  std::size_t hidden = 32;
  std::size_t embed_dim = 8;
  double logit_clamp = kDefaultLogitClamp;
  double tau = kDefaultTau;
  LabelMode label_mode = LabelMode::Soft;
  std::uint64_t seed = 0;

  void validate(std::size_t labels) const;
  std::uint64_t digest() const;
  bool operator==(const TrainConfig&) const = default;
};

// Sinkhorn targets for one batch: n x K tables, each summing to 1.
struct BatchTargets {
  std::vector<double> rows;
  std::vector<double> cols;
};

// soft: rows from the vision-only conditionals, columns from the text-only
// conditionals, per-label masses reconciled to their mean. sample/argmax:
// mass 1/n on (i, labels[i]) for both.
BatchTargets make_targets(std::span<const ProbePredictions> preds, std::span<const int> labels, LabelMode mode);

// Per-sample labels: drawn from (sample) or the mode of (argmax) the regularized
// multimodal prediction. Soft mode draws as in sample mode.
std::vector<int> draw_labels(std::span<const ProbePredictions> preds, LabelMode mode, std::uint64_t seed);

struct BatchInputs {
  FeatureMatrix x1;
  FeatureMatrix x2;
  BatchTargets targets;
};

// Training objective on one batch (I_Q in bits after projection). When grad
// is non-null, accumulates its gradient w.r.t. both encoders' parameters.
double batch_objective(const EncoderParams& params, const BatchInputs& batch, int sinkhorn_iters,
                       double logit_clamp, EncoderParams* grad = nullptr);

// Trained marginal-matching joint. Tensors are float32-representable so the
// persisted file round-trips exactly.
struct CouplingModel {
  TrainConfig config;
  EncoderParams params;
  std::size_t labels = 0;
  // Frozen statistics: feature standardization and the training-pool P(Y).
  std::vector<double> x1_mean, x1_scale, x2_mean, x2_scale;
  std::vector<double> train_py;
  std::uint64_t train_count = 0;
  std::uint64_t data_digest = 0;
  std::vector<double> loss_trace;  // per-epoch mean batch objective, bits

  bool operator==(const CouplingModel&) const = default;
};

std::uint64_t dataset_digest(std::span<const SampleRecord> records);

CouplingModel train(std::span<const SampleRecord> records, std::span<const int> labels, const TrainConfig& cfg);
// Draws labels per cfg.label_mode and trains.
CouplingModel train(std::span<const SampleRecord> records, const TrainConfig& cfg);

struct BatchEstimate {
  AtomReport report;
  double max_sinkhorn_residual = 0.0;
  std::size_t test_count = 0;
};

// Plug-in terms from the probe distributions plus I_Q from the learned coupling
// on the test records; atoms clamped at zero with residuals reported.
BatchEstimate estimate_atoms(const CouplingModel& model, std::span<const SampleRecord> test_records,
                             unsigned threads = 0);

void save_model(const std::filesystem::path& path, const CouplingModel& model);
CouplingModel load_model(const std::filesystem::path& path);
std::vector<unsigned char> serialize_model(const CouplingModel& model);
CouplingModel deserialize_model(std::span<const unsigned char> bytes);
std::uint64_t model_digest(const CouplingModel& model);

}  // namespace mmpid

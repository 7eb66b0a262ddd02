#include "mmpid/batch.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "mmpid/error.hpp"
#include "mmpid/numeric.hpp"

namespace mmpid {

namespace {

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_all(std::vector<double>& v) {
  for (double& x : v) x = round_to_float(x);
}

}  // namespace

// ---------------------------------------------------------------- MLP

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out)
    : in_(in), hidden_(hidden), out_(out),
      params_(hidden * in + hidden + hidden * hidden + hidden + out * hidden + out, 0.0) {
  if (in == 0 || hidden == 0 || out == 0) throw DomainError("Mlp: zero-sized layer");
}

void Mlp::initialize(std::mt19937_64& rng) {
  auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < count; ++i) params_[offset + i] = dist(rng);
  };
  std::size_t o = 0;
  fill(o, hidden_ * in_ + hidden_, in_);
  o += hidden_ * in_ + hidden_;
  fill(o, hidden_ * hidden_ + hidden_, hidden_);
  o += hidden_ * hidden_ + hidden_;
  fill(o, out_ * hidden_ + out_, hidden_);
}

namespace {

// y = x W^T + b over a batch, optional ReLU.
FeatureMatrix dense(const FeatureMatrix& x, const double* w, const double* b, std::size_t out, bool relu) {
  FeatureMatrix y(x.rows, out);
  for (std::size_t n = 0; n < x.rows; ++n) {
    const double* xr = x.row(n);
    double* yr = y.row(n);
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = w + o * x.cols;
      double acc = b[o];
      for (std::size_t i = 0; i < x.cols; ++i) acc += wr[i] * xr[i];
      yr[o] = relu ? std::max(0.0, acc) : acc;
    }
  }
  return y;
}

// Accumulates gradients of a dense layer; returns grad wrt its input.
FeatureMatrix dense_backward(const FeatureMatrix& x, const FeatureMatrix& grad_out, const double* w, double* gw,
                             double* gb, bool need_input_grad) {
  const std::size_t out = grad_out.cols, in = x.cols;
  FeatureMatrix gx(need_input_grad ? x.rows : 0, in);
  for (std::size_t n = 0; n < x.rows; ++n) {
    const double* xr = x.row(n);
    const double* gr = grad_out.row(n);
    for (std::size_t o = 0; o < out; ++o) {
      const double g = gr[o];
      if (g == 0.0) continue;
      gb[o] += g;
      double* gwr = gw + o * in;
      for (std::size_t i = 0; i < in; ++i) gwr[i] += g * xr[i];
      if (need_input_grad) {
        const double* wr = w + o * in;
        double* gxr = gx.row(n);
        for (std::size_t i = 0; i < in; ++i) gxr[i] += g * wr[i];
      }
    }
  }
  return gx;
}

}  // namespace

FeatureMatrix Mlp::forward(const FeatureMatrix& x, Cache* cache) const {
  if (x.cols != in_) throw DomainError("Mlp::forward: input has " + std::to_string(x.cols) + " columns, expected " +
                                       std::to_string(in_));
  const double* p = params_.data();
  const double* w1 = p;
  const double* b1 = w1 + hidden_ * in_;
  const double* w2 = b1 + hidden_;
  const double* b2 = w2 + hidden_ * hidden_;
  const double* w3 = b2 + hidden_;
  const double* b3 = w3 + out_ * hidden_;
  FeatureMatrix h1 = dense(x, w1, b1, hidden_, true);
  FeatureMatrix h2 = dense(h1, w2, b2, hidden_, true);
  FeatureMatrix out = dense(h2, w3, b3, out_, false);
  if (cache) {
    cache->input = x;
    cache->h1 = std::move(h1);
    cache->h2 = std::move(h2);
  }
  return out;
}

void Mlp::backward(const Cache& cache, const FeatureMatrix& grad_out, std::vector<double>& grad) const {
  if (grad.size() != params_.size()) grad.assign(params_.size(), 0.0);
  const double* p = params_.data();
  double* g = grad.data();
  const std::size_t o_b1 = hidden_ * in_, o_w2 = o_b1 + hidden_, o_b2 = o_w2 + hidden_ * hidden_,
                    o_w3 = o_b2 + hidden_, o_b3 = o_w3 + out_ * hidden_;

  FeatureMatrix g2 = dense_backward(cache.h2, grad_out, p + o_w3, g + o_w3, g + o_b3, true);
  for (std::size_t i = 0; i < g2.data.size(); ++i)
    if (cache.h2.data[i] <= 0.0) g2.data[i] = 0.0;
  FeatureMatrix g1 = dense_backward(cache.h1, g2, p + o_w2, g + o_w2, g + o_b2, true);
  for (std::size_t i = 0; i < g1.data.size(); ++i)
    if (cache.h1.data[i] <= 0.0) g1.data[i] = 0.0;
  dense_backward(cache.input, g1, p, g, g + o_b1, false);
}

EncoderParams::EncoderParams(std::size_t dim_x1, std::size_t dim_x2, std::size_t labels_, std::size_t hidden,
                             std::size_t embed_dim_)
    : vision(dim_x1, hidden, labels_ * embed_dim_),
      text(dim_x2, hidden, labels_ * embed_dim_),
      labels(labels_),
      embed_dim(embed_dim_) {}

// ---------------------------------------------------------------- similarity

SimilarityTensor::SimilarityTensor(std::size_t n1, std::size_t n2, std::size_t labels)
    : n1_(n1), n2_(n2), labels_(labels), data_(n1 * n2 * labels, 0.0) {}

double SimilarityTensor::total() const { return pairwise_sum(data_); }

namespace {

void check_encoder_output(const FeatureMatrix& f, const char* which) {
  for (std::size_t i = 0; i < f.rows; ++i)
    for (std::size_t c = 0; c < f.cols; ++c)
      if (!std::isfinite(f.row(i)[c])) {
        throw NumericError(std::string("non-finite ") + which + " encoder output for sample " + std::to_string(i));
      }
}

// logits[y][i][j] = <F1[i, y], F2[j, y]>
void fill_logits(const FeatureMatrix& f1, const FeatureMatrix& f2, std::size_t labels, std::size_t d,
                 SimilarityTensor& logits) {
  for (std::size_t y = 0; y < labels; ++y)
    for (std::size_t i = 0; i < f1.rows; ++i) {
      const double* a = f1.row(i) + y * d;
      for (std::size_t j = 0; j < f2.rows; ++j) {
        const double* b = f2.row(j) + y * d;
        double acc = 0.0;
        for (std::size_t e = 0; e < d; ++e) acc += a[e] * b[e];
        logits.at(i, j, y) = acc;
      }
    }
}

}  // namespace

SimilarityTensor build_similarity(const EncoderParams& params, const FeatureMatrix& x1_batch,
                                  const FeatureMatrix& x2_batch, double logit_clamp) {
  if (x1_batch.rows != x2_batch.rows) throw DomainError("build_similarity: batches differ in size");
  const FeatureMatrix f1 = params.vision.forward(x1_batch);
  const FeatureMatrix f2 = params.text.forward(x2_batch);
  check_encoder_output(f1, "vision");
  check_encoder_output(f2, "text");
  SimilarityTensor a(x1_batch.rows, x2_batch.rows, params.labels);
  fill_logits(f1, f2, params.labels, params.embed_dim, a);
  for (std::size_t y = 0; y < params.labels; ++y)
    for (double& v : a.slice(y)) v = std::exp(std::clamp(v, -logit_clamp, logit_clamp));
  return a;
}

// ---------------------------------------------------------------- projection

namespace {

struct SliceTargets {
  std::vector<double> rows, cols;
  double mass = 0.0;
};

SliceTargets slice_targets(std::span<const double> row_targets, std::span<const double> col_targets,
                           std::size_t n1, std::size_t n2, std::size_t labels, std::size_t y) {
  SliceTargets t;
  t.rows.resize(n1);
  t.cols.resize(n2);
  for (std::size_t i = 0; i < n1; ++i) t.rows[i] = row_targets[i * labels + y];
  for (std::size_t j = 0; j < n2; ++j) t.cols[j] = col_targets[j * labels + y];
  t.mass = pairwise_sum(t.rows) + pairwise_sum(t.cols);
  return t;
}

void check_targets(std::span<const double> targets, std::size_t n, std::size_t labels, const char* which) {
  if (targets.size() != n * labels) throw DomainError(std::string("sinkhorn_project: ") + which + " targets have wrong shape");
  for (double t : targets)
    if (!(t >= 0.0) || !std::isfinite(t)) throw DomainError(std::string("sinkhorn_project: invalid ") + which + " target");
  if (std::abs(pairwise_sum(targets) - 1.0) > 1e-9) {
    throw DomainError(std::string("sinkhorn_project: ") + which + " targets must sum to 1");
  }
}

}  // namespace

ProjectedCoupling sinkhorn_project(const SimilarityTensor& a, std::span<const double> row_targets,
                                   std::span<const double> col_targets, int iters) {
  const std::size_t n1 = a.n1(), n2 = a.n2(), k = a.labels();
  check_targets(row_targets, n1, k, "row");
  check_targets(col_targets, n2, k, "column");
  for (std::size_t y = 0; y < k; ++y)
    for (double v : a.slice(y))
      if (!(v > 0.0) || !std::isfinite(v)) throw DomainError("sinkhorn_project: similarity must be strictly positive");

  ProjectedCoupling out{SimilarityTensor(n1, n2, k), 0.0, 0.0};
  for (std::size_t y = 0; y < k; ++y) {
    const SliceTargets t = slice_targets(row_targets, col_targets, n1, n2, k, y);
    if (t.mass == 0.0) continue;
    const ScalingResult s = sinkhorn_scaling(a.slice(y), n1, n2, t.rows, t.cols, {iters, 0.0});
    apply_scaling(a.slice(y), n1, n2, s, out.q.slice(y));
  }
  // Residuals over the (i, y) and (j, y) marginals.
  for (std::size_t y = 0; y < k; ++y) {
    const auto sl = out.q.slice(y);
    for (std::size_t i = 0; i < n1; ++i) {
      double r = 0.0;
      for (std::size_t j = 0; j < n2; ++j) r += sl[i * n2 + j];
      const double dev = std::abs(r - row_targets[i * k + y]);
      out.residual = std::max(out.residual, dev);
      out.l1_residual += dev;
    }
    for (std::size_t j = 0; j < n2; ++j) {
      double c = 0.0;
      for (std::size_t i = 0; i < n1; ++i) c += sl[i * n2 + j];
      const double dev = std::abs(c - col_targets[j * k + y]);
      out.residual = std::max(out.residual, dev);
      out.l1_residual += dev;
    }
  }
  return out;
}

double coupling_information(const SimilarityTensor& q) {
  const std::size_t n1 = q.n1(), n2 = q.n2(), k = q.labels();
  std::vector<double> qy(k, 0.0), qij(n1 * n2, 0.0);
  for (std::size_t y = 0; y < k; ++y) {
    const auto sl = q.slice(y);
    qy[y] = pairwise_sum(sl);
    for (std::size_t c = 0; c < n1 * n2; ++c) qij[c] += sl[c];
  }
  const double total = pairwise_sum(qy);
  std::vector<double> terms;
  terms.reserve(n1 * n2 * k);
  for (std::size_t y = 0; y < k; ++y) {
    const auto sl = q.slice(y);
    for (std::size_t c = 0; c < n1 * n2; ++c) {
      const double v = sl[c];
      if (v > 0.0) terms.push_back(v * std::log2(v * total / (qij[c] * qy[y])));
    }
  }
  return pairwise_sum(terms) / total;
}

// ---------------------------------------------------------------- targets

std::string to_string(LabelMode m) {
  switch (m) {
    case LabelMode::Soft: return "soft";
    case LabelMode::Sample: return "sample";
    case LabelMode::Argmax: return "argmax";
  }
  return "soft";
}

LabelMode parse_label_mode(const std::string& s) {
  if (s == "soft") return LabelMode::Soft;
  if (s == "sample") return LabelMode::Sample;
  if (s == "argmax") return LabelMode::Argmax;
  throw DomainError("unknown label mode '" + s + "' (expected soft, sample or argmax)");
}

std::vector<int> draw_labels(std::span<const ProbePredictions> preds, LabelMode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> out(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto probs = preds[i].multimodal.probs.probs();
    if (mode == LabelMode::Argmax) {
      out[i] = static_cast<int>(argmax(probs));
    } else {
      std::discrete_distribution<int> d(probs.begin(), probs.end());
      out[i] = d(rng);
    }
  }
  return out;
}

BatchTargets make_targets(std::span<const ProbePredictions> preds, std::span<const int> labels, LabelMode mode) {
  const std::size_t n = preds.size();
  if (n == 0) throw DomainError("make_targets: empty batch");
  const std::size_t k = preds[0].multimodal.probs.size();
  BatchTargets t{std::vector<double>(n * k, 0.0), std::vector<double>(n * k, 0.0)};
  const double w = 1.0 / static_cast<double>(n);
  if (mode != LabelMode::Soft) {
    if (labels.size() != n) throw DomainError("make_targets: label count differs from batch size");
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = static_cast<std::size_t>(labels[i]);
      if (y >= k) throw DomainError("make_targets: label out of range");
      t.rows[i * k + y] = w;
      t.cols[i * k + y] = w;
    }
    return t;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (preds[i].vision.probs.size() != k || preds[i].text.probs.size() != k) {
      throw DomainError("make_targets: predictions differ in label count");
    }
    for (std::size_t y = 0; y < k; ++y) {
      t.rows[i * k + y] = w * preds[i].vision.probs[y];
      t.cols[i * k + y] = w * preds[i].text.probs[y];
    }
  }
  // Reconcile per-label masses so every label slice is feasible.
  std::vector<double> column(n);
  for (std::size_t y = 0; y < k; ++y) {
    for (std::size_t i = 0; i < n; ++i) column[i] = t.rows[i * k + y];
    const double rm = pairwise_sum(column);
    for (std::size_t i = 0; i < n; ++i) column[i] = t.cols[i * k + y];
    const double cm = pairwise_sum(column);
    const double target = rm > 0.0 && cm > 0.0 ? 0.5 * (rm + cm) : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      t.rows[i * k + y] = target > 0.0 ? t.rows[i * k + y] * target / rm : 0.0;
      t.cols[i * k + y] = target > 0.0 ? t.cols[i * k + y] * target / cm : 0.0;
    }
  }
  const double rt = pairwise_sum(t.rows), ct = pairwise_sum(t.cols);
  for (double& v : t.rows) v /= rt;
  for (double& v : t.cols) v /= ct;
  return t;
}

// ---------------------------------------------------------------- objective

namespace {

// Reverse mode through T unrolled Sinkhorn iterations for one slice.
// Adds d loss / d kernel into grad_kernel.
void sinkhorn_backward(std::span<const double> kernel, std::size_t n1, std::size_t n2,
                       const SinkhornHistory& hist, std::span<const double> grad_q, std::span<double> grad_kernel) {
  const std::size_t steps = hist.u.size();
  const auto& u_last = hist.u.back();
  const auto& v_last = hist.v.back();
  std::vector<double> gu(n1, 0.0), gv(n2, 0.0), gs(n2), gp(n1), s(n2), p(n1);
  for (std::size_t i = 0; i < n1; ++i)
    for (std::size_t j = 0; j < n2; ++j) {
      const double g = grad_q[i * n2 + j];
      if (g == 0.0) continue;
      const double kij = kernel[i * n2 + j];
      grad_kernel[i * n2 + j] += g * u_last[i] * v_last[j];
      gu[i] += g * kij * v_last[j];
      gv[j] += g * kij * u_last[i];
    }
  const std::vector<double> ones(n2, 1.0);
  for (std::size_t t = steps; t-- > 0;) {
    const auto& u = hist.u[t];
    const auto& v = hist.v[t];
    const auto& v_prev = t > 0 ? hist.v[t - 1] : ones;
    // v_t = c / (K^T u_t)
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t i = 0; i < n1; ++i) {
      if (u[i] == 0.0) continue;
      for (std::size_t j = 0; j < n2; ++j) s[j] += kernel[i * n2 + j] * u[i];
    }
    for (std::size_t j = 0; j < n2; ++j) gs[j] = v[j] == 0.0 ? 0.0 : -gv[j] * v[j] / s[j];
    for (std::size_t i = 0; i < n1; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n2; ++j) {
        grad_kernel[i * n2 + j] += u[i] * gs[j];
        acc += kernel[i * n2 + j] * gs[j];
      }
      gu[i] += acc;
    }
    // u_t = r / (K v_{t-1})
    for (std::size_t i = 0; i < n1; ++i) {
      if (u[i] == 0.0) {
        gp[i] = 0.0;
        continue;
      }
      double acc = 0.0;
      for (std::size_t j = 0; j < n2; ++j) acc += kernel[i * n2 + j] * v_prev[j];
      p[i] = acc;
      gp[i] = -gu[i] * u[i] / acc;
    }
    std::fill(gv.begin(), gv.end(), 0.0);
    for (std::size_t i = 0; i < n1; ++i) {
      if (gp[i] == 0.0) continue;
      for (std::size_t j = 0; j < n2; ++j) {
        grad_kernel[i * n2 + j] += gp[i] * v_prev[j];
        gv[j] += kernel[i * n2 + j] * gp[i];
      }
    }
    std::fill(gu.begin(), gu.end(), 0.0);
  }
}

}  // namespace

double batch_objective(const EncoderParams& params, const BatchInputs& batch, int sinkhorn_iters,
                       double logit_clamp, EncoderParams* grad) {
  const std::size_t n1 = batch.x1.rows, n2 = batch.x2.rows, k = params.labels, d = params.embed_dim;
  if (n1 != n2) throw DomainError("batch_objective: batches differ in size");
  Mlp::Cache c1, c2;
  const FeatureMatrix f1 = params.vision.forward(batch.x1, grad ? &c1 : nullptr);
  const FeatureMatrix f2 = params.text.forward(batch.x2, grad ? &c2 : nullptr);
  check_encoder_output(f1, "vision");
  check_encoder_output(f2, "text");
  check_targets(batch.targets.rows, n1, k, "row");
  check_targets(batch.targets.cols, n2, k, "column");

  SimilarityTensor logits(n1, n2, k);
  fill_logits(f1, f2, k, d, logits);
  SimilarityTensor kernel(n1, n2, k), q(n1, n2, k);
  std::vector<SinkhornHistory> history(k);
  std::vector<bool> active(k, false);
  for (std::size_t y = 0; y < k; ++y) {
    auto ks = kernel.slice(y);
    const auto ls = logits.slice(y);
    for (std::size_t c = 0; c < ks.size(); ++c) ks[c] = std::exp(std::clamp(ls[c], -logit_clamp, logit_clamp));
    const SliceTargets t = slice_targets(batch.targets.rows, batch.targets.cols, n1, n2, k, y);
    if (t.mass == 0.0) continue;
    active[y] = true;
    const ScalingResult s = sinkhorn_scaling(ks, n1, n2, t.rows, t.cols, {sinkhorn_iters, 0.0},
                                             grad ? &history[y] : nullptr);
    apply_scaling(ks, n1, n2, s, q.slice(y));
  }
  const double loss = coupling_information(q);
  if (!grad) return loss;

  // d I / d Q = log2(Q * Q_total / (Q_y * Q_ij)) on the support.
  std::vector<double> qy(k, 0.0), qij(n1 * n2, 0.0);
  for (std::size_t y = 0; y < k; ++y) {
    const auto sl = q.slice(y);
    qy[y] = pairwise_sum(sl);
    for (std::size_t c = 0; c < n1 * n2; ++c) qij[c] += sl[c];
  }
  const double total = pairwise_sum(qy);
  FeatureMatrix gf1(n1, k * d), gf2(n2, k * d);
  std::vector<double> grad_q(n1 * n2), grad_kernel(n1 * n2);
  for (std::size_t y = 0; y < k; ++y) {
    if (!active[y]) continue;
    const auto sl = q.slice(y);
    for (std::size_t c = 0; c < n1 * n2; ++c) {
      const double v = sl[c];
      grad_q[c] = v > 0.0 ? std::log2(v * total / (qij[c] * qy[y])) : 0.0;
    }
    std::fill(grad_kernel.begin(), grad_kernel.end(), 0.0);
    sinkhorn_backward(kernel.slice(y), n1, n2, history[y], grad_q, grad_kernel);
    const auto ks = kernel.slice(y);
    const auto ls = logits.slice(y);
    for (std::size_t i = 0; i < n1; ++i) {
      const double* a = f1.row(i) + y * d;
      double* ga = gf1.row(i) + y * d;
      for (std::size_t j = 0; j < n2; ++j) {
        const std::size_t c = i * n2 + j;
        if (std::abs(ls[c]) >= logit_clamp) continue;
        const double gl = grad_kernel[c] * ks[c];
        if (gl == 0.0) continue;
        const double* b = f2.row(j) + y * d;
        double* gb = gf2.row(j) + y * d;
        for (std::size_t e = 0; e < d; ++e) {
          ga[e] += gl * b[e];
          gb[e] += gl * a[e];
        }
      }
    }
  }
  params.vision.backward(c1, gf1, grad->vision.params());
  params.text.backward(c2, gf2, grad->text.params());
  return loss;
}

// ---------------------------------------------------------------- training

void TrainConfig::validate(std::size_t labels) const {
  if (!(learning_rate > 0.0)) throw DomainError("train: learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw DomainError("train: Adam betas must be in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw DomainError("train: Adam epsilon must be > 0");
  if (epochs < 1) throw DomainError("train: epochs must be >= 1");
  if (sinkhorn_iters < 1) throw DomainError("train: sinkhorn_iters must be >= 1");
  if (hidden == 0 || embed_dim == 0) throw DomainError("train: hidden and embed_dim must be >= 1");
  if (!(logit_clamp > 0.0)) throw DomainError("train: logit_clamp must be > 0");
  if (!(tau >= 0.0)) throw DomainError("train: tau must be >= 0");
  if (batch_size < labels || test_batch_size < labels) {
    throw DomainError("train: batch size must be at least the label count");
  }
}

std::uint64_t TrainConfig::digest() const {
  return Fnv1a()
      .f64(learning_rate)
      .f64(beta1)
      .f64(beta2)
      .f64(adam_epsilon)
      .u64(static_cast<std::uint64_t>(epochs))
      .u64(batch_size)
      .u64(test_batch_size)
      .u64(static_cast<std::uint64_t>(sinkhorn_iters))
      .u64(hidden)
      .u64(embed_dim)
      .f64(logit_clamp)
      .f64(tau)
      .u64(static_cast<std::uint64_t>(label_mode))
      .u64(seed)
      .value();
}

std::uint64_t dataset_digest(std::span<const SampleRecord> records) {
  Fnv1a h;
  h.u64(records.size());
  for (const auto& r : records) {
    h.str(r.id);
    for (const auto* v : {&r.x1, &r.x2, &r.scores_mm, &r.scores_v, &r.scores_t}) {
      h.u64(v->size());
      for (double x : *v) h.f64(x);
    }
  }
  return h.value();
}

namespace {

struct Standardizer {
  std::vector<double> mean, scale;
};

Standardizer fit_standardizer(std::span<const SampleRecord> records, bool vision) {
  const std::size_t dim = vision ? records[0].x1.size() : records[0].x2.size();
  Standardizer s{std::vector<double>(dim), std::vector<double>(dim)};
  std::vector<double> column(records.size());
  for (std::size_t d = 0; d < dim; ++d) {
    for (std::size_t i = 0; i < records.size(); ++i) column[i] = vision ? records[i].x1[d] : records[i].x2[d];
    const double mean = pairwise_sum(column) / static_cast<double>(records.size());
    for (double& v : column) v = (v - mean) * (v - mean);
    const double sd = std::sqrt(pairwise_sum(column) / static_cast<double>(records.size()));
    s.mean[d] = round_to_float(mean);
    s.scale[d] = round_to_float(1.0 / std::max(sd, kSigmaFloor));
  }
  return s;
}

FeatureMatrix gather(std::span<const SampleRecord> records, std::span<const std::size_t> idx, bool vision,
                     const std::vector<double>& mean, const std::vector<double>& scale) {
  const std::size_t dim = mean.size();
  FeatureMatrix m(idx.size(), dim);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& x = vision ? records[idx[r]].x1 : records[idx[r]].x2;
    if (x.size() != dim) throw DomainError("feature dimension differs from the model's");
    for (std::size_t d = 0; d < dim; ++d) {
      if (!std::isfinite(x[d])) throw DomainError("non-finite feature in record " + records[idx[r]].id);
      m.row(r)[d] = (x[d] - mean[d]) * scale[d];
    }
  }
  return m;
}

std::size_t common_label_count(std::span<const SampleRecord> records) {
  const std::size_t k = records[0].options();
  for (const auto& r : records)
    if (r.options() != k) throw DomainError("records differ in candidate count");
  return k;
}

BatchInputs make_batch(std::span<const SampleRecord> records, std::span<const ProbePredictions> preds,
                       std::span<const int> labels, std::span<const std::size_t> idx, const CouplingModel& m) {
  BatchInputs b;
  b.x1 = gather(records, idx, true, m.x1_mean, m.x1_scale);
  b.x2 = gather(records, idx, false, m.x2_mean, m.x2_scale);
  std::vector<ProbePredictions> bp;
  std::vector<int> bl;
  bp.reserve(idx.size());
  for (std::size_t i : idx) {
    bp.push_back(preds[i]);
    if (!labels.empty()) bl.push_back(labels[i]);
  }
  b.targets = make_targets(bp, bl, m.config.label_mode);
  return b;
}

class Adam {
 public:
  Adam(std::size_t n, const TrainConfig& cfg) : m_(n, 0.0), v_(n, 0.0), cfg_(cfg) {}
  void step(std::vector<double>& params, const std::vector<double>& grad, int t) {
    const double c1 = 1.0 - std::pow(cfg_.beta1, t);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      params[i] -= cfg_.learning_rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.adam_epsilon);
    }
  }

 private:
  std::vector<double> m_, v_;
  const TrainConfig& cfg_;
};

}  // namespace

CouplingModel train(std::span<const SampleRecord> records, std::span<const int> labels, const TrainConfig& cfg) {
  if (records.empty()) throw DomainError("train: no records");
  if (labels.size() != records.size()) throw DomainError("train: one label per record required");
  const std::size_t k = common_label_count(records);
  cfg.validate(k);
  {
    std::vector<int> distinct(labels.begin(), labels.end());
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < 2) throw DegenerateError("train: fewer than two distinct labels in the training set");
    if (distinct.front() < 0 || static_cast<std::size_t>(distinct.back()) >= k) {
      throw DomainError("train: label out of range");
    }
  }

  std::vector<ProbePredictions> preds;
  preds.reserve(records.size());
  for (const auto& r : records) preds.push_back(regularize_record(r, cfg.tau));

  CouplingModel model;
  model.config = cfg;
  model.labels = k;
  const Standardizer s1 = fit_standardizer(records, true), s2 = fit_standardizer(records, false);
  model.x1_mean = s1.mean;
  model.x1_scale = s1.scale;
  model.x2_mean = s2.mean;
  model.x2_scale = s2.scale;
  model.params = EncoderParams(records[0].x1.size(), records[0].x2.size(), k, cfg.hidden, cfg.embed_dim);

  std::mt19937_64 rng(cfg.seed);
  model.params.vision.initialize(rng);
  model.params.text.initialize(rng);

  Adam adam_v(model.params.vision.params().size(), cfg), adam_t(model.params.text.params().size(), cfg);
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<double> batch_losses;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const BatchInputs batch = make_batch(records, preds, labels, idx, model);
      EncoderParams grad = model.params;
      std::fill(grad.vision.params().begin(), grad.vision.params().end(), 0.0);
      std::fill(grad.text.params().begin(), grad.text.params().end(), 0.0);
      const double loss = batch_objective(model.params, batch, cfg.sinkhorn_iters, cfg.logit_clamp, &grad);
      bool finite = std::isfinite(loss);
      for (double g : grad.vision.params()) finite = finite && std::isfinite(g);
      for (double g : grad.text.params()) finite = finite && std::isfinite(g);
      if (!finite) {
        throw NumericError("train: loss or gradient diverged at epoch " + std::to_string(epoch + 1) + ", batch starting at " +
                           std::to_string(lo) + " (loss " + format_double(loss) + ")");
      }
      ++step;
      adam_v.step(model.params.vision.params(), grad.vision.params(), step);
      adam_t.step(model.params.text.params(), grad.text.params(), step);
      batch_losses.push_back(loss);
    }
    model.loss_trace.push_back(pairwise_sum(batch_losses) / static_cast<double>(batch_losses.size()));
  }

  round_all(model.params.vision.params());
  round_all(model.params.text.params());
  round_all(model.loss_trace);
  std::vector<RegularizedPrediction> mm;
  mm.reserve(preds.size());
  for (const auto& p : preds) mm.push_back(p.multimodal);
  const Pmf py = aggregate_marginal(mm);
  model.train_py.assign(py.probs().begin(), py.probs().end());
  round_all(model.train_py);
  model.train_count = records.size();
  model.data_digest = dataset_digest(records);
  return model;
}

CouplingModel train(std::span<const SampleRecord> records, const TrainConfig& cfg) {
  std::vector<ProbePredictions> preds;
  preds.reserve(records.size());
  for (const auto& r : records) preds.push_back(regularize_record(r, cfg.tau));
  const auto labels = draw_labels(preds, cfg.label_mode == LabelMode::Argmax ? LabelMode::Argmax : LabelMode::Sample,
                                  cfg.seed);
  return train(records, labels, cfg);
}

// ---------------------------------------------------------------- estimation

namespace {

double kl_bits(std::span<const double> p, std::span<const double> q) {
  double acc = 0.0;
  for (std::size_t y = 0; y < p.size(); ++y)
    if (p[y] > kZeroProb) acc += p[y] * std::log2(p[y] / std::max(q[y], kZeroProb));
  return std::max(0.0, acc);
}

}  // namespace

BatchEstimate estimate_atoms(const CouplingModel& model, std::span<const SampleRecord> test_records, unsigned threads) {
  if (test_records.empty()) throw DomainError("estimate_atoms: empty test set");
  const std::size_t n = test_records.size();
  const std::size_t k = common_label_count(test_records);
  if (k != model.labels) throw DomainError("estimate_atoms: test records have a different label count than the model");

  std::vector<ProbePredictions> preds(n);
  parallel_for(n, threads, [&](std::size_t i) { preds[i] = regularize_record(test_records[i], model.config.tau); });

  // P(Y) over the full evaluated pool: training aggregate plus test predictions.
  std::vector<double> py(k), column(n);
  const double n_train = static_cast<double>(model.train_count);
  for (std::size_t y = 0; y < k; ++y) {
    for (std::size_t i = 0; i < n; ++i) column[i] = preds[i].multimodal.probs[y];
    py[y] = (n_train * model.train_py[y] + pairwise_sum(column)) / (n_train + static_cast<double>(n));
  }

  std::vector<double> kl1(n), kl2(n), kl12(n);
  parallel_for(n, threads, [&](std::size_t i) {
    kl1[i] = kl_bits(preds[i].vision.probs.probs(), py);
    kl2[i] = kl_bits(preds[i].text.probs.probs(), py);
    kl12[i] = kl_bits(preds[i].multimodal.probs.probs(), py);
  });
  InfoTerms terms;
  terms.mi_x1 = pairwise_sum(kl1) / static_cast<double>(n);
  terms.mi_x2 = pairwise_sum(kl2) / static_cast<double>(n);
  terms.mi_joint = pairwise_sum(kl12) / static_cast<double>(n);

  std::vector<int> labels;
  if (model.config.label_mode != LabelMode::Soft) labels = draw_labels(preds, model.config.label_mode, model.config.seed + 1);
  const std::size_t bs = model.config.test_batch_size;
  const std::size_t batches = (n + bs - 1) / bs;
  std::vector<double> weighted(batches), residual(batches);
  parallel_for(batches, threads, [&](std::size_t b) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b * bs; i < std::min(n, (b + 1) * bs); ++i) idx.push_back(i);
    const BatchInputs batch = make_batch(test_records, preds, labels, idx, model);
    const SimilarityTensor a = build_similarity(model.params, batch.x1, batch.x2, model.config.logit_clamp);
    const ProjectedCoupling q = sinkhorn_project(a, batch.targets.rows, batch.targets.cols, model.config.sinkhorn_iters);
    weighted[b] = coupling_information(q.q) * static_cast<double>(idx.size());
    residual[b] = q.residual;
  });
  terms.mi_q = pairwise_sum(weighted) / static_cast<double>(n);

  BatchEstimate out;
  out.report = assemble_atoms(terms, false);
  out.max_sinkhorn_residual = *std::max_element(residual.begin(), residual.end());
  out.test_count = n;
  return out;
}

// ---------------------------------------------------------------- persistence

namespace {

constexpr char kMagic[8] = {'M', 'M', 'P', 'I', 'D', 'C', 'M', '1'};
constexpr std::uint32_t kModelVersion = 1;

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    u64(bits);
  }
  void f32_array(const std::vector<double>& values, const char* what) {
    u64(values.size());
    for (double v : values) {
      const float f = static_cast<float>(v);
      if (static_cast<double>(f) != v) {
        throw DomainError(std::string("save_model: ") + what + " is not float32-representable");
      }
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      u32(bits);
    }
  }
  std::vector<unsigned char> out;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> in) : in_(in) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::vector<double> f32_array(std::size_t expected, const char* what) {
    const std::uint64_t count = u64();
    if (count != expected) throw FormatError(std::string("model file: ") + what + " has unexpected length");
    return f32_values(count);
  }
  std::vector<double> f32_array_any(const char* what) {
    const std::uint64_t count = u64();
    if (count > (in_.size() - pos_) / 4) throw FormatError(std::string("model file: ") + what + " is truncated");
    return f32_values(count);
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::vector<double> f32_values(std::uint64_t count) {
    need(count * 4);
    std::vector<double> out(count);
    for (auto& v : out) {
      const std::uint32_t bits = u32();
      float f;
      std::memcpy(&f, &bits, sizeof f);
      v = f;
    }
    return out;
  }
  void need(std::size_t n) {
    if (in_.size() - pos_ < n) throw FormatError("model file is truncated");
  }
  std::span<const unsigned char> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> serialize_model(const CouplingModel& m) {
  Writer w;
  w.out.insert(w.out.end(), std::begin(kMagic), std::end(kMagic));
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(m.labels));
  w.u32(static_cast<std::uint32_t>(m.params.vision.input_dim()));
  w.u32(static_cast<std::uint32_t>(m.params.text.input_dim()));
  w.u32(static_cast<std::uint32_t>(m.config.hidden));
  w.u32(static_cast<std::uint32_t>(m.config.embed_dim));
  w.u64(m.config.seed);
  w.u64(m.config.digest());
  w.u64(m.data_digest);
  w.u64(m.train_count);
  const TrainConfig& c = m.config;
  w.f64(c.learning_rate);
  w.f64(c.beta1);
  w.f64(c.beta2);
  w.f64(c.adam_epsilon);
  w.u32(static_cast<std::uint32_t>(c.epochs));
  w.u64(c.batch_size);
  w.u64(c.test_batch_size);
  w.u32(static_cast<std::uint32_t>(c.sinkhorn_iters));
  w.f64(c.logit_clamp);
  w.f64(c.tau);
  w.u32(static_cast<std::uint32_t>(c.label_mode));
  w.f32_array(m.params.vision.params(), "vision encoder");
  w.f32_array(m.params.text.params(), "text encoder");
  w.f32_array(m.x1_mean, "x1 mean");
  w.f32_array(m.x1_scale, "x1 scale");
  w.f32_array(m.x2_mean, "x2 mean");
  w.f32_array(m.x2_scale, "x2 scale");
  w.f32_array(m.train_py, "training P(Y)");
  w.f32_array(m.loss_trace, "loss trace");
  return std::move(w.out);
}

CouplingModel deserialize_model(std::span<const unsigned char> bytes) {
  if (bytes.size() < sizeof kMagic || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw FormatError("not a coupling model file");
  }
  Reader r(bytes.subspan(sizeof kMagic));
  if (r.u32() != kModelVersion) throw FormatError("unsupported coupling model version");
  CouplingModel m;
  m.labels = r.u32();
  const std::size_t dim_x1 = r.u32(), dim_x2 = r.u32();
  TrainConfig& c = m.config;
  c.hidden = r.u32();
  c.embed_dim = r.u32();
  c.seed = r.u64();
  const std::uint64_t config_digest = r.u64();
  m.data_digest = r.u64();
  m.train_count = r.u64();
  c.learning_rate = r.f64();
  c.beta1 = r.f64();
  c.beta2 = r.f64();
  c.adam_epsilon = r.f64();
  c.epochs = static_cast<int>(r.u32());
  c.batch_size = r.u64();
  c.test_batch_size = r.u64();
  c.sinkhorn_iters = static_cast<int>(r.u32());
  c.logit_clamp = r.f64();
  c.tau = r.f64();
  const std::uint32_t mode = r.u32();
  if (mode > static_cast<std::uint32_t>(LabelMode::Argmax)) throw FormatError("model file: bad label mode");
  c.label_mode = static_cast<LabelMode>(mode);
  if (c.digest() != config_digest) throw FormatError("model file: config digest mismatch");
  if (m.labels < kMinOptions || m.labels > kMaxOptions || dim_x1 == 0 || dim_x2 == 0 || c.hidden == 0 ||
      c.embed_dim == 0) {
    throw FormatError("model file: invalid dimensions");
  }
  m.params = EncoderParams(dim_x1, dim_x2, m.labels, c.hidden, c.embed_dim);
  m.params.vision.params() = r.f32_array(m.params.vision.params().size(), "vision encoder");
  m.params.text.params() = r.f32_array(m.params.text.params().size(), "text encoder");
  m.x1_mean = r.f32_array(dim_x1, "x1 mean");
  m.x1_scale = r.f32_array(dim_x1, "x1 scale");
  m.x2_mean = r.f32_array(dim_x2, "x2 mean");
  m.x2_scale = r.f32_array(dim_x2, "x2 scale");
  m.train_py = r.f32_array(m.labels, "training P(Y)");
  m.loss_trace = r.f32_array_any("loss trace");
  if (!r.done()) throw FormatError("model file: trailing bytes");
  return m;
}

void save_model(const std::filesystem::path& path, const CouplingModel& model) {
  const auto bytes = serialize_model(model);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

CouplingModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

std::uint64_t model_digest(const CouplingModel& model) {
  const auto bytes = serialize_model(model);
  return Fnv1a().bytes(bytes.data(), bytes.size()).value();
}

}  // namespace mmpid

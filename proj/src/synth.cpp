#include "mmpid/synth.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "mmpid/error.hpp"
#include "mmpid/numeric.hpp"

namespace mmpid {

std::string to_string(Gate g) {
  switch (g) {
    case Gate::Xor: return "xor";
    case Gate::And: return "and";
    case Gate::Or: return "or";
    case Gate::Copy: return "copy";
    case Gate::Unq1: return "unq1";
    case Gate::Unq2: return "unq2";
  }
  return "xor";
}

Gate parse_gate(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  for (Gate g : {Gate::Xor, Gate::And, Gate::Or, Gate::Copy, Gate::Unq1, Gate::Unq2})
    if (to_string(g) == l) return g;
  throw DomainError("unknown gate '" + s + "' (expected xor, and, or, copy, unq1, unq2)");
}

std::string to_string(Structure s) {
  switch (s) {
    case Structure::Synergy: return "synergy";
    case Structure::Redundancy: return "redundancy";
    case Structure::Unique1: return "unique1";
    case Structure::Unique2: return "unique2";
    case Structure::Independent: return "independent";
  }
  return "synergy";
}

Structure parse_structure(const std::string& s) {
  for (Structure v : {Structure::Synergy, Structure::Redundancy, Structure::Unique1, Structure::Unique2,
                      Structure::Independent})
    if (to_string(v) == s) return v;
  throw DomainError("unknown structure '" + s + "'");
}

// ---------------------------------------------------------------- gates

namespace {

int gate_output(Gate g, int a, int b) {
  switch (g) {
    case Gate::Xor: return a ^ b;
    case Gate::And: return a & b;
    case Gate::Or: return a | b;
    case Gate::Copy: return a;
    case Gate::Unq1: return a;
    case Gate::Unq2: return b;
  }
  return 0;
}

}  // namespace

JointPmf gate_joint(const GateSpec& spec) {
  if (!(spec.flip_noise >= 0.0 && spec.flip_noise < 0.5)) throw DomainError("gate_joint: flip_noise must be in [0, 0.5)");
  std::vector<double> t(8, 0.0);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      double mass = 0.25;
      if (spec.gate == Gate::Copy) mass = a == b ? 0.5 : 0.0;
      if (mass == 0.0) continue;
      const int y = gate_output(spec.gate, a, b);
      t[static_cast<std::size_t>((a * 2 + b) * 2 + y)] += mass * (1.0 - spec.flip_noise);
      t[static_cast<std::size_t>((a * 2 + b) * 2 + (1 - y))] += mass * spec.flip_noise;
    }
  return JointPmf(2, 2, 2, std::move(t));
}

JointPmf sample_gate_joint(const GateSpec& spec) {
  if (spec.n_samples == 0) return gate_joint(spec);
  const JointPmf exact = gate_joint(spec);
  std::mt19937_64 rng(spec.seed);
  std::discrete_distribution<std::size_t> cell(exact.table().begin(), exact.table().end());
  std::vector<double> counts(8, 0.0);
  for (std::size_t i = 0; i < spec.n_samples; ++i) counts[cell(rng)] += 1.0;
  return JointPmf::from_weights(2, 2, 2, std::move(counts));
}

// ---------------------------------------------------------------- oracle

namespace {

constexpr std::size_t kMaxOracleAxis = 4;
constexpr int kRefinements = 2;

// Direct plug-in I(X1,X2;Y) in bits on an unvalidated table.
double objective_bits(const std::vector<double>& q, std::size_t n1, std::size_t n2, std::size_t k) {
  std::vector<double> py(k, 0.0), pxx(n1 * n2, 0.0);
  for (std::size_t c = 0; c < n1 * n2; ++c)
    for (std::size_t y = 0; y < k; ++y) {
      py[y] += q[c * k + y];
      pxx[c] += q[c * k + y];
    }
  double total = 0.0;
  for (std::size_t c = 0; c < n1 * n2; ++c)
    for (std::size_t y = 0; y < k; ++y) {
      const double v = q[c * k + y];
      if (v > 0.0) total += v * std::log2(v / (pxx[c] * py[y]));
    }
  return total;
}

struct LabelBlock {
  std::size_t y = 0;
  double mass = 0.0;
  std::vector<std::size_t> rows, cols;  // supports
  std::vector<double> a, b;             // conditional marginals on the full axes
};

// Grid of `points` values over [lo, hi] (endpoints included).
std::vector<double> grid(double lo, double hi, std::size_t intervals) {
  std::vector<double> g(intervals + 1);
  for (std::size_t i = 0; i <= intervals; ++i) g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(intervals);
  g.back() = hi;
  return g;
}

// Minimizes f over the box by a dense grid followed by local refinements.
// Each refinement searches +-one previous spacing at a 10x finer spacing.
std::vector<double> grid_minimize(const std::vector<std::pair<double, double>>& box, std::size_t resolution,
                                  const std::function<double(const std::vector<double>&)>& f) {
  const std::size_t dims = box.size();
  std::vector<double> best(dims);
  for (std::size_t d = 0; d < dims; ++d) best[d] = 0.5 * (box[d].first + box[d].second);
  if (dims == 0) return best;
  double best_value = std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, double>> window = box;
  std::vector<double> spacing(dims);
  for (std::size_t d = 0; d < dims; ++d) spacing[d] = (box[d].second - box[d].first) / static_cast<double>(resolution);
  std::size_t intervals = resolution;

  for (int round = 0; round <= kRefinements; ++round) {
    std::vector<std::vector<double>> axes(dims);
    for (std::size_t d = 0; d < dims; ++d) axes[d] = grid(window[d].first, window[d].second, intervals);
    std::vector<std::size_t> idx(dims, 0);
    std::vector<double> point(dims);
    while (true) {
      for (std::size_t d = 0; d < dims; ++d) point[d] = axes[d][idx[d]];
      const double v = f(point);
      if (v < best_value) {
        best_value = v;
        best = point;
      }
      std::size_t d = 0;
      while (d < dims && ++idx[d] == axes[d].size()) idx[d++] = 0;
      if (d == dims) break;
    }
    for (std::size_t d = 0; d < dims; ++d) {
      window[d] = {std::max(box[d].first, best[d] - spacing[d]), std::min(box[d].second, best[d] + spacing[d])};
      spacing[d] /= 10.0;
    }
    intervals = 20;
  }
  return best;
}

}  // namespace

OracleResult brute_force_search(const JointPmf& p, std::size_t grid_resolution) {
  const std::size_t n1 = p.n1(), n2 = p.n2(), k = p.k();
  if (n1 > kMaxOracleAxis || n2 > kMaxOracleAxis || k > kMaxOracleAxis) {
    throw CapabilityError("brute_force_pid: exhaustive oracle supports at most 4x4x4 tables");
  }
  if (grid_resolution < 2) throw DomainError("brute_force_pid: grid_resolution must be >= 2");

  const auto x1y = p.marginal2(Axis::X1, Axis::Y);
  const auto x2y = p.marginal2(Axis::X2, Axis::Y);
  const Pmf py = p.marginal(Axis::Y);

  std::vector<LabelBlock> blocks;
  std::size_t free_coords = 0;
  bool all_two_by_two = true;
  for (std::size_t y = 0; y < k; ++y) {
    if (py[y] <= kZeroProb) continue;
    LabelBlock blk;
    blk.y = y;
    blk.mass = py[y];
    blk.a.assign(n1, 0.0);
    blk.b.assign(n2, 0.0);
    for (std::size_t r = 0; r < n1; ++r) {
      blk.a[r] = x1y[r * k + y] / py[y];
      if (blk.a[r] > kZeroProb) blk.rows.push_back(r);
    }
    for (std::size_t c = 0; c < n2; ++c) {
      blk.b[c] = x2y[c * k + y] / py[y];
      if (blk.b[c] > kZeroProb) blk.cols.push_back(c);
    }
    const std::size_t f = (blk.rows.size() - 1) * (blk.cols.size() - 1);
    free_coords += f;
    if (f > 1) all_two_by_two = false;
    blocks.push_back(std::move(blk));
  }

  // Per-label couplings (n1 x n2), starting from the product coupling.
  std::vector<std::vector<double>> coupling(k, std::vector<double>(n1 * n2, 0.0));
  for (const auto& blk : blocks)
    for (std::size_t r : blk.rows)
      for (std::size_t c : blk.cols) coupling[blk.y][r * n2 + c] = blk.a[r] * blk.b[c];

  auto table_of = [&](const std::vector<std::vector<double>>& cpl) {
    std::vector<double> q(n1 * n2 * k, 0.0);
    for (const auto& blk : blocks)
      for (std::size_t cell = 0; cell < n1 * n2; ++cell) q[cell * k + blk.y] = blk.mass * cpl[blk.y][cell];
    return q;
  };

  if (all_two_by_two && free_coords <= 2) {
    // Each free label is a 2x2 support with one coordinate t = C(r0, c0).
    std::vector<const LabelBlock*> free_blocks;
    std::vector<std::pair<double, double>> box;
    for (const auto& blk : blocks) {
      if (blk.rows.size() != 2 || blk.cols.size() != 2) continue;
      const double a0 = blk.a[blk.rows[0]], b0 = blk.b[blk.cols[0]];
      free_blocks.push_back(&blk);
      box.emplace_back(std::max(0.0, a0 + b0 - 1.0), std::min(a0, b0));
    }
    auto set_coords = [&](std::vector<std::vector<double>>& cpl, const std::vector<double>& t) {
      for (std::size_t i = 0; i < free_blocks.size(); ++i) {
        const LabelBlock& blk = *free_blocks[i];
        const std::size_t r0 = blk.rows[0], r1 = blk.rows[1], c0 = blk.cols[0], c1 = blk.cols[1];
        const double a0 = blk.a[r0], b0 = blk.b[c0];
        auto& c = cpl[blk.y];
        c[r0 * n2 + c0] = t[i];
        c[r0 * n2 + c1] = std::max(0.0, a0 - t[i]);
        c[r1 * n2 + c0] = std::max(0.0, b0 - t[i]);
        c[r1 * n2 + c1] = std::max(0.0, 1.0 - a0 - b0 + t[i]);
      }
    };
    auto work = coupling;
    const auto best = grid_minimize(box, grid_resolution, [&](const std::vector<double>& t) {
      set_coords(work, t);
      return objective_bits(table_of(work), n1, n2, k);
    });
    set_coords(coupling, best);
  } else {
    // Cyclic line searches along 2x2 cycle moves of each label's polytope.
    double current = objective_bits(table_of(coupling), n1, n2, k);
    for (int sweep = 0; sweep < 500; ++sweep) {
      const double sweep_start = current;
      for (const auto& blk : blocks) {
        auto& c = coupling[blk.y];
        for (std::size_t i1 = 0; i1 < blk.rows.size(); ++i1)
          for (std::size_t i2 = i1 + 1; i2 < blk.rows.size(); ++i2)
            for (std::size_t j1 = 0; j1 < blk.cols.size(); ++j1)
              for (std::size_t j2 = j1 + 1; j2 < blk.cols.size(); ++j2) {
                const std::size_t pp = blk.rows[i1] * n2 + blk.cols[j1], qq = blk.rows[i2] * n2 + blk.cols[j2];
                const std::size_t pm = blk.rows[i1] * n2 + blk.cols[j2], mp = blk.rows[i2] * n2 + blk.cols[j1];
                const double lo = -std::min(c[pp], c[qq]);
                const double hi = std::min(c[pm], c[mp]);
                if (hi - lo < 1e-15) continue;
                const std::vector<double> base = c;
                auto moved = coupling;
                const auto t = grid_minimize({{lo, hi}}, grid_resolution, [&](const std::vector<double>& s) {
                  auto& m = moved[blk.y];
                  m = base;
                  m[pp] = std::max(0.0, base[pp] + s[0]);
                  m[qq] = std::max(0.0, base[qq] + s[0]);
                  m[pm] = std::max(0.0, base[pm] - s[0]);
                  m[mp] = std::max(0.0, base[mp] - s[0]);
                  return objective_bits(table_of(moved), n1, n2, k);
                });
                auto& m = moved[blk.y];
                m = base;
                m[pp] = std::max(0.0, base[pp] + t[0]);
                m[qq] = std::max(0.0, base[qq] + t[0]);
                m[pm] = std::max(0.0, base[pm] - t[0]);
                m[mp] = std::max(0.0, base[mp] - t[0]);
                const double value = objective_bits(table_of(moved), n1, n2, k);
                if (value < current - 1e-15) {
                  current = value;
                  c = m;
                }
              }
      }
      if (sweep_start - current < 1e-12) break;
    }
  }

  OracleResult out{JointPmf::from_weights(n1, n2, k, table_of(coupling)), {}};
  if (objective_bits(std::vector<double>(p.table().begin(), p.table().end()), n1, n2, k) <
      objective_bits(std::vector<double>(out.q.table().begin(), out.q.table().end()), n1, n2, k)) {
    out.q = p;
  }
  out.report = evaluate_atoms(p, out.q);
  return out;
}

PidAtoms brute_force_pid(const JointPmf& p, std::size_t grid_resolution) {
  return brute_force_search(p, grid_resolution).report.atoms;
}

// ---------------------------------------------------------------- continuous

namespace {

// Prior over latent bits (b1, b2) and P(y = 1 | b1, b2) for each structure.
struct LatentModel {
  double prior[2][2];
  double p_y1[2][2];
};

LatentModel latent_model(Structure s) {
  LatentModel m{};
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      m.prior[a][b] = s == Structure::Redundancy ? (a == b ? 0.5 : 0.0) : 0.25;
      switch (s) {
        case Structure::Synergy: m.p_y1[a][b] = (a ^ b) ? 1.0 : 0.0; break;
        case Structure::Redundancy:
        case Structure::Unique1: m.p_y1[a][b] = a ? 1.0 : 0.0; break;
        case Structure::Unique2: m.p_y1[a][b] = b ? 1.0 : 0.0; break;
        case Structure::Independent: m.p_y1[a][b] = 0.5; break;
      }
    }
  return m;
}

// Posterior-weighted P(y | evidence); log-likelihoods per bit state given per source
// (zeros when the source is unobserved).
std::vector<double> label_posterior(const LatentModel& m, const double ll1[2], const double ll2[2]) {
  double logw[2][2];
  double mx = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      logw[a][b] = m.prior[a][b] > 0.0 ? std::log(m.prior[a][b]) + ll1[a] + ll2[b]
                                       : -std::numeric_limits<double>::infinity();
      mx = std::max(mx, logw[a][b]);
    }
  double z = 0.0, y1 = 0.0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      const double w = std::exp(logw[a][b] - mx);
      z += w;
      y1 += w * m.p_y1[a][b];
    }
  const double p1 = std::clamp(y1 / z, 0.0, 1.0);
  return {1.0 - p1, p1};
}

}  // namespace

RecordSet gen_continuous(const ContinuousSpec& spec) {
  if (spec.dim == 0) throw DomainError("gen_continuous: dim must be >= 1");
  if (!(spec.cluster_separation >= 0.0) || !std::isfinite(spec.cluster_separation)) {
    throw DomainError("gen_continuous: cluster_separation must be finite and >= 0");
  }
  const LatentModel model = latent_model(spec.structure);
  const double half = spec.cluster_separation / 2.0;

  RecordSet set;
  set.manifest.dataset = "synthetic-" + to_string(spec.structure);
  set.manifest.k = 2;
  set.manifest.dim_x1 = spec.dim;
  set.manifest.dim_x2 = spec.dim;
  set.manifest.pooling = PoolingMode::Mean;
  set.manifest.model = "generator";
  set.manifest.exporter_version = "mmpid-synth/1";

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double cells[4] = {model.prior[0][0], model.prior[0][1], model.prior[1][0], model.prior[1][1]};
  std::discrete_distribution<int> latent(std::begin(cells), std::end(cells));

  set.records.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    const int cell = latent(rng);
    const int b1 = cell / 2, b2 = cell % 2;
    const int y = unit(rng) < model.p_y1[b1][b2] ? 1 : 0;
    SampleRecord r;
    r.id = to_string(spec.structure) + "-" + std::to_string(i);
    r.dataset = set.manifest.dataset;
    r.model = set.manifest.model;
    r.x1.resize(spec.dim);
    r.x2.resize(spec.dim);
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t d = 0; d < spec.dim; ++d) {
      r.x1[d] = (b1 ? half : -half) + noise(rng);
      s1 += r.x1[d];
    }
    for (std::size_t d = 0; d < spec.dim; ++d) {
      r.x2[d] = (b2 ? half : -half) + noise(rng);
      s2 += r.x2[d];
    }
    // Log-likelihood of each bit state up to a shared constant.
    const double ll1[2] = {-half * s1, half * s1};
    const double ll2[2] = {-half * s2, half * s2};
    const double none[2] = {0.0, 0.0};
    r.scores_mm = label_posterior(model, ll1, ll2);
    r.scores_v = label_posterior(model, ll1, none);
    r.scores_t = label_posterior(model, none, ll2);
    r.gold = y;
    r.pred = static_cast<int>(argmax(r.scores_mm));
    r.pred_text = static_cast<int>(argmax(r.scores_t));
    set.records.push_back(std::move(r));
  }
  return set;
}

JointPmf discretize_records(std::span<const SampleRecord> records) {
  if (records.empty()) throw DomainError("discretize_records: no records");
  std::size_t k = 0;
  for (const auto& r : records) {
    if (!r.gold) throw DomainError("discretize_records: record " + r.id + " has no gold label");
    k = std::max(k, r.options());
  }
  auto bins = [&](bool vision) {
    const std::size_t dim = vision ? records[0].x1.size() : records[0].x2.size();
    std::vector<double> median(dim);
    std::vector<double> column(records.size());
    for (std::size_t d = 0; d < dim; ++d) {
      for (std::size_t i = 0; i < records.size(); ++i) column[i] = vision ? records[i].x1[d] : records[i].x2[d];
      std::sort(column.begin(), column.end());
      const std::size_t n = column.size();
      median[d] = n % 2 ? column[n / 2] : 0.5 * (column[n / 2 - 1] + column[n / 2]);
    }
    std::vector<std::size_t> out(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& x = vision ? records[i].x1 : records[i].x2;
      if (x.size() != dim) throw DomainError("discretize_records: feature dimension mismatch");
      std::size_t above = 0;
      for (std::size_t d = 0; d < dim; ++d) above += x[d] > median[d];
      out[i] = 2 * above > dim ? 1 : 0;
    }
    return out;
  };
  const auto b1 = bins(true);
  const auto b2 = bins(false);
  std::vector<double> counts(2 * 2 * k, 0.0);
  for (std::size_t i = 0; i < records.size(); ++i) {
    counts[(b1[i] * 2 + b2[i]) * k + static_cast<std::size_t>(*records[i].gold)] += 1.0;
  }
  return JointPmf::from_weights(2, 2, k, std::move(counts));
}

}  // namespace mmpid

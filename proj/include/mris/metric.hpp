#pragma once

// Cosine feature distance, the subject-aware triplet loss in both its
// longitudinal and one-timepoint-per-subject forms, and epoch sampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mris/errors.hpp"

namespace mris {

enum class Reduction { sum, mean };

struct LossConfig {
  double margin = 0.1;
  Reduction reduction = Reduction::sum;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void check_pair(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw DimensionError("cosine_distance: length mismatch");
  if (u.size() < 2)
    throw DimensionError("cosine_distance: vectors need length >= 2");
}

} // namespace detail

/// 1 - u.v / (|u||v|), clamped to [0, 2].
inline double cosine_distance(std::span<const double> u,
                              std::span<const double> v) {
  detail::check_pair(u, v);
  const double nu = std::sqrt(detail::dot(u, u));
  const double nv = std::sqrt(detail::dot(v, v));
  if (!std::isfinite(nu) || !std::isfinite(nv))
    throw NumericError("cosine_distance: non-finite input");
  if (nu == 0.0 || nv == 0.0)
    throw DegenerateInputError("cosine_distance: zero-norm vector");
  const double d = 1.0 - detail::dot(u, v) / (nu * nv);
  return std::clamp(d, 0.0, 2.0);
}

/// Distance together with its gradient with respect to both arguments.
struct DistanceGrad {
  double distance = 0.0;
  std::vector<double> d_u;
  std::vector<double> d_v;
};

// d/du [1 - cos] = -(v_hat - cos * u_hat) / |u|, and symmetrically for v.
// The returned distance is unclamped so value and gradient stay consistent.
inline DistanceGrad cosine_distance_grad(std::span<const double> u,
                                         std::span<const double> v) {
  detail::check_pair(u, v);
  const double nu = std::sqrt(detail::dot(u, u));
  const double nv = std::sqrt(detail::dot(v, v));
  if (!std::isfinite(nu) || !std::isfinite(nv))
    throw NumericError("cosine_distance: non-finite input");
  if (nu == 0.0 || nv == 0.0)
    throw DegenerateInputError("cosine_distance: zero-norm vector");
  const double cos = detail::dot(u, v) / (nu * nv);
  DistanceGrad g;
  g.distance = 1.0 - cos;
  g.d_u.resize(u.size());
  g.d_v.resize(v.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    g.d_u[i] = -(v[i] / nv - cos * u[i] / nu) / nu;
    g.d_v[i] = -(u[i] / nu - cos * v[i] / nv) / nv;
  }
  return g;
}

inline double triplet_term(double d_pos, double d_neg, double margin) {
  if (!std::isfinite(d_pos) || !std::isfinite(d_neg) || !std::isfinite(margin))
    throw NumericError("triplet_term: non-finite input");
  return std::max(d_pos - d_neg + margin, 0.0);
}

/// N aligned (query, target) embedding pairs. Index a is the matching pair.
struct EmbeddingPairBatch {
  std::vector<std::vector<double>> query_embeddings;
  std::vector<std::vector<double>> target_embeddings;
  std::vector<std::string> subject_ids;
};

struct TripletLossResult {
  double loss = 0.0;
  std::vector<std::vector<double>> query_grads;
  std::vector<std::vector<double>> target_grads;
  std::size_t terms = 0;        // ordered (anchor, negative) pairs evaluated
  std::size_t active_terms = 0; // terms with a positive hinge
  double min_abs_hinge = 0.0;   // distance of the nearest term to the kink
};

namespace detail {

inline std::vector<std::vector<double>> zeros_like(
    const std::vector<std::vector<double>>& v) {
  std::vector<std::vector<double>> out;
  out.reserve(v.size());
  for (const auto& x : v) out.emplace_back(x.size(), 0.0);
  return out;
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

// Shared core: anchors on queries; `may_pair(a, b)` selects admissible
// negatives. Hinge subgradient at exactly zero is taken as 0.
template <class MayPair>
TripletLossResult triplet_core(const EmbeddingPairBatch& batch,
                               const LossConfig& cfg, MayPair may_pair) {
  const std::size_t n = batch.query_embeddings.size();
  TripletLossResult r;
  r.query_grads = zeros_like(batch.query_embeddings);
  r.target_grads = zeros_like(batch.target_embeddings);
  r.min_abs_hinge = std::numeric_limits<double>::infinity();

  for (std::size_t a = 0; a < n; ++a) {
    const auto& q = batch.query_embeddings[a];
    const auto pos = cosine_distance_grad(q, batch.target_embeddings[a]);
    for (std::size_t b = 0; b < n; ++b) {
      if (b == a || !may_pair(a, b)) continue;
      const auto neg = cosine_distance_grad(q, batch.target_embeddings[b]);
      const double h = pos.distance - neg.distance + cfg.margin;
      ++r.terms;
      r.min_abs_hinge = std::min(r.min_abs_hinge, std::abs(h));
      if (h <= 0.0) continue;
      ++r.active_terms;
      r.loss += h;
      axpy(1.0, pos.d_u, r.query_grads[a]);
      axpy(-1.0, neg.d_u, r.query_grads[a]);
      axpy(1.0, pos.d_v, r.target_grads[a]);
      axpy(-1.0, neg.d_v, r.target_grads[b]);
    }
  }
  if (cfg.reduction == Reduction::mean && r.terms > 0) {
    const double s = 1.0 / static_cast<double>(r.terms);
    r.loss *= s;
    for (auto& g : r.query_grads)
      for (auto& x : g) x *= s;
    for (auto& g : r.target_grads)
      for (auto& x : g) x *= s;
  }
  return r;
}

inline void check_batch_shape(const EmbeddingPairBatch& batch) {
  const auto n = batch.query_embeddings.size();
  if (batch.target_embeddings.size() != n || batch.subject_ids.size() != n)
    throw DimensionError("embedding batch: query/target/id counts differ");
}

} // namespace detail

/// Standard form: every sample in the batch belongs to a distinct subject.
inline TripletLossResult triplet_loss_batch(const EmbeddingPairBatch& batch,
                                            const LossConfig& cfg = {}) {
  detail::check_batch_shape(batch);
  const auto n = batch.query_embeddings.size();
  if (n < 2)
    throw ConstraintError("triplet_loss_batch: need at least 2 pairs");
  std::set<std::string> seen;
  for (const auto& id : batch.subject_ids)
    if (!seen.insert(id).second)
      throw ConstraintError("triplet_loss_batch: subject '" + id +
                            "' appears twice in one batch");
  return detail::triplet_core(batch, cfg, [](std::size_t, std::size_t) { return true; });
}

/// Longitudinal form: several timepoints per subject may share the batch;
/// samples of the same subject are never used as each other's negatives.
inline TripletLossResult triplet_loss_longitudinal(const EmbeddingPairBatch& batch,
                                                   const LossConfig& cfg = {}) {
  detail::check_batch_shape(batch);
  std::set<std::string> subjects(batch.subject_ids.begin(), batch.subject_ids.end());
  if (subjects.size() < 2)
    throw ConstraintError("triplet_loss_longitudinal: need at least 2 distinct subjects");
  const auto& ids = batch.subject_ids;
  return detail::triplet_core(
      batch, cfg, [&ids](std::size_t a, std::size_t b) { return ids[a] != ids[b]; });
}

/// Subject -> sample ids of its timepoints. Ordered by subject id.
using SubjectIndex = std::map<std::string, std::vector<std::size_t>>;

struct BatchPlan {
  std::size_t epoch = 0;
  std::vector<std::vector<std::size_t>> batches;
};

/// One uniformly drawn timepoint per subject, subjects shuffled, cut into
/// consecutive batches. A trailing batch of one sample is dropped since it
/// has no negative. The draw depends only on (seed, epoch).
inline BatchPlan sample_epoch(const SubjectIndex& index, std::size_t batch_size,
                              std::uint64_t seed, std::size_t epoch = 0) {
  if (batch_size < 2)
    throw ConfigError("sample_epoch: batch_size must be >= 2");
  if (index.size() < 2)
    throw ConstraintError("sample_epoch: need at least 2 subjects");

  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch),
                    static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);

  std::vector<std::size_t> picks;
  picks.reserve(index.size());
  for (const auto& [subject, samples] : index) {
    if (samples.empty())
      throw ConstraintError("sample_epoch: subject '" + subject + "' has no samples");
    std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
    picks.push_back(samples[pick(rng)]);
  }
  std::shuffle(picks.begin(), picks.end(), rng);

  BatchPlan plan;
  plan.epoch = epoch;
  for (std::size_t start = 0; start < picks.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, picks.size());
    if (end - start < 2) break;
    plan.batches.emplace_back(picks.begin() + static_cast<std::ptrdiff_t>(start),
                              picks.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return plan;
}

} // namespace mris

#pragma once

// Weighted k-NN regression over the embedding database.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mris/embedding_db.hpp"
#include "mris/errors.hpp"
#include "mris/numerics.hpp"

namespace mris {

struct SynthesisConfig {
  std::size_t k = 20;
};

/// Which branch of the weighting rule produced the weights.
enum class WeightPolicy {
  similarity,       // all similarities positive, used as-is
  clamped,          // some negative similarities were clamped to zero
  uniform_fallback, // no positive similarity: uniform weights
};

inline std::string to_string(WeightPolicy p) {
  switch (p) {
  case WeightPolicy::similarity: return "similarity";
  case WeightPolicy::clamped: return "clamped";
  case WeightPolicy::uniform_fallback: return "uniform_fallback";
  }
  return "?";
}

struct SynthesisWeights {
  std::vector<double> weights;
  WeightPolicy policy = WeightPolicy::similarity;
};

/// w_i = s_i / sum(s) with s_i = max(1 - d_i, 0); uniform when sum(s) == 0.
inline SynthesisWeights synthesis_weights(std::span<const double> distances) {
  if (distances.empty())
    throw DataError("synthesis_weights: no distances");
  SynthesisWeights out;
  out.weights.resize(distances.size());
  double total = 0.0;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    if (!std::isfinite(distances[i]))
      throw NumericError("synthesis_weights: non-finite distance");
    const double s = 1.0 - distances[i];
    if (s < 0.0) out.policy = WeightPolicy::clamped;
    out.weights[i] = std::max(s, 0.0);
    total += out.weights[i];
  }
  if (total > 0.0) {
    for (auto& w : out.weights) w /= total;
  } else {
    out.policy = WeightPolicy::uniform_fallback;
    std::fill(out.weights.begin(), out.weights.end(),
              1.0 / static_cast<double>(distances.size()));
  }
  return out;
}

struct SynthesisResult {
  std::vector<double> image;
  NeighborSet neighbors;
  std::vector<double> weights;
  WeightPolicy policy = WeightPolicy::similarity;
  std::vector<std::string> warnings;
};

/// Synthesis from an already-computed query embedding.
inline SynthesisResult synthesize_from_embedding(std::span<const double> query_embedding,
                                                 const EmbeddingDatabase& db,
                                                 const SynthesisConfig& cfg) {
  if (cfg.k == 0) throw ConfigError("synthesize: k must be >= 1");
  SynthesisResult r;
  if (cfg.k > db.size())
    r.warnings.push_back("k=" + std::to_string(cfg.k) + " exceeds database size " +
                         std::to_string(db.size()) + "; truncated");
  r.neighbors = db.knn_query(query_embedding, cfg.k);
  std::vector<double> distances;
  distances.reserve(r.neighbors.size());
  for (const auto& n : r.neighbors) distances.push_back(n.distance);
  auto w = synthesis_weights(distances);
  r.weights = std::move(w.weights);
  r.policy = w.policy;

  r.image.assign(db.shape().pixels(), 0.0);
  for (std::size_t i = 0; i < r.neighbors.size(); ++i) {
    const auto target = db.target(r.neighbors[i].index);
    const double wi = r.weights[i];
    for (std::size_t p = 0; p < r.image.size(); ++p)
      r.image[p] += wi * static_cast<double>(target[p]);
  }
  return r;
}

template <class Real>
SynthesisResult synthesize(std::span<const double> query_features,
                           const EncoderParams<Real>& query_encoder,
                           const EmbeddingDatabase& db, const SynthesisConfig& cfg) {
  if (db.empty()) throw DataError("synthesize: empty database");
  if (query_encoder.output_dim() != db.dim())
    throw DimensionError("synthesize: encoder output dim " +
                         std::to_string(query_encoder.output_dim()) +
                         " != database dim " + std::to_string(db.dim()));
  const auto embedding = encoder_forward(query_encoder, query_features).output;
  return synthesize_from_embedding(embedding, db, cfg);
}

} // namespace mris

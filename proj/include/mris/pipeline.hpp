#pragma once

// End-to-end composition over a Dataset: per-channel-group encoder pairs and
// databases, merged synthesis, and the three evaluation protocols.

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "mris/datakit.hpp"
#include "mris/embedding_db.hpp"
#include "mris/evaluation.hpp"
#include "mris/synthesis.hpp"
#include "mris/training.hpp"

namespace mris {

/// Everything needed to synthesize one channel group.
struct GroupModel {
  ChannelGroup group;
  EncoderParams<float> query_encoder;
  EncoderParams<float> target_encoder;
  EmbeddingDatabase db;
};

struct MergedSynthesis {
  std::vector<double> image; // full H*W image, normalized target units
  std::vector<SynthesisResult> groups;
};

/// Runs every group's query encoder and k-NN regression and stitches the
/// group rows back into one image.
inline MergedSynthesis synthesize_sample(const PairedSample& sample, ImageShape shape,
                                         std::span<const GroupModel> models,
                                         const SynthesisConfig& cfg, bool normalize_query) {
  MergedSynthesis out;
  out.image.assign(shape.pixels(), 0.0);
  const auto x = query_input(sample, normalize_query);
  for (const auto& m : models) {
    auto r = synthesize(x, m.query_encoder, m.db, cfg);
    std::copy(r.image.begin(), r.image.end(),
              out.image.begin() + static_cast<std::ptrdiff_t>(m.group.row_begin * shape.width));
    out.groups.push_back(std::move(r));
  }
  return out;
}

/// Recall of each test subject's baseline target among all test baselines,
/// one report per channel group.
inline RecallReport evaluate_recall(const Dataset& ds, const GroupModel& model,
                                    bool normalize_query,
                                    std::vector<std::size_t> ks = {1, 5, 10, 20}) {
  const auto ids = ds.baseline_samples(Split::test);
  const auto db = build_database(ds, ids, model.target_encoder, model.group);
  std::vector<RecallQuery> queries;
  for (auto i : ids) {
    const auto& s = ds.samples[i];
    queries.push_back({s.id(), embed(model.query_encoder, query_input(s, normalize_query))});
  }
  return recall_at_k(queries, db, std::move(ks));
}

/// Synthesizes every sample in `ids` and compares against the stored
/// targets in denormalized units.
inline ErrorReport synthesis_error_report(const Dataset& ds, std::span<const std::size_t> ids,
                                          std::span<const GroupModel> models,
                                          const SynthesisConfig& cfg, bool normalize_query) {
  std::vector<ErrorCase> cases;
  for (auto i : ids) {
    const auto& s = ds.samples[i];
    const auto syn = synthesize_sample(s, ds.shape, models, cfg, normalize_query);
    cases.push_back({denormalize_target(syn.image), to_double(s.target), s.stratum_label});
  }
  return error_report(cases);
}

/// Baseline: uniform average of k database targets drawn at random.
inline ErrorReport random_neighbor_error_report(const Dataset& ds,
                                                std::span<const std::size_t> db_ids,
                                                std::span<const std::size_t> test_ids,
                                                std::size_t k, std::uint64_t seed) {
  if (db_ids.empty()) throw DataError("random baseline: empty database");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> pool(db_ids.begin(), db_ids.end());
  const auto take = std::min(k, pool.size());
  std::vector<ErrorCase> cases;
  for (auto i : test_ids) {
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<double> pred(ds.shape.pixels(), 0.0);
    for (std::size_t j = 0; j < take; ++j) {
      const auto& t = ds.samples[pool[j]].target;
      for (std::size_t p = 0; p < pred.size(); ++p)
        pred[p] += static_cast<double>(t[p]) / static_cast<double>(take);
    }
    cases.push_back({std::move(pred), to_double(ds.samples[i].target), ds.samples[i].stratum_label});
  }
  return error_report(cases);
}

/// Probe inputs for one split: synthesized and ground-truth images (both in
/// normalized units) with the stratum label.
inline ProbeSplit probe_split(const Dataset& ds, std::span<const std::size_t> ids,
                              std::span<const GroupModel> models, const SynthesisConfig& cfg,
                              bool normalize_query) {
  ProbeSplit out;
  for (auto i : ids) {
    const auto& s = ds.samples[i];
    out.synthesized.push_back(synthesize_sample(s, ds.shape, models, cfg, normalize_query).image);
    out.ground_truth.push_back(normalize_target(to_double(s.target)));
    out.labels.push_back(s.stratum_label);
  }
  return out;
}

} // namespace mris

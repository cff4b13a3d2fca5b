#pragma once

// Two-encoder metric learning: per-epoch subject sampling, triplet loss on
// the query/target embeddings, backprop through both encoders, AdamW.

#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "mris/datakit.hpp"
#include "mris/embedding_db.hpp"
#include "mris/errors.hpp"
#include "mris/metric.hpp"
#include "mris/numerics.hpp"

namespace mris {

/// Contiguous band of target rows trained and synthesized on its own.
/// A single band covering every row is the combined variant.
struct ChannelGroup {
  std::size_t row_begin = 0;
  std::size_t row_end = 0;

  ImageShape shape(std::size_t width) const { return {row_end - row_begin, width}; }
};

inline std::vector<ChannelGroup> split_rows(ImageShape shape, std::size_t groups) {
  if (groups == 0 || shape.height % groups != 0)
    throw ConfigError("groups=" + std::to_string(groups) +
                      " must divide the target height " + std::to_string(shape.height));
  std::vector<ChannelGroup> out;
  const auto band = shape.height / groups;
  for (std::size_t g = 0; g < groups; ++g) out.push_back({g * band, (g + 1) * band});
  return out;
}

/// Encoder input for the query modality.
inline std::vector<double> query_input(const PairedSample& s, bool normalize) {
  auto x = to_double(s.query);
  return normalize ? normalize_query(x) : x;
}

/// Raw (un-normalized) target rows of one channel group.
inline std::vector<double> group_rows(std::span<const float> image, std::size_t width,
                                      const ChannelGroup& g) {
  return {image.begin() + static_cast<std::ptrdiff_t>(g.row_begin * width),
          image.begin() + static_cast<std::ptrdiff_t>(g.row_end * width)};
}

/// Encoder input for the target modality: the group's rows divided by 3.
inline std::vector<double> target_input(const PairedSample& s, std::size_t width,
                                        const ChannelGroup& g) {
  return normalize_target(group_rows(s.target, width, g));
}

struct TrainConfig {
  std::size_t embedding_dim = 32;
  std::size_t hidden_dim = 128;
  std::size_t hidden_layers = 2;
  Activation activation = Activation::relu;
  LossConfig loss;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  LrSchedule query_schedule{1e-4, 0.8, 150};
  LrSchedule target_schedule{1e-5, 0.8, 150};
  AdamWConfig adamw;
  bool normalize_query = true;
  std::size_t threads = 1;
  std::uint64_t seed = 42;

  void validate() const {
    if (batch_size < 2)
      throw ConfigError("batch_size must be >= 2: the triplet loss needs a negative");
    if (embedding_dim < 2) throw ConfigError("embedding_dim must be >= 2");
    if (hidden_dim == 0) throw ConfigError("hidden_dim must be >= 1");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (threads == 0) throw ConfigError("threads must be >= 1");
    if (!(loss.margin >= 0.0) || !std::isfinite(loss.margin))
      throw ConfigError("margin must be finite and >= 0");
    query_schedule.validate();
    target_schedule.validate();
  }

  std::vector<std::size_t> dims(std::size_t input_dim) const {
    std::vector<std::size_t> d{input_dim};
    for (std::size_t i = 0; i < hidden_layers; ++i) d.push_back(hidden_dim);
    d.push_back(embedding_dim);
    return d;
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0; // summed over the epoch's batches
  std::size_t batches = 0;
  std::size_t samples = 0;
  double lr_query = 0.0;
  double lr_target = 0.0;
};

struct TrainedEncoders {
  EncoderParams<float> query;
  EncoderParams<float> target;
  std::vector<EpochLog> history;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

/// Fresh Glorot-initialized encoder pair for the given input sizes.
inline TrainedEncoders init_encoders(std::size_t query_dim, std::size_t target_dim,
                                     const TrainConfig& cfg) {
  TrainedEncoders enc;
  const auto qd = cfg.dims(query_dim);
  const auto td = cfg.dims(target_dim);
  enc.query = EncoderParams<float>::xavier(qd, cfg.activation, derive_seed(cfg.seed, 1));
  enc.target = EncoderParams<float>::xavier(td, cfg.activation, derive_seed(cfg.seed, 2));
  return enc;
}

namespace detail {

// Runs fn(i) for i in [0, n), split into `threads` contiguous chunks.
inline void parallel_chunks(std::size_t n, std::size_t threads,
                            const std::function<void(std::size_t chunk, std::size_t begin,
                                                     std::size_t end)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> pool;
    const std::size_t per = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t b = t * per, e = std::min(n, b + per);
      if (b >= e) break;
      pool.emplace_back([&fn, &errors, t, b, e] {
        try {
          fn(t, b, e);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
}

} // namespace detail

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains the query/target encoder pair on the subjects of `index`.
/// Identical inputs and config give bit-identical encoders and history.
inline TrainedEncoders train_encoders(const Dataset& ds, const SubjectIndex& index,
                                      const TrainConfig& cfg, const ChannelGroup& group,
                                      const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (index.size() < 2) throw DataError("training needs at least 2 subjects");

  std::vector<std::vector<double>> qin(ds.samples.size()), tin(ds.samples.size());
  for (const auto& [subject, ids] : index)
    for (auto i : ids) {
      qin[i] = query_input(ds.samples[i], cfg.normalize_query);
      tin[i] = target_input(ds.samples[i], ds.shape.width, group);
    }

  auto enc = init_encoders(ds.query_dim, group.shape(ds.shape.width).pixels(), cfg);
  auto q_state = OptimizerState::for_params(enc.query, cfg.adamw);
  auto t_state = OptimizerState::for_params(enc.target, cfg.adamw);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto plan = sample_epoch(index, cfg.batch_size, cfg.seed, epoch);
    EpochLog log;
    log.epoch = epoch;
    log.lr_query = cfg.query_schedule.lr(epoch);
    log.lr_target = cfg.target_schedule.lr(epoch);

    for (const auto& batch : plan.batches) {
      const std::size_t n = batch.size();
      std::vector<ForwardResult> qf(n), tf(n);
      detail::parallel_chunks(n, cfg.threads, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t j = b; j < e; ++j) {
          qf[j] = encoder_forward(enc.query, qin[batch[j]]);
          tf[j] = encoder_forward(enc.target, tin[batch[j]]);
        }
      });

      EmbeddingPairBatch pairs;
      for (std::size_t j = 0; j < n; ++j) {
        pairs.query_embeddings.push_back(qf[j].output);
        pairs.target_embeddings.push_back(tf[j].output);
        pairs.subject_ids.push_back(ds.samples[batch[j]].subject_id);
      }
      const auto loss = triplet_loss_batch(pairs, cfg.loss);
      if (!std::isfinite(loss.loss)) throw NumericError("non-finite training loss");

      const std::size_t chunks = std::max<std::size_t>(1, std::min(cfg.threads, n));
      std::vector<EncoderGrads> qg(chunks, EncoderGrads::zeros_like(enc.query));
      std::vector<EncoderGrads> tg(chunks, EncoderGrads::zeros_like(enc.target));
      detail::parallel_chunks(n, cfg.threads, [&](std::size_t c, std::size_t b, std::size_t e) {
        for (std::size_t j = b; j < e; ++j) {
          qg[c] += encoder_backward(enc.query, qf[j].tape, loss.query_grads[j]).grads;
          tg[c] += encoder_backward(enc.target, tf[j].tape, loss.target_grads[j]).grads;
        }
      });
      for (std::size_t c = 1; c < chunks; ++c) {
        qg[0] += qg[c];
        tg[0] += tg[c];
      }
      adamw_step(enc.query, qg[0], q_state, log.lr_query);
      adamw_step(enc.target, tg[0], t_state, log.lr_target);

      log.loss += loss.loss;
      log.batches += 1;
      log.samples += n;
    }
    enc.history.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return enc;
}

template <class Real>
std::vector<double> embed(const EncoderParams<Real>& encoder, std::span<const double> input) {
  return encoder_forward(encoder, input).output;
}

/// Database of target embeddings over `sample_ids`, storing each sample's
/// normalized group rows as its target image.
inline EmbeddingDatabase build_database(const Dataset& ds, std::span<const std::size_t> sample_ids,
                                        const EncoderParams<float>& target_encoder,
                                        const ChannelGroup& group) {
  EmbeddingDatabase db;
  const auto shape = group.shape(ds.shape.width);
  for (auto i : sample_ids) {
    const auto& s = ds.samples[i];
    const auto y = target_input(s, ds.shape.width, group);
    db.insert(s.id(), embed(target_encoder, y), y, shape);
  }
  return db;
}

} // namespace mris

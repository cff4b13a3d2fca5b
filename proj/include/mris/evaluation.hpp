#pragma once

// Retrieval recall@k, median/MAD synthesis error with strata, and a
// linear-probe information-retention check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mris/embedding_db.hpp"
#include "mris/errors.hpp"
#include "mris/numerics.hpp"
#include "mris/synthesis.hpp"

namespace mris {

// ---------------------------------------------------------------- recall@k

struct RecallQuery {
  RecordId truth;
  std::vector<double> embedding;
};

struct RecallReport {
  std::vector<std::size_t> ks;
  std::vector<double> percent; // percent[i] is R@ks[i]
  std::size_t queries = 0;

  double at(std::size_t k) const {
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (ks[i] == k) return percent[i];
    throw DataError("recall not computed for k=" + std::to_string(k));
  }
};

/// R@k = 100 * |{q : truth(q) in top-k(q)}| / |queries|.
inline RecallReport recall_at_k(std::span<const RecallQuery> queries,
                                const EmbeddingDatabase& db,
                                std::vector<std::size_t> ks = {1, 5, 10, 20}) {
  if (queries.empty()) throw DataError("recall_at_k: no queries");
  if (ks.empty()) throw ConfigError("recall_at_k: no k values");
  std::sort(ks.begin(), ks.end());
  if (ks.front() == 0) throw ConfigError("recall_at_k: k must be >= 1");

  RecallReport r;
  r.ks = ks;
  r.queries = queries.size();
  std::vector<std::size_t> hits(ks.size(), 0);
  for (const auto& q : queries) {
    if (!db.contains(q.truth))
      throw ConstraintError("recall_at_k: true record " + to_string(q.truth) +
                            " is not in the database");
    const auto nn = db.knn_query(q.embedding, ks.back());
    std::size_t rank = nn.size();
    for (std::size_t i = 0; i < nn.size(); ++i)
      if (nn[i].id == q.truth) {
        rank = i;
        break;
      }
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (rank < ks[i]) ++hits[i];
  }
  for (auto h : hits)
    r.percent.push_back(100.0 * static_cast<double>(h) / static_cast<double>(queries.size()));
  return r;
}

// ---------------------------------------------------------------- median/MAD

struct MedianMad {
  double median = 0.0;
  double mad = 0.0;
};

namespace detail {

// Median of v, reordering v in place.
inline double median_inplace(std::vector<double>& v) {
  const std::size_t n = v.size();
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  const double upper = *mid;
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), mid);
  return 0.5 * (lower + upper);
}

} // namespace detail

/// Unscaled median absolute deviation (no normal-consistency factor).
inline MedianMad median_mad(std::span<const double> values) {
  if (values.empty()) throw DataError("median_mad: empty list");
  std::vector<double> v(values.begin(), values.end());
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError("median_mad: non-finite value");
  MedianMad r;
  r.median = detail::median_inplace(v);
  for (auto& x : v) x = std::abs(x - r.median);
  r.mad = detail::median_inplace(v);
  return r;
}

// ---------------------------------------------------------------- error report

struct ErrorStat {
  double median = 0.0;
  double mad = 0.0;
  std::size_t images = 0;
  std::size_t pixels = 0;
};

/// Pixel-pooled statistics per stratum and overall, plus the per-image
/// variant (median/MAD across images of each image's median error).
struct ErrorReport {
  std::map<std::int32_t, ErrorStat> strata;
  ErrorStat overall;
  std::map<std::int32_t, ErrorStat> strata_per_image;
  ErrorStat overall_per_image;
};

/// One evaluated image, both sides in denormalized target units.
struct ErrorCase {
  std::vector<double> prediction;
  std::vector<double> truth;
  std::int32_t stratum = 0;
};

inline ErrorReport error_report(std::span<const ErrorCase> cases) {
  if (cases.empty()) throw DataError("error_report: no test cases");
  std::map<std::int32_t, std::vector<double>> pooled, per_image;
  std::vector<double> all_pixels, all_images;
  for (const auto& c : cases) {
    if (c.prediction.size() != c.truth.size() || c.truth.empty())
      throw DimensionError("error_report: prediction/truth size mismatch");
    std::vector<double> err(c.truth.size());
    for (std::size_t p = 0; p < err.size(); ++p) err[p] = std::abs(c.prediction[p] - c.truth[p]);
    auto& bucket = pooled[c.stratum];
    bucket.insert(bucket.end(), err.begin(), err.end());
    all_pixels.insert(all_pixels.end(), err.begin(), err.end());
    const double img = median_mad(err).median;
    per_image[c.stratum].push_back(img);
    all_images.push_back(img);
  }
  auto stat = [](const std::vector<double>& v, std::size_t images) {
    const auto mm = median_mad(v);
    return ErrorStat{mm.median, mm.mad, images, v.size()};
  };
  ErrorReport r;
  for (const auto& [s, v] : per_image) {
    r.strata[s] = stat(pooled[s], v.size());
    auto ps = stat(v, v.size());
    ps.pixels = pooled[s].size();
    r.strata_per_image[s] = ps;
  }
  r.overall = stat(all_pixels, cases.size());
  r.overall_per_image = stat(all_images, cases.size());
  r.overall_per_image.pixels = all_pixels.size();
  return r;
}

// ---------------------------------------------------------------- linear probe

struct ProbeConfig {
  std::size_t epochs = 300;
  double learning_rate = 0.05;
  double weight_decay = 0.0;
  double l2 = 0.1; // ridge penalty 0.5 * l2 * |W|^2 added to the mean loss
  std::uint64_t seed = 7;
};

/// Multinomial logistic regression on standardized features; the linear
/// map is a single identity-activation encoder layer trained with AdamW.
class LinearProbe {
public:
  static LinearProbe fit(std::span<const std::vector<double>> features,
                         std::span<const std::int32_t> labels, std::size_t num_classes,
                         const ProbeConfig& cfg = {}) {
    if (features.empty() || features.size() != labels.size())
      throw DataError("probe: feature/label count mismatch");
    if (num_classes < 2) throw DataError("probe: need at least 2 classes");
    const std::size_t dim = features.front().size();
    LinearProbe p;
    p.mean_.assign(dim, 0.0);
    p.scale_.assign(dim, 0.0);
    for (const auto& f : features) {
      if (f.size() != dim) throw DimensionError("probe: ragged features");
      for (std::size_t i = 0; i < dim; ++i) p.mean_[i] += f[i];
    }
    const double n = static_cast<double>(features.size());
    for (auto& m : p.mean_) m /= n;
    for (const auto& f : features)
      for (std::size_t i = 0; i < dim; ++i) p.scale_[i] += (f[i] - p.mean_[i]) * (f[i] - p.mean_[i]);
    for (auto& s : p.scale_) {
      s = std::sqrt(s / n);
      s = s > 1e-12 ? 1.0 / s : 0.0;
    }

    std::vector<std::vector<double>> x;
    x.reserve(features.size());
    for (const auto& f : features) x.push_back(p.standardize(f));
    for (auto l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes)
        throw DataError("probe: label out of range");

    const std::size_t dims[] = {dim, num_classes};
    p.model_ = EncoderParams<double>::xavier(dims, Activation::identity, cfg.seed);
    AdamWConfig adam;
    adam.weight_decay = cfg.weight_decay;
    auto state = OptimizerState::for_params(p.model_, adam);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      auto grads = EncoderGrads::zeros_like(p.model_);
      for (std::size_t i = 0; i < x.size(); ++i) {
        auto fwd = encoder_forward(p.model_, x[i]);
        auto prob = softmax(fwd.output);
        prob[static_cast<std::size_t>(labels[i])] -= 1.0;
        for (auto& g : prob) g /= n;
        grads += encoder_backward(p.model_, fwd.tape, prob).grads;
      }
      const auto w = p.model_.layer(0).weight.data();
      auto gw = grads.weight[0].data();
      for (std::size_t i = 0; i < w.size(); ++i) gw[i] += cfg.l2 * w[i];
      adamw_step(p.model_, grads, state, cfg.learning_rate);
    }
    return p;
  }

  std::int32_t predict(std::span<const double> features) const {
    const auto logits = encoder_forward(model_, standardize(features)).output;
    return static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) -
                                     logits.begin());
  }

  static std::vector<double> softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) total += out[i] = std::exp(logits[i] - mx);
    for (auto& v : out) v /= total;
    return out;
  }

private:
  std::vector<double> standardize(std::span<const double> f) const {
    if (f.size() != mean_.size()) throw DimensionError("probe: feature dim mismatch");
    std::vector<double> out(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) out[i] = (f[i] - mean_[i]) * scale_[i];
    return out;
  }

  std::vector<double> mean_, scale_;
  EncoderParams<double> model_;
};

struct ProbeAccuracy {
  double overall = 0.0;
  std::map<std::int32_t, double> per_class;
};

struct ProbeReport {
  ProbeAccuracy synthesized;
  ProbeAccuracy ground_truth;
  std::size_t num_classes = 0;
};

struct ProbeSplit {
  std::vector<std::vector<double>> synthesized;
  std::vector<std::vector<double>> ground_truth;
  std::vector<std::int32_t> labels;
};

inline ProbeAccuracy probe_accuracy(const LinearProbe& probe,
                                    std::span<const std::vector<double>> x,
                                    std::span<const std::int32_t> labels) {
  ProbeAccuracy acc;
  std::map<std::int32_t, std::pair<std::size_t, std::size_t>> counts;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool ok = probe.predict(x[i]) == labels[i];
    correct += ok;
    auto& c = counts[labels[i]];
    c.first += ok;
    c.second += 1;
  }
  acc.overall = static_cast<double>(correct) / static_cast<double>(x.size());
  for (const auto& [label, c] : counts)
    acc.per_class[label] = static_cast<double>(c.first) / static_cast<double>(c.second);
  return acc;
}

/// Trains one probe on synthesized and one on ground-truth training images
/// (same labels, same settings) and scores each on the matching test images.
inline ProbeReport downstream_probe(const ProbeSplit& train, const ProbeSplit& test,
                                    const ProbeConfig& cfg = {}) {
  if (train.labels.empty() || test.labels.empty())
    throw DataError("downstream_probe: empty split");
  if (train.synthesized.size() != train.labels.size() ||
      train.ground_truth.size() != train.labels.size() ||
      test.synthesized.size() != test.labels.size() ||
      test.ground_truth.size() != test.labels.size())
    throw DimensionError("downstream_probe: image/label count mismatch");
  const auto [lo, hi] = std::minmax_element(train.labels.begin(), train.labels.end());
  if (*lo == *hi) throw DataError("downstream_probe: degenerate single-class training split");
  const auto [tlo, thi] = std::minmax_element(test.labels.begin(), test.labels.end());
  if (*tlo == *thi) throw DataError("downstream_probe: degenerate single-class test split");
  const auto classes = static_cast<std::size_t>(std::max(*hi, *thi)) + 1;

  ProbeReport r;
  r.num_classes = classes;
  const auto synth = LinearProbe::fit(train.synthesized, train.labels, classes, cfg);
  const auto truth = LinearProbe::fit(train.ground_truth, train.labels, classes, cfg);
  r.synthesized = probe_accuracy(synth, test.synthesized, test.labels);
  r.ground_truth = probe_accuracy(truth, test.ground_truth, test.labels);
  return r;
}

// ---------------------------------------------------------------- reports

/// Accumulates `metric,stratum,value` rows; values print with %.9g so that
/// identical inputs give byte-identical output.
class MetricTable {
public:
  void add(std::string metric, std::string stratum, double value) {
    rows_.push_back({std::move(metric), std::move(stratum), value});
  }

  std::string csv() const {
    std::ostringstream out;
    out << "metric,stratum,value\n";
    for (const auto& r : rows_) out << r.metric << "," << r.stratum << "," << fmt(r.value) << "\n";
    return out.str();
  }

  std::string table() const {
    std::size_t w1 = 6, w2 = 7;
    for (const auto& r : rows_) {
      w1 = std::max(w1, r.metric.size());
      w2 = std::max(w2, r.stratum.size());
    }
    std::ostringstream out;
    auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - s.size(), ' '); };
    out << pad("metric", w1) << "  " << pad("stratum", w2) << "  value\n";
    out << std::string(w1, '-') << "  " << std::string(w2, '-') << "  -----\n";
    for (const auto& r : rows_)
      out << pad(r.metric, w1) << "  " << pad(r.stratum, w2) << "  " << fmt(r.value) << "\n";
    return out.str();
  }

  static std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  }

private:
  struct Row {
    std::string metric, stratum;
    double value;
  };
  std::vector<Row> rows_;
};

inline void append_recall(MetricTable& t, const RecallReport& r, const std::string& stratum) {
  for (std::size_t i = 0; i < r.ks.size(); ++i)
    t.add("recall@" + std::to_string(r.ks[i]), stratum, r.percent[i]);
}

inline void append_errors(MetricTable& t, const ErrorReport& r) {
  auto put = [&t](const std::string& prefix, const std::string& stratum, const ErrorStat& s) {
    t.add(prefix + "_median", stratum, s.median);
    t.add(prefix + "_mad", stratum, s.mad);
    t.add(prefix + "_images", stratum, static_cast<double>(s.images));
  };
  for (const auto& [s, stat] : r.strata) put("abs_error_pixel", "stratum" + std::to_string(s), stat);
  put("abs_error_pixel", "all", r.overall);
  for (const auto& [s, stat] : r.strata_per_image)
    put("abs_error_image", "stratum" + std::to_string(s), stat);
  put("abs_error_image", "all", r.overall_per_image);
}

inline void append_probe(MetricTable& t, const ProbeReport& r) {
  t.add("probe_accuracy_synthesized", "all", r.synthesized.overall);
  for (const auto& [c, a] : r.synthesized.per_class)
    t.add("probe_accuracy_synthesized", "class" + std::to_string(c), a);
  t.add("probe_accuracy_ground_truth", "all", r.ground_truth.overall);
  for (const auto& [c, a] : r.ground_truth.per_class)
    t.add("probe_accuracy_ground_truth", "class" + std::to_string(c), a);
}

} // namespace mris

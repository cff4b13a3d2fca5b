#pragma once

// Paired-sample datasets: schema, intensity normalization, a synthetic
// two-modality generator, and the on-disk directory format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mris/binary_io.hpp"
#include "mris/embedding_db.hpp"
#include "mris/errors.hpp"
#include "mris/metric.hpp"
#include "mris/numerics.hpp"

namespace mris {

enum class Split : std::uint8_t { train_db = 0, downstream = 1, test = 2 };

inline std::string to_string(Split s) {
  switch (s) {
  case Split::train_db: return "train_db";
  case Split::downstream: return "downstream";
  case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train_db") return Split::train_db;
  if (s == "downstream") return Split::downstream;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

struct PairedSample {
  std::string subject_id;
  std::int32_t timepoint = 0;
  std::vector<float> query;  // query-modality features, length Q
  std::vector<float> target; // target image, H*W row-major
  std::int32_t stratum_label = 0;
  std::optional<bool> progression_label;

  RecordId id() const { return {subject_id, timepoint}; }
  bool operator==(const PairedSample&) const = default;
};

struct Dataset {
  std::size_t query_dim = 0;
  ImageShape shape;
  std::uint64_t seed = 0;
  std::map<std::string, Split> subjects;
  std::vector<PairedSample> samples;

  bool operator==(const Dataset&) const = default;

  /// Sample indices of every subject in `split`, keyed by subject id.
  SubjectIndex subject_index(Split split) const {
    SubjectIndex idx;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      auto it = subjects.find(samples[i].subject_id);
      if (it != subjects.end() && it->second == split)
        idx[samples[i].subject_id].push_back(i);
    }
    return idx;
  }

  std::vector<std::size_t> samples_in(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (subjects.at(samples[i].subject_id) == split) out.push_back(i);
    return out;
  }

  /// The earliest-timepoint sample of every subject in `split`.
  std::vector<std::size_t> baseline_samples(Split split) const {
    std::vector<std::size_t> out;
    for (const auto& [subject, ids] : subject_index(split)) {
      auto best = *std::min_element(ids.begin(), ids.end(), [&](auto a, auto b) {
        return samples[a].timepoint < samples[b].timepoint;
      });
      out.push_back(best);
    }
    return out;
  }

  /// Throws unless every sample matches the dataset dims, ids are unique,
  /// and every sample's subject has a split.
  void validate() const {
    std::set<RecordId> seen;
    for (const auto& s : samples) {
      if (s.query.size() != query_dim)
        throw DimensionError("sample " + to_string(s.id()) + ": query length mismatch");
      if (s.target.size() != shape.pixels())
        throw DimensionError("sample " + to_string(s.id()) + ": target length mismatch");
      if (!subjects.contains(s.subject_id))
        throw DataError("sample " + to_string(s.id()) + ": subject has no split");
      if (!seen.insert(s.id()).second)
        throw DataError("duplicate sample id " + to_string(s.id()));
    }
  }
};

inline std::vector<double> to_double(std::span<const float> v) {
  return {v.begin(), v.end()};
}

/// Linear-interpolation order statistic, q in [0, 1].
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("percentile of empty list");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

/// Maps min -> 0 and the 99th percentile -> 0.99. Values above the
/// percentile land above 0.99 unless `clip` is set.
inline std::vector<double> normalize_query(std::span<const double> x, bool clip = false) {
  if (x.empty()) throw DataError("normalize_query: empty vector");
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError("normalize_query: non-finite value");
  const double lo = *std::min_element(x.begin(), x.end());
  const double p99 = percentile({x.begin(), x.end()}, 0.99);
  if (!(p99 > lo))
    throw DegenerateInputError("normalize_query: constant vector");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = 0.99 * (x[i] - lo) / (p99 - lo);
    if (clip) out[i] = std::min(out[i], 0.99);
  }
  return out;
}

inline constexpr double kTargetScale = 3.0;

inline std::vector<double> normalize_target(std::span<const double> y) {
  std::vector<double> out(y.begin(), y.end());
  for (auto& v : out) v /= kTargetScale;
  return out;
}

inline std::vector<double> denormalize_target(std::span<const double> y) {
  std::vector<double> out(y.begin(), y.end());
  for (auto& v : out) v *= kTargetScale;
  return out;
}

struct GeneratorConfig {
  std::size_t num_subjects = 300;
  std::size_t min_timepoints = 1;
  std::size_t max_timepoints = 4;
  std::size_t latent_dim = 8;
  std::size_t query_dim = 64;
  ImageShape shape{16, 16};
  double noise = 0.05;
  double drift = 0.3;
  double split_db = 0.43;
  double split_downstream = 0.38;
  std::uint64_t seed = 42;

  void validate() const {
    if (num_subjects < 3) throw ConfigError("generator: need at least 3 subjects");
    if (min_timepoints < 1 || max_timepoints < min_timepoints || max_timepoints > 4)
      throw ConfigError("generator: timepoints must satisfy 1 <= min <= max <= 4");
    if (latent_dim == 0 || query_dim == 0 || shape.pixels() == 0)
      throw ConfigError("generator: dimensions must be positive");
    if (!(noise >= 0.0) || !(drift >= 0.0))
      throw ConfigError("generator: noise and drift must be non-negative");
    if (!(split_db > 0.0 && split_downstream >= 0.0 && split_db + split_downstream < 1.0))
      throw ConfigError("generator: split fractions must leave a non-empty test split");
  }
};

/// Fixed random projections shared by every sample of a dataset.
struct SyntheticModel {
  DenseMatrix<double> query_map;  // Q x L
  DenseMatrix<double> target_map; // HW x L
  std::vector<double> severity_axis; // unit vector in latent space

  static SyntheticModel draw(const GeneratorConfig& cfg, std::mt19937_64& rng) {
    const auto L = cfg.latent_dim;
    std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(L)));
    SyntheticModel m;
    m.query_map = DenseMatrix<double>(cfg.query_dim, L);
    for (auto& v : m.query_map.data()) v = gauss(rng);
    m.target_map = DenseMatrix<double>(cfg.shape.pixels(), L);
    for (auto& v : m.target_map.data()) v = gauss(rng);
    m.severity_axis = random_unit(L, rng);
    return m;
  }

  static std::vector<double> random_unit(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<double> v(n);
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (auto& x : v) {
        x = unit(rng);
        norm2 += x * x;
      }
    } while (norm2 == 0.0);
    for (auto& x : v) x /= std::sqrt(norm2);
    return v;
  }

  /// (x, y) = (A z + eps, B z + eps') with eps ~ N(0, noise^2).
  std::pair<std::vector<double>, std::vector<double>> render(
      std::span<const double> latent, double noise, std::mt19937_64& rng) const {
    std::normal_distribution<double> eps(0.0, 1.0);
    auto project = [&](const DenseMatrix<double>& m) {
      std::vector<double> out(m.rows());
      for (std::size_t r = 0; r < m.rows(); ++r) {
        double acc = 0.0;
        auto row = m.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * latent[c];
        out[r] = acc;
      }
      return out;
    };
    auto x = project(query_map);
    auto y = project(target_map);
    if (noise > 0.0) {
      for (auto& v : x) v += noise * eps(rng);
      for (auto& v : y) v += noise * eps(rng);
    }
    return {std::move(x), std::move(y)};
  }

  double severity(std::span<const double> latent) const {
    double s = 0.0;
    for (std::size_t i = 0; i < latent.size(); ++i) s += severity_axis[i] * latent[i];
    return s;
  }
};

struct GeneratedData {
  Dataset dataset;
  SyntheticModel model;
  std::vector<std::vector<double>> latents; // drifted latent of each sample
};

inline std::string subject_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "S%04zu", i);
  return buf;
}

/// Per subject: z ~ N(0, I_L), a drift direction u and rate r; timepoint t
/// uses z_t = z + t r u. Stratum is the dataset quartile of the severity
/// score <c, z_t>; progression marks drift rates above the median.
inline GeneratedData generate_synthetic(const GeneratorConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  GeneratedData g;
  g.model = SyntheticModel::draw(cfg, rng);

  auto& ds = g.dataset;
  ds.query_dim = cfg.query_dim;
  ds.shape = cfg.shape;
  ds.seed = cfg.seed;

  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> rate_dist(0.0, 2.0);
  std::uniform_int_distribution<std::size_t> tp_dist(cfg.min_timepoints, cfg.max_timepoints);

  std::vector<double> rates(cfg.num_subjects);
  std::vector<std::size_t> subject_of_sample;
  std::vector<double> scores;
  for (std::size_t s = 0; s < cfg.num_subjects; ++s) {
    std::vector<double> z(cfg.latent_dim);
    for (auto& v : z) v = gauss(rng);
    const auto u = SyntheticModel::random_unit(cfg.latent_dim, rng);
    rates[s] = cfg.drift * rate_dist(rng);
    const auto timepoints = tp_dist(rng);
    for (std::size_t t = 0; t < timepoints; ++t) {
      std::vector<double> zt(z);
      for (std::size_t i = 0; i < zt.size(); ++i)
        zt[i] += static_cast<double>(t) * rates[s] * u[i];
      auto [x, y] = g.model.render(zt, cfg.noise, rng);
      PairedSample p;
      p.subject_id = subject_name(s);
      p.timepoint = static_cast<std::int32_t>(t);
      p.query.assign(x.begin(), x.end());
      p.target.assign(y.begin(), y.end());
      scores.push_back(g.model.severity(zt));
      subject_of_sample.push_back(s);
      ds.samples.push_back(std::move(p));
      g.latents.push_back(std::move(zt));
    }
  }

  const double q1 = percentile(scores, 0.25);
  const double q2 = percentile(scores, 0.50);
  const double q3 = percentile(scores, 0.75);
  const double rate_median = percentile(rates, 0.5);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const double sc = scores[i];
    ds.samples[i].stratum_label = sc < q1 ? 0 : sc < q2 ? 1 : sc < q3 ? 2 : 3;
    ds.samples[i].progression_label = rates[subject_of_sample[i]] > rate_median;
  }

  std::vector<std::size_t> order(cfg.num_subjects);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<double>(cfg.num_subjects);
  const auto n_db = static_cast<std::size_t>(std::llround(cfg.split_db * n));
  const auto n_down = static_cast<std::size_t>(std::llround(cfg.split_downstream * n));
  if (n_db < 2 || n_db + n_down >= cfg.num_subjects)
    throw ConfigError("generator: split fractions leave an empty or too small split");
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Split split = i < n_db ? Split::train_db
                        : i < n_db + n_down ? Split::downstream
                                            : Split::test;
    ds.subjects[subject_name(order[i])] = split;
  }
  return g;
}

// Dataset directory:
//   manifest          text: schema, dims, counts, seed, split per subject,
//                     and one "array <name> <count> <fnv1a64 hex>" line per field
//   <name>.f32        little-endian 32-bit reals, exactly <count> values
inline constexpr int kDatasetSchemaVersion = 1;

namespace detail {

inline const std::vector<std::string>& dataset_fields() {
  static const std::vector<std::string> fields{"query", "target", "subject",
                                               "timepoint", "stratum", "progression"};
  return fields;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

} // namespace detail

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir);
  std::map<std::string, std::size_t> subject_pos;
  {
    std::size_t i = 0;
    for (const auto& [id, split] : ds.subjects) subject_pos[id] = i++;
  }
  std::map<std::string, std::vector<float>> arrays;
  for (const auto& s : ds.samples) {
    auto& q = arrays["query"];
    q.insert(q.end(), s.query.begin(), s.query.end());
    auto& t = arrays["target"];
    t.insert(t.end(), s.target.begin(), s.target.end());
    arrays["subject"].push_back(static_cast<float>(subject_pos.at(s.subject_id)));
    arrays["timepoint"].push_back(static_cast<float>(s.timepoint));
    arrays["stratum"].push_back(static_cast<float>(s.stratum_label));
    arrays["progression"].push_back(
        s.progression_label ? (*s.progression_label ? 1.0f : 0.0f) : -1.0f);
  }

  std::ostringstream manifest;
  manifest << "mris-dataset\n"
           << "schema " << kDatasetSchemaVersion << "\n"
           << "query_dim " << ds.query_dim << "\n"
           << "height " << ds.shape.height << "\n"
           << "width " << ds.shape.width << "\n"
           << "seed " << ds.seed << "\n"
           << "subjects " << ds.subjects.size() << "\n"
           << "samples " << ds.samples.size() << "\n";
  for (const auto& [id, split] : ds.subjects)
    manifest << "subject " << id << " " << to_string(split) << "\n";
  for (const auto& name : detail::dataset_fields()) {
    io::ByteWriter w;
    for (float v : arrays[name]) w.f32(v);
    io::write_file(dir / (name + ".f32"), w.buffer());
    manifest << "array " << name << " " << arrays[name].size() << " "
             << detail::hex64(io::fnv1a64(w.buffer())) << "\n";
  }
  std::ofstream out(dir / "manifest", std::ios::trunc);
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << manifest.str();
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest";
  std::ifstream in(manifest_path);
  if (!in) throw DataError("missing dataset manifest " + manifest_path.string());

  Dataset ds;
  std::string magic;
  std::getline(in, magic);
  if (magic != "mris-dataset") throw DataError(manifest_path.string() + ": bad header");

  std::size_t subject_count = 0, sample_count = 0;
  std::map<std::string, std::pair<std::size_t, std::string>> array_meta;
  std::vector<std::string> subject_order;
  bool have_schema = false;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "schema") {
      int v = 0;
      ls >> v;
      if (v != kDatasetSchemaVersion)
        throw DataError(manifest_path.string() + ": unsupported schema " + std::to_string(v));
      have_schema = true;
    } else if (key == "query_dim") {
      ls >> ds.query_dim;
    } else if (key == "height") {
      ls >> ds.shape.height;
    } else if (key == "width") {
      ls >> ds.shape.width;
    } else if (key == "seed") {
      ls >> ds.seed;
    } else if (key == "subjects") {
      ls >> subject_count;
    } else if (key == "samples") {
      ls >> sample_count;
    } else if (key == "subject") {
      std::string id, split;
      ls >> id >> split;
      ds.subjects[id] = split_from_string(split);
      subject_order.push_back(id);
    } else if (key == "array") {
      std::string name, hex;
      std::size_t count = 0;
      ls >> name >> count >> hex;
      array_meta[name] = {count, hex};
    } else {
      throw DataError(manifest_path.string() + ": unknown key '" + key + "'");
    }
    if (ls.fail()) throw DataError(manifest_path.string() + ": malformed line '" + line + "'");
  }
  if (!have_schema) throw DataError(manifest_path.string() + ": missing schema line");
  if (subject_order.size() != subject_count || ds.subjects.size() != subject_count)
    throw DataError(manifest_path.string() + ": subject count mismatch");

  const std::map<std::string, std::size_t> expected{
      {"query", sample_count * ds.query_dim},
      {"target", sample_count * ds.shape.pixels()},
      {"subject", sample_count},
      {"timepoint", sample_count},
      {"stratum", sample_count},
      {"progression", sample_count}};
  std::map<std::string, std::vector<float>> arrays;
  for (const auto& name : detail::dataset_fields()) {
    auto meta = array_meta.find(name);
    if (meta == array_meta.end())
      throw DataError(manifest_path.string() + ": missing array '" + name + "'");
    if (meta->second.first != expected.at(name))
      throw DataError(name + ".f32: manifest count " + std::to_string(meta->second.first) +
                      " does not match the declared dims (" +
                      std::to_string(expected.at(name)) + ")");
    const auto bytes = io::read_file(dir / (name + ".f32"));
    if (bytes.size() != meta->second.first * 4)
      throw DataError(name + ".f32: length " + std::to_string(bytes.size()) +
                      " bytes, manifest declares " + std::to_string(meta->second.first) +
                      " values");
    if (detail::hex64(io::fnv1a64(bytes)) != meta->second.second)
      throw DataError(name + ".f32: checksum mismatch");
    io::ByteReader r(bytes, name + ".f32");
    auto& out = arrays[name];
    out.resize(meta->second.first);
    for (auto& v : out) v = r.f32();
  }

  ds.samples.resize(sample_count);
  for (std::size_t i = 0; i < sample_count; ++i) {
    auto& s = ds.samples[i];
    const auto subject = static_cast<std::size_t>(arrays["subject"][i]);
    if (subject >= subject_count) throw DataError("subject.f32: index out of range");
    s.subject_id = subject_order[subject];
    s.timepoint = static_cast<std::int32_t>(arrays["timepoint"][i]);
    s.stratum_label = static_cast<std::int32_t>(arrays["stratum"][i]);
    const float prog = arrays["progression"][i];
    if (prog >= 0.0f) s.progression_label = prog > 0.5f;
    s.query.assign(arrays["query"].begin() + static_cast<std::ptrdiff_t>(i * ds.query_dim),
                   arrays["query"].begin() + static_cast<std::ptrdiff_t>((i + 1) * ds.query_dim));
    const auto px = ds.shape.pixels();
    s.target.assign(arrays["target"].begin() + static_cast<std::ptrdiff_t>(i * px),
                    arrays["target"].begin() + static_cast<std::ptrdiff_t>((i + 1) * px));
  }
  ds.validate();
  return ds;
}

} // namespace mris

#pragma once

// Store of unit-normalized target embeddings with their aligned target
// images, exhaustive top-k cosine search, and the "MRDB" file format.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mris/binary_io.hpp"
#include "mris/errors.hpp"

namespace mris {

struct RecordId {
  std::string subject;
  std::int32_t timepoint = 0;

  auto operator<=>(const RecordId&) const = default;
  bool operator==(const RecordId&) const = default;
};

inline std::string to_string(const RecordId& id) {
  return id.subject + "@" + std::to_string(id.timepoint);
}

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t pixels() const { return height * width; }
  bool operator==(const ImageShape&) const = default;
};

struct EmbeddingRecord {
  RecordId id;
  std::size_t target_ref = 0; // index into the database's target images
};

struct Neighbor {
  RecordId id;
  std::size_t index = 0; // record position in the database
  double distance = 0.0;
};

/// Sorted by ascending distance, ties by ascending record id.
using NeighborSet = std::vector<Neighbor>;

class EmbeddingDatabase {
public:
  std::size_t dim() const { return dim_; }
  ImageShape shape() const { return shape_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  const std::vector<EmbeddingRecord>& records() const { return records_; }
  const EmbeddingRecord& record(std::size_t i) const { return records_[i]; }

  std::span<const float> embedding(std::size_t i) const {
    return {embeddings_.data() + i * dim_, dim_};
  }
  std::span<const float> target(std::size_t i) const {
    const auto ref = records_[i].target_ref;
    return {targets_.data() + ref * shape_.pixels(), shape_.pixels()};
  }

  /// Stores `embedding / |embedding|` (as 32-bit reals) and a copy of the
  /// target image. The first insert fixes D and the image shape.
  void insert(RecordId id, std::span<const double> embedding,
              std::span<const double> target, ImageShape shape) {
    if (embedding.empty())
      throw DimensionError("db_insert: empty embedding");
    if (shape.pixels() == 0 || target.size() != shape.pixels())
      throw DimensionError("db_insert: target length does not match its shape");
    if (!empty()) {
      if (embedding.size() != dim_)
        throw DimensionError("db_insert: embedding dim " +
                             std::to_string(embedding.size()) + " != " +
                             std::to_string(dim_));
      if (shape != shape_)
        throw DimensionError("db_insert: target shape mismatch");
    }
    if (ids_.contains(id))
      throw ConstraintError("db_insert: duplicate record id " + to_string(id));
    double norm2 = 0.0;
    for (double x : embedding) norm2 += x * x;
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm))
      throw NumericError("db_insert: non-finite embedding");
    if (norm == 0.0)
      throw DegenerateInputError("db_insert: zero-norm embedding");
    for (double x : target)
      if (!std::isfinite(x)) throw NumericError("db_insert: non-finite target");

    if (empty()) {
      dim_ = embedding.size();
      shape_ = shape;
    }
    for (double x : embedding) embeddings_.push_back(static_cast<float>(x / norm));
    for (double x : target) targets_.push_back(static_cast<float>(x));
    ids_.emplace(id, records_.size());
    records_.push_back({std::move(id), records_.size()});
  }

  /// Cosine distance between a unit query and stored record i: 1 - q.e.
  double distance_unit(std::span<const double> unit_query, std::size_t i) const {
    const auto e = embedding(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) dot += unit_query[j] * static_cast<double>(e[j]);
    return std::clamp(1.0 - dot, 0.0, 2.0);
  }

  /// Exact k smallest cosine distances by exhaustive scan.
  NeighborSet knn_query(std::span<const double> query, std::size_t k) const {
    if (k == 0) throw ConfigError("knn_query: k must be >= 1");
    if (empty()) throw DataError("knn_query: empty database");
    if (query.size() != dim_)
      throw DimensionError("knn_query: query dim " + std::to_string(query.size()) +
                           " != " + std::to_string(dim_));
    const auto unit = unit_vector(query);

    auto worse = [this](const Neighbor& a, const Neighbor& b) {
      if (a.distance != b.distance) return a.distance < b.distance;
      return records_[a.index].id < records_[b.index].id;
    };
    // Max-heap on (distance, id): top() is the current worst kept neighbor.
    std::priority_queue<Neighbor, std::vector<Neighbor>, decltype(worse)> heap(worse);
    const std::size_t keep = std::min(k, size());
    for (std::size_t i = 0; i < size(); ++i) {
      Neighbor cand{records_[i].id, i, distance_unit(unit, i)};
      if (heap.size() < keep) {
        heap.push(std::move(cand));
      } else if (worse(cand, heap.top())) {
        heap.pop();
        heap.push(std::move(cand));
      }
    }
    NeighborSet out;
    out.reserve(heap.size());
    while (!heap.empty()) {
      out.push_back(heap.top());
      heap.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

  /// Position of a record id, or size() when absent.
  std::size_t find(const RecordId& id) const {
    auto it = ids_.find(id);
    return it == ids_.end() ? size() : it->second;
  }
  bool contains(const RecordId& id) const { return ids_.contains(id); }

  static std::vector<double> unit_vector(std::span<const double> v) {
    double norm2 = 0.0;
    for (double x : v) norm2 += x * x;
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NumericError("non-finite query embedding");
    if (norm == 0.0) throw DegenerateInputError("zero-norm query embedding");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / norm;
    return out;
  }

  std::vector<std::uint8_t> encode() const;
  static EmbeddingDatabase decode(std::span<const std::uint8_t> bytes,
                                  const std::string& what = "embedding database");

  void save(const std::filesystem::path& path) const { io::write_file(path, encode()); }
  static EmbeddingDatabase load(const std::filesystem::path& path) {
    return decode(io::read_file(path), path.string());
  }

private:
  std::size_t dim_ = 0;
  ImageShape shape_;
  std::vector<EmbeddingRecord> records_;
  std::map<RecordId, std::size_t> ids_;
  std::vector<float> embeddings_;
  std::vector<float> targets_;
};

// File layout (little-endian):
//   "MRDB" | u32 version | u32 D | u32 H | u32 W | u64 record_count
//   | per record: u32 len, subject bytes, i32 timepoint, D x f32
//   | record_count x (H*W f32) target images in record order
//   | u64 FNV-1a of every preceding byte
inline constexpr std::uint32_t kDatabaseFormatVersion = 1;

inline std::vector<std::uint8_t> EmbeddingDatabase::encode() const {
  io::ByteWriter w;
  w.bytes("MRDB");
  w.u32(kDatabaseFormatVersion);
  w.u32(static_cast<std::uint32_t>(dim_));
  w.u32(static_cast<std::uint32_t>(shape_.height));
  w.u32(static_cast<std::uint32_t>(shape_.width));
  w.u64(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    w.string(records_[i].id.subject);
    w.i32(records_[i].id.timepoint);
    for (float x : embedding(i)) w.f32(x);
  }
  for (std::size_t i = 0; i < records_.size(); ++i)
    for (float x : target(i)) w.f32(x);
  w.seal();
  return w.buffer();
}

inline EmbeddingDatabase EmbeddingDatabase::decode(std::span<const std::uint8_t> bytes,
                                                   const std::string& what) {
  io::ByteReader r(bytes, what);
  r.expect_magic("MRDB");
  if (auto v = r.u32(); v != kDatabaseFormatVersion)
    throw DataError(what + ": unsupported version " + std::to_string(v));
  r.verify_checksum_first();
  EmbeddingDatabase db;
  const std::size_t dim = r.u32();
  const ImageShape shape{r.u32(), r.u32()};
  const std::uint64_t count = r.u64();
  if (count > 0 && (dim == 0 || shape.pixels() == 0))
    throw DataError(what + ": zero dimension with non-empty record list");
  if (count > r.remaining())
    throw DataError(what + ": record count exceeds file size");

  std::vector<EmbeddingRecord> records;
  std::vector<float> embeddings;
  embeddings.reserve(static_cast<std::size_t>(count) * dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    RecordId id;
    id.subject = r.string();
    id.timepoint = r.i32();
    for (std::size_t j = 0; j < dim; ++j) embeddings.push_back(r.f32());
    if (!db.ids_.emplace(id, static_cast<std::size_t>(i)).second)
      throw DataError(what + ": duplicate record id " + to_string(id));
    records.push_back({std::move(id), static_cast<std::size_t>(i)});
  }
  std::vector<float> targets;
  targets.reserve(static_cast<std::size_t>(count) * shape.pixels());
  for (std::uint64_t i = 0; i < count * shape.pixels(); ++i) targets.push_back(r.f32());
  r.verify_seal();

  db.dim_ = count > 0 ? dim : 0;
  db.shape_ = count > 0 ? shape : ImageShape{};
  db.records_ = std::move(records);
  db.embeddings_ = std::move(embeddings);
  db.targets_ = std::move(targets);
  return db;
}

} // namespace mris

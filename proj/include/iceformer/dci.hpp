#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include <absl/container/btree_map.h>

#include "iceformer/core.hpp"
#include "iceformer/embed.hpp"

namespace iceformer {

/// Retrieval budget for one query: k final neighbours, at most k0 candidates and
/// k1 - 1 visiting rounds per composite index.
struct QuerySpec {
  std::size_t k = 10;
  std::size_t k0 = 100;
  std::size_t k1 = 1000;

  void validate() const;

  /// A budget that fully visits every simple index of every composite, which makes
  /// the query exact: k0 = max(k, points) and k1 = points * num_simple + 1.
  static QuerySpec exhaustive(std::size_t k, std::size_t points, std::size_t num_simple);

  friend bool operator==(const QuerySpec&, const QuerySpec&) = default;
};

struct Neighbor {
  PointId id = 0;
  double score = 0.0;  // inner product with the query in index space

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct QueryStats {
  std::size_t visited = 0;     // queue pops across all composites
  std::size_t candidates = 0;  // size of the candidate union

  QueryStats& operator+=(const QueryStats& o) {
    visited += o.visited;
    candidates += o.candidates;
    return *this;
  }
};

/// Raised when a DCI snapshot is malformed or does not match the supplied points.
class SnapshotError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One random direction plus the ordered projections of every point onto it.
/// Equal projections keep insertion order.
template <typename T>
class SimpleIndex {
 public:
  using Map = absl::btree_multimap<T, std::uint32_t>;  // projection -> slot

  explicit SimpleIndex(std::vector<T> direction);

  std::span<const T> direction() const { return direction_; }
  std::size_t size() const { return entries_.size(); }
  const Map& entries() const { return entries_; }

  T project(std::span<const T> point) const;
  void insert(T projection, std::uint32_t slot) { entries_.emplace(projection, slot); }
  bool erase(T projection, std::uint32_t slot);

  /// Walks entries outward from a target value in nondecreasing distance.
  class Cursor {
   public:
    Cursor() = default;
    Cursor(const Map& map, T target);

    bool exhausted() const { return !has_left_ && right_ == end_; }
    T distance() const;
    std::uint32_t slot() const { return take_left() ? left_->second : right_->second; }
    void advance();

   private:
    bool take_left() const;

    typename Map::const_iterator begin_{}, end_{}, left_{}, right_{};
    bool has_left_ = false;
    T target_{};
  };

  Cursor nearest(T target) const { return Cursor(entries_, target); }

 private:
  std::vector<T> direction_;
  Map entries_;
};

template <typename T>
class DciIndex;

/// Per-thread working memory for queries. Reusable across queries on any index.
template <typename T>
class QueryScratch {
 public:
  std::size_t bytes() const;

 private:
  friend class DciIndex<T>;

  struct HeapEntry {
    T distance;
    std::uint32_t simple;
  };

  std::vector<T> projections;
  std::vector<typename SimpleIndex<T>::Cursor> cursors;
  std::vector<std::vector<HeapEntry>> heaps;
  std::vector<std::uint32_t> counts;  // composite-major, indexed by slot
  std::vector<std::size_t> touched;
  std::vector<std::vector<std::uint32_t>> sets;
  std::vector<std::uint8_t> in_union;
};

/// Prioritized DCI over points in R^dim: num_composite groups of num_simple
/// random projections each. Queries are read-only and may run concurrently;
/// insert and erase need exclusive access.
template <typename T>
class DciIndex {
 public:
  DciIndex(std::size_t dim, std::size_t num_simple, std::size_t num_composite, std::uint64_t seed);

  /// Samples directions from `seed` and inserts every point in list order.
  static DciIndex construct(std::span<const EmbeddedPoint<T>> points, std::size_t dim, std::size_t num_simple,
                            std::size_t num_composite, std::uint64_t seed, int threads = 1);

  std::size_t dim() const { return dim_; }
  std::size_t num_simple() const { return num_simple_; }
  std::size_t num_composite() const { return num_composite_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return slot_of_.size(); }
  bool empty() const { return slot_of_.empty(); }
  bool contains(PointId id) const { return slot_of_.contains(id); }

  const SimpleIndex<T>& simple(std::size_t composite, std::size_t j) const {
    return simples_[composite * num_simple_ + j];
  }

  void insert(PointId id, std::span<const T> coords);
  void insert(const EmbeddedPoint<T>& point) { insert(point.source_id, point.coords); }
  /// Returns false when the id is not present.
  bool erase(PointId id);

  std::span<const T> coords(PointId id) const;

  /// Union of the per-composite candidate sets, in discovery order.
  std::vector<PointId> candidates(std::span<const T> query, const QuerySpec& spec, QueryScratch<T>& scratch,
                                  QueryStats* stats = nullptr) const;

  /// Top spec.k candidates by inner product with the query, descending, ties to the smaller id.
  std::vector<Neighbor> query(std::span<const T> query, const QuerySpec& spec, QueryScratch<T>& scratch,
                              QueryStats* stats = nullptr) const;
  std::vector<Neighbor> query(const EmbeddedPoint<T>& q, const QuerySpec& spec) const;

  /// Bytes held by the ordered maps and the point store, approximately.
  std::size_t memory_bytes() const;

  // Snapshot layout (little-endian): "DCI1", then num_simple, num_composite, dim and
  // point count as u64; directions as f32, simple index order composite-major; then
  // per simple index its (f32 projection, u64 id) pairs in ascending projection order.
  void save(std::ostream& out) const;
  /// Rebuilds an index from a snapshot. `points` must supply coordinates for every stored id.
  static DciIndex load(std::istream& in, std::span<const EmbeddedPoint<T>> points);

 private:
  DciIndex(std::size_t dim, std::size_t num_simple, std::size_t num_composite, std::uint64_t seed,
           std::vector<std::vector<T>> directions);

  std::uint32_t allocate_slot(PointId id, std::span<const T> coords);
  void check_dim(std::size_t n) const;

  std::size_t dim_;
  std::size_t num_simple_;
  std::size_t num_composite_;
  std::uint64_t seed_;
  std::vector<SimpleIndex<T>> simples_;

  std::vector<T> coords_;  // slot-major
  std::vector<PointId> slot_ids_;
  std::vector<std::uint32_t> free_slots_;
  std::unordered_map<PointId, std::uint32_t> slot_of_;
};

/// Exact top-k of `points` by inner product with q, ties to the smaller id.
template <typename T>
std::vector<PointId> brute_force_query(std::span<const EmbeddedPoint<T>> points, std::span<const T> q, std::size_t k);

}  // namespace iceformer

#include "iceformer/dci.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <iterator>
#include <ostream>
#include <random>
#include <string>

#include "binary_io.hpp"
#include "iceformer/kernels.hpp"

namespace iceformer {

namespace {

constexpr char kSnapshotMagic[4] = {'D', 'C', 'I', '1'};

std::vector<double> sample_unit_direction(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  for (;;) {
    double sq = 0.0;
    for (auto& x : v) {
      x = normal(rng);
      sq += x * x;
    }
    if (sq > 0.0) {
      const double inv = 1.0 / std::sqrt(sq);
      for (auto& x : v) x *= inv;
      return v;
    }
  }
}

template <typename T>
bool ranks_before(T score_a, PointId id_a, T score_b, PointId id_b) {
  return score_a > score_b || (score_a == score_b && id_a < id_b);
}

}  // namespace

void QuerySpec::validate() const {
  if (k == 0) throw ValidationError("k must be at least 1");
  if (k > k0) throw ValidationError("k (" + std::to_string(k) + ") must not exceed k0 (" + std::to_string(k0) + ")");
  if (k0 > k1) {
    throw ValidationError("k0 (" + std::to_string(k0) + ") must not exceed k1 (" + std::to_string(k1) + ")");
  }
}

QuerySpec QuerySpec::exhaustive(std::size_t k, std::size_t points, std::size_t num_simple) {
  const std::size_t k0 = std::max(k, points);
  return QuerySpec{k, k0, std::max(k0, points * num_simple + 1)};
}

// ---- SimpleIndex ---------------------------------------------------------

template <typename T>
SimpleIndex<T>::SimpleIndex(std::vector<T> direction) : direction_(std::move(direction)) {}

template <typename T>
T SimpleIndex<T>::project(std::span<const T> point) const {
  return dot(direction_.data(), point.data(), direction_.size());
}

template <typename T>
bool SimpleIndex<T>::erase(T projection, std::uint32_t slot) {
  auto [lo, hi] = entries_.equal_range(projection);
  for (auto it = lo; it != hi; ++it) {
    if (it->second == slot) {
      entries_.erase(it);
      return true;
    }
  }
  return false;
}

template <typename T>
SimpleIndex<T>::Cursor::Cursor(const Map& map, T target) : begin_(map.begin()), end_(map.end()), target_(target) {
  right_ = map.lower_bound(target);
  if (right_ != begin_) {
    left_ = std::prev(right_);
    has_left_ = true;
  }
}

template <typename T>
bool SimpleIndex<T>::Cursor::take_left() const {
  if (!has_left_) return false;
  if (right_ == end_) return true;
  return (target_ - left_->first) <= (right_->first - target_);
}

template <typename T>
T SimpleIndex<T>::Cursor::distance() const {
  return take_left() ? target_ - left_->first : right_->first - target_;
}

template <typename T>
void SimpleIndex<T>::Cursor::advance() {
  if (take_left()) {
    if (left_ == begin_) {
      has_left_ = false;
    } else {
      --left_;
    }
  } else {
    ++right_;
  }
}

// ---- QueryScratch ----------------------------------------------------------

template <typename T>
std::size_t QueryScratch<T>::bytes() const {
  std::size_t total = projections.capacity() * sizeof(T) +
                      cursors.capacity() * sizeof(typename SimpleIndex<T>::Cursor) +
                      counts.capacity() * sizeof(std::uint32_t) + touched.capacity() * sizeof(std::size_t) +
                      in_union.capacity();
  for (const auto& h : heaps) total += h.capacity() * sizeof(HeapEntry);
  for (const auto& s : sets) total += s.capacity() * sizeof(std::uint32_t);
  return total;
}

// ---- DciIndex --------------------------------------------------------------

template <typename T>
DciIndex<T>::DciIndex(std::size_t dim, std::size_t num_simple, std::size_t num_composite, std::uint64_t seed,
                      std::vector<std::vector<T>> directions)
    : dim_(dim), num_simple_(num_simple), num_composite_(num_composite), seed_(seed) {
  if (dim == 0) throw ValidationError("index dimension must be positive");
  if (num_simple == 0 || num_composite == 0) throw ValidationError("num_simple and num_composite must be >= 1");
  simples_.reserve(directions.size());
  for (auto& dir : directions) simples_.emplace_back(std::move(dir));
}

template <typename T>
DciIndex<T>::DciIndex(std::size_t dim, std::size_t num_simple, std::size_t num_composite, std::uint64_t seed)
    : DciIndex(dim, num_simple, num_composite, seed, [&] {
        if (dim == 0) throw ValidationError("index dimension must be positive");
        std::mt19937_64 rng(seed);
        std::vector<std::vector<T>> dirs(num_simple * num_composite);
        for (auto& dir : dirs) {
          auto unit = sample_unit_direction(rng, dim);
          dir.assign(unit.begin(), unit.end());
        }
        return dirs;
      }()) {}

template <typename T>
DciIndex<T> DciIndex<T>::construct(std::span<const EmbeddedPoint<T>> points, std::size_t dim,
                                   std::size_t num_simple, std::size_t num_composite, std::uint64_t seed,
                                   int threads) {
  DciIndex index(dim, num_simple, num_composite, seed);
  for (const auto& p : points) index.allocate_slot(p.source_id, p.coords);

  const auto count = static_cast<std::uint32_t>(index.slot_ids_.size());
  const auto simples = static_cast<std::ptrdiff_t>(index.simples_.size());
#pragma omp parallel for num_threads(std::max(threads, 1)) schedule(static)
  for (std::ptrdiff_t s = 0; s < simples; ++s) {
    auto& simple = index.simples_[static_cast<std::size_t>(s)];
    for (std::uint32_t slot = 0; slot < count; ++slot) {
      simple.insert(simple.project({index.coords_.data() + std::size_t{slot} * dim, dim}), slot);
    }
  }
  return index;
}

template <typename T>
void DciIndex<T>::check_dim(std::size_t n) const {
  if (n != dim_) {
    throw ValidationError("point dimension " + std::to_string(n) + " does not match index dimension " +
                          std::to_string(dim_));
  }
}

template <typename T>
std::uint32_t DciIndex<T>::allocate_slot(PointId id, std::span<const T> coords) {
  check_dim(coords.size());
  if (slot_of_.contains(id)) throw ValidationError("point id " + std::to_string(id) + " is already indexed");
  std::uint32_t slot;
  if (!free_slots_.empty()) {
    slot = free_slots_.back();
    free_slots_.pop_back();
    std::copy(coords.begin(), coords.end(), coords_.begin() + static_cast<std::ptrdiff_t>(std::size_t{slot} * dim_));
    slot_ids_[slot] = id;
  } else {
    slot = static_cast<std::uint32_t>(slot_ids_.size());
    coords_.insert(coords_.end(), coords.begin(), coords.end());
    slot_ids_.push_back(id);
  }
  slot_of_.emplace(id, slot);
  return slot;
}

template <typename T>
void DciIndex<T>::insert(PointId id, std::span<const T> coords) {
  const std::uint32_t slot = allocate_slot(id, coords);
  const std::span<const T> stored{coords_.data() + std::size_t{slot} * dim_, dim_};
  for (auto& simple : simples_) simple.insert(simple.project(stored), slot);
}

template <typename T>
bool DciIndex<T>::erase(PointId id) {
  auto it = slot_of_.find(id);
  if (it == slot_of_.end()) return false;
  const std::uint32_t slot = it->second;
  const std::span<const T> stored{coords_.data() + std::size_t{slot} * dim_, dim_};
  for (auto& simple : simples_) simple.erase(simple.project(stored), slot);
  slot_of_.erase(it);
  free_slots_.push_back(slot);
  return true;
}

template <typename T>
std::span<const T> DciIndex<T>::coords(PointId id) const {
  auto it = slot_of_.find(id);
  if (it == slot_of_.end()) throw std::out_of_range("point id " + std::to_string(id) + " is not indexed");
  return {coords_.data() + std::size_t{it->second} * dim_, dim_};
}

template <typename T>
std::vector<PointId> DciIndex<T>::candidates(std::span<const T> query, const QuerySpec& spec,
                                             QueryScratch<T>& scratch, QueryStats* stats) const {
  spec.validate();
  check_dim(query.size());
  std::vector<PointId> out;
  if (empty()) return out;

  const std::size_t p = num_simple_;
  const std::size_t num_l = num_composite_;
  const std::size_t cap = slot_ids_.size();
  using Entry = typename QueryScratch<T>::HeapEntry;
  auto later = [](const Entry& a, const Entry& b) {
    return a.distance > b.distance || (a.distance == b.distance && a.simple > b.simple);
  };

  scratch.projections.resize(simples_.size());
  scratch.cursors.resize(simples_.size());
  scratch.heaps.resize(num_l);
  scratch.sets.resize(num_l);
  if (scratch.counts.size() < num_l * cap) scratch.counts.resize(num_l * cap, 0);
  if (scratch.in_union.size() < cap) scratch.in_union.resize(cap, 0);
  scratch.touched.clear();

  for (std::size_t s = 0; s < simples_.size(); ++s) {
    scratch.projections[s] = simples_[s].project(query);
    scratch.cursors[s] = simples_[s].nearest(scratch.projections[s]);
  }
  for (std::size_t l = 0; l < num_l; ++l) {
    auto& heap = scratch.heaps[l];
    heap.clear();
    scratch.sets[l].clear();
    for (std::size_t j = 0; j < p; ++j) {
      const auto& cur = scratch.cursors[l * p + j];
      if (!cur.exhausted()) {
        heap.push_back({cur.distance(), static_cast<std::uint32_t>(j)});
        std::push_heap(heap.begin(), heap.end(), later);
      }
    }
  }

  std::size_t visited = 0;
  for (std::size_t round = 1; round < spec.k1; ++round) {
    bool active = false;
    for (std::size_t l = 0; l < num_l; ++l) {
      auto& set = scratch.sets[l];
      auto& heap = scratch.heaps[l];
      if (set.size() >= spec.k0 || heap.empty()) continue;
      active = true;

      std::pop_heap(heap.begin(), heap.end(), later);
      const std::uint32_t j = heap.back().simple;
      heap.pop_back();
      auto& cur = scratch.cursors[l * p + j];
      const std::uint32_t slot = cur.slot();
      cur.advance();
      if (!cur.exhausted()) {
        heap.push_back({cur.distance(), j});
        std::push_heap(heap.begin(), heap.end(), later);
      }
      ++visited;

      const std::size_t idx = l * cap + slot;
      if (scratch.counts[idx]++ == 0) scratch.touched.push_back(idx);
      if (scratch.counts[idx] == p) set.push_back(slot);
    }
    if (!active) break;
  }

  for (const auto& set : scratch.sets) {
    for (std::uint32_t slot : set) {
      if (!scratch.in_union[slot]) {
        scratch.in_union[slot] = 1;
        out.push_back(slot_ids_[slot]);
      }
    }
  }
  for (const auto& set : scratch.sets) {
    for (std::uint32_t slot : set) scratch.in_union[slot] = 0;
  }
  for (std::size_t idx : scratch.touched) scratch.counts[idx] = 0;

  if (stats) {
    stats->visited += visited;
    stats->candidates += out.size();
  }
  return out;
}

template <typename T>
std::vector<Neighbor> DciIndex<T>::query(std::span<const T> query, const QuerySpec& spec, QueryScratch<T>& scratch,
                                         QueryStats* stats) const {
  const auto ids = candidates(query, spec, scratch, stats);
  std::vector<std::pair<T, PointId>> scored;
  scored.reserve(ids.size());
  for (PointId id : ids) scored.emplace_back(dot(query.data(), coords(id).data(), dim_), id);
  const std::size_t take = std::min(spec.k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(),
                    [](const auto& a, const auto& b) { return ranks_before(a.first, a.second, b.first, b.second); });
  std::vector<Neighbor> result(take);
  for (std::size_t r = 0; r < take; ++r) result[r] = {scored[r].second, static_cast<double>(scored[r].first)};
  return result;
}

template <typename T>
std::vector<Neighbor> DciIndex<T>::query(const EmbeddedPoint<T>& q, const QuerySpec& spec) const {
  QueryScratch<T> scratch;
  return query(q.coords, spec, scratch);
}

template <typename T>
std::size_t DciIndex<T>::memory_bytes() const {
  std::size_t total = coords_.capacity() * sizeof(T) + slot_ids_.capacity() * sizeof(PointId);
  for (const auto& s : simples_) total += s.size() * (sizeof(T) + sizeof(std::uint32_t)) + dim_ * sizeof(T);
  return total;
}

template <typename T>
void DciIndex<T>::save(std::ostream& out) const {
  out.write(kSnapshotMagic, sizeof(kSnapshotMagic));
  detail::write_le<std::uint64_t>(out, num_simple_);
  detail::write_le<std::uint64_t>(out, num_composite_);
  detail::write_le<std::uint64_t>(out, dim_);
  detail::write_le<std::uint64_t>(out, size());
  for (const auto& s : simples_) {
    for (T x : s.direction()) detail::write_le(out, static_cast<float>(x));
  }
  for (const auto& s : simples_) {
    for (const auto& [proj, slot] : s.entries()) {
      detail::write_le(out, static_cast<float>(proj));
      detail::write_le<std::uint64_t>(out, slot_ids_[slot]);
    }
  }
}

template <typename T>
DciIndex<T> DciIndex<T>::load(std::istream& in, std::span<const EmbeddedPoint<T>> points) {
  char magic[4];
  if (!in.read(magic, sizeof(magic)) || !std::equal(magic, magic + 4, kSnapshotMagic)) {
    throw SnapshotError("not a DCI snapshot (bad magic)");
  }
  std::uint64_t p = 0, num_l = 0, dim = 0, count = 0;
  if (!detail::read_le(in, p) || !detail::read_le(in, num_l) || !detail::read_le(in, dim) ||
      !detail::read_le(in, count)) {
    throw SnapshotError("truncated DCI snapshot header");
  }
  constexpr std::uint64_t kLimit = std::uint64_t{1} << 32;
  if (p == 0 || num_l == 0 || dim == 0 || p > kLimit || num_l > kLimit || dim > kLimit || count > kLimit ||
      p * num_l > kLimit) {
    throw SnapshotError("implausible DCI snapshot header");
  }

  std::vector<std::vector<T>> directions(p * num_l, std::vector<T>(dim));
  for (auto& dir : directions) {
    for (auto& x : dir) {
      float f;
      if (!detail::read_le(in, f)) throw SnapshotError("truncated DCI snapshot directions");
      x = static_cast<T>(f);
    }
  }

  std::vector<std::vector<std::pair<float, PointId>>> entries(p * num_l);
  for (std::size_t s = 0; s < entries.size(); ++s) {
    entries[s].resize(count);
    for (auto& [proj, id] : entries[s]) {
      if (!detail::read_le(in, proj) || !detail::read_le(in, id)) {
        throw SnapshotError("truncated DCI snapshot entries in simple index " + std::to_string(s));
      }
    }
  }

  std::unordered_map<PointId, const EmbeddedPoint<T>*> by_id;
  for (const auto& pt : points) by_id.emplace(pt.source_id, &pt);

  DciIndex index(dim, p, num_l, 0, std::move(directions));
  if (!entries.empty()) {
    for (const auto& [proj, id] : entries[0]) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw SnapshotError("snapshot id " + std::to_string(id) + " has no supplied point");
      if (index.slot_of_.contains(id)) throw SnapshotError("snapshot lists id " + std::to_string(id) + " twice");
      index.allocate_slot(id, it->second->coords);
    }
  }
  for (std::size_t s = 0; s < entries.size(); ++s) {
    auto& simple = index.simples_[s];
    std::vector<std::uint8_t> seen(count, 0);
    for (const auto& [proj, id] : entries[s]) {
      auto it = index.slot_of_.find(id);
      if (it == index.slot_of_.end() || seen[it->second]) {
        throw SnapshotError("simple index " + std::to_string(s) + " does not hold the same id set");
      }
      seen[it->second] = 1;
      const T recomputed = simple.project({index.coords_.data() + std::size_t{it->second} * dim, dim});
      if (std::abs(static_cast<double>(recomputed) - proj) > 1e-4 * std::max(1.0, std::abs(double{proj}))) {
        throw SnapshotError("projection of id " + std::to_string(id) + " disagrees with supplied coordinates");
      }
      simple.insert(recomputed, it->second);
    }
  }
  return index;
}

template <typename T>
std::vector<PointId> brute_force_query(std::span<const EmbeddedPoint<T>> points, std::span<const T> q,
                                       std::size_t k) {
  std::vector<std::pair<T, PointId>> scored;
  scored.reserve(points.size());
  for (const auto& p : points) scored.emplace_back(dot(q.data(), p.coords.data(), q.size()), p.source_id);
  const std::size_t take = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(),
                    [](const auto& a, const auto& b) { return ranks_before(a.first, a.second, b.first, b.second); });
  std::vector<PointId> ids(take);
  for (std::size_t r = 0; r < take; ++r) ids[r] = scored[r].second;
  return ids;
}

template class SimpleIndex<float>;
template class SimpleIndex<double>;
template class QueryScratch<float>;
template class QueryScratch<double>;
template class DciIndex<float>;
template class DciIndex<double>;
template std::vector<PointId> brute_force_query(std::span<const EmbeddedPoint<float>>, std::span<const float>,
                                                std::size_t);
template std::vector<PointId> brute_force_query(std::span<const EmbeddedPoint<double>>, std::span<const double>,
                                                std::size_t);

}  // namespace iceformer

#include "rfuse/retrievaldb.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "rfuse/binio.hpp"

namespace rfuse::db {

double squared_distance(const float* a, const float* b, int dim) {
  double s = 0.0;
  for (int i = 0; i < dim; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

bool same_values(const ScalarGrid3& a, const ScalarGrid3& b) {
  return a.dims() == b.dims() && std::memcmp(a.storage().data(), b.storage().data(), a.size() * sizeof(float)) == 0;
}

// ---- VpTree ---------------------------------------------------------------

namespace {

constexpr std::size_t kLeafSize = 8;
// Slack on triangle-inequality pruning so rounding never drops a candidate.
constexpr double kPruneSlack = 1e-9;

}  // namespace

double VpTree::dist(std::size_t i, const float* q) const {
  return std::sqrt(squared_distance(data_->data() + i * static_cast<std::size_t>(dim_), q, dim_));
}

void VpTree::build(const std::vector<float>* data, const std::vector<std::uint64_t>* ids, int dim) {
  data_ = data;
  ids_ = ids;
  dim_ = dim;
  nodes_.clear();
  order_.resize(ids->size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  root_ = order_.empty() ? -1 : build_node(0, order_.size());
}

int VpTree::build_node(std::size_t begin, std::size_t end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  if (end - begin <= kLeafSize) {
    nodes_[id].leaf = true;
    nodes_[id].begin = begin;
    nodes_[id].end = end;
    return id;
  }
  // Vantage point: the first row of the range (deterministic).
  const std::size_t vp = order_[begin];
  const float* vq = data_->data() + vp * static_cast<std::size_t>(dim_);
  std::vector<std::pair<double, std::size_t>> d;
  d.reserve(end - begin - 1);
  for (std::size_t i = begin + 1; i < end; ++i) d.emplace_back(dist(order_[i], vq), order_[i]);
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  const double mu = d[mid].first;
  for (std::size_t i = 0; i < d.size(); ++i) order_[begin + 1 + i] = d[i].second;
  // Rows [begin+1, begin+1+mid] have distance <= mu, the rest >= mu.
  const std::size_t split = begin + 1 + mid + 1;
  nodes_[id].vp = vp;
  nodes_[id].mu = mu;
  const int in = build_node(begin + 1, split);
  const int out = split < end ? build_node(split, end) : -1;
  nodes_[id].inside = in;
  nodes_[id].outside = out;
  return id;
}

void VpTree::offer(std::size_t idx, double d2, std::size_t k, const EntryFilter& filter,
                   std::vector<std::pair<double, std::size_t>>& heap) const {
  if (filter && !filter(idx)) return;
  // Max-heap on (dist2, id): the root is the current worst kept neighbour.
  auto less = [this](const auto& a, const auto& b) {
    return a.first < b.first || (a.first == b.first && (*ids_)[a.second] < (*ids_)[b.second]);
  };
  const std::pair<double, std::size_t> cand{d2, idx};
  if (heap.size() < k) {
    heap.push_back(cand);
    std::push_heap(heap.begin(), heap.end(), less);
  } else if (less(cand, heap.front())) {
    std::pop_heap(heap.begin(), heap.end(), less);
    heap.back() = cand;
    std::push_heap(heap.begin(), heap.end(), less);
  }
}

void VpTree::search(int node, const float* q, std::size_t k, const EntryFilter& filter,
                    std::vector<std::pair<double, std::size_t>>& heap) const {
  if (node < 0) return;
  const Node& n = nodes_[node];
  const float* base = data_->data();
  if (n.leaf) {
    for (std::size_t i = n.begin; i < n.end; ++i) {
      const std::size_t idx = order_[i];
      offer(idx, squared_distance(base + idx * static_cast<std::size_t>(dim_), q, dim_), k, filter, heap);
    }
    return;
  }
  const double d2 = squared_distance(base + n.vp * static_cast<std::size_t>(dim_), q, dim_);
  const double d = std::sqrt(d2);
  offer(n.vp, d2, k, filter, heap);
  auto radius = [&]() {
    return heap.size() < k ? std::numeric_limits<double>::infinity() : std::sqrt(heap.front().first);
  };
  // Lower bounds on the distance from q to any row of each side.
  const double lb_in = std::max(0.0, d - n.mu), lb_out = std::max(0.0, n.mu - d);
  const bool in_first = d <= n.mu;
  const int first = in_first ? n.inside : n.outside, second = in_first ? n.outside : n.inside;
  const double lb_first = in_first ? lb_in : lb_out, lb_second = in_first ? lb_out : lb_in;
  if (lb_first <= radius() + kPruneSlack) search(first, q, k, filter, heap);
  if (lb_second <= radius() + kPruneSlack) search(second, q, k, filter, heap);
}

std::vector<std::pair<std::size_t, double>> VpTree::knn(const float* query, std::size_t k,
                                                        const EntryFilter& filter) const {
  std::vector<std::pair<double, std::size_t>> heap;
  heap.reserve(k + 1);
  if (k > 0) search(root_, query, k, filter, heap);
  std::sort(heap.begin(), heap.end(), [this](const auto& a, const auto& b) {
    return a.first < b.first || (a.first == b.first && (*ids_)[a.second] < (*ids_)[b.second]);
  });
  std::vector<std::pair<std::size_t, double>> out;
  for (const auto& [d2, idx] : heap) out.emplace_back(idx, d2);
  return out;
}

// ---- ChunkDatabase --------------------------------------------------------

ChunkDatabase::ChunkDatabase(int chunk_dim, int embed_dim) : chunk_dim_(chunk_dim), embed_dim_(embed_dim) {
  if (chunk_dim < 1 || embed_dim < 1) throw std::invalid_argument("database dims must be positive");
}

ChunkDatabase::ChunkDatabase(const ChunkDatabase& o)
    : chunk_dim_(o.chunk_dim_), embed_dim_(o.embed_dim_), version_(o.version_), entries_(o.entries_), emb_(o.emb_),
      ids_(o.ids_), tree_(o.tree_) {
  tree_.rebind(&emb_, &ids_);
}

ChunkDatabase::ChunkDatabase(ChunkDatabase&& o) noexcept
    : chunk_dim_(o.chunk_dim_), embed_dim_(o.embed_dim_), version_(o.version_), entries_(std::move(o.entries_)),
      emb_(std::move(o.emb_)), ids_(std::move(o.ids_)), tree_(std::move(o.tree_)) {
  tree_.rebind(&emb_, &ids_);
}

ChunkDatabase& ChunkDatabase::operator=(const ChunkDatabase& o) {
  if (this != &o) *this = ChunkDatabase(o);
  return *this;
}

ChunkDatabase& ChunkDatabase::operator=(ChunkDatabase&& o) noexcept {
  chunk_dim_ = o.chunk_dim_;
  embed_dim_ = o.embed_dim_;
  version_ = o.version_;
  entries_ = std::move(o.entries_);
  emb_ = std::move(o.emb_);
  ids_ = std::move(o.ids_);
  tree_ = std::move(o.tree_);
  tree_.rebind(&emb_, &ids_);
  return *this;
}

std::size_t ChunkDatabase::index_of(std::uint64_t id) const {
  auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
  if (it == ids_.end() || *it != id) throw std::out_of_range("no database entry with id " + std::to_string(id));
  return static_cast<std::size_t>(it - ids_.begin());
}

void ChunkDatabase::append(std::vector<ScalarGrid3> chunks, std::vector<std::string> tags,
                           const std::vector<float>& embeddings) {
  if (chunks.size() != tags.size() || embeddings.size() != chunks.size() * static_cast<std::size_t>(embed_dim_))
    throw std::invalid_argument("append: chunks, tags and embeddings disagree in count");
  const Dims3 want{chunk_dim_, chunk_dim_, chunk_dim_};
  for (const auto& c : chunks)
    if (c.dims() != want) throw GridError("append: chunk dims " + to_string(c.dims()) + ", database expects " + to_string(want));
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    double n2 = 0.0;
    for (int j = 0; j < embed_dim_; ++j) {
      const double v = embeddings[i * static_cast<std::size_t>(embed_dim_) + j];
      n2 += v * v;
    }
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-5) throw std::invalid_argument("append: embeddings must be unit length");
  }
  std::uint64_t next = ids_.empty() ? 0 : ids_.back() + 1;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    entries_.push_back({next, std::move(tags[i]), std::move(chunks[i])});
    ids_.push_back(next++);
  }
  emb_.insert(emb_.end(), embeddings.begin(), embeddings.end());
  ++version_;
  reindex();
}

void ChunkDatabase::reindex() { tree_.build(&emb_, &ids_, embed_dim_); }

std::vector<Neighbor> ChunkDatabase::knn(const float* query, std::size_t k, const EntryFilter& filter) const {
  if (k > entries_.size())
    throw std::invalid_argument("knn: k = " + std::to_string(k) + " exceeds " + std::to_string(entries_.size()) +
                                " entries");
  std::vector<Neighbor> out;
  for (const auto& [idx, d2] : tree_.knn(query, k, filter)) out.push_back({ids_[idx], d2});
  return out;
}

std::vector<Neighbor> ChunkDatabase::knn_brute(const float* query, std::size_t k, const EntryFilter& filter) const {
  if (k > entries_.size())
    throw std::invalid_argument("knn: k = " + std::to_string(k) + " exceeds " + std::to_string(entries_.size()) +
                                " entries");
  std::vector<Neighbor> all;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (!filter || filter(i)) all.push_back({ids_[i], squared_distance(embedding(i), query, embed_dim_)});
  std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.id < b.id);
  });
  if (all.size() > k) all.resize(k);
  return all;
}

void ChunkDatabase::save(std::ostream& os) const {
  binio::write_magic(os, "RFDB");
  binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(chunk_dim_));
  binio::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(embed_dim_));
  binio::write_pod<std::uint64_t>(os, entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    binio::write_pod<std::uint64_t>(os, entries_[i].id);
    binio::write_str16(os, entries_[i].tag);
    binio::write_f32s(os, embedding(i), static_cast<std::size_t>(embed_dim_));
    binio::write_f32s(os, entries_[i].chunk.storage().data(), entries_[i].chunk.size());
  }
}

ChunkDatabase ChunkDatabase::load(std::istream& is) {
  binio::expect_magic(is, "RFDB");
  const auto cd = static_cast<int>(binio::read_pod<std::uint32_t>(is));
  const auto ed = static_cast<int>(binio::read_pod<std::uint32_t>(is));
  const auto count = binio::read_pod<std::uint64_t>(is);
  ChunkDatabase db(cd, ed);
  const std::size_t vox = static_cast<std::size_t>(cd) * cd * cd;
  db.entries_.reserve(count);
  db.emb_.resize(count * static_cast<std::size_t>(ed));
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    e.id = binio::read_pod<std::uint64_t>(is);
    if (i > 0 && e.id <= db.ids_.back()) throw binio::FormatError("database ids must be strictly increasing");
    e.tag = binio::read_str16(is);
    binio::read_f32s(is, db.emb_.data() + i * static_cast<std::size_t>(ed), static_cast<std::size_t>(ed));
    std::vector<float> vals(vox);
    binio::read_f32s(is, vals.data(), vox);
    e.chunk = ScalarGrid3({cd, cd, cd}, 1.0, Vec3::Zero(), std::move(vals));
    db.ids_.push_back(e.id);
    db.entries_.push_back(std::move(e));
  }
  db.reindex();
  return db;
}

void ChunkDatabase::save_file(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  save(os);
}

ChunkDatabase ChunkDatabase::load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read database " + path);
  return load(is);
}

// ---- construction and queries ---------------------------------------------

ChunkDatabase build(const embed::ChunkEncoderPair& enc, const std::vector<ScalarGrid3>& target_windows,
                    const ChunkLayout& layout, const HyperParams& hp, const BuildOptions& opts) {
  layout.validate();
  if (target_windows.empty()) throw std::invalid_argument("database build: no scenes");
  if (enc.chunk_dim() != layout.chunk_dim)
    throw std::invalid_argument("database build: encoder chunk size does not match layout");
  std::vector<ScalarGrid3> chunks;
  std::vector<std::string> tags;
  bool have_empty = false;
  for (std::size_t w = 0; w < target_windows.size(); ++w) {
    for (auto& c : unfold(target_windows[w], layout)) {
      if (opts.filter_sparse &&
          occupancy_fraction(c, static_cast<float>(hp.occ_threshold)) < hp.min_chunk_occupancy) {
        if (have_empty) continue;
        have_empty = true;
      }
      chunks.push_back(ScalarGrid3(c.dims(), 1.0, Vec3::Zero(), std::vector<float>(c.values().begin(), c.values().end())));
      tags.push_back(opts.set_name + "/" + std::to_string(w));
    }
  }
  std::vector<const ScalarGrid3*> ptrs;
  for (const auto& c : chunks) ptrs.push_back(&c);
  const auto emb = enc.embed_targets(ptrs);
  ChunkDatabase db(layout.chunk_dim, enc.embed_dim());
  db.append(std::move(chunks), std::move(tags), emb);
  return db;
}

void extend(ChunkDatabase& db, const embed::ChunkEncoderPair& enc, const std::vector<ScalarGrid3>& chunks,
            const std::vector<std::string>& tags) {
  if (chunks.empty()) return;
  std::vector<const ScalarGrid3*> ptrs;
  std::vector<ScalarGrid3> copies;
  for (const auto& c : chunks) {
    if (c.dims() != Dims3{db.chunk_dim(), db.chunk_dim(), db.chunk_dim()})
      throw GridError("extend: chunk dims " + to_string(c.dims()) + " do not match the database");
    copies.emplace_back(c.dims(), 1.0, Vec3::Zero(), std::vector<float>(c.values().begin(), c.values().end()));
  }
  for (const auto& c : copies) ptrs.push_back(&c);
  const auto emb = enc.embed_targets(ptrs);
  db.append(std::move(copies), tags, emb);
}

std::vector<ApproxReconstruction> assemble_approximations(const ChunkDatabase& db,
                                                          const embed::ChunkEncoderPair& enc,
                                                          const ScalarGrid3& input_window,
                                                          const ChunkLayout& layout, int k,
                                                          const EntryFilter& filter) {
  if (k < 1) throw std::invalid_argument("assemble_approximations: k must be >= 1");
  if (static_cast<std::size_t>(k) > db.size())
    throw std::invalid_argument("assemble_approximations: database has fewer than k entries");
  const auto inputs = unfold(input_window, layout);
  std::vector<const ScalarGrid3*> ptrs;
  for (const auto& c : inputs) ptrs.push_back(&c);
  const auto q = enc.embed_inputs(ptrs);
  std::vector<ApproxReconstruction> out(static_cast<std::size_t>(k));
  std::vector<std::vector<ScalarGrid3>> per_rank(static_cast<std::size_t>(k));
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const auto nn = db.knn(q.data() + s * static_cast<std::size_t>(db.embed_dim()), static_cast<std::size_t>(k), filter);
    if (nn.size() < static_cast<std::size_t>(k))
      throw std::invalid_argument("assemble_approximations: fewer than k entries pass the filter");
    for (int r = 0; r < k; ++r) {
      out[r].ids.push_back(nn[r].id);
      per_rank[r].push_back(db.entry(db.index_of(nn[r].id)).chunk);
    }
  }
  for (int r = 0; r < k; ++r) {
    out[r].rank = r + 1;
    ScalarGrid3 scene = fold(per_rank[r], layout);
    out[r].scene = ScalarGrid3(scene.dims(), input_window.voxel_size(), input_window.origin(),
                               std::move(scene.storage()));
  }
  return out;
}

ScalarGrid3 random_assembly(const ChunkDatabase& db, const ChunkLayout& layout, Rng& rng) {
  if (db.size() == 0) throw std::invalid_argument("random_assembly: empty database");
  std::vector<ScalarGrid3> chunks;
  for (int s = 0; s < layout.chunks_per_window(); ++s) chunks.push_back(db.entry(uniform_index(rng, db.size())).chunk);
  return fold(chunks, layout);
}

EntryFilter exclude_tag(const ChunkDatabase& db, const std::string& tag) {
  return [&db, tag](std::size_t i) { return db.entry(i).tag != tag; };
}

double self_retrieval_recall(const ChunkDatabase& db, const embed::ChunkEncoderPair& enc,
                             const std::vector<embed::ChunkPair>& pairs, int k) {
  if (pairs.empty()) throw std::invalid_argument("self_retrieval_recall: no pairs");
  std::vector<const ScalarGrid3*> ptrs;
  for (const auto& p : pairs) ptrs.push_back(&p.input);
  const auto q = enc.embed_inputs(ptrs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto nn = db.knn(q.data() + i * static_cast<std::size_t>(db.embed_dim()), static_cast<std::size_t>(k));
    for (const auto& n : nn)
      if (same_values(db.entry(db.index_of(n.id)).chunk, pairs[i].target)) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

}  // namespace rfuse::db

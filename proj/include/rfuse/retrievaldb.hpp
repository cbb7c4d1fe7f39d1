#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "rfuse/embed.hpp"
#include "rfuse/grids.hpp"
#include "rfuse/hyperparams.hpp"

namespace rfuse::db {

struct Neighbor {
  std::uint64_t id = 0;
  double dist2 = 0.0;  // squared l2 distance
  bool operator==(const Neighbor&) const = default;
};

/// Entry predicate for knn; entries for which it returns false are skipped.
using EntryFilter = std::function<bool(std::size_t index)>;

/// Exact k-NN index over row-major float vectors (vantage-point tree).
/// Results are ordered by (dist2, id) and equal a linear scan exactly.
class VpTree {
 public:
  VpTree() = default;
  /// `ids` gives the tie-break key for each row.
  void build(const std::vector<float>* data, const std::vector<std::uint64_t>* ids, int dim);
  /// Points an already built tree at identical copies of its inputs.
  void rebind(const std::vector<float>* data, const std::vector<std::uint64_t>* ids) {
    data_ = data;
    ids_ = ids;
  }
  std::vector<std::pair<std::size_t, double>> knn(const float* query, std::size_t k,
                                                  const EntryFilter& filter = nullptr) const;

 private:
  struct Node {
    std::size_t vp = 0;
    double mu = 0.0;                    // median distance from vp
    int inside = -1, outside = -1;      // children
    std::size_t begin = 0, end = 0;     // bucket range in order_ for leaves
    bool leaf = false;
  };
  int build_node(std::size_t begin, std::size_t end);
  void search(int node, const float* q, std::size_t k, const EntryFilter& filter,
              std::vector<std::pair<double, std::size_t>>& heap) const;
  void offer(std::size_t idx, double d2, std::size_t k, const EntryFilter& filter,
             std::vector<std::pair<double, std::size_t>>& heap) const;
  double dist(std::size_t i, const float* q) const;

  const std::vector<float>* data_ = nullptr;
  const std::vector<std::uint64_t>* ids_ = nullptr;
  int dim_ = 0;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

/// Squared l2 distance with a fixed summation order (shared by every search path).
double squared_distance(const float* a, const float* b, int dim);

struct Entry {
  std::uint64_t id = 0;
  std::string tag;  // "<set>/<window>" provenance, e.g. "train/12"
  ScalarGrid3 chunk;
};

class ChunkDatabase {
 public:
  ChunkDatabase() = default;
  ChunkDatabase(int chunk_dim, int embed_dim);
  // The index refers into this object's storage, so copies rebind it.
  ChunkDatabase(const ChunkDatabase& o);
  ChunkDatabase(ChunkDatabase&& o) noexcept;
  ChunkDatabase& operator=(const ChunkDatabase& o);
  ChunkDatabase& operator=(ChunkDatabase&& o) noexcept;

  int chunk_dim() const { return chunk_dim_; }
  int embed_dim() const { return embed_dim_; }
  std::size_t size() const { return entries_.size(); }
  std::uint64_t version() const { return version_; }
  const Entry& entry(std::size_t index) const { return entries_.at(index); }
  const float* embedding(std::size_t index) const { return emb_.data() + index * static_cast<std::size_t>(embed_dim_); }
  std::size_t index_of(std::uint64_t id) const;

  /// Appends entries with precomputed embeddings; ids continue from the
  /// current maximum. Rebuilds the index and bumps the version.
  void append(std::vector<ScalarGrid3> chunks, std::vector<std::string> tags, const std::vector<float>& embeddings);

  std::vector<Neighbor> knn(const float* query, std::size_t k, const EntryFilter& filter = nullptr) const;
  std::vector<Neighbor> knn_brute(const float* query, std::size_t k, const EntryFilter& filter = nullptr) const;

  void save(std::ostream& os) const;
  static ChunkDatabase load(std::istream& is);
  void save_file(const std::string& path) const;
  static ChunkDatabase load_file(const std::string& path);

 private:
  void reindex();

  int chunk_dim_ = 0;
  int embed_dim_ = 0;
  std::uint64_t version_ = 0;
  std::vector<Entry> entries_;
  std::vector<float> emb_;
  std::vector<std::uint64_t> ids_;
  VpTree tree_;
};

struct BuildOptions {
  bool filter_sparse = true;  // drop chunks below hp.min_chunk_occupancy, keeping one empty chunk
  std::string set_name = "train";
};

/// Embeds every target chunk of the given windows with g_tgt. Window w's
/// chunks are tagged "<set>/<w>".
ChunkDatabase build(const embed::ChunkEncoderPair& enc, const std::vector<ScalarGrid3>& target_windows,
                    const ChunkLayout& layout, const HyperParams& hp, const BuildOptions& opts = {});

/// Appends new target chunks, embedded with the unchanged g_tgt.
void extend(ChunkDatabase& db, const embed::ChunkEncoderPair& enc, const std::vector<ScalarGrid3>& chunks,
            const std::vector<std::string>& tags);

struct ApproxReconstruction {
  int rank = 1;
  ScalarGrid3 scene;
  std::vector<std::uint64_t> ids;  // per chunk slot
};

/// Rank-r candidate scene = the r-th nearest database chunk at every slot.
/// `input_window` is at target resolution.
std::vector<ApproxReconstruction> assemble_approximations(const ChunkDatabase& db,
                                                          const embed::ChunkEncoderPair& enc,
                                                          const ScalarGrid3& input_window,
                                                          const ChunkLayout& layout, int k,
                                                          const EntryFilter& filter = nullptr);

/// Baseline: every slot filled with a uniformly drawn database chunk.
ScalarGrid3 random_assembly(const ChunkDatabase& db, const ChunkLayout& layout, Rng& rng);

/// Excludes entries tagged with the given source window.
EntryFilter exclude_tag(const ChunkDatabase& db, const std::string& tag);

/// Fraction of (input, target) pairs whose target, or a chunk with identical
/// values, is among the k nearest database entries of the embedded input.
double self_retrieval_recall(const ChunkDatabase& db, const embed::ChunkEncoderPair& enc,
                             const std::vector<embed::ChunkPair>& pairs, int k);

bool same_values(const ScalarGrid3& a, const ScalarGrid3& b);

}  // namespace rfuse::db

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "rfuse/grids.hpp"
#include "rfuse/hyperparams.hpp"
#include "rfuse/tensor.hpp"

namespace rfuse::embed {

/// tau' = tau + (1 - tau) * sigmoid(a * iou + b).
double iou_temperature(double tau, double iou, double a, double b);
double iou_temperature(double tau, const ScalarGrid3& yi, const ScalarGrid3& yk, double a, double b,
                       double occ_threshold = 1.0 / 3.0);

/// Contrastive loss over matched rows of x and y (both [N,D], unit rows).
/// Row i scores its positive with temperature tau and every other column k
/// with tau_prime[i*N + k]; the diagonal of tau_prime is ignored.
ad::Tensor ntxent_loss(const ad::Tensor& x, const ad::Tensor& y, const std::vector<double>& tau_prime, double tau);

/// Pairwise IoU temperatures of a batch of target blocks.
std::vector<double> pairwise_temperatures(const std::vector<const ScalarGrid3*>& targets, double tau, double a,
                                          double b, double occ_threshold);

/// Packs same-sized blocks into an [N,1,d,d,d] tensor of (1 - value), so
/// empty space maps to zero.
ad::Tensor stack_blocks(const std::vector<const ScalarGrid3*>& blocks);

/// g_in and g_tgt: strided conv stacks plus a linear head into a shared
/// unit-norm embedding space. Input chunks are given at target resolution.
class ChunkEncoderPair {
 public:
  ChunkEncoderPair() = default;
  ChunkEncoderPair(int chunk_dim, int embed_dim, std::uint64_t seed);

  int chunk_dim() const { return chunk_dim_; }
  int embed_dim() const { return embed_dim_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  ad::Tensor encode_input(const std::vector<const ScalarGrid3*>& chunks) const;
  ad::Tensor encode_target(const std::vector<const ScalarGrid3*>& chunks) const;

  /// Batched inference without graph recording; row-major N x embed_dim.
  std::vector<float> embed_inputs(const std::vector<const ScalarGrid3*>& chunks) const;
  std::vector<float> embed_targets(const std::vector<const ScalarGrid3*>& chunks) const;

  void save_file(const std::string& path) const { params_.save_file(path); }
  void load_file(const std::string& path) { params_.load_file(path); }

 private:
  ad::Tensor encode(const std::string& prefix, const std::vector<const ScalarGrid3*>& chunks) const;
  std::vector<float> embed_batched(const std::string& prefix, const std::vector<const ScalarGrid3*>& chunks) const;

  int chunk_dim_ = 0;
  int embed_dim_ = 0;
  std::vector<int> channels_;
  ad::ParamStore params_;
};

struct ChunkPair {
  ScalarGrid3 input;   // at target resolution
  ScalarGrid3 target;  // normalized TDF
};

/// Drops pairs whose target occupancy is below hp.min_chunk_occupancy,
/// keeping the first such pair as the canonical empty chunk.
std::vector<std::size_t> filter_pairs(const std::vector<ChunkPair>& pairs, const HyperParams& hp);

struct RetrievalTrainOptions {
  int iterations = 2000;
  int checkpoint_every = 0;          // 0 disables periodic checkpoints
  std::string checkpoint_path;       // written every checkpoint_every iterations
  std::ostream* log_csv = nullptr;   // "iteration,loss,lr" rows
};

/// Trains both encoders with the IoU-scaled contrastive loss. Zero
/// iterations returns the freshly initialized encoders.
ChunkEncoderPair train_retrieval(const std::vector<ChunkPair>& pairs, const HyperParams& hp, std::uint64_t seed,
                                 const RetrievalTrainOptions& opts);

/// Mean loss over fixed evaluation batches (no graph).
double evaluate_retrieval_loss(const ChunkEncoderPair& enc, const std::vector<ChunkPair>& pairs,
                               const HyperParams& hp, std::uint64_t seed, int batches);

}  // namespace rfuse::embed

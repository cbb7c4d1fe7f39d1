#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rfuse/embed.hpp"
#include "rfuse/geometry.hpp"
#include "rfuse/grids.hpp"
#include "rfuse/hyperparams.hpp"
#include "rfuse/retrievaldb.hpp"
#include "rfuse/tensor.hpp"

namespace rfuse::fusion {

enum class Mode { attention, naive, no_retrieval };
const char* mode_name(Mode m);
Mode parse_mode(const std::string& s);

// ---- attention blend ------------------------------------------------------

struct AttentionResult {
  ad::Tensor blended;  // [P,F]
  ad::Tensor scores;   // [k,P]
  ad::Tensor weights;  // [k,P]
  ad::Tensor beta;     // [P]
};

/// Patch attention over k aligned retrievals. p_in [P,F], p_retr [k,P,F],
/// h_in [P,A] and h_retr [k,P,A] with unit rows; c and d are one-element
/// tensors. Scores are cosine similarities, weights a softmax over k with
/// sharpness C, and beta = sigmoid(c * max_k s + d) gates input vs. retrieval.
AttentionResult attend(const ad::Tensor& p_in, const ad::Tensor& p_retr, const ad::Tensor& h_in,
                       const ad::Tensor& h_retr, double C, const ad::Tensor& c, const ad::Tensor& d);

// Scalar reference forms of the same formulas.
std::vector<double> attention_scores(const std::vector<double>& h_in, const std::vector<std::vector<double>>& h_retr);
std::vector<double> attention_weights(const std::vector<double>& s, double C);
std::vector<double> blend(const std::vector<double>& p_in, const std::vector<std::vector<double>>& p_retr,
                          const std::vector<double>& s, double C, double c, double d);

// ---- model ----------------------------------------------------------------

struct FusionConfig {
  ChunkLayout layout{32, 8, 4};
  int k = 4;
  int feature_dim = 32;
  int attn_dim = 32;
  double C = 10.0;  // attention softmax sharpness
  Mode mode = Mode::attention;
  bool operator==(const FusionConfig&) const = default;
};

struct PatchAttentionTrace {
  int k = 0;
  std::vector<double> scores;   // [k][P]
  std::vector<double> weights;  // [k][P]
  std::vector<double> beta;     // [P]
};

struct ForwardOutput {
  ad::Tensor pred;       // [1,1,W,W,W]
  ad::Tensor p_retr;     // [k,P,F] retrieved patch features (undefined without retrieval)
  ad::Tensor retr_raw;   // [k*S,F,q,q,q] per-chunk features before reordering
  ad::Tensor h_in;       // [P,A] (attention mode)
  AttentionResult attn;  // attention mode only
};

class FusionModel {
 public:
  FusionModel() = default;
  FusionModel(const FusionConfig& cfg, std::uint64_t seed);

  const FusionConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  /// input: [1,1,W,W,W] encoded window; retrieved: k*S chunks, rank-major.
  ForwardOutput forward(const ad::Tensor& input, const std::vector<const ScalarGrid3*>& retrieved) const;
  /// Decodes a feature volume [N,F,m,m,m] to [N,1,m*p,m*p,m*p] in [0,1].
  ad::Tensor decode(const ad::Tensor& cells) const;
  /// f_retr over chunks: [N,F,q,q,q].
  ad::Tensor retrieval_features(const std::vector<const ScalarGrid3*>& chunks) const;
  /// Reorders per-chunk cells [k*S,F,q,q,q] into scene patch order [k,P,F].
  ad::Tensor to_patch_order(const ad::Tensor& chunk_cells, int k) const;
  /// Attention projections.
  ad::Tensor project_in(const ad::Tensor& cells) const;
  ad::Tensor project_retr(const ad::Tensor& cells) const;

  void save(std::ostream& os) const;
  static FusionModel load(std::istream& is);
  void save_file(const std::string& path) const;
  static FusionModel load_file(const std::string& path);

 private:
  ad::Tensor f_in(const ad::Tensor& x) const;
  ad::Tensor mlp(const std::string& prefix, const ad::Tensor& x) const;

  FusionConfig cfg_;
  int levels_ = 0;  // log2(patch_dim)
  std::vector<int> patch_gather_;  // chunk-cell row -> scene patch row, for one rank
  ad::ParamStore params_;
};

/// Encodes a window for the network: [1,1,W,W,W] holding 1 - value.
ad::Tensor encode_window(const ScalarGrid3& window);

struct RefineResult {
  ScalarGrid3 output;
  PatchAttentionTrace trace;
};

/// Refines an input window (target resolution) given its k aligned
/// approximate reconstructions (rank order). Output is a normalized TDF with
/// the input's placement.
RefineResult refine(const FusionModel& model, const ScalarGrid3& input, const std::vector<ScalarGrid3>& approx);

// ---- loss and training ----------------------------------------------------

struct LossTerms {
  ad::Tensor total;
  double recon = 0, retr = 0, attn = 0;
};

struct FusionSample {
  ScalarGrid3 input;                // target resolution
  ScalarGrid3 target;
  std::vector<ScalarGrid3> approx;  // k windows, rank order
};

/// Full refinement loss for one window. `rng` picks the decoded retrieval
/// chunk and the patches supervising the attention space.
LossTerms refinement_loss(const FusionModel& model, const FusionSample& sample, const HyperParams& hp, Rng& rng);

struct RefineTrainOptions {
  int iterations = 1000;
  double lr = 1e-3;
  std::ostream* log_csv = nullptr;  // "iteration,loss,recon,retr,attn,lr"
};

FusionModel train_refinement(const std::vector<FusionSample>& data, const FusionConfig& cfg, const HyperParams& hp,
                             std::uint64_t seed, const RefineTrainOptions& opts);

// ---- inference over scenes --------------------------------------------------

struct SceneReconstruction {
  ScalarGrid3 tdf;
  geom::TriMesh mesh;
};

/// Sliding-window reconstruction at stride W (disjoint windows). `input` is
/// at target resolution; retrievals come from `db` through `enc`.
SceneReconstruction reconstruct_scene(const FusionModel& model, const db::ChunkDatabase& database,
                                      const embed::ChunkEncoderPair& enc, const ScalarGrid3& input);

}  // namespace rfuse::fusion

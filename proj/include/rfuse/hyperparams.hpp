#pragma once

#include <stdexcept>
#include <string>

namespace rfuse {

/// Every tunable constant of the method in one record. Defaults marked
/// "desk" are scaled-down choices for CPU runs; the others are the
/// published settings.
struct HyperParams {
  double tau_retrieval = 0.2;   // retrieval NTXent temperature
  double tau_attention = 0.05;  // attention NTXent temperature
  int k = 4;                    // retrieval approximations per input
  double lambda_retr = 0.5;
  double lambda_attn = 0.05;
  double C_sharpness = 10.0;  // attention softmax sharpness
  double iou_a = 10.0;        // IoU temperature slope
  double iou_b = -5.0;        // IoU temperature offset
  double trunc_voxels = 3.0;
  int embed_dim = 64;
  int attn_dim = 32;
  double lr = 1e-4;
  int batch_retrieval = 32;  // desk; published value is 196
  int batch_refine = 1;      // desk; published value is 8
  int feature_dim = 32;      // width of patch feature cells (desk)
  double occ_threshold = 1.0 / 3.0;     // normalized TDF below this counts as occupied
  double min_chunk_occupancy = 0.01;    // chunks below this are dropped from training/db
  int attn_batch = 32;                  // patches per step in the attention loss

  void validate() const {
    if (!(tau_retrieval > 0 && tau_retrieval <= 1) || !(tau_attention > 0 && tau_attention <= 1))
      throw std::invalid_argument("temperatures must lie in (0, 1]");
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    if (lambda_retr < 0 || lambda_attn < 0) throw std::invalid_argument("lambdas must be >= 0");
    if (!(C_sharpness > 0)) throw std::invalid_argument("C must be > 0");
    if (!(trunc_voxels > 0)) throw std::invalid_argument("trunc must be > 0");
    if (embed_dim < 1 || attn_dim < 1 || feature_dim < 1)
      throw std::invalid_argument("dimensions must be positive");
    if (batch_retrieval < 2) throw std::invalid_argument("retrieval batch must be >= 2");
    if (batch_refine < 1 || attn_batch < 2) throw std::invalid_argument("bad refinement batch");
  }
};

}  // namespace rfuse

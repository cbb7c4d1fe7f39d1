#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rfuse/geometry.hpp"
#include "rfuse/grids.hpp"

namespace rfuse::metrics {

inline constexpr std::size_t kDefaultSamples = 100000;

struct ChamferResult {
  double cd = 0.0;
  double accuracy = 0.0;      // pred -> gt
  double completeness = 0.0;  // gt -> pred
  bool empty_input = false;   // cd is +inf when either mesh is empty
};

struct FScoreResult {
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct Bounds {
  Vec3 origin = Vec3::Zero();
  Dims3 dims{};
};

/// Per-scene evaluation record.
struct MetricsReport {
  std::string name;
  double iou = 0.0;
  double grid_iou = 0.0;  // IoU of the binarized distance fields, when both are available
  double chamfer_l1 = 0.0;
  double accuracy = 0.0;
  double completeness = 0.0;
  double normal_consistency = 0.0;
  double f_score = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double threshold = 0.0;
  std::size_t sample_count = 0;
  bool pred_empty = false;
  bool gt_empty = false;
};

// Surface integrals are estimated with `samples` area-weighted points per
// mesh. Each mesh's sample stream is derived from `seed` and the mesh content,
// so swapping arguments reuses the same samples and the symmetric metrics are
// exactly symmetric.
ChamferResult chamfer_l1(const geom::TriMesh& pred, const geom::TriMesh& gt,
                         std::size_t samples = kDefaultSamples, std::uint64_t seed = 0);
double normal_consistency(const geom::TriMesh& pred, const geom::TriMesh& gt,
                          std::size_t samples = kDefaultSamples, std::uint64_t seed = 0);
FScoreResult f_score(const geom::TriMesh& pred, const geom::TriMesh& gt, double threshold,
                     std::size_t samples = kDefaultSamples, std::uint64_t seed = 0);

/// IoU of the two meshes' occupancy over a shared voxel grid; 1 when both are
/// empty.
double volumetric_iou(const geom::TriMesh& pred, const geom::TriMesh& gt, double voxel_size,
                      const Bounds& bounds);

/// IoU of binarized TDF blocks (occupied where value < occ_threshold); 1 when
/// both are empty.
double chunk_iou(const ScalarGrid3& a, const ScalarGrid3& b, double occ_threshold = 1.0 / 3.0);

/// All four metrics with shared samples. Empty meshes do not throw: the report
/// carries flags and the both-empty conventions (IoU = 1, F1 = 1).
MetricsReport evaluate(const geom::TriMesh& pred, const geom::TriMesh& gt, double voxel_size,
                       const Bounds& bounds, double threshold, std::size_t samples, std::uint64_t seed);

/// Mean of every numeric field.
MetricsReport aggregate(const std::vector<MetricsReport>& reports);

void write_report_json(std::ostream& os, const std::vector<MetricsReport>& scenes, const MetricsReport& mean);
void write_report_text(std::ostream& os, const std::vector<MetricsReport>& scenes, const MetricsReport& mean);

}  // namespace rfuse::metrics

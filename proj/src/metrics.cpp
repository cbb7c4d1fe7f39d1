#include "rfuse/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "rfuse/rng.hpp"

namespace rfuse::metrics {

namespace {

struct Directional {
  double mean_distance = 0.0;
  double mean_normal_dot = 0.0;  // mean |n(p) . n(proj(p))|
  double within = 0.0;           // fraction with distance <= threshold
};

geom::SurfaceSamples samples_for(const geom::TriMesh& mesh, std::size_t count, std::uint64_t seed) {
  return geom::sample_surface(mesh, count, splitmix64(seed ^ mesh.content_hash()));
}

Directional directional(const geom::TriMesh& from, const geom::SurfaceSamples& s, const geom::TriMesh& to,
                        const geom::TriangleBvh& to_bvh, double threshold) {
  Directional d;
  if (s.points.empty()) return d;
  double dist = 0.0, dot = 0.0;
  std::size_t within = 0;
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    const auto hit = to_bvh.closest(s.points[i]);
    dist += hit.distance;
    dot += std::abs(from.face_normals()[s.faces[i]].dot(to.face_normals()[hit.face]));
    within += hit.distance <= threshold;
  }
  const double n = static_cast<double>(s.points.size());
  d.mean_distance = dist / n;
  d.mean_normal_dot = dot / n;
  d.within = static_cast<double>(within) / n;
  return d;
}

struct PairStats {
  Directional pred_to_gt;
  Directional gt_to_pred;
};

PairStats pair_stats(const geom::TriMesh& pred, const geom::TriMesh& gt, std::size_t samples,
                     std::uint64_t seed, double threshold) {
  if (samples == 0) throw std::invalid_argument("sample count must be positive");
  const auto sp = samples_for(pred, samples, seed);
  const auto sg = samples_for(gt, samples, seed);
  const geom::TriangleBvh bp(pred), bg(gt);
  return {directional(pred, sp, gt, bg, threshold), directional(gt, sg, pred, bp, threshold)};
}

void require_nonempty(const geom::TriMesh& pred, const geom::TriMesh& gt, const char* what) {
  if (pred.empty() || gt.empty()) throw std::invalid_argument(std::string(what) + ": empty mesh");
}

double harmonic(double p, double r) { return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

ChamferResult chamfer_l1(const geom::TriMesh& pred, const geom::TriMesh& gt, std::size_t samples,
                         std::uint64_t seed) {
  ChamferResult r;
  if (pred.empty() || gt.empty()) {
    r.cd = r.accuracy = r.completeness = std::numeric_limits<double>::infinity();
    r.empty_input = true;
    return r;
  }
  const auto st = pair_stats(pred, gt, samples, seed, 0.0);
  r.accuracy = st.pred_to_gt.mean_distance;
  r.completeness = st.gt_to_pred.mean_distance;
  r.cd = 0.5 * (r.accuracy + r.completeness);
  return r;
}

double normal_consistency(const geom::TriMesh& pred, const geom::TriMesh& gt, std::size_t samples,
                          std::uint64_t seed) {
  require_nonempty(pred, gt, "normal_consistency");
  const auto st = pair_stats(pred, gt, samples, seed, 0.0);
  return 0.5 * st.pred_to_gt.mean_normal_dot + 0.5 * st.gt_to_pred.mean_normal_dot;
}

FScoreResult f_score(const geom::TriMesh& pred, const geom::TriMesh& gt, double threshold,
                     std::size_t samples, std::uint64_t seed) {
  if (!(threshold > 0)) throw std::invalid_argument("f_score threshold must be > 0");
  require_nonempty(pred, gt, "f_score");
  const auto st = pair_stats(pred, gt, samples, seed, threshold);
  FScoreResult r;
  r.precision = st.pred_to_gt.within;
  r.recall = st.gt_to_pred.within;
  r.f1 = harmonic(r.precision, r.recall);
  return r;
}

double volumetric_iou(const geom::TriMesh& pred, const geom::TriMesh& gt, double voxel_size,
                      const Bounds& bounds) {
  // Surface voxels are included so that slabs thinner than a voxel still count.
  const auto a = geom::voxelize_mesh(pred, bounds.dims, voxel_size, bounds.origin, true).grid;
  const auto b = geom::voxelize_mesh(gt, bounds.dims, voxel_size, bounds.origin, true).grid;
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] > 0.5f, y = b[i] > 0.5f;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double chunk_iou(const ScalarGrid3& a, const ScalarGrid3& b, double occ_threshold) {
  if (a.dims() != b.dims()) throw GridError("chunk_iou: dims " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  std::size_t inter = 0, uni = 0;
  const float thr = static_cast<float>(occ_threshold);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] < thr, y = b[i] < thr;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MetricsReport evaluate(const geom::TriMesh& pred, const geom::TriMesh& gt, double voxel_size,
                       const Bounds& bounds, double threshold, std::size_t samples, std::uint64_t seed) {
  MetricsReport r;
  r.threshold = threshold;
  r.sample_count = samples;
  r.pred_empty = pred.empty();
  r.gt_empty = gt.empty();
  r.iou = volumetric_iou(pred, gt, voxel_size, bounds);
  if (r.pred_empty || r.gt_empty) {
    const bool both = r.pred_empty && r.gt_empty;
    const double inf = std::numeric_limits<double>::infinity();
    r.chamfer_l1 = r.accuracy = r.completeness = both ? 0.0 : inf;
    r.normal_consistency = both ? 1.0 : 0.0;
    r.f_score = r.precision = r.recall = both ? 1.0 : 0.0;
    return r;
  }
  const auto st = pair_stats(pred, gt, samples, seed, threshold);
  r.accuracy = st.pred_to_gt.mean_distance;
  r.completeness = st.gt_to_pred.mean_distance;
  r.chamfer_l1 = 0.5 * (r.accuracy + r.completeness);
  r.normal_consistency = 0.5 * st.pred_to_gt.mean_normal_dot + 0.5 * st.gt_to_pred.mean_normal_dot;
  r.precision = st.pred_to_gt.within;
  r.recall = st.gt_to_pred.within;
  r.f_score = harmonic(r.precision, r.recall);
  return r;
}

MetricsReport aggregate(const std::vector<MetricsReport>& reports) {
  MetricsReport m;
  m.name = "mean";
  if (reports.empty()) return m;
  for (const auto& r : reports) {
    m.iou += r.iou;
    m.grid_iou += r.grid_iou;
    m.chamfer_l1 += r.chamfer_l1;
    m.accuracy += r.accuracy;
    m.completeness += r.completeness;
    m.normal_consistency += r.normal_consistency;
    m.f_score += r.f_score;
    m.precision += r.precision;
    m.recall += r.recall;
    m.threshold += r.threshold;
    m.sample_count += r.sample_count;
    m.pred_empty = m.pred_empty || r.pred_empty;
    m.gt_empty = m.gt_empty || r.gt_empty;
  }
  const double n = static_cast<double>(reports.size());
  m.iou /= n;
  m.grid_iou /= n;
  m.chamfer_l1 /= n;
  m.accuracy /= n;
  m.completeness /= n;
  m.normal_consistency /= n;
  m.f_score /= n;
  m.precision /= n;
  m.recall /= n;
  m.threshold /= n;
  m.sample_count /= reports.size();
  return m;
}

namespace {

nlohmann::json to_json(const MetricsReport& r) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return v > 0 ? "inf" : "-inf";
  };
  return {{"name", r.name},
          {"iou", num(r.iou)},
          {"grid_iou", num(r.grid_iou)},
          {"chamfer_l1", num(r.chamfer_l1)},
          {"accuracy", num(r.accuracy)},
          {"completeness", num(r.completeness)},
          {"normal_consistency", num(r.normal_consistency)},
          {"f_score", num(r.f_score)},
          {"precision", num(r.precision)},
          {"recall", num(r.recall)},
          {"threshold", num(r.threshold)},
          {"sample_count", r.sample_count},
          {"pred_empty", r.pred_empty},
          {"gt_empty", r.gt_empty}};
}

}  // namespace

void write_report_json(std::ostream& os, const std::vector<MetricsReport>& scenes, const MetricsReport& mean) {
  nlohmann::json j;
  j["scenes"] = nlohmann::json::array();
  for (const auto& r : scenes) j["scenes"].push_back(to_json(r));
  j["mean"] = to_json(mean);
  os << j.dump(2) << '\n';
}

void write_report_text(std::ostream& os, const std::vector<MetricsReport>& scenes, const MetricsReport& mean) {
  char buf[256];
  auto row = [&](const MetricsReport& r) {
    std::snprintf(buf, sizeof buf, "%-24s iou=%.6f grid_iou=%.6f cd=%.6f nc=%.6f f1=%.6f precision=%.6f recall=%.6f\n",
                  r.name.c_str(), r.iou, r.grid_iou, r.chamfer_l1, r.normal_consistency, r.f_score, r.precision, r.recall);
    os << buf;
  };
  for (const auto& r : scenes) row(r);
  row(mean);
}

}  // namespace rfuse::metrics

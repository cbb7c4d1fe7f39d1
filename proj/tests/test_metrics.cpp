#include <doctest.h>

#include <set>
#include <sstream>

#include <json.hpp>

#include "rfuse/geometry.hpp"
#include "rfuse/metrics.hpp"
#include "rfuse/rng.hpp"

using namespace rfuse;
using namespace rfuse::metrics;
using geom::TriMesh;

namespace {

constexpr std::size_t kSamples = 20000;

TriMesh jitter(const TriMesh& m, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  auto v = m.vertices();
  for (auto& p : v) p += Vec3(n(rng), n(rng), n(rng));
  return TriMesh(v, m.faces());
}

// Rotates a mesh by 90 degrees about the x axis around `c`.
TriMesh rotate_x90(const TriMesh& m, const Vec3& c) {
  auto v = m.vertices();
  for (auto& p : v) {
    const Vec3 d = p - c;
    p = c + Vec3(d.x(), -d.z(), d.y());
  }
  return TriMesh(v, m.faces());
}

TriMesh flipped(const TriMesh& m) {
  auto f = m.faces();
  for (auto& t : f) std::swap(t[1], t[2]);
  return TriMesh(m.vertices(), f);
}

}  // namespace

TEST_CASE("identical meshes score perfectly") {
  const auto s = geom::make_uv_sphere(Vec3(0.5, 0.5, 0.5), 0.3, 24, 32);
  const auto cd = chamfer_l1(s, s, kSamples, 1);
  CHECK(cd.cd < 1e-6);
  CHECK_FALSE(cd.empty_input);
  CHECK(normal_consistency(s, s, kSamples, 1) >= 0.999);
  const auto f = f_score(s, s, 0.01, kSamples, 1);
  CHECK(f.f1 == 1.0);
  CHECK(volumetric_iou(s, s, 1.0 / 32, {Vec3::Zero(), {32, 32, 32}}) == 1.0);
}

TEST_CASE("offset planes measure the analytic distance") {
  const auto a = geom::make_square(2, 0.0, 0.0, 1.0);
  const auto b = geom::make_square(2, 0.1, 0.0, 1.0);
  const auto cd = chamfer_l1(a, b, kSamples, 3);
  CHECK(std::abs(cd.cd - 0.1) < 1e-3);
  CHECK(std::abs(cd.accuracy - 0.1) < 1e-3);
  CHECK(std::abs(cd.completeness - 0.1) < 1e-3);

  // Offset by half the threshold: every sample is within it.
  const auto c = geom::make_square(2, 0.005, 0.0, 1.0);
  CHECK(f_score(a, c, 0.01, kSamples, 3).f1 == 1.0);
  // Farther than the threshold everywhere.
  CHECK(f_score(a, b, 0.01, kSamples, 3).f1 == 0.0);
}

TEST_CASE("normal consistency of orthogonal and flipped planes") {
  const auto a = geom::make_square(2, 0.5, 0.0, 1.0);
  const auto r = rotate_x90(a, Vec3(0.5, 0.5, 0.5));
  CHECK(std::abs(normal_consistency(a, r, kSamples, 2)) < 0.02);
  CHECK(normal_consistency(a, flipped(a), kSamples, 2) == doctest::Approx(1.0));
}

TEST_CASE("metrics are exactly symmetric under argument swap") {
  const auto a = geom::make_uv_sphere(Vec3(0.5, 0.5, 0.5), 0.3);
  const auto b = geom::make_box(Vec3(0.25, 0.3, 0.2), Vec3(0.8, 0.75, 0.7));
  const Bounds bounds{Vec3::Zero(), {32, 32, 32}};
  const auto ab = chamfer_l1(a, b, kSamples, 9), ba = chamfer_l1(b, a, kSamples, 9);
  CHECK(ab.cd == ba.cd);
  CHECK(ab.accuracy == ba.completeness);
  CHECK(normal_consistency(a, b, kSamples, 9) == normal_consistency(b, a, kSamples, 9));
  const auto fab = f_score(a, b, 0.02, kSamples, 9), fba = f_score(b, a, 0.02, kSamples, 9);
  CHECK(fab.f1 == fba.f1);
  CHECK(fab.precision == fba.recall);
  CHECK(volumetric_iou(a, b, 1.0 / 32, bounds) == volumetric_iou(b, a, 1.0 / 32, bounds));
}

TEST_CASE("volumetric IoU of cubes") {
  const Bounds bounds{Vec3(-0.5, -0.5, -0.5), {32, 32, 32}};
  const double vs = 3.0 / 32;
  const auto a = geom::make_box(Vec3(0, 0, 0), Vec3(1, 1, 1));
  const auto half = geom::make_box(Vec3(0.5, 0, 0), Vec3(1.5, 1, 1));
  const auto far = geom::make_box(Vec3(1.6, 1.6, 1.6), Vec3(2.4, 2.4, 2.4));
  CHECK(std::abs(volumetric_iou(a, half, vs, bounds) - 1.0 / 3.0) < 0.03);
  CHECK(volumetric_iou(a, far, vs, bounds) == 0.0);
  CHECK(volumetric_iou(TriMesh{}, TriMesh{}, vs, bounds) == 1.0);
}

TEST_CASE("chunk_iou matches a counting oracle") {
  ScalarGrid3 empty = ScalarGrid3::cube(8, 1.0, 1.0f);
  ScalarGrid3 one = empty;
  one.at(3, 4, 5) = 0.0f;
  CHECK(chunk_iou(empty, one) == 0.0);
  CHECK(chunk_iou(one, one) == 1.0);
  CHECK(chunk_iou(empty, empty) == 1.0);
  CHECK_THROWS_AS(chunk_iou(empty, ScalarGrid3::cube(4)), GridError);

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ScalarGrid3 a = empty, b = empty;
    std::set<std::size_t> sa, sb;
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = static_cast<float>(uniform01(rng));
      b[i] = static_cast<float>(uniform01(rng));
      if (a[i] < 1.0f / 3.0f) sa.insert(i);
      if (b[i] < 1.0f / 3.0f) sb.insert(i);
    }
    std::size_t inter = 0;
    for (auto i : sa) inter += sb.count(i);
    const std::size_t uni = sa.size() + sb.size() - inter;
    CHECK(chunk_iou(a, b) == static_cast<double>(inter) / static_cast<double>(uni));
  }
}

TEST_CASE("jitter degrades chamfer and f-score monotonically") {
  const auto s = geom::make_uv_sphere(Vec3(0.5, 0.5, 0.5), 0.3, 24, 32);
  double prev_cd = chamfer_l1(s, s, kSamples, 4).cd, prev_f1 = 1.0;
  for (double sigma : {0.01, 0.02, 0.05}) {
    const auto j = jitter(s, sigma, 77);
    const double cd = chamfer_l1(j, s, kSamples, 4).cd;
    const double f1 = f_score(j, s, 0.01, kSamples, 4).f1;
    CHECK(cd > prev_cd);
    CHECK(f1 < prev_f1);
    prev_cd = cd;
    prev_f1 = f1;
  }
}

TEST_CASE("empty meshes") {
  const auto s = geom::make_box(Vec3::Zero(), Vec3::Ones());
  const auto cd = chamfer_l1(TriMesh{}, s, kSamples, 0);
  CHECK(cd.empty_input);
  CHECK(std::isinf(cd.cd));
  CHECK_THROWS(normal_consistency(TriMesh{}, s, kSamples, 0));
  CHECK_THROWS(f_score(s, TriMesh{}, 0.01, kSamples, 0));
  CHECK_THROWS(f_score(s, s, 0.0, kSamples, 0));

  const Bounds bounds{Vec3(-0.5, -0.5, -0.5), {16, 16, 16}};
  const auto r = evaluate(TriMesh{}, s, 0.125, bounds, 0.01, 1000, 0);
  CHECK(r.pred_empty);
  CHECK(r.iou == 0.0);
  CHECK(r.f_score == 0.0);
  const auto both = evaluate(TriMesh{}, TriMesh{}, 0.125, bounds, 0.01, 1000, 0);
  CHECK(both.iou == 1.0);
  CHECK(both.f_score == 1.0);
}

TEST_CASE("evaluate is deterministic and reports serialize") {
  const auto a = geom::make_uv_sphere(Vec3(0.5, 0.5, 0.5), 0.3);
  const auto b = geom::make_box(Vec3(0.25, 0.3, 0.2), Vec3(0.8, 0.75, 0.7));
  const Bounds bounds{Vec3::Zero(), {32, 32, 32}};
  auto r1 = evaluate(a, b, 1.0 / 32, bounds, 0.01, 5000, 12);
  auto r2 = evaluate(a, b, 1.0 / 32, bounds, 0.01, 5000, 12);
  r1.name = r2.name = "scene";
  CHECK(r1.chamfer_l1 == r2.chamfer_l1);
  CHECK(r1.f_score == r2.f_score);
  CHECK(r1.iou >= 0.0);
  CHECK(r1.iou <= 1.0);

  const auto mean = aggregate({r1, r2});
  CHECK(mean.chamfer_l1 == doctest::Approx(r1.chamfer_l1));
  std::stringstream js;
  write_report_json(js, {r1, r2}, mean);
  const auto j = nlohmann::json::parse(js.str());
  CHECK(j["scenes"].size() == 2);
  CHECK(j["mean"]["iou"].get<double>() == doctest::Approx(r1.iou));
  std::stringstream txt;
  write_report_text(txt, {r1}, mean);
  CHECK(txt.str().find("mean") != std::string::npos);
}

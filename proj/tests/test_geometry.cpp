#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "rfuse/geometry.hpp"
#include "rfuse/rng.hpp"

using namespace rfuse;
using namespace rfuse::geom;

namespace {

double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (a + t * ab - p).norm();
}

// Independent oracle: plane projection when it lands inside the triangle,
// otherwise the nearest of the three edges.
double triangle_distance_oracle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 n = (b - a).cross(c - a).normalized();
  const Vec3 q = p - n * n.dot(p - a);
  const double s1 = n.dot((b - a).cross(q - a));
  const double s2 = n.dot((c - b).cross(q - b));
  const double s3 = n.dot((a - c).cross(q - c));
  if (s1 >= 0 && s2 >= 0 && s3 >= 0) return (p - q).norm();
  return std::min({segment_distance(p, a, b), segment_distance(p, b, c), segment_distance(p, c, a)});
}

// Analytic sphere TDF (normalized, trunc 3) on a voxel grid.
ScalarGrid3 sphere_tdf(int dim, double radius_vox, double trunc = 3.0) {
  ScalarGrid3 g = ScalarGrid3::cube(dim, 1.0);
  const Vec3 c = Vec3::Constant(dim / 2.0);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j)
      for (int k = 0; k < dim; ++k) {
        const double d = std::abs((g.voxel_center(i, j, k) - c).norm() - radius_vox);
        g.at(i, j, k) = static_cast<float>(std::min(d, trunc) / trunc);
      }
  return g;
}

double grid_sum(const ScalarGrid3& g) {
  double s = 0;
  for (float v : g.values()) s += v;
  return s;
}

}  // namespace

TEST_CASE("TriMesh drops degenerate faces and validates indices") {
  std::vector<Vec3> v{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {2, 0, 0}};
  TriMesh m(v, {{0, 1, 2}, {0, 1, 3}});
  CHECK(m.faces().size() == 1);
  CHECK(m.dropped_faces() == 1);
  CHECK(m.face_normals()[0].norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS(TriMesh(v, {{0, 1, 7}}));
}

TEST_CASE("primitives are closed with outward normals") {
  for (const auto& mesh : {make_box(Vec3(0, 0, 0), Vec3(1, 2, 3)), make_uv_sphere(Vec3(1, 1, 1), 2.0),
                           make_cylinder(Vec3(0, 0, 0), 1.0, 2.0)}) {
    CHECK(boundary_edge_count(mesh) == 0);
    CHECK(euler_characteristic(mesh) == 2);
  }
  auto box = make_box(Vec3(0, 0, 0), Vec3(1, 1, 1));
  for (std::size_t f = 0; f < box.faces().size(); ++f) {
    const auto& t = box.faces()[f];
    const Vec3 c = (box.vertices()[t[0]] + box.vertices()[t[1]] + box.vertices()[t[2]]) / 3.0;
    CHECK(box.face_normals()[f].dot(c - Vec3::Constant(0.5)) > 0);
  }
  CHECK(box.area() == doctest::Approx(6.0));
}

TEST_CASE("OBJ round trip with polygon fan triangulation") {
  std::istringstream in("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n");
  auto quad = read_obj(in);
  CHECK(quad.faces().size() == 2);
  std::stringstream out;
  write_obj(out, quad);
  auto back = read_obj(out);
  CHECK(back.faces() == quad.faces());
  CHECK(back.vertices() == quad.vertices());
}

TEST_CASE("closest point agrees with an independent oracle") {
  Rng rng(3);
  for (int t = 0; t < 2000; ++t) {
    Vec3 a(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    Vec3 b(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    Vec3 c(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    Vec3 p(uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -2, 2));
    const double d = (closest_point_on_triangle(p, a, b, c) - p).norm();
    REQUIRE(d == doctest::Approx(triangle_distance_oracle(p, a, b, c)).epsilon(1e-9));
  }
}

TEST_CASE("BVH closest point equals brute force") {
  auto mesh = make_uv_sphere(Vec3(0, 0, 0), 1.0, 12, 18);
  mesh.append(make_box(Vec3(1.5, -0.5, -0.5), Vec3(2.5, 0.5, 0.5)));
  TriangleBvh bvh(mesh);
  Rng rng(5);
  for (int t = 0; t < 500; ++t) {
    Vec3 p(uniform(rng, -3, 3), uniform(rng, -3, 3), uniform(rng, -3, 3));
    double best = 1e300;
    for (const auto& f : mesh.faces())
      best = std::min(best, (closest_point_on_triangle(p, mesh.vertices()[f[0]], mesh.vertices()[f[1]],
                                                       mesh.vertices()[f[2]]) - p).norm());
    REQUIRE(bvh.closest(p).distance == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("mesh_to_tdf") {
  SUBCASE("square on a voxel-center plane is zero on that plane") {
    auto sq = make_square(2, 4.5, 0.0, 8.0);
    auto tdf = mesh_to_tdf(sq, {8, 8, 8}, 1.0, Vec3::Zero(), 3.0);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) {
        CHECK(tdf.at(i, j, 4) == 0.0f);
        CHECK(tdf.at(i, j, 3) == doctest::Approx(1.0 / 3.0));
        CHECK(tdf.at(i, j, 0) == 1.0f);
      }
  }
  SUBCASE("sphere center lies beyond truncation") {
    auto sphere = make_uv_sphere(Vec3(8, 8, 8), 6.0);
    auto tdf = mesh_to_tdf(sphere, {16, 16, 16}, 1.0, Vec3::Zero(), 3.0);
    CHECK(tdf.at(7, 7, 7) == 1.0f);
    CHECK(tdf.at(8, 8, 8) == 1.0f);
  }
  SUBCASE("random triangle matches the exhaustive oracle on sampled voxels") {
    Rng rng(17);
    const Vec3 a(uniform(rng, 2, 14), uniform(rng, 2, 14), uniform(rng, 2, 14));
    const Vec3 b(uniform(rng, 2, 14), uniform(rng, 2, 14), uniform(rng, 2, 14));
    const Vec3 c(uniform(rng, 2, 14), uniform(rng, 2, 14), uniform(rng, 2, 14));
    const double vs = 0.5, trunc = 3.0;
    // Coordinates were drawn in voxel units; the mesh lives in meters.
    TriMesh scaled({a * vs, b * vs, c * vs}, {{0, 1, 2}});
    auto tdf = mesh_to_tdf(scaled, {32, 32, 32}, vs, Vec3::Zero(), trunc);
    int checked = 0;
    while (checked < 50) {
      const int i = static_cast<int>(uniform_index(rng, 32)), j = static_cast<int>(uniform_index(rng, 32)),
                k = static_cast<int>(uniform_index(rng, 32));
      const double d = triangle_distance_oracle(tdf.voxel_center(i, j, k), a * vs, b * vs, c * vs) / vs;
      const double expected = std::min(d, trunc) / trunc;
      CHECK(std::abs(tdf.at(i, j, k) - expected) < 1e-6);
      ++checked;
    }
  }
  CHECK_THROWS(mesh_to_tdf(TriMesh(), {4, 4, 4}, 1.0, Vec3::Zero(), 3.0));
}

TEST_CASE("marching cubes on an analytic sphere") {
  const double r = 10.0;
  auto tdf = sphere_tdf(32, r);
  auto mesh = marching_cubes(tdf);
  REQUIRE(!mesh.empty());
  const double analytic = 4.0 * std::numbers::pi * r * r;
  CHECK(std::abs(mesh.area() - analytic) / analytic < 0.05);
  CHECK(euler_characteristic(mesh) == 2);
  CHECK(boundary_edge_count(mesh) == 0);
  // Normals point outwards (towards the positive exterior).
  const Vec3 center = Vec3::Constant(16.0);
  int outward = 0;
  for (std::size_t f = 0; f < mesh.faces().size(); ++f) {
    const auto& t = mesh.faces()[f];
    const Vec3 c = (mesh.vertices()[t[0]] + mesh.vertices()[t[1]] + mesh.vertices()[t[2]]) / 3.0;
    outward += mesh.face_normals()[f].dot(c - center) > 0;
  }
  CHECK(outward == static_cast<int>(mesh.faces().size()));
}

TEST_CASE("marching cubes edge cases") {
  CHECK(marching_cubes(ScalarGrid3::cube(8, 1.0, 1.0f)).empty());
  CHECK(marching_cubes_signed(ScalarGrid3::cube(8, 1.0, -1.0f)).empty());

  // Random fields never produce NaN vertices or bad indices.
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    ScalarGrid3 g = ScalarGrid3::cube(10, 0.5);
    for (auto& v : g.values()) v = static_cast<float>(uniform(rng, -1, 1));
    auto m = marching_cubes_signed(g);
    for (const auto& v : m.vertices()) REQUIRE(v.allFinite());
    for (const auto& f : m.faces())
      for (int idx : f) REQUIRE((idx >= 0 && idx < static_cast<int>(m.vertices().size())));
    CHECK(boundary_edge_count(m) >= 0);
  }
}

TEST_CASE("marching cubes tables give watertight surfaces for every corner configuration") {
  // Every 3x3x3 pattern that stays inside the grid interior closes up.
  Rng rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    ScalarGrid3 g = ScalarGrid3::cube(5, 1.0, 1.0f);
    for (int i = 1; i < 4; ++i)
      for (int j = 1; j < 4; ++j)
        for (int k = 1; k < 4; ++k) g.at(i, j, k) = uniform01(rng) < 0.5 ? -1.0f : 1.0f;
    auto m = marching_cubes_signed(g);
    REQUIRE(boundary_edge_count(m) == 0);
  }
}

TEST_CASE("mesh_to_tdf then marching cubes recovers a sphere radius") {
  const double r = 10.0;
  auto sphere = make_uv_sphere(Vec3::Constant(16.0), r, 48, 64);
  auto tdf = mesh_to_tdf(sphere, {32, 32, 32}, 1.0, Vec3::Zero(), 3.0);
  auto mesh = marching_cubes(tdf);
  REQUIRE(!mesh.empty());
  double mean = 0;
  for (const auto& v : mesh.vertices()) mean += (v - Vec3::Constant(16.0)).norm();
  mean /= static_cast<double>(mesh.vertices().size());
  CHECK(std::abs(mean - r) < 0.5);
}

TEST_CASE("sample_surface") {
  auto tri = TriMesh({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}, {{0, 1, 2}});
  CHECK(sample_surface(tri, 0, 1).points.empty());
  CHECK_THROWS(sample_surface(TriMesh(), 3, 1));

  auto s = sample_surface(tri, 10000, 7);
  Vec3 mean = Vec3::Zero();
  for (const auto& p : s.points) {
    CHECK(std::abs(p.z()) < 1e-6);
    CHECK(p.x() >= -1e-12);
    CHECK(p.y() >= -1e-12);
    CHECK(p.x() + p.y() <= 1.0 + 1e-12);
    mean += p;
  }
  mean /= 10000.0;
  const Vec3 centroid(1.0 / 3.0, 1.0 / 3.0, 0);
  // Centroid within 2% of the triangle's extent.
  CHECK((mean - centroid).norm() < 0.02);

  // Same seed, same samples.
  auto again = sample_surface(tri, 10000, 7);
  CHECK(again.points == s.points);

  // Area ratio 3:1 -> counts 3:1 within 2%.
  TriMesh two({{0, 0, 0}, {3, 0, 0}, {0, 1, 0}, {10, 0, 0}, {11, 0, 0}, {10, 1, 0}}, {{0, 1, 2}, {3, 4, 5}});
  auto s2 = sample_surface(two, 100000, 3);
  std::size_t first = 0;
  for (int f : s2.faces) first += f == 0;
  const double ratio = static_cast<double>(first) / static_cast<double>(100000 - first);
  CHECK(std::abs(ratio - 3.0) / 3.0 < 0.02);
}

TEST_CASE("thin slabs cut by the window mesh as closed surfaces") {
  // One voxel thick, spanning the whole window in x and y.
  auto slab = make_box(Vec3(-1, -1, 3.5), Vec3(17, 17, 4.5));
  auto tdf = mesh_to_tdf(slab, {16, 16, 16}, 1.0, Vec3::Zero(), 3.0);
  auto mesh = marching_cubes(tdf);
  REQUIRE(!mesh.empty());
  CHECK(boundary_edge_count(mesh) == 0);
  CHECK(mesh.dropped_faces() == 0);
  for (const auto& v : mesh.vertices()) CHECK(std::abs(v.z() - 4.0) <= 1.0);
}

TEST_CASE("voxelize_mesh") {
  SUBCASE("surface voxels count for slabs thinner than a voxel") {
    auto sheet = make_box(Vec3(0.5, 0.5, 2.2), Vec3(3.5, 3.5, 2.4));
    CHECK(grid_sum(voxelize_mesh(sheet, {4, 4, 4}, 1.0, Vec3::Zero()).grid) == 0.0);
    auto res = voxelize_mesh(sheet, {4, 4, 4}, 1.0, Vec3::Zero(), true);
    CHECK(!res.open_mesh);
    CHECK(grid_sum(res.grid) == 16.0);
    CHECK(res.grid.at(1, 1, 2) == 1.0f);
  }
  SUBCASE("solid cube aligned with voxel boundaries") {
    auto cube = make_box(Vec3(4, 4, 4), Vec3(12, 12, 12));
    auto res = voxelize_mesh(cube, {16, 16, 16}, 1.0, Vec3::Zero());
    CHECK(!res.open_mesh);
    CHECK(grid_sum(res.grid) == 512.0);
    CHECK(res.grid.at(4, 4, 4) == 1.0f);
    CHECK(res.grid.at(3, 4, 4) == 0.0f);
  }
  SUBCASE("empty mesh") {
    auto res = voxelize_mesh(TriMesh(), {4, 4, 4}, 1.0, Vec3::Zero());
    CHECK(grid_sum(res.grid) == 0.0);
  }
  SUBCASE("sphere volume") {
    const double r = 10.0;
    auto sphere = make_uv_sphere(Vec3::Constant(16.0), r, 64, 96);
    auto res = voxelize_mesh(sphere, {32, 32, 32}, 1.0, Vec3::Zero());
    const double analytic = 4.0 / 3.0 * std::numbers::pi * r * r * r;
    CHECK(std::abs(grid_sum(res.grid) - analytic) / analytic < 0.03);
  }
  SUBCASE("overlapping closed parts are a union") {
    auto m = make_box(Vec3(1, 1, 1), Vec3(5, 5, 5));
    m.append(make_box(Vec3(3, 3, 3), Vec3(7, 7, 7)));
    auto res = voxelize_mesh(m, {8, 8, 8}, 1.0, Vec3::Zero());
    CHECK(grid_sum(res.grid) == 64.0 + 64.0 - 8.0);
  }
  SUBCASE("open mesh falls back to the surface shell") {
    auto sq = make_square(2, 2.5, 0.5, 3.5);
    auto res = voxelize_mesh(sq, {4, 4, 4}, 1.0, Vec3::Zero());
    CHECK(res.open_mesh);
    CHECK(grid_sum(res.grid) == 16.0);
  }
}

TEST_CASE("voxelized marching-cubes sphere matches analytic occupancy") {
  const double r = 10.0;
  auto mesh = marching_cubes(sphere_tdf(32, r));
  auto vox = voxelize_mesh(mesh, {32, 32, 32}, 1.0, Vec3::Zero()).grid;
  double inter = 0, uni = 0;
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j)
      for (int k = 0; k < 32; ++k) {
        const bool a = (vox.voxel_center(i, j, k) - Vec3::Constant(16.0)).norm() < r;
        const bool b = vox.at(i, j, k) > 0.5f;
        inter += a && b;
        uni += a || b;
      }
  CHECK(inter / uni >= 0.95);
}

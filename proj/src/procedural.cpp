#include "rfuse/procedural.hpp"

#include <algorithm>
#include <stdexcept>

#include "rfuse/rng.hpp"

namespace rfuse::pipeline {

const char* furnishing_name(Furnishing f) {
  switch (f) {
    case Furnishing::box: return "box";
    case Furnishing::cylinder: return "cylinder";
    case Furnishing::sphere: return "sphere";
  }
  return "?";
}

Furnishing parse_furnishing(const std::string& s) {
  if (s == "box") return Furnishing::box;
  if (s == "cylinder") return Furnishing::cylinder;
  if (s == "sphere") return Furnishing::sphere;
  throw std::invalid_argument("unknown furnishing category '" + s + "' (box, cylinder, sphere)");
}

namespace {

int uniform_int(Rng& rng, int lo, int hi) {  // inclusive
  return lo + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(hi - lo + 1)));
}

// Geometry is laid out in voxel units and scaled at the end; z is up.
geom::TriMesh build_room(const RoomParams& p, Rng& rng, std::vector<Furnishing>& items) {
  const double n = p.scene_dim;
  const double s = n / 32.0;  // size scale relative to the mini window
  geom::TriMesh mesh;
  const double floor_top = std::max(1.5, std::round(2.0 * s));
  mesh.append(geom::make_box({0.5, 0.5, 0.5}, {n - 0.5, n - 0.5, floor_top}));

  // Walls on distinct sides: 0 = x-, 1 = x+, 2 = y-, 3 = y+.
  std::vector<int> sides{0, 1, 2, 3};
  shuffle(sides.begin(), sides.end(), rng);
  const int walls = uniform_int(rng, p.min_walls, p.max_walls);
  const double t = std::max(1.5, 1.5 * s);
  for (int w = 0; w < walls; ++w) {
    const double h = std::round(uniform(rng, 0.5, 0.9) * n);
    Vec3 lo{0.5, 0.5, floor_top}, hi{n - 0.5, n - 0.5, h};
    switch (sides[w]) {
      case 0: hi.x() = 0.5 + t; break;
      case 1: lo.x() = n - 0.5 - t; break;
      case 2: hi.y() = 0.5 + t; break;
      default: lo.y() = n - 0.5 - t; break;
    }
    mesh.append(geom::make_box(lo, hi));
  }

  if (p.categories.empty()) throw std::invalid_argument("room generator needs at least one furnishing category");
  const int count = uniform_int(rng, p.min_items, p.max_items);
  const double margin = t + 2.0;
  for (int i = 0; i < count; ++i) {
    Furnishing f = p.categories[uniform_index(rng, p.categories.size())];
    if (p.require_category && i == 0) f = p.required;
    items.push_back(f);
    // Shape parameters: fresh, or one of the catalog instances.
    Rng catalog = make_rng(p.catalog_seed, std::string("catalog/") + furnishing_name(f) + "/" +
                                               std::to_string(p.catalog_size > 0 ? uniform_index(rng, p.catalog_size) : 0));
    Rng& shape = p.catalog_size > 0 ? catalog : rng;
    const double r = uniform(shape, 2.5, 6.0) * s;  // footprint half-size
    const double a = uniform(shape, 0.6, 1.0), b = uniform(shape, 0.6, 1.0), c = uniform(shape, 0.0, 1.0);
    auto place = [&](double lo, double hi) {
      const double v = uniform(rng, lo, hi);
      if (p.position_step <= 0) return v;
      const double q = std::round(v / p.position_step) * p.position_step;
      return std::clamp(q, lo, hi);
    };
    const double cx = place(margin + r, n - margin - r);
    const double cy = place(margin + r, n - margin - r);
    switch (f) {
      case Furnishing::box: {
        const double hx = r * a, hy = r * b;
        const double h = (3.0 + 7.0 * c) * s;
        mesh.append(geom::make_box({cx - hx, cy - hy, floor_top}, {cx + hx, cy + hy, floor_top + h}));
        break;
      }
      case Furnishing::cylinder: {
        const double h = (4.0 + 8.0 * c) * s;
        mesh.append(geom::make_cylinder({cx, cy, floor_top}, r * 0.8, h, 20));
        break;
      }
      case Furnishing::sphere: {
        const double lift = 4.0 * c * s;
        mesh.append(geom::make_uv_sphere({cx, cy, floor_top + r + lift}, r, 12, 18));
        break;
      }
    }
  }
  // Scale from voxel units to metres.
  std::vector<Vec3> verts = mesh.vertices();
  for (auto& v : verts) v *= p.voxel_size;
  return geom::TriMesh(std::move(verts), mesh.faces());
}

}  // namespace

Scene generate_scene(const RoomParams& p, std::uint64_t seed, const std::string& name) {
  if (p.scene_dim < 8 || p.coarsen_factor < 1 || p.scene_dim % p.coarsen_factor)
    throw std::invalid_argument("room params: scene_dim must be >= 8 and divisible by the coarsen factor");
  if (p.min_walls < 0 || p.max_walls > 4 || p.min_walls > p.max_walls || p.min_items < 0 ||
      p.min_items > p.max_items || (p.require_category && p.max_items < 1))
    throw std::invalid_argument("room params: bad wall or item range");
  Rng rng = make_rng(seed, "room");
  const Dims3 dims{p.scene_dim, p.scene_dim, p.scene_dim};
  for (int attempt = 0; attempt < 64; ++attempt) {
    Scene sc;
    sc.name = name;
    sc.mesh = build_room(p, rng, sc.items);
    sc.target = geom::mesh_to_tdf(sc.mesh, dims, p.voxel_size, Vec3::Zero(), p.trunc_voxels);
    const double occ = occupancy_fraction(sc.target, static_cast<float>(1.0 / 3.0));
    if (occ < p.min_occupancy || occ > p.max_occupancy) continue;
    sc.coarse = coarsen(sc.target, p.coarsen_factor);
    const auto pts = geom::sample_surface(sc.mesh, static_cast<std::size_t>(p.points_per_window),
                                          substream_seed(seed, "points"));
    sc.point_input = occupancy_from_points(pts.points, dims, p.voxel_size, Vec3::Zero()).grid;
    for (std::size_t i = 0; i < sc.point_input.size(); ++i) sc.point_input[i] = 1.0f - sc.point_input[i];
    return sc;
  }
  throw std::runtime_error("room generator: no scene within the occupancy band after 64 attempts");
}

std::vector<Scene> generate_scenes(const RoomParams& params, std::uint64_t seed, const std::string& prefix,
                                   int count) {
  std::vector<Scene> out;
  for (int i = 0; i < count; ++i) {
    const std::string name = prefix + "_" + std::to_string(i);
    out.push_back(generate_scene(params, substream_seed(seed, name), name));
  }
  return out;
}

}  // namespace rfuse::pipeline

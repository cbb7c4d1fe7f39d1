#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rfuse/geometry.hpp"
#include "rfuse/grids.hpp"

namespace rfuse::pipeline {

enum class Furnishing { box, cylinder, sphere };
const char* furnishing_name(Furnishing f);
Furnishing parse_furnishing(const std::string& s);

struct RoomParams {
  int scene_dim = 32;          // target voxels per side
  double voxel_size = 0.1;     // metres per target voxel
  double trunc_voxels = 3.0;
  int coarsen_factor = 4;      // super-resolution factor
  int points_per_window = 1000;
  int min_walls = 2, max_walls = 4;
  int min_items = 1, max_items = 6;
  double min_occupancy = 0.02, max_occupancy = 0.60;
  /// Furnishing shapes come from this many fixed instances per category
  /// (shared by every scene); 0 samples every shape afresh.
  int catalog_size = 0;
  std::uint64_t catalog_seed = 0;
  /// Item centres snap to multiples of this many voxels; 0 leaves them free.
  double position_step = 0.0;
  std::vector<Furnishing> categories{Furnishing::box, Furnishing::cylinder, Furnishing::sphere};
  /// Every scene contains at least one item of this category when set.
  bool require_category = false;
  Furnishing required = Furnishing::sphere;
};

struct Scene {
  std::string name;
  geom::TriMesh mesh;
  ScalarGrid3 target;        // normalized TDF, scene_dim^3
  ScalarGrid3 coarse;        // min-pooled target, (scene_dim / factor)^3
  ScalarGrid3 point_input;   // point-cloud occupancy in TDF convention (0 = hit, 1 = empty)
  std::vector<Furnishing> items;
};

/// One roomlet: floor slab, 2-4 walls, 1-6 furnishings. Resampled (from the
/// same stream) until the target occupancy lies in the accepted band.
Scene generate_scene(const RoomParams& params, std::uint64_t seed, const std::string& name);

/// `count` scenes named "<prefix>_<i>", each from its own named substream.
std::vector<Scene> generate_scenes(const RoomParams& params, std::uint64_t seed, const std::string& prefix,
                                   int count);

}  // namespace rfuse::pipeline

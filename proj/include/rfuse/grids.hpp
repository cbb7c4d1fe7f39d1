#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace rfuse {

using Vec3 = Eigen::Vector3d;

/// Integer voxel extent or index triple.
struct Dims3 {
  int x = 0, y = 0, z = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  bool operator==(const Dims3&) const = default;
  int& operator[](int axis) { return axis == 0 ? x : axis == 1 ? y : z; }
  int operator[](int axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
};

std::string to_string(const Dims3& d);

class GridError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense rank-3 grid of f32 values, z fastest. The origin is the world-space
/// position of the minimum corner of voxel (0,0,0); voxel (i,j,k) has its
/// center at origin + (i+0.5, j+0.5, k+0.5) * voxel_size.
class ScalarGrid3 {
 public:
  ScalarGrid3() = default;
  ScalarGrid3(Dims3 dims, double voxel_size, Vec3 origin = Vec3::Zero(), float fill = 0.0f);
  ScalarGrid3(Dims3 dims, double voxel_size, Vec3 origin, std::vector<float> data);

  static ScalarGrid3 cube(int side, double voxel_size = 1.0, float fill = 0.0f) {
    return ScalarGrid3({side, side, side}, voxel_size, Vec3::Zero(), fill);
  }

  const Dims3& dims() const { return dims_; }
  double voxel_size() const { return voxel_size_; }
  const Vec3& origin() const { return origin_; }
  void set_origin(const Vec3& o) { origin_ = o; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * dims_.y + j) * dims_.z + k;
  }
  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims_.x && j < dims_.y && k < dims_.z;
  }
  float& at(int i, int j, int k) { return data_[index(i, j, k)]; }
  float at(int i, int j, int k) const { return data_[index(i, j, k)]; }
  float& operator[](std::size_t idx) { return data_[idx]; }
  float operator[](std::size_t idx) const { return data_[idx]; }

  Vec3 voxel_center(int i, int j, int k) const {
    return origin_ + voxel_size_ * Vec3(i + 0.5, j + 0.5, k + 0.5);
  }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  /// Bitwise equality of dims, voxel size, origin and values.
  bool identical(const ScalarGrid3& other) const;

 private:
  Dims3 dims_{};
  double voxel_size_ = 1.0;
  Vec3 origin_ = Vec3::Zero();
  std::vector<float> data_;
};

/// Window / chunk / patch decomposition sizes, all in voxels per side.
struct ChunkLayout {
  int scene_dim = 64;
  int chunk_dim = 16;
  int patch_dim = 4;

  int n() const { return scene_dim / chunk_dim; }
  int chunks_per_window() const { return n() * n() * n(); }
  int patches_per_chunk_side() const { return chunk_dim / patch_dim; }
  int cells_per_side() const { return scene_dim / patch_dim; }
  void validate() const;

  static ChunkLayout paper() { return {64, 16, 4}; }
  static ChunkLayout mini() { return {32, 8, 4}; }
  bool operator==(const ChunkLayout&) const = default;
};

struct ChunkCoord {
  int window_id = 0;
  std::array<int, 3> cell{};
};

/// Maps raw unsigned distances in voxels to [0,1]: min(raw, trunc) / trunc.
ScalarGrid3 normalize_tdf(const ScalarGrid3& raw_voxels, double trunc);

/// Splits a scene_dim^3 window into n^3 chunks in lexicographic (i,j,k) order.
std::vector<ScalarGrid3> unfold(const ScalarGrid3& scene, const ChunkLayout& layout);

/// Inverse of unfold.
ScalarGrid3 fold(std::span<const ScalarGrid3> chunks, const ChunkLayout& layout);

/// Chunk-local cell index for the chunk at lexicographic position `slot`.
std::array<int, 3> chunk_cell(int slot, int n);

struct Window {
  Dims3 offset;  // voxel offset of the window's min corner in the padded scene
  ScalarGrid3 grid;
};

inline constexpr float kEmptyTdf = 1.0f;

/// Sliding windows of layout.scene_dim^3 at the given stride. The scene is
/// padded with `pad_value` so every window is full.
std::vector<Window> windows(const ScalarGrid3& scene, const ChunkLayout& layout, int stride,
                            float pad_value = kEmptyTdf);

/// Writes windows back into a grid of `scene_dims` (later windows overwrite
/// earlier ones where they overlap) and crops the padding.
ScalarGrid3 reassemble(std::span<const Window> wins, Dims3 scene_dims, double voxel_size,
                       const Vec3& origin);

struct OccupancyResult {
  ScalarGrid3 grid;
  std::size_t outside = 0;  // points that fell outside the grid bounds
};

OccupancyResult occupancy_from_points(std::span<const Vec3> points, Dims3 dims, double voxel_size,
                                      const Vec3& origin);

/// Min-pool over factor^3 blocks; voxel_size grows by `factor`.
ScalarGrid3 coarsen(const ScalarGrid3& scene, int factor);

/// Nearest-neighbour upsampling; voxel_size shrinks by `factor`.
ScalarGrid3 upsample_nearest(const ScalarGrid3& grid, int factor);

/// Copies the sub-block starting at `offset` with extent `extent`.
ScalarGrid3 crop(const ScalarGrid3& grid, Dims3 offset, Dims3 extent);

/// Fraction of voxels with value below `threshold`.
double occupancy_fraction(const ScalarGrid3& tdf, float threshold);

// RFG1 binary format.
void write_grid(std::ostream& os, const ScalarGrid3& grid);
ScalarGrid3 read_grid(std::istream& is);
void save_grid(const std::string& path, const ScalarGrid3& grid);
ScalarGrid3 load_grid(const std::string& path);

}  // namespace rfuse

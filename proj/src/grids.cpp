#include "rfuse/grids.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "rfuse/binio.hpp"

namespace rfuse {

std::string to_string(const Dims3& d) {
  return std::to_string(d.x) + "x" + std::to_string(d.y) + "x" + std::to_string(d.z);
}

ScalarGrid3::ScalarGrid3(Dims3 dims, double voxel_size, Vec3 origin, float fill)
    : ScalarGrid3(dims, voxel_size, origin, std::vector<float>(dims.count(), fill)) {}

ScalarGrid3::ScalarGrid3(Dims3 dims, double voxel_size, Vec3 origin, std::vector<float> data)
    : dims_(dims), voxel_size_(voxel_size), origin_(origin), data_(std::move(data)) {
  if (dims.x <= 0 || dims.y <= 0 || dims.z <= 0)
    throw GridError("grid dims must be positive, got " + to_string(dims));
  if (!(voxel_size > 0.0)) throw GridError("voxel_size must be > 0");
  if (data_.size() != dims.count())
    throw GridError("grid data length " + std::to_string(data_.size()) + " != " +
                    std::to_string(dims.count()));
}

bool ScalarGrid3::identical(const ScalarGrid3& other) const {
  return dims_ == other.dims_ && voxel_size_ == other.voxel_size_ && origin_ == other.origin_ &&
         data_.size() == other.data_.size() &&
         std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0;
}

void ChunkLayout::validate() const {
  if (scene_dim <= 0 || chunk_dim <= 0 || patch_dim <= 0)
    throw GridError("layout sizes must be positive");
  if (scene_dim % chunk_dim != 0) throw GridError("chunk_dim must divide scene_dim");
  if (chunk_dim % patch_dim != 0) throw GridError("patch_dim must divide chunk_dim");
}

ScalarGrid3 normalize_tdf(const ScalarGrid3& raw, double trunc) {
  if (!(trunc > 0.0)) throw GridError("trunc must be > 0");
  ScalarGrid3 out = raw;
  for (auto& v : out.values()) {
    if (v < 0.0f || std::isnan(v)) throw GridError("negative or NaN raw distance in unsigned TDF");
    v = static_cast<float>(std::min<double>(v, trunc) / trunc);
  }
  return out;
}

std::array<int, 3> chunk_cell(int slot, int n) { return {slot / (n * n), (slot / n) % n, slot % n}; }

namespace {

void copy_block(const ScalarGrid3& src, Dims3 src_off, ScalarGrid3& dst, Dims3 dst_off, Dims3 ext) {
  for (int i = 0; i < ext.x; ++i)
    for (int j = 0; j < ext.y; ++j) {
      const float* s = src.storage().data() + src.index(src_off.x + i, src_off.y + j, src_off.z);
      float* d = &dst[dst.index(dst_off.x + i, dst_off.y + j, dst_off.z)];
      std::copy(s, s + ext.z, d);
    }
}

}  // namespace

ScalarGrid3 crop(const ScalarGrid3& grid, Dims3 offset, Dims3 extent) {
  for (int a = 0; a < 3; ++a)
    if (offset[a] < 0 || offset[a] + extent[a] > grid.dims()[a])
      throw GridError("crop out of bounds");
  ScalarGrid3 out(extent, grid.voxel_size(),
                  grid.origin() + grid.voxel_size() * Vec3(offset.x, offset.y, offset.z));
  copy_block(grid, offset, out, {0, 0, 0}, extent);
  return out;
}

std::vector<ScalarGrid3> unfold(const ScalarGrid3& scene, const ChunkLayout& layout) {
  layout.validate();
  const int s = layout.scene_dim;
  if (scene.dims() != Dims3{s, s, s})
    throw GridError("unfold expects a " + std::to_string(s) + "^3 scene, got " +
                    to_string(scene.dims()));
  const int n = layout.n();
  const int c = layout.chunk_dim;
  std::vector<ScalarGrid3> chunks;
  chunks.reserve(static_cast<std::size_t>(n) * n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) chunks.push_back(crop(scene, {i * c, j * c, k * c}, {c, c, c}));
  return chunks;
}

ScalarGrid3 fold(std::span<const ScalarGrid3> chunks, const ChunkLayout& layout) {
  layout.validate();
  const int n = layout.n();
  const int c = layout.chunk_dim;
  if (chunks.size() != static_cast<std::size_t>(n) * n * n)
    throw GridError("fold expects " + std::to_string(n * n * n) + " chunks, got " +
                    std::to_string(chunks.size()));
  for (const auto& ch : chunks)
    if (ch.dims() != Dims3{c, c, c}) throw GridError("fold: chunk shape " + to_string(ch.dims()));
  const auto& first = chunks.front();
  ScalarGrid3 scene({layout.scene_dim, layout.scene_dim, layout.scene_dim}, first.voxel_size(),
                    first.origin());
  for (int slot = 0; slot < n * n * n; ++slot) {
    auto [i, j, k] = chunk_cell(slot, n);
    copy_block(chunks[slot], {0, 0, 0}, scene, {i * c, j * c, k * c}, {c, c, c});
  }
  return scene;
}

std::vector<Window> windows(const ScalarGrid3& scene, const ChunkLayout& layout, int stride,
                            float pad_value) {
  layout.validate();
  if (stride < 1) throw GridError("stride must be >= 1");
  const int w = layout.scene_dim;
  Dims3 count{};
  for (int a = 0; a < 3; ++a) {
    const int extent = scene.dims()[a];
    count[a] = extent <= w ? 1 : 1 + (extent - w + stride - 1) / stride;
  }
  Dims3 padded{};
  for (int a = 0; a < 3; ++a) padded[a] = (count[a] - 1) * stride + w;

  ScalarGrid3 big(padded, scene.voxel_size(), scene.origin(), pad_value);
  copy_block(scene, {0, 0, 0}, big, {0, 0, 0}, scene.dims());

  std::vector<Window> out;
  out.reserve(count.count());
  for (int i = 0; i < count.x; ++i)
    for (int j = 0; j < count.y; ++j)
      for (int k = 0; k < count.z; ++k) {
        Dims3 off{i * stride, j * stride, k * stride};
        out.push_back({off, crop(big, off, {w, w, w})});
      }
  return out;
}

ScalarGrid3 reassemble(std::span<const Window> wins, Dims3 scene_dims, double voxel_size,
                       const Vec3& origin) {
  ScalarGrid3 out(scene_dims, voxel_size, origin, kEmptyTdf);
  for (const auto& win : wins) {
    Dims3 ext{};
    for (int a = 0; a < 3; ++a) ext[a] = std::max(0, std::min(win.grid.dims()[a], scene_dims[a] - win.offset[a]));
    if (ext.x == 0 || ext.y == 0 || ext.z == 0) continue;
    copy_block(win.grid, {0, 0, 0}, out, win.offset, ext);
  }
  return out;
}

OccupancyResult occupancy_from_points(std::span<const Vec3> points, Dims3 dims, double voxel_size,
                                      const Vec3& origin) {
  OccupancyResult res{ScalarGrid3(dims, voxel_size, origin, 0.0f), 0};
  for (const auto& p : points) {
    Vec3 q = (p - origin) / voxel_size;
    const int i = static_cast<int>(std::floor(q.x()));
    const int j = static_cast<int>(std::floor(q.y()));
    const int k = static_cast<int>(std::floor(q.z()));
    if (!res.grid.contains(i, j, k)) {
      ++res.outside;
      continue;
    }
    res.grid.at(i, j, k) = 1.0f;
  }
  return res;
}

ScalarGrid3 coarsen(const ScalarGrid3& scene, int factor) {
  if (factor < 1) throw GridError("coarsen factor must be >= 1");
  const Dims3& d = scene.dims();
  if (d.x % factor || d.y % factor || d.z % factor)
    throw GridError("coarsen factor " + std::to_string(factor) + " does not divide " + to_string(d));
  ScalarGrid3 out({d.x / factor, d.y / factor, d.z / factor}, scene.voxel_size() * factor,
                  scene.origin(), std::numeric_limits<float>::infinity());
  for (int i = 0; i < d.x; ++i)
    for (int j = 0; j < d.y; ++j)
      for (int k = 0; k < d.z; ++k) {
        float& dst = out.at(i / factor, j / factor, k / factor);
        dst = std::min(dst, scene.at(i, j, k));
      }
  return out;
}

ScalarGrid3 upsample_nearest(const ScalarGrid3& grid, int factor) {
  if (factor < 1) throw GridError("upsample factor must be >= 1");
  const Dims3& d = grid.dims();
  ScalarGrid3 out({d.x * factor, d.y * factor, d.z * factor}, grid.voxel_size() / factor,
                  grid.origin());
  for (int i = 0; i < d.x * factor; ++i)
    for (int j = 0; j < d.y * factor; ++j)
      for (int k = 0; k < d.z * factor; ++k) out.at(i, j, k) = grid.at(i / factor, j / factor, k / factor);
  return out;
}

double occupancy_fraction(const ScalarGrid3& tdf, float threshold) {
  if (tdf.size() == 0) return 0.0;
  std::size_t occ = 0;
  for (float v : tdf.values()) occ += v < threshold;
  return static_cast<double>(occ) / static_cast<double>(tdf.size());
}

void write_grid(std::ostream& os, const ScalarGrid3& grid) {
  using namespace binio;
  write_magic(os, "RFG1");
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(grid.dims().x));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(grid.dims().y));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(grid.dims().z));
  write_pod<float>(os, static_cast<float>(grid.voxel_size()));
  for (int a = 0; a < 3; ++a) write_pod<float>(os, static_cast<float>(grid.origin()[a]));
  write_f32s(os, grid.storage().data(), grid.size());
}

ScalarGrid3 read_grid(std::istream& is) {
  using namespace binio;
  expect_magic(is, "RFG1");
  Dims3 d{};
  d.x = static_cast<int>(read_pod<std::uint32_t>(is));
  d.y = static_cast<int>(read_pod<std::uint32_t>(is));
  d.z = static_cast<int>(read_pod<std::uint32_t>(is));
  const double vs = read_pod<float>(is);
  Vec3 origin;
  for (int a = 0; a < 3; ++a) origin[a] = read_pod<float>(is);
  std::vector<float> data(d.count());
  read_f32s(is, data.data(), data.size());
  return ScalarGrid3(d, vs, origin, std::move(data));
}

void save_grid(const std::string& path, const ScalarGrid3& grid) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_grid(os, grid);
}

ScalarGrid3 load_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_grid(is);
}

}  // namespace rfuse

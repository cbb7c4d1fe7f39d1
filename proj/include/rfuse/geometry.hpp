#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "rfuse/grids.hpp"

namespace rfuse::geom {

using Face = std::array<int, 3>;

/// Indexed triangle mesh. Faces with area <= kMinFaceArea are dropped at
/// construction; face normals are derived and unit length.
class TriMesh {
 public:
  static constexpr double kMinFaceArea = 1e-12;

  TriMesh() = default;
  TriMesh(std::vector<Vec3> vertices, std::vector<Face> faces);

  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::vector<Face>& faces() const { return faces_; }
  const std::vector<Vec3>& face_normals() const { return normals_; }
  std::size_t dropped_faces() const { return dropped_; }
  bool empty() const { return faces_.empty(); }

  double face_area(std::size_t f) const;
  double area() const;
  /// 64-bit content hash of vertices and faces; used to seed per-mesh sampling.
  std::uint64_t content_hash() const;

  /// Appends `other`, offsetting its indices.
  void append(const TriMesh& other);
  TriMesh translated(const Vec3& t) const;

 private:
  std::vector<Vec3> vertices_;
  std::vector<Face> faces_;
  std::vector<Vec3> normals_;
  std::size_t dropped_ = 0;
};

/// Number of undirected edges used by exactly one face.
std::size_t boundary_edge_count(const TriMesh& mesh);
/// V - E + F over referenced vertices and unique undirected edges.
long euler_characteristic(const TriMesh& mesh);

// Primitives with outward-facing normals.
TriMesh make_box(const Vec3& lo, const Vec3& hi);
TriMesh make_uv_sphere(const Vec3& center, double radius, int stacks = 16, int slices = 24);
TriMesh make_cylinder(const Vec3& base_center, double radius, double height, int slices = 24);
/// Two-triangle axis-aligned square in the plane normal to `axis` at `offset`.
TriMesh make_square(int axis, double offset, double lo, double hi);

// OBJ import/export; polygons are fan-triangulated on import.
TriMesh read_obj(std::istream& is);
void write_obj(std::ostream& os, const TriMesh& mesh);
TriMesh load_obj(const std::string& path);
void save_obj(const std::string& path, const TriMesh& mesh);

/// Closest point on triangle (a,b,c) to p.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Axis-aligned bounding-volume hierarchy over a mesh for exact
/// closest-point queries.
class TriangleBvh {
 public:
  explicit TriangleBvh(const TriMesh& mesh);

  struct Hit {
    double distance = 0.0;
    Vec3 point = Vec3::Zero();
    int face = -1;
  };
  Hit closest(const Vec3& p) const;

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1, right = -1;  // children, -1 for leaves
    int begin = 0, end = 0;     // face range in order_ for leaves
  };
  int build(int begin, int end);

  const TriMesh* mesh_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  std::vector<Eigen::AlignedBox3d> face_boxes_;
  std::vector<Vec3> centroids_;
};

/// Exact unsigned distance field of `mesh` in voxel units, clamped to `trunc`
/// voxels and normalized to [0,1].
ScalarGrid3 mesh_to_tdf(const TriMesh& mesh, Dims3 dims, double voxel_size, const Vec3& origin,
                        double trunc);

/// Recovers a sign for a normalized unsigned TDF: voxels connected to the grid
/// boundary through non-surface voxels are exterior (+tdf), the rest interior
/// (-tdf). Surface-shell voxels (tdf < shell) take the side from which a
/// descending-distance flood reaches them first. Cores of sheets thinner than
/// the shell count as interior.
ScalarGrid3 sign_tdf(const ScalarGrid3& tdf, float shell = 1.0f / 3.0f);

/// Marching cubes on a signed field; output is closed wherever the surface
/// does not touch the grid boundary. Normals point towards positive values.
TriMesh marching_cubes_signed(const ScalarGrid3& field, double iso = 0.0);

/// Signs the TDF with sign_tdf and extracts the zero level set, closed at the
/// grid boundary.
TriMesh marching_cubes(const ScalarGrid3& tdf, double iso = 0.0);

struct SurfaceSamples {
  std::vector<Vec3> points;
  std::vector<int> faces;
};

/// Area-weighted uniform surface samples, deterministic for a given seed.
SurfaceSamples sample_surface(const TriMesh& mesh, std::size_t count, std::uint64_t seed);

struct VoxelizeResult {
  ScalarGrid3 grid;
  bool open_mesh = false;  // boundary edges found: only the surface shell is filled
};

/// Occupancy of a mesh: voxel centers inside the mesh (non-zero winding along
/// +z). Open meshes fall back to the set of voxels the surface passes through.
/// with_surface adds those surface voxels for closed meshes too.
VoxelizeResult voxelize_mesh(const TriMesh& mesh, Dims3 dims, double voxel_size, const Vec3& origin,
                             bool with_surface = false);

}  // namespace rfuse::geom

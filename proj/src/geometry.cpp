#include "rfuse/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <queue>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <Eigen/Geometry>

#include "rfuse/rng.hpp"

namespace rfuse::geom {

namespace {

std::uint64_t edge_key(int a, int b) {
  if (a > b) std::swap(a, b);
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

}  // namespace

TriMesh::TriMesh(std::vector<Vec3> vertices, std::vector<Face> faces) : vertices_(std::move(vertices)) {
  const int nv = static_cast<int>(vertices_.size());
  faces_.reserve(faces.size());
  normals_.reserve(faces.size());
  for (const auto& f : faces) {
    for (int idx : f)
      if (idx < 0 || idx >= nv) throw std::invalid_argument("face index out of range");
    const Vec3 n = (vertices_[f[1]] - vertices_[f[0]]).cross(vertices_[f[2]] - vertices_[f[0]]);
    const double len = n.norm();
    if (!(0.5 * len > kMinFaceArea)) {
      ++dropped_;
      continue;
    }
    faces_.push_back(f);
    normals_.push_back(n / len);
  }
}

double TriMesh::face_area(std::size_t f) const {
  const auto& t = faces_[f];
  return 0.5 * (vertices_[t[1]] - vertices_[t[0]]).cross(vertices_[t[2]] - vertices_[t[0]]).norm();
}

double TriMesh::area() const {
  double a = 0.0;
  for (std::size_t f = 0; f < faces_.size(); ++f) a += face_area(f);
  return a;
}

std::uint64_t TriMesh::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* p, std::size_t n) {
    h = fnv1a(std::string_view(static_cast<const char*>(p), n), h);
  };
  for (const auto& v : vertices_) mix(v.data(), 3 * sizeof(double));
  for (const auto& f : faces_) mix(f.data(), 3 * sizeof(int));
  return splitmix64(h);
}

void TriMesh::append(const TriMesh& other) {
  const int off = static_cast<int>(vertices_.size());
  vertices_.insert(vertices_.end(), other.vertices_.begin(), other.vertices_.end());
  for (const auto& f : other.faces_) faces_.push_back({f[0] + off, f[1] + off, f[2] + off});
  normals_.insert(normals_.end(), other.normals_.begin(), other.normals_.end());
  dropped_ += other.dropped_;
}

TriMesh TriMesh::translated(const Vec3& t) const {
  TriMesh out = *this;
  for (auto& v : out.vertices_) v += t;
  return out;
}

std::size_t boundary_edge_count(const TriMesh& mesh) {
  // Weld coincident vertices so unwelded imports are not reported as open.
  std::map<std::array<double, 3>, int> weld;
  std::vector<int> remap(mesh.vertices().size());
  for (std::size_t i = 0; i < mesh.vertices().size(); ++i) {
    const auto& v = mesh.vertices()[i];
    remap[i] = weld.emplace(std::array<double, 3>{v.x(), v.y(), v.z()}, static_cast<int>(weld.size()))
                   .first->second;
  }
  std::unordered_map<std::uint64_t, int> uses;
  for (const auto& f : mesh.faces())
    for (int e = 0; e < 3; ++e) ++uses[edge_key(remap[f[e]], remap[f[(e + 1) % 3]])];
  std::size_t open = 0;
  for (const auto& [key, count] : uses) open += count == 1;
  return open;
}

long euler_characteristic(const TriMesh& mesh) {
  std::vector<char> used(mesh.vertices().size(), 0);
  std::unordered_map<std::uint64_t, int> edges;
  for (const auto& f : mesh.faces()) {
    for (int e = 0; e < 3; ++e) {
      used[f[e]] = 1;
      edges[edge_key(f[e], f[(e + 1) % 3])] = 1;
    }
  }
  long v = 0;
  for (char u : used) v += u;
  return v - static_cast<long>(edges.size()) + static_cast<long>(mesh.faces().size());
}

namespace {

// Flips faces of a convex shape so that normals point away from `center`.
std::vector<Face> orient_outward(const std::vector<Vec3>& verts, std::vector<Face> faces,
                                 const Vec3& center) {
  for (auto& f : faces) {
    const Vec3 n = (verts[f[1]] - verts[f[0]]).cross(verts[f[2]] - verts[f[0]]);
    const Vec3 c = (verts[f[0]] + verts[f[1]] + verts[f[2]]) / 3.0;
    if (n.dot(c - center) < 0) std::swap(f[1], f[2]);
  }
  return faces;
}

}  // namespace

TriMesh make_box(const Vec3& lo, const Vec3& hi) {
  std::vector<Vec3> v(8);
  for (int c = 0; c < 8; ++c)
    v[c] = Vec3((c & 1) ? hi.x() : lo.x(), (c & 2) ? hi.y() : lo.y(), (c & 4) ? hi.z() : lo.z());
  // Quads as corner bitmasks, split into two triangles each.
  const int quads[6][4] = {{0, 2, 6, 4}, {1, 3, 7, 5}, {0, 1, 5, 4},
                           {2, 3, 7, 6}, {0, 1, 3, 2}, {4, 5, 7, 6}};
  std::vector<Face> faces;
  for (const auto& q : quads) {
    faces.push_back({q[0], q[1], q[2]});
    faces.push_back({q[0], q[2], q[3]});
  }
  return TriMesh(v, orient_outward(v, std::move(faces), 0.5 * (lo + hi)));
}

TriMesh make_uv_sphere(const Vec3& center, double radius, int stacks, int slices) {
  std::vector<Vec3> v;
  v.push_back(center + Vec3(0, 0, radius));
  for (int s = 1; s < stacks; ++s) {
    const double phi = std::numbers::pi * s / stacks;
    for (int l = 0; l < slices; ++l) {
      const double theta = 2.0 * std::numbers::pi * l / slices;
      v.push_back(center + radius * Vec3(std::sin(phi) * std::cos(theta), std::sin(phi) * std::sin(theta),
                                         std::cos(phi)));
    }
  }
  v.push_back(center - Vec3(0, 0, radius));
  const int south = static_cast<int>(v.size()) - 1;
  auto ring = [slices](int s, int l) { return 1 + (s - 1) * slices + (l % slices); };
  std::vector<Face> faces;
  for (int l = 0; l < slices; ++l) faces.push_back({0, ring(1, l), ring(1, l + 1)});
  for (int s = 1; s < stacks - 1; ++s)
    for (int l = 0; l < slices; ++l) {
      faces.push_back({ring(s, l), ring(s + 1, l), ring(s + 1, l + 1)});
      faces.push_back({ring(s, l), ring(s + 1, l + 1), ring(s, l + 1)});
    }
  for (int l = 0; l < slices; ++l) faces.push_back({south, ring(stacks - 1, l + 1), ring(stacks - 1, l)});
  return TriMesh(v, orient_outward(v, std::move(faces), center));
}

TriMesh make_cylinder(const Vec3& base_center, double radius, double height, int slices) {
  std::vector<Vec3> v;
  for (int ring = 0; ring < 2; ++ring)
    for (int l = 0; l < slices; ++l) {
      const double theta = 2.0 * std::numbers::pi * l / slices;
      v.push_back(base_center + Vec3(radius * std::cos(theta), radius * std::sin(theta), ring * height));
    }
  const int bottom = static_cast<int>(v.size());
  v.push_back(base_center);
  const int top = bottom + 1;
  v.push_back(base_center + Vec3(0, 0, height));
  std::vector<Face> faces;
  for (int l = 0; l < slices; ++l) {
    const int a = l, b = (l + 1) % slices, c = slices + l, d = slices + (l + 1) % slices;
    faces.push_back({a, b, d});
    faces.push_back({a, d, c});
    faces.push_back({bottom, b, a});
    faces.push_back({top, c, d});
  }
  return TriMesh(v, orient_outward(v, std::move(faces), base_center + Vec3(0, 0, 0.5 * height)));
}

TriMesh make_square(int axis, double offset, double lo, double hi) {
  const int u = (axis + 1) % 3, w = (axis + 2) % 3;
  std::vector<Vec3> v(4, Vec3::Zero());
  const double uv[4][2] = {{lo, lo}, {hi, lo}, {hi, hi}, {lo, hi}};
  for (int i = 0; i < 4; ++i) {
    v[i][axis] = offset;
    v[i][u] = uv[i][0];
    v[i][w] = uv[i][1];
  }
  return TriMesh(v, {{0, 1, 2}, {0, 2, 3}});
}

TriMesh read_obj(std::istream& is) {
  std::vector<Vec3> verts;
  std::vector<Face> faces;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 p;
      ls >> p.x() >> p.y() >> p.z();
      if (!ls) throw std::runtime_error("malformed OBJ vertex: " + line);
      verts.push_back(p);
    } else if (tag == "f") {
      std::vector<int> poly;
      std::string tok;
      while (ls >> tok) {
        const int idx = std::stoi(tok.substr(0, tok.find('/')));
        poly.push_back(idx < 0 ? static_cast<int>(verts.size()) + idx : idx - 1);
      }
      if (poly.size() < 3) throw std::runtime_error("OBJ face with fewer than 3 vertices");
      for (std::size_t i = 1; i + 1 < poly.size(); ++i) faces.push_back({poly[0], poly[i], poly[i + 1]});
    }
  }
  return TriMesh(std::move(verts), std::move(faces));
}

void write_obj(std::ostream& os, const TriMesh& mesh) {
  char buf[96];
  for (const auto& v : mesh.vertices()) {
    std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
    os << buf;
  }
  for (const auto& f : mesh.faces()) os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

TriMesh load_obj(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_obj(is);
}

void save_obj(const std::string& path, const TriMesh& mesh) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_obj(os, mesh);
}

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Voronoi-region walk over vertices, edges and face.
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return a;
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + (d1 / (d1 - d3)) * ab;
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + (d2 / (d2 - d6)) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0)
    return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

TriangleBvh::TriangleBvh(const TriMesh& mesh) : mesh_(&mesh) {
  const auto& V = mesh.vertices();
  const int nf = static_cast<int>(mesh.faces().size());
  order_.resize(nf);
  face_boxes_.resize(nf);
  centroids_.resize(nf);
  for (int f = 0; f < nf; ++f) {
    const auto& t = mesh.faces()[f];
    order_[f] = f;
    face_boxes_[f].setEmpty();
    for (int idx : t) face_boxes_[f].extend(V[idx]);
    centroids_[f] = (V[t[0]] + V[t[1]] + V[t[2]]) / 3.0;
  }
  if (nf > 0) build(0, nf);
}

int TriangleBvh::build(int begin, int end) {
  Node node;
  node.box.setEmpty();
  for (int i = begin; i < end; ++i) node.box.extend(face_boxes_[order_[i]]);
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(node);
  if (end - begin <= 4) {
    nodes_[id].begin = begin;
    nodes_[id].end = end;
    return id;
  }
  Eigen::AlignedBox3d cbox;
  cbox.setEmpty();
  for (int i = begin; i < end; ++i) cbox.extend(centroids_[order_[i]]);
  int axis = 0;
  cbox.sizes().maxCoeff(&axis);
  const int mid = (begin + end) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end, [&](int a, int b) {
    const double ca = centroids_[a][axis], cb = centroids_[b][axis];
    return ca < cb || (ca == cb && a < b);
  });
  const int l = build(begin, mid);
  const int r = build(mid, end);
  nodes_[id].left = l;
  nodes_[id].right = r;
  return id;
}

TriangleBvh::Hit TriangleBvh::closest(const Vec3& p) const {
  Hit best;
  best.distance = std::numeric_limits<double>::infinity();
  if (nodes_.empty()) return best;
  double best_sq = std::numeric_limits<double>::infinity();
  const auto& V = mesh_->vertices();
  const auto& F = mesh_->faces();
  std::vector<std::pair<double, int>> stack;
  stack.emplace_back(nodes_[0].box.squaredExteriorDistance(p), 0);
  while (!stack.empty()) {
    auto [bound, id] = stack.back();
    stack.pop_back();
    if (bound > best_sq) continue;
    const Node& n = nodes_[id];
    if (n.left < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        const int f = order_[i];
        const Vec3 q = closest_point_on_triangle(p, V[F[f][0]], V[F[f][1]], V[F[f][2]]);
        const double d = (q - p).squaredNorm();
        if (d < best_sq || (d == best_sq && f < best.face)) {
          best_sq = d;
          best.point = q;
          best.face = f;
        }
      }
      continue;
    }
    const double dl = nodes_[n.left].box.squaredExteriorDistance(p);
    const double dr = nodes_[n.right].box.squaredExteriorDistance(p);
    // Push the farther child first so the nearer one is explored next.
    if (dl <= dr) {
      stack.emplace_back(dr, n.right);
      stack.emplace_back(dl, n.left);
    } else {
      stack.emplace_back(dl, n.left);
      stack.emplace_back(dr, n.right);
    }
  }
  best.distance = std::sqrt(best_sq);
  return best;
}

ScalarGrid3 mesh_to_tdf(const TriMesh& mesh, Dims3 dims, double voxel_size, const Vec3& origin,
                        double trunc) {
  if (mesh.empty()) throw std::invalid_argument("mesh_to_tdf: empty mesh");
  if (!(trunc > 0)) throw std::invalid_argument("mesh_to_tdf: trunc must be > 0");
  ScalarGrid3 raw(dims, voxel_size, origin, static_cast<float>(trunc));
  std::vector<double> best(dims.count(), trunc);
  const auto& V = mesh.vertices();
  // Band of trunc plus one voxel around each triangle; everything farther is
  // already at the clamp value.
  const double band = (trunc + 1.0) * voxel_size;
  for (const auto& f : mesh.faces()) {
    Eigen::AlignedBox3d box;
    box.setEmpty();
    for (int idx : f) box.extend(V[idx]);
    int lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max(0, static_cast<int>(std::floor((box.min()[a] - band - origin[a]) / voxel_size - 0.5)));
      hi[a] = std::min(dims[a] - 1, static_cast<int>(std::ceil((box.max()[a] + band - origin[a]) / voxel_size - 0.5)));
    }
    for (int i = lo[0]; i <= hi[0]; ++i)
      for (int j = lo[1]; j <= hi[1]; ++j)
        for (int k = lo[2]; k <= hi[2]; ++k) {
          const Vec3 c = raw.voxel_center(i, j, k);
          const double d = (closest_point_on_triangle(c, V[f[0]], V[f[1]], V[f[2]]) - c).norm() / voxel_size;
          double& b = best[raw.index(i, j, k)];
          if (d < b) b = d;
        }
  }
  for (std::size_t i = 0; i < best.size(); ++i) raw[i] = static_cast<float>(std::min(best[i], trunc) / trunc);
  return raw;
}

ScalarGrid3 sign_tdf(const ScalarGrid3& tdf, float shell) {
  const Dims3 d = tdf.dims();
  const std::size_t n = d.count();
  enum : std::uint8_t { kUnknown = 0, kExterior = 1, kInterior = 2 };
  std::vector<std::uint8_t> label(n, kUnknown);
  auto is_shell = [&](std::size_t idx) { return tdf[idx] < shell; };
  const int offs[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};

  std::vector<std::size_t> queue;
  for (int i = 0; i < d.x; ++i)
    for (int j = 0; j < d.y; ++j)
      for (int k = 0; k < d.z; ++k) {
        const bool border = i == 0 || j == 0 || k == 0 || i == d.x - 1 || j == d.y - 1 || k == d.z - 1;
        const std::size_t idx = tdf.index(i, j, k);
        if (border && !is_shell(idx)) {
          label[idx] = kExterior;
          queue.push_back(idx);
        }
      }
  auto unpack = [&](std::size_t idx) {
    const int k = static_cast<int>(idx % d.z);
    const int j = static_cast<int>((idx / d.z) % d.y);
    const int i = static_cast<int>(idx / (static_cast<std::size_t>(d.z) * d.y));
    return std::array<int, 3>{i, j, k};
  };
  for (std::size_t head = 0; head < queue.size(); ++head) {
    auto [i, j, k] = unpack(queue[head]);
    for (const auto& o : offs) {
      const int a = i + o[0], b = j + o[1], c = k + o[2];
      if (!tdf.contains(a, b, c)) continue;
      const std::size_t nb = tdf.index(a, b, c);
      if (label[nb] == kUnknown && !is_shell(nb)) {
        label[nb] = kExterior;
        queue.push_back(nb);
      }
    }
  }
  for (std::size_t idx = 0; idx < n; ++idx)
    if (label[idx] == kUnknown && !is_shell(idx)) label[idx] = kInterior;

  // Shell voxels: descend from both sides, highest distance first.
  using Item = std::pair<float, std::size_t>;
  auto cmp = [](const Item& a, const Item& b) { return a.first < b.first || (a.first == b.first && a.second > b.second); };
  std::priority_queue<Item, std::vector<Item>, decltype(cmp)> pq(cmp);
  std::vector<char> queued(n, 0);
  auto push_neighbors = [&](std::size_t idx) {
    auto [i, j, k] = unpack(idx);
    for (const auto& o : offs) {
      const int a = i + o[0], b = j + o[1], c = k + o[2];
      if (!tdf.contains(a, b, c)) continue;
      const std::size_t nb = tdf.index(a, b, c);
      if (label[nb] == kUnknown && !queued[nb]) {
        queued[nb] = 1;
        pq.emplace(tdf[nb], nb);
      }
    }
  };
  for (std::size_t idx = 0; idx < n; ++idx)
    if (label[idx] != kUnknown) push_neighbors(idx);
  while (!pq.empty()) {
    const std::size_t idx = pq.top().second;
    pq.pop();
    auto [i, j, k] = unpack(idx);
    float best_val = -1.0f;
    std::uint8_t best_label = kUnknown;
    for (const auto& o : offs) {
      const int a = i + o[0], b = j + o[1], c = k + o[2];
      if (!tdf.contains(a, b, c)) continue;
      const std::size_t nb = tdf.index(a, b, c);
      if (label[nb] == kUnknown) continue;
      if (tdf[nb] > best_val || (tdf[nb] == best_val && label[nb] == kExterior)) {
        best_val = tdf[nb];
        best_label = label[nb];
      }
    }
    label[idx] = best_label;
    push_neighbors(idx);
  }

  // Sheets thinner than the shell have no interior to descend from. Their core
  // is an exterior-labeled shell voxel with no interior neighbor at which the
  // distance slope flips sign along some axis: a second difference of at least
  // 3/4 voxel (shell = one voxel), far above what smooth curved surfaces give.
  // A missing neighbor at the grid border mirrors the one inside.
  std::vector<std::size_t> core;
  for (std::size_t idx = 0; idx < n; ++idx) {
    if (label[idx] == kInterior || !is_shell(idx)) continue;
    auto [i, j, k] = unpack(idx);
    bool touches_interior = false, ridge = false;
    for (int axis = 0; axis < 3; ++axis) {
      float side[2];
      int present = 0;
      for (int s = 0; s < 2; ++s) {
        const int step = s ? 1 : -1;
        const int a = i + (axis == 0) * step, b = j + (axis == 1) * step, c = k + (axis == 2) * step;
        side[s] = -1.0f;
        if (!tdf.contains(a, b, c)) continue;
        const std::size_t nb = tdf.index(a, b, c);
        touches_interior |= label[nb] == kInterior;
        side[s] = tdf[nb];
        ++present;
      }
      if (present == 0) continue;
      if (side[0] < 0) side[0] = side[1];
      if (side[1] < 0) side[1] = side[0];
      const float d0 = tdf[idx];
      ridge |= side[0] >= d0 && side[1] >= d0 && side[0] + side[1] - 2 * d0 >= 0.75f * shell;
    }
    if (ridge && !touches_interior) core.push_back(idx);
  }

  ScalarGrid3 out = tdf;
  for (std::size_t idx = 0; idx < n; ++idx) {
    // Shell voxels never reached (no labeled region at all) count as exterior.
    if (label[idx] == kInterior) out[idx] = -tdf[idx];
  }
  for (std::size_t idx : core) out[idx] = -std::max(tdf[idx], 1e-6f);
  return out;
}

namespace {

// Corner c of the unit cube sits at (c&1, (c>>1)&1, (c>>2)&1).
struct McTables {
  std::array<std::array<int, 2>, 12> edge_corners{};
  std::array<int, 12> edge_axis{};
  // Per case: triangles as triples of cube edge ids.
  std::array<std::vector<std::array<int, 3>>, 256> triangles;
};

Vec3 corner_pos(int c) { return Vec3(c & 1, (c >> 1) & 1, (c >> 2) & 1); }

McTables build_tables() {
  McTables t;
  int e = 0;
  for (int axis = 0; axis < 3; ++axis)
    for (int c = 0; c < 8; ++c)
      if (!(c & (1 << axis))) {
        t.edge_corners[e] = {c, c | (1 << axis)};
        t.edge_axis[e] = axis;
        ++e;
      }
  auto edge_between = [&](int a, int b) {
    for (int i = 0; i < 12; ++i)
      if ((t.edge_corners[i][0] == a && t.edge_corners[i][1] == b) ||
          (t.edge_corners[i][0] == b && t.edge_corners[i][1] == a))
        return i;
    throw std::logic_error("corners are not adjacent");
  };
  auto edge_mid = [&](int edge) -> Vec3 {
    return 0.5 * (corner_pos(t.edge_corners[edge][0]) + corner_pos(t.edge_corners[edge][1]));
  };

  // Faces as cyclic corner lists with outward normals.
  struct CubeFace {
    std::array<int, 4> corners;
    Vec3 normal;
  };
  std::vector<CubeFace> faces;
  for (int axis = 0; axis < 3; ++axis)
    for (int side = 0; side < 2; ++side) {
      const int u = (axis + 1) % 3, v = (axis + 2) % 3;
      const int base = side << axis;
      CubeFace f;
      f.corners = {base, base | (1 << u), base | (1 << u) | (1 << v), base | (1 << v)};
      f.normal = Vec3::Zero();
      f.normal[axis] = side ? 1.0 : -1.0;
      faces.push_back(f);
    }

  for (int mask = 0; mask < 256; ++mask) {
    auto neg = [mask](int c) { return (mask >> c) & 1; };
    std::vector<std::array<int, 2>> segments;  // directed edge pairs
    for (const auto& f : faces) {
      std::array<int, 4> crossing{};  // edge id between corners i and i+1, or -1
      int count = 0;
      for (int i = 0; i < 4; ++i) {
        const int a = f.corners[i], b = f.corners[(i + 1) % 4];
        crossing[i] = neg(a) != neg(b) ? edge_between(a, b) : -1;
        count += crossing[i] >= 0;
      }
      auto add_segment = [&](int e1, int e2, const Vec3& toward_positive) {
        const Vec3 dir = toward_positive.cross(f.normal);
        if ((edge_mid(e2) - edge_mid(e1)).dot(dir) < 0) std::swap(e1, e2);
        segments.push_back({e1, e2});
      };
      if (count == 2) {
        int found[2], m = 0;
        for (int i = 0; i < 4; ++i)
          if (crossing[i] >= 0) found[m++] = crossing[i];
        Vec3 pos = Vec3::Zero(), ng = Vec3::Zero();
        int np = 0, nn = 0;
        for (int c : f.corners) {
          if (neg(c)) {
            ng += corner_pos(c);
            ++nn;
          } else {
            pos += corner_pos(c);
            ++np;
          }
        }
        add_segment(found[0], found[1], pos / np - ng / nn);
      } else if (count == 4) {
        // Ambiguous face: cut off each negative corner separately.
        Vec3 center = Vec3::Zero();
        for (int c : f.corners) center += corner_pos(c) / 4.0;
        for (int i = 0; i < 4; ++i)
          if (neg(f.corners[i]))
            add_segment(crossing[(i + 3) % 4], crossing[i], center - corner_pos(f.corners[i]));
      }
    }
    // Chain directed segments into loops and fan-triangulate each loop.
    std::array<int, 12> next;
    next.fill(-1);
    for (const auto& s : segments) {
      if (next[s[0]] != -1) throw std::logic_error("inconsistent marching cubes segments, case " + std::to_string(mask) + " edge " + std::to_string(s[0]));
      next[s[0]] = s[1];
    }
    std::array<bool, 12> used{};
    for (int start = 0; start < 12; ++start) {
      if (next[start] < 0 || used[start]) continue;
      std::vector<int> loop;
      for (int cur = start; !used[cur]; cur = next[cur]) {
        if (next[cur] < 0) throw std::logic_error("open marching cubes loop");
        used[cur] = true;
        loop.push_back(cur);
      }
      for (std::size_t i = 1; i + 1 < loop.size(); ++i) t.triangles[mask].push_back({loop[0], loop[i], loop[i + 1]});
    }
  }
  return t;
}

const McTables& tables() {
  static const McTables t = build_tables();
  return t;
}

}  // namespace

TriMesh marching_cubes_signed(const ScalarGrid3& field, double iso) {
  const auto& T = tables();
  const Dims3 d = field.dims();
  const double vs = field.voxel_size();
  std::vector<Vec3> verts;
  std::vector<Face> faces;
  // Vertex ids per (voxel, axis) edge.
  std::vector<int> edge_vertex(d.count() * 3, -1);
  auto vertex_for = [&](int i, int j, int k, int axis) {
    const std::size_t slot = field.index(i, j, k) * 3 + axis;
    if (edge_vertex[slot] >= 0) return edge_vertex[slot];
    const int i2 = i + (axis == 0), j2 = j + (axis == 1), k2 = k + (axis == 2);
    const double v0 = field.at(i, j, k), v1 = field.at(i2, j2, k2);
    double t = (iso - v0) / (v1 - v0);
    if (!std::isfinite(t)) t = 0.5;
    t = std::clamp(t, 0.0, 1.0);
    Vec3 p(i + 0.5, j + 0.5, k + 0.5);
    p[axis] += t;
    verts.push_back(field.origin() + vs * p);
    edge_vertex[slot] = static_cast<int>(verts.size()) - 1;
    return edge_vertex[slot];
  };
  for (int i = 0; i + 1 < d.x; ++i)
    for (int j = 0; j + 1 < d.y; ++j)
      for (int k = 0; k + 1 < d.z; ++k) {
        int mask = 0;
        for (int c = 0; c < 8; ++c) {
          const double v = field.at(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
          if (v < iso) mask |= 1 << c;
        }
        if (mask == 0 || mask == 255) continue;
        for (const auto& tri : T.triangles[mask]) {
          Face f;
          for (int m = 0; m < 3; ++m) {
            const int c0 = T.edge_corners[tri[m]][0];
            f[m] = vertex_for(i + (c0 & 1), j + ((c0 >> 1) & 1), k + ((c0 >> 2) & 1), T.edge_axis[tri[m]]);
          }
          faces.push_back(f);
        }
      }
  return TriMesh(std::move(verts), std::move(faces));
}

TriMesh marching_cubes(const ScalarGrid3& tdf, double iso) {
  // One exterior layer around the signed field closes surfaces cut by the window.
  // Values are kept a small margin off the iso level so no vertex lands on a
  // grid corner, where it would spawn zero-area faces.
  constexpr float kMargin = 1e-3f;
  ScalarGrid3 s = sign_tdf(tdf);
  for (float& v : s.storage())
    if (std::abs(v - iso) < kMargin) v = static_cast<float>(iso) + (v < iso ? -kMargin : kMargin);
  const Dims3 d = s.dims();
  ScalarGrid3 padded({d.x + 2, d.y + 2, d.z + 2}, s.voxel_size(), s.origin() - Vec3::Constant(s.voxel_size()), 1.0f);
  for (int i = 0; i < d.x; ++i)
    for (int j = 0; j < d.y; ++j)
      for (int k = 0; k < d.z; ++k) padded.at(i + 1, j + 1, k + 1) = s.at(i, j, k);
  return marching_cubes_signed(padded, iso);
}

SurfaceSamples sample_surface(const TriMesh& mesh, std::size_t count, std::uint64_t seed) {
  SurfaceSamples out;
  if (count == 0) return out;
  if (mesh.empty()) throw std::invalid_argument("sample_surface: empty mesh");
  const auto& F = mesh.faces();
  const auto& V = mesh.vertices();
  std::vector<double> cdf(F.size());
  double acc = 0.0;
  for (std::size_t f = 0; f < F.size(); ++f) {
    acc += mesh.face_area(f);
    cdf[f] = acc;
  }
  Rng rng(seed);
  out.points.reserve(count);
  out.faces.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const double r = uniform01(rng) * acc;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), r);
    const int f = static_cast<int>(std::min<std::size_t>(it - cdf.begin(), F.size() - 1));
    const double r1 = std::sqrt(uniform01(rng)), r2 = uniform01(rng);
    const Vec3& a = V[F[f][0]];
    const Vec3& b = V[F[f][1]];
    const Vec3& c = V[F[f][2]];
    out.points.push_back((1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c);
    out.faces.push_back(f);
  }
  return out;
}

namespace {

// Separating-axis triangle / box overlap with strictly positive overlap.
bool triangle_box_overlap(const Vec3& center, double half, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 v0 = a - center, v1 = b - center, v2 = c - center;
  const double eps = 1e-9 * half;
  auto separated = [&](const Vec3& axis) {
    const double p0 = axis.dot(v0), p1 = axis.dot(v1), p2 = axis.dot(v2);
    const double r = half * axis.cwiseAbs().sum();
    const double lo = std::min({p0, p1, p2}), hi = std::max({p0, p1, p2});
    return lo >= r - eps || hi <= -r + eps;
  };
  for (int ax = 0; ax < 3; ++ax) {
    Vec3 e = Vec3::Zero();
    e[ax] = 1.0;
    if (separated(e)) return false;
  }
  const Vec3 e0 = v1 - v0, e1 = v2 - v1, e2 = v0 - v2;
  const Vec3 n = e0.cross(e1);
  if (n.squaredNorm() > 0) {
    const double dd = n.dot(v0);
    const double r = half * n.cwiseAbs().sum();
    if (std::abs(dd) >= r - eps * n.cwiseAbs().sum()) return false;
  }
  for (const Vec3& edge : {e0, e1, e2})
    for (int ax = 0; ax < 3; ++ax) {
      Vec3 u = Vec3::Zero();
      u[ax] = 1.0;
      const Vec3 axis = u.cross(edge);
      if (axis.squaredNorm() > 0 && separated(axis)) return false;
    }
  return true;
}

}  // namespace

VoxelizeResult voxelize_mesh(const TriMesh& mesh, Dims3 dims, double voxel_size, const Vec3& origin,
                             bool with_surface) {
  VoxelizeResult res{ScalarGrid3(dims, voxel_size, origin, 0.0f), false};
  if (mesh.empty()) return res;
  const auto& V = mesh.vertices();
  const auto& F = mesh.faces();
  auto to_grid = [&](const Vec3& p) -> Vec3 { return (p - origin) / voxel_size; };

  res.open_mesh = boundary_edge_count(mesh) > 0;
  if (res.open_mesh || with_surface) {
    for (const auto& f : F) {
      const Vec3 a = to_grid(V[f[0]]), b = to_grid(V[f[1]]), c = to_grid(V[f[2]]);
      int lo[3], hi[3];
      for (int ax = 0; ax < 3; ++ax) {
        lo[ax] = std::max(0, static_cast<int>(std::floor(std::min({a[ax], b[ax], c[ax]}))));
        hi[ax] = std::min(dims[ax] - 1, static_cast<int>(std::floor(std::max({a[ax], b[ax], c[ax]}))));
      }
      for (int i = lo[0]; i <= hi[0]; ++i)
        for (int j = lo[1]; j <= hi[1]; ++j)
          for (int k = lo[2]; k <= hi[2]; ++k)
            if (triangle_box_overlap(Vec3(i + 0.5, j + 0.5, k + 0.5), 0.5, a, b, c)) res.grid.at(i, j, k) = 1.0f;
    }
    if (res.open_mesh) return res;
  }

  // Closed mesh: accumulate signed crossings along +z through voxel-center
  // columns and fill where the winding number is non-zero.
  std::vector<std::vector<std::pair<double, int>>> columns(static_cast<std::size_t>(dims.x) * dims.y);
  for (std::size_t fi = 0; fi < F.size(); ++fi) {
    const auto& f = F[fi];
    Vec3 p[3] = {to_grid(V[f[0]]), to_grid(V[f[1]]), to_grid(V[f[2]])};
    const double nz = mesh.face_normals()[fi].z();
    if (nz == 0.0) continue;
    const int wind = nz < 0 ? 1 : -1;
    // Counter-clockwise in xy.
    double area2 = (p[1].x() - p[0].x()) * (p[2].y() - p[0].y()) - (p[1].y() - p[0].y()) * (p[2].x() - p[0].x());
    if (area2 == 0.0) continue;
    if (area2 < 0) {
      std::swap(p[1], p[2]);
      area2 = -area2;
    }
    const int ilo = std::max(0, static_cast<int>(std::ceil(std::min({p[0].x(), p[1].x(), p[2].x()}) - 0.5)));
    const int ihi = std::min(dims.x - 1, static_cast<int>(std::floor(std::max({p[0].x(), p[1].x(), p[2].x()}) - 0.5)));
    const int jlo = std::max(0, static_cast<int>(std::ceil(std::min({p[0].y(), p[1].y(), p[2].y()}) - 0.5)));
    const int jhi = std::min(dims.y - 1, static_cast<int>(std::floor(std::max({p[0].y(), p[1].y(), p[2].y()}) - 0.5)));
    for (int i = ilo; i <= ihi; ++i)
      for (int j = jlo; j <= jhi; ++j) {
        const double x = i + 0.5, y = j + 0.5;
        double w[3];
        bool inside = true;
        for (int e = 0; e < 3 && inside; ++e) {
          const Vec3& a = p[(e + 1) % 3];
          const Vec3& b = p[(e + 2) % 3];
          const double dx = b.x() - a.x(), dy = b.y() - a.y();
          w[e] = dx * (y - a.y()) - dy * (x - a.x());
          // Top-left rule: points exactly on an edge belong to one side only.
          const bool top_left = dy < 0 || (dy == 0 && dx > 0);
          if (w[e] < 0 || (w[e] == 0 && !top_left)) inside = false;
        }
        if (!inside) continue;
        const double z = (w[0] * p[0].z() + w[1] * p[1].z() + w[2] * p[2].z()) / area2;
        columns[static_cast<std::size_t>(i) * dims.y + j].emplace_back(z, wind);
      }
  }
  for (int i = 0; i < dims.x; ++i)
    for (int j = 0; j < dims.y; ++j) {
      auto& col = columns[static_cast<std::size_t>(i) * dims.y + j];
      if (col.empty()) continue;
      std::sort(col.begin(), col.end());
      int winding = 0;
      std::size_t next = 0;
      for (int k = 0; k < dims.z; ++k) {
        const double zc = k + 0.5;
        while (next < col.size() && col[next].first < zc) winding += col[next++].second;
        if (winding != 0) res.grid.at(i, j, k) = 1.0f;
      }
    }
  return res;
}

}  // namespace rfuse::geom

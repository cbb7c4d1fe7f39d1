#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "rfuse/pipeline.hpp"
#include "rfuse/retrievaldb.hpp"

namespace py = pybind11;
using namespace rfuse;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using VertArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FaceArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

ScalarGrid3 to_grid(const FloatArray& a, double voxel_size) {
  if (a.ndim() != 3) throw std::invalid_argument("expected a 3-D array");
  const Dims3 d{static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2))};
  return ScalarGrid3(d, voxel_size, Vec3::Zero(), std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_array(const ScalarGrid3& g) {
  py::array_t<float> out({g.dims().x, g.dims().y, g.dims().z});
  std::copy(g.storage().begin(), g.storage().end(), out.mutable_data());
  return out;
}

geom::TriMesh to_mesh(const VertArray& v, const FaceArray& f) {
  if (v.ndim() != 2 || v.shape(1) != 3 || f.ndim() != 2 || f.shape(1) != 3)
    throw std::invalid_argument("mesh arrays must be (n, 3)");
  std::vector<Vec3> verts(static_cast<std::size_t>(v.shape(0)));
  for (std::size_t i = 0; i < verts.size(); ++i) verts[i] = Vec3(v.at(i, 0), v.at(i, 1), v.at(i, 2));
  std::vector<geom::Face> faces(static_cast<std::size_t>(f.shape(0)));
  for (std::size_t i = 0; i < faces.size(); ++i) faces[i] = {f.at(i, 0), f.at(i, 1), f.at(i, 2)};
  return geom::TriMesh(std::move(verts), std::move(faces));
}

py::tuple from_mesh(const geom::TriMesh& m) {
  py::array_t<double> v({static_cast<py::ssize_t>(m.vertices().size()), py::ssize_t{3}});
  py::array_t<int> f({static_cast<py::ssize_t>(m.faces().size()), py::ssize_t{3}});
  auto vv = v.mutable_unchecked<2>();
  auto ff = f.mutable_unchecked<2>();
  for (std::size_t i = 0; i < m.vertices().size(); ++i)
    for (int c = 0; c < 3; ++c) vv(i, c) = m.vertices()[i][c];
  for (std::size_t i = 0; i < m.faces().size(); ++i)
    for (int c = 0; c < 3; ++c) ff(i, c) = m.faces()[i][c];
  return py::make_tuple(v, f);
}

py::dict report_dict(const metrics::MetricsReport& r) {
  py::dict d;
  d["name"] = r.name;
  d["iou"] = r.iou;
  d["grid_iou"] = r.grid_iou;
  d["chamfer_l1"] = r.chamfer_l1;
  d["normal_consistency"] = r.normal_consistency;
  d["f_score"] = r.f_score;
  d["precision"] = r.precision;
  d["recall"] = r.recall;
  return d;
}

}  // namespace

PYBIND11_MODULE(_rfuse, m) {
  m.doc() = "Retrieval-augmented volumetric reconstruction (C++ core)";

  py::class_<ChunkLayout>(m, "ChunkLayout")
      .def(py::init<int, int, int>(), py::arg("scene_dim") = 64, py::arg("chunk_dim") = 16, py::arg("patch_dim") = 4)
      .def_readwrite("scene_dim", &ChunkLayout::scene_dim)
      .def_readwrite("chunk_dim", &ChunkLayout::chunk_dim)
      .def_readwrite("patch_dim", &ChunkLayout::patch_dim);

  m.def("unfold", [](const FloatArray& scene, const ChunkLayout& layout) {
    std::vector<py::array_t<float>> out;
    for (const auto& c : unfold(to_grid(scene, 1.0), layout)) out.push_back(to_array(c));
    return out;
  });
  m.def("coarsen", [](const FloatArray& a, int factor) { return to_array(coarsen(to_grid(a, 1.0), factor)); });
  m.def("chunk_iou", [](const FloatArray& a, const FloatArray& b, double thr) {
    return metrics::chunk_iou(to_grid(a, 1.0), to_grid(b, 1.0), thr);
  }, py::arg("a"), py::arg("b"), py::arg("occ_threshold") = 1.0 / 3.0);

  m.def("iou_temperature", py::overload_cast<double, double, double, double>(&embed::iou_temperature),
        py::arg("tau"), py::arg("iou"), py::arg("a") = 10.0, py::arg("b") = -5.0);
  m.def("attention_scores", &fusion::attention_scores, py::arg("h_in"), py::arg("h_retr"));
  m.def("attention_weights", &fusion::attention_weights, py::arg("scores"), py::arg("C"));
  m.def("blend", &fusion::blend, py::arg("p_in"), py::arg("p_retr"), py::arg("scores"), py::arg("C"),
        py::arg("c") = 1.0, py::arg("d") = 0.0);

  m.def("marching_cubes", [](const FloatArray& tdf, double voxel_size) {
    return from_mesh(geom::marching_cubes(to_grid(tdf, voxel_size)));
  }, py::arg("tdf"), py::arg("voxel_size") = 1.0);
  m.def("mesh_to_tdf", [](const VertArray& v, const FaceArray& f, int side,
                          double voxel_size, double trunc_voxels) {
    return to_array(geom::mesh_to_tdf(to_mesh(v, f), {side, side, side}, voxel_size, Vec3::Zero(), trunc_voxels));
  }, py::arg("vertices"), py::arg("faces"), py::arg("side"), py::arg("voxel_size"), py::arg("trunc_voxels") = 3.0);
  m.def("evaluate_meshes", [](const VertArray& pv, const FaceArray& pf, const VertArray& gv, const FaceArray& gf,
                              double voxel_size, std::array<double, 3> lo, std::array<int, 3> dims, double threshold,
                              std::size_t samples, std::uint64_t seed) {
    const metrics::Bounds b{Vec3(lo[0], lo[1], lo[2]), Dims3{dims[0], dims[1], dims[2]}};
    return report_dict(metrics::evaluate(to_mesh(pv, pf), to_mesh(gv, gf), voxel_size, b, threshold, samples, seed));
  }, py::arg("pred_vertices"), py::arg("pred_faces"), py::arg("gt_vertices"), py::arg("gt_faces"), py::arg("voxel_size"), py::arg("origin"), py::arg("dims"),
     py::arg("threshold"), py::arg("samples") = 20000, py::arg("seed") = 0);

  m.def("generate_scene", [](std::uint64_t seed, int scene_dim) {
    pipeline::RoomParams p;
    p.scene_dim = scene_dim;
    const auto s = pipeline::generate_scene(p, seed, "scene");
    py::dict d;
    d["target"] = to_array(s.target);
    d["coarse"] = to_array(s.coarse);
    d["points"] = to_array(s.point_input);
    d["mesh"] = from_mesh(s.mesh);
    std::vector<std::string> items;
    for (auto f : s.items) items.push_back(pipeline::furnishing_name(f));
    d["items"] = items;
    return d;
  }, py::arg("seed"), py::arg("scene_dim") = 32);

  py::class_<db::ChunkDatabase>(m, "ChunkDatabase")
      .def_static("load", &db::ChunkDatabase::load_file)
      .def("__len__", &db::ChunkDatabase::size)
      .def_property_readonly("embed_dim", &db::ChunkDatabase::embed_dim)
      .def_property_readonly("chunk_dim", &db::ChunkDatabase::chunk_dim)
      .def("chunk", [](const db::ChunkDatabase& d, std::size_t i) { return to_array(d.entry(i).chunk); })
      .def("tag", [](const db::ChunkDatabase& d, std::size_t i) { return d.entry(i).tag; })
      .def("knn", [](const db::ChunkDatabase& d, const FloatArray& q, std::size_t k) {
        if (q.size() != d.embed_dim()) throw std::invalid_argument("query has the wrong dimension");
        std::vector<std::pair<std::uint64_t, double>> out;
        for (const auto& n : d.knn(q.data(), k)) out.emplace_back(n.id, n.dist2);
        return out;
      });

  m.def("load_config", [](const std::string& path) {
    std::ostringstream os;
    pipeline::write_config(os, pipeline::load_config(path));
    return os.str();
  });
  m.def("run_stage", [](const std::string& config_text, const std::string& stage, int k, bool extended,
                        const std::string& split) {
    std::istringstream is(config_text);
    const auto cfg = pipeline::parse_config(is);
    pipeline::StageOptions o;
    o.k = k;
    o.extended_db = extended;
    o.split = split;
    pipeline::StageResult res;
    {
      py::gil_scoped_release release;
      res = pipeline::run_stage(cfg, pipeline::parse_stage(stage), o);
    }
    py::dict d;
    d["artifacts"] = res.artifacts;
    if (!res.scenes.empty()) d["mean"] = report_dict(res.mean);
    return d;
  }, py::arg("config_text"), py::arg("stage"), py::arg("k") = 0, py::arg("extended_db") = false,
     py::arg("split") = "test");

  py::register_exception<pipeline::MissingArtifact>(m, "MissingArtifact", PyExc_FileNotFoundError);
}

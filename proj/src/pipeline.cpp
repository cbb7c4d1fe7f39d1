#include "rfuse/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "rfuse/embed.hpp"
#include "rfuse/retrievaldb.hpp"

namespace fs = std::filesystem;

namespace rfuse::pipeline {

const char* task_name(Task t) {
  return t == Task::super_resolution ? "super_resolution" : "surface_reconstruction";
}

Task parse_task(const std::string& s) {
  if (s == "super_resolution") return Task::super_resolution;
  if (s == "surface_reconstruction") return Task::surface_reconstruction;
  throw std::invalid_argument("unknown task '" + s + "' (super_resolution, surface_reconstruction)");
}

void ExperimentConfig::validate() const {
  layout.validate();
  hp.validate();
  if (n_train < 1 || n_test < 0 || n_heldout < 0 || n_extension < 0)
    throw std::invalid_argument("config: scene counts must be non-negative (n_train >= 1)");
  if (layout.scene_dim % room.coarsen_factor)
    throw std::invalid_argument("config: coarsen_factor must divide scene_dim");
  if (hold_out && room.categories.size() < 2)
    throw std::invalid_argument("config: holding out a category needs at least two categories");
  if ((n_heldout > 0 || n_extension > 0) && !hold_out)
    throw std::invalid_argument("config: heldout/extension scenes need hold_out = true");
  if (retrieval_iterations < 0 || refine_iterations < 0 || !(refine_lr > 0))
    throw std::invalid_argument("config: bad training budget");
  if (room.catalog_size < 0 || room.position_step < 0) throw std::invalid_argument("config: bad catalog settings");
  if (eval_samples < 1 || !(f_threshold_voxels > 0)) throw std::invalid_argument("config: bad evaluation settings");
}

// ---- config file ------------------------------------------------------------

namespace {

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
  return d;
}

long long to_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long i = 0;
  try {
    i = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw std::invalid_argument("config: '" + key + "' expects an integer, got '" + v + "'");
  return i;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: '" + key + "' expects true/false, got '" + v + "'");
}

std::string join_categories(const std::vector<Furnishing>& c) {
  std::string s;
  for (std::size_t i = 0; i < c.size(); ++i) s += (i ? "," : "") + std::string(furnishing_name(c[i]));
  return s;
}

std::vector<Furnishing> split_categories(const std::string& v) {
  std::vector<Furnishing> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_furnishing(item));
  return out;
}

// Ordered so write_config groups keys by section.
std::vector<std::pair<std::string, Field>> fields(ExperimentConfig& c) {
  std::vector<std::pair<std::string, Field>> f;
  auto num = [&f](const std::string& key, double& ref) {
    f.push_back({key, {[&ref, key](const std::string& v) { ref = to_double(key, v); }, [&ref] { return fmt_double(ref); }}});
  };
  auto integer = [&f](const std::string& key, int& ref) {
    f.push_back({key, {[&ref, key](const std::string& v) { ref = static_cast<int>(to_int(key, v)); },
                       [&ref] { return std::to_string(ref); }}});
  };
  auto text = [&f](const std::string& key, std::string& ref) {
    f.push_back({key, {[&ref](const std::string& v) { ref = v; }, [&ref] { return ref; }}});
  };
  f.push_back({"experiment.task", {[&c](const std::string& v) { c.task = parse_task(v); },
                                   [&c] { return std::string(task_name(c.task)); }}});
  f.push_back({"experiment.mode", {[&c](const std::string& v) { c.mode = fusion::parse_mode(v); },
                                   [&c] { return std::string(fusion::mode_name(c.mode)); }}});
  f.push_back({"experiment.seed", {[&c](const std::string& v) {
                                     c.seed = static_cast<std::uint64_t>(to_int("experiment.seed", v));
                                   },
                                   [&c] { return std::to_string(c.seed); }}});
  text("experiment.out_dir", c.out_dir);
  integer("layout.scene_dim", c.layout.scene_dim);
  integer("layout.chunk_dim", c.layout.chunk_dim);
  integer("layout.patch_dim", c.layout.patch_dim);
  num("hyperparams.tau_retrieval", c.hp.tau_retrieval);
  num("hyperparams.tau_attention", c.hp.tau_attention);
  integer("hyperparams.k", c.hp.k);
  num("hyperparams.lambda_retr", c.hp.lambda_retr);
  num("hyperparams.lambda_attn", c.hp.lambda_attn);
  num("hyperparams.C_sharpness", c.hp.C_sharpness);
  num("hyperparams.iou_a", c.hp.iou_a);
  num("hyperparams.iou_b", c.hp.iou_b);
  num("hyperparams.trunc_voxels", c.hp.trunc_voxels);
  integer("hyperparams.embed_dim", c.hp.embed_dim);
  integer("hyperparams.attn_dim", c.hp.attn_dim);
  num("hyperparams.lr", c.hp.lr);
  integer("hyperparams.batch_retrieval", c.hp.batch_retrieval);
  integer("hyperparams.batch_refine", c.hp.batch_refine);
  integer("hyperparams.feature_dim", c.hp.feature_dim);
  num("hyperparams.occ_threshold", c.hp.occ_threshold);
  num("hyperparams.min_chunk_occupancy", c.hp.min_chunk_occupancy);
  integer("hyperparams.attn_batch", c.hp.attn_batch);
  integer("dataset.n_train", c.n_train);
  integer("dataset.n_test", c.n_test);
  integer("dataset.n_heldout", c.n_heldout);
  integer("dataset.n_extension", c.n_extension);
  f.push_back({"dataset.hold_out", {[&c](const std::string& v) { c.hold_out = to_bool("dataset.hold_out", v); },
                                    [&c] { return std::string(c.hold_out ? "true" : "false"); }}});
  f.push_back({"dataset.held_out_category",
               {[&c](const std::string& v) { c.room.required = parse_furnishing(v); },
                [&c] { return std::string(furnishing_name(c.room.required)); }}});
  f.push_back({"dataset.categories", {[&c](const std::string& v) { c.room.categories = split_categories(v); },
                                      [&c] { return join_categories(c.room.categories); }}});
  text("dataset.obj_dir", c.obj_dir);
  num("dataset.voxel_size", c.room.voxel_size);
  integer("dataset.coarsen_factor", c.room.coarsen_factor);
  integer("dataset.points_per_window", c.room.points_per_window);
  integer("dataset.min_walls", c.room.min_walls);
  integer("dataset.max_walls", c.room.max_walls);
  integer("dataset.min_items", c.room.min_items);
  integer("dataset.max_items", c.room.max_items);
  integer("dataset.catalog_size", c.room.catalog_size);
  f.push_back({"dataset.catalog_seed", {[&c](const std::string& v) {
                                          c.room.catalog_seed = static_cast<std::uint64_t>(to_int("dataset.catalog_seed", v));
                                        },
                                        [&c] { return std::to_string(c.room.catalog_seed); }}});
  num("dataset.position_step", c.room.position_step);
  num("dataset.min_occupancy", c.room.min_occupancy);
  num("dataset.max_occupancy", c.room.max_occupancy);
  integer("training.retrieval_iterations", c.retrieval_iterations);
  integer("training.refine_iterations", c.refine_iterations);
  num("training.refine_lr", c.refine_lr);
  f.push_back({"evaluation.samples", {[&c](const std::string& v) {
                                        c.eval_samples = static_cast<std::size_t>(to_int("evaluation.samples", v));
                                      },
                                      [&c] { return std::to_string(c.eval_samples); }}});
  num("evaluation.f_threshold_voxels", c.f_threshold_voxels);
  return f;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

ExperimentConfig parse_config(std::istream& is) {
  ExperimentConfig cfg;
  auto table = fields(cfg);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw std::invalid_argument("config line " + std::to_string(lineno) + ": bad section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = section + "." + trim(line.substr(0, eq));
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.first == key; });
    if (it == table.end()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second.set(trim(line.substr(eq + 1)));
  }
  cfg.room.scene_dim = cfg.layout.scene_dim;
  cfg.room.trunc_voxels = cfg.hp.trunc_voxels;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config " + path);
  return parse_config(is);
}

void write_config(std::ostream& os, const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  std::string section;
  for (const auto& [key, field] : fields(copy)) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      os << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
      section = sec;
    }
    os << key.substr(dot + 1) << " = " << field.get() << '\n';
  }
}

// ---- stages -----------------------------------------------------------------

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::gen_data: return "gen_data";
    case Stage::train_retrieval: return "train_retrieval";
    case Stage::build_db: return "build_db";
    case Stage::cache_retrievals: return "cache_retrievals";
    case Stage::train_refine: return "train_refine";
    case Stage::reconstruct: return "reconstruct";
    case Stage::evaluate: return "evaluate";
    case Stage::extend_db: return "extend_db";
  }
  return "?";
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s{Stage::gen_data,         Stage::train_retrieval, Stage::build_db,
                                    Stage::cache_retrievals, Stage::train_refine,    Stage::reconstruct,
                                    Stage::evaluate,         Stage::extend_db};
  return s;
}

Stage parse_stage(const std::string& s) {
  for (Stage st : all_stages())
    if (s == stage_name(st)) return st;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

std::string Paths::manifest() const { return root + "/data/manifest.json"; }
std::string Paths::scene(const std::string& name, const std::string& kind) const {
  return root + "/data/" + name + "." + kind + ".rfg";
}
std::string Paths::scene_mesh(const std::string& name) const { return root + "/data/" + name + ".obj"; }
std::string Paths::encoders() const { return root + "/models/encoders.rfc"; }
std::string Paths::database(bool extended) const {
  return root + (extended ? "/db/database_ext.rfdb" : "/db/database.rfdb");
}
std::string Paths::cache(const std::string& window, int k) const {
  return root + "/cache/k" + std::to_string(k) + "/" + window + ".rfdb";
}
std::string Paths::refine_model(fusion::Mode mode, int k) const {
  return root + "/models/refine_" + fusion::mode_name(mode) + "_k" + std::to_string(k) + ".rfm";
}
std::string Paths::run_tag(fusion::Mode mode, int k, bool extended, const std::string& split) const {
  return std::string(fusion::mode_name(mode)) + "_k" + std::to_string(k) + (extended ? "_ext_" : "_base_") + split;
}
std::string Paths::recon(const std::string& tag, const std::string& name, const std::string& ext) const {
  return root + "/recon/" + tag + "/" + name + "." + ext;
}
std::string Paths::report(const std::string& tag, const std::string& ext) const {
  return root + "/reports/" + tag + "." + ext;
}
std::string Paths::log(const std::string& name) const { return root + "/logs/" + name + ".csv"; }

ScalarGrid3 task_input(const ExperimentConfig& cfg, const Scene& scene) {
  if (cfg.task == Task::super_resolution) {
    ScalarGrid3 up = upsample_nearest(scene.coarse, cfg.room.coarsen_factor);
    return ScalarGrid3(up.dims(), scene.target.voxel_size(), scene.target.origin(), std::move(up.storage()));
  }
  return scene.point_input;
}

namespace {

void require(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) throw MissingArtifact("missing " + path + " (run " + hint + " first)");
}

void ensure_parent(const std::string& path) { fs::create_directories(fs::path(path).parent_path()); }

void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

RoomParams room_params(const ExperimentConfig& cfg, bool with_held_out) {
  RoomParams p = cfg.room;
  p.scene_dim = cfg.layout.scene_dim;
  p.trunc_voxels = cfg.hp.trunc_voxels;
  p.require_category = false;
  if (cfg.hold_out && !with_held_out) {
    p.categories.erase(std::remove(p.categories.begin(), p.categories.end(), cfg.room.required), p.categories.end());
  } else if (cfg.hold_out) {
    p.require_category = true;
  }
  return p;
}

// An OBJ scene: padded to whole windows, with inputs derived as for the
// procedural scenes.
Scene scene_from_mesh(const ExperimentConfig& cfg, const geom::TriMesh& mesh, const std::string& name) {
  const double vs = cfg.room.voxel_size;
  const int W = cfg.layout.scene_dim;
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
  for (const auto& v : mesh.vertices()) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  if (mesh.empty()) throw std::invalid_argument("OBJ scene " + name + " has no faces");
  const Vec3 origin = lo - Vec3::Constant(2 * vs);
  auto side = [&](int axis) {
    const int n = static_cast<int>(std::ceil((hi[axis] - origin[axis]) / vs)) + 2;
    return (n + W - 1) / W * W;
  };
  const Dims3 dims{side(0), side(1), side(2)};
  Scene s;
  s.name = name;
  s.mesh = mesh;
  s.target = geom::mesh_to_tdf(mesh, dims, vs, origin, cfg.hp.trunc_voxels);
  s.coarse = coarsen(s.target, cfg.room.coarsen_factor);
  const std::size_t wins = static_cast<std::size_t>(dims.x / W) * (dims.y / W) * (dims.z / W);
  const auto pts = geom::sample_surface(mesh, static_cast<std::size_t>(cfg.room.points_per_window) * wins,
                                        substream_seed(cfg.seed, "obj_points/" + name));
  s.point_input = occupancy_from_points(pts.points, dims, vs, origin).grid;
  for (std::size_t i = 0; i < s.point_input.size(); ++i) s.point_input[i] = 1.0f - s.point_input[i];
  return s;
}

nlohmann::json read_manifest(const Paths& paths) {
  require(paths.manifest(), "gen_data");
  std::ifstream is(paths.manifest());
  return nlohmann::json::parse(is);
}

ScalarGrid3 load_scene_grid(const Paths& paths, const std::string& name, const std::string& kind) {
  const auto p = paths.scene(name, kind);
  require(p, "gen_data");
  return load_grid(p);
}

embed::ChunkEncoderPair load_encoders(const ExperimentConfig& cfg, const Paths& paths) {
  require(paths.encoders(), "train_retrieval");
  embed::ChunkEncoderPair enc(cfg.layout.chunk_dim, cfg.hp.embed_dim, 0);
  enc.load_file(paths.encoders());
  return enc;
}

db::ChunkDatabase load_db(const Paths& paths, bool extended) {
  const auto p = paths.database(extended);
  require(p, extended ? "extend_db" : "build_db");
  return db::ChunkDatabase::load_file(p);
}

int resolve_k(const ExperimentConfig& cfg, const StageOptions& opts) {
  const int k = opts.k > 0 ? opts.k : cfg.hp.k;
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  return k;
}

fusion::FusionConfig fusion_config(const ExperimentConfig& cfg, int k) {
  fusion::FusionConfig f;
  f.layout = cfg.layout;
  f.k = k;
  f.feature_dim = cfg.hp.feature_dim;
  f.attn_dim = cfg.hp.attn_dim;
  f.C = cfg.hp.C_sharpness;
  f.mode = cfg.mode;
  return f;
}

StageResult gen_data(const ExperimentConfig& cfg, const Paths& paths) {
  StageResult res;
  nlohmann::json manifest;
  manifest["task"] = task_name(cfg.task);
  manifest["layout"] = {cfg.layout.scene_dim, cfg.layout.chunk_dim, cfg.layout.patch_dim};
  auto emit = [&](const Scene& s, const std::string& split) {
    for (const auto& [kind, grid] : {std::pair<std::string, const ScalarGrid3*>{"target", &s.target},
                                     {"input", nullptr}}) {
      const auto p = paths.scene(s.name, kind);
      ensure_parent(p);
      save_grid(p, grid ? *grid : task_input(cfg, s));
      res.artifacts.push_back(p);
    }
    geom::save_obj(paths.scene_mesh(s.name), s.mesh);
    res.artifacts.push_back(paths.scene_mesh(s.name));
    manifest[split].push_back(s.name);
  };
  const RoomParams base = room_params(cfg, false), held = room_params(cfg, true);
  manifest["train"] = manifest["test"] = manifest["heldout"] = manifest["extension"] = nlohmann::json::array();
  for (const auto& s : generate_scenes(base, cfg.seed, "train", cfg.n_train)) emit(s, "train");
  for (const auto& s : generate_scenes(base, cfg.seed, "test", cfg.n_test)) emit(s, "test");
  for (const auto& s : generate_scenes(held, cfg.seed, "heldout", cfg.n_heldout)) emit(s, "heldout");
  for (const auto& s : generate_scenes(held, cfg.seed, "ext", cfg.n_extension)) emit(s, "extension");
  if (!cfg.obj_dir.empty()) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cfg.obj_dir))
      if (e.path().extension() == ".obj") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) emit(scene_from_mesh(cfg, geom::load_obj(f.string()), "obj_" + f.stem().string()), "test");
  }
  write_text(paths.manifest(), manifest.dump(2) + "\n");
  res.artifacts.push_back(paths.manifest());
  return res;
}

std::vector<embed::ChunkPair> training_pairs(const ExperimentConfig& cfg, const Paths& paths,
                                             const std::vector<std::string>& names) {
  std::vector<embed::ChunkPair> pairs;
  for (const auto& n : names) {
    const auto in = unfold(load_scene_grid(paths, n, "input"), cfg.layout);
    const auto tg = unfold(load_scene_grid(paths, n, "target"), cfg.layout);
    for (std::size_t i = 0; i < in.size(); ++i) pairs.push_back({in[i], tg[i]});
  }
  return pairs;
}

StageResult train_retrieval_stage(const ExperimentConfig& cfg, const Paths& paths) {
  const auto names = split_names(cfg, "train");
  const auto pairs = training_pairs(cfg, paths, names);
  std::ostringstream log;
  embed::RetrievalTrainOptions opts;
  opts.iterations = cfg.retrieval_iterations;
  opts.log_csv = &log;
  const auto enc = embed::train_retrieval(pairs, cfg.hp, substream_seed(cfg.seed, "retrieval"), opts);
  ensure_parent(paths.encoders());
  enc.save_file(paths.encoders());
  write_text(paths.log("retrieval"), log.str());
  return {{paths.encoders(), paths.log("retrieval")}, {}, {}, 0.0};
}

StageResult build_db_stage(const ExperimentConfig& cfg, const Paths& paths) {
  const auto enc = load_encoders(cfg, paths);
  std::vector<ScalarGrid3> targets;
  for (const auto& n : split_names(cfg, "train")) targets.push_back(load_scene_grid(paths, n, "target"));
  const auto database = db::build(enc, targets, cfg.layout, cfg.hp);
  ensure_parent(paths.database(false));
  database.save_file(paths.database(false));
  return {{paths.database(false)}, {}, {}, 0.0};
}

StageResult cache_stage(const ExperimentConfig& cfg, const Paths& paths, int k) {
  const auto enc = load_encoders(cfg, paths);
  const auto database = load_db(paths, false);
  StageResult res;
  const auto names = split_names(cfg, "train");
  for (std::size_t w = 0; w < names.size(); ++w) {
    const auto input = load_scene_grid(paths, names[w], "input");
    // A window never retrieves its own chunks.
    const auto approx =
        db::assemble_approximations(database, enc, input, cfg.layout, k, db::exclude_tag(database, "train/" + std::to_string(w)));
    std::vector<ScalarGrid3> chunks;
    std::vector<std::string> tags;
    std::vector<float> emb;
    for (const auto& a : approx)
      for (std::uint64_t id : a.ids) {
        const std::size_t idx = database.index_of(id);
        chunks.push_back(database.entry(idx).chunk);
        tags.push_back("rank" + std::to_string(a.rank));
        emb.insert(emb.end(), database.embedding(idx), database.embedding(idx) + database.embed_dim());
      }
    db::ChunkDatabase cache(database.chunk_dim(), database.embed_dim());
    cache.append(std::move(chunks), std::move(tags), emb);
    const auto p = paths.cache(names[w], k);
    ensure_parent(p);
    cache.save_file(p);
    res.artifacts.push_back(p);
  }
  return res;
}

std::vector<ScalarGrid3> load_cache(const ExperimentConfig& cfg, const Paths& paths, const std::string& name, int k,
                                    const ScalarGrid3& like) {
  const auto p = paths.cache(name, k);
  require(p, "cache_retrievals --k " + std::to_string(k));
  const auto cache = db::ChunkDatabase::load_file(p);
  const std::size_t S = static_cast<std::size_t>(cfg.layout.chunks_per_window());
  if (cache.size() != S * static_cast<std::size_t>(k)) throw std::runtime_error("retrieval cache " + p + " has the wrong size");
  std::vector<ScalarGrid3> out;
  for (int r = 0; r < k; ++r) {
    std::vector<ScalarGrid3> chunks;
    for (std::size_t s = 0; s < S; ++s) chunks.push_back(cache.entry(r * S + s).chunk);
    ScalarGrid3 g = fold(chunks, cfg.layout);
    out.emplace_back(g.dims(), like.voxel_size(), like.origin(), std::move(g.storage()));
  }
  return out;
}

StageResult train_refine_stage(const ExperimentConfig& cfg, const Paths& paths, int k) {
  std::vector<fusion::FusionSample> data;
  for (const auto& n : split_names(cfg, "train")) {
    fusion::FusionSample s;
    s.input = load_scene_grid(paths, n, "input");
    s.target = load_scene_grid(paths, n, "target");
    if (cfg.mode != fusion::Mode::no_retrieval) s.approx = load_cache(cfg, paths, n, k, s.input);
    data.push_back(std::move(s));
  }
  std::ostringstream log;
  fusion::RefineTrainOptions opts;
  opts.iterations = cfg.refine_iterations;
  opts.lr = cfg.refine_lr;
  opts.log_csv = &log;
  const auto model = fusion::train_refinement(data, fusion_config(cfg, k), cfg.hp, substream_seed(cfg.seed, "refine"), opts);
  const auto p = paths.refine_model(cfg.mode, k);
  ensure_parent(p);
  model.save_file(p);
  const auto lp = paths.log(std::string("refine_") + fusion::mode_name(cfg.mode) + "_k" + std::to_string(k));
  write_text(lp, log.str());
  return {{p, lp}, {}, {}, 0.0};
}

StageResult reconstruct_stage(const ExperimentConfig& cfg, const Paths& paths, int k, const StageOptions& opts) {
  const auto mp = paths.refine_model(cfg.mode, k);
  require(mp, "train_refine --mode " + std::string(fusion::mode_name(cfg.mode)) + " --k " + std::to_string(k));
  const auto model = fusion::FusionModel::load_file(mp);
  db::ChunkDatabase database;
  embed::ChunkEncoderPair enc;
  if (cfg.mode != fusion::Mode::no_retrieval) {
    database = load_db(paths, opts.extended_db);
    enc = load_encoders(cfg, paths);
  }
  const auto tag = paths.run_tag(cfg.mode, k, opts.extended_db, opts.split);
  StageResult res;
  for (const auto& n : split_names(cfg, opts.split)) {
    const auto rec = fusion::reconstruct_scene(model, database, enc, load_scene_grid(paths, n, "input"));
    const auto gp = paths.recon(tag, n, "rfg"), mp2 = paths.recon(tag, n, "obj");
    ensure_parent(gp);
    save_grid(gp, rec.tdf);
    geom::save_obj(mp2, rec.mesh);
    res.artifacts.push_back(gp);
    res.artifacts.push_back(mp2);
  }
  return res;
}

StageResult evaluate_stage(const ExperimentConfig& cfg, const Paths& paths, int k, const StageOptions& opts) {
  const auto tag = paths.run_tag(cfg.mode, k, opts.extended_db, opts.split);
  StageResult res;
  for (const auto& n : split_names(cfg, opts.split)) {
    const auto gp = paths.recon(tag, n, "rfg");
    require(gp, "reconstruct");
    const auto pred = load_grid(gp);
    const auto gt = load_scene_grid(paths, n, "target");
    const auto pred_mesh = geom::load_obj(paths.recon(tag, n, "obj"));
    require(paths.scene_mesh(n), "gen_data");
    const auto gt_mesh = geom::load_obj(paths.scene_mesh(n));
    metrics::Bounds bounds{gt.origin(), gt.dims()};
    auto r = metrics::evaluate(pred_mesh, gt_mesh, gt.voxel_size(), bounds, cfg.f_threshold_voxels * gt.voxel_size(),
                               cfg.eval_samples, substream_seed(cfg.seed, "evaluate"));
    r.name = n;
    r.grid_iou = metrics::chunk_iou(pred, gt, cfg.hp.occ_threshold);
    res.scenes.push_back(r);
  }
  res.mean = metrics::aggregate(res.scenes);
  res.mean_tdf_iou = res.mean.grid_iou;
  std::ostringstream js, txt;
  metrics::write_report_json(js, res.scenes, res.mean);
  metrics::write_report_text(txt, res.scenes, res.mean);
  write_text(paths.report(tag, "json"), js.str());
  write_text(paths.report(tag, "txt"), txt.str());
  res.artifacts = {paths.report(tag, "json"), paths.report(tag, "txt")};
  return res;
}

StageResult extend_db_stage(const ExperimentConfig& cfg, const Paths& paths) {
  auto database = load_db(paths, false);
  const auto enc = load_encoders(cfg, paths);
  std::vector<ScalarGrid3> chunks;
  std::vector<std::string> tags;
  const auto names = split_names(cfg, "extension");
  for (std::size_t w = 0; w < names.size(); ++w)
    for (auto& c : unfold(load_scene_grid(paths, names[w], "target"), cfg.layout)) {
      if (occupancy_fraction(c, static_cast<float>(cfg.hp.occ_threshold)) < cfg.hp.min_chunk_occupancy) continue;
      chunks.emplace_back(c.dims(), 1.0, Vec3::Zero(), std::vector<float>(c.values().begin(), c.values().end()));
      tags.push_back("ext/" + std::to_string(w));
    }
  db::extend(database, enc, chunks, tags);
  const auto p = paths.database(true);
  database.save_file(p);
  return {{p}, {}, {}, 0.0};
}

}  // namespace

std::vector<std::string> split_names(const ExperimentConfig& cfg, const std::string& split) {
  const auto m = read_manifest(Paths(cfg.out_dir));
  if (!m.contains(split)) throw std::invalid_argument("unknown split '" + split + "'");
  return m[split].get<std::vector<std::string>>();
}

StageResult run_stage(const ExperimentConfig& cfg, Stage stage, const StageOptions& opts) {
  cfg.validate();
  const Paths paths(cfg.out_dir);
  const int k = resolve_k(cfg, opts);
  switch (stage) {
    case Stage::gen_data: return gen_data(cfg, paths);
    case Stage::train_retrieval: return train_retrieval_stage(cfg, paths);
    case Stage::build_db: return build_db_stage(cfg, paths);
    case Stage::cache_retrievals: return cache_stage(cfg, paths, k);
    case Stage::train_refine: return train_refine_stage(cfg, paths, k);
    case Stage::reconstruct: return reconstruct_stage(cfg, paths, k, opts);
    case Stage::evaluate: return evaluate_stage(cfg, paths, k, opts);
    case Stage::extend_db: return extend_db_stage(cfg, paths);
  }
  throw std::logic_error("unhandled stage");
}

}  // namespace rfuse::pipeline

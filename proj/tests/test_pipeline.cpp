#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "rfuse/pipeline.hpp"

using namespace rfuse;
using namespace rfuse::pipeline;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

bool has(const std::vector<Furnishing>& items, Furnishing f) {
  return std::find(items.begin(), items.end(), f) != items.end();
}

ExperimentConfig tiny_config(const std::string& dir) {
  ExperimentConfig cfg;
  cfg.out_dir = dir;
  cfg.layout = ChunkLayout{32, 8, 4};
  cfg.n_train = 3;
  cfg.n_test = 1;
  cfg.hp.embed_dim = 8;
  cfg.hp.feature_dim = 8;
  cfg.hp.attn_dim = 8;
  cfg.hp.k = 2;
  cfg.hp.batch_retrieval = 8;
  cfg.hp.batch_refine = 1;
  cfg.hp.attn_batch = 8;
  cfg.retrieval_iterations = 3;
  cfg.refine_iterations = 2;
  cfg.eval_samples = 500;
  cfg.seed = 11;
  return cfg;
}

}  // namespace

TEST_CASE("procedural scenes are deterministic and inside the occupancy band") {
  RoomParams p;
  const Scene a = generate_scene(p, 5, "room");
  const Scene b = generate_scene(p, 5, "room");
  CHECK(a.target.storage() == b.target.storage());
  CHECK(a.point_input.storage() == b.point_input.storage());
  CHECK(a.mesh.vertices().size() == b.mesh.vertices().size());
  const Scene c = generate_scene(p, 6, "room");
  CHECK(a.target.storage() != c.target.storage());

  CHECK(a.target.dims() == Dims3{32, 32, 32});
  CHECK(a.coarse.dims() == Dims3{8, 8, 8});
  const double occ = occupancy_fraction(a.target, 1.0f / 3.0f);
  CHECK(occ >= p.min_occupancy);
  CHECK(occ <= p.max_occupancy);
  for (float v : a.target.values()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  // Point input: hits are 0, everything else 1.
  std::size_t hits = 0;
  for (float v : a.point_input.values()) {
    CHECK((v == 0.0f || v == 1.0f));
    hits += v == 0.0f;
  }
  CHECK(hits > 0);
  CHECK(hits <= static_cast<std::size_t>(p.points_per_window));
}

TEST_CASE("scene batches use per-name streams") {
  RoomParams p;
  const auto batch = generate_scenes(p, 3, "train", 3);
  REQUIRE(batch.size() == 3);
  CHECK(batch[1].name == "train_1");
  CHECK(batch[1].target.storage() == generate_scenes(p, 3, "train", 2)[1].target.storage());
  CHECK(batch[0].target.storage() != batch[1].target.storage());
}

TEST_CASE("category restriction and required category") {
  RoomParams p;
  p.categories = {Furnishing::box, Furnishing::cylinder};
  for (const auto& s : generate_scenes(p, 1, "a", 6)) CHECK_FALSE(has(s.items, Furnishing::sphere));
  p.categories = {Furnishing::box, Furnishing::cylinder, Furnishing::sphere};
  p.require_category = true;
  p.required = Furnishing::sphere;
  for (const auto& s : generate_scenes(p, 1, "b", 6)) CHECK(has(s.items, Furnishing::sphere));
  CHECK(parse_furnishing("cylinder") == Furnishing::cylinder);
  CHECK_THROWS(parse_furnishing("sofa"));
}

TEST_CASE("catalog furnishings repeat across scenes on the position lattice") {
  RoomParams p;
  p.min_walls = p.max_walls = 0;
  p.min_items = p.max_items = 1;
  p.categories = {Furnishing::box};
  p.catalog_size = 1;
  p.position_step = 4;
  p.min_occupancy = 0.0;
  struct Extent {
    double w, d, h, cx, cy;
  };
  auto item_extent = [&](const Scene& s) {
    // Everything above the floor slab belongs to the single item.
    Vec3 lo = Vec3::Constant(1e9), hi = -lo;
    for (const auto& v : s.mesh.vertices())
      if (v.z() > 0.25) {
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
      }
    return Extent{hi.x() - lo.x(), hi.y() - lo.y(), hi.z(), (lo.x() + hi.x()) / 2, (lo.y() + hi.y()) / 2};
  };
  const auto scenes = generate_scenes(p, 4, "cat", 5);
  const Extent first = item_extent(scenes[0]);
  for (const auto& s : scenes) {
    const Extent e = item_extent(s);
    CHECK(e.w == doctest::Approx(first.w).epsilon(1e-12));
    CHECK(e.d == doctest::Approx(first.d).epsilon(1e-12));
    CHECK(e.h == doctest::Approx(first.h).epsilon(1e-12));
    // Centres on multiples of four voxels (0.4 m).
    CHECK(std::remainder(e.cx, 0.4) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(std::remainder(e.cy, 0.4) == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("config round trip and validation") {
  ExperimentConfig cfg;
  cfg.task = Task::surface_reconstruction;
  cfg.mode = fusion::Mode::naive;
  cfg.hp.k = 3;
  cfg.hp.lambda_retr = 0.25;
  cfg.n_train = 17;
  cfg.hold_out = true;
  cfg.n_heldout = 2;
  cfg.room.required = Furnishing::cylinder;
  cfg.seed = 99;
  std::stringstream ss;
  write_config(ss, cfg);
  const std::string text = ss.str();
  CHECK(text.find("[hyperparams]") != std::string::npos);
  const ExperimentConfig back = parse_config(ss);
  std::stringstream again;
  write_config(again, back);
  CHECK(again.str() == text);
  CHECK(back.task == Task::surface_reconstruction);
  CHECK(back.hp.k == 3);
  CHECK(back.room.required == Furnishing::cylinder);

  std::istringstream partial("# comment\n[dataset]\nn_train = 4  # trailing\n[training]\nrefine_lr = 0.01\n");
  const auto p = parse_config(partial);
  CHECK(p.n_train == 4);
  CHECK(p.refine_lr == doctest::Approx(0.01));
  CHECK(p.hp.k == HyperParams{}.k);

  std::istringstream unknown("[dataset]\nn_trian = 4\n");
  CHECK_THROWS_AS(parse_config(unknown), std::invalid_argument);
  std::istringstream bad_value("[hyperparams]\nk = four\n");
  CHECK_THROWS_AS(parse_config(bad_value), std::invalid_argument);
  std::istringstream no_holdout("[dataset]\nn_extension = 2\n");
  CHECK_THROWS_AS(parse_config(no_holdout), std::invalid_argument);
}

TEST_CASE("stage names") {
  for (Stage s : all_stages()) CHECK(parse_stage(stage_name(s)) == s);
  CHECK_THROWS(parse_stage("train"));
}

TEST_CASE("tiny pipeline runs end to end and is byte-reproducible") {
  const fs::path root = fs::temp_directory_path() / "rfuse_pipeline_test";
  fs::remove_all(root);
  ExperimentConfig cfg = tiny_config((root / "a").string());

  CHECK_THROWS_AS(run_stage(cfg, Stage::train_retrieval), MissingArtifact);

  auto run_all = [](const ExperimentConfig& c) {
    std::vector<std::string> artifacts;
    for (Stage s : {Stage::gen_data, Stage::train_retrieval, Stage::build_db, Stage::cache_retrievals,
                    Stage::train_refine, Stage::reconstruct, Stage::evaluate}) {
      const auto r = run_stage(c, s);
      artifacts.insert(artifacts.end(), r.artifacts.begin(), r.artifacts.end());
    }
    return artifacts;
  };
  const auto first = run_all(cfg);
  CHECK(split_names(cfg, "train").size() == 3);
  const auto eval = run_stage(cfg, Stage::evaluate);
  REQUIRE(eval.scenes.size() == 1);
  CHECK(eval.mean_tdf_iou >= 0.0);
  CHECK(eval.mean_tdf_iou <= 1.0);
  CHECK(fs::exists(Paths(cfg.out_dir).report("attention_k2_base_test", "json")));

  ExperimentConfig cfg_b = cfg;
  cfg_b.out_dir = (root / "b").string();
  const auto second = run_all(cfg_b);
  REQUIRE(first.size() == second.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    const std::string rel = fs::relative(first[i], cfg.out_dir).string();
    CHECK_MESSAGE(slurp(first[i]) == slurp((fs::path(cfg_b.out_dir) / rel).string()), rel);
  }
  fs::remove_all(root);
}

TEST_CASE("held-out category and database extension") {
  const fs::path root = fs::temp_directory_path() / "rfuse_pipeline_ext";
  fs::remove_all(root);
  ExperimentConfig cfg = tiny_config(root.string());
  cfg.hold_out = true;
  cfg.n_heldout = 1;
  cfg.n_extension = 2;
  cfg.mode = fusion::Mode::no_retrieval;
  run_stage(cfg, Stage::gen_data);
  run_stage(cfg, Stage::train_retrieval);
  run_stage(cfg, Stage::build_db);
  run_stage(cfg, Stage::extend_db);
  const Paths paths(cfg.out_dir);
  const auto base = db::ChunkDatabase::load_file(paths.database(false));
  const auto ext = db::ChunkDatabase::load_file(paths.database(true));
  CHECK(ext.size() > base.size());
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(ext.entry(i).id == base.entry(i).id);
  CHECK(ext.entry(ext.size() - 1).tag.rfind("ext/", 0) == 0);

  // Training never touches the cache in no_retrieval mode.
  run_stage(cfg, Stage::train_refine);
  StageOptions o;
  o.split = "heldout";
  run_stage(cfg, Stage::reconstruct, o);
  CHECK(run_stage(cfg, Stage::evaluate, o).scenes.size() == 1);

  // Ground truth as the prediction.
  const std::string tag = paths.run_tag(cfg.mode, cfg.hp.k, false, "test");
  for (const auto& n : split_names(cfg, "test")) {
    fs::create_directories(fs::path(paths.recon(tag, n, "rfg")).parent_path());
    fs::copy_file(paths.scene(n, "target"), paths.recon(tag, n, "rfg"), fs::copy_options::overwrite_existing);
    fs::copy_file(paths.scene_mesh(n), paths.recon(tag, n, "obj"), fs::copy_options::overwrite_existing);
  }
  const auto perfect = run_stage(cfg, Stage::evaluate);
  REQUIRE(perfect.scenes.size() == 1);
  CHECK(perfect.mean.iou == 1.0);
  CHECK(perfect.mean.chamfer_l1 < 1e-9);
  CHECK(perfect.mean.f_score == 1.0);
  CHECK(perfect.mean.normal_consistency >= 0.999);
  CHECK(perfect.mean_tdf_iou == 1.0);
  fs::remove_all(root);
}

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "rfuse/fusion.hpp"
#include "rfuse/grids.hpp"
#include "rfuse/hyperparams.hpp"
#include "rfuse/metrics.hpp"
#include "rfuse/procedural.hpp"

namespace rfuse::pipeline {

enum class Task { super_resolution, surface_reconstruction };
const char* task_name(Task t);
Task parse_task(const std::string& s);

struct ExperimentConfig {
  Task task = Task::super_resolution;
  ChunkLayout layout{64, 16, 4};
  HyperParams hp;
  RoomParams room;
  int n_train = 200;
  int n_test = 20;
  int n_heldout = 0;       // test scenes that contain the held-out category
  int n_extension = 0;     // scenes whose chunks extend the database
  bool hold_out = false;   // hold room.required out of train/test/database
  std::string obj_dir;     // optional OBJ scenes appended to the test set
  fusion::Mode mode = fusion::Mode::attention;
  int retrieval_iterations = 5000;
  int refine_iterations = 15000;
  double refine_lr = 1e-3;
  std::size_t eval_samples = 20000;
  double f_threshold_voxels = 1.0;  // F-score threshold in target voxels
  std::string out_dir = "rfuse_out";
  std::uint64_t seed = 0;

  void validate() const;
};

/// Parses "[section]" headers and "key = value" lines ('#' starts a comment).
/// Unknown keys are errors so typos do not go unnoticed.
ExperimentConfig parse_config(std::istream& is);
ExperimentConfig load_config(const std::string& path);
/// Writes every field in the same format.
void write_config(std::ostream& os, const ExperimentConfig& cfg);

enum class Stage { gen_data, train_retrieval, build_db, cache_retrievals, train_refine, reconstruct, evaluate, extend_db };
const char* stage_name(Stage s);
Stage parse_stage(const std::string& s);
const std::vector<Stage>& all_stages();

struct StageOptions {
  int k = 0;                     // 0 uses hp.k
  bool extended_db = false;      // reconstruct with the extended database
  std::string split = "test";    // "test" or "heldout"
};

/// Missing prerequisite artifact.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Artifact locations inside cfg.out_dir.
struct Paths {
  std::string root;
  explicit Paths(const std::string& out_dir) : root(out_dir) {}
  std::string manifest() const;
  std::string scene(const std::string& name, const std::string& kind) const;  // kind: target, input
  std::string scene_mesh(const std::string& name) const;
  std::string encoders() const;
  std::string database(bool extended) const;
  std::string cache(const std::string& window, int k) const;
  std::string refine_model(fusion::Mode mode, int k) const;
  std::string run_tag(fusion::Mode mode, int k, bool extended, const std::string& split) const;
  std::string recon(const std::string& tag, const std::string& name, const std::string& ext) const;
  std::string report(const std::string& tag, const std::string& ext) const;
  std::string log(const std::string& name) const;
};

struct StageResult {
  std::vector<std::string> artifacts;
  /// evaluate only: per-scene reports and the aggregate.
  std::vector<metrics::MetricsReport> scenes;
  metrics::MetricsReport mean;
  double mean_tdf_iou = 0.0;
};

/// Runs one stage. Each stage only reads artifacts written by earlier stages
/// and rewrites its own outputs deterministically.
StageResult run_stage(const ExperimentConfig& cfg, Stage stage, const StageOptions& opts = {});

/// Scene names per split, in manifest order.
std::vector<std::string> split_names(const ExperimentConfig& cfg, const std::string& split);

/// Network input for a scene under the configured task, at target resolution.
ScalarGrid3 task_input(const ExperimentConfig& cfg, const Scene& scene);

}  // namespace rfuse::pipeline

#pragma once

#include <functional>
#include <map>
#include <string>

#include "kvd/multimodal.hpp"

#include <json.hpp>

namespace kvd {

enum class Stage { kPretrainLm, kAdaptVlm, kDistill };

std::string stage_name(Stage s);
Stage stage_from_name(const std::string& name);

enum class DataSubset { kFull, kLang };

/// One experiment variant: which stage, which data, which objective.
struct RunConfig {
  std::string variant = "custom";
  Stage stage = Stage::kDistill;
  AlphaPolicy policy;                 // alpha per category and temperature
  bool kd_enabled = false;            // false: plain CE objective
  DataSubset data_subset = DataSubset::kFull;
  TransformerConfig model;
  VisionConfig vision;
  TeacherEmbeds teacher_embeds = TeacherEmbeds::kShared;
  uint64_t seed = 1;
  int batch_size = 16;
  int total_steps = 2000;
  ScheduleConfig schedule;
  double clip_norm = 1.0;
  bool train_vision_in_stage3 = false;
  // Mask image rows out of the teacher's attention so its soft targets stay
  // in-distribution for a text-only model (selective presets enable this).
  bool teacher_text_only = false;
  bool mix_text_in_distill = false;   // ablation flag: add text samples to stage 3

  void apply_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Named experiment presets (baselines, uniform KD, selective KD).
RunConfig preset(const std::string& name);
std::vector<std::string> preset_names();

// --- Checkpoints -----------------------------------------------------------

struct CheckpointData {
  int version = 1;
  std::string kind;  // "lm" or "tower"
  int64_t step = 0;
  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> tensors;
  bool has_optimizer = false;
  int64_t opt_step = 0;
  std::vector<double> opt_m, opt_v;
};

/// Directory of raw little-endian double buffers plus a metadata document
/// carrying per-buffer content hashes, verified on load.
void save_checkpoint(const std::string& dir, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& dir);

void copy_into(std::vector<std::pair<std::string, Tensor>> dst,
               const std::vector<std::pair<std::string, Tensor>>& src);

// --- Stage execution -------------------------------------------------------

struct StageData {
  std::vector<Sample> text;
  std::vector<Sample> lang_mm;
  std::vector<Sample> ocr_mm;
};

StageData generate_stage_data(uint64_t seed, int n_text, int n_lang_mm, int n_ocr_mm);

struct StageResult {
  std::string checkpoint_dir;
  std::string metrics_path;
  LossBreakdown last_loss;
};

constexpr const char* kMetricsHeader =
    "step,lr,loss_combined,loss_soft_lang,loss_soft_ocr,loss_hard_lang,"
    "loss_hard_ocr,grad_norm,tokens_counted";

using EvalHook = std::function<void(int step, DualTower& tower)>;

/// Runs one stage end to end: deterministic per-step batch sampling, the
/// shared metrics log, and a final checkpoint. `lm_checkpoint` seeds the
/// student (adapt stage) or the frozen teacher (distill stage);
/// `vlm_checkpoint` seeds the tower for the distill stage. Pass `resume_from`
/// to continue a previously saved run of the same config.
StageResult run_stage(const RunConfig& cfg, const StageData& data,
                      const std::string& out_dir,
                      const std::string& lm_checkpoint = "",
                      const std::string& vlm_checkpoint = "",
                      const std::string& resume_from = "",
                      const EvalHook& eval_hook = nullptr, int eval_interval = 0);

/// Builds the tower a stage trains, with freeze flags already applied.
DualTower build_stage_tower(const RunConfig& cfg, const std::string& lm_checkpoint,
                            const std::string& vlm_checkpoint);

/// Loads a tower for evaluation from any tower checkpoint.
DualTower load_tower(const std::string& checkpoint_dir);
/// Loads a text-only decoder wrapped in a tower (vision unused).
DualTower load_lm_as_tower(const std::string& checkpoint_dir);

}  // namespace kvd

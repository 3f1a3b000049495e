#pragma once

#include <optional>

#include "kvd/data.hpp"
#include "kvd/optim.hpp"
#include "kvd/transformer.hpp"

namespace kvd {

struct VisionConfig {
  int image_size = kImageSize;
  int patch_size = 12;
  int d_vis = 64;
  int depth = 2;
  int n_heads = 2;
  int d_ff = 128;

  int n_patches() const {
    int per_side = image_size / patch_size;
    return per_side * per_side;
  }
  void validate() const;
  bool operator==(const VisionConfig&) const = default;
};

struct VisionEncoderWeights {
  VisionConfig config;
  Tensor patch_proj;  // [patch_size^2 x d_vis]
  Tensor patch_pos;   // [n_patches x d_vis]
  std::vector<LayerWeights> blocks;
  Tensor final_norm;

  static VisionEncoderWeights init(const VisionConfig& cfg, std::mt19937_64& rng);
  std::vector<std::pair<std::string, Tensor>> named_parameters();
  void set_requires_grad(bool value);
};

struct ProjectorWeights {
  Tensor w;  // [d_vis x d_model]

  static ProjectorWeights init(int d_vis, int d_model, std::mt19937_64& rng);
  std::vector<std::pair<std::string, Tensor>> named_parameters();
  void set_requires_grad(bool value);
};

enum class TeacherEmbeds { kShared, kOwn };

/// Trainable multimodal side plus the frozen text teacher it distills from.
struct DualTower {
  VisionEncoderWeights vision;
  ProjectorWeights projector;
  DecoderWeights student;
  DecoderWeights teacher;
  TeacherEmbeds teacher_embeds = TeacherEmbeds::kShared;
  // When set, the teacher attends to text positions only: image rows are
  // padded out of its attention mask. The teacher is a text-only model, so
  // this keeps its distillation target in-distribution no matter how far the
  // student's image representations drift; KV sharing still happens on every
  // text position.
  bool teacher_text_only = false;

  /// Parameters whose requires_grad flag is set, in a fixed order.
  std::vector<Tensor> trainable_parameters();
  std::vector<std::pair<std::string, Tensor>> student_named_parameters();
};

Tensor encode_image(VisionEncoderWeights& vision, const ImageGrid& image);
Tensor project_vision(ProjectorWeights& projector, const Tensor& feats);

struct SequenceLayout {
  int n_image = 0;
  int total = 0;
  std::vector<uint8_t> is_image;
};

struct BuiltSequence {
  Tensor student_embeds;
  Tensor teacher_embeds;
  SequenceLayout layout;
};

/// Image tokens (when present) form a prefix block, text tokens follow.
BuiltSequence build_multimodal_sequence(DualTower& tower,
                                        const std::vector<int>& token_ids,
                                        const ImageGrid* image);

std::pair<Tensor, KVCache> student_forward(DualTower& tower, const Tensor& input_embeds,
                                           const AttentionMask& mask);

/// Teacher queries/MLPs/head over the injected student cache. The returned
/// logits carry no graph linkage: no gradient reaches teacher weights or the
/// student cache through this path.
Tensor teacher_forward_shared_kv(DualTower& tower, const Tensor& input_embeds_teacher,
                                 const AttentionMask& mask, const KVCache& student_cache);

struct TrainStepOptions {
  double lr = 1e-3;
  double clip_norm = 1.0;
  bool use_teacher = false;  // distillation stage
};

struct TrainStepResult {
  LossBreakdown breakdown;
  double grad_norm = 0.0;
  bool skipped = false;  // all positions masked, no update applied
};

/// One optimization step over a collated batch. The optimizer must have been
/// constructed over tower.trainable_parameters().
TrainStepResult train_step(DualTower& tower, const Batch& batch,
                           const AlphaPolicy& policy, AdamW& optimizer,
                           const TrainStepOptions& opts);

}  // namespace kvd

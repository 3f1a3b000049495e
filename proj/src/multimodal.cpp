#include "kvd/multimodal.hpp"

#include <cmath>
#include <stdexcept>

namespace kvd {

namespace {

AttentionMask all_visible_mask(int seq_len) {
  AttentionMask m;
  m.seq_len = seq_len;
  m.additive.assign(static_cast<size_t>(seq_len) * seq_len, 0.0);
  m.valid.assign(static_cast<size_t>(seq_len), 1);
  return m;
}

}  // namespace

void VisionConfig::validate() const {
  if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0) {
    throw std::invalid_argument("VisionConfig: image_size " + std::to_string(image_size) +
                                " not divisible by patch_size " +
                                std::to_string(patch_size));
  }
  if (d_vis % n_heads != 0) {
    throw std::invalid_argument("VisionConfig: d_vis not divisible by n_heads");
  }
}

VisionEncoderWeights VisionEncoderWeights::init(const VisionConfig& cfg,
                                                std::mt19937_64& rng) {
  cfg.validate();
  VisionEncoderWeights w;
  w.config = cfg;
  int in_dim = cfg.patch_size * cfg.patch_size;
  double std_in = 1.0 / std::sqrt(static_cast<double>(in_dim));
  double std_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_vis));
  double std_ff = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
  w.patch_proj = Tensor::randn({in_dim, cfg.d_vis}, rng, std_in, true);
  w.patch_pos = Tensor::randn({cfg.n_patches(), cfg.d_vis}, rng, 0.02, true);
  for (int l = 0; l < cfg.depth; ++l) {
    LayerWeights lw;
    lw.attn_norm = Tensor::full({cfg.d_vis}, 1.0, true);
    lw.w_q = Tensor::randn({cfg.d_vis, cfg.d_vis}, rng, std_d, true);
    lw.w_k = Tensor::randn({cfg.d_vis, cfg.d_vis}, rng, std_d, true);
    lw.w_v = Tensor::randn({cfg.d_vis, cfg.d_vis}, rng, std_d, true);
    lw.w_o = Tensor::randn({cfg.d_vis, cfg.d_vis}, rng, std_d, true);
    lw.mlp_norm = Tensor::full({cfg.d_vis}, 1.0, true);
    lw.w_in = Tensor::randn({cfg.d_vis, cfg.d_ff}, rng, std_d, true);
    lw.w_out = Tensor::randn({cfg.d_ff, cfg.d_vis}, rng, std_ff, true);
    w.blocks.push_back(std::move(lw));
  }
  w.final_norm = Tensor::full({cfg.d_vis}, 1.0, true);
  return w;
}

std::vector<std::pair<std::string, Tensor>> VisionEncoderWeights::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch_proj", patch_proj);
  out.emplace_back("patch_pos", patch_pos);
  for (size_t l = 0; l < blocks.size(); ++l) {
    std::string p = "block" + std::to_string(l) + ".";
    out.emplace_back(p + "attn_norm", blocks[l].attn_norm);
    out.emplace_back(p + "w_q", blocks[l].w_q);
    out.emplace_back(p + "w_k", blocks[l].w_k);
    out.emplace_back(p + "w_v", blocks[l].w_v);
    out.emplace_back(p + "w_o", blocks[l].w_o);
    out.emplace_back(p + "mlp_norm", blocks[l].mlp_norm);
    out.emplace_back(p + "w_in", blocks[l].w_in);
    out.emplace_back(p + "w_out", blocks[l].w_out);
  }
  out.emplace_back("final_norm", final_norm);
  return out;
}

void VisionEncoderWeights::set_requires_grad(bool value) {
  for (auto& [name, t] : named_parameters()) t.impl()->requires_grad = value;
}

ProjectorWeights ProjectorWeights::init(int d_vis, int d_model, std::mt19937_64& rng) {
  ProjectorWeights w;
  w.w = Tensor::randn({d_vis, d_model}, rng, 1.0 / std::sqrt(static_cast<double>(d_vis)),
                      true);
  return w;
}

std::vector<std::pair<std::string, Tensor>> ProjectorWeights::named_parameters() {
  return {{"w", w}};
}

void ProjectorWeights::set_requires_grad(bool value) {
  w.impl()->requires_grad = value;
}

std::vector<Tensor> DualTower::trainable_parameters() {
  std::vector<Tensor> out;
  auto take = [&out](std::vector<std::pair<std::string, Tensor>> named) {
    for (auto& [name, t] : named) {
      if (t.requires_grad()) out.push_back(t);
    }
  };
  take(vision.named_parameters());
  take(projector.named_parameters());
  take(student.named_parameters());
  return out;
}

std::vector<std::pair<std::string, Tensor>> DualTower::student_named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& [n, t] : vision.named_parameters()) out.emplace_back("vision." + n, t);
  for (auto& [n, t] : projector.named_parameters()) out.emplace_back("projector." + n, t);
  for (auto& [n, t] : student.named_parameters()) out.emplace_back("student." + n, t);
  return out;
}

Tensor encode_image(VisionEncoderWeights& vision, const ImageGrid& image) {
  const auto& cfg = vision.config;
  if (image.height != cfg.image_size || image.width != cfg.image_size) {
    throw std::invalid_argument("encode_image: image " + std::to_string(image.height) +
                                "x" + std::to_string(image.width) + " does not match " +
                                std::to_string(cfg.image_size));
  }
  int per_side = cfg.image_size / cfg.patch_size;
  int n_patches = cfg.n_patches();
  int in_dim = cfg.patch_size * cfg.patch_size;
  std::vector<double> patches(static_cast<size_t>(n_patches) * in_dim);
  for (int p = 0; p < n_patches; ++p) {
    int py = (p / per_side) * cfg.patch_size;
    int px = (p % per_side) * cfg.patch_size;
    for (int r = 0; r < cfg.patch_size; ++r) {
      for (int c = 0; c < cfg.patch_size; ++c) {
        patches[static_cast<size_t>(p) * in_dim + r * cfg.patch_size + c] =
            image.at(py + r, px + c);
      }
    }
  }
  Tensor x = add(matmul(Tensor::from_data({n_patches, in_dim}, std::move(patches)),
                        vision.patch_proj),
                 vision.patch_pos);
  AttentionMask mask = all_visible_mask(n_patches);
  for (auto& blk : vision.blocks) {
    Tensor xn = rms_norm(x, blk.attn_norm);
    Tensor attn = causal_attention(matmul(xn, blk.w_q), matmul(xn, blk.w_k),
                                   matmul(xn, blk.w_v), mask, cfg.n_heads);
    x = add(x, matmul(attn, blk.w_o));
    Tensor mn = rms_norm(x, blk.mlp_norm);
    x = add(x, matmul(gelu(matmul(mn, blk.w_in)), blk.w_out));
  }
  return rms_norm(x, vision.final_norm);
}

Tensor project_vision(ProjectorWeights& projector, const Tensor& feats) {
  return matmul(feats, projector.w);
}

BuiltSequence build_multimodal_sequence(DualTower& tower,
                                        const std::vector<int>& token_ids,
                                        const ImageGrid* image) {
  const auto& cfg = tower.student.config;
  BuiltSequence out;
  Tensor student_text = embedding_lookup(tower.student.token_embed, token_ids);
  Tensor image_block;
  int n_image = 0;
  if (image) {
    Tensor feats = encode_image(tower.vision, *image);
    image_block = project_vision(tower.projector, feats);
    n_image = image_block.dim(0);
  }
  int total = n_image + static_cast<int>(token_ids.size());
  if (total > cfg.max_seq) {
    throw std::invalid_argument("build_multimodal_sequence: " + std::to_string(total) +
                                " positions exceed max_seq " +
                                std::to_string(cfg.max_seq));
  }
  out.student_embeds =
      image ? concat({image_block, student_text}, 0) : student_text;
  if (tower.teacher_embeds == TeacherEmbeds::kShared) {
    out.teacher_embeds = out.student_embeds;
  } else {
    Tensor teacher_text = embedding_lookup(tower.teacher.token_embed, token_ids);
    out.teacher_embeds = image ? concat({image_block, teacher_text}, 0) : teacher_text;
  }
  if (cfg.position_scheme == PositionScheme::kLearnedAbsolute) {
    Tensor pos_s = slice_rows(tower.student.pos_embed, 0, total);
    out.student_embeds = add(out.student_embeds, pos_s);
    if (tower.teacher_embeds == TeacherEmbeds::kShared) {
      out.teacher_embeds = out.student_embeds;
    } else {
      out.teacher_embeds =
          add(out.teacher_embeds, slice_rows(tower.teacher.pos_embed, 0, total));
    }
  }
  out.layout.n_image = n_image;
  out.layout.total = total;
  out.layout.is_image.assign(static_cast<size_t>(total), 0);
  for (int i = 0; i < n_image; ++i) out.layout.is_image[static_cast<size_t>(i)] = 1;
  return out;
}

std::pair<Tensor, KVCache> student_forward(DualTower& tower, const Tensor& input_embeds,
                                           const AttentionMask& mask) {
  DecoderOutput out = decoder_forward(tower.student, input_embeds, mask);
  return {out.logits, std::move(out.cache)};
}

Tensor teacher_forward_shared_kv(DualTower& tower, const Tensor& input_embeds_teacher,
                                 const AttentionMask& mask,
                                 const KVCache& student_cache) {
  KVCache detached = student_cache.detach();
  Tensor embeds = input_embeds_teacher.detach();
  DecoderOutput out = decoder_forward(tower.teacher, embeds, mask, &detached);
  // Teacher weights are frozen and both inputs were detached, so the logits
  // already carry no graph. Detach again as a hard guarantee.
  return out.logits.requires_grad() ? out.logits.detach() : out.logits;
}

TrainStepResult train_step(DualTower& tower, const Batch& batch,
                           const AlphaPolicy& policy, AdamW& optimizer,
                           const TrainStepOptions& opts) {
  std::vector<ExampleLosses> losses;
  for (const auto& ex : batch.examples) {
    const ImageGrid* img = ex.image ? &*ex.image : nullptr;
    BuiltSequence seq = build_multimodal_sequence(tower, ex.tokens, img);
    int n_image = seq.layout.n_image;
    std::vector<uint8_t> padding(static_cast<size_t>(seq.layout.total), 0);
    for (size_t t = 0; t < ex.mask.size(); ++t) {
      padding[static_cast<size_t>(n_image) + t] = ex.mask[t] ? 0 : 1;
    }
    AttentionMask mask = build_causal_mask(seq.layout.total, padding);
    auto [z_student, cache] = student_forward(tower, seq.student_embeds, mask);
    ExampleLosses el;
    el.z_student = z_student;
    el.tag = ex.tag;
    el.labels.assign(static_cast<size_t>(n_image), kIgnoreIndex);
    el.labels.insert(el.labels.end(), ex.labels.begin(), ex.labels.end());
    el.mask.assign(static_cast<size_t>(n_image), 1);
    el.mask.insert(el.mask.end(), ex.mask.begin(), ex.mask.end());
    if (opts.use_teacher && policy.alpha_for(ex.tag.category) > 0.0) {
      if (tower.teacher_text_only && n_image > 0) {
        std::vector<uint8_t> teacher_padding = padding;
        for (int i = 0; i < n_image; ++i) teacher_padding[static_cast<size_t>(i)] = 1;
        AttentionMask teacher_mask = build_causal_mask(seq.layout.total, teacher_padding);
        el.z_teacher = teacher_forward_shared_kv(tower, seq.teacher_embeds, teacher_mask, cache);
      } else {
        el.z_teacher = teacher_forward_shared_kv(tower, seq.teacher_embeds, mask, cache);
      }
    }
    losses.push_back(std::move(el));
  }
  CombinedLoss combined = combined_loss(losses, policy);
  TrainStepResult result;
  result.breakdown = combined.breakdown;
  if (combined.breakdown.empty) {
    result.skipped = true;
    return result;
  }
  auto params = optimizer.params();
  for (auto& p : params) p.zero_grad();
  backward(combined.graph);
  std::vector<Tensor> mutable_params = params;
  result.grad_norm = clip_global_norm(mutable_params, opts.clip_norm);
  if (!optimizer.step(opts.lr)) {
    result.skipped = true;
  }
  return result;
}

}  // namespace kvd

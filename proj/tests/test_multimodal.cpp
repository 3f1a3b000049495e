#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "kvd/multimodal.hpp"

using namespace kvd;

namespace {

TransformerConfig tiny_lm() {
  TransformerConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.vocab_size = vocab().size();
  cfg.max_seq = 40;
  cfg.d_ff = 32;
  return cfg;
}

VisionConfig tiny_vision() {
  VisionConfig cfg;
  cfg.d_vis = 8;
  cfg.depth = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  return cfg;
}

DualTower make_tower(uint64_t seed) {
  std::mt19937_64 rng(seed);
  DualTower t;
  t.vision = VisionEncoderWeights::init(tiny_vision(), rng);
  t.projector = ProjectorWeights::init(tiny_vision().d_vis, tiny_lm().d_model, rng);
  t.student = DecoderWeights::init(tiny_lm(), rng);
  t.teacher = DecoderWeights::init(tiny_lm(), rng);
  t.teacher.set_requires_grad(false);
  return t;
}

}  // namespace

TEST_CASE("vision config: patch grid arithmetic and validation") {
  VisionConfig cfg = tiny_vision();
  CHECK(cfg.n_patches() == 4);
  CHECK_NOTHROW(cfg.validate());
  cfg.patch_size = 7;  // 24 % 7 != 0
  CHECK_THROWS(cfg.validate());
  cfg = tiny_vision();
  cfg.d_vis = 9;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("encode_image: shape, determinism, pixel sensitivity, size check") {
  std::mt19937_64 rng(2);
  VisionEncoderWeights v = VisionEncoderWeights::init(tiny_vision(), rng);
  Scene scene;
  SceneObject o;
  o.shape = 0;
  o.color = 0;
  o.x = 3;
  o.y = 3;
  scene.objects.push_back(o);
  ImageGrid img = render_image(scene);

  Tensor a = encode_image(v, img);
  CHECK(a.shape() == Shape{4, 8});
  Tensor b = encode_image(v, img);
  CHECK(a.data() == b.data());

  ImageGrid img2 = img;
  img2.at(20, 20) = 1.0;
  Tensor c = encode_image(v, img2);
  bool changed = false;
  for (size_t i = 0; i < c.data().size(); ++i) changed = changed || c.data()[i] != a.data()[i];
  CHECK(changed);

  ImageGrid wrong;
  wrong.height = 12;
  wrong.pixels.resize(12 * 24);
  CHECK_THROWS(encode_image(v, wrong));
}

TEST_CASE("patch extraction: with no mixing blocks, row p sees only patch p") {
  std::mt19937_64 rng(5);
  VisionConfig cfg = tiny_vision();
  cfg.depth = 0;  // projection + positions only, no attention mixing
  VisionEncoderWeights v = VisionEncoderWeights::init(cfg, rng);
  ImageGrid img;
  Tensor base = encode_image(v, img);
  // Patch layout is row-major over a 2x2 grid; pixel (15, 20) lies in patch 3.
  ImageGrid img2 = img;
  img2.at(15, 20) = 1.0;
  Tensor got = encode_image(v, img2);
  for (int p = 0; p < 4; ++p) {
    bool row_changed = false;
    for (int c = 0; c < 8; ++c)
      row_changed = row_changed ||
                    got.data()[static_cast<size_t>(p) * 8 + c] !=
                        base.data()[static_cast<size_t>(p) * 8 + c];
    CHECK(row_changed == (p == 3));
  }
}

TEST_CASE("projector maps features into the decoder width") {
  std::mt19937_64 rng(7);
  ProjectorWeights p = ProjectorWeights::init(8, 16, rng);
  Tensor feats = Tensor::randn({4, 8}, rng, 1.0);
  Tensor out = project_vision(p, feats);
  CHECK(out.shape() == Shape{4, 16});
}

TEST_CASE("sequence building: image prefix block, text rows from the embedding table") {
  DualTower t = make_tower(11);
  auto samples = gen_lang_mm_samples(3, 1);
  const auto& s = samples[0];
  BuiltSequence seq = build_multimodal_sequence(t, s.tokens, &*s.image);
  int n_img = t.vision.config.n_patches();
  CHECK(seq.layout.n_image == n_img);
  CHECK(seq.layout.total == n_img + static_cast<int>(s.tokens.size()));
  for (int i = 0; i < seq.layout.total; ++i)
    CHECK(seq.layout.is_image[static_cast<size_t>(i)] == (i < n_img ? 1 : 0));
  // Text rows are exact embedding-table rows.
  for (size_t tk = 0; tk < s.tokens.size(); ++tk)
    for (int c = 0; c < 16; ++c)
      CHECK(seq.student_embeds.data()[(static_cast<size_t>(n_img) + tk) * 16 + c] ==
            t.student.token_embed.data()[static_cast<size_t>(s.tokens[tk]) * 16 + c]);
  // Shared teacher embeddings alias the student sequence.
  CHECK(seq.teacher_embeds.impl() == seq.student_embeds.impl());

  BuiltSequence text_only = build_multimodal_sequence(t, s.tokens, nullptr);
  CHECK(text_only.layout.n_image == 0);
  CHECK(text_only.layout.total == static_cast<int>(s.tokens.size()));
}

TEST_CASE("own-table teacher embeddings share the image block but not text rows") {
  DualTower t = make_tower(13);
  t.teacher_embeds = TeacherEmbeds::kOwn;
  auto samples = gen_lang_mm_samples(5, 1);
  const auto& s = samples[0];
  BuiltSequence seq = build_multimodal_sequence(t, s.tokens, &*s.image);
  int n_img = t.vision.config.n_patches();
  for (int i = 0; i < n_img * 16; ++i)
    CHECK(seq.teacher_embeds.data()[static_cast<size_t>(i)] ==
          seq.student_embeds.data()[static_cast<size_t>(i)]);
  for (size_t tk = 0; tk < s.tokens.size(); ++tk)
    for (int c = 0; c < 16; ++c)
      CHECK(seq.teacher_embeds.data()[(static_cast<size_t>(n_img) + tk) * 16 + c] ==
            t.teacher.token_embed.data()[static_cast<size_t>(s.tokens[tk]) * 16 + c]);
}

TEST_CASE("sequence building rejects overflow past max_seq") {
  DualTower t = make_tower(17);
  std::vector<int> long_ids(static_cast<size_t>(t.student.config.max_seq) - 2, 1);
  auto samples = gen_lang_mm_samples(7, 1);
  CHECK_THROWS(build_multimodal_sequence(t, long_ids, &*samples[0].image));
  CHECK_NOTHROW(build_multimodal_sequence(t, long_ids, nullptr));
}

TEST_CASE("teacher over the student cache: twin weights reproduce student logits") {
  DualTower t = make_tower(19);
  // Teacher := student, weight for weight.
  auto sn = t.student.named_parameters(), tn = t.teacher.named_parameters();
  for (size_t i = 0; i < sn.size(); ++i) tn[i].second.data() = sn[i].second.data();

  auto samples = gen_lang_mm_samples(9, 1);
  const auto& s = samples[0];
  BuiltSequence seq = build_multimodal_sequence(t, s.tokens, &*s.image);
  AttentionMask mask = build_causal_mask(seq.layout.total);
  auto [z_student, cache] = student_forward(t, seq.student_embeds, mask);
  Tensor z_teacher = teacher_forward_shared_kv(t, seq.teacher_embeds, mask, cache);
  REQUIRE(z_teacher.shape() == z_student.shape());
  for (size_t i = 0; i < z_student.data().size(); ++i)
    CHECK(std::abs(z_teacher.data()[i] - z_student.data()[i]) < 1e-10);
}

TEST_CASE("teacher logits carry no graph and receive no gradient") {
  DualTower t = make_tower(23);
  auto samples = gen_lang_mm_samples(11, 1);
  const auto& s = samples[0];
  BuiltSequence seq = build_multimodal_sequence(t, s.tokens, &*s.image);
  AttentionMask mask = build_causal_mask(seq.layout.total);
  auto [z_student, cache] = student_forward(t, seq.student_embeds, mask);
  Tensor z_teacher = teacher_forward_shared_kv(t, seq.teacher_embeds, mask, cache);
  CHECK_FALSE(z_teacher.requires_grad());
  CHECK(z_teacher.impl()->parents.empty());

  // Distillation loss through both towers reaches the student only.
  ExampleLosses el;
  el.z_teacher = z_teacher;
  el.z_student = z_student;
  el.labels.assign(static_cast<size_t>(seq.layout.total), kIgnoreIndex);
  el.labels.back() = vocab().eos;
  el.mask.assign(static_cast<size_t>(seq.layout.total), 1);
  el.tag = s.tag;
  AlphaPolicy pol;
  pol.alpha_language_heavy = 0.5;
  pol.temperature = 2.0;
  std::vector<ExampleLosses> exs = {el};
  CombinedLoss loss = combined_loss(exs, pol);
  backward(loss.graph);
  for (auto& [name, w] : t.teacher.named_parameters()) CHECK_FALSE(w.has_grad());
  bool student_touched = false;
  for (auto& [name, w] : t.student.named_parameters()) student_touched |= w.has_grad();
  CHECK(student_touched);
}

TEST_CASE("trainable_parameters honours freeze flags") {
  DualTower t = make_tower(29);
  size_t all = t.trainable_parameters().size();
  CHECK(all > 0);
  t.vision.set_requires_grad(false);
  size_t without_vision = t.trainable_parameters().size();
  CHECK(without_vision == all - t.vision.named_parameters().size());
  t.vision.set_requires_grad(true);
  CHECK(t.trainable_parameters().size() == all);
}

TEST_CASE("train_step: loss falls on a fixed batch; the teacher never moves") {
  DualTower t = make_tower(31);
  uint64_t teacher_before = t.teacher.weights_hash();
  auto samples = gen_lang_mm_samples(13, 4);
  Batch batch = collate_batch(samples, t.student.config.max_seq - 4);
  AlphaPolicy pol;  // pure hard loss
  AdamW opt(t.trainable_parameters());
  TrainStepOptions opts;
  opts.lr = 3e-3;
  opts.clip_norm = 1.0;
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 30; ++step) {
    TrainStepResult r = train_step(t, batch, pol, opt, opts);
    REQUIRE_FALSE(r.skipped);
    CHECK(r.grad_norm > 0.0);
    if (step == 0) first = r.breakdown.combined;
    last = r.breakdown.combined;
  }
  CHECK(last < 0.5 * first);
  CHECK(t.teacher.weights_hash() == teacher_before);
}

TEST_CASE("train_step with distillation updates and keeps the teacher frozen") {
  DualTower t = make_tower(37);
  uint64_t teacher_before = t.teacher.weights_hash();
  auto samples = gen_lang_mm_samples(17, 2);
  auto ocr = gen_ocr_mm_samples(17, 2);
  samples.insert(samples.end(), ocr.begin(), ocr.end());
  Batch batch = collate_batch(samples, t.student.config.max_seq - 4);
  AlphaPolicy pol;
  pol.alpha_language_heavy = 0.7;
  pol.alpha_ocr_heavy = 0.0;
  pol.temperature = 4.0;
  AdamW opt(t.trainable_parameters());
  TrainStepOptions opts;
  opts.lr = 1e-3;
  opts.use_teacher = true;
  for (int step = 0; step < 5; ++step) {
    TrainStepResult r = train_step(t, batch, pol, opt, opts);
    REQUIRE_FALSE(r.skipped);
    CHECK(r.breakdown.soft_lang > 0.0);
    CHECK(r.breakdown.soft_ocr == 0.0);
    CHECK(r.breakdown.hard_ocr > 0.0);
  }
  CHECK(t.teacher.weights_hash() == teacher_before);
}

TEST_CASE("text-only teacher masking changes image-sample targets only") {
  auto run_once = [](bool text_only, uint64_t data_seed) {
    DualTower t = make_tower(43);
    t.teacher_text_only = text_only;
    auto samples = gen_lang_mm_samples(data_seed, 2);
    Batch batch = collate_batch(samples, t.student.config.max_seq - 4);
    AlphaPolicy pol;
    pol.alpha_language_heavy = 0.7;
    pol.temperature = 4.0;
    AdamW opt(t.trainable_parameters());
    TrainStepOptions opts;
    opts.use_teacher = true;
    return train_step(t, batch, pol, opt, opts).breakdown;
  };
  // On image-bearing samples the teacher's soft targets differ once image
  // rows are masked out of its attention.
  LossBreakdown with = run_once(true, 23);
  LossBreakdown without = run_once(false, 23);
  CHECK(with.soft_lang != without.soft_lang);
  // The hard (label) term does not involve the teacher at all.
  CHECK(with.hard_lang == without.hard_lang);

  // On a batch with no images the flag is a no-op.
  auto run_text = [](bool text_only) {
    DualTower t = make_tower(44);
    t.teacher_text_only = text_only;
    auto samples = gen_text_corpus(29, 2);
    Batch batch = collate_batch(samples, t.student.config.max_seq - 4);
    AlphaPolicy pol;
    pol.alpha_language_heavy = 0.5;
    pol.temperature = 2.0;
    AdamW opt(t.trainable_parameters());
    TrainStepOptions opts;
    opts.use_teacher = true;
    return train_step(t, batch, pol, opt, opts).breakdown;
  };
  CHECK(run_text(true).combined == run_text(false).combined);
}

TEST_CASE("a batch with no supervised positions is skipped without an update") {
  DualTower t = make_tower(41);
  auto samples = gen_lang_mm_samples(19, 1);
  samples[0].labels.assign(samples[0].labels.size(), kIgnoreIndex);
  Batch batch = collate_batch(samples, t.student.config.max_seq - 4);
  AlphaPolicy pol;
  AdamW opt(t.trainable_parameters());
  uint64_t before = t.student.weights_hash();
  TrainStepResult r = train_step(t, batch, pol, opt, {});
  CHECK(r.skipped);
  CHECK(r.breakdown.empty);
  CHECK(t.student.weights_hash() == before);
  CHECK(opt.step_count() == 0);
}

#include "kvd/train.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fs = std::filesystem;
using nlohmann::json;

namespace kvd {

namespace {

std::string hex64(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_doubles(const fs::path& path, const std::vector<double>& buf) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(double)));
}

std::vector<double> read_doubles(const fs::path& path, size_t count) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: missing buffer " + path.string());
  std::vector<double> buf(count);
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!is) throw std::runtime_error("checkpoint: truncated buffer " + path.string());
  return buf;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

json transformer_config_json(const TransformerConfig& c) {
  return json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
              {"n_heads", c.n_heads},       {"vocab_size", c.vocab_size},
              {"max_seq", c.max_seq},       {"d_ff", c.d_ff},
              {"position_scheme",
               c.position_scheme == PositionScheme::kRotary ? "rotary" : "learned-absolute"}};
}

TransformerConfig transformer_config_from_json(const json& j) {
  TransformerConfig c;
  c.n_layers = j.at("n_layers");
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.vocab_size = j.at("vocab_size");
  c.max_seq = j.at("max_seq");
  c.d_ff = j.at("d_ff");
  std::string p = j.at("position_scheme");
  c.position_scheme =
      p == "rotary" ? PositionScheme::kRotary : PositionScheme::kLearnedAbsolute;
  return c;
}

json vision_config_json(const VisionConfig& c) {
  return json{{"image_size", c.image_size}, {"patch_size", c.patch_size},
              {"d_vis", c.d_vis},           {"depth", c.depth},
              {"n_heads", c.n_heads},       {"d_ff", c.d_ff}};
}

VisionConfig vision_config_from_json(const json& j) {
  VisionConfig c;
  c.image_size = j.at("image_size");
  c.patch_size = j.at("patch_size");
  c.d_vis = j.at("d_vis");
  c.depth = j.at("depth");
  c.n_heads = j.at("n_heads");
  c.d_ff = j.at("d_ff");
  return c;
}

}  // namespace

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kPretrainLm: return "pretrain_lm";
    case Stage::kAdaptVlm: return "adapt_vlm";
    case Stage::kDistill: return "distill";
  }
  return "?";
}

Stage stage_from_name(const std::string& name) {
  if (name == "pretrain_lm") return Stage::kPretrainLm;
  if (name == "adapt_vlm") return Stage::kAdaptVlm;
  if (name == "distill") return Stage::kDistill;
  throw std::invalid_argument("unknown stage: " + name);
}

void RunConfig::apply_json(const json& j) {
  if (j.contains("variant")) variant = j.at("variant");
  if (j.contains("stage")) stage = stage_from_name(j.at("stage"));
  if (j.contains("alpha_language_heavy")) policy.alpha_language_heavy = j.at("alpha_language_heavy");
  if (j.contains("alpha_ocr_heavy")) policy.alpha_ocr_heavy = j.at("alpha_ocr_heavy");
  if (j.contains("temperature")) policy.temperature = j.at("temperature");
  if (j.contains("kd_enabled")) kd_enabled = j.at("kd_enabled");
  if (j.contains("data_subset")) {
    std::string s = j.at("data_subset");
    if (s != "full" && s != "lang") throw std::invalid_argument("data_subset: " + s);
    data_subset = s == "full" ? DataSubset::kFull : DataSubset::kLang;
  }
  if (j.contains("model")) model = transformer_config_from_json(j.at("model"));
  if (j.contains("vision")) vision = vision_config_from_json(j.at("vision"));
  if (j.contains("teacher_embeds")) {
    std::string s = j.at("teacher_embeds");
    teacher_embeds = s == "own" ? TeacherEmbeds::kOwn : TeacherEmbeds::kShared;
  }
  if (j.contains("seed")) seed = j.at("seed");
  if (j.contains("batch_size")) batch_size = j.at("batch_size");
  if (j.contains("total_steps")) {
    total_steps = j.at("total_steps");
    schedule.total_steps = total_steps;
  }
  if (j.contains("peak_lr")) schedule.peak_lr = j.at("peak_lr");
  if (j.contains("warmup_fraction")) schedule.warmup_fraction = j.at("warmup_fraction");
  if (j.contains("floor_lr")) schedule.floor_lr = j.at("floor_lr");
  if (j.contains("clip_norm")) clip_norm = j.at("clip_norm");
  if (j.contains("train_vision_in_stage3")) train_vision_in_stage3 = j.at("train_vision_in_stage3");
  if (j.contains("teacher_text_only")) teacher_text_only = j.at("teacher_text_only");
  if (j.contains("mix_text_in_distill")) mix_text_in_distill = j.at("mix_text_in_distill");
}

json RunConfig::to_json() const {
  return json{
      {"variant", variant},
      {"stage", stage_name(stage)},
      {"alpha_language_heavy", policy.alpha_language_heavy},
      {"alpha_ocr_heavy", policy.alpha_ocr_heavy},
      {"temperature", policy.temperature},
      {"kd_enabled", kd_enabled},
      {"data_subset", data_subset == DataSubset::kFull ? "full" : "lang"},
      {"model", transformer_config_json(model)},
      {"vision", vision_config_json(vision)},
      {"teacher_embeds", teacher_embeds == TeacherEmbeds::kOwn ? "own" : "shared"},
      {"seed", seed},
      {"batch_size", batch_size},
      {"total_steps", total_steps},
      {"peak_lr", schedule.peak_lr},
      {"warmup_fraction", schedule.warmup_fraction},
      {"floor_lr", schedule.floor_lr},
      {"clip_norm", clip_norm},
      {"train_vision_in_stage3", train_vision_in_stage3},
      {"teacher_text_only", teacher_text_only},
      {"mix_text_in_distill", mix_text_in_distill},
  };
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  c.variant = name;
  c.model.vocab_size = vocab().size();
  c.schedule.total_steps = c.total_steps;
  if (name == "pretrain-lm") {
    c.stage = Stage::kPretrainLm;
  } else if (name == "adapt-vlm") {
    c.stage = Stage::kAdaptVlm;
  } else if (name == "ft-full") {
    c.stage = Stage::kDistill;
  } else if (name == "ft-lang") {
    c.stage = Stage::kDistill;
    c.data_subset = DataSubset::kLang;
  } else if (name == "distill-full" || name == "distill-lang") {
    c.stage = Stage::kDistill;
    c.kd_enabled = true;
    c.policy = {0.5, 0.5, 2.0};
    if (name == "distill-lang") c.data_subset = DataSubset::kLang;
  } else if (name == "lingudistill") {
    c.stage = Stage::kDistill;
    c.kd_enabled = true;
    c.policy = {0.7, 0.0, 4.0};
  } else if (name == "lingudistill-highkd") {
    // "Higher teacher involvement" is not pinned numerically upstream; this
    // preset interpolates it as a larger language-side alpha.
    c.stage = Stage::kDistill;
    c.kd_enabled = true;
    c.policy = {0.9, 0.0, 4.0};
  } else if (name == "lingudistill-lowkd") {
    // Same temperature as the other selective presets so per-position soft
    // losses stay comparable across the alpha sweep.
    c.stage = Stage::kDistill;
    c.kd_enabled = true;
    c.policy = {0.3, 0.0, 4.0};
  } else {
    throw std::invalid_argument("unknown preset: " + name);
  }
  return c;
}

std::vector<std::string> preset_names() {
  return {"pretrain-lm",  "adapt-vlm",          "ft-full",
          "ft-lang",      "distill-full",       "distill-lang",
          "lingudistill", "lingudistill-highkd", "lingudistill-lowkd"};
}

void save_checkpoint(const std::string& dir, const CheckpointData& data) {
  fs::create_directories(fs::path(dir) / "tensors");
  json meta;
  meta["version"] = data.version;
  meta["kind"] = data.kind;
  meta["step"] = data.step;
  meta["config"] = json::parse(data.config_json.empty() ? "{}" : data.config_json);
  json tensors = json::array();
  for (const auto& [name, t] : data.tensors) {
    write_doubles(fs::path(dir) / "tensors" / (name + ".bin"), t.data());
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["hash"] = hex64(hash_tensor(t));
    tensors.push_back(entry);
  }
  meta["tensors"] = tensors;
  if (data.has_optimizer) {
    write_doubles(fs::path(dir) / "opt_m.bin", data.opt_m);
    write_doubles(fs::path(dir) / "opt_v.bin", data.opt_v);
    meta["optimizer"] = {
        {"step", data.opt_step},
        {"size", data.opt_m.size()},
        {"m_hash", hex64(fnv1a64(data.opt_m.data(), data.opt_m.size() * sizeof(double)))},
        {"v_hash", hex64(fnv1a64(data.opt_v.data(), data.opt_v.size() * sizeof(double)))}};
  }
  std::ofstream os(fs::path(dir) / "meta.json");
  if (!os) throw std::runtime_error("checkpoint: cannot write meta.json in " + dir);
  os << meta.dump(2) << "\n";
}

CheckpointData load_checkpoint(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "meta.json");
  if (!is) throw std::runtime_error("checkpoint: missing " + dir + "/meta.json");
  json meta = json::parse(is);
  CheckpointData data;
  data.version = meta.at("version");
  if (data.version != 1) {
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(data.version) + " in " + dir);
  }
  data.kind = meta.at("kind");
  data.step = meta.at("step");
  data.config_json = meta.at("config").dump();
  for (const auto& entry : meta.at("tensors")) {
    std::string name = entry.at("name");
    Shape shape = entry.at("shape").get<Shape>();
    size_t n = static_cast<size_t>(shape_numel(shape));
    auto buf = read_doubles(fs::path(dir) / "tensors" / (name + ".bin"), n);
    Tensor t = Tensor::from_data(shape, std::move(buf));
    if (hex64(hash_tensor(t)) != entry.at("hash").get<std::string>()) {
      throw std::runtime_error("checkpoint: hash mismatch for tensor '" + name +
                               "' in " + dir);
    }
    data.tensors.emplace_back(name, t);
  }
  if (meta.contains("optimizer")) {
    data.has_optimizer = true;
    const auto& o = meta.at("optimizer");
    data.opt_step = o.at("step");
    size_t n = o.at("size");
    data.opt_m = read_doubles(fs::path(dir) / "opt_m.bin", n);
    data.opt_v = read_doubles(fs::path(dir) / "opt_v.bin", n);
    if (hex64(fnv1a64(data.opt_m.data(), n * sizeof(double))) !=
            o.at("m_hash").get<std::string>() ||
        hex64(fnv1a64(data.opt_v.data(), n * sizeof(double))) !=
            o.at("v_hash").get<std::string>()) {
      throw std::runtime_error("checkpoint: optimizer hash mismatch in " + dir);
    }
  }
  return data;
}

void copy_into(std::vector<std::pair<std::string, Tensor>> dst,
               const std::vector<std::pair<std::string, Tensor>>& src) {
  std::map<std::string, Tensor> by_name;
  for (const auto& [name, t] : src) by_name.emplace(name, t);
  for (auto& [name, t] : dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    }
    if (it->second.shape() != t.shape()) {
      throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " +
                               shape_str(it->second.shape()) + ", expected " +
                               shape_str(t.shape()));
    }
    t.data() = it->second.data();
  }
}

StageData generate_stage_data(uint64_t seed, int n_text, int n_lang_mm, int n_ocr_mm) {
  StageData d;
  d.text = gen_text_corpus(seed, n_text);
  d.lang_mm = gen_lang_mm_samples(seed + 101, n_lang_mm);
  d.ocr_mm = gen_ocr_mm_samples(seed + 202, n_ocr_mm);
  return d;
}

DualTower build_stage_tower(const RunConfig& cfg, const std::string& lm_checkpoint,
                            const std::string& vlm_checkpoint) {
  cfg.model.validate();
  cfg.vision.validate();
  std::mt19937_64 rng(cfg.seed);
  DualTower tower;
  tower.vision = VisionEncoderWeights::init(cfg.vision, rng);
  tower.projector = ProjectorWeights::init(cfg.vision.d_vis, cfg.model.d_model, rng);
  tower.student = DecoderWeights::init(cfg.model, rng);
  tower.teacher = DecoderWeights::init(cfg.model, rng);
  tower.teacher_embeds = cfg.teacher_embeds;
  tower.teacher_text_only = cfg.teacher_text_only;
  tower.teacher.set_requires_grad(false);

  switch (cfg.stage) {
    case Stage::kPretrainLm:
      // Text-only training; the vision side is never touched.
      tower.vision.set_requires_grad(false);
      tower.projector.set_requires_grad(false);
      break;
    case Stage::kAdaptVlm: {
      if (lm_checkpoint.empty()) {
        throw std::runtime_error("adapt_vlm requires a pretrain_lm checkpoint");
      }
      CheckpointData lm = load_checkpoint(lm_checkpoint);
      copy_into(tower.student.named_parameters(), lm.tensors);
      break;
    }
    case Stage::kDistill: {
      if (lm_checkpoint.empty()) {
        throw std::runtime_error("distill requires the pretrain_lm (teacher) checkpoint");
      }
      if (vlm_checkpoint.empty()) {
        throw std::runtime_error("distill requires an adapt_vlm checkpoint");
      }
      CheckpointData lm = load_checkpoint(lm_checkpoint);
      copy_into(tower.teacher.named_parameters(), lm.tensors);
      CheckpointData vlm = load_checkpoint(vlm_checkpoint);
      copy_into(tower.student_named_parameters(), vlm.tensors);
      if (!cfg.train_vision_in_stage3) tower.vision.set_requires_grad(false);
      break;
    }
  }
  return tower;
}

namespace {

CheckpointData tower_checkpoint(const RunConfig& cfg, DualTower& tower, AdamW& opt,
                                int64_t step) {
  CheckpointData ck;
  ck.kind = cfg.stage == Stage::kPretrainLm ? "lm" : "tower";
  ck.step = step;
  ck.config_json = cfg.to_json().dump();
  if (cfg.stage == Stage::kPretrainLm) {
    ck.tensors = tower.student.named_parameters();
  } else {
    ck.tensors = tower.student_named_parameters();
  }
  ck.has_optimizer = true;
  ck.opt_step = opt.step_count();
  ck.opt_m = opt.moment1();
  ck.opt_v = opt.moment2();
  return ck;
}

}  // namespace

StageResult run_stage(const RunConfig& cfg, const StageData& data,
                      const std::string& out_dir, const std::string& lm_checkpoint,
                      const std::string& vlm_checkpoint, const std::string& resume_from,
                      const EvalHook& eval_hook, int eval_interval) {
  DualTower tower = build_stage_tower(cfg, lm_checkpoint, vlm_checkpoint);

  std::vector<Sample> pool;
  if (cfg.stage == Stage::kPretrainLm) {
    pool = data.text;
  } else {
    pool = data.lang_mm;
    if (cfg.data_subset == DataSubset::kFull) {
      pool.insert(pool.end(), data.ocr_mm.begin(), data.ocr_mm.end());
    }
    if (cfg.stage == Stage::kDistill && cfg.mix_text_in_distill) {
      pool.insert(pool.end(), data.text.begin(), data.text.end());
    }
  }
  if (pool.empty()) throw std::runtime_error("run_stage: empty training pool");

  AdamW optimizer(tower.trainable_parameters());
  int start_step = 0;
  if (!resume_from.empty()) {
    CheckpointData ck = load_checkpoint(resume_from);
    if (cfg.stage == Stage::kPretrainLm) {
      copy_into(tower.student.named_parameters(), ck.tensors);
    } else {
      copy_into(tower.student_named_parameters(), ck.tensors);
    }
    if (!ck.has_optimizer) throw std::runtime_error("resume: checkpoint lacks optimizer state");
    if (ck.opt_m.size() != optimizer.moment1().size()) {
      throw std::runtime_error("resume: optimizer state size mismatch");
    }
    optimizer.moment1() = ck.opt_m;
    optimizer.moment2() = ck.opt_v;
    optimizer.set_step_count(ck.opt_step);
    start_step = static_cast<int>(ck.step);
  }

  uint64_t teacher_hash_before = tower.teacher.weights_hash();

  fs::create_directories(out_dir);
  std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  bool append = !resume_from.empty() && fs::exists(metrics_path);
  std::ofstream metrics(metrics_path, append ? std::ios::app : std::ios::trunc);
  if (!metrics) throw std::runtime_error("run_stage: cannot write " + metrics_path);
  if (!append) metrics << kMetricsHeader << "\n";

  ScheduleConfig sched = cfg.schedule;
  sched.total_steps = cfg.total_steps;
  AlphaPolicy policy = cfg.kd_enabled ? cfg.policy : AlphaPolicy{0.0, 0.0, 1.0};

  TrainStepResult last;
  for (int step = start_step; step < cfg.total_steps; ++step) {
    // Stateless per-step sampling keeps resumed runs on the original stream.
    std::mt19937_64 rng(cfg.seed ^ (0x9E3779B97F4A7C15ull * (static_cast<uint64_t>(step) + 1)));
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    std::vector<Sample> chosen;
    for (int b = 0; b < cfg.batch_size; ++b) chosen.push_back(pool[pick(rng)]);
    Batch batch = collate_batch(chosen, cfg.model.max_seq);

    TrainStepOptions opts;
    opts.lr = cosine_warmup_lr(step, sched);
    opts.clip_norm = cfg.clip_norm;
    opts.use_teacher = cfg.kd_enabled;
    last = train_step(tower, batch, policy, optimizer, opts);

    const auto& bd = last.breakdown;
    metrics << step << "," << fmt_double(opts.lr) << "," << fmt_double(bd.combined)
            << "," << fmt_double(bd.soft_lang) << "," << fmt_double(bd.soft_ocr) << ","
            << fmt_double(bd.hard_lang) << "," << fmt_double(bd.hard_ocr) << ","
            << fmt_double(last.grad_norm) << "," << bd.counted_positions << "\n";
    if (eval_hook && eval_interval > 0 && (step + 1) % eval_interval == 0) {
      eval_hook(step + 1, tower);
    }
  }
  metrics.close();

  if (tower.teacher.weights_hash() != teacher_hash_before) {
    throw std::runtime_error("run_stage: teacher weights changed during training");
  }

  std::string ckpt_dir = (fs::path(out_dir) / "checkpoint").string();
  save_checkpoint(ckpt_dir, tower_checkpoint(cfg, tower, optimizer, cfg.total_steps));

  StageResult res;
  res.checkpoint_dir = ckpt_dir;
  res.metrics_path = metrics_path;
  res.last_loss = last.breakdown;
  return res;
}

DualTower load_tower(const std::string& checkpoint_dir) {
  CheckpointData ck = load_checkpoint(checkpoint_dir);
  if (ck.kind != "tower") {
    throw std::runtime_error("load_tower: checkpoint kind '" + ck.kind +
                             "' is not a tower");
  }
  RunConfig cfg;
  cfg.apply_json(json::parse(ck.config_json));
  DualTower tower;
  std::mt19937_64 rng(0);
  tower.vision = VisionEncoderWeights::init(cfg.vision, rng);
  tower.projector = ProjectorWeights::init(cfg.vision.d_vis, cfg.model.d_model, rng);
  tower.student = DecoderWeights::init(cfg.model, rng);
  tower.teacher = DecoderWeights::init(cfg.model, rng);
  tower.teacher.set_requires_grad(false);
  copy_into(tower.student_named_parameters(), ck.tensors);
  return tower;
}

DualTower load_lm_as_tower(const std::string& checkpoint_dir) {
  CheckpointData ck = load_checkpoint(checkpoint_dir);
  if (ck.kind != "lm") {
    throw std::runtime_error("load_lm_as_tower: checkpoint kind '" + ck.kind +
                             "' is not an lm");
  }
  RunConfig cfg;
  cfg.apply_json(json::parse(ck.config_json));
  DualTower tower;
  std::mt19937_64 rng(0);
  tower.vision = VisionEncoderWeights::init(cfg.vision, rng);
  tower.projector = ProjectorWeights::init(cfg.vision.d_vis, cfg.model.d_model, rng);
  tower.student = DecoderWeights::init(cfg.model, rng);
  tower.teacher = DecoderWeights::init(cfg.model, rng);
  tower.teacher.set_requires_grad(false);
  copy_into(tower.student.named_parameters(), ck.tensors);
  return tower;
}

}  // namespace kvd

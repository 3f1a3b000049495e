// Command-line entry point: data generation, the three training stages,
// evaluation, the recovery report, and a built-in selfcheck.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "kvd/eval.hpp"
#include "kvd/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config file: " + path);
  return json::parse(is);
}

kvd::RunConfig make_run_config(const std::string& preset_name, const json& cfg,
                              uint64_t seed) {
  kvd::RunConfig rc = kvd::preset(preset_name);
  rc.apply_json(cfg);
  rc.seed = seed;
  return rc;
}

kvd::StageData stage_data_for(const kvd::RunConfig& rc, const json& cfg) {
  int n_text = cfg.value("n_text", 4000);
  int n_lang = cfg.value("n_lang_mm", 2000);
  int n_ocr = cfg.value("n_ocr_mm", 2000);
  return kvd::generate_stage_data(rc.seed, n_text, n_lang, n_ocr);
}

int run_training(const std::string& default_preset, const std::string& config_path,
                 uint64_t seed, const std::string& out, const std::string& lm,
                 const std::string& vlm, const std::string& resume) {
  json cfg = load_config(config_path);
  std::string preset_name = cfg.value("preset", default_preset);
  kvd::RunConfig rc = make_run_config(preset_name, cfg, seed);
  kvd::StageData data = stage_data_for(rc, cfg);
  kvd::StageResult res = kvd::run_stage(rc, data, out, lm, vlm, resume);
  std::cout << "variant=" << rc.variant << " stage=" << kvd::stage_name(rc.stage)
            << " checkpoint=" << res.checkpoint_dir << " metrics=" << res.metrics_path
            << " final_loss=" << res.last_loss.combined << "\n";
  return 0;
}

int cmd_gen_data(const std::string& config_path, uint64_t seed, const std::string& out) {
  json cfg = load_config(config_path);
  int n_text = cfg.value("n_text", 4000);
  int n_lang = cfg.value("n_lang_mm", 2000);
  int n_ocr = cfg.value("n_ocr_mm", 2000);
  kvd::StageData data = kvd::generate_stage_data(seed, n_text, n_lang, n_ocr);
  fs::create_directories(out);
  kvd::write_samples((fs::path(out) / "text.bin").string(), data.text);
  kvd::write_samples((fs::path(out) / "lang_mm.bin").string(), data.lang_mm);
  kvd::write_samples((fs::path(out) / "ocr_mm.bin").string(), data.ocr_mm);
  std::vector<kvd::ManifestEntry> manifest = {
      {"text", kvd::SourceCategory::kLanguageHeavy, n_text, seed, "grammar=3-family"},
      {"lang_mm", kvd::SourceCategory::kLanguageHeavy, n_lang, seed + 101,
       "questions=count,color-count,relation"},
      {"ocr_mm", kvd::SourceCategory::kOcrHeavy, n_ocr, seed + 202,
       "glyphs=3-6 font=5x5"},
  };
  kvd::write_manifest((fs::path(out) / "manifest.txt").string(), manifest);
  std::cout << "wrote " << n_text << " text, " << n_lang << " lang_mm, " << n_ocr
            << " ocr_mm samples to " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& config_path, uint64_t seed, const std::string& out,
             const std::string& checkpoint) {
  json cfg = load_config(config_path);
  int n = cfg.value("n_eval", 200);
  kvd::CheckpointData meta = kvd::load_checkpoint(checkpoint);
  kvd::DualTower tower = meta.kind == "lm" ? kvd::load_lm_as_tower(checkpoint)
                                           : kvd::load_tower(checkpoint);
  uint64_t before = tower.student.weights_hash();
  kvd::EvalSuite suite = kvd::make_eval_suite(seed, n);
  std::ostringstream rows;
  rows << "task,metric,value\n";
  auto acc = kvd::eval_exact_match(tower, suite.text_qa);
  rows << "text_qa,accuracy," << acc.accuracy << "\n";
  double ppl = kvd::eval_perplexity(tower, suite.text_qa.samples);
  rows << "text_qa,perplexity," << ppl << "\n";
  if (meta.kind != "lm") {
    auto mm = kvd::eval_exact_match(tower, suite.mm_qa);
    rows << "mm_qa,accuracy," << mm.accuracy << "\n";
    auto ocr = kvd::eval_exact_match(tower, suite.ocr_copy);
    rows << "ocr_copy,accuracy," << ocr.accuracy << "\n";
  }
  if (tower.student.weights_hash() != before) {
    throw std::runtime_error("evaluation mutated model weights");
  }
  fs::create_directories(out);
  std::ofstream os(fs::path(out) / "eval.csv");
  os << rows.str();
  std::cout << rows.str();
  return 0;
}

kvd::TaskScores read_scores(const json& source) {
  std::vector<std::string> paths;
  if (source.is_string()) {
    paths.push_back(source.get<std::string>());
  } else {
    for (const auto& p : source) paths.push_back(p.get<std::string>());
  }
  kvd::TaskScores scores;
  for (const auto& path : paths) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read eval file: " + path);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
      std::istringstream row(line);
      std::string task, metric, value;
      std::getline(row, task, ',');
      std::getline(row, metric, ',');
      std::getline(row, value, ',');
      if (metric == "accuracy") scores[task] = std::stod(value);
    }
  }
  return scores;
}

int cmd_report(const std::string& config_path, const std::string& out) {
  json cfg = load_config(config_path);
  if (!cfg.contains("teacher_era")) {
    throw std::runtime_error("report config missing 'teacher_era' eval file(s)");
  }
  if (!cfg.contains("ft_baseline")) {
    throw std::runtime_error("report config missing 'ft_baseline' eval file(s)");
  }
  kvd::TaskScores teacher = read_scores(cfg.at("teacher_era"));
  kvd::TaskScores ft = read_scores(cfg.at("ft_baseline"));
  std::map<std::string, kvd::TaskScores> variants;
  json variants_cfg = cfg.value("variants", json::object());
  for (const auto& [name, source] : variants_cfg.items()) {
    variants[name] = read_scores(source);
  }
  kvd::RecoveryReport rep = kvd::recovery_report(teacher, ft, variants);
  fs::create_directories(out);
  std::ofstream txt(fs::path(out) / "report.txt");
  txt << rep.render_table();
  std::ofstream csv(fs::path(out) / "report.csv");
  csv << rep.render_csv();
  std::cout << rep.render_table();
  return 0;
}

int cmd_selfcheck(uint64_t seed) {
  int failures = 0;
  auto check = [&failures](const std::string& name, bool ok) {
    std::cout << (ok ? "ok   " : "FAIL ") << name << "\n";
    if (!ok) ++failures;
  };
  std::mt19937_64 rng(seed);

  // Gradient check on an attention + loss composite.
  {
    std::vector<kvd::Tensor> inputs = {kvd::Tensor::randn({3, 4}, rng, 1.0, true),
                                       kvd::Tensor::randn({4, 4}, rng, 1.0, true)};
    auto fn = [](std::vector<kvd::Tensor>& in) {
      kvd::AttentionMask mask = kvd::build_causal_mask(3);
      kvd::Tensor xw = kvd::matmul(in[0], in[1]);
      kvd::Tensor h = kvd::causal_attention(xw, xw, xw, mask, 2);
      return kvd::sum(kvd::gelu(h));
    };
    check("gradient: attention composite", kvd::grad_check(fn, inputs) < 1e-4);
  }

  // Identity cache injection reproduces self-mode logits bitwise.
  {
    kvd::TransformerConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.vocab_size = kvd::vocab().size();
    cfg.max_seq = 16;
    cfg.d_ff = 32;
    kvd::DecoderWeights w = kvd::DecoderWeights::init(cfg, rng);
    std::vector<int> toks = {1, 5, 9, 3};
    kvd::Tensor embeds = kvd::embed_tokens(w, toks);
    kvd::AttentionMask mask = kvd::build_causal_mask(4);
    kvd::DecoderOutput self = kvd::decoder_forward(w, embeds, mask);
    kvd::DecoderOutput inj = kvd::decoder_forward(w, embeds, mask, &self.cache);
    check("kv-cache: identity injection bitwise",
          self.logits.data() == inj.logits.data());
  }

  // KL of identical distributions is zero; alpha=0 skips the soft term.
  {
    kvd::Tensor z = kvd::Tensor::randn({4, 8}, rng, 1.0, true);
    kvd::MaskedLoss kl =
        kvd::kl_divergence_masked(z, z, std::vector<uint8_t>(4, 1), 2.0);
    check("objective: KL(p,p) == 0", std::abs(kl.loss_sum.item()) < 1e-12);
  }

  // Schedule endpoints.
  {
    kvd::ScheduleConfig s;
    s.peak_lr = 1e-4;
    s.total_steps = 100;
    bool ok = kvd::cosine_warmup_lr(0, s) == 0.0 &&
              kvd::cosine_warmup_lr(3, s) == s.peak_lr &&
              std::abs(kvd::cosine_warmup_lr(100, s)) < 1e-18;
    check("schedule: warmup and cosine endpoints", ok);
  }

  // Checkpoint round trip.
  {
    fs::path dir = fs::temp_directory_path() / "kvd_selfcheck_ckpt";
    fs::remove_all(dir);
    kvd::CheckpointData ck;
    ck.kind = "lm";
    ck.config_json = "{}";
    ck.tensors.emplace_back("t", kvd::Tensor::randn({3, 3}, rng, 1.0, false));
    kvd::save_checkpoint(dir.string(), ck);
    kvd::CheckpointData back = kvd::load_checkpoint(dir.string());
    check("checkpoint: round trip",
          back.tensors.size() == 1 && back.tensors[0].second.data() == ck.tensors[0].second.data());
    fs::remove_all(dir);
  }

  // Data determinism.
  {
    auto a = kvd::gen_ocr_mm_samples(seed, 5);
    auto b = kvd::gen_ocr_mm_samples(seed, 5);
    bool ok = a.size() == b.size();
    for (size_t i = 0; ok && i < a.size(); ++i) {
      ok = kvd::hash_sample(a[i]) == kvd::hash_sample(b[i]);
    }
    check("data: generator determinism", ok);
  }

  std::cout << (failures == 0 ? "selfcheck passed" : "selfcheck FAILED") << "\n";
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KV-cache-sharing distillation laboratory"};
  app.require_subcommand(1);

  std::string config_path, out = "out";
  uint64_t seed = 1;
  std::string lm, vlm, resume, checkpoint;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--seed", seed, "Random seed");
    cmd->add_option("--out", out, "Output directory");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpora");
  add_common(gen);

  auto* pre = app.add_subcommand("pretrain-lm", "Stage 1: text-only teacher pretraining");
  add_common(pre);
  pre->add_option("--resume", resume, "Checkpoint dir to resume from");

  auto* adapt = app.add_subcommand("adapt-vlm", "Stage 2: multimodal adaptation");
  add_common(adapt);
  adapt->add_option("--lm", lm, "Stage-1 checkpoint dir")->required();
  adapt->add_option("--resume", resume, "Checkpoint dir to resume from");

  auto* dist = app.add_subcommand("distill", "Stage 3: selective distillation");
  add_common(dist);
  dist->add_option("--lm", lm, "Stage-1 (teacher) checkpoint dir");
  dist->add_option("--vlm", vlm, "Stage-2 checkpoint dir");
  dist->add_option("--resume", resume, "Checkpoint dir to resume from");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on held-out tasks");
  add_common(ev);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint dir")->required();

  auto* rep = app.add_subcommand("report", "Degradation/recovery report from eval files");
  add_common(rep);

  auto* self = app.add_subcommand("selfcheck", "Run built-in invariant checks");
  add_common(self);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, seed, out);
    if (pre->parsed()) {
      return run_training("pretrain-lm", config_path, seed, out, "", "", resume);
    }
    if (adapt->parsed()) {
      return run_training("adapt-vlm", config_path, seed, out, lm, "", resume);
    }
    if (dist->parsed()) {
      return run_training("lingudistill", config_path, seed, out, lm, vlm, resume);
    }
    if (ev->parsed()) return cmd_eval(config_path, seed, out, checkpoint);
    if (rep->parsed()) return cmd_report(config_path, out);
    if (self->parsed()) return cmd_selfcheck(seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

// Python bindings over the main library operations: data generation, the
// selective distillation objective, KV-cache injection, stage execution,
// checkpoints, and evaluation.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "kvd/eval.hpp"
#include "kvd/train.hpp"

namespace py = pybind11;
using namespace kvd;
using nlohmann::json;

namespace {

RunConfig config_from_json_str(const std::string& config_json) {
  RunConfig cfg;
  json j = json::parse(config_json);
  if (j.contains("preset")) {
    cfg = preset(j.at("preset").get<std::string>());
  }
  cfg.apply_json(j);
  return cfg;
}

py::dict sample_to_dict(const Sample& s) {
  py::dict d;
  d["tokens"] = s.tokens;
  d["labels"] = s.labels;
  d["mask"] = std::vector<int>(s.mask.begin(), s.mask.end());
  d["source"] = s.tag.name;
  d["category"] = category_name(s.tag.category);
  if (s.image) {
    d["image"] = s.image->pixels;
    d["image_size"] = s.image->height;
  }
  return d;
}

py::dict breakdown_to_dict(const LossBreakdown& b) {
  py::dict d;
  d["combined"] = b.combined;
  d["soft_sum"] = b.soft_sum;
  d["hard_sum"] = b.hard_sum;
  d["soft_lang"] = b.soft_lang;
  d["soft_ocr"] = b.soft_ocr;
  d["hard_lang"] = b.hard_lang;
  d["hard_ocr"] = b.hard_ocr;
  d["counted_positions"] = b.counted_positions;
  d["empty"] = b.empty;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Layer-wise KV-cache sharing and selective distillation laboratory";

  m.def("vocab_symbols", []() {
    std::vector<std::string> out;
    for (int i = 0; i < vocab().size(); ++i) out.push_back(vocab().symbol(i));
    return out;
  });

  m.def("preset_names", &preset_names);
  m.def("preset_json", [](const std::string& name) { return preset(name).to_json().dump(2); });

  m.def(
      "generate_samples",
      [](const std::string& source, uint64_t seed, int n) {
        std::vector<Sample> samples;
        if (source == "text") samples = gen_text_corpus(seed, n);
        else if (source == "lang_mm") samples = gen_lang_mm_samples(seed, n);
        else if (source == "ocr_mm") samples = gen_ocr_mm_samples(seed, n);
        else throw std::invalid_argument("unknown source: " + source);
        py::list out;
        for (const auto& s : samples) out.append(sample_to_dict(s));
        return out;
      },
      py::arg("source"), py::arg("seed"), py::arg("n"));

  m.def(
      "combined_loss_value",
      [](const std::vector<std::vector<double>>& z_teacher,
         const std::vector<std::vector<double>>& z_student, const std::vector<int>& labels,
         const std::vector<int>& mask, const std::string& category, double alpha_lang,
         double alpha_ocr, double temperature) {
        int seq = static_cast<int>(z_student.size());
        if (seq == 0) throw std::invalid_argument("empty student logits");
        int v = static_cast<int>(z_student[0].size());
        auto flatten = [&](const std::vector<std::vector<double>>& rows) {
          std::vector<double> flat;
          for (const auto& r : rows) {
            if (static_cast<int>(r.size()) != v) {
              throw std::invalid_argument("ragged logit rows");
            }
            flat.insert(flat.end(), r.begin(), r.end());
          }
          return flat;
        };
        ExampleLosses ex;
        ex.z_student = Tensor::from_data({seq, v}, flatten(z_student), true);
        if (!z_teacher.empty()) {
          ex.z_teacher = Tensor::from_data({seq, v}, flatten(z_teacher));
        }
        ex.labels = labels;
        ex.mask.assign(mask.begin(), mask.end());
        ex.tag = {"py", category_from_name(category)};
        AlphaPolicy pol{alpha_lang, alpha_ocr, temperature};
        std::vector<ExampleLosses> exs = {std::move(ex)};
        return breakdown_to_dict(combined_loss(exs, pol).breakdown);
      },
      py::arg("z_teacher"), py::arg("z_student"), py::arg("labels"), py::arg("mask"),
      py::arg("category"), py::arg("alpha_lang"), py::arg("alpha_ocr"),
      py::arg("temperature"));

  m.def(
      "injection_identity_gap",
      [](uint64_t seed, int seq) {
        std::mt19937_64 rng(seed);
        TransformerConfig cfg;
        cfg.n_layers = 2;
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.vocab_size = vocab().size();
        cfg.max_seq = std::max(seq, 4);
        cfg.d_ff = 32;
        DecoderWeights w = DecoderWeights::init(cfg, rng);
        std::vector<int> ids;
        for (int t = 0; t < seq; ++t)
          ids.push_back(std::uniform_int_distribution<int>(0, cfg.vocab_size - 1)(rng));
        Tensor embeds = embed_tokens(w, ids);
        AttentionMask mask = build_causal_mask(seq);
        DecoderOutput self = decoder_forward(w, embeds, mask);
        DecoderOutput inj = decoder_forward(w, embeds, mask, &self.cache);
        double worst = 0.0;
        for (size_t i = 0; i < self.logits.data().size(); ++i) {
          worst = std::max(worst,
                           std::abs(self.logits.data()[i] - inj.logits.data()[i]));
        }
        return worst;
      },
      py::arg("seed") = 0, py::arg("seq") = 5,
      "Max |self-mode - inject-mode| logit gap when a decoder consumes its own "
      "cache; exactly 0.0 when injection is implemented correctly.");

  m.def(
      "run_stage",
      [](const std::string& config_json, const std::string& out_dir,
         const std::string& lm_checkpoint, const std::string& vlm_checkpoint,
         const std::string& resume_from, int n_text, int n_lang_mm, int n_ocr_mm) {
        RunConfig cfg = config_from_json_str(config_json);
        StageData data = generate_stage_data(cfg.seed, n_text, n_lang_mm, n_ocr_mm);
        StageResult res =
            run_stage(cfg, data, out_dir, lm_checkpoint, vlm_checkpoint, resume_from);
        py::dict d;
        d["checkpoint"] = res.checkpoint_dir;
        d["metrics"] = res.metrics_path;
        d["last_loss"] = breakdown_to_dict(res.last_loss);
        return d;
      },
      py::arg("config_json"), py::arg("out_dir"), py::arg("lm_checkpoint") = "",
      py::arg("vlm_checkpoint") = "", py::arg("resume_from") = "",
      py::arg("n_text") = 4000, py::arg("n_lang_mm") = 2000, py::arg("n_ocr_mm") = 2000);

  m.def(
      "evaluate_checkpoint",
      [](const std::string& checkpoint, uint64_t seed, int n_per_task) {
        CheckpointData ck = load_checkpoint(checkpoint);
        EvalSuite suite = make_eval_suite(seed, n_per_task);
        py::dict d;
        if (ck.kind == "lm") {
          DualTower t = load_lm_as_tower(checkpoint);
          d["text_qa_accuracy"] = eval_exact_match(t, suite.text_qa).accuracy;
          d["text_qa_perplexity"] = eval_perplexity(t, suite.text_qa.samples);
        } else {
          DualTower t = load_tower(checkpoint);
          d["text_qa_accuracy"] = eval_exact_match(t, suite.text_qa).accuracy;
          d["text_qa_perplexity"] = eval_perplexity(t, suite.text_qa.samples);
          d["mm_qa_accuracy"] = eval_exact_match(t, suite.mm_qa).accuracy;
          d["ocr_copy_accuracy"] = eval_exact_match(t, suite.ocr_copy).accuracy;
        }
        return d;
      },
      py::arg("checkpoint"), py::arg("seed") = 1, py::arg("n_per_task") = 50);

  m.def(
      "recovery_csv",
      [](const std::map<std::string, double>& teacher_era,
         const std::map<std::string, double>& ft_baseline,
         const std::map<std::string, std::map<std::string, double>>& variants) {
        std::map<std::string, TaskScores> vs;
        for (const auto& [name, scores] : variants) vs[name] = scores;
        return recovery_report(teacher_era, ft_baseline, vs).render_csv();
      },
      py::arg("teacher_era"), py::arg("ft_baseline"), py::arg("variants"));
}

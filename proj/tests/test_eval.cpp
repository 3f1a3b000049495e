#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "kvd/eval.hpp"

using namespace kvd;

namespace {

// A decoder whose layers are exact identities (residual branches zeroed) and
// whose embedding table is one-hot, so the logits at position t depend only on
// token t. The head then acts as a plain next-token lookup table, which makes
// greedy decoding predictable by hand.
DualTower lookup_tower(const std::vector<std::pair<int, int>>& next_map) {
  std::mt19937_64 rng(1);
  TransformerConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = vocab().size();
  cfg.n_heads = 1;  // 66 is an even head width, as rotary pairs require
  cfg.vocab_size = vocab().size();
  cfg.max_seq = 32;
  cfg.d_ff = 8;
  VisionConfig vcfg;
  vcfg.d_vis = 8;
  vcfg.depth = 1;
  vcfg.n_heads = 2;
  vcfg.d_ff = 16;
  DualTower t;
  t.vision = VisionEncoderWeights::init(vcfg, rng);
  t.projector = ProjectorWeights::init(vcfg.d_vis, cfg.d_model, rng);
  t.student = DecoderWeights::init(cfg, rng);
  t.teacher = DecoderWeights::init(cfg, rng);
  t.teacher.set_requires_grad(false);

  int v = cfg.vocab_size;
  auto& embed = t.student.token_embed.data();
  std::fill(embed.begin(), embed.end(), 0.0);
  for (int i = 0; i < v; ++i) embed[static_cast<size_t>(i) * v + i] = 1.0;
  // Kill both residual branches: the block becomes the identity map.
  auto& blk = t.student.layers[0];
  std::fill(blk.w_o.data().begin(), blk.w_o.data().end(), 0.0);
  std::fill(blk.w_out.data().begin(), blk.w_out.data().end(), 0.0);
  std::fill(t.student.final_norm.data().begin(), t.student.final_norm.data().end(), 1.0);
  auto& head = t.student.head.data();
  std::fill(head.begin(), head.end(), 0.0);
  for (auto [from, to] : next_map) {
    head[static_cast<size_t>(from) * v + to] = 10.0;
  }
  return t;
}

Sample text_sample(const std::vector<int>& answer) {
  const auto& v = vocab();
  Sample s;
  s.tokens = {v.bos, v.q_marker, v.a_marker};
  size_t a_pos = 2;
  s.tokens.insert(s.tokens.end(), answer.begin(), answer.end());
  s.tokens.push_back(v.eos);
  s.mask.assign(s.tokens.size(), 1);
  s.labels.assign(s.tokens.size(), kIgnoreIndex);
  for (size_t t = a_pos; t + 1 < s.tokens.size(); ++t) s.labels[t] = s.tokens[t + 1];
  s.tag = {"text_corpus", SourceCategory::kLanguageHeavy};
  return s;
}

}  // namespace

TEST_CASE("eval suite: names, sizes, determinism, disjointness from training data") {
  EvalSuite a = make_eval_suite(1, 30);
  EvalSuite b = make_eval_suite(1, 30);
  CHECK(a.text_qa.name == "text_qa");
  CHECK(a.mm_qa.name == "mm_qa");
  CHECK(a.ocr_copy.name == "ocr_copy");
  CHECK(a.text_qa.samples.size() == 30);
  for (size_t i = 0; i < 30; ++i) {
    CHECK(hash_sample(a.text_qa.samples[i]) == hash_sample(b.text_qa.samples[i]));
    CHECK(hash_sample(a.mm_qa.samples[i]) == hash_sample(b.mm_qa.samples[i]));
    CHECK(hash_sample(a.ocr_copy.samples[i]) == hash_sample(b.ocr_copy.samples[i]));
  }
  CHECK(a.mm_qa.samples[0].image.has_value());
  CHECK(a.ocr_copy.samples[0].tag.category == SourceCategory::kOcrHeavy);

  // Held-out generation runs on a different random stream than the training
  // pools for the same base seed: the sample sequences must not coincide.
  for (uint64_t seed = 1; seed <= 4; ++seed) {
    EvalSuite suite = make_eval_suite(seed, 50);
    auto train_text = gen_text_corpus(seed, 50);
    auto train_lang = gen_lang_mm_samples(seed + 101, 50);
    auto train_ocr = gen_ocr_mm_samples(seed + 202, 50);
    auto differs = [](const std::vector<Sample>& x, const std::vector<Sample>& y) {
      for (size_t i = 0; i < x.size(); ++i) {
        if (hash_sample(x[i]) != hash_sample(y[i])) return true;
      }
      return false;
    };
    CHECK(differs(suite.text_qa.samples, train_text));
    CHECK(differs(suite.mm_qa.samples, train_lang));
    CHECK(differs(suite.ocr_copy.samples, train_ocr));
  }
}

TEST_CASE("reference answer extracts the span between marker and eos") {
  const auto& v = vocab();
  Sample s = text_sample({v.number_ids[3], v.number_ids[1]});
  CHECK(reference_answer(s) == std::vector<int>{v.number_ids[3], v.number_ids[1]});
  auto ocr = gen_ocr_mm_samples(3, 5);
  for (const auto& o : ocr) {
    auto ref = reference_answer(o);
    CHECK(ref.size() >= 3);
    for (int t : ref) CHECK(v.is_glyph(t));
  }
  Sample broken;
  broken.tokens = {v.bos, v.eos};
  CHECK_THROWS(reference_answer(broken));
}

TEST_CASE("greedy decoding follows the lookup chain and stops at eos") {
  const auto& v = vocab();
  int g1 = v.glyph_id('K'), g2 = v.glyph_id('3');
  DualTower t = lookup_tower({{v.a_marker, g1}, {g1, g2}, {g2, v.eos}});
  Sample s = text_sample({g1, g2});
  CHECK(greedy_decode_answer(t, s) == std::vector<int>{g1, g2});
  // The cap truncates the chain before eos is reached.
  CHECK(greedy_decode_answer(t, s, 1) == std::vector<int>{g1});
  // Decoding is deterministic.
  CHECK(greedy_decode_answer(t, s) == greedy_decode_answer(t, s));
}

TEST_CASE("exact match: the lookup model scores 1.0; a broken chain is charged") {
  const auto& v = vocab();
  int g1 = v.glyph_id('A'), g2 = v.glyph_id('B'), g3 = v.glyph_id('C');
  DualTower t = lookup_tower(
      {{v.a_marker, g1}, {g1, g2}, {g2, v.eos}, {g3, v.eos}});
  TaskSet perfect{"chain", {text_sample({g1, g2}), text_sample({g1, g2})}};
  ExactMatchResult r = eval_exact_match(t, perfect);
  CHECK(r.accuracy == 1.0);
  CHECK(r.correct == std::vector<uint8_t>{1, 1});
  CHECK(r.predictions == r.references);

  // Same model, but one sample expects an answer the chain cannot produce.
  TaskSet mixed{"chain", {text_sample({g1, g2}), text_sample({g3})}};
  ExactMatchResult m = eval_exact_match(t, mixed);
  CHECK(m.accuracy == 0.5);
  CHECK(m.correct == std::vector<uint8_t>{1, 0});
  CHECK(m.references[1] == std::vector<int>{g3});

  CHECK_THROWS(eval_exact_match(t, TaskSet{"empty", {}}));
}

TEST_CASE("perplexity of an all-zero head is exactly the vocabulary size") {
  DualTower t = lookup_tower({});  // head stays all zeros: uniform distribution
  auto samples = gen_text_corpus(9, 20);
  double ppl = eval_perplexity(t, samples);
  CHECK(ppl == doctest::Approx(static_cast<double>(vocab().size())).epsilon(1e-12));

  auto mm = gen_lang_mm_samples(9, 1);
  CHECK_THROWS(eval_perplexity(t, mm));

  Sample unlabeled = samples[0];
  unlabeled.labels.assign(unlabeled.labels.size(), kIgnoreIndex);
  CHECK_THROWS(eval_perplexity(t, {unlabeled}));
}

TEST_CASE("win/loss recount by hand") {
  std::vector<std::vector<int>> refs = {{1}, {2}, {3}, {4}, {5}};
  std::vector<std::vector<int>> a = {{1}, {2}, {9}, {9}, {5}};  // right on 0,1,4
  std::vector<std::vector<int>> b = {{1}, {9}, {3}, {9}, {9}};  // right on 0,2
  WinLoss wl = win_loss_diff(a, b, refs);
  CHECK(wl.wins == 2);    // samples 1 and 4
  CHECK(wl.losses == 1);  // sample 2
  CHECK(wl.net == 1);
  std::vector<std::vector<int>> short_list = {{1}};
  CHECK_THROWS(win_loss_diff(short_list, b, refs));
}

TEST_CASE("recovery arithmetic on a hand-computed fixture") {
  TaskScores teacher = {{"text_qa", 1.0}, {"ocr_copy", 0.2}, {"mm_qa", 0.8}};
  TaskScores ft = {{"text_qa", 0.4}, {"ocr_copy", 0.2}, {"mm_qa", 0.0}};
  std::map<std::string, TaskScores> variants = {
      {"selective", {{"text_qa", 0.7}, {"ocr_copy", 0.1}, {"mm_qa", 0.5}}}};
  RecoveryReport rep = recovery_report(teacher, ft, variants);

  const auto& text = rep.variants.at("selective").at("text_qa");
  CHECK(text.score == 0.7);
  REQUIRE(text.delta_pct.has_value());
  CHECK(*text.delta_pct == doctest::Approx(75.0).epsilon(1e-12));
  REQUIRE(text.recovery.has_value());
  CHECK(*text.recovery == doctest::Approx(0.5).epsilon(1e-12));

  // Teacher no better than the baseline: recovery is undefined, delta remains.
  const auto& ocr = rep.variants.at("selective").at("ocr_copy");
  CHECK_FALSE(ocr.recovery.has_value());
  REQUIRE(ocr.delta_pct.has_value());
  CHECK(*ocr.delta_pct == doctest::Approx(-50.0).epsilon(1e-12));

  // Zero baseline: no percentage delta, recovery still defined.
  const auto& mm = rep.variants.at("selective").at("mm_qa");
  CHECK_FALSE(mm.delta_pct.has_value());
  REQUIRE(mm.recovery.has_value());
  CHECK(*mm.recovery == doctest::Approx(0.625).epsilon(1e-12));

  std::map<std::string, TaskScores> orphan = {{"x", {{"unknown_task", 0.5}}}};
  CHECK_THROWS(recovery_report(teacher, ft, orphan));
}

TEST_CASE("report rendering carries every row and the exact CSV header") {
  TaskScores teacher = {{"text_qa", 1.0}};
  TaskScores ft = {{"text_qa", 0.4}};
  std::map<std::string, TaskScores> variants = {{"selective", {{"text_qa", 0.7}}}};
  RecoveryReport rep = recovery_report(teacher, ft, variants);

  std::string csv = rep.render_csv();
  CHECK(csv.rfind("row,task,score,delta_pct,recovery\n", 0) == 0);
  CHECK(csv.find("teacher-era,text_qa,1.0000,n/a,n/a") != std::string::npos);
  CHECK(csv.find("ft-baseline,text_qa,0.4000,n/a,n/a") != std::string::npos);
  CHECK(csv.find("selective,text_qa,0.7000,75.0000,0.5000") != std::string::npos);

  std::string table = rep.render_table();
  CHECK(table.find("teacher-era") != std::string::npos);
  CHECK(table.find("ft-baseline") != std::string::npos);
  CHECK(table.find("selective") != std::string::npos);
  CHECK(table.find("text_qa") != std::string::npos);
}

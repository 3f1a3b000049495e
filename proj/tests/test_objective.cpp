#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "kvd/objective.hpp"

using namespace kvd;

namespace {

// Scalar softmax at temperature T for one logit row.
std::vector<double> probs_at_t(const std::vector<double>& z, size_t off, int v, double t) {
  std::vector<double> p(static_cast<size_t>(v));
  double mx = -1e300;
  for (int c = 0; c < v; ++c) mx = std::max(mx, z[off + static_cast<size_t>(c)] / t);
  double sum = 0.0;
  for (int c = 0; c < v; ++c) {
    p[static_cast<size_t>(c)] = std::exp(z[off + static_cast<size_t>(c)] / t - mx);
    sum += p[static_cast<size_t>(c)];
  }
  for (double& x : p) x /= sum;
  return p;
}

double ce_row(const std::vector<double>& z, size_t off, int v, int label) {
  auto p = probs_at_t(z, off, v, 1.0);
  return -std::log(p[static_cast<size_t>(label)]);
}

double kl_row(const std::vector<double>& zt, const std::vector<double>& zs, size_t off,
              int v, double t) {
  auto pt = probs_at_t(zt, off, v, t), ps = probs_at_t(zs, off, v, t);
  double s = 0.0;
  for (int c = 0; c < v; ++c)
    s += pt[static_cast<size_t>(c)] *
         (std::log(pt[static_cast<size_t>(c)]) - std::log(ps[static_cast<size_t>(c)]));
  return s;
}

struct RawExample {
  std::vector<double> zt, zs;
  std::vector<int> labels;
  std::vector<uint8_t> mask;
  SourceCategory cat;
  int seq, vocab;
};

// Graph-free reimplementation of the batch objective, loops and logs only.
double oracle_combined(const std::vector<RawExample>& exs, const AlphaPolicy& pol) {
  double total = 0.0;
  int n = 0;
  for (const auto& ex : exs) {
    double a = pol.alpha_for(ex.cat);
    for (int t = 0; t < ex.seq; ++t) {
      if (!ex.mask[static_cast<size_t>(t)] || ex.labels[static_cast<size_t>(t)] == kIgnoreIndex)
        continue;
      ++n;
      size_t off = static_cast<size_t>(t) * ex.vocab;
      if (a > 0.0)
        total += a * pol.temperature * pol.temperature *
                 kl_row(ex.zt, ex.zs, off, ex.vocab, pol.temperature);
      if (a < 1.0)
        total += (1.0 - a) * ce_row(ex.zs, off, ex.vocab, ex.labels[static_cast<size_t>(t)]);
    }
  }
  return n == 0 ? 0.0 : total / n;
}

std::vector<ExampleLosses> lift(const std::vector<RawExample>& exs, bool with_teacher) {
  std::vector<ExampleLosses> out;
  for (const auto& ex : exs) {
    ExampleLosses e;
    if (with_teacher) e.z_teacher = Tensor::from_data({ex.seq, ex.vocab}, ex.zt);
    e.z_student = Tensor::from_data({ex.seq, ex.vocab}, ex.zs, true);
    e.labels = ex.labels;
    e.mask = ex.mask;
    e.tag = {ex.cat == SourceCategory::kLanguageHeavy ? "lang" : "ocr", ex.cat};
    out.push_back(std::move(e));
  }
  return out;
}

RawExample random_example(std::mt19937_64& rng, SourceCategory cat) {
  RawExample ex;
  ex.cat = cat;
  ex.seq = std::uniform_int_distribution<int>(2, 6)(rng);
  ex.vocab = 5;
  std::normal_distribution<double> nd(0.0, 1.5);
  for (int i = 0; i < ex.seq * ex.vocab; ++i) {
    ex.zt.push_back(nd(rng));
    ex.zs.push_back(nd(rng));
  }
  std::uniform_int_distribution<int> lab(0, ex.vocab - 1), coin(0, 3);
  for (int t = 0; t < ex.seq; ++t) {
    ex.labels.push_back(coin(rng) == 0 ? kIgnoreIndex : lab(rng));
    ex.mask.push_back(coin(rng) == 0 ? 0 : 1);
  }
  return ex;
}

}  // namespace

TEST_CASE("category names round-trip and reject unknowns") {
  CHECK(category_name(SourceCategory::kLanguageHeavy) == "language_heavy");
  CHECK(category_name(SourceCategory::kOcrHeavy) == "ocr_heavy");
  CHECK(category_from_name("language_heavy") == SourceCategory::kLanguageHeavy);
  CHECK(category_from_name("ocr_heavy") == SourceCategory::kOcrHeavy);
  CHECK_THROWS(category_from_name("speech_heavy"));
}

TEST_CASE("policy validation: alpha bounds and positive temperature") {
  AlphaPolicy p;
  p.alpha_language_heavy = 1.1;
  CHECK_THROWS(p.validate());
  p.alpha_language_heavy = -0.1;
  CHECK_THROWS(p.validate());
  p.alpha_language_heavy = 0.5;
  p.temperature = 0.0;
  CHECK_THROWS(p.validate());
  p.temperature = 2.0;
  CHECK_NOTHROW(p.validate());
}

TEST_CASE("soft loss carries the squared-temperature factor") {
  std::mt19937_64 rng(2);
  Tensor zt = Tensor::randn({3, 4}, rng, 1.0);
  Tensor zs = Tensor::randn({3, 4}, rng, 1.0, true);
  std::vector<uint8_t> mask = {1, 1, 1};
  for (double t : {1.0, 2.0, 4.0}) {
    MaskedLoss soft = soft_loss(zt, zs, mask, t);
    MaskedLoss raw = kl_divergence_masked(zt, zs, mask, t);
    CHECK(soft.loss_sum.item() == doctest::Approx(t * t * raw.loss_sum.item()).epsilon(1e-14));
    CHECK(soft.count == 3);
  }
}

TEST_CASE("combined loss matches the graph-free scalar oracle over 100 batches") {
  std::mt19937_64 rng(42);
  const double alphas[] = {0.0, 0.3, 0.5, 0.7, 1.0};
  const double temps[] = {1.0, 2.0, 4.0};
  for (int trial = 0; trial < 100; ++trial) {
    AlphaPolicy pol;
    pol.alpha_language_heavy = alphas[trial % 5];
    pol.alpha_ocr_heavy = alphas[(trial / 5) % 5];
    pol.temperature = temps[trial % 3];
    std::vector<RawExample> raw;
    int n_ex = std::uniform_int_distribution<int>(1, 4)(rng);
    for (int i = 0; i < n_ex; ++i)
      raw.push_back(random_example(
          rng, i % 2 == 0 ? SourceCategory::kLanguageHeavy : SourceCategory::kOcrHeavy));
    auto exs = lift(raw, true);
    CombinedLoss got = combined_loss(exs, pol);
    double want = oracle_combined(raw, pol);
    if (got.breakdown.empty) {
      CHECK(want == 0.0);
    } else {
      CHECK(got.breakdown.combined == doctest::Approx(want).epsilon(1e-10));
      CHECK(got.graph.item() == got.breakdown.combined);
    }
  }
}

TEST_CASE("alpha routing: zero OCR weight leaves the OCR soft column at exactly zero") {
  std::mt19937_64 rng(7);
  AlphaPolicy pol;
  pol.alpha_language_heavy = 0.7;
  pol.alpha_ocr_heavy = 0.0;
  pol.temperature = 4.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<RawExample> raw = {random_example(rng, SourceCategory::kLanguageHeavy),
                                   random_example(rng, SourceCategory::kOcrHeavy)};
    auto exs = lift(raw, true);
    CombinedLoss got = combined_loss(exs, pol);
    CHECK(got.breakdown.soft_ocr == 0.0);
    if (!got.breakdown.empty) CHECK(got.breakdown.hard_ocr >= 0.0);
  }
}

TEST_CASE("alpha 0 collapses bitwise to plain cross-entropy, even without teacher logits") {
  std::mt19937_64 rng(11);
  AlphaPolicy pol;
  pol.temperature = 4.0;  // must be irrelevant at alpha 0
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<RawExample> raw = {random_example(rng, SourceCategory::kLanguageHeavy)};
    auto exs = lift(raw, false);  // no teacher logits supplied at all
    CombinedLoss got = combined_loss(exs, pol);
    if (got.breakdown.empty) continue;

    std::vector<int> masked = raw[0].labels;
    for (size_t t = 0; t < masked.size(); ++t)
      if (!raw[0].mask[t]) masked[t] = kIgnoreIndex;
    Tensor zs = Tensor::from_data({raw[0].seq, raw[0].vocab}, raw[0].zs);
    MaskedLoss ce = cross_entropy_masked(zs, masked);
    CHECK(got.breakdown.combined == ce.loss_sum.item() * (1.0 / ce.count));
    CHECK(got.breakdown.soft_sum == 0.0);
  }
}

TEST_CASE("alpha 1 skips the hard term entirely") {
  std::mt19937_64 rng(13);
  AlphaPolicy pol;
  pol.alpha_language_heavy = 1.0;
  pol.alpha_ocr_heavy = 1.0;
  pol.temperature = 2.0;
  std::vector<RawExample> raw = {random_example(rng, SourceCategory::kLanguageHeavy)};
  auto exs = lift(raw, true);
  CombinedLoss got = combined_loss(exs, pol);
  CHECK(got.breakdown.hard_sum == 0.0);
  CHECK(got.breakdown.hard_lang == 0.0);
}

TEST_CASE("alpha > 0 without teacher logits is an error") {
  std::mt19937_64 rng(17);
  AlphaPolicy pol;
  pol.alpha_language_heavy = 0.5;
  pol.temperature = 2.0;
  std::vector<RawExample> raw = {random_example(rng, SourceCategory::kLanguageHeavy)};
  auto exs = lift(raw, false);
  CHECK_THROWS(combined_loss(exs, pol));
}

TEST_CASE("misaligned labels/mask/logits are rejected") {
  AlphaPolicy pol;
  ExampleLosses e;
  e.z_student = Tensor::zeros({3, 4}, true);
  e.labels = {0, 1};
  e.mask = {1, 1, 1};
  std::vector<ExampleLosses> exs = {e};
  CHECK_THROWS(combined_loss(exs, pol));
}

TEST_CASE("fully masked batch reports empty with zero combined loss") {
  AlphaPolicy pol;
  ExampleLosses e;
  e.z_student = Tensor::zeros({2, 4}, true);
  e.labels = {kIgnoreIndex, 2};
  e.mask = {1, 0};  // the one labelled position is padding
  std::vector<ExampleLosses> exs = {e};
  CombinedLoss got = combined_loss(exs, pol);
  CHECK(got.breakdown.empty);
  CHECK(got.breakdown.combined == 0.0);
  CHECK(got.breakdown.counted_positions == 0);
  CHECK_FALSE(got.graph.defined());
}

TEST_CASE("normalization uses one global position count across examples") {
  // Two single-position examples with known CE values: combined must be the
  // mean over both positions, not the mean of per-example means.
  std::vector<double> za = {0.0, 0.0};          // CE(label 0) = log 2
  std::vector<double> zb = {std::log(3.0), 0.0};  // p(label 1) = 1/4 -> CE = log 4
  AlphaPolicy pol;
  ExampleLosses a, b;
  a.z_student = Tensor::from_data({1, 2}, za, true);
  a.labels = {0};
  a.mask = {1};
  b.z_student = Tensor::from_data({1, 2}, zb, true);
  b.labels = {1};
  b.mask = {1};
  std::vector<ExampleLosses> exs = {a, b};
  CombinedLoss got = combined_loss(exs, pol);
  CHECK(got.breakdown.counted_positions == 2);
  CHECK(got.breakdown.combined ==
        doctest::Approx((std::log(2.0) + std::log(4.0)) / 2.0).epsilon(1e-13));
}

TEST_CASE("gradient flows into student logits only; teacher stays untouched") {
  std::mt19937_64 rng(23);
  Tensor zt = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor zs = Tensor::randn({3, 4}, rng, 1.0, true);
  AlphaPolicy pol;
  pol.alpha_language_heavy = 0.6;
  pol.temperature = 2.0;
  ExampleLosses e;
  e.z_teacher = zt;
  e.z_student = zs;
  e.labels = {1, 3, 0};
  e.mask = {1, 1, 1};
  std::vector<ExampleLosses> exs = {e};
  CombinedLoss got = combined_loss(exs, pol);
  backward(got.graph);
  CHECK_FALSE(zt.has_grad());
  double gn = 0.0;
  for (double g : zs.grad()) gn += g * g;
  CHECK(gn > 0.0);
}

TEST_CASE("combined objective gradient passes grad_check at mixed alphas") {
  std::mt19937_64 rng(29);
  for (double alpha : {0.0, 0.3, 1.0}) {
    std::vector<Tensor> in = {Tensor::randn({3, 4}, rng, 1.0, true)};
    Tensor zt = Tensor::randn({3, 4}, rng, 1.0);
    auto fn = [&zt, alpha](std::vector<Tensor>& v) {
      AlphaPolicy pol;
      pol.alpha_language_heavy = alpha;
      pol.alpha_ocr_heavy = alpha;
      pol.temperature = 2.0;
      ExampleLosses e;
      e.z_teacher = zt;
      e.z_student = v[0];
      e.labels = {2, kIgnoreIndex, 1};
      e.mask = {1, 1, 1};
      std::vector<ExampleLosses> exs = {e};
      return combined_loss(exs, pol).graph;
    };
    CHECK(grad_check(fn, in) < 1e-4);
  }
}

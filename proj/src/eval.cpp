#include "kvd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace kvd {

namespace {

// Eval seeds live far from the training seed space (train uses small bases).
constexpr uint64_t kEvalSeedOffset = 0x0E5A0000u;

std::vector<int> prompt_tokens(const Sample& sample) {
  const auto& v = vocab();
  auto it = std::find(sample.tokens.begin(), sample.tokens.end(), v.a_marker);
  if (it == sample.tokens.end()) {
    throw std::invalid_argument("sample has no answer marker");
  }
  return {sample.tokens.begin(), it + 1};
}

int argmax_row(const Tensor& logits, int row) {
  int cols = logits.dim(1);
  const double* r = logits.data().data() + static_cast<size_t>(row) * cols;
  int best = 0;
  for (int c = 1; c < cols; ++c) {
    if (r[c] > r[best]) best = c;
  }
  return best;
}

Tensor forward_tokens(DualTower& tower, const std::vector<int>& tokens,
                      const ImageGrid* image) {
  BuiltSequence seq = build_multimodal_sequence(tower, tokens, image);
  AttentionMask mask = build_causal_mask(seq.layout.total);
  auto [logits, cache] = student_forward(tower, seq.student_embeds, mask);
  (void)cache;
  return logits;
}

}  // namespace

EvalSuite make_eval_suite(uint64_t seed, int n_per_task) {
  EvalSuite suite;
  suite.text_qa = {"text_qa", gen_text_corpus(seed + kEvalSeedOffset, n_per_task)};
  suite.mm_qa = {"mm_qa", gen_lang_mm_samples(seed + kEvalSeedOffset + 101, n_per_task)};
  suite.ocr_copy = {"ocr_copy",
                    gen_ocr_mm_samples(seed + kEvalSeedOffset + 202, n_per_task)};
  return suite;
}

std::vector<int> reference_answer(const Sample& sample) {
  const auto& v = vocab();
  auto a = std::find(sample.tokens.begin(), sample.tokens.end(), v.a_marker);
  if (a == sample.tokens.end()) {
    throw std::invalid_argument("sample has no answer marker");
  }
  std::vector<int> out;
  for (auto it = a + 1; it != sample.tokens.end() && *it != v.eos; ++it) {
    out.push_back(*it);
  }
  return out;
}

std::vector<int> greedy_decode_answer(DualTower& tower, const Sample& sample,
                                      int max_new) {
  const auto& v = vocab();
  const ImageGrid* img = sample.image ? &*sample.image : nullptr;
  std::vector<int> tokens = prompt_tokens(sample);
  std::vector<int> answer;
  for (int i = 0; i < max_new; ++i) {
    Tensor logits = forward_tokens(tower, tokens, img);
    int n_image = img ? tower.vision.config.n_patches() : 0;
    int next = argmax_row(logits, n_image + static_cast<int>(tokens.size()) - 1);
    if (next == v.eos) break;
    answer.push_back(next);
    tokens.push_back(next);
  }
  return answer;
}

ExactMatchResult eval_exact_match(DualTower& tower, const TaskSet& task) {
  if (task.samples.empty()) {
    throw std::invalid_argument("eval_exact_match: task set '" + task.name +
                                "' is empty");
  }
  ExactMatchResult res;
  int right = 0;
  for (const auto& sample : task.samples) {
    std::vector<int> ref = reference_answer(sample);
    std::vector<int> pred =
        greedy_decode_answer(tower, sample, static_cast<int>(ref.size()) + 4);
    bool ok = pred == ref;
    right += ok ? 1 : 0;
    res.predictions.push_back(std::move(pred));
    res.references.push_back(std::move(ref));
    res.correct.push_back(ok ? 1 : 0);
  }
  res.accuracy = static_cast<double>(right) / static_cast<double>(task.samples.size());
  return res;
}

double eval_perplexity(DualTower& tower, const std::vector<Sample>& text_samples) {
  double nll_sum = 0.0;
  int64_t count = 0;
  for (const auto& sample : text_samples) {
    if (sample.image) {
      throw std::invalid_argument("eval_perplexity: expects text-only samples");
    }
    Tensor logits = forward_tokens(tower, sample.tokens, nullptr);
    MaskedLoss loss = cross_entropy_masked(logits, sample.labels);
    nll_sum += loss.loss_sum.item();
    count += loss.count;
  }
  if (count == 0) {
    throw std::invalid_argument("eval_perplexity: zero counted positions");
  }
  return std::exp(nll_sum / static_cast<double>(count));
}

WinLoss win_loss_diff(const std::vector<std::vector<int>>& preds_a,
                      const std::vector<std::vector<int>>& preds_b,
                      const std::vector<std::vector<int>>& references) {
  if (preds_a.size() != references.size() || preds_b.size() != references.size()) {
    throw std::invalid_argument("win_loss_diff: prediction list length mismatch");
  }
  WinLoss wl;
  for (size_t i = 0; i < references.size(); ++i) {
    bool a = preds_a[i] == references[i];
    bool b = preds_b[i] == references[i];
    if (a && !b) ++wl.wins;
    if (b && !a) ++wl.losses;
  }
  wl.net = wl.wins - wl.losses;
  return wl;
}

RecoveryReport recovery_report(const TaskScores& teacher_era,
                               const TaskScores& ft_baseline,
                               const std::map<std::string, TaskScores>& variants) {
  RecoveryReport rep;
  rep.teacher_era = teacher_era;
  rep.ft_baseline = ft_baseline;
  for (const auto& [variant, scores] : variants) {
    for (const auto& [task, score] : scores) {
      auto te = teacher_era.find(task);
      if (te == teacher_era.end()) {
        throw std::invalid_argument("recovery_report: missing teacher-era baseline for task '" +
                                    task + "'");
      }
      auto ft = ft_baseline.find(task);
      if (ft == ft_baseline.end()) {
        throw std::invalid_argument("recovery_report: missing fine-tuned baseline for task '" +
                                    task + "'");
      }
      RecoveryCell cell;
      cell.score = score;
      if (ft->second > 0.0) {
        cell.delta_pct = 100.0 * (score - ft->second) / ft->second;
      }
      if (te->second > ft->second) {
        cell.recovery = (score - ft->second) / (te->second - ft->second);
      }
      rep.variants[variant][task] = cell;
    }
  }
  return rep;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string opt_num(const std::optional<double>& v) {
  return v ? num(*v) : std::string("n/a");
}

}  // namespace

std::string RecoveryReport::render_table() const {
  std::vector<std::string> tasks;
  for (const auto& [task, score] : ft_baseline) tasks.push_back(task);
  std::ostringstream os;
  os << "row                 ";
  for (const auto& t : tasks) {
    os << " | " << t << " score/delta%/recovery";
  }
  os << "\n";
  auto baseline_row = [&](const std::string& name, const TaskScores& scores) {
    os << name;
    for (size_t i = name.size(); i < 20; ++i) os << ' ';
    for (const auto& t : tasks) {
      auto it = scores.find(t);
      os << " | " << (it != scores.end() ? num(it->second) : std::string("n/a"))
         << " / - / -";
    }
    os << "\n";
  };
  baseline_row("teacher-era", teacher_era);
  baseline_row("ft-baseline", ft_baseline);
  for (const auto& [variant, cells] : variants) {
    os << variant;
    for (size_t i = variant.size(); i < 20; ++i) os << ' ';
    for (const auto& t : tasks) {
      auto it = cells.find(t);
      if (it == cells.end()) {
        os << " | n/a / n/a / n/a";
      } else {
        os << " | " << num(it->second.score) << " / " << opt_num(it->second.delta_pct)
           << " / " << opt_num(it->second.recovery);
      }
    }
    os << "\n";
  }
  return os.str();
}

std::string RecoveryReport::render_csv() const {
  std::ostringstream os;
  os << "row,task,score,delta_pct,recovery\n";
  auto emit = [&](const std::string& name, const std::string& task,
                  const RecoveryCell& cell) {
    os << name << "," << task << "," << num(cell.score) << ","
       << opt_num(cell.delta_pct) << "," << opt_num(cell.recovery) << "\n";
  };
  for (const auto& [task, score] : teacher_era) {
    os << "teacher-era," << task << "," << num(score) << ",n/a,n/a\n";
  }
  for (const auto& [task, score] : ft_baseline) {
    os << "ft-baseline," << task << "," << num(score) << ",n/a,n/a\n";
  }
  for (const auto& [variant, cells] : variants) {
    for (const auto& [task, cell] : cells) emit(variant, task, cell);
  }
  return os.str();
}

}  // namespace kvd

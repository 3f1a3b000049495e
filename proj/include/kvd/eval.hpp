#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kvd/multimodal.hpp"

namespace kvd {

/// Named held-out task sets: text-only QA, language-heavy multimodal QA, and
/// OCR-style exact copy. Generated from seeds disjoint from training seeds.
struct TaskSet {
  std::string name;
  std::vector<Sample> samples;
};

struct EvalSuite {
  TaskSet text_qa;
  TaskSet mm_qa;
  TaskSet ocr_copy;
};

EvalSuite make_eval_suite(uint64_t seed, int n_per_task);

/// Greedy-decodes the answer span: the prompt is everything up to and
/// including the answer marker; decoding stops at eos or `max_new` tokens.
std::vector<int> greedy_decode_answer(DualTower& tower, const Sample& sample,
                                      int max_new = 12);

/// Reference answer span of a sample (tokens between the answer marker and eos).
std::vector<int> reference_answer(const Sample& sample);

struct ExactMatchResult {
  double accuracy = 0.0;
  std::vector<std::vector<int>> predictions;
  std::vector<std::vector<int>> references;
  std::vector<uint8_t> correct;
};

/// Token-exact comparison of greedy-decoded answers against references.
ExactMatchResult eval_exact_match(DualTower& tower, const TaskSet& task);

/// exp(mean counted-position negative log-likelihood) over text-only samples.
double eval_perplexity(DualTower& tower, const std::vector<Sample>& text_samples);

struct WinLoss {
  int wins = 0;    // a right where b is wrong
  int losses = 0;  // b right where a is wrong
  int net = 0;
};

WinLoss win_loss_diff(const std::vector<std::vector<int>>& preds_a,
                      const std::vector<std::vector<int>>& preds_b,
                      const std::vector<std::vector<int>>& references);

// --- Recovery report -------------------------------------------------------

using TaskScores = std::map<std::string, double>;  // task name -> score

struct RecoveryCell {
  double score = 0.0;
  std::optional<double> delta_pct;  // vs fine-tuned baseline, when baseline > 0
  std::optional<double> recovery;   // defined only when teacher_era > ft_baseline
};

struct RecoveryReport {
  TaskScores teacher_era;
  TaskScores ft_baseline;
  std::map<std::string, std::map<std::string, RecoveryCell>> variants;

  std::string render_table() const;  // aligned human-readable table
  std::string render_csv() const;    // machine-readable rows
};

/// Builds the report from absolute scores. Both baselines must cover every
/// task that appears in any variant.
RecoveryReport recovery_report(const TaskScores& teacher_era,
                               const TaskScores& ft_baseline,
                               const std::map<std::string, TaskScores>& variants);

}  // namespace kvd

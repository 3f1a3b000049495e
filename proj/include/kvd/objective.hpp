#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kvd/tensor.hpp"

namespace kvd {

enum class SourceCategory { kLanguageHeavy, kOcrHeavy };

std::string category_name(SourceCategory c);
SourceCategory category_from_name(const std::string& name);

struct SourceTag {
  std::string name;
  SourceCategory category = SourceCategory::kLanguageHeavy;
};

/// Per-category soft/hard mixing weights and the shared temperature.
struct AlphaPolicy {
  double alpha_language_heavy = 0.0;
  double alpha_ocr_heavy = 0.0;
  double temperature = 1.0;

  double alpha_for(SourceCategory c) const;
  void validate() const;
};

struct LossBreakdown {
  double soft_sum = 0.0;       // sum of alpha * T^2 * KL over counted positions
  double hard_sum = 0.0;       // sum of (1 - alpha) * CE over counted positions
  double combined = 0.0;       // (soft_sum + hard_sum) / N
  int counted_positions = 0;   // N
  double soft_lang = 0.0, soft_ocr = 0.0;
  double hard_lang = 0.0, hard_ocr = 0.0;
  bool empty = false;          // N == 0
};

/// T^2-scaled KL sum over masked positions. Gradient reaches z_student only.
MaskedLoss soft_loss(const Tensor& z_teacher, const Tensor& z_student,
                     const std::vector<uint8_t>& positions, double temperature);

/// Cross-entropy sum over positions whose label is not the ignore index.
MaskedLoss hard_loss(const Tensor& z_student, const std::vector<int>& labels);

/// One example of a collated batch, already forwarded.
struct ExampleLosses {
  std::optional<Tensor> z_teacher;  // absent when alpha is 0 for this example
  Tensor z_student;
  std::vector<int> labels;          // ignore index marks uncounted positions
  std::vector<uint8_t> mask;        // attention mask m, 0 = padding
  SourceTag tag;
};

struct CombinedLoss {
  Tensor graph;  // normalized scalar, backprop-ready; undefined when N == 0
  LossBreakdown breakdown;
};

/// The per-batch selective objective: for each counted position,
/// alpha_b * T^2 * KL + (1 - alpha_b) * CE, normalized by one global N.
CombinedLoss combined_loss(std::vector<ExampleLosses>& examples,
                           const AlphaPolicy& policy);

}  // namespace kvd

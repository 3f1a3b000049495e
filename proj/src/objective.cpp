#include "kvd/objective.hpp"

#include <stdexcept>

namespace kvd {

std::string category_name(SourceCategory c) {
  return c == SourceCategory::kLanguageHeavy ? "language_heavy" : "ocr_heavy";
}

SourceCategory category_from_name(const std::string& name) {
  if (name == "language_heavy") return SourceCategory::kLanguageHeavy;
  if (name == "ocr_heavy") return SourceCategory::kOcrHeavy;
  throw std::invalid_argument("unknown source category: " + name);
}

double AlphaPolicy::alpha_for(SourceCategory c) const {
  return c == SourceCategory::kLanguageHeavy ? alpha_language_heavy : alpha_ocr_heavy;
}

void AlphaPolicy::validate() const {
  if (temperature <= 0.0) {
    throw std::invalid_argument("AlphaPolicy: temperature must be > 0");
  }
  for (double a : {alpha_language_heavy, alpha_ocr_heavy}) {
    if (a < 0.0 || a > 1.0) {
      throw std::invalid_argument("AlphaPolicy: alpha must lie in [0,1]");
    }
  }
}

MaskedLoss soft_loss(const Tensor& z_teacher, const Tensor& z_student,
                     const std::vector<uint8_t>& positions, double temperature) {
  MaskedLoss kl = kl_divergence_masked(z_teacher, z_student, positions, temperature);
  return {scale(kl.loss_sum, temperature * temperature), kl.count};
}

MaskedLoss hard_loss(const Tensor& z_student, const std::vector<int>& labels) {
  return cross_entropy_masked(z_student, labels, kIgnoreIndex);
}

CombinedLoss combined_loss(std::vector<ExampleLosses>& examples,
                           const AlphaPolicy& policy) {
  policy.validate();
  CombinedLoss out;
  Tensor total;
  for (auto& ex : examples) {
    if (ex.mask.size() != ex.labels.size() ||
        static_cast<int>(ex.labels.size()) != ex.z_student.dim(0)) {
      throw std::invalid_argument("combined_loss: labels/mask/logits misaligned for " +
                                  ex.tag.name);
    }
    double alpha = policy.alpha_for(ex.tag.category);
    // Counted positions: attended and labelled (Omega_pos).
    std::vector<uint8_t> counted(ex.mask.size());
    std::vector<int> masked_labels(ex.labels);
    int n_counted = 0;
    for (size_t t = 0; t < ex.mask.size(); ++t) {
      bool c = ex.mask[t] && ex.labels[t] != kIgnoreIndex;
      counted[t] = c ? 1 : 0;
      if (!c) masked_labels[t] = kIgnoreIndex;
      if (c) ++n_counted;
    }
    out.breakdown.counted_positions += n_counted;
    bool lang = ex.tag.category == SourceCategory::kLanguageHeavy;
    if (alpha > 0.0) {
      if (!ex.z_teacher) {
        throw std::invalid_argument("combined_loss: alpha > 0 but no teacher logits for " +
                                    ex.tag.name);
      }
      MaskedLoss soft = soft_loss(*ex.z_teacher, ex.z_student, counted,
                                  policy.temperature);
      Tensor term = scale(soft.loss_sum, alpha);
      double v = term.item();
      out.breakdown.soft_sum += v;
      (lang ? out.breakdown.soft_lang : out.breakdown.soft_ocr) += v;
      total = total.defined() ? add(total, term) : term;
    }
    if (alpha < 1.0) {
      MaskedLoss hard = hard_loss(ex.z_student, masked_labels);
      Tensor term = scale(hard.loss_sum, 1.0 - alpha);
      double v = term.item();
      out.breakdown.hard_sum += v;
      (lang ? out.breakdown.hard_lang : out.breakdown.hard_ocr) += v;
      total = total.defined() ? add(total, term) : term;
    }
  }
  int n = out.breakdown.counted_positions;
  if (n == 0) {
    out.breakdown.empty = true;
    out.breakdown.combined = 0.0;
    return out;
  }
  out.graph = scale(total, 1.0 / n);
  out.breakdown.combined = out.graph.item();
  return out;
}

}  // namespace kvd

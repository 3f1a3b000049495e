#include "kvd/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace kvd {

AdamW::AdamW(std::vector<Tensor> params, Options opts)
    : params_(std::move(params)), opts_(opts) {
  size_t total = 0;
  for (const auto& p : params_) {
    offsets_.push_back(total);
    total += static_cast<size_t>(p.numel());
  }
  m_.assign(total, 0.0);
  v_.assign(total, 0.0);
}

bool AdamW::step(double lr) {
  for (auto& p : params_) {
    for (double g : p.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  ++step_count_;
  double t = static_cast<double>(step_count_);
  double bc1 = 1.0 - std::pow(opts_.beta1, t);
  double bc2 = 1.0 - std::pow(opts_.beta2, t);
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto& grad = p.grad();
    auto& data = p.data();
    double* m = m_.data() + offsets_[i];
    double* v = v_.data() + offsets_[i];
    for (size_t j = 0; j < grad.size(); ++j) {
      m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * grad[j];
      v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * grad[j] * grad[j];
      double m_hat = m[j] / bc1;
      double v_hat = v[j] / bc2;
      data[j] -= lr * (m_hat / (std::sqrt(v_hat) + opts_.epsilon) +
                       opts_.weight_decay * data[j]);
    }
  }
  return true;
}

double cosine_warmup_lr(int step, const ScheduleConfig& s) {
  if (step < 0 || step > s.total_steps) {
    throw std::invalid_argument("cosine_warmup_lr: step " + std::to_string(step) +
                                " outside [0," + std::to_string(s.total_steps) + "]");
  }
  int warmup = static_cast<int>(s.warmup_fraction * s.total_steps);
  if (warmup > 0 && step < warmup) {
    return s.peak_lr * static_cast<double>(step) / warmup;
  }
  if (s.total_steps == warmup) return s.peak_lr;
  double progress = static_cast<double>(step - warmup) / (s.total_steps - warmup);
  return s.floor_lr + 0.5 * (s.peak_lr - s.floor_lr) * (1.0 + std::cos(M_PI * progress));
}

double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
  if (max_norm <= 0.0) throw std::invalid_argument("clip_global_norm: max_norm <= 0");
  double sq = 0.0;
  for (auto& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm) {
    double s = max_norm / norm;
    for (auto& p : params) {
      for (auto& g : p.grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace kvd

#pragma once

#include <vector>

#include "kvd/tensor.hpp"

namespace kvd {

/// Decoupled-weight-decay Adam over a fixed, ordered parameter list.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  explicit AdamW(std::vector<Tensor> params) : AdamW(std::move(params), Options()) {}
  AdamW(std::vector<Tensor> params, Options opts);

  /// One update from the gradients currently held by the parameters.
  /// Non-finite gradients skip the whole update; returns false in that case.
  bool step(double lr);

  const std::vector<Tensor>& params() const { return params_; }
  int64_t step_count() const { return step_count_; }
  const Options& options() const { return opts_; }

  // Checkpoint access: moments are stored flat, in parameter order.
  std::vector<double>& moment1() { return m_; }
  std::vector<double>& moment2() { return v_; }
  void set_step_count(int64_t t) { step_count_ = t; }

 private:
  std::vector<Tensor> params_;
  Options opts_;
  std::vector<double> m_, v_;  // concatenated over params
  std::vector<size_t> offsets_;
  int64_t step_count_ = 0;
};

struct ScheduleConfig {
  double peak_lr = 1e-4;
  double warmup_fraction = 0.03;
  int total_steps = 2000;
  double floor_lr = 0.0;
};

/// Linear 0 -> peak over the warmup span, cosine peak -> floor afterwards.
double cosine_warmup_lr(int step, const ScheduleConfig& schedule);

/// Scales every gradient by max_norm/||g||_2 when the global norm exceeds
/// max_norm. Returns the pre-clip norm.
double clip_global_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace kvd

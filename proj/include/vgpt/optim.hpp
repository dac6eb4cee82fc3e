#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vgpt/tensor.hpp"

namespace vgpt {

// Linear warmup followed by a cosine decay to zero.
// lr(0) = 0 (when warmup > 0), lr(warmup) = base, lr(total) = 0.
struct LrSchedule {
  double base_lr = 0.0;
  int64_t warmup_steps = 0;
  int64_t total_steps = 1;

  double at(int64_t step) const;
};

LrSchedule make_schedule(double base_lr, int64_t total_steps, double warmup_ratio);

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

// Decoupled weight decay Adam over a fixed, ordered parameter list.
// Moment buffers and the step counter are exposed so checkpoints can
// capture the exact optimizer state for bit-identical resume.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg = {});

  // One update using the gradients currently stored on the parameters.
  // A parameter whose grad buffer is empty is treated as having zero grad.
  void step(float lr);
  void zero_grad();

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }

  const std::vector<Tensor>& params() const { return params_; }
  std::vector<std::vector<float>>& exp_avg() { return m_; }
  std::vector<std::vector<float>>& exp_avg_sq() { return v_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
};

}  // namespace vgpt

#include "vgpt/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace vgpt {

double LrSchedule::at(int64_t step) const {
  if (step < 0) throw std::invalid_argument("vgpt: schedule: negative step");
  if (step >= total_steps) return 0.0;
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  double span = static_cast<double>(total_steps - warmup_steps);
  double progress = static_cast<double>(step - warmup_steps) / span;
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

LrSchedule make_schedule(double base_lr, int64_t total_steps, double warmup_ratio) {
  if (total_steps <= 0) throw std::invalid_argument("vgpt: schedule: total_steps must be positive");
  if (warmup_ratio < 0.0 || warmup_ratio >= 1.0)
    throw std::invalid_argument("vgpt: schedule: warmup_ratio must be in [0,1)");
  LrSchedule s;
  s.base_lr = base_lr;
  s.total_steps = total_steps;
  s.warmup_steps = static_cast<int64_t>(warmup_ratio * static_cast<double>(total_steps));
  return s;
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    if (!p.requires_grad()) throw std::invalid_argument("vgpt: optimizer given a frozen parameter");
    m_.emplace_back(p.data().size(), 0.0f);
    v_.emplace_back(p.data().size(), 0.0f);
  }
}

void AdamW::step(float lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
  float inv_bc1 = static_cast<float>(1.0 / bc1);
  float inv_bc2 = static_cast<float>(1.0 / bc2);
  for (size_t i = 0; i < params_.size(); ++i) {
    std::vector<float>& w = params_[i].mutable_data();
    const std::vector<float>& g = params_[i].grad();
    std::vector<float>& m = m_[i];
    std::vector<float>& v = v_[i];
    bool has_grad = !g.empty();
    for (size_t j = 0; j < w.size(); ++j) {
      float gj = has_grad ? g[j] : 0.0f;
      m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * gj * gj;
      float mhat = m[j] * inv_bc1;
      float vhat = v[j] * inv_bc2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace vgpt

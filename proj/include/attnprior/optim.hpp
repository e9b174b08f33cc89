#pragma once

#include <cmath>
#include <vector>

#include "attnprior/tensor.hpp"

namespace attnprior {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// AdamW with decoupled weight decay and bias-corrected moments. The learning
/// rate for each step comes from the caller (cosine schedule during training).
template <class S>
class AdamWT {
 public:
  explicit AdamWT(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(std::vector<TensorT<S>*> params, const std::vector<const TensorT<S>*>& grads,
            double lr_now) {
    if (params.size() != grads.size()) throw DimensionError("adamw: params/grads count mismatch");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t p = 0; p < params.size(); ++p) {
        m_[p].assign(params[p]->data.size(), 0.0);
        v_[p].assign(params[p]->data.size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t p = 0; p < params.size(); ++p) {
      auto& w = params[p]->data;
      const auto& gd = grads[p]->data;
      if (gd.size() != w.size()) throw DimensionError("adamw: param/grad shape mismatch");
      for (size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(gd[i]);
        m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * gi;
        v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m_[p][i] / bc1;
        const double vhat = v_[p][i] / bc2;
        const double upd = mhat / (std::sqrt(vhat) + cfg_.eps) +
                           cfg_.weight_decay * static_cast<double>(w[i]);
        w[i] = static_cast<S>(static_cast<double>(w[i]) - lr_now * upd);
      }
    }
  }

  long steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;  // double moments even for float params
};

/// Scale all gradients by max_norm/norm when the global L2 norm exceeds
/// max_norm. Returns the pre-clip norm.
template <class S>
double clip_grad_norm(std::vector<TensorT<S>*> grads, double max_norm) {
  if (max_norm <= 0) throw DimensionError("clip_grad_norm: max_norm must be positive");
  double sq = 0;
  for (auto* gt : grads)
    for (S v : gt->data) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const S f = static_cast<S>(max_norm / norm);
    for (auto* gt : grads)
      for (S& v : gt->data) v *= f;
  }
  return norm;
}

inline double cosine_lr(long step, long total_steps, double base_lr) {
  if (total_steps <= 0) return base_lr;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, frac)));
}

using AdamW = AdamWT<double>;
using AdamWF = AdamWT<float>;

}  // namespace attnprior

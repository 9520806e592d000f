#include <cmath>
#include <numbers>

#include "spikedet/train.hpp"

namespace spikedet::train {

void adamw_step(std::vector<ag::Tensor>& params, AdamWState& state, double lr,
                const AdamWConfig& cfg) {
  if (state.m.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adamw_step: optimizer state covers a different parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel()) {
      throw std::invalid_argument("adamw_step: state shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double steps = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, steps);
  const double c2 = 1.0 - std::pow(cfg.beta2, steps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto w = p.mutable_values();
    const bool has = p.has_grad();
    std::span<const double> g = has ? p.grad() : std::span<const double>{};
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      const double mh = m[j] / c1, vh = v[j] / c2;
      w[j] -= lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * w[j]);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total, double lr0, double lr_min) {
  if (total == 0) throw std::invalid_argument("cosine_lr: total steps must be positive");
  if (step > total) throw std::invalid_argument("cosine_lr: step beyond the schedule");
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(phase));
}

double clip_grad_norm(std::vector<std::span<double>> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g) x *= k;
  }
  return norm;
}

double clip_grad_norm(const std::vector<ag::Tensor>& params, double max_norm) {
  std::vector<std::span<double>> grads;
  for (const auto& p : params) {
    if (p.has_grad()) grads.push_back(p.grad_buffer());
  }
  return clip_grad_norm(std::move(grads), max_norm);
}

}  // namespace spikedet::train

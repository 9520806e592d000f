#include "spikedet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace spikedet::losses {

namespace {

void require_same(const ag::Tensor& a, const ag::Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ag::ShapeError(std::string(what) + ": shapes " + ag::to_string(a.shape()) + " and " +
                         ag::to_string(b.shape()) + " differ");
  }
  if (a.rank() != 2) throw ag::ShapeError(std::string(what) + ": expected [N, C]");
}

}  // namespace

Kind parse_kind(const std::string& name) {
  if (name == "mse") return Kind::mse;
  if (name == "ce") return Kind::ce;
  throw std::invalid_argument("unknown loss '" + name + "' (mse|ce)");
}

std::string to_string(Kind k) { return k == Kind::mse ? "mse" : "ce"; }

ag::Tensor mse_loss(const ag::Tensor& decoded, const ag::Tensor& targets) {
  require_same(decoded, targets, "mse_loss");
  const double n = static_cast<double>(decoded.dim(0));
  return ag::scale(ag::sum(ag::square(ag::sub(targets, decoded))), 1.0 / n);
}

ag::Tensor ce_loss(const ag::Tensor& decoded, const ag::Tensor& targets) {
  require_same(decoded, targets, "ce_loss");
  const double n = static_cast<double>(decoded.dim(0));
  return ag::scale(ag::sum(ag::mul(targets, ag::log_softmax(decoded, 1))), -1.0 / n);
}

ag::Tensor classification_loss(Kind k, const ag::Tensor& decoded, const ag::Tensor& targets) {
  return k == Kind::mse ? mse_loss(decoded, targets) : ce_loss(decoded, targets);
}

std::vector<double> mse_grad_analytic(const std::vector<double>& decoded,
                                      const std::vector<double>& targets) {
  if (decoded.size() != targets.size()) throw ag::ShapeError("mse_grad_analytic: size mismatch");
  std::vector<double> g(decoded.size());
  for (std::size_t j = 0; j < g.size(); ++j) g[j] = 2.0 * (decoded[j] - targets[j]);
  return g;
}

std::vector<double> softmax(const std::vector<double>& logits) {
  if (logits.empty()) return {};
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> z(logits.size());
  double total = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) total += z[j] = std::exp(logits[j] - m);
  for (auto& v : z) v /= total;
  return z;
}

std::vector<double> ce_grad_analytic(const std::vector<double>& decoded,
                                     const std::vector<double>& targets) {
  if (decoded.size() != targets.size()) throw ag::ShapeError("ce_grad_analytic: size mismatch");
  auto z = softmax(decoded);
  for (std::size_t j = 0; j < z.size(); ++j) z[j] -= targets[j];
  return z;
}

ag::Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
  std::vector<double> v(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw std::out_of_range("one_hot: label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
    v[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return ag::Tensor::from({labels.size(), classes}, std::move(v));
}

ag::Tensor focal_loss_sum(const ag::Tensor& probabilities, const std::vector<int>& labels,
                          const FocalParams& params) {
  if (labels.size() != probabilities.numel()) {
    throw ag::ShapeError("focal_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(probabilities.numel()) + " probabilities");
  }
  if (!(params.alpha > 0.0 && params.alpha < 1.0) || !(params.gamma >= 0.0)) {
    throw std::invalid_argument("focal_loss: need alpha in (0,1) and gamma >= 0");
  }
  const double eps = params.epsilon, a = params.alpha, gamma = params.gamma;
  const auto p = probabilities.values();
  // d(loss)/d(p) per entry, zero where clamped or ignored.
  std::vector<double> dp(p.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (labels[i] < 0) continue;
    const bool pos = labels[i] > 0;
    const double raw = pos ? p[i] : 1.0 - p[i];
    const double pt = std::clamp(raw, eps, 1.0 - eps);
    const double at = pos ? a : 1.0 - a;
    const double q = 1.0 - pt;
    const double logp = std::log(pt);
    total += -at * std::pow(q, gamma) * logp;
    if (raw == pt) {
      // d/dpt [-at q^g log pt] = at (g q^(g-1) log pt - q^g / pt)
      const double qg1 = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0);
      const double dpt = at * (qg1 * logp - std::pow(q, gamma) / pt);
      dp[i] = pos ? dpt : -dpt;
    }
  }
  return ag::make_op({}, {total}, {probabilities},
                     [probabilities, dp = std::move(dp)](std::span<const double> g) {
                       auto buf = probabilities.grad_buffer();
                       for (std::size_t i = 0; i < dp.size(); ++i) buf[i] += g[0] * dp[i];
                     });
}

ag::Tensor focal_loss(const ag::Tensor& probabilities, const std::vector<int>& labels,
                      const FocalParams& params) {
  if (probabilities.numel() == 0) throw ag::ShapeError("focal_loss: empty input");
  return ag::scale(focal_loss_sum(probabilities, labels, params),
                   1.0 / static_cast<double>(probabilities.numel()));
}

ag::Tensor smooth_l1_sum(const ag::Tensor& pred, const std::vector<double>& target,
                         const std::vector<char>& mask, double beta) {
  if (target.size() != pred.numel() || mask.size() != pred.numel()) {
    throw ag::ShapeError("smooth_l1: target/mask size does not match prediction");
  }
  if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be positive");
  const auto x = pred.values();
  std::vector<double> d(x.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!mask[i]) continue;
    const double r = x[i] - target[i];
    if (std::abs(r) < beta) {
      total += 0.5 * r * r / beta;
      d[i] = r / beta;
    } else {
      total += std::abs(r) - 0.5 * beta;
      d[i] = r > 0 ? 1.0 : -1.0;
    }
  }
  return ag::make_op({}, {total}, {pred}, [pred, d = std::move(d)](std::span<const double> g) {
    auto buf = pred.grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) buf[i] += g[0] * d[i];
  });
}

MultiboxLoss ssd_multibox_loss(const ag::Tensor& class_logits, const ag::Tensor& box_preds,
                               const MultiboxTargets& targets, const FocalParams& focal) {
  if (class_logits.rank() != 3 || box_preds.rank() != 3 || box_preds.dim(2) != 4 ||
      class_logits.dim(0) != box_preds.dim(0) || class_logits.dim(1) != box_preds.dim(1)) {
    throw ag::ShapeError("multibox: expected class [N, A, K] and box [N, A, 4], got " +
                         ag::to_string(class_logits.shape()) + " and " +
                         ag::to_string(box_preds.shape()));
  }
  const std::size_t entries = class_logits.dim(0) * class_logits.dim(1);
  const std::size_t k = class_logits.dim(2);
  if (targets.label.size() != entries || targets.offsets.size() != 4 * entries) {
    throw ag::ShapeError("multibox: targets do not cover every anchor");
  }
  std::vector<int> cls(entries * k, -1);
  std::vector<char> mask(entries * 4, 0);
  std::size_t positives = 0;
  for (std::size_t e = 0; e < entries; ++e) {
    const int l = targets.label[e];
    if (l == MultiboxTargets::kIgnore) continue;
    if (l >= static_cast<int>(k)) throw std::out_of_range("multibox: class index out of range");
    for (std::size_t c = 0; c < k; ++c) cls[e * k + c] = static_cast<int>(c) == l ? 1 : 0;
    if (l >= 0) {
      ++positives;
      std::fill_n(mask.begin() + static_cast<long>(4 * e), 4, 1);
    } else if (l != MultiboxTargets::kBackground) {
      throw std::invalid_argument("multibox: bad label " + std::to_string(l));
    }
  }
  auto cls_loss = focal_loss_sum(ag::sigmoid(class_logits), cls, focal);
  auto loc_loss = smooth_l1_sum(box_preds, targets.offsets, mask, 1.0);
  const double norm = static_cast<double>(std::max<std::size_t>(1, positives));
  MultiboxLoss out;
  out.classification = cls_loss.item();
  out.localization = loc_loss.item();
  out.positives = positives;
  out.total = ag::scale(ag::add(cls_loss, loc_loss), 1.0 / norm);
  return out;
}

}  // namespace spikedet::losses

#pragma once

// Classification losses on decoded outputs, focal loss, and the SSD multibox
// objective. The *_grad_analytic functions are closed forms used as oracles
// for the autodiff path.

#include <string>
#include <vector>

#include "spikedet/autograd.hpp"

namespace spikedet::losses {

namespace ag = spikedet::ag;

enum class Kind { mse, ce };

Kind parse_kind(const std::string& name);
std::string to_string(Kind k);

// decoded [N, C], targets [N, C] one-hot (constants).
// (1/N) * sum_ij (y_ij - a_ij)^2; normalized by N only.
ag::Tensor mse_loss(const ag::Tensor& decoded, const ag::Tensor& targets);
// -(1/N) * sum_ij y_ij * log softmax(a_i)_j via log-sum-exp.
ag::Tensor ce_loss(const ag::Tensor& decoded, const ag::Tensor& targets);
ag::Tensor classification_loss(Kind k, const ag::Tensor& decoded, const ag::Tensor& targets);

// Single sample (N = 1): 2 (a - y).
std::vector<double> mse_grad_analytic(const std::vector<double>& decoded,
                                      const std::vector<double>& targets);
// Single sample: softmax(a) - y.
std::vector<double> ce_grad_analytic(const std::vector<double>& decoded,
                                     const std::vector<double>& targets);
std::vector<double> softmax(const std::vector<double>& logits);

// One-hot [labels.size(), classes] constant tensor.
ag::Tensor one_hot(const std::vector<int>& labels, std::size_t classes);

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
  double epsilon = 1e-7;  // probabilities clamped to [eps, 1 - eps]
};

// Element-wise -alpha_t (1 - p_t)^gamma log p_t with p_t = p for label 1 and
// 1 - p for label 0 (alpha_t likewise alpha / 1 - alpha). Clamped entries pass
// no gradient. Entries whose label is negative are ignored.
ag::Tensor focal_loss_sum(const ag::Tensor& probabilities, const std::vector<int>& labels,
                          const FocalParams& params);
// Mean over all entries of focal_loss_sum.
ag::Tensor focal_loss(const ag::Tensor& probabilities, const std::vector<int>& labels,
                      const FocalParams& params);

// Sum over marked entries of smooth-L1(pred - target) with transition beta.
ag::Tensor smooth_l1_sum(const ag::Tensor& pred, const std::vector<double>& target,
                         const std::vector<char>& mask, double beta = 1.0);

// Per (sample, anchor) targets, flattened sample-major.
struct MultiboxTargets {
  static constexpr int kIgnore = -2;
  static constexpr int kBackground = -1;
  std::vector<int> label;        // class index >= 0 for positives
  std::vector<double> offsets;   // 4 per entry; read for positives only
};

struct MultiboxLoss {
  ag::Tensor total;
  double classification = 0.0;  // before normalization
  double localization = 0.0;    // before normalization
  std::size_t positives = 0;
};

// class_logits [N, A, K], box_preds [N, A, 4]. Sigmoid then focal over every
// non-ignored anchor and class, smooth-L1 (beta 1) over positives; the sum is
// divided by max(1, positives).
MultiboxLoss ssd_multibox_loss(const ag::Tensor& class_logits, const ag::Tensor& box_preds,
                               const MultiboxTargets& targets, const FocalParams& focal);

}  // namespace spikedet::losses

#include "spikedet/autograd.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>

namespace spikedet::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ShapeError("axis out of range for " + to_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, const BatchNormOptions& opt) {
  if (input.rank() < 2) throw ShapeError("batch_norm input must have rank >= 2");
  const auto s = split_at(input.shape(), 1);
  const std::size_t channels = s.extent;
  if (gamma.numel() != channels || beta.numel() != channels ||
      state.running_mean.size() != channels || state.running_var.size() != channels) {
    throw ShapeError("batch_norm: parameter size does not match " +
                     std::to_string(channels) + " channels");
  }
  const std::size_t m = s.outer * s.inner;
  auto xv = input.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> mean(channels), inv_std(channels);
  if (opt.training) {
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t o = 0; o < s.outer; ++o) {
        const double* p = xv.data() + (o * channels + c) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(m);
      double sq = 0.0;
      for (std::size_t o = 0; o < s.outer; ++o) {
        const double* p = xv.data() + (o * channels + c) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const double var = sq / static_cast<double>(m);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + opt.epsilon);
      const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
      state.running_mean[c] = opt.momentum * state.running_mean[c] + (1.0 - opt.momentum) * mu;
      state.running_var[c] = opt.momentum * state.running_var[c] + (1.0 - opt.momentum) * unbiased;
    }
    state.seen_batch = true;
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + opt.epsilon);
    }
  }

  std::vector<double> xhat(xv.size()), out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (o * channels + c) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double h = (xv[base + i] - mean[c]) * inv_std[c];
        xhat[base + i] = h;
        out[base + i] = gv[c] * h + bv[c];
      }
    }

  const bool training = opt.training;
  return make_op(
      input.shape(), std::move(out), {input, gamma, beta},
      [input, gamma, beta, s, m, training, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](std::span<const double> g) mutable {
        const std::size_t channels = s.extent;
        auto gv = gamma.values();
        std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (o * channels + c) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
              sum_g[c] += g[base + i];
              sum_gx[c] += g[base + i] * xhat[base + i];
            }
          }
        if (gamma.requires_grad()) {
          auto dg = gamma.grad_buffer();
          for (std::size_t c = 0; c < channels; ++c) dg[c] += sum_gx[c];
        }
        if (beta.requires_grad()) {
          auto db = beta.grad_buffer();
          for (std::size_t c = 0; c < channels; ++c) db[c] += sum_g[c];
        }
        if (!input.requires_grad()) return;
        auto dx = input.grad_buffer();
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (o * channels + c) * s.inner;
            const double k = gv[c] * inv_std[c];
            for (std::size_t i = 0; i < s.inner; ++i) {
              if (training) {
                dx[base + i] += k * (g[base + i] - inv_m * sum_g[c] -
                                     xhat[base + i] * inv_m * sum_gx[c]);
              } else {
                dx[base + i] += k * g[base + i];
              }
            }
          }
      });
}

Tensor linear(const Tensor& input, const Tensor& weight,
              const std::optional<Tensor>& bias) {
  if (input.rank() != 2 || weight.rank() != 2 || weight.dim(1) != input.dim(1)) {
    throw ShapeError("linear: input " + to_string(input.shape()) + " weight " +
                     to_string(weight.shape()));
  }
  const std::size_t n = input.dim(0), in = input.dim(1), out_f = weight.dim(0);
  if (bias && bias->numel() != out_f) throw ShapeError("linear: bias size mismatch");
  const auto ni = static_cast<Eigen::Index>(n), ii = static_cast<Eigen::Index>(in),
             oi = static_cast<Eigen::Index>(out_f);
  std::vector<double> out(n * out_f);
  MapMat om(out.data(), ni, oi);
  om.noalias() = ConstMapMat(input.values().data(), ni, ii) *
                 ConstMapMat(weight.values().data(), oi, ii).transpose();
  if (bias) {
    auto bv = bias->values();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < out_f; ++c) out[r * out_f + c] += bv[c];
  }
  std::vector<Tensor> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return make_op({n, out_f}, std::move(out), inputs,
                 [input, weight, bias, ni, ii, oi](std::span<const double> g) mutable {
                   ConstMapMat gm(g.data(), ni, oi);
                   if (input.requires_grad()) {
                     MapMat(input.grad_buffer().data(), ni, ii).noalias() +=
                         gm * ConstMapMat(weight.values().data(), oi, ii);
                   }
                   if (weight.requires_grad()) {
                     MapMat(weight.grad_buffer().data(), oi, ii).noalias() +=
                         gm.transpose() * ConstMapMat(input.values().data(), ni, ii);
                   }
                   if (bias && bias->requires_grad()) {
                     auto db = bias->grad_buffer();
                     for (Eigen::Index c = 0; c < oi; ++c) db[static_cast<std::size_t>(c)] += gm.col(c).sum();
                   }
                 });
}

Tensor avg_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride) {
  if (input.rank() != 4) throw ShapeError("avg_pool2d expects rank 4");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  const std::size_t oh = conv_out_size(h, kernel, stride, 0);
  const std::size_t ow = conv_out_size(w, kernel, stride, 0);
  const double norm = 1.0 / static_cast<double>(kernel * kernel);
  auto xv = input.values();
  std::vector<double> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < kernel; ++i)
          for (std::size_t j = 0; j < kernel; ++j)
            acc += xv[(p * h + y * stride + i) * w + x * stride + j];
        out[(p * oh + y) * ow + x] = acc * norm;
      }
  return make_op({input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
                 [input, planes, h, w, oh, ow, kernel, stride,
                  norm](std::span<const double> g) mutable {
                   auto dx = input.grad_buffer();
                   for (std::size_t p = 0; p < planes; ++p)
                     for (std::size_t y = 0; y < oh; ++y)
                       for (std::size_t x = 0; x < ow; ++x) {
                         const double v = g[(p * oh + y) * ow + x] * norm;
                         for (std::size_t i = 0; i < kernel; ++i)
                           for (std::size_t j = 0; j < kernel; ++j)
                             dx[(p * h + y * stride + i) * w + x * stride + j] += v;
                       }
                 });
}

Tensor max_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride) {
  if (input.rank() != 4) throw ShapeError("max_pool2d expects rank 4");
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  const std::size_t oh = conv_out_size(h, kernel, stride, 0);
  const std::size_t ow = conv_out_size(w, kernel, stride, 0);
  auto xv = input.values();
  std::vector<double> out(planes * oh * ow);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t i = 0; i < kernel; ++i)
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::size_t idx = (p * h + y * stride + i) * w + x * stride + j;
            if (xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        const std::size_t o = (p * oh + y) * ow + x;
        out[o] = best;
        arg[o] = best_idx;
      }
  return make_op({input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
                 [input, arg = std::move(arg)](std::span<const double> g) mutable {
                   auto dx = input.grad_buffer();
                   for (std::size_t o = 0; o < arg.size(); ++o) dx[arg[o]] += g[o];
                 });
}

Tensor softmax(const Tensor& input, std::size_t axis) {
  const auto s = split_at(input.shape(), axis);
  auto xv = input.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = std::exp(xv[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= z;
    }
  auto y = out;
  return make_op(input.shape(), std::move(out), {input},
                 [input, s, y = std::move(y)](std::span<const double> g) mutable {
                   auto dx = input.grad_buffer();
                   for (std::size_t o = 0; o < s.outer; ++o)
                     for (std::size_t i = 0; i < s.inner; ++i) {
                       const std::size_t base = o * s.extent * s.inner + i;
                       double dot = 0.0;
                       for (std::size_t e = 0; e < s.extent; ++e)
                         dot += g[base + e * s.inner] * y[base + e * s.inner];
                       for (std::size_t e = 0; e < s.extent; ++e) {
                         const std::size_t k = base + e * s.inner;
                         dx[k] += y[k] * (g[k] - dot);
                       }
                     }
                 });
}

Tensor log_softmax(const Tensor& input, std::size_t axis) {
  const auto s = split_at(input.shape(), axis);
  auto xv = input.values();
  std::vector<double> out(xv.size()), prob(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) z += std::exp(xv[base + e * s.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t e = 0; e < s.extent; ++e) {
        const std::size_t k = base + e * s.inner;
        out[k] = xv[k] - lse;
        prob[k] = std::exp(out[k]);
      }
    }
  return make_op(input.shape(), std::move(out), {input},
                 [input, s, prob = std::move(prob)](std::span<const double> g) mutable {
                   auto dx = input.grad_buffer();
                   for (std::size_t o = 0; o < s.outer; ++o)
                     for (std::size_t i = 0; i < s.inner; ++i) {
                       const std::size_t base = o * s.extent * s.inner + i;
                       double gs = 0.0;
                       for (std::size_t e = 0; e < s.extent; ++e) gs += g[base + e * s.inner];
                       for (std::size_t e = 0; e < s.extent; ++e) {
                         const std::size_t k = base + e * s.inner;
                         dx[k] += g[k] - prob[k] * gs;
                       }
                     }
                 });
}

}  // namespace spikedet::ag

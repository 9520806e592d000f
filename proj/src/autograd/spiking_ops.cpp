#include "spikedet/autograd.hpp"

#include <cmath>
#include <numbers>

namespace spikedet::ag {

double surrogate_derivative(double x, double alpha) {
  const double u = std::numbers::pi / 2.0 * alpha * x;
  return alpha / (2.0 * (1.0 + u * u));
}

double surrogate_primitive(double x, double alpha) {
  return std::atan(std::numbers::pi / 2.0 * alpha * x) / std::numbers::pi + 0.5;
}

namespace {

double fire(double x, const SurrogateSpec& sg) {
  if (sg.smooth_forward) return surrogate_primitive(x, sg.alpha);
  return x >= 0.0 ? 1.0 : 0.0;
}

}  // namespace

Tensor spike(const Tensor& x, const SurrogateSpec& sg) {
  if (!(sg.alpha > 0.0)) throw std::invalid_argument("surrogate alpha must be positive");
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fire(xv[i], sg);
  const double alpha = sg.alpha;
  return make_op(x.shape(), std::move(out), {x},
                 [x, alpha](std::span<const double> g) mutable {
                   auto xv = x.values();
                   auto dx = x.grad_buffer();
                   for (std::size_t i = 0; i < dx.size(); ++i)
                     dx[i] += g[i] * surrogate_derivative(xv[i], alpha);
                 });
}

Tensor plif_multistep(const Tensor& input, const Tensor& w, std::size_t steps,
                      std::vector<double>& membrane, const PlifParams& params) {
  if (steps == 0 || input.rank() == 0 || input.dim(0) % steps != 0) {
    throw ShapeError("plif: leading dim of " + to_string(input.shape()) +
                     " is not a multiple of " + std::to_string(steps) + " steps");
  }
  if (w.numel() != 1) throw ShapeError("plif: w must have one element");
  if (!(params.surrogate.alpha > 0.0)) {
    throw std::invalid_argument("surrogate alpha must be positive");
  }
  const std::size_t m = input.numel() / steps;
  if (membrane.size() != m) {
    throw ShapeError("plif: membrane holds " + std::to_string(membrane.size()) +
                     " values, step needs " + std::to_string(m));
  }
  const double wv = w.values()[0];
  const double k = 1.0 / (1.0 + std::exp(-wv));
  const double vth = params.v_threshold, vr = params.v_reset;
  auto xv = input.values();

  std::vector<double> spikes(input.numel()), charge(input.numel()), before(input.numel());
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t off = t * m;
    for (std::size_t i = 0; i < m; ++i) {
      const double v = membrane[i];
      const double h = v + k * (xv[off + i] - (v - vr));
      const double s = fire(h - vth, params.surrogate);
      before[off + i] = v;
      charge[off + i] = h;
      spikes[off + i] = s;
      membrane[i] = h * (1.0 - s) + vr * s;
    }
  }

  auto s_copy = spikes;
  const double alpha = params.surrogate.alpha;
  return make_op(
      input.shape(), std::move(spikes), {input, w},
      [input, w, steps, m, k, vth, vr, alpha, s = std::move(s_copy),
       h = std::move(charge), v0 = std::move(before)](std::span<const double> g) mutable {
        auto xv = input.values();
        std::vector<double> gv(m, 0.0);
        std::span<double> dx;
        if (input.requires_grad()) dx = input.grad_buffer();
        double gk = 0.0;
        for (std::size_t t = steps; t-- > 0;) {
          const std::size_t off = t * m;
          for (std::size_t i = 0; i < m; ++i) {
            const std::size_t j = off + i;
            const double gs = g[j] + gv[i] * (vr - h[j]);
            const double gh = gs * surrogate_derivative(h[j] - vth, alpha) +
                              gv[i] * (1.0 - s[j]);
            if (!dx.empty()) dx[j] += gh * k;
            gk += gh * (xv[j] - v0[j] + vr);
            gv[i] = gh * (1.0 - k);
          }
        }
        if (w.requires_grad()) w.grad_buffer()[0] += gk * k * (1.0 - k);
      });
}

}  // namespace spikedet::ag

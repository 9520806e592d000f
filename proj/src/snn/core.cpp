#include "spikedet/snn/core.hpp"

#include <cmath>

namespace spikedet::snn {

void RunContext::record(const std::string& name, OpKind kind, const ag::Tensor& out,
                        double total) const {
  if (ops == nullptr) return;
  const double rows = static_cast<double>(out.dim(0));
  ag::Shape per_sample(out.shape().begin() + 1, out.shape().end());
  ops->push_back({name, kind, std::move(per_sample), total / rows});
}

ag::Tensor he_normal(ag::Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = dist(rng);
  return ag::Tensor::from(std::move(shape), std::move(v), true);
}

// ---- PLIF ----------------------------------------------------------------------

PlifLayer::PlifLayer(double tau_init, double v_threshold, double v_reset)
    : v_threshold_(v_threshold), v_reset_(v_reset) {
  if (!(tau_init > 1.0)) throw std::invalid_argument("PLIF tau must exceed 1");
  // sigmoid(w) = 1 / tau
  w_ = ag::Tensor::from({1}, {-std::log(tau_init - 1.0)}, true);
}

double PlifLayer::tau() const { return 1.0 + std::exp(-w_.values()[0]); }

void PlifLayer::reset() { state_ = ag::Tensor(); }

void PlifLayer::reset_counters() { spikes_ = slots_ = 0; }

void PlifLayer::visit(StateVisitor& v, const std::string& prefix) {
  v.param(prefix + ".w", w_);
  v.neuron(prefix, *this);
}

void PlifLayer::check_state(const ag::Shape& step_shape) {
  if (state_.defined() && state_.shape() != step_shape) {
    throw ag::ShapeError("PLIF input changed from " + ag::to_string(state_.shape()) + " to " +
                         ag::to_string(step_shape) + " without a reset");
  }
  if (!state_.defined()) state_ = ag::Tensor::full(step_shape, v_reset_);
}

void PlifLayer::count(const ag::Tensor& out) {
  for (double s : out.values()) spikes_ += s != 0.0;
  slots_ += out.numel();
}

ag::Tensor PlifLayer::forward(const ag::Tensor& input, RunContext& ctx, const std::string& site) {
  if (input.rank() == 0 || input.dim(0) % ctx.steps != 0) {
    throw ag::ShapeError("PLIF sequence " + ag::to_string(input.shape()) +
                         " does not split into " + std::to_string(ctx.steps) + " steps");
  }
  ag::Shape step_shape = input.shape();
  step_shape[0] /= ctx.steps;
  check_state(step_shape);
  std::vector<double> membrane(state_.values().begin(), state_.values().end());
  ag::PlifParams params{v_threshold_, v_reset_, ctx.surrogate};
  auto out = ag::plif_multistep(input, w_, ctx.steps, membrane, params);
  state_ = ag::Tensor::from(step_shape, std::move(membrane));
  count(out);
  ctx.observe(site, ActivationKind::spike, out);
  return out;
}

ag::Tensor PlifLayer::step(const ag::Tensor& input, const ag::SurrogateSpec& surrogate) {
  check_state(input.shape());
  const auto k = ag::sigmoid(w_);
  const auto& v = state_;
  auto h = ag::add(v, ag::mul(k, ag::sub(input, ag::add_scalar(v, -v_reset_))));
  auto s = ag::spike(ag::add_scalar(h, -v_threshold_), surrogate);
  state_ = ag::add(ag::mul(h, ag::add_scalar(ag::scale(s, -1.0), 1.0)), ag::scale(s, v_reset_));
  count(s);
  return s;
}

// ---- batch norm / conv / linear -------------------------------------------------

BatchNorm2d::BatchNorm2d(std::size_t channels)
    : gamma_(ag::Tensor::full({channels}, 1.0, true)),
      beta_(ag::Tensor::zeros({channels}, true)),
      state_(channels) {}

ag::Tensor BatchNorm2d::forward(const ag::Tensor& x, RunContext& ctx, const std::string& site) {
  ag::BatchNormOptions opt;
  opt.training = ctx.training;
  auto out = ag::batch_norm(x, gamma_, beta_, state_, opt);
  // Folded into an affine transform at inference: one multiply-accumulate per
  // element.
  ctx.record(site, OpKind::multiply_accumulate, out, static_cast<double>(out.numel()));
  return out;
}

void BatchNorm2d::visit(StateVisitor& v, const std::string& prefix) {
  v.param(prefix + ".gamma", gamma_);
  v.param(prefix + ".beta", beta_);
  v.buffer(prefix + ".stats", state_);
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
               std::size_t pad, bool bias, OpKind kind, Rng& rng)
    : weight_(he_normal({out, in, kernel, kernel}, in * kernel * kernel, rng)),
      opt_(ag::Conv2dOptions::uniform(stride, pad)),
      kind_(kind) {
  if (in == 0 || out == 0 || kernel == 0 || stride == 0) {
    throw std::invalid_argument("conv channels, kernel and stride must be positive");
  }
  if (bias) bias_ = ag::Tensor::zeros({out}, true);
}

ag::Tensor Conv2d::forward(const ag::Tensor& x, RunContext& ctx, const std::string& site) {
  auto out = ag::conv2d(x, weight_, bias_, opt_);
  const double fan = static_cast<double>(weight_.dim(1) * weight_.dim(2) * weight_.dim(3));
  ctx.record(site, kind_, out, static_cast<double>(out.numel()) * fan);
  return out;
}

void Conv2d::visit(StateVisitor& v, const std::string& prefix) {
  v.param(prefix + ".weight", weight_);
  if (bias_) v.param(prefix + ".bias", *bias_);
}

ConvTranspose2d::ConvTranspose2d(std::size_t in, std::size_t out, std::size_t kernel_h,
                                 std::size_t kernel_w, const ag::ConvTransposeOptions& opt,
                                 Rng& rng)
    : weight_(he_normal({in, out, kernel_h, kernel_w},
                        // Inputs actually reaching one output position.
                        in * ((kernel_h + opt.stride_h - 1) / opt.stride_h) *
                            ((kernel_w + opt.stride_w - 1) / opt.stride_w),
                        rng)),
      opt_(opt) {}

ag::Tensor ConvTranspose2d::forward(const ag::Tensor& x, RunContext& ctx,
                                    const std::string& site) {
  auto out = ag::conv_transpose2d(x, weight_, std::nullopt, opt_);
  // Every input element scatters into out_channels * kh * kw outputs.
  const double fan = static_cast<double>(weight_.dim(1) * weight_.dim(2) * weight_.dim(3));
  ctx.record(site, OpKind::accumulate, out, static_cast<double>(x.numel()) * fan);
  return out;
}

void ConvTranspose2d::visit(StateVisitor& v, const std::string& prefix) {
  v.param(prefix + ".weight", weight_);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight_(he_normal({out, in}, in, rng)), bias_(ag::Tensor::zeros({out}, true)) {}

ag::Tensor Linear::forward(const ag::Tensor& x, RunContext& ctx, const std::string& site) {
  auto out = ag::linear(x, weight_, bias_);
  ctx.record(site, OpKind::multiply_accumulate, out,
             static_cast<double>(out.numel()) * static_cast<double>(weight_.dim(1)));
  return out;
}

void Linear::visit(StateVisitor& v, const std::string& prefix) {
  v.param(prefix + ".weight", weight_);
  v.param(prefix + ".bias", bias_);
}

}  // namespace spikedet::snn

#include "spikedet/snn/blocks.hpp"

namespace spikedet::snn {

// ---- conv-bn-plif ----------------------------------------------------------------

ConvBnPlif::ConvBnPlif(const Spec& spec, double tau_init, Rng& rng)
    : spec_(spec),
      bn_(spec.in),
      conv_(spec.in, spec.out, spec.kernel, spec.stride, spec.pad, false, OpKind::accumulate, rng),
      plif_(tau_init) {
  if (spec.pool == 0) throw std::invalid_argument("pool window must be positive");
}

ag::Tensor ConvBnPlif::forward(const ag::Tensor& x, RunContext& ctx, const std::string& site) {
  auto h = bn_.forward(x, ctx, site + ".bn");
  h = conv_.forward(h, ctx, site + ".conv");
  if (spec_.pool > 1) h = ag::avg_pool2d(h, spec_.pool, spec_.pool);
  return plif_.forward(h, ctx, site + ".plif");
}

void ConvBnPlif::visit(StateVisitor& v, const std::string& prefix) {
  bn_.visit(v, prefix + ".bn");
  conv_.visit(v, prefix + ".conv");
  plif_.visit(v, prefix + ".plif");
}

// ---- dense block -------------------------------------------------------------------

DenseBlock::DenseBlock(std::size_t in, std::size_t layers, std::size_t growth, double tau_init,
                       Rng& rng)
    : out_(in + layers * growth) {
  if (in == 0 || layers == 0 || growth == 0) {
    throw std::invalid_argument("dense block needs positive channels, layers and growth");
  }
  layers_.reserve(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    layers_.emplace_back(ConvBnPlif::Spec{in + l * growth, growth, 3, 1, 1, 1}, tau_init, rng);
  }
}

ag::Tensor DenseBlock::forward(const ag::Tensor& x, RunContext& ctx, const std::string& site) {
  ag::Tensor features = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto y = layers_[l].forward(features, ctx, site + ".layer" + std::to_string(l));
    const ag::Tensor parts[] = {features, y};
    features = ag::concat(parts, 1);
  }
  ctx.observe(site, ActivationKind::spike, features);
  return features;
}

void DenseBlock::visit(StateVisitor& v, const std::string& prefix) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    layers_[l].visit(v, prefix + ".layer" + std::to_string(l));
  }
}

// ---- SEW residual block ----------------------------------------------------------------

SewResBlock::SewResBlock(std::size_t channels, double tau_init, Rng& rng)
    : channels_(channels),
      first_({channels, channels, 3, 1, 1, 1}, tau_init, rng),
      second_({channels, channels, 3, 1, 1, 1}, tau_init, rng) {}

ag::Tensor SewResBlock::forward(const ag::Tensor& x, RunContext& ctx, const std::string& site) {
  if (x.rank() != 4 || x.dim(1) != channels_) {
    throw ag::ShapeError("residual block expects " + std::to_string(channels_) +
                         " channels, got " + ag::to_string(x.shape()));
  }
  auto body = second_.forward(first_.forward(x, ctx, site + ".body0"), ctx, site + ".body1");
  auto out = ag::add(body, x);
  ctx.record(site + ".add", OpKind::multiply_accumulate, out, static_cast<double>(out.numel()));
  for (double v : out.values()) non_binary_ += v > 1.0;
  entries_ += out.numel();
  ctx.observe(site, ActivationKind::sew_sum, out);
  return out;
}

void SewResBlock::visit(StateVisitor& v, const std::string& prefix) {
  first_.visit(v, prefix + ".body0");
  second_.visit(v, prefix + ".body1");
  v.residual(prefix, *this);
}

// ---- extra block ----------------------------------------------------------------------

ExtraBlock::ExtraBlock(std::size_t in, std::size_t mid, std::size_t out, double tau_init,
                       Rng& rng)
    : squeeze_({in, mid, 1, 1, 0, 1}, tau_init, rng), down_({mid, out, 3, 2, 1, 1}, tau_init, rng) {}

ag::Tensor ExtraBlock::forward(const ag::Tensor& x, RunContext& ctx, const std::string& site) {
  return down_.forward(squeeze_.forward(x, ctx, site + ".squeeze"), ctx, site + ".down");
}

void ExtraBlock::visit(StateVisitor& v, const std::string& prefix) {
  squeeze_.visit(v, prefix + ".squeeze");
  down_.visit(v, prefix + ".down");
}

// ---- deconv block -----------------------------------------------------------------------

namespace {

struct AxisGeometry {
  std::size_t kernel, stride, pad, out_pad;
};

AxisGeometry solve_axis(std::size_t in, std::size_t target) {
  if (in == 0 || target < in) {
    throw ag::ShapeError("deconv cannot map " + std::to_string(in) + " to " +
                         std::to_string(target));
  }
  const std::size_t stride = target / in;
  const std::size_t rest = target - in * stride;
  if (rest < stride) return {stride + 2, stride, 1, rest};
  // out = in - 1 - 2 + kernel with stride 1, pad 1.
  return {target - in + 3, 1, 1, 0};
}

}  // namespace

DeconvGeometry solve_deconv_geometry(std::size_t in_h, std::size_t in_w, std::size_t target_h,
                                     std::size_t target_w) {
  const auto h = solve_axis(in_h, target_h);
  const auto w = solve_axis(in_w, target_w);
  DeconvGeometry g{h.kernel, w.kernel, {h.stride, w.stride, h.pad, w.pad, h.out_pad, w.out_pad}};
  if (ag::conv_transpose_out_size(in_h, g.kernel_h, h.stride, h.pad, h.out_pad) != target_h ||
      ag::conv_transpose_out_size(in_w, g.kernel_w, w.stride, w.pad, w.out_pad) != target_w) {
    throw ag::ShapeError("deconv geometry solver failed");
  }
  return g;
}

DeconvBlock::DeconvBlock(std::size_t in, std::size_t fused, std::size_t in_h, std::size_t in_w,
                         std::size_t target_h, std::size_t target_w, double tau_init, Rng& rng)
    : refine_({in, fused, 1, 1, 0, 1}, tau_init, rng),
      bn_(fused),
      geometry_(solve_deconv_geometry(in_h, in_w, target_h, target_w)),
      up_(fused, fused, geometry_.kernel_h, geometry_.kernel_w, geometry_.opt, rng),
      plif_(tau_init),
      in_h_(in_h),
      in_w_(in_w) {}

ag::Tensor DeconvBlock::forward(const ag::Tensor& x, RunContext& ctx, const std::string& site) {
  if (x.rank() != 4 || x.dim(2) != in_h_ || x.dim(3) != in_w_) {
    throw ag::ShapeError("deconv block built for " + std::to_string(in_h_) + "x" +
                         std::to_string(in_w_) + ", got " + ag::to_string(x.shape()));
  }
  auto h = refine_.forward(x, ctx, site + ".refine");
  h = bn_.forward(h, ctx, site + ".bn");
  h = up_.forward(h, ctx, site + ".up");
  return plif_.forward(h, ctx, site + ".plif");
}

void DeconvBlock::visit(StateVisitor& v, const std::string& prefix) {
  refine_.visit(v, prefix + ".refine");
  bn_.visit(v, prefix + ".bn");
  up_.visit(v, prefix + ".up");
  plif_.visit(v, prefix + ".plif");
}

// ---- SPES ------------------------------------------------------------------------------

SpesVariant parse_spes_variant(const std::string& name) {
  if (name == "basic") return SpesVariant::basic;
  if (name == "res" || name == "res-enhanced") return SpesVariant::res_enhanced;
  if (name == "dense" || name == "dense-enhanced") return SpesVariant::dense_enhanced;
  throw std::invalid_argument("unknown SPES variant '" + name + "'");
}

std::string to_string(SpesVariant v) {
  switch (v) {
    case SpesVariant::basic: return "basic";
    case SpesVariant::res_enhanced: return "res";
    case SpesVariant::dense_enhanced: return "dense";
  }
  return "unknown";
}

Spes::Spes(const Spec& spec, double tau_init, Rng& rng) : spec_(spec) {
  if (spec.widths.empty()) throw std::invalid_argument("SPES needs at least one level");
  std::size_t prev = spec.in;
  for (std::size_t l = 0; l < spec.widths.size(); ++l) {
    const std::size_t w = spec.widths[l];
    std::unique_ptr<ConvBnPlif> down;
    if (l > 0) {
      down = std::make_unique<ConvBnPlif>(ConvBnPlif::Spec{prev, w, 3, 2, 1, 1}, tau_init, rng);
    }
    const std::size_t pw_in = l > 0 ? w : prev;
    Level level{std::move(down), ConvBnPlif({pw_in, w, 1, 1, 0, 1}, tau_init, rng), nullptr,
                nullptr, nullptr};
    if (spec.variant == SpesVariant::res_enhanced) {
      level.res = std::make_unique<SewResBlock>(w, tau_init, rng);
    } else if (spec.variant == SpesVariant::dense_enhanced) {
      level.dense = std::make_unique<DenseBlock>(w, spec.dense_layers, spec.dense_growth,
                                                 tau_init, rng);
      level.resqueeze = std::make_unique<ConvBnPlif>(
          ConvBnPlif::Spec{level.dense->out_channels(), w, 1, 1, 0, 1}, tau_init, rng);
    }
    levels_.push_back(std::move(level));
    prev = w;
  }
}

std::vector<ag::Tensor> Spes::forward(const ag::Tensor& fused, RunContext& ctx,
                                      const std::string& site) {
  std::vector<ag::Tensor> out;
  ag::Tensor h = fused;
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    auto& level = levels_[l];
    const std::string name = site + ".level" + std::to_string(l);
    if (level.down) h = level.down->forward(h, ctx, name + ".down");
    h = level.pointwise.forward(h, ctx, name + ".pointwise");
    if (level.res) h = level.res->forward(h, ctx, name + ".res");
    if (level.dense) {
      h = level.dense->forward(h, ctx, name + ".dense");
      h = level.resqueeze->forward(h, ctx, name + ".resqueeze");
    }
    out.push_back(h);
  }
  return out;
}

void Spes::visit(StateVisitor& v, const std::string& prefix) {
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    auto& level = levels_[l];
    const std::string name = prefix + ".level" + std::to_string(l);
    if (level.down) level.down->visit(v, name + ".down");
    level.pointwise.visit(v, name + ".pointwise");
    if (level.res) level.res->visit(v, name + ".res");
    if (level.dense) {
      level.dense->visit(v, name + ".dense");
      level.resqueeze->visit(v, name + ".resqueeze");
    }
  }
}

// ---- spiking fusion ------------------------------------------------------------------------

SpikingFusion::SpikingFusion(const Spec& spec, const std::vector<TapShape>& taps,
                             double tau_init, Rng& rng) {
  if (taps.empty()) throw std::invalid_argument("fusion needs at least one tap");
  const auto& target = taps.front();
  for (const auto& t : taps) {
    branches_.push_back(std::make_unique<DeconvBlock>(t.channels, spec.fused_channels, t.height,
                                                      t.width, target.height, target.width,
                                                      tau_init, rng));
  }
  Spes::Spec s = spec.spes;
  s.in = spec.fused_channels * taps.size();
  spes_ = std::make_unique<Spes>(s, tau_init, rng);
}

std::vector<ag::Tensor> SpikingFusion::transform(const std::vector<ag::Tensor>& taps,
                                                 RunContext& ctx, const std::string& site) {
  if (taps.size() != branches_.size()) {
    throw ag::ShapeError("fusion built for " + std::to_string(branches_.size()) + " taps, got " +
                         std::to_string(taps.size()));
  }
  std::vector<ag::Tensor> out;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    out.push_back(branches_[i]->forward(taps[i], ctx, site + ".branch" + std::to_string(i)));
  }
  return out;
}

ag::Tensor SpikingFusion::merge(const std::vector<ag::Tensor>& transformed, RunContext& ctx,
                                const std::string& site) {
  auto merged = ag::concat(transformed, 1);
  ctx.observe(site + ".concat", ActivationKind::spike, merged);
  return merged;
}

std::vector<ag::Tensor> SpikingFusion::regenerate(const ag::Tensor& merged, RunContext& ctx,
                                                  const std::string& site) {
  return spes_->forward(merged, ctx, site + ".spes");
}

std::vector<ag::Tensor> SpikingFusion::forward(const std::vector<ag::Tensor>& taps,
                                               RunContext& ctx, const std::string& site) {
  return regenerate(merge(transform(taps, ctx, site), ctx, site), ctx, site);
}

void SpikingFusion::visit(StateVisitor& v, const std::string& prefix) {
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    branches_[i]->visit(v, prefix + ".branch" + std::to_string(i));
  }
  spes_->visit(v, prefix + ".spes");
}

}  // namespace spikedet::snn

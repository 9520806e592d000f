#pragma once

// Spiking building blocks. Every block maps a time-major spike sequence to a
// time-major spike sequence and reports each output to the context probe.

#include <memory>

#include "spikedet/snn/core.hpp"

namespace spikedet::snn {

// BN -> conv -> [avg pool] -> PLIF.
class ConvBnPlif {
 public:
  struct Spec {
    std::size_t in = 0, out = 0;
    std::size_t kernel = 3, stride = 1, pad = 1;
    std::size_t pool = 1;  // average pool window applied before the neuron
  };

  ConvBnPlif(const Spec& spec, double tau_init, Rng& rng);
  ag::Tensor forward(const ag::Tensor& x, RunContext& ctx, const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);
  void reset() { plif_.reset(); }
  std::size_t out_channels() const { return spec_.out; }
  Conv2d& conv() { return conv_; }
  PlifLayer& plif() { return plif_; }

 private:
  Spec spec_;
  BatchNorm2d bn_;
  Conv2d conv_;
  PlifLayer plif_;
};

// Each inner 3x3 layer sees the concatenation of the block input and all
// earlier layer outputs; the block returns the full concatenation.
class DenseBlock {
 public:
  DenseBlock(std::size_t in, std::size_t layers, std::size_t growth, double tau_init, Rng& rng);
  ag::Tensor forward(const ag::Tensor& x, RunContext& ctx, const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);
  std::size_t out_channels() const { return out_; }

 private:
  std::vector<ConvBnPlif> layers_;
  std::size_t out_;
};

// ADD(body(x), x) with body = two 3x3 conv-bn-plif layers. Output values lie in
// {0, 1, 2} for binary input.
class SewResBlock {
 public:
  SewResBlock(std::size_t channels, double tau_init, Rng& rng);
  ag::Tensor forward(const ag::Tensor& x, RunContext& ctx, const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);

  ConvBnPlif& first() { return first_; }
  ConvBnPlif& second() { return second_; }
  // Output entries seen and entries above 1 since the last reset_counters().
  std::uint64_t entries() const { return entries_; }
  std::uint64_t non_binary() const { return non_binary_; }
  void reset_counters() { entries_ = non_binary_ = 0; }

 private:
  std::size_t channels_;
  ConvBnPlif first_, second_;
  std::uint64_t entries_ = 0, non_binary_ = 0;
};

// 1x1 squeeze then 3x3 stride-2 pad-1, which halves with ceil rounding.
class ExtraBlock {
 public:
  ExtraBlock(std::size_t in, std::size_t mid, std::size_t out, double tau_init, Rng& rng);
  ag::Tensor forward(const ag::Tensor& x, RunContext& ctx, const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);
  std::size_t out_channels() const { return down_.out_channels(); }

 private:
  ConvBnPlif squeeze_, down_;
};

struct DeconvGeometry {
  std::size_t kernel_h, kernel_w;
  ag::ConvTransposeOptions opt;
};

// Transposed-conv geometry mapping in_hw to exactly target_hw. Per axis the
// stride is floor(target / in) with kernel stride + 2, padding 1 and output
// padding target - in * stride when that is below the stride; otherwise the
// stride drops to 1 and the kernel absorbs the difference. Throws ShapeError
// when a target is smaller than the input.
DeconvGeometry solve_deconv_geometry(std::size_t in_h, std::size_t in_w,
                                     std::size_t target_h, std::size_t target_w);

// 1x1 conv-bn-plif to `fused` channels, then BN -> transposed conv -> PLIF to
// the target resolution.
class DeconvBlock {
 public:
  DeconvBlock(std::size_t in, std::size_t fused, std::size_t in_h, std::size_t in_w,
              std::size_t target_h, std::size_t target_w, double tau_init, Rng& rng);
  ag::Tensor forward(const ag::Tensor& x, RunContext& ctx, const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);
  const DeconvGeometry& geometry() const { return geometry_; }

 private:
  ConvBnPlif refine_;
  BatchNorm2d bn_;
  DeconvGeometry geometry_;
  ConvTranspose2d up_;
  PlifLayer plif_;
  std::size_t in_h_, in_w_;
};

enum class SpesVariant { basic, res_enhanced, dense_enhanced };

SpesVariant parse_spes_variant(const std::string& name);
std::string to_string(SpesVariant v);

// Pyramid regeneration. Level 0 is a 1x1 conv-bn-plif at the fused
// resolution; each further level first halves the previous level with a 3x3
// stride-2 conv-bn-plif. The enhancement (residual block, or dense block plus
// 1x1 re-squeeze) runs before the level is emitted.
class Spes {
 public:
  struct Spec {
    SpesVariant variant = SpesVariant::res_enhanced;
    std::size_t in = 0;
    std::vector<std::size_t> widths;  // one per level
    std::size_t dense_layers = 2, dense_growth = 8;
  };

  Spes(const Spec& spec, double tau_init, Rng& rng);
  std::vector<ag::Tensor> forward(const ag::Tensor& fused, RunContext& ctx,
                                  const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);
  const Spec& spec() const { return spec_; }

 private:
  struct Level {
    std::unique_ptr<ConvBnPlif> down;
    ConvBnPlif pointwise;
    std::unique_ptr<SewResBlock> res;
    std::unique_ptr<DenseBlock> dense;
    std::unique_ptr<ConvBnPlif> resqueeze;
  };
  Spec spec_;
  std::vector<Level> levels_;
};

struct TapShape {
  std::size_t channels, height, width;
};

// Deconv block per tap to the first tap's resolution, channel concatenation,
// then SPES.
class SpikingFusion {
 public:
  struct Spec {
    std::size_t fused_channels = 32;
    Spes::Spec spes;  // `in` is filled from the tap count
  };

  SpikingFusion(const Spec& spec, const std::vector<TapShape>& taps, double tau_init, Rng& rng);

  // Per-tap transforms (deconv blocks).
  std::vector<ag::Tensor> transform(const std::vector<ag::Tensor>& taps, RunContext& ctx,
                                    const std::string& site);
  // Channel concatenation of transformed taps; rejects mismatched shapes.
  ag::Tensor merge(const std::vector<ag::Tensor>& transformed, RunContext& ctx,
                   const std::string& site);
  std::vector<ag::Tensor> regenerate(const ag::Tensor& merged, RunContext& ctx,
                                     const std::string& site);
  // regenerate(merge(transform(taps))).
  std::vector<ag::Tensor> forward(const std::vector<ag::Tensor>& taps, RunContext& ctx,
                                  const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);

 private:
  std::vector<std::unique_ptr<DeconvBlock>> branches_;
  std::unique_ptr<Spes> spes_;
};

}  // namespace spikedet::snn

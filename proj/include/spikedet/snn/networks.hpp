#pragma once

// Network assembly: the dense spiking backbone, the classifier and the
// detector body with optional spiking fusion, plus network-wide state helpers.

#include <map>

#include "spikedet/snn/blocks.hpp"

namespace spikedet::snn {

struct ModelConfig {
  std::size_t in_channels = 4;  // 2n voxel channels
  std::size_t input_h = 64, input_w = 64;
  std::size_t stem_channels = 16;
  std::size_t growth = 8;
  std::vector<std::size_t> block_layers{2, 2, 2};
  double compression = 0.5;
  double tau_init = 2.0;
  std::uint64_t init_seed = 1;

  std::size_t classes = 2;

  // Detector body. fusion_layers = 0 feeds backbone taps straight to the head.
  std::size_t fusion_layers = 3;
  std::size_t fused_channels = 32;
  SpesVariant spes_variant = SpesVariant::res_enhanced;
  std::size_t pyramid_levels = 3;
  double spes_decay = 1.0;  // level l width = fused_channels * decay^l
  std::size_t spes_dense_layers = 2, spes_dense_growth = 8;
  std::size_t extra_channels = 32;

  // key=value lines; from_text() accepts exactly the keys to_text() writes.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  // Applies one key; returns false for unknown keys.
  bool set(const std::string& key, const std::string& value);
  void validate() const;
};

struct LayerSpikes {
  std::string name;
  std::uint64_t spikes = 0, slots = 0;
};

class Network {
 public:
  virtual ~Network() = default;
  virtual void visit(StateVisitor& v) = 0;
};

// Membranes to v_reset (lazily re-created), spike and residual counters zeroed.
void reset_state(Network& net);
// Membranes only; counters keep accumulating.
void reset_membranes(Network& net);
std::vector<LayerSpikes> spike_counters(Network& net);
// Totals over residual sites: {entries, entries above 1}.
std::pair<std::uint64_t, std::uint64_t> residual_counters(Network& net);
std::vector<std::pair<std::string, ag::Tensor>> parameters(Network& net);

// Stem (two stride-2 convs and a 2x2 max pool, /8), then dense stages joined by
// transitions (2x2 max pool of spikes, then 1x1 conv). One tap per dense stage.
class Backbone {
 public:
  Backbone(const ModelConfig& cfg, Rng& rng);
  std::vector<ag::Tensor> forward(const ag::Tensor& x, RunContext& ctx, const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);
  const std::vector<TapShape>& taps() const { return taps_; }

 private:
  ConvBnPlif stem0_, stem1_;
  std::vector<DenseBlock> stages_;
  std::vector<ConvBnPlif> transitions_;
  std::vector<TapShape> taps_;
};

struct ClassifierOutput {
  ag::Tensor spikes;    // [T * N, classes]
  ag::Tensor currents;  // input of the output neurons, [T * N, classes]
};

// Backbone, global average pool, linear layer and an output PLIF layer.
class SpikingClassifier : public Network {
 public:
  explicit SpikingClassifier(const ModelConfig& cfg);
  ClassifierOutput forward(const ag::Tensor& x, RunContext& ctx);
  void visit(StateVisitor& v) override;
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  Rng rng_;
  Backbone backbone_;
  Linear fc_;
  PlifLayer out_;
};

// Backbone taps, optional extra block and spiking fusion; emits the spike
// pyramid consumed by the detection head.
class DetectorBody : public Network {
 public:
  explicit DetectorBody(const ModelConfig& cfg);
  std::vector<ag::Tensor> forward(const ag::Tensor& x, RunContext& ctx);
  void visit(StateVisitor& v) override;
  void visit(StateVisitor& v, const std::string& prefix);
  const std::vector<TapShape>& pyramid() const { return pyramid_; }
  const std::vector<TapShape>& taps() const { return backbone_.taps(); }
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  Rng rng_;
  Backbone backbone_;
  std::vector<std::unique_ptr<ExtraBlock>> extras_;
  std::unique_ptr<SpikingFusion> fusion_;
  std::vector<TapShape> pyramid_;
};

}  // namespace spikedet::snn

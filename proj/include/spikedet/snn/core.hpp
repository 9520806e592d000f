#pragma once

// Stateful spiking layers and the plumbing shared by every block: the run
// context, activation probes, operation recording and state visitors.
//
// All sequence tensors are time-major: [T * N, C, H, W] where row t * N + i
// holds sample i at step t. Convolutions and batch norm treat the T * N rows as
// one batch; PLIF layers integrate along T.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "spikedet/autograd.hpp"

namespace spikedet::snn {

namespace ag = spikedet::ag;

using Rng = std::mt19937_64;

enum class ActivationKind {
  spike,    // values in {0, 1}
  sew_sum,  // residual ADD of two spike maps, values in {0, 1, 2}
  real,     // readout values (pooled or linear), not spikes
};

enum class OpKind { accumulate, multiply_accumulate };

// One layer's operation count for a single sample and time step.
struct OpRecord {
  std::string name;
  OpKind kind = OpKind::accumulate;
  ag::Shape output_shape;  // per sample, without the leading T * N axis
  double count = 0.0;
};

struct RunContext {
  std::size_t steps = 1;
  bool training = false;
  ag::SurrogateSpec surrogate{};
  // Called with every block output when set.
  std::function<void(const std::string& site, ActivationKind, const ag::Tensor&)> probe;
  // Appended to by every counted layer when set.
  std::vector<OpRecord>* ops = nullptr;

  void observe(const std::string& site, ActivationKind kind, const ag::Tensor& t) const {
    if (probe) probe(site, kind, t);
  }
  void record(const std::string& name, OpKind kind, const ag::Tensor& out, double total) const;
};

class PlifLayer;
class SewResBlock;

// Walks learnable tensors, batch-norm buffers and stateful units by name.
class StateVisitor {
 public:
  virtual ~StateVisitor() = default;
  virtual void param(const std::string& name, ag::Tensor& tensor) { (void)name, (void)tensor; }
  virtual void buffer(const std::string& name, ag::BatchNormState& state) { (void)name, (void)state; }
  virtual void neuron(const std::string& name, PlifLayer& layer) { (void)name, (void)layer; }
  virtual void residual(const std::string& name, SewResBlock& block) { (void)name, (void)block; }
};

// Kaiming normal with std sqrt(2 / fan_in).
ag::Tensor he_normal(ag::Shape shape, std::size_t fan_in, Rng& rng);

// Parametric LIF population with 1/tau = sigmoid(w) shared by the layer and a
// hard reset.
class PlifLayer {
 public:
  PlifLayer(double tau_init = 2.0, double v_threshold = 1.0, double v_reset = 0.0);

  // Multistep forward over a time-major sequence of ctx.steps steps. The
  // membrane carries over between calls until reset().
  ag::Tensor forward(const ag::Tensor& input, RunContext& ctx, const std::string& site);

  // One step for input [N, ...]. The membrane stays in the graph, so
  // successive steps backpropagate through time.
  ag::Tensor step(const ag::Tensor& input, const ag::SurrogateSpec& surrogate);

  void reset();
  void reset_counters();
  // Reports w as a parameter and the layer itself as a neuron.
  void visit(StateVisitor& v, const std::string& prefix);

  double tau() const;
  double v_threshold() const { return v_threshold_; }
  double v_reset() const { return v_reset_; }
  ag::Tensor& w() { return w_; }
  const ag::Tensor& membrane() const { return state_; }
  std::uint64_t spikes() const { return spikes_; }
  std::uint64_t slots() const { return slots_; }

 private:
  void check_state(const ag::Shape& step_shape);
  void count(const ag::Tensor& out);

  ag::Tensor w_;
  double v_threshold_, v_reset_;
  ag::Tensor state_;  // membrane of one step, [N, ...]
  std::uint64_t spikes_ = 0, slots_ = 0;
};

class BatchNorm2d {
 public:
  explicit BatchNorm2d(std::size_t channels);
  ag::Tensor forward(const ag::Tensor& x, RunContext& ctx, const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);
  std::size_t channels() const { return state_.running_mean.size(); }

 private:
  ag::Tensor gamma_, beta_;
  ag::BatchNormState state_;
};

class Conv2d {
 public:
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
         std::size_t pad, bool bias, OpKind kind, Rng& rng);
  ag::Tensor forward(const ag::Tensor& x, RunContext& ctx, const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);
  ag::Tensor& weight() { return weight_; }
  std::optional<ag::Tensor>& bias() { return bias_; }
  std::size_t out_channels() const { return weight_.dim(0); }

 private:
  ag::Tensor weight_;
  std::optional<ag::Tensor> bias_;
  ag::Conv2dOptions opt_;
  OpKind kind_;
};

class ConvTranspose2d {
 public:
  ConvTranspose2d(std::size_t in, std::size_t out, std::size_t kernel_h,
                  std::size_t kernel_w, const ag::ConvTransposeOptions& opt, Rng& rng);
  ag::Tensor forward(const ag::Tensor& x, RunContext& ctx, const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);
  ag::Tensor& weight() { return weight_; }

 private:
  ag::Tensor weight_;
  ag::ConvTransposeOptions opt_;
};

class Linear {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng);
  // input [rows, in]; counted as multiply-accumulates.
  ag::Tensor forward(const ag::Tensor& x, RunContext& ctx, const std::string& site);
  void visit(StateVisitor& v, const std::string& prefix);

 private:
  ag::Tensor weight_, bias_;
};

}  // namespace spikedet::snn

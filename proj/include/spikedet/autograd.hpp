#pragma once

// Minimal reverse-mode differentiation over dense float64 tensors.
//
// A Tensor is a shared handle to a graph node. Operations build new nodes that
// remember their inputs and a closure computing input gradients. backward()
// walks the graph once in reverse topological order and then releases it;
// leaf tensors (parameters) keep their accumulated gradients.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spikedet::ag {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Node;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  // Views borrow from the node; calling them on a temporary would dangle.
  std::span<const double> values() const&;
  std::span<const double> values() const&& = delete;
  // Writable view; only allowed on leaves (parameters, inputs).
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const&;
  std::span<const double> grad() const&& = delete;
  // Lazily allocated zero-initialized gradient buffer.
  std::span<double> grad_buffer() const;
  void zero_grad();

  // Same values, no history.
  Tensor detach() const;
  std::uint64_t id() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>,
                        std::function<void(std::span<const double>)>);
  friend void backward(const Tensor&);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

// Builds a result node. `grad_fn` receives the output gradient and must
// accumulate into the grad_buffer() of every input that requires grad. If no
// input requires grad the closure is dropped and the result is a constant.
Tensor make_op(Shape shape, std::vector<double> values,
               std::vector<Tensor> inputs,
               std::function<void(std::span<const double>)> grad_fn);

// Seeds d(loss)/d(loss) = 1 and propagates. The graph reachable from `loss`
// is consumed: a second call on it throws GraphError.
void backward(const Tensor& loss);

// ---- elementwise -----------------------------------------------------------
// Binary ops require equal shapes, or one operand with a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

// ---- reductions and shape --------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis);
Tensor mean_axis(const Tensor& a, std::size_t axis);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin,
             std::size_t end);

// ---- layers ----------------------------------------------------------------
struct Conv2dOptions {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;

  static Conv2dOptions uniform(std::size_t stride, std::size_t pad) {
    return {stride, stride, pad, pad};
  }
};

struct ConvTransposeOptions {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
  std::size_t out_pad_h = 0, out_pad_w = 0;
};

std::size_t conv_out_size(std::size_t in, std::size_t kernel,
                          std::size_t stride, std::size_t pad);
std::size_t conv_transpose_out_size(std::size_t in, std::size_t kernel,
                                    std::size_t stride, std::size_t pad,
                                    std::size_t out_pad);

// input [N, Cin, H, W], weight [Cout, Cin, kh, kw], bias [Cout].
Tensor conv2d(const Tensor& input, const Tensor& weight,
              const std::optional<Tensor>& bias, const Conv2dOptions& opt);
// input [N, Cin, H, W], weight [Cin, Cout, kh, kw], bias [Cout].
// Forward equals the input-gradient map of conv2d with the same weight.
Tensor conv_transpose2d(const Tensor& input, const Tensor& weight,
                        const std::optional<Tensor>& bias,
                        const ConvTransposeOptions& opt);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  bool seen_batch = false;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

struct BatchNormOptions {
  bool training = true;
  double epsilon = 1e-5;
  // running <- momentum * running + (1 - momentum) * batch
  double momentum = 0.9;
};

// Normalizes over every axis except axis 1 (channels).
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, const BatchNormOptions& opt);

// input [N, in], weight [out, in], bias [out].
Tensor linear(const Tensor& input, const Tensor& weight,
              const std::optional<Tensor>& bias);
// Floor-mode pooling over [N, C, H, W].
Tensor avg_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride);
Tensor max_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride);
Tensor softmax(const Tensor& input, std::size_t axis);
Tensor log_softmax(const Tensor& input, std::size_t axis);

// ---- spiking ---------------------------------------------------------------
// Heaviside forward, arctangent-shaped surrogate backward.
struct SurrogateSpec {
  double alpha = 2.0;
  // Gradient-check mode: forward returns the smooth arctangent primitive whose
  // derivative is the surrogate, so finite differences see the same function
  // the backward pass differentiates.
  bool smooth_forward = false;
};

double surrogate_derivative(double x, double alpha);
double surrogate_primitive(double x, double alpha);

Tensor spike(const Tensor& membrane_minus_threshold, const SurrogateSpec& sg);

struct PlifParams {
  double v_threshold = 1.0;
  double v_reset = 0.0;
  SurrogateSpec surrogate{};
};

// Runs a parametric LIF neuron population over `steps` time steps.
// `input` is time-major [steps * M, ...]; `w` is a one-element tensor with
// 1/tau = sigmoid(w). `membrane` holds M values: read as the initial potential
// and overwritten with the final one. Charge, fire and hard reset per step:
//   H = V + sigmoid(w) * (X - (V - v_reset)),  S = spike(H - v_th),
//   V = H * (1 - S) + v_reset * S.
Tensor plif_multistep(const Tensor& input, const Tensor& w, std::size_t steps,
                      std::vector<double>& membrane, const PlifParams& params);

}  // namespace spikedet::ag

#include "spikedet/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace spikedet::ag {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(std::span<const double>)> grad_fn;
};

namespace {

std::uint64_t next_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> values,
                               bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->id = next_id();
  return node;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(ag::numel(shape), value);
  return Tensor(new_node(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     to_string(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::values() const& { return node_->value; }

std::span<double> Tensor::mutable_values() {
  if (!node_->leaf) throw GraphError("cannot mutate a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (node_->value.size() != 1) {
    throw ShapeError("item() on tensor of shape " + to_string(node_->shape));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->leaf; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const& { return node_->grad; }

std::span<double> Tensor::grad_buffer() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  return Tensor(new_node(node_->shape, node_->value, false));
}

std::uint64_t Tensor::id() const { return node_->id; }

Tensor make_op(Shape shape, std::vector<double> values,
               std::vector<Tensor> inputs,
               std::function<void(std::span<const double>)> grad_fn) {
  bool any = false;
  for (const auto& in : inputs) {
    if (in.node_->consumed) {
      throw GraphError("input belongs to a graph that was already consumed");
    }
    any = any || in.node_->requires_grad;
  }
  auto node = new_node(std::move(shape), std::move(values), any);
  node->leaf = false;
  if (any) {
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_);
    node->grad_fn = std::move(grad_fn);
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  Node* root = loss.node_.get();
  if (root == nullptr) throw GraphError("backward on undefined tensor");
  if (root->value.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " +
                     to_string(root->shape));
  }
  if (root->consumed) throw GraphError("graph already consumed by backward");
  if (!root->requires_grad) return;

  // Iterative post-order DFS yields a topological order (inputs first).
  // Owning references: releasing a node's inputs must not free nodes that are
  // still waiting in the order.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(loss.node_, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto child = node->inputs[next++];
      if (child->requires_grad && !seen.count(child.get())) {
        seen.insert(child.get());
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  if (root->grad.empty()) root->grad.assign(1, 0.0);
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = it->get();
    if (node->leaf) continue;
    if (node->grad_fn && !node->grad.empty()) node->grad_fn(node->grad);
    node->grad_fn = nullptr;
    node->inputs.clear();
    node->consumed = true;
  }
  root->consumed = true;
}

// ---- elementwise -----------------------------------------------------------

namespace {

void check_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape() || a.numel() == 1 || b.numel() == 1) return;
  throw ShapeError(std::string(op) + ": incompatible shapes " +
                   to_string(a.shape()) + " and " + to_string(b.shape()));
}

// Accumulates a per-output gradient into an operand that may be broadcast.
void accumulate(const Tensor& t, std::span<const double> g, std::size_t n,
                const std::function<double(std::size_t)>& local) {
  if (!t.requires_grad()) return;
  auto buf = t.grad_buffer();
  if (buf.size() == 1 && n != 1) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += g[i] * local(i);
    buf[0] += s;
  } else {
    for (std::size_t i = 0; i < n; ++i) buf[i] += g[i] * local(i);
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "add");
  const Shape shape = a.numel() >= b.numel() ? a.shape() : b.shape();
  const std::size_t n = numel(shape);
  std::vector<double> out(n);
  auto av = a.values(), bv = b.values();
  const bool ab = av.size() == 1, bb = bv.size() == 1;
  for (std::size_t i = 0; i < n; ++i) out[i] = av[ab ? 0 : i] + bv[bb ? 0 : i];
  return make_op(shape, std::move(out), {a, b},
                 [a, b, n](std::span<const double> g) mutable {
                   accumulate(a, g, n, [](std::size_t) { return 1.0; });
                   accumulate(b, g, n, [](std::size_t) { return 1.0; });
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "sub");
  const Shape shape = a.numel() >= b.numel() ? a.shape() : b.shape();
  const std::size_t n = numel(shape);
  std::vector<double> out(n);
  auto av = a.values(), bv = b.values();
  const bool ab = av.size() == 1, bb = bv.size() == 1;
  for (std::size_t i = 0; i < n; ++i) out[i] = av[ab ? 0 : i] - bv[bb ? 0 : i];
  return make_op(shape, std::move(out), {a, b},
                 [a, b, n](std::span<const double> g) mutable {
                   accumulate(a, g, n, [](std::size_t) { return 1.0; });
                   accumulate(b, g, n, [](std::size_t) { return -1.0; });
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "mul");
  const Shape shape = a.numel() >= b.numel() ? a.shape() : b.shape();
  const std::size_t n = numel(shape);
  std::vector<double> out(n);
  auto av = a.values(), bv = b.values();
  const bool ab = av.size() == 1, bb = bv.size() == 1;
  for (std::size_t i = 0; i < n; ++i) out[i] = av[ab ? 0 : i] * bv[bb ? 0 : i];
  return make_op(shape, std::move(out), {a, b},
                 [a, b, n, ab, bb](std::span<const double> g) mutable {
                   auto av = a.values(), bv = b.values();
                   accumulate(a, g, n,
                              [&](std::size_t i) { return bv[bb ? 0 : i]; });
                   accumulate(b, g, n,
                              [&](std::size_t i) { return av[ab ? 0 : i]; });
                 });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return make_op(a.shape(), std::move(out), {a},
                 [a, factor](std::span<const double> g) mutable {
                   auto buf = a.grad_buffer();
                   for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * factor;
                 });
}

Tensor add_scalar(const Tensor& a, double offset) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v += offset;
  return make_op(a.shape(), std::move(out), {a},
                 [a](std::span<const double> g) mutable {
                   auto buf = a.grad_buffer();
                   for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
                 });
}

namespace {

// Elementwise op with derivative expressed from (input, output).
template <typename F, typename D>
Tensor pointwise(const Tensor& a, F f, D d) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  auto result_values = out;
  return make_op(a.shape(), std::move(out), {a},
                 [a, y = std::move(result_values), d](std::span<const double> g) mutable {
                   auto av = a.values();
                   auto buf = a.grad_buffer();
                   for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * d(av[i], y[i]);
                 });
}

}  // namespace

Tensor square(const Tensor& a) {
  return pointwise(a, [](double x) { return x * x; },
                   [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return pointwise(a, [](double x) { return x > 0.0 ? x : 0.0; },
                   [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return pointwise(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return pointwise(a, [](double x) { return std::exp(x); },
                   [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return pointwise(a, [](double x) { return std::log(x); },
                   [](double x, double) { return 1.0 / x; });
}

}  // namespace spikedet::ag

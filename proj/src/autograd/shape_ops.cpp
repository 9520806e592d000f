#include "spikedet/autograd.hpp"

#include <numeric>

namespace spikedet::ag {

namespace {

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op({1}, {s}, {a}, [a](std::span<const double> g) mutable {
    for (auto& x : a.grad_buffer()) x += g[0];
  });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  const auto s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(s.outer * s.inner, 0.0);
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e) {
      const double* src = av.data() + (o * s.extent + e) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  return make_op(std::move(out_shape), std::move(out), {a},
                 [a, s](std::span<const double> g) mutable {
                   auto buf = a.grad_buffer();
                   for (std::size_t o = 0; o < s.outer; ++o)
                     for (std::size_t e = 0; e < s.extent; ++e) {
                       double* dst = buf.data() + (o * s.extent + e) * s.inner;
                       const double* src = g.data() + o * s.inner;
                       for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
                     }
                 });
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " +
                     to_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_op(std::move(shape), std::move(out), {a},
                 [a](std::span<const double> g) mutable {
                   auto buf = a.grad_buffer();
                   for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
                 });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  if (order.size() != r) throw ShapeError("permute: order rank mismatch");
  std::vector<bool> used(r, false);
  for (auto o : order) {
    if (o >= r || used[o]) throw ShapeError("permute: invalid axis order");
    used[o] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[order[i]];

  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  // Source offset of each output element, walked with an odometer.
  const std::size_t n = a.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[order[i]];
    src[k] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(n);
  auto av = a.values();
  for (std::size_t k = 0; k < n; ++k) out[k] = av[src[k]];
  return make_op(std::move(out_shape), std::move(out), {a},
                 [a, src = std::move(src)](std::span<const double> g) mutable {
                   auto buf = a.grad_buffer();
                   for (std::size_t k = 0; k < src.size(); ++k) buf[src[k]] += g[k];
                 });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != ref[i]) {
        throw ShapeError("concat: shape mismatch " + to_string(s) + " vs " +
                         to_string(ref));
      }
    }
    out_shape[axis] += s[axis];
  }
  const auto split = split_at(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t ext = p.dim(axis);
    auto pv = p.values();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(pv.data() + o * ext * split.inner, ext * split.inner,
                  out.data() + (o * split.extent + offset) * split.inner);
    }
    offset += ext;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op(std::move(out_shape), std::move(out), inputs,
                 [inputs, offsets, split, axis](std::span<const double> g) mutable {
                   for (std::size_t k = 0; k < inputs.size(); ++k) {
                     auto& p = inputs[k];
                     if (!p.requires_grad()) continue;
                     const std::size_t ext = p.dim(axis);
                     auto buf = p.grad_buffer();
                     for (std::size_t o = 0; o < split.outer; ++o) {
                       const double* src =
                           g.data() + (o * split.extent + offsets[k]) * split.inner;
                       double* dst = buf.data() + o * ext * split.inner;
                       for (std::size_t i = 0; i < ext * split.inner; ++i) dst[i] += src[i];
                     }
                   }
                 });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin,
             std::size_t end) {
  const auto s = split_at(a.shape(), axis);
  if (begin > end || end > s.extent) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") out of range for " +
                     to_string(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t ext = end - begin;
  std::vector<double> out(s.outer * ext * s.inner);
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(av.data() + (o * s.extent + begin) * s.inner, ext * s.inner,
                out.data() + o * ext * s.inner);
  }
  return make_op(std::move(out_shape), std::move(out), {a},
                 [a, s, begin, ext](std::span<const double> g) mutable {
                   auto buf = a.grad_buffer();
                   for (std::size_t o = 0; o < s.outer; ++o) {
                     double* dst = buf.data() + (o * s.extent + begin) * s.inner;
                     const double* src = g.data() + o * ext * s.inner;
                     for (std::size_t i = 0; i < ext * s.inner; ++i) dst[i] += src[i];
                   }
                 });
}

}  // namespace spikedet::ag

#include "spikedet/autograd.hpp"

#include <Eigen/Core>

namespace spikedet::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct Geometry {
  std::size_t channels, height, width;   // image side
  std::size_t kh, kw;
  std::size_t sh, sw, ph, pw;
  std::size_t out_h, out_w;               // column side
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

// cols[(c*kh + i)*kw + j][oy*out_w + ox] = img[c][oy*sh + i - ph][ox*sw + j - pw]
void im2col(const double* img, const Geometry& g, double* cols) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
        const double* plane = img + c * g.height * g.width;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.sh + i) -
                                   static_cast<std::ptrdiff_t>(g.ph);
          double* dst = row + oy * g.out_w;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill_n(dst, g.out_w, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(y) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.sw + j) -
                                     static_cast<std::ptrdiff_t>(g.pw);
            dst[ox] = (x < 0 || x >= static_cast<std::ptrdiff_t>(g.width))
                          ? 0.0
                          : src[x];
          }
        }
      }
}

// Adjoint of im2col: scatters-adds columns back into the image.
void col2im(const double* cols, const Geometry& g, double* img) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
        double* plane = img + c * g.height * g.width;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.sh + i) -
                                   static_cast<std::ptrdiff_t>(g.ph);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* dst = plane + static_cast<std::size_t>(y) * g.width;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.sw + j) -
                                     static_cast<std::ptrdiff_t>(g.pw);
            if (x >= 0 && x < static_cast<std::ptrdiff_t>(g.width)) dst[x] += src[ox];
          }
        }
      }
}

bool is_pointwise(const Geometry& g) {
  return g.kh == 1 && g.kw == 1 && g.sh == 1 && g.sw == 1 && g.ph == 0 && g.pw == 0;
}

void check_rank4(const Tensor& t, const char* what) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(what) + " must be rank 4, got " +
                     to_string(t.shape()));
  }
}

}  // namespace

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t pad) {
  if (stride == 0) throw ShapeError("stride must be positive");
  if (in + 2 * pad < kernel) {
    throw ShapeError("kernel " + std::to_string(kernel) +
                     " larger than padded input " + std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

std::size_t conv_transpose_out_size(std::size_t in, std::size_t kernel,
                                    std::size_t stride, std::size_t pad,
                                    std::size_t out_pad) {
  if (stride == 0) throw ShapeError("stride must be positive");
  if (out_pad >= stride) throw ShapeError("output padding must be below stride");
  const std::size_t full = (in - 1) * stride + kernel + out_pad;
  if (full < 2 * pad + 1) throw ShapeError("transposed conv output would be empty");
  return full - 2 * pad;
}

Tensor conv2d(const Tensor& input, const Tensor& weight,
              const std::optional<Tensor>& bias, const Conv2dOptions& opt) {
  check_rank4(input, "conv2d input");
  check_rank4(weight, "conv2d weight");
  const std::size_t n = input.dim(0), cin = input.dim(1);
  const std::size_t cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d: input channels " + std::to_string(cin) +
                     " vs weight " + to_string(weight.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw ShapeError("conv2d: bias shape " + to_string(bias->shape()));
  }
  Geometry g{cin, input.dim(2), input.dim(3), weight.dim(2), weight.dim(3),
             opt.stride_h, opt.stride_w, opt.pad_h, opt.pad_w, 0, 0};
  g.out_h = conv_out_size(g.height, g.kh, g.sh, g.ph);
  g.out_w = conv_out_size(g.width, g.kw, g.sw, g.pw);

  const std::size_t k = g.rows(), p = g.cols();
  const std::size_t in_stride = cin * g.height * g.width;
  std::vector<double> out(n * cout * p);
  std::vector<double> cols(is_pointwise(g) ? 0 : k * p);
  ConstMapMat wm(weight.values().data(), static_cast<Eigen::Index>(cout),
                 static_cast<Eigen::Index>(k));
  for (std::size_t s = 0; s < n; ++s) {
    const double* src = input.values().data() + s * in_stride;
    if (!is_pointwise(g)) {
      im2col(src, g, cols.data());
      src = cols.data();
    }
    MapMat om(out.data() + s * cout * p, static_cast<Eigen::Index>(cout),
              static_cast<Eigen::Index>(p));
    om.noalias() = wm * ConstMapMat(src, static_cast<Eigen::Index>(k),
                                    static_cast<Eigen::Index>(p));
    if (bias) {
      auto bv = bias->values();
      for (std::size_t c = 0; c < cout; ++c) om.row(static_cast<Eigen::Index>(c)).array() += bv[c];
    }
  }

  std::vector<Tensor> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return make_op(
      {n, cout, g.out_h, g.out_w}, std::move(out), inputs,
      [input, weight, bias, g, n, cout](std::span<const double> grad) mutable {
        const std::size_t k = g.rows(), p = g.cols();
        const std::size_t in_stride = g.channels * g.height * g.width;
        const auto ki = static_cast<Eigen::Index>(k), pi = static_cast<Eigen::Index>(p),
                   ci = static_cast<Eigen::Index>(cout);
        std::vector<double> cols(k * p);
        const bool need_x = input.requires_grad();
        const bool need_w = weight.requires_grad();
        ConstMapMat wm(weight.values().data(), ci, ki);
        for (std::size_t s = 0; s < n; ++s) {
          ConstMapMat gm(grad.data() + s * cout * p, ci, pi);
          if (need_w) {
            const double* src = input.values().data() + s * in_stride;
            if (!is_pointwise(g)) {
              im2col(src, g, cols.data());
              src = cols.data();
            }
            MapMat dw(weight.grad_buffer().data(), ci, ki);
            dw.noalias() += gm * ConstMapMat(src, ki, pi).transpose();
          }
          if (need_x) {
            double* dx = input.grad_buffer().data() + s * in_stride;
            if (is_pointwise(g)) {
              MapMat(dx, ki, pi).noalias() += wm.transpose() * gm;
            } else {
              MapMat(cols.data(), ki, pi).noalias() = wm.transpose() * gm;
              col2im(cols.data(), g, dx);
            }
          }
          if (bias && bias->requires_grad()) {
            auto db = bias->grad_buffer();
            for (std::size_t c = 0; c < cout; ++c) db[c] += gm.row(static_cast<Eigen::Index>(c)).sum();
          }
        }
      });
}

Tensor conv_transpose2d(const Tensor& input, const Tensor& weight,
                        const std::optional<Tensor>& bias,
                        const ConvTransposeOptions& opt) {
  check_rank4(input, "conv_transpose2d input");
  check_rank4(weight, "conv_transpose2d weight");
  const std::size_t n = input.dim(0), cin = input.dim(1);
  if (weight.dim(0) != cin) {
    throw ShapeError("conv_transpose2d: input channels " + std::to_string(cin) +
                     " vs weight " + to_string(weight.shape()));
  }
  const std::size_t cout = weight.dim(1);
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw ShapeError("conv_transpose2d: bias shape " + to_string(bias->shape()));
  }
  const std::size_t kh = weight.dim(2), kw = weight.dim(3);
  const std::size_t oh = conv_transpose_out_size(input.dim(2), kh, opt.stride_h,
                                                 opt.pad_h, opt.out_pad_h);
  const std::size_t ow = conv_transpose_out_size(input.dim(3), kw, opt.stride_w,
                                                 opt.pad_w, opt.out_pad_w);
  // Image side is the (larger) output; column side is the input grid.
  Geometry g{cout, oh, ow, kh, kw, opt.stride_h, opt.stride_w, opt.pad_h, opt.pad_w,
             input.dim(2), input.dim(3)};
  const std::size_t k = g.rows(), p = g.cols();
  const auto ki = static_cast<Eigen::Index>(k), pi = static_cast<Eigen::Index>(p),
             ci = static_cast<Eigen::Index>(cin);
  std::vector<double> out(n * cout * oh * ow, 0.0);
  std::vector<double> cols(k * p);
  ConstMapMat wm(weight.values().data(), ci, ki);
  for (std::size_t s = 0; s < n; ++s) {
    ConstMapMat xm(input.values().data() + s * cin * p, ci, pi);
    MapMat(cols.data(), ki, pi).noalias() = wm.transpose() * xm;
    double* dst = out.data() + s * cout * oh * ow;
    col2im(cols.data(), g, dst);
    if (bias) {
      auto bv = bias->values();
      for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t i = 0; i < oh * ow; ++i) dst[c * oh * ow + i] += bv[c];
    }
  }

  std::vector<Tensor> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return make_op(
      {n, cout, oh, ow}, std::move(out), inputs,
      [input, weight, bias, g, n, cin, cout](std::span<const double> grad) mutable {
        const std::size_t k = g.rows(), p = g.cols();
        const std::size_t plane = g.height * g.width;
        const auto ki = static_cast<Eigen::Index>(k), pi = static_cast<Eigen::Index>(p),
                   ci = static_cast<Eigen::Index>(cin);
        std::vector<double> cols(k * p);
        ConstMapMat wm(weight.values().data(), ci, ki);
        for (std::size_t s = 0; s < n; ++s) {
          const double* gs = grad.data() + s * cout * plane;
          im2col(gs, g, cols.data());
          ConstMapMat gc(cols.data(), ki, pi);
          if (input.requires_grad()) {
            MapMat dx(input.grad_buffer().data() + s * cin * p, ci, pi);
            dx.noalias() += wm * gc;
          }
          if (weight.requires_grad()) {
            ConstMapMat xm(input.values().data() + s * cin * p, ci, pi);
            MapMat dw(weight.grad_buffer().data(), ci, ki);
            dw.noalias() += xm * gc.transpose();
          }
          if (bias && bias->requires_grad()) {
            auto db = bias->grad_buffer();
            for (std::size_t c = 0; c < cout; ++c) {
              double acc = 0.0;
              for (std::size_t i = 0; i < plane; ++i) acc += gs[c * plane + i];
              db[c] += acc;
            }
          }
        }
      });
}

}  // namespace spikedet::ag

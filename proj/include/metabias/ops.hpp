#pragma once

// Composite operations built from the tape primitives. Because every rule
// below is a composition of differentiable primitives, first- and
// second-order gradients come out of the tape with no extra code.

#include <span>
#include <vector>

#include "metabias/tensor.hpp"

namespace metabias {

inline constexpr double kNormEps = 1e-5;

inline Tensor mean_all(const Tensor& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// x[B,in] * w[in,out] + b[out]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return add(y, expand_leading(b, y.dim(0)));
}

// Row-wise max as plain data; subtracting it is the usual stabilizer and
// has no effect on the value or the gradient of softmax/logsumexp.
namespace detail {

inline Tensor row_max_const(const Tensor& x) {
  int64_t k = x.dim(x.rank() - 1), m = x.numel() / k;
  std::vector<double> out(static_cast<size_t>(m));
  const double* p = x.data().data();
  for (int64_t i = 0; i < m; ++i) {
    double mx = p[i * k];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, p[i * k + j]);
    out[static_cast<size_t>(i)] = mx;
  }
  Shape s(x.shape().begin(), x.shape().end() - 1);
  return Tensor(std::move(s), std::move(out));
}

}  // namespace detail

// Softmax over the last axis.
inline Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("softmax: rank-0 input");
  int64_t k = x.dim(x.rank() - 1);
  Tensor z = sub(x, broadcast_last(detail::row_max_const(x), k));
  Tensor e = exp(z);
  Tensor denom = pow_scalar(sum_last(e), -1.0);
  return mul(e, broadcast_last(denom, k));
}

// log(sum(exp(x))) over the last axis.
inline Tensor logsumexp(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("logsumexp: rank-0 input");
  int64_t k = x.dim(x.rank() - 1);
  Tensor m = detail::row_max_const(x);
  Tensor z = sub(x, broadcast_last(m, k));
  return add(log(sum_last(exp(z))), m);
}

// Standardize over the last axis, then scale and shift.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta, double eps = kNormEps) {
  int64_t k = x.dim(x.rank() - 1);
  if (gamma.numel() != k || beta.numel() != k)
    throw ShapeError("layernorm: gamma/beta of size " +
                     std::to_string(gamma.numel()) + " for feature dim " +
                     std::to_string(k));
  Tensor mean = mul_scalar(sum_last(x), 1.0 / static_cast<double>(k));
  Tensor xc = sub(x, broadcast_last(mean, k));
  Tensor var = mul_scalar(sum_last(mul(xc, xc)), 1.0 / static_cast<double>(k));
  Tensor inv = pow_scalar(add_scalar(var, eps), -0.5);
  Tensor xhat = mul(xc, broadcast_last(inv, k));
  int64_t rows = x.numel() / k;
  Tensor g2 = reshape(expand_leading(reshape(gamma, Shape{k}), rows), x.shape());
  Tensor b2 = reshape(expand_leading(reshape(beta, Shape{k}), rows), x.shape());
  return add(mul(xhat, g2), b2);
}

enum class StatsMode { BatchStats };  // batch statistics, transductive

// Per-feature standardization of x[B,F] using batch statistics; the
// statistics stay inside the differentiated graph.
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta,
                        StatsMode mode = StatsMode::BatchStats,
                        double eps = kNormEps) {
  (void)mode;
  if (x.rank() != 2)
    throw ShapeError("batchnorm: expected [B,F], got " + shape_str(x.shape()));
  int64_t b = x.dim(0), f = x.dim(1);
  if (b < 2)
    throw NumericError("batchnorm: batch statistics are degenerate for B=" +
                       std::to_string(b));
  if (gamma.numel() != f || beta.numel() != f)
    throw ShapeError("batchnorm: gamma/beta of size " +
                     std::to_string(gamma.numel()) + " for feature dim " +
                     std::to_string(f));
  Tensor mean = mul_scalar(sum_leading(x), 1.0 / static_cast<double>(b));
  Tensor xc = sub(x, expand_leading(mean, b));
  Tensor var =
      mul_scalar(sum_leading(mul(xc, xc)), 1.0 / static_cast<double>(b));
  Tensor inv = pow_scalar(add_scalar(var, eps), -0.5);
  Tensor xhat = mul(xc, expand_leading(inv, b));
  Tensor g2 = expand_leading(reshape(gamma, Shape{f}), b);
  Tensor b2 = expand_leading(reshape(beta, Shape{f}), b);
  return add(mul(xhat, g2), b2);
}

// Channelwise batchnorm on feature maps [B,C,H,W].
inline Tensor batchnorm_nchw(const Tensor& x, const Tensor& gamma,
                             const Tensor& beta, double eps = kNormEps) {
  if (x.rank() != 4)
    throw ShapeError("batchnorm_nchw: expected [B,C,H,W], got " +
                     shape_str(x.shape()));
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor flat = reshape(permute(x, {0, 2, 3, 1}), Shape{b * h * w, c});
  Tensor y = batchnorm(flat, gamma, beta, StatsMode::BatchStats, eps);
  return permute(reshape(y, Shape{b, h, w, c}), {0, 3, 1, 2});
}

// 3x3 convolution, stride 1, zero padding 1 (spatial dims preserved).
// kernels[Cout,Cin,3,3], bias[Cout].
inline Tensor conv2d(const Tensor& x, const Tensor& kernels,
                     const Tensor& bias) {
  if (x.rank() != 4)
    throw ShapeError("conv2d: expected input [B,C,H,W], got " +
                     shape_str(x.shape()));
  if (kernels.rank() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3)
    throw ShapeError("conv2d: expected kernels [Cout,Cin,3,3], got " +
                     shape_str(kernels.shape()));
  if (kernels.dim(1) != x.dim(1))
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) +
                     " do not match kernel channels " +
                     std::to_string(kernels.dim(1)));
  if (bias.numel() != kernels.dim(0))
    throw ShapeError("conv2d: bias size " + std::to_string(bias.numel()) +
                     " does not match output channels " +
                     std::to_string(kernels.dim(0)));
  int64_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  int64_t cin = x.dim(1), cout = kernels.dim(0);
  Tensor cols = im2col3x3(x);                                   // [BHW, Cin*9]
  Tensor kmat = transpose2d(reshape(kernels, Shape{cout, cin * 9}));
  Tensor y = matmul(cols, kmat);                                // [BHW, Cout]
  y = add(y, expand_leading(reshape(bias, Shape{cout}), b * h * w));
  return permute(reshape(y, Shape{b, h, w, cout}), {0, 3, 1, 2});
}

// 2x2 average pooling with stride 2; odd extents are zero-padded to even,
// and every window contributes 1/4 per cell.
inline Tensor avgpool2d(const Tensor& x) {
  if (x.rank() != 4)
    throw ShapeError("avgpool2d: expected [B,C,H,W], got " +
                     shape_str(x.shape()));
  Tensor v = x;
  int64_t b = v.dim(0), c = v.dim(1), h = v.dim(2), w = v.dim(3);
  if (h % 2 == 1) {
    Tensor pad = Tensor::zeros(Shape{b, c, 1, w});
    std::vector<Tensor> parts{v, pad};
    v = concat(parts, 2);
    h += 1;
  }
  if (w % 2 == 1) {
    Tensor pad = Tensor::zeros(Shape{b, c, h, 1});
    std::vector<Tensor> parts{v, pad};
    v = concat(parts, 3);
    w += 1;
  }
  Tensor grid = reshape(v, Shape{b, c, h / 2, 2, w / 2, 2});
  Tensor windows = reshape(permute(grid, {0, 1, 2, 4, 3, 5}),
                           Shape{b, c, h / 2, w / 2, 4});
  return mul_scalar(sum_last(windows), 0.25);
}

// Mean of squared differences over all elements.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  detail::check_same_shape("mse_loss", pred, target);
  Tensor d = sub(pred, target);
  return mean_all(mul(d, d));
}

// Mean negative log-softmax of the true class. logits[B,K].
inline Tensor cross_entropy_loss(const Tensor& logits,
                                 std::span<const int> labels) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy_loss: expected [B,K] logits, got " +
                     shape_str(logits.shape()));
  int64_t b = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != b)
    throw ShapeError("cross_entropy_loss: " + std::to_string(labels.size()) +
                     " labels for batch " + std::to_string(b));
  std::vector<double> onehot(static_cast<size_t>(b * k), 0.0);
  for (int64_t i = 0; i < b; ++i) {
    int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= k)
      throw ConfigError("cross_entropy_loss: label " + std::to_string(y) +
                        " out of range [0," + std::to_string(k) + ")");
    onehot[static_cast<size_t>(i * k + y)] = 1.0;
  }
  Tensor mask(Shape{b, k}, std::move(onehot));
  Tensor lse = logsumexp(logits);                 // [B]
  Tensor picked = sum_last(mul(logits, mask));    // [B]
  return mean_all(sub(lse, picked));
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  int64_t b = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(b));
  const double* p = logits.data().data();
  for (int64_t i = 0; i < b; ++i) {
    int best = 0;
    for (int64_t j = 1; j < k; ++j)
      if (p[i * k + j] > p[i * k + best]) best = static_cast<int>(j);
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

}  // namespace metabias

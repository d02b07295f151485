#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace protoshap {

// Dense row-major tensor of doubles, order <= 4.
// Spatial data uses the layout height x width x channels; conv kernels use
// kh x kw x in_channels x out_channels.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;

  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::size_t>(numel()) != data.size())
      throw std::invalid_argument("tensor: shape " + shape_string() + " does not match " +
                                  std::to_string(data.size()) + " values");
    validate_shape();
  }

  static Tensor zeros(std::vector<int> s) {
    Tensor t;
    t.shape = std::move(s);
    t.validate_shape();
    t.data.assign(static_cast<std::size_t>(t.numel()), 0.0);
    return t;
  }

  static Tensor full(std::vector<int> s, double value) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
  }

  long long numel() const {
    long long n = 1;
    for (int e : shape) n *= e;
    return shape.empty() ? static_cast<long long>(data.size()) : n;
  }

  int order() const { return static_cast<int>(shape.size()); }

  int extent(int axis) const { return shape.at(static_cast<std::size_t>(axis)); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // 3-d access, layout row x col x channel.
  double& at(int i, int j, int c) {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + c)];
  }
  double at(int i, int j, int c) const {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + c)];
  }

  // 4-d access, layout kh x kw x cin x cout.
  double& at4(int a, int b, int c, int d) {
    return data[static_cast<std::size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
  }
  double at4(int a, int b, int c, int d) const {
    return data[static_cast<std::size_t>(((a * shape[1] + b) * shape[2] + c) * shape[3] + d)];
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << 'x';
      os << shape[i];
    }
    os << ']';
    return os.str();
  }

 private:
  void validate_shape() const {
    if (shape.empty() || shape.size() > 4)
      throw std::invalid_argument("tensor: order must be 1..4, got " +
                                  std::to_string(shape.size()));
    for (int e : shape)
      if (e < 1) throw std::invalid_argument("tensor: nonpositive extent in " + shape_string());
  }
};

inline bool all_finite(const Tensor& t) {
  for (double v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

// Flat 1-d view of the same data.
inline Tensor flattened(const Tensor& t) {
  return Tensor{{static_cast<int>(t.data.size())}, t.data};
}

// Interprets a flat vector as a 1x1xN spatial map; 3-d tensors pass through.
inline Tensor as_spatial(const Tensor& t) {
  if (t.order() == 3) return t;
  if (t.order() == 1) return Tensor{{1, 1, t.extent(0)}, t.data};
  throw std::invalid_argument("as_spatial: expected order 1 or 3, got shape " + t.shape_string());
}

// Zero-padded 2-d convolution over a height x width x channels input with a
// kh x kw x cin x cout kernel. Accumulation runs in ascending kernel index
// order, then channel, so results are bitwise reproducible.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel,
                     const std::vector<double>& bias, int stride, int padding) {
  if (input.order() != 3)
    throw std::invalid_argument("conv2d: input must be HxWxC, got " + input.shape_string());
  if (kernel.order() != 4)
    throw std::invalid_argument("conv2d: kernel must be KHxKWxCINxCOUT, got " +
                                kernel.shape_string());
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be nonnegative");

  const int h = input.extent(0), w = input.extent(1), cin = input.extent(2);
  const int kh = kernel.extent(0), kw = kernel.extent(1);
  const int kcin = kernel.extent(2), cout = kernel.extent(3);

  if (kcin != cin)
    throw std::invalid_argument("conv2d: channel mismatch, input " + input.shape_string() +
                                " vs kernel " + kernel.shape_string());
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    throw std::invalid_argument("conv2d: kernel " + kernel.shape_string() +
                                " exceeds padded input " + input.shape_string());
  if (!bias.empty() && static_cast<int>(bias.size()) != cout)
    throw std::invalid_argument("conv2d: bias size " + std::to_string(bias.size()) +
                                " does not match " + std::to_string(cout) + " output channels");

  const int oh = (h + 2 * padding - kh) / stride + 1;
  const int ow = (w + 2 * padding - kw) / stride + 1;
  Tensor out = Tensor::zeros({oh, ow, cout});

  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int f = 0; f < cout; ++f) {
        double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(f)];
        for (int ky = 0; ky < kh; ++ky) {
          const int y = oy * stride + ky - padding;
          if (y < 0 || y >= h) continue;  // zero padding contributes nothing
          for (int kx = 0; kx < kw; ++kx) {
            const int x = ox * stride + kx - padding;
            if (x < 0 || x >= w) continue;
            for (int c = 0; c < cin; ++c)
              acc += input.at(y, x, c) * kernel.at4(ky, kx, c, f);
          }
        }
        out.at(oy, ox, f) = acc;
      }
    }
  }
  return out;
}

// y = W x + b with W of shape [out, in]; the input is used flat.
inline Tensor affine(const Tensor& input, const Tensor& weights,
                     const std::vector<double>& bias) {
  if (weights.order() != 2)
    throw std::invalid_argument("affine: weights must be a matrix, got " +
                                weights.shape_string());
  const int out = weights.extent(0), in = weights.extent(1);
  if (static_cast<long long>(in) != input.numel())
    throw std::invalid_argument("affine: weight columns " + std::to_string(in) +
                                " do not match input length " + std::to_string(input.numel()));
  if (!bias.empty() && static_cast<int>(bias.size()) != out)
    throw std::invalid_argument("affine: bias size " + std::to_string(bias.size()) +
                                " does not match " + std::to_string(out) + " outputs");

  Tensor y = Tensor::zeros({out});
  for (int j = 0; j < out; ++j) {
    double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(j)];
    for (int i = 0; i < in; ++i)
      acc += weights.data[static_cast<std::size_t>(j * in + i)] *
             input.data[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(j)] = acc;
  }
  return y;
}

inline double relu1_scalar(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

// Element-wise clamp to [0, 1].
inline Tensor relu1(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data) v = relu1_scalar(v);
  return out;
}

inline Tensor relu(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data) v = v < 0.0 ? 0.0 : v;
  return out;
}

// Numerically stable log-softmax; exp of the result sums to 1.
inline std::vector<double> log_softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw std::invalid_argument("log_softmax: empty input");
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - m);
  const double lse = m + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

inline double log_sum_exp(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("log_sum_exp: empty input");
  const double m = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - m);
  return m + std::log(sum);
}

}  // namespace protoshap

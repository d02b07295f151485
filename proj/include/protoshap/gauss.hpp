#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "protoshap/model.hpp"
#include "protoshap/tensor.hpp"

namespace protoshap {

// Standard normal density and distribution. Arguments beyond |12| saturate;
// the exact tails are below 1e-32 there and the shortcut avoids inf * 0
// products in the moment formulas.
inline double normal_pdf(double x) {
  if (x < -12.0 || x > 12.0) return 0.0;
  return 0.39894228040143267794 * std::exp(-0.5 * x * x);
}

inline double normal_cdf(double x) {
  if (x < -12.0) return 0.0;
  if (x > 12.0) return 1.0;
  return 0.5 * std::erfc(-x * 0.70710678118654752440);
}

// A scalar activation distribution: mean and variance.
struct Gaussian {
  double mean = 0.0;
  double var = 0.0;
};

// Element-wise independent Gaussian activations: a mean tensor and a
// variance tensor of the same shape. Zero variance entries are point masses.
struct GaussianTensor {
  Tensor mean;
  Tensor var;

  GaussianTensor() = default;
  GaussianTensor(Tensor m, Tensor v) : mean(std::move(m)), var(std::move(v)) {
    if (!same_shape(mean, var))
      throw std::invalid_argument("gaussian tensor: mean " + mean.shape_string() +
                                  " and variance " + var.shape_string() + " differ");
    for (double x : var.data)
      if (!(x >= 0.0))
        throw std::invalid_argument("gaussian tensor: negative or NaN variance");
  }

  static GaussianTensor point_mass(const Tensor& t) {
    return GaussianTensor{t, Tensor::zeros(t.shape)};
  }
};

namespace detail {

inline double clamp_variance(double v) {
  // Closed forms can go slightly negative through cancellation; anything
  // materially below zero indicates a bug upstream.
  if (v < -1e-9) throw std::runtime_error("moment propagation: variance " + std::to_string(v));
  return v < 0.0 ? 0.0 : v;
}

inline Tensor squared(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data) v *= v;
  return out;
}

}  // namespace detail

// Linear maps of independent Gaussians: the mean passes through the layer,
// the variance passes through the element-wise squared weights.
inline GaussianTensor g_affine(const GaussianTensor& x, const Tensor& weights,
                               const std::vector<double>& bias) {
  Tensor mean = affine(flattened(x.mean), weights, bias);
  Tensor var = affine(flattened(x.var), detail::squared(weights), {});
  for (double& v : var.data) v = detail::clamp_variance(v);
  return GaussianTensor{std::move(mean), std::move(var)};
}

inline GaussianTensor g_conv2d(const GaussianTensor& x, const Tensor& kernel,
                               const std::vector<double>& bias, int stride, int padding) {
  Tensor mean = conv2d(as_spatial(x.mean), kernel, bias, stride, padding);
  Tensor var = conv2d(as_spatial(x.var), detail::squared(kernel), {}, stride, padding);
  for (double& v : var.data) v = detail::clamp_variance(v);
  return GaussianTensor{std::move(mean), std::move(var)};
}

// Moments of relu(X) for X ~ N(mu, sigma^2).
inline Gaussian relu_moments(double mu, double var) {
  if (!(var >= 0.0)) throw std::invalid_argument("relu_moments: negative variance");
  if (var == 0.0) return {mu < 0.0 ? 0.0 : mu, 0.0};
  const double sigma = std::sqrt(var);
  const double a = mu / sigma;
  const double cdf = normal_cdf(a);
  const double pdf = normal_pdf(a);
  const double mean = mu * cdf + sigma * pdf;
  const double second = (mu * mu + var) * cdf + mu * sigma * pdf;
  return {mean, detail::clamp_variance(second - mean * mean)};
}

// Moments of relu1(X) = min(max(X, 0), 1) for X ~ N(mu, sigma^2). The mean
// lands in [0, 1] and the variance in [0, 0.25].
inline Gaussian relu1_moments(double mu, double var) {
  if (!(var >= 0.0)) throw std::invalid_argument("relu1_moments: negative variance");
  if (var == 0.0) return {relu1_scalar(mu), 0.0};
  const double sigma = std::sqrt(var);
  const double lo = -mu / sigma;         // standardized 0
  const double hi = (1.0 - mu) / sigma;  // standardized 1
  const double pdf_lo = normal_pdf(lo), pdf_hi = normal_pdf(hi);
  const double cdf_lo = normal_cdf(lo), cdf_hi = normal_cdf(hi);

  const double mean =
      sigma * (pdf_lo - pdf_hi) + mu * (cdf_hi - cdf_lo) + 1.0 - cdf_hi;

  const double m = mean;
  const double variance = (mu * mu - 2.0 * mu * m + var + 2.0 * m - 1.0) * cdf_hi -
                          (mu * mu - 2.0 * mu * m + var) * cdf_lo -
                          (mu * sigma - 2.0 * m * sigma + sigma) * pdf_hi +
                          (mu * sigma - 2.0 * m * sigma) * pdf_lo + m * m - 2.0 * m + 1.0;
  return {mean, detail::clamp_variance(variance)};
}

inline GaussianTensor g_relu(const GaussianTensor& x) {
  GaussianTensor out = x;
  for (std::size_t i = 0; i < out.mean.data.size(); ++i) {
    const Gaussian g = relu_moments(x.mean.data[i], x.var.data[i]);
    out.mean.data[i] = g.mean;
    out.var.data[i] = g.var;
  }
  return out;
}

inline GaussianTensor g_relu1(const GaussianTensor& x) {
  GaussianTensor out = x;
  for (std::size_t i = 0; i < out.mean.data.size(); ++i) {
    const Gaussian g = relu1_moments(x.mean.data[i], x.var.data[i]);
    out.mean.data[i] = g.mean;
    out.var.data[i] = g.var;
  }
  return out;
}

// Moments of sum_l (X_l - p_l)^2 for independent X_l ~ N(mean_l, var_l):
// E = tr(Sigma) + m^T m and V = 2 tr(Sigma^2) + 4 m^T Sigma m with
// m = mean - p and diagonal Sigma. The distance is then treated as Gaussian.
inline Gaussian g_sq_l2_distance(const std::vector<double>& mean,
                                 const std::vector<double>& var,
                                 const std::vector<double>& prototype) {
  if (mean.size() != var.size() || mean.size() != prototype.size())
    throw std::invalid_argument("g_sq_l2_distance: length mismatch (" +
                                std::to_string(mean.size()) + ", " + std::to_string(var.size()) +
                                ", " + std::to_string(prototype.size()) + ")");
  double e = 0.0, v = 0.0;
  for (std::size_t l = 0; l < mean.size(); ++l) {
    const double m = mean[l] - prototype[l];
    const double s = var[l];
    e += s + m * m;
    v += 2.0 * s * s + 4.0 * m * m * s;
  }
  return {e, v};
}

// Moment-matched max of two independent Gaussians (Clark's formulas).
inline Gaussian clark_max(const Gaussian& x, const Gaussian& y) {
  const double a2 = x.var + y.var;
  if (a2 == 0.0) return {x.mean > y.mean ? x.mean : y.mean, 0.0};
  const double a = std::sqrt(a2);
  const double alpha = (x.mean - y.mean) / a;
  const double cdf = normal_cdf(alpha);
  const double pdf = normal_pdf(alpha);
  const double mean = x.mean * cdf + y.mean * (1.0 - cdf) + a * pdf;
  const double second = (x.mean * x.mean + x.var) * cdf +
                        (y.mean * y.mean + y.var) * (1.0 - cdf) +
                        (x.mean + y.mean) * a * pdf;
  return {mean, detail::clamp_variance(second - mean * mean)};
}

// Approximate minimum of independent Gaussians: negate, reduce with Clark's
// pairwise max in left-to-right order, negate back.
inline Gaussian g_min_pool(const std::vector<Gaussian>& items) {
  if (items.empty()) throw std::invalid_argument("g_min_pool: empty input");
  Gaussian acc{-items[0].mean, items[0].var};
  for (std::size_t i = 1; i < items.size(); ++i)
    acc = clark_max(acc, Gaussian{-items[i].mean, items[i].var});
  return {-acc.mean, acc.var};
}

namespace detail {

inline GaussianTensor g_apply_layer(const GaussianTensor& x, const LayerDesc& layer) {
  GaussianTensor t = layer.kind == LayerKind::conv
                         ? g_conv2d(x, layer.weights, layer.bias, layer.stride, layer.padding)
                         : g_affine(x, layer.weights, layer.bias);
  switch (layer.activation) {
    case Activation::none: return t;
    case Activation::relu: return g_relu(t);
    case Activation::relu1: return g_relu1(t);
  }
  return t;
}

}  // namespace detail

struct GaussianForwardResult {
  GaussianTensor latent;                               // H' x W' x L moments
  std::vector<std::vector<Gaussian>> position_moments; // per prototype, row-major cells
  std::vector<Gaussian> distances;                     // min-pooled, per prototype
};

// Runs the probabilistic twin through V, Z and the prototype module. With an
// all-zero input variance this reproduces the deterministic forward exactly:
// every branch degenerates to its point-mass shortcut and the mean path uses
// the same accumulation order as the deterministic code.
inline GaussianForwardResult g_forward(const ModelSpec& model, const GaussianTensor& input) {
  if (input.mean.shape != model.input_shape)
    throw std::invalid_argument("g_forward: input shape " + input.mean.shape_string() +
                                " does not match model input");
  GaussianTensor t = input;
  for (const LayerDesc& l : model.backbone) t = detail::g_apply_layer(t, l);
  for (const LayerDesc& l : model.extractor) t = detail::g_apply_layer(t, l);
  t.mean = as_spatial(t.mean);
  t.var = as_spatial(t.var);

  const PrototypeSet& protos = model.prototypes;
  const int h = t.mean.extent(0), w = t.mean.extent(1), L = t.mean.extent(2);
  if (L != protos.channels)
    throw std::invalid_argument("g_forward: latent channels do not match prototypes");

  GaussianForwardResult out;
  out.position_moments.resize(static_cast<std::size_t>(protos.count()));
  out.distances.resize(static_cast<std::size_t>(protos.count()));
  std::vector<double> mean_vec(static_cast<std::size_t>(L));
  std::vector<double> var_vec(static_cast<std::size_t>(L));
  for (int p = 0; p < protos.count(); ++p) {
    std::vector<Gaussian>& cells = out.position_moments[static_cast<std::size_t>(p)];
    cells.reserve(static_cast<std::size_t>(h * w));
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        for (int l = 0; l < L; ++l) {
          mean_vec[static_cast<std::size_t>(l)] = t.mean.at(i, j, l);
          var_vec[static_cast<std::size_t>(l)] = t.var.at(i, j, l);
        }
        cells.push_back(
            g_sq_l2_distance(mean_vec, var_vec, protos.values[static_cast<std::size_t>(p)]));
      }
    }
    out.distances[static_cast<std::size_t>(p)] = g_min_pool(cells);
  }
  out.latent = std::move(t);
  return out;
}

}  // namespace protoshap

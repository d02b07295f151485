#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "protoshap/model.hpp"
#include "protoshap/rng.hpp"
#include "protoshap/tensor.hpp"

namespace protoshap {

// Knobs for seeded small-scale model generation. Defaults give a 6x6
// grayscale input, one or two conv layers plus the 1x1 extractor pair, and
// a handful of prototypes.
struct ModelGenOptions {
  int height = 6;
  int width = 6;
  int channels = 1;
  int min_conv_layers = 1;
  int max_conv_layers = 2;
  int max_backbone_channels = 4;
  int min_latent_channels = 2;
  int max_latent_channels = 4;
  int classes = 2;
  int per_class = 2;
  bool allow_stride2 = true;
  // Extractor weight scale (relative to 1/sqrt(fan-in)) and bias band. The
  // band controls how far latents sit from the relu1 saturation points.
  double extractor_gain = 1.0;
  double extractor_bias_lo = 0.1;
  double extractor_bias_hi = 0.5;
};

inline Tensor random_image(Rng& rng, const std::vector<int>& shape) {
  Tensor t = Tensor::zeros(shape);
  for (double& v : t.data) v = rng.uniform();
  return t;
}

namespace detail {

inline LayerDesc random_conv(Rng& rng, int in_h, int in_w, int cin, int cout,
                             bool allow_stride2) {
  LayerDesc l;
  l.kind = LayerKind::conv;
  const int k = std::min(rng.uniform_int(2, 3), std::min(in_h, in_w));
  l.padding = rng.uniform_int(0, 1);
  l.stride = 1;
  // k <= min(h, w) keeps the spatial output at least 1x1 for either stride.
  if (allow_stride2 && (in_h + 2 * l.padding - k) >= 1 &&
      (in_w + 2 * l.padding - k) >= 1 && rng.uniform() < 0.5)
    l.stride = 2;
  l.weights = Tensor::zeros({k, k, cin, cout});
  const double scale = 1.0 / std::sqrt(static_cast<double>(k * k * cin));
  for (double& v : l.weights.data) v = rng.normal(0.0, scale);
  l.bias.resize(static_cast<std::size_t>(cout));
  for (double& v : l.bias) v = rng.uniform(-0.1, 0.2);
  l.activation = Activation::relu;
  return l;
}

}  // namespace detail

// Seeded generator for small prototype networks. Weights are random, the
// final extractor activation is relu1, prototypes start uniform in [0,1]^L,
// and the classifier connects own-class prototypes with weight -1 and
// other-class prototypes with +0.5 so that smaller distances raise the
// own-class logit.
inline ModelSpec random_model(std::uint64_t seed, const ModelGenOptions& opt = {}) {
  Rng rng(seed);
  ModelSpec m;
  m.input_shape = {opt.height, opt.width, opt.channels};

  int h = opt.height, w = opt.width, c = opt.channels;
  const int layers = rng.uniform_int(opt.min_conv_layers, opt.max_conv_layers);
  for (int i = 0; i < layers; ++i) {
    const int cout = rng.uniform_int(2, opt.max_backbone_channels);
    LayerDesc l = detail::random_conv(rng, h, w, c, cout, opt.allow_stride2);
    h = (h + 2 * l.padding - l.weights.extent(0)) / l.stride + 1;
    w = (w + 2 * l.padding - l.weights.extent(1)) / l.stride + 1;
    c = cout;
    m.backbone.push_back(std::move(l));
  }

  const int latent = rng.uniform_int(opt.min_latent_channels, opt.max_latent_channels);
  const int mid = rng.uniform_int(latent, opt.max_backbone_channels + latent);
  const auto extractor_layer = [&](int cin, int cout, Activation act) {
    LayerDesc l;
    l.kind = LayerKind::conv;
    l.weights = Tensor::zeros({1, 1, cin, cout});
    const double scale = opt.extractor_gain / std::sqrt(static_cast<double>(cin));
    for (double& v : l.weights.data) v = rng.normal(0.0, scale);
    l.bias.resize(static_cast<std::size_t>(cout));
    for (double& v : l.bias) v = rng.uniform(opt.extractor_bias_lo, opt.extractor_bias_hi);
    l.stride = 1;
    l.padding = 0;
    l.activation = act;
    return l;
  };
  m.extractor.push_back(extractor_layer(c, mid, Activation::relu));
  m.extractor.push_back(extractor_layer(mid, latent, Activation::relu1));

  PrototypeSet& p = m.prototypes;
  p.per_class = opt.per_class;
  p.classes = opt.classes;
  p.channels = latent;
  for (int i = 0; i < p.count(); ++i) {
    std::vector<double> v(static_cast<std::size_t>(latent));
    for (double& x : v) x = rng.uniform();
    p.values.push_back(std::move(v));
  }

  const int kc = p.count();
  m.classifier_weights = Tensor::zeros({p.classes, kc});
  for (int cls = 0; cls < p.classes; ++cls)
    for (int j = 0; j < kc; ++j)
      m.classifier_weights.data[static_cast<std::size_t>(cls * kc + j)] =
          (j / p.per_class == cls) ? -1.0 : 0.5;
  return m;
}

// Labeled images covering every class, ids img_000, img_001, ...
inline std::vector<LabeledImage> random_training_set(Rng& rng, const ModelSpec& model,
                                                     int images_per_class) {
  std::vector<LabeledImage> out;
  int n = 0;
  for (int c = 0; c < model.prototypes.classes; ++c) {
    for (int i = 0; i < images_per_class; ++i) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "img_%03d", n++);
      out.push_back({buf, c, random_image(rng, model.input_shape)});
    }
  }
  return out;
}

// A generated model with prototypes projected onto a fresh training set.
struct GeneratedBundle {
  ModelSpec model;
  std::vector<LabeledImage> training;
  Tensor probe;  // extra image outside the training set
};

inline GeneratedBundle generate_projected(std::uint64_t seed, const ModelGenOptions& opt = {},
                                          int images_per_class = 2) {
  GeneratedBundle b;
  b.model = random_model(seed, opt);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  b.training = random_training_set(rng, b.model, images_per_class);
  b.model.prototypes = project_prototypes(b.model, b.training);
  b.probe = random_image(rng, b.model.input_shape);
  return b;
}

}  // namespace protoshap

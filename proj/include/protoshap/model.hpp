#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "protoshap/tensor.hpp"

namespace protoshap {

enum class Activation { none, relu, relu1 };

enum class LayerKind { conv, affine };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::relu1: return "relu1";
  }
  return "?";
}

struct LayerDesc {
  LayerKind kind = LayerKind::conv;
  Tensor weights;             // conv: kh x kw x cin x cout; affine: out x in
  std::vector<double> bias;   // empty means zero bias
  int stride = 1;
  int padding = 0;
  Activation activation = Activation::none;
};

// Where a projected prototype came from: class, slot, source image and the
// latent grid cell whose feature vector it copies.
struct PrototypeProvenance {
  int cls = 0;
  int index = 0;
  std::string image_id;
  int row = 0;
  int col = 0;
};

struct PrototypeSet {
  int per_class = 0;  // K
  int classes = 0;    // C
  int channels = 0;   // L
  std::vector<std::vector<double>> values;      // K*C vectors, entry (c,k) at c*K+k
  std::vector<PrototypeProvenance> provenance;  // empty until projection

  int count() const { return per_class * classes; }
  int index_of(int cls, int k) const { return cls * per_class + k; }
  bool has_provenance() const { return !provenance.empty(); }
};

// Full description of a prototype network f = F o Q o Z o V.
struct ModelSpec {
  std::vector<int> input_shape;     // H, W, C
  std::vector<LayerDesc> backbone;  // V
  std::vector<LayerDesc> extractor; // Z: exactly two 1x1 convs, final relu1
  PrototypeSet prototypes;
  Tensor classifier_weights;        // C x (K*C), applied to raw distances
  std::vector<double> classifier_bias;  // empty means absent
};

struct DistanceVector {
  std::vector<double> values;               // K*C squared L2 minima
  std::vector<std::pair<int, int>> argmin;  // (row, col) per prototype
};

// Additive decomposition of the class log-probability over own-class
// prototypes. remainder_share equals -log(R)/K when the classifier has
// own-class connections only; cross-class terms and bias fold into it.
struct ContributionScores {
  int cls = 0;
  std::vector<double> psi;
  double remainder_share = 0.0;
  double log_probability = 0.0;
};

struct LossConfig {
  double lambda_cluster = 0.5;
  double lambda_separation = 0.5;
};

struct LabeledImage {
  std::string id;
  int label = 0;
  Tensor image;
};

namespace detail {

inline Tensor apply_activation(Tensor t, Activation a) {
  switch (a) {
    case Activation::none: return t;
    case Activation::relu: return relu(t);
    case Activation::relu1: return relu1(t);
  }
  return t;
}

inline Tensor apply_layer(const Tensor& input, const LayerDesc& layer) {
  Tensor pre;
  if (layer.kind == LayerKind::conv)
    pre = conv2d(as_spatial(input), layer.weights, layer.bias, layer.stride, layer.padding);
  else
    pre = affine(flattened(input), layer.weights, layer.bias);
  return apply_activation(std::move(pre), layer.activation);
}

inline std::vector<int> layer_output_shape(const std::vector<int>& in, const LayerDesc& layer) {
  if (layer.kind == LayerKind::affine) return {layer.weights.extent(0)};
  std::vector<int> s = in.size() == 1 ? std::vector<int>{1, 1, in[0]} : in;
  if (s.size() != 3) throw std::invalid_argument("conv layer needs a spatial input");
  const int kh = layer.weights.extent(0), kw = layer.weights.extent(1);
  if (layer.weights.extent(2) != s[2])
    throw std::invalid_argument("conv layer channel mismatch: input has " +
                                std::to_string(s[2]) + " channels, kernel expects " +
                                std::to_string(layer.weights.extent(2)));
  const int oh = (s[0] + 2 * layer.padding - kh) / layer.stride + 1;
  const int ow = (s[1] + 2 * layer.padding - kw) / layer.stride + 1;
  if (oh < 1 || ow < 1) throw std::invalid_argument("conv layer output collapses to zero extent");
  return {oh, ow, layer.weights.extent(3)};
}

}  // namespace detail

// Shape-checks the whole chain for the configured input and returns the
// latent map shape H' x W' x L. Throws with a description of the first
// inconsistency.
inline std::vector<int> validate(const ModelSpec& model) {
  if (model.input_shape.size() != 3)
    throw std::invalid_argument("model: input shape must be HxWxC");
  if (model.extractor.size() != 2)
    throw std::invalid_argument("model: extractor must hold exactly two 1x1 conv layers");
  for (const LayerDesc& l : model.extractor) {
    if (l.kind != LayerKind::conv || l.weights.extent(0) != 1 || l.weights.extent(1) != 1)
      throw std::invalid_argument("model: extractor layers must be 1x1 convolutions");
  }
  if (model.extractor.back().activation != Activation::relu1)
    throw std::invalid_argument("model: final extractor activation must be relu1");

  std::vector<int> s = model.input_shape;
  int li = 0;
  try {
    for (const LayerDesc& l : model.backbone) {
      s = detail::layer_output_shape(s, l);
      ++li;
    }
    for (const LayerDesc& l : model.extractor) {
      s = detail::layer_output_shape(s, l);
      ++li;
    }
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("model: layer " + std::to_string(li) + ": " + e.what());
  }
  if (s.size() != 3) throw std::invalid_argument("model: latent map must be spatial");

  const PrototypeSet& p = model.prototypes;
  if (p.per_class < 1 || p.classes < 1 || p.channels < 1)
    throw std::invalid_argument("model: prototype set must have K, C, L >= 1");
  if (s[2] != p.channels)
    throw std::invalid_argument("model: latent channels " + std::to_string(s[2]) +
                                " do not match prototype channels " + std::to_string(p.channels));
  if (static_cast<int>(p.values.size()) != p.count())
    throw std::invalid_argument("model: expected " + std::to_string(p.count()) +
                                " prototypes, got " + std::to_string(p.values.size()));
  for (const auto& v : p.values)
    if (static_cast<int>(v.size()) != p.channels)
      throw std::invalid_argument("model: prototype length does not match L");

  if (model.classifier_weights.order() != 2 ||
      model.classifier_weights.extent(0) != p.classes ||
      model.classifier_weights.extent(1) != p.count())
    throw std::invalid_argument("model: classifier must be " + std::to_string(p.classes) + "x" +
                                std::to_string(p.count()) + ", got " +
                                model.classifier_weights.shape_string());
  if (!model.classifier_bias.empty() &&
      static_cast<int>(model.classifier_bias.size()) != p.classes)
    throw std::invalid_argument("model: classifier bias length must equal class count");
  return s;
}

inline std::vector<int> latent_shape(const ModelSpec& model) { return validate(model); }

// Per-prototype minimum squared L2 distance over all latent grid cells.
// Ties break toward the smallest row, then column.
inline DistanceVector distances(const Tensor& latent, const PrototypeSet& protos) {
  if (latent.order() != 3 || latent.extent(2) != protos.channels)
    throw std::invalid_argument("distances: latent " + latent.shape_string() +
                                " does not match prototype channels " +
                                std::to_string(protos.channels));
  const int h = latent.extent(0), w = latent.extent(1), L = protos.channels;
  DistanceVector out;
  out.values.resize(static_cast<std::size_t>(protos.count()));
  out.argmin.resize(static_cast<std::size_t>(protos.count()));
  for (int p = 0; p < protos.count(); ++p) {
    const std::vector<double>& proto = protos.values[static_cast<std::size_t>(p)];
    double best = std::numeric_limits<double>::infinity();
    std::pair<int, int> pos{0, 0};
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        double d = 0.0;
        for (int l = 0; l < L; ++l) {
          const double diff = proto[static_cast<std::size_t>(l)] - latent.at(i, j, l);
          d += diff * diff;
        }
        if (d < best) {
          best = d;
          pos = {i, j};
        }
      }
    }
    out.values[static_cast<std::size_t>(p)] = best;
    out.argmin[static_cast<std::size_t>(p)] = pos;
  }
  return out;
}

// Latent map z = (Z o V)(image), checking finiteness after every layer.
inline Tensor latent_map(const ModelSpec& model, const Tensor& image) {
  if (image.shape != model.input_shape)
    throw std::invalid_argument("forward: image shape " + image.shape_string() +
                                " does not match model input " +
                                Tensor::zeros(model.input_shape).shape_string());
  Tensor t = image;
  int li = 0;
  for (const LayerDesc& l : model.backbone) {
    t = detail::apply_layer(t, l);
    if (!all_finite(t))
      throw std::runtime_error("forward: non-finite intermediate at layer " + std::to_string(li));
    ++li;
  }
  for (const LayerDesc& l : model.extractor) {
    t = detail::apply_layer(t, l);
    if (!all_finite(t))
      throw std::runtime_error("forward: non-finite intermediate at layer " + std::to_string(li));
    ++li;
  }
  return as_spatial(t);
}

struct ForwardResult {
  Tensor latent;
  DistanceVector dist;
  std::vector<double> logits;
  std::vector<double> probabilities;
};

inline std::vector<double> classify(const ModelSpec& model, const std::vector<double>& dist) {
  Tensor s{{static_cast<int>(dist.size())}, dist};
  Tensor logits = affine(s, model.classifier_weights, model.classifier_bias);
  return logits.data;
}

// Full deterministic pass: latent map, prototype distances, logits over raw
// distances, softmax probabilities.
inline ForwardResult forward(const ModelSpec& model, const Tensor& image) {
  ForwardResult r;
  r.latent = latent_map(model, image);
  r.dist = distances(r.latent, model.prototypes);
  r.logits = classify(model, r.dist.values);
  const std::vector<double> logp = log_softmax(r.logits);
  r.probabilities.resize(logp.size());
  for (std::size_t i = 0; i < logp.size(); ++i) r.probabilities[i] = std::exp(logp[i]);
  return r;
}

// Decomposes log P(y = cls | image) into one score per own-class prototype
// plus a shared remainder. The psi values sum to the log-probability.
inline ContributionScores contribution_scores(const ModelSpec& model,
                                              const DistanceVector& dist, int cls) {
  const PrototypeSet& p = model.prototypes;
  if (cls < 0 || cls >= p.classes)
    throw std::invalid_argument("contribution_scores: class " + std::to_string(cls) +
                                " out of range [0, " + std::to_string(p.classes) + ")");
  const std::vector<double> logits = classify(model, dist.values);
  const double logp = logits[static_cast<std::size_t>(cls)] - log_sum_exp(logits);

  ContributionScores out;
  out.cls = cls;
  out.psi.resize(static_cast<std::size_t>(p.per_class));
  double own_sum = 0.0;
  const int kc = p.count();
  for (int k = 0; k < p.per_class; ++k) {
    const int idx = p.index_of(cls, k);
    const double w = model.classifier_weights.data[static_cast<std::size_t>(cls * kc + idx)];
    const double term = w * dist.values[static_cast<std::size_t>(idx)];
    out.psi[static_cast<std::size_t>(k)] = term;
    own_sum += term;
  }
  out.remainder_share = (logp - own_sum) / static_cast<double>(p.per_class);
  for (double& v : out.psi) v += out.remainder_share;
  out.log_probability = logp;
  return out;
}

// log((s + 1) / (s + eps)), the original activation applied to distances.
inline double legacy_activation(double distance, double epsilon = 1e-4) {
  if (epsilon <= 0.0) throw std::invalid_argument("legacy_activation: epsilon must be positive");
  if (distance < 0.0) throw std::invalid_argument("legacy_activation: distance must be >= 0");
  return std::log((distance + 1.0) / (distance + epsilon));
}

// Minimum distance between any own-class prototype and any latent cell.
inline double cluster_loss(const Tensor& latent, const PrototypeSet& protos, int label) {
  if (label < 0 || label >= protos.classes)
    throw std::invalid_argument("cluster_loss: label out of range");
  const DistanceVector d = distances(latent, protos);
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k < protos.per_class; ++k)
    best = std::min(best, d.values[static_cast<std::size_t>(protos.index_of(label, k))]);
  return best;
}

inline double separation_loss(const Tensor& latent, const PrototypeSet& protos, int label) {
  if (label < 0 || label >= protos.classes)
    throw std::invalid_argument("separation_loss: label out of range");
  if (protos.classes < 2)
    throw std::invalid_argument("separation_loss: no other-class prototypes");
  const DistanceVector d = distances(latent, protos);
  double best = std::numeric_limits<double>::infinity();
  for (int c = 0; c < protos.classes; ++c) {
    if (c == label) continue;
    for (int k = 0; k < protos.per_class; ++k)
      best = std::min(best, d.values[static_cast<std::size_t>(protos.index_of(c, k))]);
  }
  return best;
}

inline double combined_loss(const ModelSpec& model, const LabeledImage& sample,
                            const LossConfig& cfg = {}) {
  const ForwardResult r = forward(model, sample.image);
  const std::vector<double> logp = log_softmax(r.logits);
  double loss = -logp[static_cast<std::size_t>(sample.label)];
  loss += cfg.lambda_cluster * cluster_loss(r.latent, model.prototypes, sample.label);
  if (model.prototypes.classes > 1)
    loss += cfg.lambda_separation * separation_loss(r.latent, model.prototypes, sample.label);
  return loss;
}

// Replaces every prototype by the closest latent feature vector taken from
// same-class training images and records where it came from. Candidate order
// is image order, then row-major grid order, so ties are deterministic.
inline PrototypeSet project_prototypes(const ModelSpec& model,
                                       const std::vector<LabeledImage>& images) {
  const PrototypeSet& p = model.prototypes;
  std::vector<int> per_class_count(static_cast<std::size_t>(p.classes), 0);
  for (const LabeledImage& im : images) {
    if (im.label < 0 || im.label >= p.classes)
      throw std::invalid_argument("project_prototypes: label " + std::to_string(im.label) +
                                  " out of range");
    ++per_class_count[static_cast<std::size_t>(im.label)];
  }
  for (int c = 0; c < p.classes; ++c)
    if (per_class_count[static_cast<std::size_t>(c)] == 0)
      throw std::invalid_argument("project_prototypes: class " + std::to_string(c) +
                                  " has no images");

  std::vector<Tensor> latents;
  latents.reserve(images.size());
  for (const LabeledImage& im : images) latents.push_back(latent_map(model, im.image));

  PrototypeSet out = p;
  out.provenance.assign(static_cast<std::size_t>(p.count()), {});
  const int L = p.channels;
  for (int c = 0; c < p.classes; ++c) {
    for (int k = 0; k < p.per_class; ++k) {
      const int idx = p.index_of(c, k);
      const std::vector<double>& proto = p.values[static_cast<std::size_t>(idx)];
      double best = std::numeric_limits<double>::infinity();
      int best_img = -1, best_i = 0, best_j = 0;
      for (std::size_t n = 0; n < images.size(); ++n) {
        if (images[n].label != c) continue;
        const Tensor& z = latents[n];
        for (int i = 0; i < z.extent(0); ++i) {
          for (int j = 0; j < z.extent(1); ++j) {
            double d = 0.0;
            for (int l = 0; l < L; ++l) {
              const double diff = proto[static_cast<std::size_t>(l)] - z.at(i, j, l);
              d += diff * diff;
            }
            if (d < best) {
              best = d;
              best_img = static_cast<int>(n);
              best_i = i;
              best_j = j;
            }
          }
        }
      }
      const Tensor& z = latents[static_cast<std::size_t>(best_img)];
      std::vector<double>& v = out.values[static_cast<std::size_t>(idx)];
      for (int l = 0; l < L; ++l) v[static_cast<std::size_t>(l)] = z.at(best_i, best_j, l);
      out.provenance[static_cast<std::size_t>(idx)] = {
          c, k, images[static_cast<std::size_t>(best_img)].id, best_i, best_j};
    }
  }
  return out;
}

}  // namespace protoshap

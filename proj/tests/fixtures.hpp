#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "protoshap/modelgen.hpp"
#include "protoshap/shapley.hpp"

namespace testfx {

// Family used for the attribution-fidelity fixtures: 3x3 grayscale input
// (9 pixel features), a single small conv layer, two latent channels, one
// prototype per class. Fixture seeds are pinned and were screened so the
// prototype distance actually varies over the coalition cube
// (max |psi_oracle| >= 0.05); a near-constant target makes relative error
// meaningless.
inline protoshap::ModelGenOptions dasp_fixture_options() {
  protoshap::ModelGenOptions o;
  o.height = 3;
  o.width = 3;
  o.per_class = 1;
  o.min_conv_layers = 1;
  o.max_conv_layers = 1;
  o.max_backbone_channels = 2;
  o.min_latent_channels = 2;
  o.max_latent_channels = 2;
  return o;
}

inline const std::vector<std::uint64_t>& dasp_fixture_seeds() {
  static const std::vector<std::uint64_t> seeds = {3002, 3015, 3020, 3021, 3031,
                                                   3038, 3045, 3052, 3055, 3063};
  return seeds;
}

// 2x2 input collapsing to a 1x1 latent. With small weights and a centered
// bias the relu1 band is never left, so the latent map is affine over the
// whole coalition cube; with classifier row (1, -1) over two prototypes the
// logit target is exactly linear in the pixels.
inline protoshap::ModelSpec affine_band_model(const std::vector<double>& kernel_weights,
                                              int latent_channels,
                                              const std::vector<double>& classifier_row) {
  using namespace protoshap;
  ModelSpec m;
  m.input_shape = {2, 2, 1};
  LayerDesc conv;
  conv.kind = LayerKind::conv;
  conv.weights = Tensor{{2, 2, 1, 1}, kernel_weights};
  conv.bias = {0.0};
  conv.stride = 1;
  conv.padding = 0;
  conv.activation = Activation::none;
  m.backbone = {conv};

  LayerDesc z1;
  z1.kind = LayerKind::conv;
  z1.weights = Tensor{{1, 1, 1, 1}, {1.0}};
  z1.bias = {0.0};
  z1.activation = Activation::none;
  LayerDesc z2;
  z2.kind = LayerKind::conv;
  z2.weights = Tensor::zeros({1, 1, 1, latent_channels});
  z2.bias.assign(static_cast<std::size_t>(latent_channels), 0.5);
  for (int l = 0; l < latent_channels; ++l) z2.weights.at4(0, 0, 0, l) = 0.1 + 0.05 * l;
  z2.activation = Activation::relu1;
  m.extractor = {z1, z2};

  const int protos = static_cast<int>(classifier_row.size());
  m.prototypes.per_class = protos;
  m.prototypes.classes = 1;
  m.prototypes.channels = latent_channels;
  for (int p = 0; p < protos; ++p) {
    std::vector<double> v(static_cast<std::size_t>(latent_channels));
    for (int l = 0; l < latent_channels; ++l)
      v[static_cast<std::size_t>(l)] = 0.2 + 0.6 * p / std::max(1, protos - 1) + 0.05 * l;
    m.prototypes.values.push_back(std::move(v));
  }
  m.classifier_weights = protoshap::Tensor{{1, protos}, classifier_row};
  return m;
}

// Family for the removal-ordering comparison: 6x6 grayscale inputs, two conv
// layers, a livelier extractor band, two prototypes per class, six training
// images per class.
inline protoshap::ModelGenOptions aopc_model_options() {
  protoshap::ModelGenOptions o;
  o.per_class = 2;
  o.min_conv_layers = 2;
  o.max_conv_layers = 2;
  o.extractor_gain = 0.8;
  o.extractor_bias_lo = 0.35;
  o.extractor_bias_hi = 0.6;
  return o;
}

// Degeneracy screen for generated models: prototypes must differ from the
// all-zero image's latent (the removal baseline) and must be distinctive on
// their own source image (a clear argmin cell). Models failing either have
// near-constant distance targets and carry no ordering signal.
inline bool aopc_model_passes_screen(const protoshap::GeneratedBundle& b,
                                     double min_zero_distance = 0.02,
                                     double min_source_gap = 0.05) {
  using namespace protoshap;
  const Tensor z0 = latent_map(b.model, Tensor::zeros(b.model.input_shape));
  const DistanceVector d0 = distances(z0, b.model.prototypes);
  for (double v : d0.values)
    if (v < min_zero_distance) return false;
  for (int idx = 0; idx < b.model.prototypes.count(); ++idx) {
    const auto& prov = b.model.prototypes.provenance.at(static_cast<std::size_t>(idx));
    for (const LabeledImage& im : b.training) {
      if (im.id != prov.image_id) continue;
      const Tensor z = latent_map(b.model, im.image);
      std::vector<double> ds;
      for (int i = 0; i < z.extent(0); ++i)
        for (int j = 0; j < z.extent(1); ++j) {
          double d = 0.0;
          for (int l = 0; l < z.extent(2); ++l) {
            const double t =
                b.model.prototypes.values[static_cast<std::size_t>(idx)][static_cast<std::size_t>(l)] -
                z.at(i, j, l);
            d += t * t;
          }
          ds.push_back(d);
        }
      std::sort(ds.begin(), ds.end());
      if (ds.size() > 1 && ds[1] - ds[0] < min_source_gap) return false;
    }
  }
  return true;
}

// Set-function spec for the source image of prototype (cls, k).
inline protoshap::SetFunctionSpec source_image_spec(const protoshap::GeneratedBundle& b,
                                                    int cls, int k) {
  const int idx = b.model.prototypes.index_of(cls, k);
  const auto& prov = b.model.prototypes.provenance.at(static_cast<std::size_t>(idx));
  for (const protoshap::LabeledImage& im : b.training) {
    if (im.id != prov.image_id) continue;
    protoshap::SetFunctionSpec spec;
    spec.model = &b.model;
    spec.image = im.image;
    spec.target = {protoshap::Target::Kind::distance, cls, k};
    return spec;
  }
  throw std::logic_error("source image not found in training set");
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const int n = static_cast<int>(a.size());
  const auto ranks = [n](const std::vector<double>& v) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::sort(idx.begin(), idx.end(),
              [&](int x, int y) { return v[static_cast<std::size_t>(x)] < v[static_cast<std::size_t>(y)]; });
    std::vector<double> r(static_cast<std::size_t>(n));
    for (int i = 0; i < n;) {
      int j = i;
      while (j + 1 < n && v[static_cast<std::size_t>(idx[static_cast<std::size_t>(j + 1)])] ==
                              v[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])])
        ++j;
      const double avg = 0.5 * (i + j) + 1.0;
      for (int t = i; t <= j; ++t) r[static_cast<std::size_t>(idx[static_cast<std::size_t>(t)])] = avg;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  double ma = 0.0, mb = 0.0;
  for (int i = 0; i < n; ++i) {
    ma += ra[static_cast<std::size_t>(i)];
    mb += rb[static_cast<std::size_t>(i)];
  }
  ma /= n;
  mb /= n;
  double num = 0.0, da = 0.0, db = 0.0;
  for (int i = 0; i < n; ++i) {
    const double xa = ra[static_cast<std::size_t>(i)] - ma;
    const double xb = rb[static_cast<std::size_t>(i)] - mb;
    num += xa * xb;
    da += xa * xa;
    db += xb * xb;
  }
  if (da == 0.0 || db == 0.0) return 0.0;
  return num / std::sqrt(da * db);
}

}  // namespace testfx

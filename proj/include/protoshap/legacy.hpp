#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoshap/model.hpp"
#include "protoshap/shapley.hpp"
#include "protoshap/tensor.hpp"

namespace protoshap {

// The original distance-map explanation for one prototype: flip against the
// global maximum distance, upscale to image size, crop at a percentile.
struct LegacyMap {
  int cls = 0;
  int proto = 0;
  Tensor raw;       // H' x W' distance map
  Tensor flipped;   // max_dist - raw
  Tensor upscaled;  // H x W
  double max_dist = 0.0;
  double percentile = 95.0;
  double threshold = 0.0;
  int box_top = 0, box_left = 0, box_bottom = 0, box_right = 0;  // inclusive
  double f_full = 0.0;   // distance for the unmasked image
  double f_empty = 0.0;  // distance for the all-baseline image
};

// Bilinear interpolation with corners pinned: output corners reproduce input
// corners exactly.
inline Tensor bilinear_upscale(const Tensor& src, int out_rows, int out_cols) {
  if (src.order() != 2)
    throw std::invalid_argument("bilinear_upscale: expected a 2-d map, got " +
                                src.shape_string());
  if (out_rows < 1 || out_cols < 1)
    throw std::invalid_argument("bilinear_upscale: output extents must be positive");
  const int h = src.extent(0), w = src.extent(1);
  Tensor out = Tensor::zeros({out_rows, out_cols});
  for (int r = 0; r < out_rows; ++r) {
    const double sr = (out_rows > 1 && h > 1)
                          ? static_cast<double>(r) * (h - 1) / (out_rows - 1)
                          : 0.0;
    const int r0 = static_cast<int>(sr);
    const int r1 = std::min(r0 + 1, h - 1);
    const double fr = sr - r0;
    for (int c = 0; c < out_cols; ++c) {
      const double sc = (out_cols > 1 && w > 1)
                            ? static_cast<double>(c) * (w - 1) / (out_cols - 1)
                            : 0.0;
      const int c0 = static_cast<int>(sc);
      const int c1 = std::min(c0 + 1, w - 1);
      const double fc = sc - c0;
      const double top = src.data[static_cast<std::size_t>(r0 * w + c0)] * (1.0 - fc) +
                         src.data[static_cast<std::size_t>(r0 * w + c1)] * fc;
      const double bot = src.data[static_cast<std::size_t>(r1 * w + c0)] * (1.0 - fc) +
                         src.data[static_cast<std::size_t>(r1 * w + c1)] * fc;
      out.data[static_cast<std::size_t>(r * out_cols + c)] = top * (1.0 - fr) + bot * fr;
    }
  }
  return out;
}

// Percentile with linear interpolation between order statistics.
inline double percentile_value(std::vector<double> values, double pct) {
  if (values.empty()) throw std::invalid_argument("percentile_value: empty input");
  if (pct < 0.0 || pct > 100.0) throw std::invalid_argument("percentile_value: pct out of range");
  std::sort(values.begin(), values.end());
  const double rank = pct / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

// Builds the original explanation for prototype (cls, k). The maximum
// distance is globally defined only because the extractor ends in relu1,
// which bounds latents to [0,1]^L; refuses otherwise.
inline LegacyMap legacy_map(const ModelSpec& model, const Tensor& image, int cls, int k,
                            double percentile = 95.0) {
  const PrototypeSet& protos = model.prototypes;
  if (cls < 0 || cls >= protos.classes || k < 0 || k >= protos.per_class)
    throw std::invalid_argument("legacy_map: prototype (" + std::to_string(cls) + ", " +
                                std::to_string(k) + ") out of range");
  if (model.extractor.empty() || model.extractor.back().activation != Activation::relu1)
    throw std::invalid_argument(
        "legacy_map: extractor is not bounded by relu1, the maximum distance is undefined");

  const Tensor z = latent_map(model, image);
  const int h = z.extent(0), w = z.extent(1), L = protos.channels;
  const std::vector<double>& p = protos.values[static_cast<std::size_t>(protos.index_of(cls, k))];

  LegacyMap out;
  out.cls = cls;
  out.proto = k;
  out.max_dist = static_cast<double>(L);
  out.percentile = percentile;
  out.raw = Tensor::zeros({h, w});
  out.flipped = Tensor::zeros({h, w});
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      double d = 0.0;
      for (int l = 0; l < L; ++l) {
        const double diff = p[static_cast<std::size_t>(l)] - z.at(i, j, l);
        d += diff * diff;
      }
      out.raw.data[static_cast<std::size_t>(i * w + j)] = d;
      out.flipped.data[static_cast<std::size_t>(i * w + j)] = out.max_dist - d;
    }
  }

  const int H = image.extent(0), W = image.extent(1);
  out.upscaled = bilinear_upscale(out.flipped, H, W);
  out.threshold = percentile_value(out.upscaled.data, percentile);

  out.box_top = H;
  out.box_left = W;
  out.box_bottom = -1;
  out.box_right = -1;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      if (out.upscaled.data[static_cast<std::size_t>(r * W + c)] < out.threshold) continue;
      out.box_top = std::min(out.box_top, r);
      out.box_left = std::min(out.box_left, c);
      out.box_bottom = std::max(out.box_bottom, r);
      out.box_right = std::max(out.box_right, c);
    }
  }

  // Reference values of the distance set function, for the completeness
  // residual of the derived attribution.
  const DistanceVector dv = distances(z, protos);
  out.f_full = dv.values[static_cast<std::size_t>(protos.index_of(cls, k))];
  const Tensor z0 = latent_map(model, Tensor::zeros(image.shape));
  const DistanceVector dv0 = distances(z0, protos);
  out.f_empty = dv0.values[static_cast<std::size_t>(protos.index_of(cls, k))];
  return out;
}

// Reads the upscaled map as a per-pixel attribution of the prototype
// distance. It is not one: the recorded completeness residual quantifies by
// how much it fails.
inline AttributionMap legacy_as_attribution(const LegacyMap& map) {
  if (map.upscaled.data.empty())
    throw std::invalid_argument("legacy_as_attribution: upscaled map missing");
  AttributionMap out;
  out.rows = map.upscaled.extent(0);
  out.cols = map.upscaled.extent(1);
  out.channels = 1;
  out.values = map.upscaled.data;
  out.method = "legacy";
  out.target = "distance[c=" + std::to_string(map.cls) + ",k=" + std::to_string(map.proto) + "]";
  out.f_full = map.f_full;
  out.f_empty = map.f_empty;
  double sum = 0.0;
  for (double v : out.values) sum += v;
  out.completeness_residual = sum - (out.f_full - out.f_empty);
  return out;
}

}  // namespace protoshap

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "protoshap/gauss.hpp"
#include "protoshap/model.hpp"
#include "protoshap/rng.hpp"
#include "protoshap/tensor.hpp"

namespace protoshap {

// A feature is either one spatial site with all its channels, or one scalar.
enum class Granularity { pixel, scalar };

struct Target {
  enum class Kind { distance, logit };
  Kind kind = Kind::distance;
  int cls = 0;
  int proto = 0;  // k within the class; used for distance targets

  std::string describe() const {
    if (kind == Kind::distance)
      return "distance[c=" + std::to_string(cls) + ",k=" + std::to_string(proto) + "]";
    return "logit[c=" + std::to_string(cls) + "]";
  }
};

// The masked set function f^: coalitions of image features map to one model
// scalar, with absent features replaced by the baseline value.
struct SetFunctionSpec {
  const ModelSpec* model = nullptr;
  Target target;
  Tensor image;
  double baseline = 0.0;
  Granularity granularity = Granularity::pixel;

  int feature_count() const {
    const int h = image.extent(0), w = image.extent(1);
    const int c = image.order() == 3 ? image.extent(2) : 1;
    return granularity == Granularity::pixel ? h * w : h * w * c;
  }
};

struct AttributionMap {
  int rows = 0;
  int cols = 0;
  int channels = 1;  // 1 for pixel granularity
  std::vector<double> values;
  std::string method;
  std::string target;
  double completeness_residual = 0.0;
  double f_full = 0.0;
  double f_empty = 0.0;
};

struct DaspConfig {
  int coalition_size_samples = 32;  // evenly spaced over 0..|P|-1, endpoints included
  Granularity granularity = Granularity::pixel;
};

namespace detail {

inline void check_spec(const SetFunctionSpec& spec) {
  if (spec.model == nullptr) throw std::invalid_argument("set function: no model");
  if (!std::isfinite(spec.baseline))
    throw std::invalid_argument("set function: baseline must be finite");
  if (spec.image.shape != spec.model->input_shape)
    throw std::invalid_argument("set function: image shape " + spec.image.shape_string() +
                                " does not match model input");
  if (spec.target.cls < 0 || spec.target.cls >= spec.model->prototypes.classes)
    throw std::invalid_argument("set function: target class out of range");
  if (spec.target.kind == Target::Kind::distance &&
      (spec.target.proto < 0 || spec.target.proto >= spec.model->prototypes.per_class))
    throw std::invalid_argument("set function: target prototype out of range");
}

// Scalar data indices covered by one feature.
inline std::pair<int, int> feature_span(const SetFunctionSpec& spec, int feature) {
  if (spec.granularity == Granularity::scalar) return {feature, feature + 1};
  const int c = spec.image.extent(2);
  return {feature * c, feature * c + c};
}

inline Tensor masked_image(const SetFunctionSpec& spec, const std::vector<char>& included) {
  Tensor im = spec.image;
  const int n = spec.feature_count();
  for (int f = 0; f < n; ++f) {
    if (included[static_cast<std::size_t>(f)]) continue;
    const auto [lo, hi] = feature_span(spec, f);
    for (int s = lo; s < hi; ++s) im.data[static_cast<std::size_t>(s)] = spec.baseline;
  }
  return im;
}

inline double target_value(const ModelSpec& model, const Tensor& image, const Target& t) {
  const Tensor z = latent_map(model, image);
  const DistanceVector d = distances(z, model.prototypes);
  if (t.kind == Target::Kind::distance)
    return d.values[static_cast<std::size_t>(model.prototypes.index_of(t.cls, t.proto))];
  return classify(model, d.values)[static_cast<std::size_t>(t.cls)];
}

inline double target_mean(const ModelSpec& model, const GaussianForwardResult& r,
                          const Target& t) {
  if (t.kind == Target::Kind::distance)
    return r.distances[static_cast<std::size_t>(model.prototypes.index_of(t.cls, t.proto))].mean;
  const int kc = model.prototypes.count();
  double acc = model.classifier_bias.empty()
                   ? 0.0
                   : model.classifier_bias[static_cast<std::size_t>(t.cls)];
  for (int j = 0; j < kc; ++j)
    acc += model.classifier_weights.data[static_cast<std::size_t>(t.cls * kc + j)] *
           r.distances[static_cast<std::size_t>(j)].mean;
  return acc;
}

inline AttributionMap make_map(const SetFunctionSpec& spec, const char* method) {
  AttributionMap m;
  m.rows = spec.image.extent(0);
  m.cols = spec.image.extent(1);
  m.channels = spec.granularity == Granularity::pixel ? 1 : spec.image.extent(2);
  m.values.assign(static_cast<std::size_t>(spec.feature_count()), 0.0);
  m.method = method;
  m.target = spec.target.describe();
  return m;
}

}  // namespace detail

inline double set_function_value(const SetFunctionSpec& spec, const std::vector<char>& included) {
  detail::check_spec(spec);
  return detail::target_value(*spec.model, detail::masked_image(spec, included), spec.target);
}

// Exact Shapley values by coalition enumeration. Only viable for small
// feature counts; refuses beyond 20 features.
inline AttributionMap exact_shapley(const SetFunctionSpec& spec) {
  detail::check_spec(spec);
  const int n = spec.feature_count();
  if (n > 20)
    throw std::invalid_argument("exact_shapley: " + std::to_string(n) +
                                " features exceeds the enumeration limit of 20");
  if (n < 1) throw std::invalid_argument("exact_shapley: no features");

  // f^ over every coalition, indexed by inclusion bitmask.
  const std::uint32_t total = 1u << n;
  std::vector<double> f(total);
  std::vector<char> included(static_cast<std::size_t>(n), 0);
  for (std::uint32_t mask = 0; mask < total; ++mask) {
    for (int i = 0; i < n; ++i) included[static_cast<std::size_t>(i)] = (mask >> i) & 1u;
    f[mask] = detail::target_value(*spec.model, detail::masked_image(spec, included),
                                   spec.target);
  }

  // Coalition weight |S|!(n-|S|-1)!/n! = 1 / (n * C(n-1, |S|)).
  std::vector<double> weight(static_cast<std::size_t>(n));
  double binom = 1.0;  // C(n-1, s), exact for n <= 20
  for (int s = 0; s < n; ++s) {
    weight[static_cast<std::size_t>(s)] = 1.0 / (static_cast<double>(n) * binom);
    binom = binom * static_cast<double>(n - 1 - s) / static_cast<double>(s + 1);
  }

  AttributionMap out = detail::make_map(spec, "oracle");
  for (int i = 0; i < n; ++i) {
    const std::uint32_t bit = 1u << i;
    double psi = 0.0;
    for (std::uint32_t mask = 0; mask < total; ++mask) {
      if (mask & bit) continue;
      psi += weight[static_cast<std::size_t>(std::popcount(mask))] * (f[mask | bit] - f[mask]);
    }
    out.values[static_cast<std::size_t>(i)] = psi;
  }

  out.f_full = f[total - 1];
  out.f_empty = f[0];
  double sum = 0.0;
  for (double v : out.values) sum += v;
  out.completeness_residual = sum - (out.f_full - out.f_empty);
  return out;
}

// Unbiased permutation-sampling estimate; deterministic for a fixed seed.
inline AttributionMap sampled_shapley(const SetFunctionSpec& spec, int permutations,
                                      std::uint64_t seed) {
  detail::check_spec(spec);
  if (permutations < 1) throw std::invalid_argument("sampled_shapley: permutations must be >= 1");
  const int n = spec.feature_count();

  AttributionMap out = detail::make_map(spec, "sampler");
  std::vector<char> included(static_cast<std::size_t>(n), 0);
  out.f_empty = detail::target_value(*spec.model, detail::masked_image(spec, included),
                                     spec.target);
  std::fill(included.begin(), included.end(), 1);
  out.f_full = detail::target_value(*spec.model, detail::masked_image(spec, included),
                                    spec.target);

  Rng rng(seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int p = 0; p < permutations; ++p) {
    rng.shuffle(order);
    std::fill(included.begin(), included.end(), 0);
    double prev = out.f_empty;
    for (int i : order) {
      included[static_cast<std::size_t>(i)] = 1;
      const double cur = detail::target_value(
          *spec.model, detail::masked_image(spec, included), spec.target);
      out.values[static_cast<std::size_t>(i)] += cur - prev;
      prev = cur;
    }
  }
  for (double& v : out.values) v /= static_cast<double>(permutations);

  double sum = 0.0;
  for (double v : out.values) sum += v;
  out.completeness_residual = sum - (out.f_full - out.f_empty);
  return out;
}

namespace detail {

inline std::vector<int> coalition_size_schedule(int samples, int n) {
  if (samples < 1 || samples > n)
    throw std::invalid_argument("dasp: coalition size samples must be in [1, feature count]");
  std::vector<int> sizes;
  if (samples >= n) {
    for (int d = 0; d < n; ++d) sizes.push_back(d);
    return sizes;
  }
  if (samples == 1) return {0};
  for (int t = 0; t < samples; ++t) {
    const int d = static_cast<int>(std::lround(static_cast<double>(t) *
                                               static_cast<double>(n - 1) /
                                               static_cast<double>(samples - 1)));
    if (sizes.empty() || sizes.back() != d) sizes.push_back(d);
  }
  return sizes;
}

// Average of E_d over d = 0..n-1: exact mean when every size was evaluated,
// trapezoidal mean over the subsampled grid otherwise.
inline double average_over_sizes(const std::vector<int>& sizes, const std::vector<double>& e,
                                 int n) {
  if (static_cast<int>(sizes.size()) == n) {
    double s = 0.0;
    for (double v : e) s += v;
    return s / static_cast<double>(n);
  }
  if (sizes.size() == 1) return e[0];
  double integral = 0.0;
  for (std::size_t t = 0; t + 1 < sizes.size(); ++t)
    integral += static_cast<double>(sizes[t + 1] - sizes[t]) * 0.5 * (e[t] + e[t + 1]);
  return integral / static_cast<double>(sizes.back() - sizes.front());
}

}  // namespace detail

// Shapley approximation via moment propagation: coalitions of size d are
// modeled feature-wise as Bernoulli mixtures with inclusion probability
// q = d/(|P|-1), encoded as input means and variances, and each expected
// marginal contribution is the difference of two propagated target means.
inline AttributionMap dasp_shapley(const SetFunctionSpec& spec, const DaspConfig& config) {
  detail::check_spec(spec);
  if (config.granularity != spec.granularity)
    throw std::invalid_argument("dasp: config granularity differs from spec");
  const int n = spec.feature_count();
  if (n < 1) throw std::invalid_argument("dasp: no features");
  const ModelSpec& model = *spec.model;
  validate(model);  // also guarantees every layer kind has a probabilistic twin

  const std::vector<int> sizes = detail::coalition_size_schedule(
      config.coalition_size_samples, n);

  AttributionMap out = detail::make_map(spec, "dasp");
  const double b = spec.baseline;

  GaussianTensor enc{Tensor::zeros(spec.image.shape), Tensor::zeros(spec.image.shape)};
  std::vector<double> e_by_size(sizes.size());
  std::vector<std::vector<double>> e(static_cast<std::size_t>(n), e_by_size);

  for (std::size_t t = 0; t < sizes.size(); ++t) {
    const double q = n > 1 ? static_cast<double>(sizes[t]) / static_cast<double>(n - 1) : 0.0;
    // Coalition encoding shared by all features at this size.
    for (std::size_t s = 0; s < spec.image.data.size(); ++s) {
      const double x = spec.image.data[s];
      enc.mean.data[s] = q * x + (1.0 - q) * b;
      enc.var.data[s] = q * (1.0 - q) * (x - b) * (x - b);
    }
    for (int i = 0; i < n; ++i) {
      const auto [lo, hi] = detail::feature_span(spec, i);
      // Feature i absent: pinned to the baseline with zero variance.
      for (int s = lo; s < hi; ++s) {
        enc.mean.data[static_cast<std::size_t>(s)] = b;
        enc.var.data[static_cast<std::size_t>(s)] = 0.0;
      }
      const double absent = detail::target_mean(model, g_forward(model, enc), spec.target);
      // Feature i present: pinned to its actual value.
      for (int s = lo; s < hi; ++s)
        enc.mean.data[static_cast<std::size_t>(s)] = spec.image.data[static_cast<std::size_t>(s)];
      const double present = detail::target_mean(model, g_forward(model, enc), spec.target);
      e[static_cast<std::size_t>(i)][t] = present - absent;
      // Restore the shared encoding for the next feature.
      for (int s = lo; s < hi; ++s) {
        const double x = spec.image.data[static_cast<std::size_t>(s)];
        enc.mean.data[static_cast<std::size_t>(s)] = q * x + (1.0 - q) * b;
        enc.var.data[static_cast<std::size_t>(s)] = q * (1.0 - q) * (x - b) * (x - b);
      }
    }
  }

  for (int i = 0; i < n; ++i)
    out.values[static_cast<std::size_t>(i)] =
        detail::average_over_sizes(sizes, e[static_cast<std::size_t>(i)], n);

  std::vector<char> included(static_cast<std::size_t>(n), 1);
  out.f_full = detail::target_value(model, detail::masked_image(spec, included), spec.target);
  std::fill(included.begin(), included.end(), 0);
  out.f_empty = detail::target_value(model, detail::masked_image(spec, included), spec.target);
  double sum = 0.0;
  for (double v : out.values) sum += v;
  out.completeness_residual = sum - (out.f_full - out.f_empty);
  return out;
}

// Combines per-prototype distance attributions into a logit attribution via
// the linearity of the classifier. Maps must be ordered by prototype index
// (c*K + k) and share layout and method.
inline AttributionMap attribution_for_logit(const std::vector<AttributionMap>& maps,
                                            const Tensor& classifier_weights, int cls,
                                            const std::vector<double>& classifier_bias = {}) {
  if (maps.empty()) throw std::invalid_argument("attribution_for_logit: no maps");
  const int kc = classifier_weights.extent(1);
  if (static_cast<int>(maps.size()) != kc)
    throw std::invalid_argument("attribution_for_logit: expected " + std::to_string(kc) +
                                " maps, got " + std::to_string(maps.size()));
  if (cls < 0 || cls >= classifier_weights.extent(0))
    throw std::invalid_argument("attribution_for_logit: class out of range");
  for (const AttributionMap& m : maps)
    if (m.rows != maps[0].rows || m.cols != maps[0].cols || m.channels != maps[0].channels ||
        m.method != maps[0].method)
      throw std::invalid_argument("attribution_for_logit: inconsistent maps");

  AttributionMap out = maps[0];
  out.target = "logit[c=" + std::to_string(cls) + "]";
  std::fill(out.values.begin(), out.values.end(), 0.0);
  const double bias =
      classifier_bias.empty() ? 0.0 : classifier_bias[static_cast<std::size_t>(cls)];
  out.f_full = bias;
  out.f_empty = bias;
  for (int j = 0; j < kc; ++j) {
    const double w = classifier_weights.data[static_cast<std::size_t>(cls * kc + j)];
    const AttributionMap& m = maps[static_cast<std::size_t>(j)];
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += w * m.values[i];
    out.f_full += w * m.f_full;
    out.f_empty += w * m.f_empty;
  }
  double sum = 0.0;
  for (double v : out.values) sum += v;
  out.completeness_residual = sum - (out.f_full - out.f_empty);
  return out;
}

// Attribution of the negated target; by linearity this is the element-wise
// negation. Used to rank features by how much they support a prototype match
// when the underlying target is a distance.
inline AttributionMap negated_attribution(const AttributionMap& map) {
  AttributionMap out = map;
  for (double& v : out.values) v = -v;
  out.f_full = -map.f_full;
  out.f_empty = -map.f_empty;
  out.completeness_residual = -map.completeness_residual;
  out.target = "neg(" + map.target + ")";
  return out;
}

}  // namespace protoshap

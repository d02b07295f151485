#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoshap/format.hpp"
#include "protoshap/gauss.hpp"
#include "protoshap/legacy.hpp"
#include "protoshap/model.hpp"
#include "protoshap/rng.hpp"
#include "protoshap/shapley.hpp"
#include "protoshap/tensor.hpp"

namespace protoshap {

// Distance values under iterative removal of the highest-attribution
// features from the prototype's source image.
struct PerturbationCurve {
  int cls = 0;
  int proto = 0;
  std::string image_id;
  std::vector<int> removal_order;  // feature indices, removal sequence
  std::vector<double> s;           // s[t] for t = 0..T
  std::vector<double> terms;       // s[0] - s[t] for t = 1..T
};

enum class AopcNormalization { paper_literal, per_term };

struct AopcReport {
  double score = 0.0;
  AopcNormalization mode = AopcNormalization::paper_literal;
  double raw_sum = 0.0;
  int classes = 0;
  int per_class = 0;
  int steps = 0;
  std::vector<PerturbationCurve> curves;
  std::string verdict;  // filled by comparisons
};

inline int default_removal_steps(int feature_count) {
  return (feature_count + 9) / 10;  // 10% rounded up
}

// Removal ranking: highest attribution first, ties in row-major feature
// order. The attribution passed in must be oriented so that larger values
// mean more supportive of the prototype match.
inline std::vector<int> removal_ranking(const AttributionMap& attribution) {
  std::vector<int> order(attribution.values.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double va = attribution.values[static_cast<std::size_t>(a)];
    const double vb = attribution.values[static_cast<std::size_t>(b)];
    if (va != vb) return va > vb;
    return a < b;
  });
  return order;
}

// At step t the t highest-ranked features of the source image are replaced
// with 0 and the prototype distance is recomputed by a full forward pass.
inline PerturbationCurve perturbation_curve(const ModelSpec& model, int cls, int k,
                                            const Tensor& source_image,
                                            const AttributionMap& attribution, int steps) {
  const PrototypeSet& protos = model.prototypes;
  if (cls < 0 || cls >= protos.classes || k < 0 || k >= protos.per_class)
    throw std::invalid_argument("perturbation_curve: prototype out of range");
  const int idx = protos.index_of(cls, k);
  if (!protos.has_provenance())
    throw std::invalid_argument("perturbation_curve: prototype (" + std::to_string(cls) + ", " +
                                std::to_string(k) + ") has no provenance");
  if (attribution.rows != source_image.extent(0) || attribution.cols != source_image.extent(1))
    throw std::invalid_argument("perturbation_curve: attribution does not cover the image");
  const int channels = source_image.order() == 3 ? source_image.extent(2) : 1;
  const int per_feature = attribution.channels == 1 ? channels : 1;
  const int n = static_cast<int>(attribution.values.size());
  if (steps < 0 || steps > n)
    throw std::invalid_argument("perturbation_curve: steps must be in [0, feature count]");

  PerturbationCurve curve;
  curve.cls = cls;
  curve.proto = k;
  curve.image_id = protos.provenance[static_cast<std::size_t>(idx)].image_id;

  const std::vector<int> ranked = removal_ranking(attribution);
  curve.removal_order.assign(ranked.begin(), ranked.begin() + steps);

  Tensor im = source_image;
  const auto distance_now = [&]() {
    const DistanceVector d = distances(latent_map(model, im), protos);
    return d.values[static_cast<std::size_t>(idx)];
  };
  curve.s.push_back(distance_now());
  for (int t = 0; t < steps; ++t) {
    const int f = ranked[static_cast<std::size_t>(t)];
    for (int s = 0; s < per_feature; ++s)
      im.data[static_cast<std::size_t>(f * per_feature + s)] = 0.0;
    curve.s.push_back(distance_now());
    curve.terms.push_back(curve.s[0] - curve.s.back());
  }
  return curve;
}

// Area over the perturbation curve. The literal normalization divides the
// triple sum by (C + K + T - 1); the per-term mode divides by C*K*T.
inline AopcReport aopc(std::vector<PerturbationCurve> curves, int classes, int per_class,
                       AopcNormalization mode) {
  if (curves.empty()) throw std::invalid_argument("aopc: no curves");
  const std::size_t steps = curves[0].terms.size();
  for (const PerturbationCurve& c : curves)
    if (c.terms.size() != steps)
      throw std::invalid_argument("aopc: curves disagree on step count");

  AopcReport r;
  r.mode = mode;
  r.classes = classes;
  r.per_class = per_class;
  r.steps = static_cast<int>(steps);
  for (const PerturbationCurve& c : curves)
    for (double term : c.terms) r.raw_sum += term;
  if (mode == AopcNormalization::paper_literal) {
    r.score = r.raw_sum / static_cast<double>(classes + per_class + r.steps - 1);
  } else {
    const long long cells = static_cast<long long>(classes) * per_class * r.steps;
    r.score = cells == 0 ? 0.0 : r.raw_sum / static_cast<double>(cells);
  }
  r.curves = std::move(curves);
  return r;
}

inline AopcReport aopc(std::vector<PerturbationCurve> curves, AopcNormalization mode) {
  int classes = 0, per_class = 0;
  for (const PerturbationCurve& c : curves) {
    classes = std::max(classes, c.cls + 1);
    per_class = std::max(per_class, c.proto + 1);
  }
  return aopc(std::move(curves), classes, per_class, mode);
}

inline void curves_to_csv(std::ostream& os, const std::vector<PerturbationCurve>& curves) {
  os << "prototype_class,prototype_index,t,s_t,term\n";
  for (const PerturbationCurve& c : curves) {
    for (std::size_t t = 0; t < c.s.size(); ++t) {
      const double term = t == 0 ? 0.0 : c.terms[t - 1];
      os << c.cls << ',' << c.proto << ',' << t << ',' << format_double(c.s[t]) << ','
         << format_double(term) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Monte-Carlo validation of the closed-form moments.

enum class MomentKind { relu1, relu, sq_l2, min_pool };

struct MomentCheck {
  std::string label;
  double closed_mean = 0.0, closed_var = 0.0;
  double mc_mean = 0.0, mc_var = 0.0;
  double mean_z = 0.0, var_z = 0.0;  // |closed - sampled| in standard errors
  double mean_rel = 0.0;             // relative deviation of the mean
};

struct MomentReport {
  MomentKind kind = MomentKind::relu1;
  long long samples = 0;
  std::vector<MomentCheck> checks;
  double max_mean_z = 0.0, max_var_z = 0.0, max_mean_rel = 0.0;
  double z_gate = 4.0;         // exact closed forms must sit within this
  double rel_envelope = 0.05;  // documented envelope for the Clark min-pool
  bool pass = false;
};

namespace detail {

struct SampleStats {
  double mean = 0.0, var = 0.0;
  double se_mean = 0.0, se_var = 0.0;
};

inline SampleStats summarize(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double m2 = 0.0, m4 = 0.0;
  for (double x : xs) {
    const double d = x - mean;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m4 /= n;
  SampleStats s;
  s.mean = mean;
  s.var = m2 * n / (n - 1.0);
  s.se_mean = std::sqrt(m2 / n);
  const double var_of_var = (m4 - m2 * m2) / n;
  s.se_var = std::sqrt(var_of_var > 0.0 ? var_of_var : 0.0);
  return s;
}

inline MomentCheck check_against(const std::string& label, const Gaussian& closed,
                                 const std::vector<double>& draws) {
  const SampleStats st = summarize(draws);
  MomentCheck c;
  c.label = label;
  c.closed_mean = closed.mean;
  c.closed_var = closed.var;
  c.mc_mean = st.mean;
  c.mc_var = st.var;
  // A zero standard error means every draw agreed. The sample then only
  // resolves the distribution down to event probabilities of order 1/n, so
  // deviations below that resolution count as agreement.
  const double n = static_cast<double>(draws.size());
  const double se_mean = st.se_mean > 0.0 ? st.se_mean : (1.0 + std::abs(st.mean)) * 3.0 / n;
  const double se_var = st.se_var > 0.0 ? st.se_var : (1.0 + std::abs(st.var)) * 3.0 / n;
  c.mean_z = std::abs(closed.mean - st.mean) / se_mean;
  c.var_z = std::abs(closed.var - st.var) / se_var;
  const double denom = std::max(std::abs(st.mean), 1e-12);
  c.mean_rel = std::abs(closed.mean - st.mean) / denom;
  return c;
}

}  // namespace detail

struct MomentGridOptions {
  // relu/relu1 grid extents
  std::vector<double> means;
  std::vector<double> sigmas;
  // random instance counts for sq_l2 and min_pool
  int instances = 50;
  int max_length = 16;  // vector length bound for sq_l2
  int pool_size = 4;    // Gaussians per min_pool instance
};

inline MomentGridOptions default_moment_grid() {
  MomentGridOptions g;
  for (int i = 0; i <= 12; ++i) g.means.push_back(-3.0 + 0.5 * i);        // 13 values
  for (int i = 0; i < 8; ++i) g.sigmas.push_back(0.1 + (3.0 - 0.1) / 7.0 * i);  // 8 values
  return g;
}

// Compares every closed-form moment against Monte-Carlo estimates from the
// given number of draws. Exact forms (relu, relu1, squared distance) are
// gated at 4 standard errors; the Clark min-pool is an approximation and is
// gated by the relative envelope on the mean instead.
inline MomentReport validate_moments(MomentKind kind, long long samples, std::uint64_t seed,
                                     const MomentGridOptions& grid = default_moment_grid()) {
  if (samples < 10000)
    throw std::invalid_argument("validate_moments: need at least 10^4 samples");
  MomentReport report;
  report.kind = kind;
  report.samples = samples;
  Rng rng(seed);
  std::vector<double> draws(static_cast<std::size_t>(samples));

  if (kind == MomentKind::relu1 || kind == MomentKind::relu) {
    for (double mu : grid.means) {
      for (double sigma : grid.sigmas) {
        const double var = sigma * sigma;
        const Gaussian closed =
            kind == MomentKind::relu1 ? relu1_moments(mu, var) : relu_moments(mu, var);
        for (double& d : draws) {
          const double x = mu + sigma * rng.normal();
          d = kind == MomentKind::relu1 ? relu1_scalar(x) : (x < 0.0 ? 0.0 : x);
        }
        report.checks.push_back(detail::check_against(
            "mu=" + format_double(mu) + " sigma=" + format_double(sigma), closed, draws));
      }
    }
  } else if (kind == MomentKind::sq_l2) {
    for (int inst = 0; inst < grid.instances; ++inst) {
      const int L = rng.uniform_int(1, grid.max_length);
      std::vector<double> mean(static_cast<std::size_t>(L)), var(static_cast<std::size_t>(L)),
          proto(static_cast<std::size_t>(L));
      for (int l = 0; l < L; ++l) {
        mean[static_cast<std::size_t>(l)] = rng.uniform(-2.0, 2.0);
        var[static_cast<std::size_t>(l)] = rng.uniform(0.0, 1.5);
        proto[static_cast<std::size_t>(l)] = rng.uniform(-1.0, 1.0);
      }
      const Gaussian closed = g_sq_l2_distance(mean, var, proto);
      for (double& d : draws) {
        double acc = 0.0;
        for (int l = 0; l < L; ++l) {
          const double z = mean[static_cast<std::size_t>(l)] +
                           std::sqrt(var[static_cast<std::size_t>(l)]) * rng.normal();
          const double diff = z - proto[static_cast<std::size_t>(l)];
          acc += diff * diff;
        }
        d = acc;
      }
      report.checks.push_back(
          detail::check_against("instance=" + std::to_string(inst) + " L=" + std::to_string(L),
                                closed, draws));
    }
  } else {  // min_pool
    // Means bounded away from zero keep the relative-error envelope
    // meaningful; near-zero pooled means would inflate it arbitrarily.
    for (int inst = 0; inst < grid.instances; ++inst) {
      std::vector<Gaussian> items(static_cast<std::size_t>(grid.pool_size));
      for (Gaussian& g : items) {
        g.mean = rng.uniform(1.0, 4.0);
        g.var = rng.uniform(0.1, 1.0);
      }
      const Gaussian closed = g_min_pool(items);
      for (double& d : draws) {
        double m = 1e300;
        for (const Gaussian& g : items)
          m = std::min(m, g.mean + std::sqrt(g.var) * rng.normal());
        d = m;
      }
      report.checks.push_back(
          detail::check_against("instance=" + std::to_string(inst), closed, draws));
    }
  }

  for (const MomentCheck& c : report.checks) {
    report.max_mean_z = std::max(report.max_mean_z, c.mean_z);
    report.max_var_z = std::max(report.max_var_z, c.var_z);
    report.max_mean_rel = std::max(report.max_mean_rel, c.mean_rel);
  }
  report.pass = kind == MomentKind::min_pool
                    ? report.max_mean_rel <= report.rel_envelope
                    : (report.max_mean_z <= report.z_gate && report.max_var_z <= report.z_gate);
  return report;
}

inline void moment_report_to_csv(std::ostream& os, const MomentReport& report) {
  os << "label,closed_mean,mc_mean,mean_z,closed_var,mc_var,var_z,mean_rel\n";
  for (const MomentCheck& c : report.checks)
    os << c.label << ',' << format_double(c.closed_mean) << ',' << format_double(c.mc_mean)
       << ',' << format_double(c.mean_z) << ',' << format_double(c.closed_var) << ','
       << format_double(c.mc_var) << ',' << format_double(c.var_z) << ','
       << format_double(c.mean_rel) << '\n';
}

// ---------------------------------------------------------------------------
// The two-layer construction showing that upscaled distance maps carry no
// spatial meaning: both kernels react only to their top-left tap, so the
// sole active latent cell sits at the bottom-right while the only causal
// input pixel is the top-left one.

struct CounterexampleFixture {
  ModelSpec model;
  Tensor input;           // 3x3x1, single 1 at (0, 0)
  int activation_row = 0; // expected active cell in the 2x2 latent map
  int activation_col = 0;
};

inline CounterexampleFixture counterexample_fixture() {
  const auto top_left_kernel = [] {
    Tensor k = Tensor::zeros({3, 3, 1, 1});
    k.at4(0, 0, 0, 0) = 1.0;
    return k;
  };
  const auto identity_1x1 = [](Activation act) {
    LayerDesc l;
    l.kind = LayerKind::conv;
    l.weights = Tensor{{1, 1, 1, 1}, {1.0}};
    l.bias = {0.0};
    l.stride = 1;
    l.padding = 0;
    l.activation = act;
    return l;
  };

  CounterexampleFixture fx;
  fx.model.input_shape = {3, 3, 1};

  LayerDesc conv1;
  conv1.kind = LayerKind::conv;
  conv1.weights = top_left_kernel();
  conv1.bias = {0.0};
  conv1.stride = 1;
  conv1.padding = 1;
  conv1.activation = Activation::none;
  LayerDesc conv2 = conv1;
  conv2.stride = 2;
  fx.model.backbone = {conv1, conv2};

  fx.model.extractor = {identity_1x1(Activation::none), identity_1x1(Activation::relu1)};

  fx.model.prototypes.per_class = 1;
  fx.model.prototypes.classes = 1;
  fx.model.prototypes.channels = 1;
  fx.model.prototypes.values = {{1.0}};
  fx.model.prototypes.provenance = {{0, 0, "counterexample-input", 1, 1}};
  fx.model.classifier_weights = Tensor{{1, 1}, {-1.0}};

  fx.input = Tensor::zeros({3, 3, 1});
  fx.input.at(0, 0, 0) = 1.0;
  fx.activation_row = 1;
  fx.activation_col = 1;
  return fx;
}

}  // namespace protoshap

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "protoshap/evaluation.hpp"
#include "protoshap/modelgen.hpp"

using namespace protoshap;

namespace {

const LabeledImage& source_of(const GeneratedBundle& b, int cls, int k) {
  const int idx = b.model.prototypes.index_of(cls, k);
  const auto& prov = b.model.prototypes.provenance[static_cast<std::size_t>(idx)];
  for (const LabeledImage& im : b.training)
    if (im.id == prov.image_id) return im;
  throw std::logic_error("source image missing");
}

}  // namespace

TEST_CASE("removal ranking is attribution-descending with row-major ties") {
  AttributionMap a;
  a.rows = 2;
  a.cols = 2;
  a.values = {0.5, 0.9, 0.5, 0.1};
  CHECK(removal_ranking(a) == std::vector<int>{1, 0, 2, 3});
  a.values = {0.3, 0.3, 0.3, 0.3};
  CHECK(removal_ranking(a) == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("perturbation curves on the counterexample fixture") {
  const CounterexampleFixture fx = counterexample_fixture();

  SECTION("zero steps give an empty curve") {
    AttributionMap flat;
    flat.rows = 3;
    flat.cols = 3;
    flat.values.assign(9, 0.0);
    const PerturbationCurve c = perturbation_curve(fx.model, 0, 0, fx.input, flat, 0);
    CHECK(c.terms.empty());
    CHECK(c.s.size() == 1);
    CHECK(c.s[0] == 0.0);
  }

  SECTION("legacy ordering removes a dead pixel first, the term stays zero") {
    const AttributionMap legacy =
        legacy_as_attribution(legacy_map(fx.model, fx.input, 0, 0));
    const PerturbationCurve c = perturbation_curve(fx.model, 0, 0, fx.input, legacy, 1);
    CHECK(c.removal_order[0] == 8);  // bottom-right pixel, causally dead
    CHECK(c.s[1] == 0.0);
    CHECK(c.terms[0] == 0.0);
  }

  SECTION("the similarity-oriented oracle removes the causal pixel first") {
    SetFunctionSpec spec;
    spec.model = &fx.model;
    spec.image = fx.input;
    spec.target = {Target::Kind::distance, 0, 0};
    const AttributionMap faith = negated_attribution(exact_shapley(spec));
    const PerturbationCurve c = perturbation_curve(fx.model, 0, 0, fx.input, faith, 1);
    CHECK(c.removal_order[0] == 0);
    CHECK(c.s[1] > 0.0);
    CHECK(c.terms[0] < 0.0);

    // ordering sensitivity: oracle ordering scores strictly below legacy
    const AttributionMap legacy =
        legacy_as_attribution(legacy_map(fx.model, fx.input, 0, 0));
    const PerturbationCurve cl = perturbation_curve(fx.model, 0, 0, fx.input, legacy, 1);
    for (auto mode : {AopcNormalization::paper_literal, AopcNormalization::per_term})
      CHECK(aopc({c}, 1, 1, mode).score < aopc({cl}, 1, 1, mode).score);
  }

  SECTION("provenance is required") {
    ModelSpec stripped = fx.model;
    stripped.prototypes.provenance.clear();
    AttributionMap flat;
    flat.rows = 3;
    flat.cols = 3;
    flat.values.assign(9, 0.0);
    CHECK_THROWS_WITH(perturbation_curve(stripped, 0, 0, fx.input, flat, 1),
                      Catch::Matchers::ContainsSubstring("provenance"));
  }
}

TEST_CASE("curves are deterministic and their terms stay nonpositive after projection") {
  const GeneratedBundle b = generate_projected(1600);
  for (int c = 0; c < b.model.prototypes.classes; ++c) {
    for (int k = 0; k < b.model.prototypes.per_class; ++k) {
      const LabeledImage& src = source_of(b, c, k);
      const AttributionMap legacy =
          legacy_as_attribution(legacy_map(b.model, src.image, c, k));
      const int n = static_cast<int>(legacy.values.size());
      const PerturbationCurve c1 =
          perturbation_curve(b.model, c, k, src.image, legacy, default_removal_steps(n));
      const PerturbationCurve c2 =
          perturbation_curve(b.model, c, k, src.image, legacy, default_removal_steps(n));
      CHECK(c1.s == c2.s);
      CHECK(c1.removal_order == c2.removal_order);
      CHECK(std::abs(c1.s[0]) <= 1e-9);
      for (double t : c1.terms) CHECK(t <= 1e-9);
    }
  }
}

TEST_CASE("aopc normalizations") {
  SECTION("all-zero curves score zero") {
    PerturbationCurve c;
    c.s = {0.0, 0.0};
    c.terms = {0.0};
    const AopcReport r = aopc({c, c}, 1, 2, AopcNormalization::paper_literal);
    CHECK(r.score == 0.0);
  }

  SECTION("single curve, single step, s(1) = 2") {
    PerturbationCurve c;
    c.s = {0.0, 2.0};
    c.terms = {-2.0};
    // literal prefactor: (0 - 2) / (C + K + T - 1) = -2 / 2
    const AopcReport lit = aopc({c}, 1, 1, AopcNormalization::paper_literal);
    CHECK(lit.score == -1.0);
    // per-term: -2 / (C * K * T) = -2
    const AopcReport per = aopc({c}, 1, 1, AopcNormalization::per_term);
    CHECK(per.score == -2.0);
  }

  SECTION("the two normalizations agree on the raw sum") {
    const GeneratedBundle b = generate_projected(1601);
    std::vector<PerturbationCurve> curves;
    for (int c = 0; c < b.model.prototypes.classes; ++c)
      for (int k = 0; k < b.model.prototypes.per_class; ++k) {
        const LabeledImage& src = source_of(b, c, k);
        const AttributionMap legacy =
            legacy_as_attribution(legacy_map(b.model, src.image, c, k));
        curves.push_back(perturbation_curve(b.model, c, k, src.image, legacy, 4));
      }
    const int C = b.model.prototypes.classes, K = b.model.prototypes.per_class;
    const AopcReport lit = aopc(curves, C, K, AopcNormalization::paper_literal);
    const AopcReport per = aopc(curves, C, K, AopcNormalization::per_term);
    const int T = lit.steps;
    CHECK_THAT(per.score * (C * K * T),
               Catch::Matchers::WithinAbs(lit.score * (C + K + T - 1), 1e-12));
    CHECK(lit.score <= 0.0);
    CHECK(per.score <= 0.0);
  }

  SECTION("empty input is rejected") {
    CHECK_THROWS_AS(aopc({}, 1, 1, AopcNormalization::per_term), std::invalid_argument);
  }
}

TEST_CASE("faith ordering beats legacy ordering on a screened model") {
  ModelGenOptions o;
  o.per_class = 2;
  o.min_conv_layers = 2;
  o.max_conv_layers = 2;
  o.extractor_gain = 0.8;
  o.extractor_bias_lo = 0.35;
  o.extractor_bias_hi = 0.6;
  const GeneratedBundle b = generate_projected(4104, o, 6);

  std::vector<PerturbationCurve> faith_curves, legacy_curves;
  for (int c = 0; c < b.model.prototypes.classes; ++c) {
    for (int k = 0; k < b.model.prototypes.per_class; ++k) {
      const LabeledImage& src = source_of(b, c, k);
      SetFunctionSpec spec;
      spec.model = &b.model;
      spec.image = src.image;
      spec.target = {Target::Kind::distance, c, k};
      DaspConfig cfg;
      cfg.coalition_size_samples = 32;
      const AttributionMap faith = negated_attribution(dasp_shapley(spec, cfg));
      const AttributionMap legacy =
          legacy_as_attribution(legacy_map(b.model, src.image, c, k));
      faith_curves.push_back(perturbation_curve(b.model, c, k, src.image, faith, 18));
      legacy_curves.push_back(perturbation_curve(b.model, c, k, src.image, legacy, 18));
    }
  }
  for (auto mode : {AopcNormalization::paper_literal, AopcNormalization::per_term}) {
    const AopcReport f = aopc(faith_curves, 2, 2, mode);
    const AopcReport l = aopc(legacy_curves, 2, 2, mode);
    CHECK(f.score < l.score);
  }
}

TEST_CASE("curve CSV export") {
  PerturbationCurve c;
  c.cls = 1;
  c.proto = 0;
  c.s = {0.0, 0.5, 1.25};
  c.terms = {-0.5, -1.25};
  std::ostringstream os;
  curves_to_csv(os, {c});
  CHECK(os.str() ==
        "prototype_class,prototype_index,t,s_t,term\n"
        "1,0,0,0,0\n"
        "1,0,1,0.5,-0.5\n"
        "1,0,2,1.25,-1.25\n");
}

TEST_CASE("moment validation harness") {
  SECTION("relu1 closed forms sit inside four standard errors") {
    MomentGridOptions grid;
    grid.means = {-2.0, -0.5, 0.0, 0.5, 2.0};
    grid.sigmas = {0.2, 1.0, 2.5};
    const MomentReport r = validate_moments(MomentKind::relu1, 200'000, 42, grid);
    CHECK(r.pass);
    CHECK(r.max_mean_z <= 4.0);
    CHECK(r.max_var_z <= 4.0);
    CHECK(r.checks.size() == 15);
  }
  SECTION("relu closed forms pass as well") {
    MomentGridOptions grid;
    grid.means = {-1.0, 0.0, 1.5};
    grid.sigmas = {0.5, 1.5};
    CHECK(validate_moments(MomentKind::relu, 100'000, 43, grid).pass);
  }
  SECTION("squared distance closed forms pass") {
    MomentGridOptions grid;
    grid.instances = 10;
    grid.max_length = 8;
    CHECK(validate_moments(MomentKind::sq_l2, 200'000, 44, grid).pass);
  }
  SECTION("the Clark min-pool stays within its documented envelope") {
    MomentGridOptions grid;
    grid.instances = 10;
    grid.pool_size = 4;
    const MomentReport r = validate_moments(MomentKind::min_pool, 200'000, 45, grid);
    CHECK(r.pass);
    CHECK(r.max_mean_rel <= 0.05);
  }
  SECTION("sample floor is enforced") {
    CHECK_THROWS_AS(validate_moments(MomentKind::relu1, 9'999, 1), std::invalid_argument);
  }
  SECTION("reports are deterministic for a fixed seed") {
    MomentGridOptions grid;
    grid.means = {0.0};
    grid.sigmas = {1.0};
    const MomentReport a = validate_moments(MomentKind::relu1, 50'000, 7, grid);
    const MomentReport b = validate_moments(MomentKind::relu1, 50'000, 7, grid);
    CHECK(a.checks[0].mc_mean == b.checks[0].mc_mean);
    CHECK(a.checks[0].mc_var == b.checks[0].mc_var);
  }
}

TEST_CASE("counterexample fixture construction") {
  const CounterexampleFixture fx = counterexample_fixture();
  const ForwardResult r = forward(fx.model, fx.input);
  REQUIRE(r.latent.shape == std::vector<int>{2, 2, 1});
  CHECK(r.latent.at(fx.activation_row, fx.activation_col, 0) == 1.0);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      if (i != fx.activation_row || j != fx.activation_col) CHECK(r.latent.at(i, j, 0) == 0.0);
  CHECK(fx.input.at(0, 0, 0) == 1.0);
}

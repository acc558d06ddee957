#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "raproscope/attribution.hpp"
#include "raproscope/errors.hpp"
#include "raproscope/inference.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace raproscope;
using testutil::random_tensor;
using namespace oracle;

namespace {

void expect_close(const Tensor& got, const std::vector<double>& want, double tol, const std::string& what) {
  ASSERT_EQ(got.size(), want.size()) << what;
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << what << " [" << i << "]";
}

}  // namespace

TEST(RapInit, WorkedExample) {
  // z = [3, -1], b = 0, R = 2 -> |R| sums to 4, scaled by 2/4.
  const Matrix w = {{1.0}, {-1.0}};
  const LinearMap map = LinearMap::from_matrix(to_weight(w));
  const Tensor r = rap_absolute_influence_init(map, to_float({3.0, 1.0}), 0, 2.0f, 0.0f);
  EXPECT_NEAR(r[0], 1.5, 1e-7);
  EXPECT_NEAR(r[1], 0.5, 1e-7);
}

TEST(RapInit, MatchesOracleIncludingBias) {
  std::mt19937_64 rng(40);
  for (int t = 0; t < 200; ++t) {
    SmallLayer L = random_small_layer(rng, true);
    const std::size_t j = std::size_t(t) % L.r.size();
    double z = 0.0;
    for (std::size_t i = 0; i < L.m.size(); ++i) z += L.m[i] * L.w[i][j];
    if (std::fabs(z) < 1e-3) continue;
    const double b = q(0.1 * (t % 5) - 0.2);
    const double logit = q(z + b);
    if (std::fabs(logit) < 1e-3) continue;
    const Tensor got = rap_absolute_influence_init(LinearMap::from_matrix(to_weight(L.w)), to_float(L.m), j,
                                                   float(logit), float(b));
    expect_close(got, oracle_rap_init(L.m, L.w, j, logit, b), 1e-6, "init");
  }
}

TEST(RapInit, ZeroLogitIsDegenerate) {
  const LinearMap map = LinearMap::from_matrix(to_weight({{1.0}, {-1.0}}));
  EXPECT_THROW(rap_absolute_influence_init(map, to_float({1.0, 1.0}), 0, 0.0f, 0.0f), DegenerateError);
}

TEST(RapPropagate, HandBuiltLayersMatchOracle) {
  const std::vector<SmallLayer> cases = hand_built_layers();
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const SmallLayer& L = cases[c];
    const RapStep step =
        rap_layer_propagate(LinearMap::from_matrix(to_weight(L.w)), to_float(L.m), to_float(L.r), 0.0f);
    expect_close(step.relevance, oracle_rap_step(L.m, L.w, L.r), 1e-6, "case " + std::to_string(c));
    EXPECT_NEAR(step.relevance.sum(), std::accumulate(L.r.begin(), L.r.end(), 0.0), 1e-6);
  }
}

TEST(RapPropagate, RandomSmallLayersMatchOracle) {
  std::mt19937_64 rng(41);
  int checked = 0;
  while (checked < 500) {
    const SmallLayer L = random_small_layer(rng, true);
    if (!every_column_has_positive_and_active(L)) continue;
    const RapStep step =
        rap_layer_propagate(LinearMap::from_matrix(to_weight(L.w)), to_float(L.m), to_float(L.r), 0.0f);
    expect_close(step.relevance, oracle_rap_step(L.m, L.w, L.r), 1e-6, "random");
    ++checked;
  }
}

TEST(RapPropagate, ColumnWithoutPositiveContributionStillConserves) {
  // Output 1 receives only negative contributions; its relevance reaches the
  // layer through the negative route alone and the shift keeps the total.
  const SmallLayer L{{1, 2}, {{1, -1}, {1, -1}}, {2, 1}};
  const RapStep step = rap_layer_propagate(LinearMap::from_matrix(to_weight(L.w)), to_float(L.m), to_float(L.r));
  EXPECT_NEAR(step.relevance.sum(), 3.0, 1e-6);
}

TEST(RapPropagate, InactiveNeuronsAreNotShifted) {
  const SmallLayer L{{0, 1, 3}, {{1}, {1}, {-0.5}}, {2}};
  const RapStep step = rap_layer_propagate(LinearMap::from_matrix(to_weight(L.w)), to_float(L.m), to_float(L.r));
  EXPECT_EQ(step.relevance[0], 0.0f);
  EXPECT_EQ(step.activated, 2u);
  EXPECT_GT(step.shift, 0.0);
}

TEST(ZBeta, WorkedExample) {
  // x = 0.5, w = [1, -1], l = 0, h = 1, R = [1, 1]: each output hands back its full relevance.
  const LinearMap map = LinearMap::from_matrix(to_weight({{1.0, -1.0}}));
  const std::vector<float> x{0.5f}, lo{0.0f}, hi{1.0f}, r{1.0f, 1.0f};
  const Tensor got = zbeta_input_layer(map, x, lo, hi, r);
  EXPECT_NEAR(got[0], oracle_zbeta({0.5}, {{1.0, -1.0}}, {0.0}, {1.0}, {1.0, 1.0})[0], 1e-7);
  EXPECT_NEAR(got[0], 2.0, 1e-7);
}

TEST(ZBeta, RandomSmallLayersMatchOracle) {
  std::mt19937_64 rng(42);
  for (int t = 0; t < 300; ++t) {
    SmallLayer L = random_small_layer(rng, false);
    std::vector<double> lo(L.m.size()), hi(L.m.size());
    for (std::size_t i = 0; i < L.m.size(); ++i) {
      lo[i] = std::min(L.m[i], -1.0) - 0.25;
      hi[i] = std::max(L.m[i], 1.5) + 0.25;
    }
    const auto want = oracle_zbeta(L.m, L.w, lo, hi, L.r);
    const Tensor got = zbeta_input_layer(LinearMap::from_matrix(to_weight(L.w)), to_float(L.m), to_float(lo),
                                         to_float(hi), to_float(L.r));
    // Skip near-singular denominators where the stabiliser matters.
    if (std::any_of(want.begin(), want.end(), [](double v) { return std::fabs(v) > 1e3; })) continue;
    expect_close(got, want, 1e-5, "zbeta");
  }
}

TEST(LrpEpsilon, MatchesOracle) {
  std::mt19937_64 rng(43);
  for (int t = 0; t < 300; ++t) {
    const SmallLayer L = random_small_layer(rng, false);
    const auto want = oracle_lrp_eps(L.m, L.w, L.r, 0.01);
    if (std::any_of(want.begin(), want.end(), [](double v) { return std::fabs(v) > 1e3; })) continue;
    expect_close(lrp_epsilon_layer(LinearMap::from_matrix(to_weight(L.w)), to_float(L.m), to_float(L.r), 0.01f),
                 want, 1e-5, "eps");
  }
}

TEST(LrpAlphaBeta, MatchesOracleAndChecksParameters) {
  std::mt19937_64 rng(44);
  for (int t = 0; t < 300; ++t) {
    const SmallLayer L = random_small_layer(rng, false);
    const LinearMap map = LinearMap::from_matrix(to_weight(L.w));
    expect_close(lrp_alphabeta_layer(map, to_float(L.m), to_float(L.r), 2.0f, 1.0f, 0.0f),
                 oracle_lrp_ab(L.m, L.w, L.r, 2.0, 1.0), 1e-5, "a2b1");
    expect_close(lrp_alphabeta_layer(map, to_float(L.m), to_float(L.r), 1.0f, 0.0f, 0.0f),
                 oracle_lrp_ab(L.m, L.w, L.r, 1.0, 0.0), 1e-5, "a1b0");
  }
  const LinearMap map = LinearMap::from_matrix(to_weight({{1.0}}));
  EXPECT_THROW(lrp_alphabeta_layer(map, std::vector<float>{1}, std::vector<float>{1}, 2.0f, 2.0f), ConfigError);
  AttributionConfig cfg;
  cfg.method = Method::kLrpAlphaBeta;
  cfg.alpha = 3.0f;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Attribute, RapConservesRelevanceOnRandomNetworks) {
  std::mt19937_64 rng(45);
  int checked = 0;
  for (int t = 0; t < 300; ++t) {
    const ModelGraph g = testutil::random_network(rng);
    const Tensor x = random_tensor(g.input_shape(), rng, 0.0f, 1.0f);
    const ForwardTrace trace = forward(g, x);
    if (std::fabs(trace.logits[trace.predicted]) < 1e-3) continue;
    RelevanceMap map;
    try {
      map = attribute(g, trace, {});
    } catch (const DegenerateError&) {
      continue;
    }
    for (const LayerTransition& tr : map.transitions) {
      if (!tr.init) EXPECT_LE(tr.residual(), 1e-4) << "net " << t << " node " << tr.node;
    }
    EXPECT_LE(map.conservation_residual(), 1e-3) << "net " << t;
    ++checked;
  }
  EXPECT_GT(checked, 250);
}

TEST(Attribute, LrpEpsilonEqualsInputTimesGradientOnBiasFreeReluNets) {
  std::mt19937_64 rng(46);
  for (int t = 0; t < 20; ++t) {
    const ModelGraph g = testutil::random_mlp(rng, {8, 6, 5, 3});
    const Tensor x = random_tensor(g.input_shape(), rng, -1.0f, 1.0f);
    const ForwardTrace trace = forward(g, x);
    AttributionConfig eps;
    eps.method = Method::kLrpEpsilon;
    eps.epsilon = 1e-9f;
    AttributionConfig ixg;
    ixg.method = Method::kInputXGradient;
    const Tensor a = attribute(g, trace, eps).input, b = attribute(g, trace, ixg).input;
    EXPECT_LE(testutil::relative_deviation(testutil::to_double(a), testutil::to_double(b)), 1e-4);
  }
}

TEST(Attribute, PenultimateRelevanceFollowsContributionMagnitude) {
  std::mt19937_64 rng(47);
  for (int t = 0; t < 100; ++t) {
    const ModelGraph g = testutil::random_mlp(rng, {5, 6, 3});
    const Tensor x = random_tensor(g.input_shape(), rng, -1.0f, 1.0f);
    const ForwardTrace trace = forward(g, x);
    if (trace.logits[trace.predicted] <= 1e-3f) continue;
    const RelevanceMap map = attribute(g, trace, {});
    const std::size_t relu = g.index_of("relu1");
    const Tensor& m = trace.outputs[relu];
    const Tensor& w = g.node(g.sink_index()).weight;
    std::vector<double> absz(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) absz[i] = std::fabs(double(m[i]) * w[i * g.num_classes() + map.target]);
    const Tensor& r = map.node_relevance[relu];
    for (std::size_t i = 0; i < m.size(); ++i) {
      for (std::size_t k = 0; k < m.size(); ++k) {
        if (absz[i] < absz[k]) EXPECT_LE(r[i], r[k]);
      }
    }
  }
}

TEST(Attribute, TwoPathToyRanksDominantNeuronFirstOnlyUnderRap) {
  const ModelGraph g = load_model(testutil::fixture("models/toy_two_path.json"));
  const ForwardTrace trace = forward(g, *g.reference_input);
  const std::size_t hidden = g.index_of("relu1");
  AttributionConfig rap;
  AttributionConfig ab;
  ab.method = Method::kLrpAlphaBeta;
  const Tensor r_rap = attribute(g, trace, rap).node_relevance[hidden];
  const RelevanceMap m_ab = attribute(g, trace, ab);
  const Tensor& r_ab = m_ab.node_relevance[hidden];
  auto rank_first = [](const Tensor& r) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < r.size(); ++i) {
      if (std::fabs(r[i]) > std::fabs(r[best])) best = i;
    }
    return best;
  };
  EXPECT_EQ(rank_first(r_rap), 0u);
  EXPECT_NE(rank_first(r_ab), 0u);
  EXPECT_LT(std::fabs(r_ab[0]), std::fabs(r_rap[0]));
}

TEST(Attribute, UnfoldedBatchNormIsUnsupportedForPropagation) {
  const ModelGraph g = load_model(testutil::fixture("models/cnn_bn.json"), {.fold_batchnorm = false});
  const ForwardTrace trace = forward(g, *g.reference_input);
  try {
    attribute(g, trace, {});
    FAIL();
  } catch (const UnsupportedLayerError& e) {
    EXPECT_EQ(e.node_id(), "bn1");
    EXPECT_EQ(e.method(), "rap");
  }
  AttributionConfig grad;
  grad.method = Method::kGradient;
  EXPECT_NO_THROW(attribute(g, trace, grad));
}

TEST(Attribute, IntegratedGradientsCompleteness) {
  std::mt19937_64 rng(48);
  for (int t = 0; t < 10; ++t) {
    const ModelGraph g = testutil::random_mlp(rng, {6, 8, 4});
    const Tensor x = random_tensor(g.input_shape(), rng, 0.0f, 1.0f);
    const ForwardTrace trace = forward(g, x);
    AttributionConfig ig;
    ig.method = Method::kIntegratedGradients;
    ig.ig_steps = 256;
    const RelevanceMap map = attribute(g, trace, ig);
    const double logit = trace.logits[map.target];  // zero baseline of a bias-free net scores 0
    if (std::fabs(logit) < 1e-2) continue;
    EXPECT_NEAR(map.input.sum(), logit, 0.02 * std::fabs(logit));
  }
}

TEST(Attribute, SingleStepIntegratedGradientsIsInputTimesGradient) {
  std::mt19937_64 rng(49);
  const ModelGraph g = testutil::random_network(rng);
  const ForwardTrace trace = forward(g, random_tensor(g.input_shape(), rng, 0.0f, 1.0f));
  AttributionConfig ig;
  ig.method = Method::kIntegratedGradients;
  ig.ig_steps = 1;
  AttributionConfig ixg;
  ixg.method = Method::kInputXGradient;
  EXPECT_EQ(attribute(g, trace, ig).input, attribute(g, trace, ixg).input);
}

TEST(Attribute, ExplicitTargetAndRangeCheck) {
  const ModelGraph g = load_model(testutil::fixture("models/cnn_small.json"));
  const ForwardTrace trace = forward(g, *g.reference_input);
  AttributionConfig cfg;
  cfg.method = Method::kGradient;
  EXPECT_EQ(attribute(g, trace, cfg).target, trace.predicted);
  cfg.target = 2;
  EXPECT_EQ(attribute(g, trace, cfg).target, 2u);
  cfg.target = 3;
  EXPECT_THROW(attribute(g, trace, cfg), IndexError);
}

TEST(Attribute, IsDeterministic) {
  const ModelGraph g = load_model(testutil::fixture("models/glyph_cnn.json"));
  const ForwardTrace trace = forward(g, *g.reference_input);
  for (const char* name : {"rap", "lrp-eps", "lrp-ab", "grad", "ixg", "gbp"}) {
    AttributionConfig cfg;
    cfg.method = *parse_method(name);
    EXPECT_EQ(attribute(g, trace, cfg).input, attribute(g, trace, cfg).input) << name;
  }
}

TEST(RelevanceFile, RoundTrip) {
  const ModelGraph g = load_model(testutil::fixture("models/cnn_small.json"));
  const ForwardTrace trace = forward(g, *g.reference_input);
  AttributionConfig cfg;
  const RelevanceMap map = attribute(g, trace, cfg);
  const auto path = testutil::scratch_dir("relfile") / "r.rel";
  write_relevance(path, g, map, cfg);
  const RelevanceFile f = read_relevance(path);
  EXPECT_EQ(f.header["method"], "rap");
  EXPECT_EQ(f.header["target"], map.target);
  EXPECT_EQ(f.attribution(), map.input);
  for (std::size_t n = 1; n < g.size(); ++n) {
    const Tensor* t = f.find(g.node(n).id);
    ASSERT_NE(t, nullptr) << g.node(n).id;
    EXPECT_EQ(*t, map.node_relevance[n]);
  }
  EXPECT_THROW(read_relevance(testutil::fixture("models/cnn_small.json")), IoError);
}

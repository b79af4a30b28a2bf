#include "helpers.hpp"

#include "cpr/objectives.hpp"
#include "cpr/util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cpr;
using fixture::random_tensor;

namespace {

Tensor<double> vec(std::initializer_list<double> v, Shape s) {
  Eigen::ArrayXd a(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) a(i++) = x;
  return Tensor<double>(std::move(s), a);
}

struct Scene {
  ModelBundle<double> model{fixture::small_arch(), ModelKind::dual, 11};
  ObjectiveBatch<double> batch;
  Tensor<double> x;

  Scene() {
    x = random_tensor<double>({4, 1, 64}, 1);
    batch.x = x;
    batch.labels = vec({1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 0}, {4, 3});
    batch.mask = Tensor<double>({4, 1, 64});
    for (Index i = 0; i < batch.mask.size(); ++i) batch.mask[i] = (i / 5) % 2 ? 1.0 : 0.0;
    std::mt19937_64 rng(3);
    batch.donor = derangement(4, rng);
    batch.x_adv = x;
    batch.x_adv.array() += random_tensor<double>({4, 1, 64}, 2, 0.05).array();
  }
};

LossWeights all_on() {
  LossWeights w;
  w.w_orth = w.w_cons = w.w_adv = w.w_recon = w.w_cls = 1.0;
  w.weight_decay = 1e-2;
  w.alpha = 0.5;
  return w;
}

}  // namespace

TEST(Objectives, MaskedReconstructionHandValue) {
  Graph<double> g;
  Var x = g.constant(vec({1, 2, 3, 4}, {1, 1, 4}));
  Var full = g.constant(vec({1, 1, 3, 3}, {1, 1, 4}));
  Var style = g.constant(vec({0, 0, 0, 0}, {1, 1, 4}));
  Var l = loss_recon(g, x, full, style, vec({1, 1, 0, 0}, {1, 1, 4}), 0.5);
  EXPECT_DOUBLE_EQ(g.value(l).item(), 13.5);
}

TEST(Objectives, MaskedReconstructionGradientVanishesOffMask) {
  Graph<double> g;
  const auto mask = vec({1, 0, 1, 0, 0, 1, 1, 0}, {2, 1, 4});
  Var x = g.constant(random_tensor<double>({2, 1, 4}, 1));
  Var full = g.variable(random_tensor<double>({2, 1, 4}, 2));
  Var style = g.variable(random_tensor<double>({2, 1, 4}, 3));
  g.backward(loss_recon(g, x, full, style, mask, 0.7));
  const auto gf = g.grad(full), gs = g.grad(style);
  for (Index i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0.0) {
      EXPECT_EQ(gf[i], 0.0);
      EXPECT_FALSE(std::signbit(gf[i]));
      EXPECT_NE(gs[i], 0.0);
    } else {
      EXPECT_NE(gf[i], 0.0);
      EXPECT_EQ(gs[i], 0.0);
    }
  }
}

TEST(Objectives, MaskedReconstructionRejectsSoftMask) {
  Graph<double> g;
  Var x = g.constant(vec({1, 2}, {1, 1, 2}));
  CPR_EXPECT_ERROR("E_MASK", loss_recon(g, x, x, x, vec({1, 0.5}, {1, 1, 2}), 1.0));
}

TEST(Objectives, OrthogonalityHandValue) {
  Graph<double> g;
  Var l = loss_orth(g, g.constant(vec({1, 0}, {1, 2})), g.constant(vec({1}, {1, 1})));
  EXPECT_DOUBLE_EQ(g.value(l).item(), 1.0);
  Graph<double> h;
  Var z = loss_orth(h, h.constant(vec({1, 0, 0, 1}, {2, 2})), h.constant(vec({0, 0}, {2, 1})));
  EXPECT_EQ(h.value(z).item(), 0.0);
}

TEST(Objectives, DerangementHasNoFixedPoint) {
  std::mt19937_64 rng(1);
  for (Index b = 2; b < 40; ++b) {
    const auto d = derangement(b, rng);
    std::vector<Index> sorted = d;
    std::sort(sorted.begin(), sorted.end());
    for (Index i = 0; i < b; ++i) {
      EXPECT_NE(d[i], i);
      EXPECT_EQ(sorted[i], i);
    }
  }
  CPR_EXPECT_ERROR("E_BATCH", derangement(1, rng));
}

TEST(Objectives, ConsistencyIsDeterministicAndPositive) {
  const ModelBundle<float> m(fixture::small_arch(), ModelKind::dual, 2);
  const auto x = random_tensor<float>({4, 1, 64}, 5);
  auto eval = [&] {
    Graph<float> g;
    Session<float> s(g, m, Mode::eval);
    Var xv = g.constant(x);
    Var zs = encode_style(s, xv);
    const std::vector<Index> donor{1, 2, 3, 0};
    return g.value(loss_consistency(s, encode_content(s, xv), ops::gather_rows(g, zs, std::span<const Index>(donor))))
        .item();
  };
  const float a = eval();
  EXPECT_TRUE(std::isfinite(a));
  EXPECT_GT(a, 0.0f);
  EXPECT_EQ(a, eval());
}

TEST(Objectives, AdversarialInvarianceZeroAtZeroBudget) {
  const ModelBundle<double> m(fixture::small_arch(), ModelKind::dual, 2);
  const auto x = random_tensor<double>({3, 1, 64}, 5);
  Graph<double> g;
  Session<double> s(g, m, Mode::eval);
  Var target = ops::detach(g, encode_content(s, g.constant(x)));
  EXPECT_EQ(g.value(loss_adv_invariance(s, target, x)).item(), 0.0);
  auto moved = x;
  moved.array() += 0.05;
  const double v = g.value(loss_adv_invariance(s, target, moved)).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(v, 0.0);
}

TEST(Objectives, ClassificationHandValue) {
  Graph<double> g;
  Var l = loss_classification(g, g.constant(vec({2, -2}, {1, 2})), vec({1, 0}, {1, 2}));
  EXPECT_NEAR(g.value(l).item(), std::log1p(std::exp(-2.0)), 1e-15);
  EXPECT_NEAR(g.value(l).item(), 0.126928, 1e-6);
  Graph<double> h;
  Var z = loss_classification(h, h.constant(vec({0, 0, 0}, {1, 3})), vec({1, 0, 1}, {1, 3}));
  EXPECT_NEAR(h.value(z).item(), std::log(2.0), 1e-15);
}

TEST(Objectives, ClassificationRejectsBadLabels) {
  Graph<double> g;
  Var lg = g.constant(vec({0, 0}, {1, 2}));
  CPR_EXPECT_ERROR("E_LABELS", loss_classification(g, lg, vec({1, 2}, {1, 2})));
  CPR_EXPECT_ERROR("E_SHAPE", loss_classification(g, lg, vec({1, 0, 0}, {1, 3})));
}

TEST(Objectives, TotalAccumulatesInFixedOrder) {
  Scene su;
  const LossWeights w = all_on();
  Graph<double> g;
  Session<double> s(g, su.model, Mode::train);
  const LossTerms<double> t = objective_terms(s, g.constant(su.x), su.batch, w);
  auto [total, rep] = loss_total(g, t, w);
  double acc = 0;
  for (auto [v, wt] : std::vector<std::pair<Var, double>>{{t.recon, w.w_recon}, {t.orth, w.w_orth}, {t.cons, w.w_cons},
                                                           {t.adv, w.w_adv},     {t.cls, w.w_cls},   {t.weight_decay, w.weight_decay}}) {
    ASSERT_TRUE(v.valid());
    acc += wt * g.value(v).item();
  }
  EXPECT_EQ(g.value(total).item(), acc);
  EXPECT_EQ(rep.total, acc);
}

TEST(Objectives, ZeroWeightsGiveZeroAndSingleTermMatches) {
  Scene su;
  Graph<double> g;
  Session<double> s(g, su.model, Mode::train);
  const LossTerms<double> t = objective_terms(s, g.constant(su.x), su.batch, all_on());
  LossWeights zero{0, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(g.value(loss_total(g, LossTerms<double>{}, zero).first).item(), 0.0);
  LossWeights orth_only = zero;
  orth_only.w_orth = 1.0;
  LossTerms<double> only;
  only.orth = t.orth;
  EXPECT_EQ(g.value(loss_total(g, only, orth_only).first).item(), g.value(t.orth).item());
}

TEST(Objectives, BaselineModelsOnlyGetClassificationTerms) {
  const ModelBundle<double> m(fixture::small_arch(), ModelKind::baseline, 3);
  Scene su;
  Graph<double> g;
  Session<double> s(g, m, Mode::train);
  const auto t = objective_terms(s, g.constant(su.x), su.batch, all_on());
  EXPECT_TRUE(t.cls.valid());
  EXPECT_TRUE(t.weight_decay.valid());
  EXPECT_FALSE(t.recon.valid() || t.orth.valid() || t.cons.valid() || t.adv.valid());
}

TEST(Objectives, EveryTermPassesGradientCheck) {
  Scene su;
  const LossWeights w = all_on();
  using Pick = Var LossTerms<double>::*;
  const std::vector<std::pair<std::string, Pick>> direct{{"recon", &LossTerms<double>::recon},
                                                         {"orth", &LossTerms<double>::orth},
                                                         {"cls", &LossTerms<double>::cls},
                                                         {"weight_decay", &LossTerms<double>::weight_decay}};
  GradCheckOptions o;
  o.include_input = true;
  o.seed = 7;
  for (const auto& [name, pick] : direct) {
    const LossFn<double> f = [&](Session<double>& s, Var xv) { return objective_terms(s, xv, su.batch, w).*pick; };
    const auto rep = check_gradients(su.model, f, su.x, o);
    EXPECT_TRUE(rep.passed) << name << " max rel error " << rep.max_rel_error;
    EXPECT_EQ(rep.n_checked, 200) << name;
  }

  // The swap and invariance terms regress onto a stop-gradient target; freeze it at the
  // unperturbed value so finite differences see the same function.
  Tensor<double> target;
  {
    Graph<double> g;
    Session<double> s(g, su.model, Mode::train);
    target = g.value(encode_content(s, g.constant(su.x)));
  }
  const LossFn<double> cons = [&](Session<double>& s, Var xv) {
    auto& g = s.graph();
    Var z_s = encode_style(s, xv);
    return loss_consistency(s, encode_content(s, xv), ops::gather_rows(g, z_s, std::span<const Index>(su.batch.donor)),
                            g.constant(target));
  };
  const LossFn<double> adv = [&](Session<double>& s, Var) {
    return loss_adv_invariance(s, s.graph().constant(target), su.batch.x_adv);
  };
  for (const auto& [name, f] : std::vector<std::pair<std::string, LossFn<double>>>{{"cons", cons}, {"adv", adv}}) {
    const auto rep = check_gradients(su.model, f, su.x, o);
    EXPECT_TRUE(rep.passed) << name << " max rel error " << rep.max_rel_error;
    EXPECT_EQ(rep.n_checked, 200) << name;
  }
}

TEST(Objectives, WeightsJsonAndValidation) {
  LossWeights w = all_on();
  EXPECT_EQ(LossWeights::from_json(w.to_json()), w);
  LossWeights bad;
  bad.w_orth = -1;
  CPR_EXPECT_ERROR("E_CONFIG", validate(bad));
}

#include "helpers.hpp"

#include "cpr/defenses.hpp"
#include "cpr/evaluation.hpp"
#include "cpr/util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cpr;
using fixture::random_tensor;

namespace {

std::vector<double> brute_median(const std::vector<double>& x, int w) {
  const int n = int(x.size()), r = w / 2;
  std::vector<double> out;
  for (int t = 0; t < n; ++t) {
    std::vector<double> win;
    for (int j = t - r; j <= t + r; ++j) {
      int k = j;
      while (k < 0 || k >= n) k = k < 0 ? -k - 1 : 2 * n - 1 - k;
      win.push_back(x[k]);
    }
    std::sort(win.begin(), win.end());
    out.push_back(win[r]);
  }
  return out;
}

ModelBundle<float> two_class_model(std::uint64_t seed) {
  ArchitectureSpec a = fixture::small_arch(64, 2);
  return ModelBundle<float>(a, ModelKind::baseline, seed);
}

void set_param(ModelBundle<float>& m, const std::string& name, std::initializer_list<float> v) {
  auto& t = m.parameters()[m.index_of(name)].value;
  ASSERT_EQ(t.size(), Index(v.size()));
  Index i = 0;
  for (float x : v) t[i++] = x;
}

}  // namespace

TEST(Defenses, MedianHandExample) {
  Tensor<double> x({1, 1, 4}, (Eigen::ArrayXd(4) << 1, 9, 1, 1).finished());
  const auto y = median_filter(x, MedianConfig{3});
  for (Index i = 0; i < 4; ++i) EXPECT_EQ(y[i], 1.0);
}

TEST(Defenses, MedianMatchesBruteForce) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int w : {3, 5, 7, 9})
    for (int len : {9, 10, 31}) {
      std::vector<double> v(len);
      for (auto& e : v) e = std::round(n(rng) * 3);  // ties on purpose
      Tensor<double> x({1, 1, len}, Eigen::Map<Eigen::ArrayXd>(v.data(), len));
      const auto y = median_filter(x, MedianConfig{w});
      const auto want = brute_median(v, w);
      for (int i = 0; i < len; ++i) EXPECT_EQ(y[i], want[i]) << w << " " << len << " " << i;
    }
}

TEST(Defenses, MedianWindowValidation) {
  CPR_EXPECT_ERROR("E_CONFIG", validate(MedianConfig{4}));
  CPR_EXPECT_ERROR("E_CONFIG", validate(MedianConfig{1}));
  const Tensor<double> x({1, 1, 4});
  CPR_EXPECT_ERROR("E_CONFIG", median_filter(x, MedianConfig{5}));
}

TEST(Defenses, MedianPredictorUsesFilteredInput) {
  const ModelBundle<float> m(fixture::small_arch(), ModelKind::baseline, 2);
  const auto x = random_tensor<float>({5, 1, 64}, 4);
  Predictor<float> p = plain(m);
  p.median = MedianConfig{5};
  EXPECT_TRUE(predict_scores(p, x) == predict_scores(plain(m), median_filter(x, MedianConfig{5})));
}

TEST(Defenses, ClopperPearsonAllSuccesses) {
  const double p = clopper_pearson_lower(1000, 1000, 0.001);
  EXPECT_NEAR(p, std::pow(0.001, 1.0 / 1000.0), 1e-12);
  EXPECT_NEAR(p, 0.993116, 1e-6);
  const auto c = certification_from_counts(2, 1000, 1000, 0.5, 0.001);
  EXPECT_EQ(c.predicted_class, 2);
  EXPECT_FALSE(c.abstained);
  EXPECT_NEAR(c.radius / 0.5, 2.46326, 1e-5);
}

TEST(Defenses, RadiusQuantileOracle) {
  EXPECT_NEAR(certified_radius(0.25, 0.99), 0.58159, 1e-4);
  EXPECT_NEAR(certified_radius(0.25, 0.99), 0.25 * 2.3263478740408408, 1e-12);
  EXPECT_EQ(certified_radius(0.25, 0.5), 0.0);
  EXPECT_EQ(certified_radius(0.25, 0.3), 0.0);
}

TEST(Defenses, ReferenceQuantiles) {
  // reference values from an independent statistics package
  EXPECT_NEAR(clopper_pearson_lower(990, 1000, 0.001), 0.9760361871553114, 1e-12);
  EXPECT_NEAR(clopper_pearson_lower(60, 100, 0.05), 0.5129758202538944, 1e-12);
  EXPECT_NEAR(clopper_pearson_lower(7, 10, 0.01), 0.29711647232053734, 1e-12);
  EXPECT_NEAR(clopper_pearson_lower(99900, 100000, 0.001), 0.998650992446753, 1e-12);
  EXPECT_NEAR(clopper_pearson_lower(1, 2, 0.3), 0.16333997346592444, 1e-12);
  EXPECT_NEAR(binomial_two_sided_p(3, 10), 0.34375, 1e-14);
  EXPECT_NEAR(binomial_two_sided_p(40, 100), 0.056887933640980784, 1e-13);
  EXPECT_NEAR(binomial_two_sided_p(499, 1000), 0.9747749818216398, 1e-12);
  EXPECT_NEAR(certified_radius(1.0, 0.5000001), 2.506628273311648e-07, 1e-15);
  EXPECT_NEAR(certified_radius(1.0, 0.6), 0.2533471031357997, 1e-14);
  EXPECT_NEAR(certified_radius(1.0, 0.999999), 4.753424308817087, 1e-9);
  EXPECT_NEAR(certified_radius(1.0, 1 - 1e-12), 7.0344869100478356, 1e-4);
}

TEST(Defenses, ClopperPearsonBoundaries) {
  EXPECT_EQ(clopper_pearson_lower(0, 10, 0.05), 0.0);
  // k = 1 of n: lower bound solves 1 - (1 - p)^n = alpha
  EXPECT_NEAR(clopper_pearson_lower(1, 20, 0.05), 1.0 - std::pow(0.95, 1.0 / 20.0), 1e-12);
  CPR_EXPECT_ERROR("E_PARAM", clopper_pearson_lower(11, 10, 0.05));
  const auto c = certification_from_counts(0, 480, 1000, 0.25, 0.001);
  EXPECT_TRUE(c.abstained);
  EXPECT_EQ(c.radius, 0.0);
}

TEST(Defenses, ClopperPearsonCoverage) {
  const double alpha = 0.001, p = 0.9;
  const int n = 100, trials = 10000;
  std::mt19937_64 rng(2024);
  std::binomial_distribution<int> b(n, p);
  int exceed = 0;
  for (int t = 0; t < trials; ++t) exceed += clopper_pearson_lower(b(rng), n, alpha) > p;
  const double rate = double(exceed) / trials;
  EXPECT_LE(rate, alpha + 2.0 * std::sqrt(alpha * (1 - alpha) / trials));
}

TEST(Defenses, BinomialTestValues) {
  EXPECT_NEAR(binomial_two_sided_p(10, 10), 2.0 * std::pow(0.5, 10), 1e-15);
  EXPECT_EQ(binomial_two_sided_p(5, 10), 1.0);
  EXPECT_NEAR(binomial_two_sided_p(0, 3), 0.25, 1e-15);
}

TEST(Defenses, DecisionFromCounts) {
  const auto tie = prediction_from_counts({40, 40, 20}, 0.001);
  EXPECT_TRUE(tie.abstained);
  EXPECT_EQ(tie.predicted_class, -1);
  const auto clear = prediction_from_counts({3, 90, 7}, 0.001);
  EXPECT_FALSE(clear.abstained);
  EXPECT_EQ(clear.predicted_class, 1);
  const auto single = prediction_from_counts({0, 0, 100}, 0.001);
  EXPECT_EQ(single.predicted_class, 2);
}

TEST(Defenses, ConstantClassifierNeverAbstains) {
  ModelBundle<float> m = two_class_model(1);
  m.parameters()[m.index_of("classifier.w")].value.array().setZero();
  set_param(m, "classifier.b", {-1.0f, 3.0f});
  RsConfig cfg;
  cfg.n_pred = 100;
  cfg.n_cert = 200;
  const auto x = random_tensor<float>({6, 1, 64}, 2);
  for (const auto& r : rs_predict(plain(m), x, cfg)) {
    EXPECT_FALSE(r.abstained);
    EXPECT_EQ(r.predicted_class, 1);
    EXPECT_EQ(r.counts[1], 100);
  }
  for (const auto& c : rs_certify(plain(m), x, cfg)) {
    EXPECT_EQ(c.predicted_class, 1);
    EXPECT_NEAR(c.p_lower, std::pow(cfg.alpha_conf, 1.0 / 200.0), 1e-12);
  }
}

TEST(Defenses, CoinFlipClassifierAbstains) {
  // Two-class model whose decision under noise is balanced: logit gap 2 (v.z_c - median).
  ModelBundle<float> m = two_class_model(3);
  const Index d = m.arch().d_content;
  auto& w = m.parameters()[m.index_of("classifier.w")].value;
  for (Index j = 0; j < d; ++j) {
    w[j] = float(j % 2 ? 1 : -1);
    w[d + j] = -w[j];
  }
  const RsConfig probe{0.25, 20001, 20001, 0.001, 99, 500};
  const Tensor<float> zero({1, 1, 64});
  // median of v.z_c under the smoothing noise
  std::vector<double> proj;
  {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, probe.sigma);
    Tensor<float> xs({probe.n_pred, 1, 64});
    for (Index i = 0; i < xs.size(); ++i) xs[i] = float(n(rng));
    const Tensor<float> lg = predict_logits(m, xs);
    for (Index i = 0; i < probe.n_pred; ++i) proj.push_back(lg[2 * i]);
  }
  std::nth_element(proj.begin(), proj.begin() + proj.size() / 2, proj.end());
  const float med = float(proj[proj.size() / 2]);
  set_param(m, "classifier.b", {-med, med});

  RsConfig cfg;
  cfg.n_pred = 1000;
  cfg.n_cert = 1000;
  cfg.seed = 17;
  const Tensor<float> x({100, 1, 64});
  const auto preds = rs_predict(plain(m), x, cfg);
  int abstained = 0;
  for (const auto& p : preds) abstained += p.abstained;
  EXPECT_GT(abstained, 90);
}

TEST(Defenses, RsIsDeterministicAndCountsForwards) {
  const ModelBundle<float> m(fixture::small_arch(), ModelKind::baseline, 2);
  RsConfig cfg;
  cfg.n_pred = 50;
  cfg.n_cert = 80;
  cfg.chunk = 16;
  const auto x = random_tensor<float>({4, 1, 64}, 8);
  m.reset_forward_count();
  const auto a = rs_predict(plain(m), x, cfg);
  EXPECT_EQ(m.forward_count(), 4 * 50);
  const auto b = rs_predict(plain(m), x, cfg);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].counts, b[i].counts);
  // record 2 alone, told its position, sees the same noise
  const auto c = rs_predict(plain(m), slice_rows(x, 2, 3), cfg, 2);
  EXPECT_EQ(c[0].counts, a[2].counts);
  m.reset_forward_count();
  rs_certify(plain(m), x, cfg);
  EXPECT_EQ(m.forward_count(), 4 * (50 + 80));
}

TEST(Defenses, RsConfigValidation) {
  RsConfig c;
  c.n_cert = 10;
  CPR_EXPECT_ERROR("E_CONFIG", validate(c));
  RsConfig s;
  s.sigma = 0;
  CPR_EXPECT_ERROR("E_CONFIG", validate(s));
  RsConfig a;
  a.alpha_conf = 1.0;
  CPR_EXPECT_ERROR("E_CONFIG", validate(a));
}

TEST(Defenses, AdversarialBatchHook) {
  const ModelBundle<float> m(fixture::small_arch(), ModelKind::baseline, 2);
  const auto x = random_tensor<float>({6, 1, 64}, 8);
  Tensor<float> y = Tensor<float>::zeros({6, 3});
  for (Index i = 0; i < 6; ++i) y[i * 3 + i % 3] = 1;
  AttackConfig c = single_step(0.0, 128.0);
  EXPECT_TRUE(make_adversarial_batch(plain(m), x, y, c) == x);
  c = single_step(0.1, 128.0);
  const auto xa = make_adversarial_batch(plain(m), x, y, c);
  EXPECT_LE((xa.array() - x.array()).abs().maxCoeff(), 0.1f + 1e-6f);
  EXPECT_FALSE(xa == x);
}

TEST(Defenses, CertificationJsonl) {
  CertificationResult r;
  r.record_id = "a";
  r.predicted_class = 1;
  r.p_lower = 0.9;
  r.radius = 0.3;
  r.abstained = false;
  const std::string s = certifications_jsonl({r, r});
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 2);
  const auto j = nlohmann::json::parse(s.substr(0, s.find('\n')));
  EXPECT_EQ(j.at("record_id"), "a");
  EXPECT_EQ(j.at("radius"), 0.3);
}

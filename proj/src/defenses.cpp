#include "cpr/defenses.hpp"

#include "cpr/batch.hpp"
#include "cpr/signals.hpp"
#include "cpr/util.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace cpr {

using nlohmann::json;

template <typename S>
Tensor<S> median_filter(const Tensor<S>& x, const MedianConfig& cfg) {
  validate(cfg);
  const Index L = x.dim(x.rank() - 1);
  if (cfg.window > L) throw Error("E_CONFIG", "median window longer than the signal");
  const Index rows = x.size() / L;
  const Index r = cfg.window / 2;
  Tensor<S> out(x.shape());
  std::vector<S> buf(static_cast<std::size_t>(cfg.window));
  for (Index row = 0; row < rows; ++row) {
    const S* in = x.data() + row * L;
    for (Index t = 0; t < L; ++t) {
      for (Index j = 0; j < cfg.window; ++j) buf[j] = in[reflect_index(t + j - r, L)];
      std::nth_element(buf.begin(), buf.begin() + r, buf.end());
      out[row * L + t] = buf[r];
    }
  }
  return out;
}

json RsConfig::to_json() const {
  return {{"sigma", sigma}, {"n_pred", n_pred}, {"n_cert", n_cert}, {"alpha_conf", alpha_conf}, {"seed", seed}};
}

void validate(const RsConfig& c) {
  if (!(c.sigma > 0)) throw Error("E_CONFIG", "randomized smoothing needs sigma > 0");
  if (c.n_pred < 1 || c.n_cert < c.n_pred) throw Error("E_CONFIG", "need n_cert >= n_pred >= 1");
  if (!(c.alpha_conf > 0 && c.alpha_conf < 1)) throw Error("E_CONFIG", "alpha_conf must lie in (0, 1)");
  if (c.chunk < 1) throw Error("E_CONFIG", "chunk must be >= 1");
}

json CertificationResult::to_json() const {
  return {{"record_id", record_id}, {"class", predicted_class}, {"p_lower", p_lower},
          {"radius", radius},       {"abstained", abstained}};
}

namespace {

// Continued fraction of the regularized incomplete beta function (modified Lentz).
double beta_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 1e-16;
  double c = 1.0, d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 100000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

// I_x(a, b)
double incomplete_beta(double a, double b, double x) {
  if (x <= 0) return 0.0;
  if (x >= 1) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * beta_fraction(a, b, x) / a;
  return 1.0 - std::exp(log_front) * beta_fraction(b, a, 1.0 - x) / b;
}

// Inverse of I_x(a, b) in x by bisection; I is increasing in x.
double beta_quantile(double a, double b, double q) {
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200 && hi - lo > 1e-16; ++i) {
    const double mid = 0.5 * (lo + hi);
    (incomplete_beta(a, b, mid) < q ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Rational starting point (Acklam) polished with Halley steps against erfc.
double normal_quantile(double p) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  for (int i = 0; i < 2; ++i) {
    // upper tail through erfc keeps precision when p is close to 1
    const double e = x > 0 ? (1.0 - p) - 0.5 * std::erfc(x / std::sqrt(2.0)) : normal_cdf(x) - p;
    const double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
    x -= u / (1.0 + 0.5 * x * u);
  }
  return x;
}

}  // namespace

double clopper_pearson_lower(int k, int n, double alpha) {
  if (n <= 0 || k < 0 || k > n) throw Error("E_PARAM", "invalid binomial counts");
  if (k == 0) return 0.0;
  return beta_quantile(k, n - k + 1, alpha);
}

double binomial_two_sided_p(int k, int n) {
  if (n <= 0) return 1.0;
  const int lo = std::min(k, n - k);
  // P(X <= lo) for X ~ Bin(n, 1/2), summed in log space
  const double log_half_n = n * std::log(0.5), lg_n = std::lgamma(n + 1.0);
  double tail = 0.0;
  for (int i = 0; i <= lo; ++i) tail += std::exp(lg_n - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) + log_half_n);
  return std::min(1.0, 2.0 * tail);
}

double certified_radius(double sigma, double p_lower) {
  if (p_lower <= 0.5) return 0.0;
  if (p_lower >= 1.0) return std::numeric_limits<double>::infinity();
  return sigma * normal_quantile(p_lower);
}

CertificationResult certification_from_counts(int top_class, int top_count, int n, double sigma, double alpha) {
  CertificationResult r;
  r.p_lower = clopper_pearson_lower(top_count, n, alpha);
  r.abstained = r.p_lower <= 0.5;
  r.predicted_class = r.abstained ? -1 : top_class;
  r.radius = r.abstained ? 0.0 : certified_radius(sigma, r.p_lower);
  return r;
}

template <typename S>
std::vector<int> noisy_votes(const Predictor<S>& p, const Tensor<S>& record, int n, double sigma,
                             std::uint64_t seed, int chunk) {
  const Index K = p.model->arch().n_classes;
  const Index row = record.size();
  Shape one = record.shape();
  if (one.size() == 2) one.insert(one.begin(), 1);
  std::vector<int> votes(static_cast<std::size_t>(K), 0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  for (int done = 0; done < n;) {
    const int m = std::min(chunk, n - done);
    Shape s = one;
    s[0] = m;
    Tensor<S> xs(s);
    for (int i = 0; i < m; ++i)
      for (Index j = 0; j < row; ++j) xs[i * row + j] = record[j] + S(noise(rng));
    Graph<S> g;
    Session<S> sess(g, *p.model, Mode::eval, false);
    const auto& lg = g.value(p.logits(sess, g.constant(xs), nullptr));
    for (int i = 0; i < m; ++i) {
      Index best = 0;
      for (Index k = 1; k < K; ++k)
        if (lg[i * K + k] > lg[i * K + best]) best = k;
      ++votes[best];
    }
    done += m;
  }
  return votes;
}

namespace {

std::uint64_t record_seed(std::uint64_t seed, Index record, std::uint64_t stream) {
  return splitmix64(splitmix64(seed ^ static_cast<std::uint64_t>(record)) + stream);
}

std::pair<int, int> top_two(const std::vector<int>& counts) {
  int a = 0, b = -1;
  for (int k = 1; k < static_cast<int>(counts.size()); ++k) {
    if (counts[k] > counts[a]) {
      b = a;
      a = k;
    } else if (b < 0 || counts[k] > counts[b]) {
      b = k;
    }
  }
  return {a, b};
}

}  // namespace

RsPrediction prediction_from_counts(std::vector<int> counts, double alpha) {
  RsPrediction o;
  o.counts = std::move(counts);
  const auto [a, second] = top_two(o.counts);
  const int na = o.counts[a];
  const int nb = second >= 0 ? o.counts[second] : 0;
  o.abstained = na == nb || binomial_two_sided_p(na, na + nb) > alpha;
  o.predicted_class = o.abstained ? -1 : a;
  return o;
}

namespace {

template <typename S>
void require_unmasked(const Predictor<S>& p) {
  if (p.mask_input) throw Error("E_CONFIG", "randomized smoothing does not support masked inputs");
}

}  // namespace

template <typename S>
std::vector<RsPrediction> rs_predict(const Predictor<S>& p, const Tensor<S>& x, const RsConfig& cfg,
                                     Index record_offset) {
  validate(cfg);
  require_unmasked(p);
  check_input_shape(*p.model, x);
  const Index N = x.dim(0);
  std::vector<RsPrediction> out(static_cast<std::size_t>(N));
  parallel_for(static_cast<std::size_t>(N), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const Index r = static_cast<Index>(i);
      out[i] = prediction_from_counts(noisy_votes(p, slice_rows(x, r, r + 1), cfg.n_pred, cfg.sigma,
                                                  record_seed(cfg.seed, record_offset + r, 0), cfg.chunk),
                                      cfg.alpha_conf);
    }
  });
  return out;
}

template <typename S>
std::vector<CertificationResult> rs_certify(const Predictor<S>& p, const Tensor<S>& x, const RsConfig& cfg,
                                            Index record_offset) {
  validate(cfg);
  require_unmasked(p);
  check_input_shape(*p.model, x);
  const Index N = x.dim(0);
  std::vector<CertificationResult> out(static_cast<std::size_t>(N));
  parallel_for(static_cast<std::size_t>(N), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const Index r = static_cast<Index>(i);
      const Tensor<S> rec = slice_rows(x, r, r + 1);
      const auto select = noisy_votes(p, rec, cfg.n_pred, cfg.sigma,
                                      record_seed(cfg.seed, record_offset + r, 1), cfg.chunk);
      const int top = top_two(select).first;
      const auto est = noisy_votes(p, rec, cfg.n_cert, cfg.sigma,
                                   record_seed(cfg.seed, record_offset + r, 2), cfg.chunk);
      out[i] = certification_from_counts(top, est[top], cfg.n_cert, cfg.sigma, cfg.alpha_conf);
    }
  });
  return out;
}

template <typename S>
Tensor<S> make_adversarial_batch(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                                 const AttackConfig& cfg, const Tensor<S>* mask) {
  if (cfg.epsilon == 0) return x;
  return run_attack(p, x, labels, cfg, mask).x_adv;
}

std::string certifications_jsonl(const std::vector<CertificationResult>& rs) {
  std::string out;
  for (const auto& r : rs) out += r.to_json().dump() + "\n";
  return out;
}

#define CPR_INSTANTIATE_DEF(S)                                                                    \
  template Tensor<S> median_filter(const Tensor<S>&, const MedianConfig&);                       \
  template std::vector<int> noisy_votes(const Predictor<S>&, const Tensor<S>&, int, double,      \
                                        std::uint64_t, int);                                     \
  template std::vector<RsPrediction> rs_predict(const Predictor<S>&, const Tensor<S>&,           \
                                                const RsConfig&, Index);                         \
  template std::vector<CertificationResult> rs_certify(const Predictor<S>&, const Tensor<S>&,    \
                                                       const RsConfig&, Index);                  \
  template Tensor<S> make_adversarial_batch(const Predictor<S>&, const Tensor<S>&,               \
                                            const Tensor<S>&, const AttackConfig&, const Tensor<S>*);
CPR_INSTANTIATE_DEF(float)
CPR_INSTANTIATE_DEF(double)

}  // namespace cpr

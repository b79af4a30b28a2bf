#pragma once

#include "cpr/attacks.hpp"
#include "cpr/predictor.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace cpr {

/// Sliding median per row with half-sample symmetric padding; shape preserved.
template <typename S>
Tensor<S> median_filter(const Tensor<S>& x, const MedianConfig& cfg);

struct RsConfig {
  double sigma = 0.25;
  int n_pred = 100;
  int n_cert = 1000;
  double alpha_conf = 0.001;
  std::uint64_t seed = 0;
  int chunk = 100;  // noisy copies per forward batch

  nlohmann::json to_json() const;
};

void validate(const RsConfig& cfg);

struct RsPrediction {
  int predicted_class = -1;
  bool abstained = true;
  std::vector<int> counts;  // argmax votes per class over n_pred noisy copies
};

struct CertificationResult {
  std::string record_id;
  int predicted_class = -1;
  double p_lower = 0;
  double radius = 0;
  bool abstained = true;

  nlohmann::json to_json() const;
};

/// One-sided lower Clopper-Pearson bound on a binomial proportion at level alpha.
double clopper_pearson_lower(int successes, int trials, double alpha);
/// Two-sided exact binomial test of p = 1/2.
double binomial_two_sided_p(int successes, int trials);
/// sigma * Phi^-1(p_lower), or 0 when p_lower <= 1/2.
double certified_radius(double sigma, double p_lower);
/// Top class of the votes, or an abstention when the top two tie or the binomial test of the
/// top two counts has p > alpha.
RsPrediction prediction_from_counts(std::vector<int> counts, double alpha);
CertificationResult certification_from_counts(int top_class, int top_count, int n, double sigma,
                                              double alpha);

/// Argmax votes of the model over n Gaussian-noised copies of record i (noise from seed ^ index).
template <typename S>
std::vector<int> noisy_votes(const Predictor<S>& p, const Tensor<S>& record, int n, double sigma,
                             std::uint64_t seed, int chunk);

// x is [N, leads, samples]; record r draws from seeds derived from cfg.seed and record_offset + r.
template <typename S>
std::vector<RsPrediction> rs_predict(const Predictor<S>& p, const Tensor<S>& x, const RsConfig& cfg,
                                     Index record_offset = 0);
template <typename S>
std::vector<CertificationResult> rs_certify(const Predictor<S>& p, const Tensor<S>& x, const RsConfig& cfg,
                                            Index record_offset = 0);

/// Replaces every record with its attacked version under the current model; labels unchanged.
template <typename S>
Tensor<S> make_adversarial_batch(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                                 const AttackConfig& cfg, const Tensor<S>* mask = nullptr);

std::string certifications_jsonl(const std::vector<CertificationResult>& rs);

}  // namespace cpr

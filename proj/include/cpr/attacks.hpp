#pragma once

#include "cpr/batch.hpp"
#include "cpr/predictor.hpp"

#include <json.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace cpr {

enum class AttackKind { fgsm, pgd, sap };

std::string to_string(AttackKind k);
AttackKind attack_kind_from_string(const std::string& s);

struct AttackConfig {
  AttackKind kind = AttackKind::sap;
  double epsilon = 0.1;  // L-inf budget in normalised signal units
  double step_size = 0.025;
  int n_steps = 10;
  double smooth_sigma_s = 0.02;  // SAP kernel std in seconds
  double kernel_truncate = 4.0;  // kernel support is +-truncate * sigma
  bool rand_init = false;
  std::uint64_t seed = 0;
  double fs = 0.0;  // sampling rate of the attacked signals (SAP only)

  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

void validate(const AttackConfig& cfg);

/// The single smoothed sign step used by the adversarial-invariance objective.
AttackConfig single_step(double epsilon, double fs, double smooth_sigma_s = 0.02);

template <typename S>
struct AdvBatch {
  Tensor<S> x_adv;
  Tensor<S> delta;
  std::vector<std::uint8_t> success;  // thresholded prediction changed; empty for train-mode attacks
};

/// Normalised Gaussian taps over +-round(truncate * sigma) samples; [1] when that radius is 0.
std::vector<double> gaussian_kernel(double sigma_samples, double truncate);

/// Convolves every row along the last axis with a symmetric kernel, reflect padding.
template <typename S>
Tensor<S> smooth_rows(const Tensor<S>& field, std::span<const double> kernel);

// Record i (counting from record_offset) draws its random start from seed ^ i, so results do
// not depend on how a dataset is chunked.
template <typename S>
AdvBatch<S> fgsm(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                 const AttackConfig& cfg, const Tensor<S>* mask = nullptr, Index record_offset = 0);
template <typename S>
AdvBatch<S> pgd(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                const AttackConfig& cfg, const Tensor<S>* mask = nullptr, Index record_offset = 0);
template <typename S>
AdvBatch<S> sap(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                const AttackConfig& cfg, const Tensor<S>* mask = nullptr, Index record_offset = 0);
/// Dispatches on cfg.kind.
template <typename S>
AdvBatch<S> run_attack(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                       const AttackConfig& cfg, const Tensor<S>* mask = nullptr, Index record_offset = 0);

/// Summed per-record classification loss gradient w.r.t. the input.
template <typename S>
Tensor<S> loss_input_gradient(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                              const Tensor<S>* mask);

struct SweepPoint {
  double epsilon = 0;
  double macro_f1 = 0;
  double macro_auc = 0;
};

struct SweepResult {
  std::vector<SweepPoint> points;
  bool monotone_f1 = true;  // soft check; stochastic attacks may violate it
};

template <typename S>
SweepResult attack_sweep(const Predictor<S>& p, const LabeledBatch<S>& data, const AttackConfig& base,
                         std::span<const double> epsilons);

}  // namespace cpr

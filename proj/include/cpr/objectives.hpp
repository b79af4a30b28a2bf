#pragma once

#include "cpr/netcore.hpp"

#include <json.hpp>

#include <random>
#include <vector>

namespace cpr {

struct LossWeights {
  double alpha = 1.0;         // background term of the masked reconstruction
  double w_recon = 1.0;
  double w_orth = 0.1;
  double w_cons = 1.0;
  double w_adv = 1.0;
  double w_cls = 1.0;
  double weight_decay = 1e-4;  // lambda on ||theta_c||^2

  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
  bool operator==(const LossWeights&) const = default;
};

void validate(const LossWeights& w);

struct LossReport {
  double recon = 0, orth = 0, cons = 0, adv = 0, cls = 0, weight_decay = 0;
  double total = 0;
  nlohmann::json to_json() const;
};

/// ||(x - x_full) * M||^2 + alpha ||(x - x_style) * (1 - M)||^2, summed over leads and time,
/// averaged over the batch. Rejects non-binary masks.
template <typename S>
Var loss_recon(Graph<S>& g, Var x, Var x_hat_full, Var x_hat_style_only, const Tensor<S>& mask, S alpha);

/// ||Z_c^T Z_s||_F^2 / B^2 over the batch cross-Gram matrix.
template <typename S>
Var loss_orth(Graph<S>& g, Var z_c, Var z_s);

/// Derangement of [0, B): no record keeps its own style. B < 2 is rejected.
std::vector<Index> derangement(Index batch, std::mt19937_64& rng);

/// ||E_c(G(z_c, z_s_donor)) - target||^2 averaged over the batch; target is normally detach(z_c).
template <typename S>
Var loss_consistency(Session<S>& s, Var z_c, Var z_s_donor, Var target);
template <typename S>
Var loss_consistency(Session<S>& s, Var z_c, Var z_s_donor);

/// ||target - E_c(x_adv)||^2 averaged over the batch; target is the (constant) clean content code.
template <typename S>
Var loss_adv_invariance(Session<S>& s, Var target, const Tensor<S>& x_adv);

/// Mean binary cross-entropy in logit space; labels must be 0/1.
template <typename S>
Var loss_classification(Graph<S>& g, Var logits, const Tensor<S>& labels);

/// sum of squares over every trainable content-encoder parameter
template <typename S>
Var content_weight_norm(Session<S>& s);

template <typename S>
struct LossTerms {
  Var recon, orth, cons, adv, cls, weight_decay;  // invalid Var = inactive term
};

/// Weighted total in the fixed order recon, orth, cons, adv, cls, weight decay.
template <typename S>
std::pair<Var, LossReport> loss_total(Graph<S>& g, const LossTerms<S>& terms, const LossWeights& w);

/// Inputs to one evaluation of the composite objective.
template <typename S>
struct ObjectiveBatch {
  Tensor<S> x;
  Tensor<S> labels;
  Tensor<S> mask;             // all-ones for unguided reconstruction
  std::vector<Index> donor;   // derangement for the swap term
  Tensor<S> x_adv;            // perturbed inputs for the invariance term
  bool mask_input = false;    // classify x * M (ResNet+Mask ablation)
};

/// Builds every term whose weight is positive (and that the model supports).
template <typename S>
LossTerms<S> objective_terms(Session<S>& s, Var x, const ObjectiveBatch<S>& b, const LossWeights& w);

}  // namespace cpr

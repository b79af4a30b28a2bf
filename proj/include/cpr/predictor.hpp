#pragma once

#include "cpr/netcore.hpp"

#include <optional>

namespace cpr {

struct MedianConfig {
  int window = 5;  // odd, >= 3; padding is half-sample symmetric ("reflect")
};

void validate(const MedianConfig& cfg);

/// A model plus the input pre-processing applied in front of it at inference time.
template <typename S>
struct Predictor {
  const ModelBundle<S>* model = nullptr;
  std::optional<MedianConfig> median;  // median smoothing defence
  bool mask_input = false;             // x * M before the network (ResNet+Mask ablation)
  Mode mode = Mode::eval;

  /// Logits for x; mask is required when mask_input is set.
  Var logits(Session<S>& s, Var x, const Tensor<S>* mask) const;
};

template <typename S>
Predictor<S> plain(const ModelBundle<S>& m) {
  Predictor<S> p;
  p.model = &m;
  return p;
}

/// Sigmoid scores [N, classes] in eval mode, evaluated in parallel chunks.
template <typename S>
Tensor<S> predict_scores(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>* mask = nullptr);

}  // namespace cpr

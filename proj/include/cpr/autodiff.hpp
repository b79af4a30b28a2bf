#pragma once

#include "cpr/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cpr {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in topological order; backward() walks them in reverse.
template <typename Scalar>
class Graph {
 public:
  using T = Tensor<Scalar>;
  using Backprop = std::function<void(Graph&, const T& out_grad)>;

  Var constant(T value);
  Var variable(T value);

  const T& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  // Gradient after backward(); zeros when nothing flowed into v.
  T grad(Var v) const;
  void backward(Var loss);

  // Op construction: requires_grad is inherited from the inputs.
  Var record(T value, const std::vector<Var>& inputs, Backprop backprop);
  // Zero-initialised gradient buffer of an input, for use inside Backprop.
  T& grad_buffer(Var v);

  std::size_t size() const { return nodes_.size(); }

  // Piecewise-linear ops fold their active pattern into this hash when enabled, so a
  // finite-difference probe can tell when it stepped across a kink.
  void set_track_kinks(bool on) { track_kinks_ = on; }
  bool track_kinks() const { return track_kinks_; }
  void mix_kink(std::uint64_t h) { kink_hash_ = (kink_hash_ ^ h) * 0x100000001B3ull; }
  std::uint64_t kink_signature() const { return kink_hash_; }

 private:
  struct Node {
    T value;
    T grad;
    bool requires_grad = false;
    Backprop backprop;
  };
  std::vector<Node> nodes_;
  bool track_kinks_ = false;
  std::uint64_t kink_hash_ = 0xCBF29CE484222325ull;
};

struct ConvGeometry {
  Index stride = 1;
  Index pad = 0;
  Index output_pad = 0;  // transposed convolution only
};

struct BatchStats {
  Tensor<double> mean;      // per channel
  Tensor<double> var;       // unbiased, per channel
};

namespace ops {

// x [B, Ci, L], w [Co, Ci, K] -> [B, Co, Lo]
template <typename S> Var conv1d(Graph<S>& g, Var x, Var w, const ConvGeometry& geo);
// x [B, Ci, L], w [Ci, Co, K] -> [B, Co, (L-1)*stride - 2*pad + K + output_pad]
template <typename S> Var conv_transpose1d(Graph<S>& g, Var x, Var w, const ConvGeometry& geo);
// x [B, C, L] + b [C]
template <typename S> Var add_channel_bias(Graph<S>& g, Var x, Var b);
// Batch statistics when train is true (written to stats_out if given), running statistics otherwise.
template <typename S>
Var batch_norm(Graph<S>& g, Var x, Var gamma, Var beta, const Tensor<S>& running_mean,
               const Tensor<S>& running_var, bool train, BatchStats* stats_out, S eps = S(1e-5));
template <typename S> Var relu(Graph<S>& g, Var x);
template <typename S> Var add(Graph<S>& g, Var a, Var b);
template <typename S> Var sub(Graph<S>& g, Var a, Var b);
template <typename S> Var scale(Graph<S>& g, Var a, S s);
template <typename S> Var mul_const(Graph<S>& g, Var a, const Tensor<S>& c);
template <typename S> Var sum_squares(Graph<S>& g, Var a);
// [B, C, L] -> [B, C]
template <typename S> Var global_avg_pool(Graph<S>& g, Var x);
// x [B, I], w [O, I], b [O] (optional) -> [B, O]
template <typename S> Var linear(Graph<S>& g, Var x, Var w, Var b);
// [B, I1], [B, I2] -> [B, I1 + I2]
template <typename S> Var concat_features(Graph<S>& g, Var a, Var b);
template <typename S> Var reshape(Graph<S>& g, Var x, Shape shape);
// [B, D] rows scaled to unit L2 norm
template <typename S> Var normalize_rows(Graph<S>& g, Var x);
// a [B, P], b [B, Q] -> a^T b [P, Q]
template <typename S> Var matmul_tn(Graph<S>& g, Var a, Var b);
// Mean binary cross-entropy over all entries, computed in logit space.
template <typename S> Var bce_with_logits(Graph<S>& g, Var logits, const Tensor<S>& labels);
// Sum over the batch of the per-record mean over classes (per-record gradients are
// independent of batch composition).
template <typename S> Var bce_with_logits_sum(Graph<S>& g, Var logits, const Tensor<S>& labels);
// out[i] = x[index[i]] along axis 0
template <typename S> Var gather_rows(Graph<S>& g, Var x, std::span<const Index> index);
// Sliding median along the last axis with half-sample symmetric padding; gradient is routed
// to the selected sample.
template <typename S> Var median_filter(Graph<S>& g, Var x, Index window);
// sum_i w_i * terms_i accumulated left to right
template <typename S> Var weighted_sum(Graph<S>& g, std::span<const Var> terms, std::span<const S> w);
template <typename S> Var detach(Graph<S>& g, Var x);

}  // namespace ops

// Index map for half-sample symmetric padding (d c b a | a b c d | d c b a).
inline Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace cpr

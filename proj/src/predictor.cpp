#include "cpr/predictor.hpp"

#include "cpr/batch.hpp"

#include <algorithm>

namespace cpr {

void validate(const MedianConfig& cfg) {
  if (cfg.window < 3 || cfg.window % 2 == 0)
    throw Error("E_CONFIG", "median window must be odd and >= 3, got " + std::to_string(cfg.window));
}

template <typename S>
Var Predictor<S>::logits(Session<S>& s, Var x, const Tensor<S>* mask) const {
  auto& g = s.graph();
  Var h = x;
  if (median) {
    validate(*median);
    if (median->window > g.value(x).dim(2))
      throw Error("E_CONFIG", "median window longer than the signal");
    h = ops::median_filter(g, h, median->window);
  }
  if (mask_input) {
    if (!mask || mask->shape() != g.value(x).shape())
      throw Error("E_MASK", "this predictor multiplies inputs by the physio-mask; masks are required");
    h = ops::mul_const(g, h, *mask);
  }
  return forward_baseline(s, h);
}

template <typename S>
Tensor<S> predict_scores(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>* mask) {
  check_input_shape(*p.model, x);
  const Index N = x.dim(0);
  const Index K = p.model->arch().n_classes;
  Tensor<S> out({N, K});
  constexpr Index kChunk = 64;
  const Index n_chunks = (N + kChunk - 1) / kChunk;
  parallel_for(static_cast<std::size_t>(n_chunks), [&](std::size_t cb, std::size_t ce) {
    for (std::size_t c = cb; c < ce; ++c) {
      const Index b = static_cast<Index>(c) * kChunk, e = std::min(N, b + kChunk);
      Graph<S> g;
      Session<S> s(g, *p.model, Mode::eval, false);
      Tensor<S> m;
      if (mask) m = slice_rows(*mask, b, e);
      const auto& lg = g.value(p.logits(s, g.constant(slice_rows(x, b, e)), mask ? &m : nullptr));
      out.array().segment(b * K, (e - b) * K) = S(1) / (S(1) + (-lg.array()).exp());
    }
  });
  return out;
}

template struct Predictor<float>;
template struct Predictor<double>;
template Tensor<float> predict_scores(const Predictor<float>&, const Tensor<float>&, const Tensor<float>*);
template Tensor<double> predict_scores(const Predictor<double>&, const Tensor<double>&, const Tensor<double>*);

}  // namespace cpr

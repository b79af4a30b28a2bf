#include "cpr/objectives.hpp"

#include <cmath>
#include <numeric>

namespace cpr {

using nlohmann::json;

json LossWeights::to_json() const {
  return {{"alpha", alpha},   {"w_recon", w_recon}, {"w_orth", w_orth},
          {"w_cons", w_cons}, {"w_adv", w_adv},     {"w_cls", w_cls},
          {"weight_decay", weight_decay}};
}

LossWeights LossWeights::from_json(const json& j) {
  LossWeights w;
  w.alpha = j.value("alpha", w.alpha);
  w.w_recon = j.value("w_recon", w.w_recon);
  w.w_orth = j.value("w_orth", w.w_orth);
  w.w_cons = j.value("w_cons", w.w_cons);
  w.w_adv = j.value("w_adv", w.w_adv);
  w.w_cls = j.value("w_cls", w.w_cls);
  w.weight_decay = j.value("weight_decay", w.weight_decay);
  return w;
}

void validate(const LossWeights& w) {
  const std::pair<const char*, double> all[] = {
      {"alpha", w.alpha}, {"w_recon", w.w_recon}, {"w_orth", w.w_orth}, {"w_cons", w.w_cons},
      {"w_adv", w.w_adv}, {"w_cls", w.w_cls},     {"weight_decay", w.weight_decay}};
  for (const auto& [name, v] : all)
    if (!std::isfinite(v) || v < 0)
      throw Error("E_CONFIG", std::string("loss weight ") + name + " must be finite and >= 0, got " +
                                  std::to_string(v));
}

json LossReport::to_json() const {
  return {{"recon", recon}, {"orth", orth}, {"cons", cons}, {"adv", adv},
          {"cls", cls},     {"weight_decay", weight_decay},   {"total", total}};
}

namespace {

template <typename S>
Index batch_of(Graph<S>& g, Var v) {
  return g.value(v).dim(0);
}

template <typename S>
Var mean_sum_squares(Graph<S>& g, Var diff) {
  return ops::scale(g, ops::sum_squares(g, diff), S(1) / S(batch_of(g, diff)));
}

// Auxiliary passes reuse the main pass's parameters but must not update running statistics.
template <typename S>
struct NoStats {
  explicit NoStats(Session<S>& s) : s(s), saved(s.collect_stats) { s.collect_stats = false; }
  ~NoStats() { s.collect_stats = saved; }
  Session<S>& s;
  bool saved;
};

}  // namespace

template <typename S>
Var loss_recon(Graph<S>& g, Var x, Var x_hat_full, Var x_hat_style_only, const Tensor<S>& mask, S alpha) {
  const Shape shape = g.value(x).shape();
  if (mask.shape() != shape)
    throw Error("E_SHAPE", "mask shape " + shape_string(mask.shape()) + " does not match signal " +
                               shape_string(shape));
  if (!(mask.array() == S(0) || mask.array() == S(1)).all())
    throw Error("E_MASK", "reconstruction mask must be binary");
  Tensor<S> inv(mask.shape(), S(1) - mask.array());
  Var in_mask = ops::sum_squares(g, ops::mul_const(g, ops::sub(g, x, x_hat_full), mask));
  Var off_mask = ops::sum_squares(g, ops::mul_const(g, ops::sub(g, x, x_hat_style_only), inv));
  const S inv_b = S(1) / S(shape[0]);
  const Var terms[] = {in_mask, off_mask};
  const S w[] = {inv_b, alpha * inv_b};
  return ops::weighted_sum<S>(g, terms, w);
}

template <typename S>
Var loss_orth(Graph<S>& g, Var z_c, Var z_s) {
  const S b = S(batch_of(g, z_c));
  return ops::scale(g, ops::sum_squares(g, ops::matmul_tn(g, z_c, z_s)), S(1) / (b * b));
}

std::vector<Index> derangement(Index batch, std::mt19937_64& rng) {
  if (batch < 2) throw Error("E_BATCH", "style swap needs a batch of at least 2 records");
  const Index k = std::uniform_int_distribution<Index>(1, batch - 1)(rng);
  std::vector<Index> perm(static_cast<std::size_t>(batch));
  for (Index i = 0; i < batch; ++i) perm[i] = (i + k) % batch;
  return perm;
}

template <typename S>
Var loss_consistency(Session<S>& s, Var z_c, Var z_s_donor, Var target) {
  NoStats<S> guard(s);
  auto& g = s.graph();
  Var x_swap = decode(s, z_c, z_s_donor);
  return mean_sum_squares(g, ops::sub(g, encode_content(s, x_swap), target));
}

template <typename S>
Var loss_consistency(Session<S>& s, Var z_c, Var z_s_donor) {
  return loss_consistency(s, z_c, z_s_donor, ops::detach(s.graph(), z_c));
}

template <typename S>
Var loss_adv_invariance(Session<S>& s, Var target, const Tensor<S>& x_adv) {
  NoStats<S> guard(s);
  auto& g = s.graph();
  Var z_adv = encode_content(s, g.constant(x_adv));
  return mean_sum_squares(g, ops::sub(g, target, z_adv));
}

template <typename S>
Var loss_classification(Graph<S>& g, Var logits, const Tensor<S>& labels) {
  if (!(labels.array() == S(0) || labels.array() == S(1)).all())
    throw Error("E_LABELS", "labels must be 0/1");
  if (labels.shape() != g.value(logits).shape())
    throw Error("E_SHAPE", "labels " + shape_string(labels.shape()) + " do not match logits " +
                               shape_string(g.value(logits).shape()));
  return ops::bce_with_logits(g, logits, labels);
}

template <typename S>
Var content_weight_norm(Session<S>& s) {
  auto& g = s.graph();
  const auto& ps = s.model().parameters();
  std::vector<Var> terms;
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps[i].group == ParamGroup::content && ps[i].trainable)
      terms.push_back(ops::sum_squares(g, s.param(static_cast<int>(i))));
  std::vector<S> ones(terms.size(), S(1));
  return ops::weighted_sum<S>(g, terms, ones);
}

template <typename S>
std::pair<Var, LossReport> loss_total(Graph<S>& g, const LossTerms<S>& t, const LossWeights& w) {
  validate(w);
  LossReport r;
  std::vector<Var> terms;
  std::vector<S> ws;
  auto take = [&](Var v, double weight, double& slot) {
    if (!v.valid()) return;
    slot = static_cast<double>(g.value(v).item());
    terms.push_back(v);
    ws.push_back(S(weight));
  };
  take(t.recon, w.w_recon, r.recon);
  take(t.orth, w.w_orth, r.orth);
  take(t.cons, w.w_cons, r.cons);
  take(t.adv, w.w_adv, r.adv);
  take(t.cls, w.w_cls, r.cls);
  take(t.weight_decay, w.weight_decay, r.weight_decay);
  Var total = terms.empty() ? g.constant(Tensor<S>::scalar(0)) : ops::weighted_sum<S>(g, terms, ws);
  r.total = static_cast<double>(g.value(total).item());
  return {total, r};
}

template <typename S>
LossTerms<S> objective_terms(Session<S>& s, Var x, const ObjectiveBatch<S>& b, const LossWeights& w) {
  auto& g = s.graph();
  LossTerms<S> t;
  const bool dual = s.model().is_dual();
  Var input = x;
  if (b.mask_input) input = ops::mul_const(g, x, b.mask);
  Var z_c = encode_content(s, input);
  if (w.w_cls > 0) t.cls = loss_classification(g, classify(s, z_c), b.labels);
  if (w.weight_decay > 0) t.weight_decay = content_weight_norm(s);
  if (!dual) return t;

  Var z_s = encode_style(s, x);
  if (w.w_recon > 0) {
    Var full = decode(s, z_c, z_s);
    Var style_only;
    {
      NoStats<S> guard(s);
      style_only = decode(s, g.constant(Tensor<S>::zeros(g.value(z_c).shape())), z_s);
    }
    t.recon = loss_recon(g, x, full, style_only, b.mask, S(w.alpha));
  }
  if (w.w_orth > 0) t.orth = loss_orth(g, z_c, z_s);
  if (w.w_cons > 0) {
    if (b.donor.size() != static_cast<std::size_t>(g.value(x).dim(0)))
      throw Error("E_BATCH", "style donor permutation does not match the batch");
    t.cons = loss_consistency(s, z_c, ops::gather_rows(g, z_s, std::span<const Index>(b.donor)));
  }
  if (w.w_adv > 0 && !b.x_adv.empty()) t.adv = loss_adv_invariance(s, ops::detach(g, z_c), b.x_adv);
  return t;
}

#define CPR_INSTANTIATE_OBJ(S)                                                                    \
  template Var loss_recon(Graph<S>&, Var, Var, Var, const Tensor<S>&, S);                        \
  template Var loss_orth(Graph<S>&, Var, Var);                                                   \
  template Var loss_consistency(Session<S>&, Var, Var, Var);                                     \
  template Var loss_consistency(Session<S>&, Var, Var);                                          \
  template Var loss_adv_invariance(Session<S>&, Var, const Tensor<S>&);                          \
  template Var loss_classification(Graph<S>&, Var, const Tensor<S>&);                            \
  template Var content_weight_norm(Session<S>&);                                                 \
  template std::pair<Var, LossReport> loss_total(Graph<S>&, const LossTerms<S>&, const LossWeights&); \
  template LossTerms<S> objective_terms(Session<S>&, Var, const ObjectiveBatch<S>&, const LossWeights&);
CPR_INSTANTIATE_OBJ(float)
CPR_INSTANTIATE_OBJ(double)

}  // namespace cpr

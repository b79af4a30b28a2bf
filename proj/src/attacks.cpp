#include "cpr/attacks.hpp"

#include "cpr/evaluation.hpp"
#include "cpr/signals.hpp"
#include "cpr/util.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cpr {

using nlohmann::json;

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::sap: return "sap";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "pgd") return AttackKind::pgd;
  if (s == "sap") return AttackKind::sap;
  throw Error("E_CONFIG", "unknown attack kind '" + s + "' (expected fgsm, pgd or sap)");
}

json AttackConfig::to_json() const {
  return {{"kind", to_string(kind)},
          {"epsilon", epsilon},
          {"step_size", step_size},
          {"n_steps", n_steps},
          {"smooth_sigma_s", smooth_sigma_s},
          {"kernel_truncate", kernel_truncate},
          {"rand_init", rand_init},
          {"seed", seed},
          {"fs", fs}};
}

AttackConfig AttackConfig::from_json(const json& j) {
  AttackConfig c;
  if (j.contains("kind")) c.kind = attack_kind_from_string(j.at("kind"));
  c.epsilon = j.value("epsilon", c.epsilon);
  c.step_size = j.value("step_size", c.step_size);
  c.n_steps = j.value("n_steps", c.n_steps);
  c.smooth_sigma_s = j.value("smooth_sigma_s", c.smooth_sigma_s);
  c.kernel_truncate = j.value("kernel_truncate", c.kernel_truncate);
  c.rand_init = j.value("rand_init", c.rand_init);
  c.seed = j.value("seed", c.seed);
  c.fs = j.value("fs", c.fs);
  return c;
}

void validate(const AttackConfig& c) {
  if (!(c.epsilon >= 0) || !std::isfinite(c.epsilon))
    throw Error("E_CONFIG", "attack epsilon must be finite and >= 0");
  if (c.n_steps < 1) throw Error("E_CONFIG", "attack n_steps must be >= 1");
  if (c.kind != AttackKind::fgsm && !(c.step_size > 0))
    throw Error("E_CONFIG", "iterative attacks need step_size > 0");
  if (c.kind == AttackKind::sap) {
    if (!(c.smooth_sigma_s > 0)) throw Error("E_CONFIG", "SAP needs smooth_sigma_s > 0");
    if (!(c.kernel_truncate > 0)) throw Error("E_CONFIG", "SAP needs kernel_truncate > 0");
    if (!(c.fs > 0)) throw Error("E_CONFIG", "SAP needs the sampling rate of the attacked signals");
  }
}

AttackConfig single_step(double epsilon, double fs, double smooth_sigma_s) {
  AttackConfig c;
  c.kind = AttackKind::sap;
  c.epsilon = epsilon;
  c.step_size = epsilon > 0 ? epsilon : 1.0;
  c.n_steps = 1;
  c.smooth_sigma_s = smooth_sigma_s;
  c.fs = fs;
  return c;
}

std::vector<double> gaussian_kernel(double sigma_samples, double truncate) {
  const auto radius = static_cast<Index>(truncate * sigma_samples + 0.5);
  if (radius <= 0) return {1.0};
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0;
  for (Index i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * double(i * i) / (sigma_samples * sigma_samples));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

template <typename S>
Tensor<S> smooth_rows(const Tensor<S>& field, std::span<const double> kernel) {
  const Index L = field.dim(field.rank() - 1);
  const Index rows = field.size() / L;
  const Index K = static_cast<Index>(kernel.size());
  if (K > L)
    throw Error("E_KERNEL", "smoothing kernel (" + std::to_string(K) + " taps) is longer than the signal (" +
                                std::to_string(L) + " samples)");
  const Index r = K / 2;
  std::vector<S> taps(kernel.begin(), kernel.end());
  Tensor<S> out(field.shape());
  for (Index row = 0; row < rows; ++row) {
    const S* in = field.data() + row * L;
    S* o = out.data() + row * L;
    for (Index t = 0; t < L; ++t) {
      S acc = S(0);
      for (Index j = 0; j < K; ++j) acc += taps[j] * in[reflect_index(t + j - r, L)];
      o[t] = acc;
    }
  }
  return out;
}

template <typename S>
Tensor<S> loss_input_gradient(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                              const Tensor<S>* mask) {
  Graph<S> g;
  Session<S> s(g, *p.model, p.mode, false);
  s.collect_stats = false;
  Var xv = g.variable(x);
  Var loss = ops::bce_with_logits_sum(g, p.logits(s, xv, mask), labels);
  g.backward(loss);
  return g.grad(xv);
}

namespace {

template <typename S>
typename Tensor<S>::Array sign_of(const typename Tensor<S>::Array& a) {
  return (a > S(0)).template cast<S>() - (a < S(0)).template cast<S>();
}

template <typename S>
typename Tensor<S>::Array clip(const typename Tensor<S>::Array& a, S eps) {
  return a.max(-eps).min(eps);
}

// Attack on a contiguous block of records; rows of x are records offset..offset+N.
template <typename S>
Tensor<S> attack_block(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                       const AttackConfig& cfg, const Tensor<S>* mask, Index offset,
                       const std::vector<double>& kernel) {
  const S eps = S(cfg.epsilon);
  Tensor<S> delta(x.shape());
  const bool smooth = cfg.kind == AttackKind::sap;
  if (cfg.kind == AttackKind::fgsm) {
    delta.array() = eps * sign_of<S>(loss_input_gradient(p, x, labels, mask).array());
    return delta;
  }
  if (cfg.rand_init) {
    const Index row = x.size() / x.dim(0);
    for (Index i = 0; i < x.dim(0); ++i) {
      std::mt19937_64 rng(splitmix64(cfg.seed ^ static_cast<std::uint64_t>(offset + i)));
      std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
      for (Index j = 0; j < row; ++j) delta[i * row + j] = S(u(rng));
    }
    if (smooth) delta = smooth_rows(delta, kernel);
    delta.array() = clip<S>(delta.array(), eps);
  }
  const S step = S(cfg.step_size);
  for (int it = 0; it < cfg.n_steps; ++it) {
    Tensor<S> xa(x.shape(), x.array() + delta.array());
    Tensor<S> dir(x.shape(), sign_of<S>(loss_input_gradient(p, xa, labels, mask).array()));
    if (smooth) dir = smooth_rows(dir, kernel);
    delta.array() = clip<S>(delta.array() + step * dir.array(), eps);
  }
  return delta;
}

template <typename S>
std::vector<std::uint8_t> decisions_changed(const Tensor<S>& a, const Tensor<S>& b) {
  const Index N = a.dim(0), K = a.dim(1);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(N), 0);
  for (Index i = 0; i < N; ++i)
    for (Index k = 0; k < K; ++k)
      if ((a[i * K + k] >= S(0.5)) != (b[i * K + k] >= S(0.5))) out[i] = 1;
  return out;
}

}  // namespace

template <typename S>
AdvBatch<S> run_attack(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                       const AttackConfig& cfg, const Tensor<S>* mask, Index record_offset) {
  validate(cfg);
  check_input_shape(*p.model, x);
  if (labels.rank() != 2 || labels.dim(0) != x.dim(0))
    throw Error("E_SHAPE", "labels " + shape_string(labels.shape()) + " do not match inputs " +
                               shape_string(x.shape()));
  std::vector<double> kernel{1.0};
  if (cfg.kind == AttackKind::sap) {
    kernel = gaussian_kernel(cfg.smooth_sigma_s * cfg.fs, cfg.kernel_truncate);
    if (static_cast<Index>(kernel.size()) > x.dim(2))
      throw Error("E_KERNEL", "SAP kernel (" + std::to_string(kernel.size()) +
                                  " taps) is longer than the signal");
  }
  AdvBatch<S> out;
  if (p.mode == Mode::train) {
    // Batch statistics couple the records, so the batch is attacked as one block.
    out.delta = attack_block(p, x, labels, cfg, mask, record_offset, kernel);
  } else {
    const Index N = x.dim(0);
    constexpr Index kChunk = 32;
    const Index n_chunks = (N + kChunk - 1) / kChunk;
    out.delta = Tensor<S>(x.shape());
    const Index row = x.size() / N;
    parallel_for(static_cast<std::size_t>(n_chunks), [&](std::size_t cb, std::size_t ce) {
      for (std::size_t c = cb; c < ce; ++c) {
        const Index b = static_cast<Index>(c) * kChunk, e = std::min(N, b + kChunk);
        Tensor<S> m;
        if (mask) m = slice_rows(*mask, b, e);
        Tensor<S> d = attack_block(p, slice_rows(x, b, e), slice_rows(labels, b, e), cfg,
                                   mask ? &m : nullptr, record_offset + b, kernel);
        out.delta.array().segment(b * row, (e - b) * row) = d.array();
      }
    });
  }
  const double worst = out.delta.empty() ? 0.0 : double(out.delta.array().abs().maxCoeff());
  if (worst > cfg.epsilon + 1e-6)
    throw Error("E_BUDGET", "perturbation exceeds the L-inf budget: " + std::to_string(worst));
  out.x_adv = Tensor<S>(x.shape(), x.array() + out.delta.array());
  if (p.mode == Mode::eval)
    out.success = decisions_changed(predict_scores(p, x, mask), predict_scores(p, out.x_adv, mask));
  return out;
}

template <typename S>
AdvBatch<S> fgsm(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                 const AttackConfig& cfg, const Tensor<S>* mask, Index record_offset) {
  AttackConfig c = cfg;
  c.kind = AttackKind::fgsm;
  return run_attack(p, x, labels, c, mask, record_offset);
}

template <typename S>
AdvBatch<S> pgd(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                const AttackConfig& cfg, const Tensor<S>* mask, Index record_offset) {
  AttackConfig c = cfg;
  c.kind = AttackKind::pgd;
  return run_attack(p, x, labels, c, mask, record_offset);
}

template <typename S>
AdvBatch<S> sap(const Predictor<S>& p, const Tensor<S>& x, const Tensor<S>& labels,
                const AttackConfig& cfg, const Tensor<S>* mask, Index record_offset) {
  AttackConfig c = cfg;
  c.kind = AttackKind::sap;
  return run_attack(p, x, labels, c, mask, record_offset);
}

template <typename S>
SweepResult attack_sweep(const Predictor<S>& p, const LabeledBatch<S>& data, const AttackConfig& base,
                         std::span<const double> epsilons) {
  SweepResult r;
  const Tensor<S>* mask = data.mask.empty() ? nullptr : &data.mask;
  const Eigen::MatrixXd labels = to_matrix(data.labels);
  for (double eps : epsilons) {
    AttackConfig c = base;
    c.epsilon = eps;
    if (c.fs <= 0) c.fs = data.fs;
    AdvBatch<S> adv = run_attack(p, data.x, data.labels, c, mask);
    const Eigen::MatrixXd scores = to_matrix(predict_scores(p, adv.x_adv, mask));
    SweepPoint pt{eps, macro_f1(scores, labels), macro_auc(scores, labels)};
    if (!r.points.empty() && pt.macro_f1 > r.points.back().macro_f1) r.monotone_f1 = false;
    r.points.push_back(pt);
  }
  return r;
}

#define CPR_INSTANTIATE_ATTACKS(S)                                                                \
  template Tensor<S> smooth_rows(const Tensor<S>&, std::span<const double>);                     \
  template Tensor<S> loss_input_gradient(const Predictor<S>&, const Tensor<S>&, const Tensor<S>&, \
                                         const Tensor<S>*);                                      \
  template AdvBatch<S> run_attack(const Predictor<S>&, const Tensor<S>&, const Tensor<S>&,       \
                                  const AttackConfig&, const Tensor<S>*, Index);                 \
  template AdvBatch<S> fgsm(const Predictor<S>&, const Tensor<S>&, const Tensor<S>&,             \
                            const AttackConfig&, const Tensor<S>*, Index);                       \
  template AdvBatch<S> pgd(const Predictor<S>&, const Tensor<S>&, const Tensor<S>&,              \
                           const AttackConfig&, const Tensor<S>*, Index);                        \
  template AdvBatch<S> sap(const Predictor<S>&, const Tensor<S>&, const Tensor<S>&,              \
                           const AttackConfig&, const Tensor<S>*, Index);                        \
  template SweepResult attack_sweep(const Predictor<S>&, const LabeledBatch<S>&, const AttackConfig&, \
                                    std::span<const double>);
CPR_INSTANTIATE_ATTACKS(float)
CPR_INSTANTIATE_ATTACKS(double)

}  // namespace cpr

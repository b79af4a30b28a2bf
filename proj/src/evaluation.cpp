#include "cpr/evaluation.hpp"

#include "cpr/util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

namespace cpr {

using nlohmann::json;

// ---- metrics --------------------------------------------------------------------------------

double binary_f1(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
  if (predicted.size() != truth.size()) throw Error("E_SHAPE", "prediction/label length mismatch");
  if (truth.empty()) throw Error("E_METRIC", "F1 of an empty set");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    tp += predicted[i] && truth[i];
    fp += predicted[i] && !truth[i];
    fn += !predicted[i] && truth[i];
  }
  const double denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2 * tp / denom;
}

double binary_auc(std::span<const double> scores, std::span<const std::uint8_t> truth) {
  if (scores.size() != truth.size()) throw Error("E_SHAPE", "score/label length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double n_pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (truth[i]) {
      n_pos += 1;
      rank_sum += rank[i];
    }
  const double n_neg = double(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::numeric_limits<double>::quiet_NaN();
  return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

namespace {

void check_pair(const Eigen::MatrixXd& a, const Eigen::MatrixXd& labels) {
  if (a.rows() == 0 || a.cols() == 0) throw Error("E_METRIC", "metrics need at least one record and class");
  if (a.rows() != labels.rows() || a.cols() != labels.cols())
    throw Error("E_SHAPE", "scores and labels differ in shape");
}

std::vector<std::uint8_t> column_bits(const Eigen::MatrixXd& m, Eigen::Index c, double threshold) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[i] = m(i, c) >= threshold;
  return out;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

}  // namespace

std::vector<double> per_class_f1(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels, double threshold) {
  check_pair(scores, labels);
  std::vector<double> out;
  for (Eigen::Index c = 0; c < scores.cols(); ++c)
    out.push_back(binary_f1(column_bits(scores, c, threshold), column_bits(labels, c, 0.5)));
  return out;
}

std::vector<double> per_class_f1_decisions(const Eigen::MatrixXd& decisions, const Eigen::MatrixXd& labels) {
  return per_class_f1(decisions, labels, 0.5);
}

std::vector<double> per_class_auc(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels) {
  check_pair(scores, labels);
  std::vector<double> out;
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    std::vector<double> s(scores.col(c).data(), scores.col(c).data() + scores.rows());
    out.push_back(binary_auc(s, column_bits(labels, c, 0.5)));
  }
  return out;
}

double macro_f1(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels, double threshold) {
  return mean(per_class_f1(scores, labels, threshold));
}

double macro_f1_decisions(const Eigen::MatrixXd& decisions, const Eigen::MatrixXd& labels) {
  return mean(per_class_f1_decisions(decisions, labels));
}

double macro_auc(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels, std::vector<int>* skipped) {
  const auto per = per_class_auc(scores, labels);
  double sum = 0;
  int n = 0;
  for (std::size_t c = 0; c < per.size(); ++c) {
    if (std::isnan(per[c])) {
      if (skipped) skipped->push_back(static_cast<int>(c));
      continue;
    }
    sum += per[c];
    ++n;
  }
  if (n == 0) throw Error("E_METRIC", "no class has both positive and negative records");
  return sum / n;
}

double robustness_gap(double clean, double attacked) {
  if (clean == 0) throw Error("E_METRIC", "gap undefined for a zero clean score");
  return (clean - attacked) / clean;
}

double gap_percent(double clean, double attacked) {
  return std::round(-1000.0 * robustness_gap(clean, attacked)) / 10.0;
}

json MetricReport::to_json() const {
  json j = {{"macro_f1", macro_f1},
            {"macro_auc", macro_auc},
            {"per_class_f1", per_class_f1},
            {"auc_skipped_classes", auc_skipped},
            {"f1_averaging", "macro"}};
  json auc = json::array();
  for (double a : per_class_auc) auc.push_back(std::isnan(a) ? json(nullptr) : json(a));
  j["per_class_auc"] = auc;
  if (attacked_f1) j["attacked_f1"] = *attacked_f1;
  if (attacked_auc) j["attacked_auc"] = *attacked_auc;
  if (robustness_gap) j["robustness_gap"] = *robustness_gap;
  return j;
}

MetricReport metric_report(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& labels, double threshold) {
  MetricReport r;
  r.per_class_f1 = per_class_f1(scores, labels, threshold);
  r.macro_f1 = mean(r.per_class_f1);
  r.per_class_auc = per_class_auc(scores, labels);
  r.macro_auc = macro_auc(scores, labels, &r.auc_skipped);
  return r;
}

void add_attacked(MetricReport& r, const Eigen::MatrixXd& attacked, const Eigen::MatrixXd& labels,
                  double threshold) {
  r.attacked_f1 = macro_f1(attacked, labels, threshold);
  r.attacked_auc = macro_auc(attacked, labels);
  r.robustness_gap = robustness_gap(r.macro_f1, *r.attacked_f1);
}

template <typename S>
Eigen::MatrixXd to_matrix(const Tensor<S>& t) {
  return t.matrix(t.dim(0), t.size() / t.dim(0)).template cast<double>();
}

// ---- saliency -------------------------------------------------------------------------------

Eigen::VectorXd upsample_linear(const Eigen::VectorXd& v, Eigen::Index n) {
  const Eigen::Index m = v.size();
  Eigen::VectorXd out(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    double src = (double(t) + 0.5) * double(m) / double(n) - 0.5;
    src = std::clamp(src, 0.0, double(m - 1));
    const auto i0 = static_cast<Eigen::Index>(std::floor(src));
    const Eigen::Index i1 = std::min(i0 + 1, m - 1);
    const double f = src - double(i0);
    out[t] = (1 - f) * v[i0] + f * v[i1];
  }
  return out;
}

template <typename S>
SaliencyMap gradcam_1d(const ModelBundle<S>& m, const Tensor<S>& x, int class_id) {
  check_input_shape(m, x);
  const Index K = m.arch().n_classes;
  if (class_id < 0 || class_id >= K)
    throw Error("E_PARAM", "class " + std::to_string(class_id) + " out of range [0, " + std::to_string(K) + ")");
  const Index N = x.dim(0), L = x.dim(2);
  SaliencyMap out;
  out.class_id = class_id;
  out.weights = Eigen::MatrixXd::Zero(N, L);
  constexpr Index kChunk = 32;
  const Index n_chunks = (N + kChunk - 1) / kChunk;
  parallel_for(static_cast<std::size_t>(n_chunks), [&](std::size_t cb, std::size_t ce) {
    for (std::size_t c = cb; c < ce; ++c) {
      const Index b = static_cast<Index>(c) * kChunk, e = std::min(N, b + kChunk);
      const Index B = e - b;
      Graph<S> g;
      Session<S> s(g, m, Mode::eval, false);
      Var xv = g.variable(slice_rows(x, b, e));
      Var feats = content_features(s, xv);
      Var logits = classify(s, content_head(s, feats));
      Tensor<S> pick({1, K});
      pick[class_id] = S(1);
      Var sel = ops::linear(g, logits, g.constant(pick), Var{});
      Var total = ops::linear(g, ops::reshape(g, sel, {1, B}), g.constant(Tensor<S>::filled({1, B}, S(1))), Var{});
      g.backward(total);
      const auto& A = g.value(feats);
      const Tensor<S> dA = g.grad(feats);
      const Index C = A.dim(1), Lf = A.dim(2);
      for (Index r = 0; r < B; ++r) {
        const auto a = A.matrix(B * C, Lf).middleRows(r * C, C).template cast<double>();
        const auto da = dA.matrix(B * C, Lf).middleRows(r * C, C).template cast<double>();
        const Eigen::VectorXd alpha = da.rowwise().mean();
        Eigen::VectorXd cam = (a.transpose() * alpha).cwiseMax(0.0);
        Eigen::VectorXd up = upsample_linear(cam, L);
        const double lo = up.minCoeff(), hi = up.maxCoeff();
        if (hi > lo)
          up = (up.array() - lo) / (hi - lo);
        else
          up.setZero();
        out.weights.row(b + r) = up.transpose();
      }
    }
  });
  return out;
}

double in_mask_mass_ratio(const Eigen::MatrixXd& sal, const Eigen::MatrixXd& mask) {
  if (sal.rows() != mask.rows() || sal.cols() != mask.cols())
    throw Error("E_SHAPE", "saliency and mask differ in shape");
  double sum = 0;
  int n = 0;
  for (Eigen::Index i = 0; i < sal.rows(); ++i) {
    const double total = sal.row(i).sum();
    if (total <= 0) continue;
    sum += sal.row(i).cwiseProduct(mask.row(i)).sum() / total;
    ++n;
  }
  return n == 0 ? 0.0 : sum / n;
}

// ---- latent diagnostics ---------------------------------------------------------------------

namespace {

template <typename S>
std::vector<LatentPair<S>> encode_chunked(const ModelBundle<S>& m, const Tensor<S>& x) {
  const Index N = x.dim(0);
  std::vector<LatentPair<S>> out(static_cast<std::size_t>(N));
  constexpr Index kChunk = 64;
  const Index n_chunks = (N + kChunk - 1) / kChunk;
  parallel_for(static_cast<std::size_t>(n_chunks), [&](std::size_t cb, std::size_t ce) {
    for (std::size_t c = cb; c < ce; ++c) {
      const Index b = static_cast<Index>(c) * kChunk, e = std::min(N, b + kChunk);
      auto part = encode(m, slice_rows(x, b, e));
      std::move(part.begin(), part.end(), out.begin() + b);
    }
  });
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

template <typename S>
std::vector<LatentShift> latent_shift(const ModelBundle<S>& m, const Tensor<S>& x, const Tensor<S>& x_adv) {
  if (!m.is_dual())
    throw Error("E_MODEL", "latent_shift needs a dual-pathway model; an ERM baseline has no style latent");
  if (x.shape() != x_adv.shape()) throw Error("E_SHAPE", "clean and perturbed batches differ in shape");
  const auto a = encode_chunked(m, x);
  const auto b = encode_chunked(m, x_adv);
  std::vector<LatentShift> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i].content = double((b[i].z_c - a[i].z_c).norm());
    out[i].style = double((b[i].z_s - a[i].z_s).norm());
  }
  return out;
}

double median_shift_ratio(const std::vector<LatentShift>& shifts) {
  std::vector<double> r;
  for (const auto& s : shifts)
    if (s.style > 0) r.push_back(s.content / s.style);
  if (r.empty()) throw Error("E_METRIC", "no record has a non-zero style shift");
  const std::size_t mid = r.size() / 2;
  std::nth_element(r.begin(), r.begin() + mid, r.end());
  if (r.size() % 2) return r[mid];
  const double hi = r[mid];
  return 0.5 * (hi + *std::max_element(r.begin(), r.begin() + mid));
}

std::string embeddings_csv(const ModelBundle<float>& m, const LabeledBatch<float>& data,
                           const Tensor<float>* x_adv, const std::string& config_hash) {
  const auto& a = m.arch();
  std::string out = "# config_hash=" + config_hash + "\nrecord_id,adversarial";
  for (int k = 0; k < a.n_classes; ++k) out += ",label_" + std::to_string(k);
  for (int k = 0; k < a.d_content; ++k) out += ",zc_" + std::to_string(k);
  if (m.is_dual())
    for (int k = 0; k < a.d_style; ++k) out += ",zs_" + std::to_string(k);
  out += "\n";
  auto emit = [&](const Tensor<float>& x, int flag) {
    const auto lat = encode_chunked(m, x);
    const Index K = data.labels.dim(1);
    for (std::size_t i = 0; i < lat.size(); ++i) {
      out += data.ids[i] + "," + std::to_string(flag);
      for (Index k = 0; k < K; ++k) out += "," + std::to_string(int(data.labels[Index(i) * K + k]));
      for (Index k = 0; k < lat[i].z_c.size(); ++k) out += "," + num(lat[i].z_c[k]);
      for (Index k = 0; k < lat[i].z_s.size(); ++k) out += "," + num(lat[i].z_s[k]);
      out += "\n";
    }
  };
  emit(data.x, 0);
  if (x_adv) emit(*x_adv, 1);
  return out;
}

void export_embeddings(const ModelBundle<float>& m, const LabeledBatch<float>& data, const Tensor<float>* x_adv,
                       const std::string& path, const std::string& config_hash) {
  write_file_atomic(path, embeddings_csv(m, data, x_adv, config_hash));
}

// ---- structural invariance ------------------------------------------------------------------

json InvarianceReport::to_json() const {
  json j = {{"background_weight_norm", background_weight_norm},
            {"initial_background_norm", initial_background_norm},
            {"latent_shift", latent_shift},
            {"latent_shift_relative", latent_shift_relative},
            {"grad_norm", grad_norm},
            {"iterations", iterations},
            {"converged", converged},
            {"passed", passed}};
  if (closed_form_max_diff) j["closed_form_max_diff"] = *closed_form_max_diff;
  return j;
}

namespace {

struct LinearProblem {
  Eigen::MatrixXd A;  // D^T P D
  Eigen::MatrixXd S;  // second moment of [x; 1]
  Eigen::MatrixXd R;  // D^T P E[x [x; 1]^T]
};

LinearProblem linear_problem(const Eigen::MatrixXd& X, const Eigen::VectorXd& mask, const Eigen::MatrixXd& D) {
  const Eigen::Index N = X.rows(), L = X.cols();
  Eigen::MatrixXd Xt(N, L + 1);
  Xt << X, Eigen::VectorXd::Ones(N);
  LinearProblem p;
  const Eigen::MatrixXd PD = mask.asDiagonal() * D;
  p.A = D.transpose() * PD;
  p.S = Xt.transpose() * Xt / double(N);
  p.R = PD.transpose() * (X.transpose() * Xt) / double(N);
  return p;
}

Eigen::MatrixXd training_inputs(const Eigen::MatrixXd& data, const Eigen::VectorXd& mask, bool project) {
  if (!project) return data;
  return data.array().rowwise() * mask.transpose().array();
}

Eigen::MatrixXd random_decoder(Eigen::Index L, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(double(L)));
  Eigen::MatrixXd D(L, d);
  for (Eigen::Index i = 0; i < D.size(); ++i) D.data()[i] = n(rng);
  return D;
}

}  // namespace

Eigen::MatrixXd invariance_closed_form(const Eigen::MatrixXd& data, const Eigen::VectorXd& mask,
                                       const Eigen::MatrixXd& decoder, double lambda) {
  if (!(lambda > 0)) throw Error("E_PARAM", "the closed form needs lambda > 0");
  const LinearProblem p = linear_problem(data, mask, decoder);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(p.A), es(p.S);
  const Eigen::MatrixXd& U = ea.eigenvectors();
  const Eigen::MatrixXd& V = es.eigenvectors();
  Eigen::MatrixXd C = U.transpose() * p.R * V;
  for (Eigen::Index i = 0; i < C.rows(); ++i)
    for (Eigen::Index j = 0; j < C.cols(); ++j)
      C(i, j) /= ea.eigenvalues()[i] * es.eigenvalues()[j] + lambda;
  return U * C * V.transpose();
}

InvarianceReport verify_structural_invariance(const Eigen::MatrixXd& data, const Eigen::VectorXd& mask,
                                              const InvarianceConfig& cfg) {
  const Eigen::Index N = data.rows(), L = data.cols();
  if (mask.size() != L) throw Error("E_SHAPE", "mask length does not match the signal length");
  if (N == 0) throw Error("E_DATA", "no training records");
  if (!(cfg.lambda >= 0)) throw Error("E_PARAM", "lambda must be >= 0");
  for (Eigen::Index j = 0; j < L; ++j)
    if (mask[j] != 0 && mask[j] != 1) throw Error("E_MASK", "mask must be binary");
  std::mt19937_64 rng(cfg.seed);
  const Eigen::MatrixXd X = training_inputs(data, mask, cfg.project_to_mask);
  const Eigen::MatrixXd D = random_decoder(L, cfg.latent_dim, rng);
  const LinearProblem p = linear_problem(X, mask, D);
  const double lam = cfg.lambda;

  std::normal_distribution<double> init(0.0, 1.0 / std::sqrt(double(L)));
  Eigen::MatrixXd W(cfg.latent_dim, L + 1);
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = init(rng);

  std::vector<Eigen::Index> off;
  for (Eigen::Index j = 0; j < L; ++j)
    if (mask[j] == 0) off.push_back(j);
  auto background_norm = [&](const Eigen::MatrixXd& w) {
    double s = 0;
    for (Eigen::Index j : off) s += w.col(j).squaredNorm();
    return std::sqrt(s);
  };

  InvarianceReport rep;
  rep.initial_background_norm = background_norm(W);

  // Conjugate gradients on the quadratic, Jacobi preconditioned; the gradient is 2(A W S - R + lam W).
  auto hess = [&](const Eigen::MatrixXd& V) -> Eigen::MatrixXd { return 2.0 * (p.A * V * p.S + lam * V); };
  auto residual = [&]() -> Eigen::MatrixXd { return 2.0 * (p.R - p.A * W * p.S - lam * W); };
  Eigen::MatrixXd diag(W.rows(), W.cols());
  for (Eigen::Index i = 0; i < W.rows(); ++i)
    for (Eigen::Index j = 0; j < W.cols(); ++j) diag(i, j) = 2.0 * (p.A(i, i) * p.S(j, j) + lam);
  const Eigen::MatrixXd inv_diag = (diag.array() > 0).select(diag.array().inverse(), 1.0).matrix();

  Eigen::MatrixXd r = residual();
  Eigen::MatrixXd z = r.cwiseProduct(inv_diag);
  Eigen::MatrixXd dir = z;
  double rz = r.cwiseProduct(z).sum();
  int it = 0;
  for (; it < cfg.max_iterations && r.norm() >= cfg.grad_tol; ++it) {
    const Eigen::MatrixXd Hd = hess(dir);
    const double curv = dir.cwiseProduct(Hd).sum();
    if (!(curv > 0)) break;
    const double step = rz / curv;
    W += step * dir;
    if ((it + 1) % 50 == 0)
      r = residual();
    else
      r -= step * Hd;
    z = r.cwiseProduct(inv_diag);
    const double rz_new = r.cwiseProduct(z).sum();
    dir = z + (rz_new / rz) * dir;
    rz = rz_new;
  }
  rep.iterations = it;
  rep.grad_norm = residual().norm();
  rep.converged = rep.grad_norm < cfg.grad_tol;
  rep.background_weight_norm = background_norm(W);

  std::normal_distribution<double> nd(0.0, 1.0);
  for (int k = 0; k < cfg.n_probes && !off.empty(); ++k) {
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(L);
    for (Eigen::Index j : off) delta[j] = nd(rng);
    const double shift = (W.leftCols(L) * delta).norm();
    rep.latent_shift = std::max(rep.latent_shift, shift);
    rep.latent_shift_relative = std::max(rep.latent_shift_relative, shift / delta.norm());
  }
  if (lam > 0) rep.closed_form_max_diff = (W - invariance_closed_form(X, mask, D, lam)).cwiseAbs().maxCoeff();
  rep.passed = rep.converged && rep.background_weight_norm < cfg.tol_w && rep.latent_shift_relative < cfg.tol_latent;
  return rep;
}

#define CPR_INSTANTIATE_EVAL(S)                                                                  \
  template Eigen::MatrixXd to_matrix(const Tensor<S>&);                                         \
  template SaliencyMap gradcam_1d(const ModelBundle<S>&, const Tensor<S>&, int);                \
  template std::vector<LatentShift> latent_shift(const ModelBundle<S>&, const Tensor<S>&, const Tensor<S>&);
CPR_INSTANTIATE_EVAL(float)
CPR_INSTANTIATE_EVAL(double)

}  // namespace cpr

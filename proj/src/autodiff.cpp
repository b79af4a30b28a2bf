#include "cpr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace cpr {

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

template <typename S>
Var Graph<S>::constant(T value) {
  nodes_.push_back({std::move(value), T(), false, nullptr});
  return {static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
Var Graph<S>::variable(T value) {
  nodes_.push_back({std::move(value), T(), true, nullptr});
  return {static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
Var Graph<S>::record(T value, const std::vector<Var>& inputs, Backprop backprop) {
  bool rg = false;
  for (Var v : inputs) rg = rg || nodes_.at(v.id).requires_grad;
  nodes_.push_back({std::move(value), T(), rg, rg ? std::move(backprop) : nullptr});
  return {static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
typename Graph<S>::T& Graph<S>::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty()) n.grad = T::zeros(n.value.shape());
  return n.grad;
}

template <typename S>
typename Graph<S>::T Graph<S>::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.grad.empty() ? T::zeros(n.value.shape()) : n.grad;
}

template <typename S>
void Graph<S>::backward(Var loss) {
  if (value(loss).size() != 1) throw std::invalid_argument("backward() needs a scalar loss");
  for (auto& n : nodes_) n.grad = T();
  if (!nodes_.at(loss.id).requires_grad) return;
  grad_buffer(loss)[0] = S(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backprop) continue;
    n.backprop(*this, n.grad);
  }
}

namespace {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// Image [B, C, L] -> columns [C*K, B*Lo]; column (b, o) holds the receptive field of output o.
template <typename S>
Mat<S> im2col(const S* x, Index B, Index C, Index L, Index K, Index stride, Index pad, Index Lo) {
  Mat<S> col(C * K, B * Lo);
  for (Index b = 0; b < B; ++b)
    for (Index o = 0; o < Lo; ++o) {
      S* dst = col.col(b * Lo + o).data();
      const Index base = o * stride - pad;
      for (Index c = 0; c < C; ++c) {
        const S* src = x + (b * C + c) * L;
        for (Index k = 0; k < K; ++k) {
          const Index idx = base + k;
          dst[c * K + k] = (idx >= 0 && idx < L) ? src[idx] : S(0);
        }
      }
    }
  return col;
}

template <typename S>
void col2im(const Mat<S>& col, S* x, Index B, Index C, Index L, Index K, Index stride, Index pad,
            Index Lo) {
  for (Index b = 0; b < B; ++b)
    for (Index o = 0; o < Lo; ++o) {
      const S* src = col.col(b * Lo + o).data();
      const Index base = o * stride - pad;
      for (Index c = 0; c < C; ++c) {
        S* dst = x + (b * C + c) * L;
        for (Index k = 0; k < K; ++k) {
          const Index idx = base + k;
          if (idx >= 0 && idx < L) dst[idx] += src[c * K + k];
        }
      }
    }
}

// [B, C, L] -> [C, B*L]
template <typename S>
Mat<S> channels_major(const S* x, Index B, Index C, Index L) {
  Mat<S> m(C, B * L);
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      for (Index l = 0; l < L; ++l) m(c, b * L + l) = x[(b * C + c) * L + l];
  return m;
}

template <typename S>
void from_channels_major(const Mat<S>& m, S* x, Index B, Index C, Index L, bool accumulate) {
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      for (Index l = 0; l < L; ++l) {
        S& d = x[(b * C + c) * L + l];
        d = accumulate ? d + m(c, b * L + l) : m(c, b * L + l);
      }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

namespace ops {

template <typename S>
Var conv1d(Graph<S>& g, Var x, Var w, const ConvGeometry& geo) {
  const auto& xv = g.value(x);
  const auto& wv = g.value(w);
  require(xv.rank() == 3 && wv.rank() == 3 && xv.dim(1) == wv.dim(1),
          "conv1d: input " + shape_string(xv.shape()) + " incompatible with weight " +
              shape_string(wv.shape()));
  const Index B = xv.dim(0), Ci = xv.dim(1), L = xv.dim(2);
  const Index Co = wv.dim(0), K = wv.dim(2);
  const Index Lo = (L + 2 * geo.pad - K) / geo.stride + 1;
  require(Lo > 0, "conv1d: empty output");
  auto col = std::make_shared<Mat<S>>(im2col(xv.data(), B, Ci, L, K, geo.stride, geo.pad, Lo));
  const Mat<S> out = wv.matrix(Co, Ci * K) * (*col);
  Tensor<S> y({B, Co, Lo});
  from_channels_major(out, y.data(), B, Co, Lo, false);
  return g.record(std::move(y), {x, w}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    const Mat<S> G = channels_major(gy.data(), B, Co, Lo);
    if (gr.requires_grad(w)) gr.grad_buffer(w).matrix(Co, Ci * K).noalias() += G * col->transpose();
    if (gr.requires_grad(x)) {
      const Mat<S> dcol = gr.value(w).matrix(Co, Ci * K).transpose() * G;
      col2im(dcol, gr.grad_buffer(x).data(), B, Ci, L, K, geo.stride, geo.pad, Lo);
    }
  });
}

template <typename S>
Var conv_transpose1d(Graph<S>& g, Var x, Var w, const ConvGeometry& geo) {
  const auto& xv = g.value(x);
  const auto& wv = g.value(w);
  require(xv.rank() == 3 && wv.rank() == 3 && xv.dim(1) == wv.dim(0),
          "conv_transpose1d: input " + shape_string(xv.shape()) + " incompatible with weight " +
              shape_string(wv.shape()));
  const Index B = xv.dim(0), Ci = xv.dim(1), L = xv.dim(2);
  const Index Co = wv.dim(1), K = wv.dim(2);
  const Index Lo = (L - 1) * geo.stride - 2 * geo.pad + K + geo.output_pad;
  require(Lo > 0, "conv_transpose1d: empty output");
  auto X = std::make_shared<Mat<S>>(channels_major(xv.data(), B, Ci, L));
  const Mat<S> colT = wv.matrix(Ci, Co * K).transpose() * (*X);
  Tensor<S> y({B, Co, Lo});
  col2im(colT, y.data(), B, Co, Lo, K, geo.stride, geo.pad, L);
  return g.record(std::move(y), {x, w}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    const Mat<S> col = im2col(gy.data(), B, Co, Lo, K, geo.stride, geo.pad, L);
    if (gr.requires_grad(w)) gr.grad_buffer(w).matrix(Ci, Co * K).noalias() += (*X) * col.transpose();
    if (gr.requires_grad(x)) {
      const Mat<S> dX = gr.value(w).matrix(Ci, Co * K) * col;
      from_channels_major(dX, gr.grad_buffer(x).data(), B, Ci, L, true);
    }
  });
}

template <typename S>
Var add_channel_bias(Graph<S>& g, Var x, Var b) {
  const auto& xv = g.value(x);
  const auto& bv = g.value(b);
  require(xv.rank() == 3 && bv.size() == xv.dim(1), "add_channel_bias: shape mismatch");
  const Index B = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
  Tensor<S> y = xv;
  for (Index i = 0; i < B; ++i)
    for (Index c = 0; c < C; ++c) y.array().segment((i * C + c) * L, L) += bv[c];
  return g.record(std::move(y), {x, b}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    if (gr.requires_grad(x)) gr.grad_buffer(x).array() += gy.array();
    if (gr.requires_grad(b)) {
      auto& gb = gr.grad_buffer(b);
      for (Index i = 0; i < B; ++i)
        for (Index c = 0; c < C; ++c) gb[c] += gy.array().segment((i * C + c) * L, L).sum();
    }
  });
}

template <typename S>
Var batch_norm(Graph<S>& g, Var x, Var gamma, Var beta, const Tensor<S>& running_mean,
               const Tensor<S>& running_var, bool train, BatchStats* stats_out, S eps) {
  const auto& xv = g.value(x);
  require(xv.rank() == 3 && g.value(gamma).size() == xv.dim(1) && g.value(beta).size() == xv.dim(1),
          "batch_norm: shape mismatch for input " + shape_string(xv.shape()));
  const Index B = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
  const Index N = B * L;
  auto xhat = std::make_shared<Tensor<S>>(xv.shape());
  auto inv_std = std::make_shared<Eigen::Array<S, Eigen::Dynamic, 1>>(C);
  if (stats_out) {
    stats_out->mean = Tensor<double>({C});
    stats_out->var = Tensor<double>({C});
  }
  for (Index c = 0; c < C; ++c) {
    S mean, var;
    if (train) {
      S acc = 0;
      for (Index i = 0; i < B; ++i) acc += xv.array().segment((i * C + c) * L, L).sum();
      mean = acc / S(N);
      S sq = 0;
      for (Index i = 0; i < B; ++i)
        sq += (xv.array().segment((i * C + c) * L, L) - mean).square().sum();
      var = sq / S(N);
      if (stats_out) {
        stats_out->mean[c] = double(mean);
        stats_out->var[c] = N > 1 ? double(sq) / double(N - 1) : double(var);
      }
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    (*inv_std)[c] = S(1) / std::sqrt(var + eps);
    for (Index i = 0; i < B; ++i)
      xhat->array().segment((i * C + c) * L, L) =
          (xv.array().segment((i * C + c) * L, L) - mean) * (*inv_std)[c];
  }
  Tensor<S> y(xv.shape());
  const auto& gv = g.value(gamma);
  const auto& bv = g.value(beta);
  for (Index i = 0; i < B; ++i)
    for (Index c = 0; c < C; ++c)
      y.array().segment((i * C + c) * L, L) = xhat->array().segment((i * C + c) * L, L) * gv[c] + bv[c];
  return g.record(std::move(y), {x, gamma, beta}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    const auto& gv = gr.value(gamma);
    for (Index c = 0; c < C; ++c) {
      S sum_dy = 0, sum_dy_xhat = 0;
      for (Index i = 0; i < B; ++i) {
        const auto seg = gy.array().segment((i * C + c) * L, L);
        sum_dy += seg.sum();
        sum_dy_xhat += (seg * xhat->array().segment((i * C + c) * L, L)).sum();
      }
      if (gr.requires_grad(gamma)) gr.grad_buffer(gamma)[c] += sum_dy_xhat;
      if (gr.requires_grad(beta)) gr.grad_buffer(beta)[c] += sum_dy;
      if (gr.requires_grad(x)) {
        auto& gx = gr.grad_buffer(x);
        const S k = gv[c] * (*inv_std)[c];
        for (Index i = 0; i < B; ++i) {
          const Index off = (i * C + c) * L;
          if (train) {
            gx.array().segment(off, L) +=
                k * (gy.array().segment(off, L) - sum_dy / S(N) -
                     xhat->array().segment(off, L) * (sum_dy_xhat / S(N)));
          } else {
            gx.array().segment(off, L) += k * gy.array().segment(off, L);
          }
        }
      }
    }
  });
}

template <typename S>
Var relu(Graph<S>& g, Var x) {
  const auto& xv = g.value(x);
  Tensor<S> y(xv.shape(), xv.array().max(S(0)));
  if (g.track_kinks()) {
    std::uint64_t h = 0;
    for (Index i = 0; i < xv.size(); ++i)
      if (xv[i] > 0) h = h * 31 + static_cast<std::uint64_t>(i + 1);
    g.mix_kink(h);
  }
  return g.record(std::move(y), {x}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    const auto& xv = gr.value(x);
    gr.grad_buffer(x).array() += (xv.array() > S(0)).select(gy.array(), S(0));
  });
}

template <typename S>
Var add(Graph<S>& g, Var a, Var b) {
  require(g.value(a).shape() == g.value(b).shape(),
          "add: shape mismatch " + shape_string(g.value(a).shape()) + " vs " +
              shape_string(g.value(b).shape()));
  Tensor<S> y(g.value(a).shape(), g.value(a).array() + g.value(b).array());
  return g.record(std::move(y), {a, b}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    if (gr.requires_grad(a)) gr.grad_buffer(a).array() += gy.array();
    if (gr.requires_grad(b)) gr.grad_buffer(b).array() += gy.array();
  });
}

template <typename S>
Var sub(Graph<S>& g, Var a, Var b) {
  require(g.value(a).shape() == g.value(b).shape(),
          "sub: shape mismatch " + shape_string(g.value(a).shape()) + " vs " +
              shape_string(g.value(b).shape()));
  Tensor<S> y(g.value(a).shape(), g.value(a).array() - g.value(b).array());
  return g.record(std::move(y), {a, b}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    if (gr.requires_grad(a)) gr.grad_buffer(a).array() += gy.array();
    if (gr.requires_grad(b)) gr.grad_buffer(b).array() -= gy.array();
  });
}

template <typename S>
Var scale(Graph<S>& g, Var a, S s) {
  Tensor<S> y(g.value(a).shape(), g.value(a).array() * s);
  return g.record(std::move(y), {a}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    gr.grad_buffer(a).array() += gy.array() * s;
  });
}

template <typename S>
Var mul_const(Graph<S>& g, Var a, const Tensor<S>& c) {
  require(g.value(a).size() == c.size(), "mul_const: size mismatch " +
                                             shape_string(g.value(a).shape()) + " vs " +
                                             shape_string(c.shape()));
  Tensor<S> y(g.value(a).shape(), g.value(a).array() * c.array());
  auto cc = std::make_shared<Tensor<S>>(c);
  return g.record(std::move(y), {a}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    gr.grad_buffer(a).array() += gy.array() * cc->array();
  });
}

template <typename S>
Var sum_squares(Graph<S>& g, Var a) {
  Tensor<S> y = Tensor<S>::scalar(g.value(a).array().square().sum());
  return g.record(std::move(y), {a}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    gr.grad_buffer(a).array() += S(2) * gy[0] * gr.value(a).array();
  });
}

template <typename S>
Var normalize_rows(Graph<S>& g, Var x) {
  const auto& xv = g.value(x);
  require(xv.rank() == 2, "normalize_rows: expected [B, D], got " + shape_string(xv.shape()));
  const Index B = xv.dim(0), D = xv.dim(1);
  auto norms = std::make_shared<Eigen::Array<S, Eigen::Dynamic, 1>>(B);
  Tensor<S> y(xv.shape());
  for (Index i = 0; i < B; ++i) {
    (*norms)[i] = std::max(std::sqrt(xv.array().segment(i * D, D).square().sum()), std::numeric_limits<S>::min());
    y.array().segment(i * D, D) = xv.array().segment(i * D, D) / (*norms)[i];
  }
  Tensor<S> yc = y;
  return g.record(std::move(y), {x}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    auto& gx = gr.grad_buffer(x);
    for (Index i = 0; i < B; ++i) {
      const auto yi = yc.array().segment(i * D, D);
      const auto gi = gy.array().segment(i * D, D);
      gx.array().segment(i * D, D) += (gi - yi * (yi * gi).sum()) / (*norms)[i];
    }
  });
}

template <typename S>
Var global_avg_pool(Graph<S>& g, Var x) {
  const auto& xv = g.value(x);
  require(xv.rank() == 3, "global_avg_pool: expected [B, C, L]");
  const Index B = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
  Tensor<S> y({B, C});
  for (Index i = 0; i < B * C; ++i) y[i] = xv.array().segment(i * L, L).mean();
  return g.record(std::move(y), {x}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    auto& gx = gr.grad_buffer(x);
    for (Index i = 0; i < B * C; ++i) gx.array().segment(i * L, L) += gy[i] / S(L);
  });
}

template <typename S>
Var linear(Graph<S>& g, Var x, Var w, Var b) {
  const auto& xv = g.value(x);
  const auto& wv = g.value(w);
  require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1),
          "linear: input " + shape_string(xv.shape()) + " incompatible with weight " +
              shape_string(wv.shape()));
  const Index B = xv.dim(0), I = xv.dim(1), O = wv.dim(0);
  Tensor<S> y({B, O});
  y.matrix(B, O).noalias() = xv.matrix(B, I) * wv.matrix(O, I).transpose();
  if (b.valid()) y.matrix(B, O).rowwise() += g.value(b).array().matrix().transpose();
  auto backprop = [=](Graph<S>& gr, const Tensor<S>& gy) {
    const auto dY = gy.matrix(B, O);
    if (gr.requires_grad(x)) gr.grad_buffer(x).matrix(B, I).noalias() += dY * gr.value(w).matrix(O, I);
    if (gr.requires_grad(w)) gr.grad_buffer(w).matrix(O, I).noalias() += dY.transpose() * gr.value(x).matrix(B, I);
    if (b.valid() && gr.requires_grad(b))
      gr.grad_buffer(b).array() += dY.colwise().sum().transpose().array();
  };
  if (b.valid()) return g.record(std::move(y), {x, w, b}, backprop);
  return g.record(std::move(y), {x, w}, backprop);
}

template <typename S>
Var concat_features(Graph<S>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(0) == bv.dim(0), "concat_features: shape mismatch");
  const Index B = av.dim(0), I1 = av.dim(1), I2 = bv.dim(1);
  Tensor<S> y({B, I1 + I2});
  y.matrix(B, I1 + I2).leftCols(I1) = av.matrix(B, I1);
  y.matrix(B, I1 + I2).rightCols(I2) = bv.matrix(B, I2);
  return g.record(std::move(y), {a, b}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    if (gr.requires_grad(a)) gr.grad_buffer(a).matrix(B, I1) += gy.matrix(B, I1 + I2).leftCols(I1);
    if (gr.requires_grad(b)) gr.grad_buffer(b).matrix(B, I2) += gy.matrix(B, I1 + I2).rightCols(I2);
  });
}

template <typename S>
Var reshape(Graph<S>& g, Var x, Shape shape) {
  require(shape_size(shape) == g.value(x).size(), "reshape: size mismatch");
  Tensor<S> y = g.value(x).reshaped(shape);
  return g.record(std::move(y), {x}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    gr.grad_buffer(x).array() += gy.array();
  });
}

template <typename S>
Var matmul_tn(Graph<S>& g, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(0) == bv.dim(0),
          "matmul_tn: batch mismatch " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  const Index B = av.dim(0), P = av.dim(1), Q = bv.dim(1);
  Tensor<S> y({P, Q});
  y.matrix(P, Q).noalias() = av.matrix(B, P).transpose() * bv.matrix(B, Q);
  return g.record(std::move(y), {a, b}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    const auto dY = gy.matrix(P, Q);
    if (gr.requires_grad(a)) gr.grad_buffer(a).matrix(B, P).noalias() += gr.value(b).matrix(B, Q) * dY.transpose();
    if (gr.requires_grad(b)) gr.grad_buffer(b).matrix(B, Q).noalias() += gr.value(a).matrix(B, P) * dY;
  });
}

namespace {
template <typename S>
Var bce_impl(Graph<S>& g, Var logits, const Tensor<S>& labels, S weight) {
  const auto& z = g.value(logits);
  require(z.size() == labels.size(), "bce: logits " + shape_string(z.shape()) +
                                         " vs labels " + shape_string(labels.shape()));
  for (Index i = 0; i < labels.size(); ++i)
    require(labels[i] == S(0) || labels[i] == S(1), "bce: labels must be 0 or 1");
  const auto& za = z.array();
  const auto per = za.max(S(0)) - za * labels.array() + (-za.abs()).exp().log1p();
  Tensor<S> y = Tensor<S>::scalar(per.sum() * weight);
  auto lab = std::make_shared<Tensor<S>>(labels);
  return g.record(std::move(y), {logits}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    const auto& za = gr.value(logits).array();
    const auto sig = (S(1) / (S(1) + (-za).exp()));
    gr.grad_buffer(logits).array() += gy[0] * weight * (sig - lab->array());
  });
}
}  // namespace

template <typename S>
Var bce_with_logits(Graph<S>& g, Var logits, const Tensor<S>& labels) {
  return bce_impl(g, logits, labels, S(1) / S(g.value(logits).size()));
}

template <typename S>
Var bce_with_logits_sum(Graph<S>& g, Var logits, const Tensor<S>& labels) {
  const auto& z = g.value(logits);
  return bce_impl(g, logits, labels, S(z.dim(0)) / S(z.size()));
}

template <typename S>
Var gather_rows(Graph<S>& g, Var x, std::span<const Index> index) {
  const auto& xv = g.value(x);
  const Index B = xv.dim(0);
  const Index row = xv.size() / B;
  Shape shape = xv.shape();
  shape[0] = static_cast<Index>(index.size());
  Tensor<S> y(shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < B, "gather_rows: index out of range");
    y.array().segment(Index(i) * row, row) = xv.array().segment(index[i] * row, row);
  }
  std::vector<Index> idx(index.begin(), index.end());
  return g.record(std::move(y), {x}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    auto& gx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < idx.size(); ++i)
      gx.array().segment(idx[i] * row, row) += gy.array().segment(Index(i) * row, row);
  });
}

template <typename S>
Var median_filter(Graph<S>& g, Var x, Index window) {
  const auto& xv = g.value(x);
  require(window >= 1 && window % 2 == 1, "median_filter: window must be odd");
  const Index L = xv.shape().back();
  require(window <= L, "median_filter: window longer than signal");
  const Index rows = xv.size() / L;
  const Index half = window / 2;
  auto source = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(xv.size()));
  Tensor<S> y(xv.shape());
  std::vector<std::pair<S, Index>> buf(static_cast<std::size_t>(window));
  std::uint64_t h = 0;
  for (Index r = 0; r < rows; ++r) {
    const S* row = xv.data() + r * L;
    for (Index i = 0; i < L; ++i) {
      for (Index k = 0; k < window; ++k) {
        const Index j = reflect_index(i - half + k, L);
        buf[k] = {row[j], j};
      }
      std::nth_element(buf.begin(), buf.begin() + half, buf.end());
      y[r * L + i] = buf[half].first;
      (*source)[r * L + i] = r * L + buf[half].second;
      h = h * 31 + static_cast<std::uint64_t>(buf[half].second);
    }
  }
  if (g.track_kinks()) g.mix_kink(h);
  return g.record(std::move(y), {x}, [=](Graph<S>& gr, const Tensor<S>& gy) {
    auto& gx = gr.grad_buffer(x);
    for (Index i = 0; i < gy.size(); ++i) gx[(*source)[i]] += gy[i];
  });
}

template <typename S>
Var weighted_sum(Graph<S>& g, std::span<const Var> terms, std::span<const S> w) {
  require(terms.size() == w.size() && !terms.empty(), "weighted_sum: size mismatch");
  S acc = S(0);
  for (std::size_t i = 0; i < terms.size(); ++i) acc += w[i] * g.value(terms[i]).item();
  std::vector<Var> ts(terms.begin(), terms.end());
  std::vector<S> ws(w.begin(), w.end());
  return g.record(Tensor<S>::scalar(acc), ts, [ts, ws](Graph<S>& gr, const Tensor<S>& gy) {
    for (std::size_t i = 0; i < ts.size(); ++i)
      if (gr.requires_grad(ts[i])) gr.grad_buffer(ts[i])[0] += gy[0] * ws[i];
  });
}

template <typename S>
Var detach(Graph<S>& g, Var x) {
  return g.constant(g.value(x));
}

}  // namespace ops

#define CPR_INSTANTIATE_OPS(S)                                                                 \
  template class Graph<S>;                                                                     \
  template Var ops::conv1d(Graph<S>&, Var, Var, const ConvGeometry&);                          \
  template Var ops::conv_transpose1d(Graph<S>&, Var, Var, const ConvGeometry&);                \
  template Var ops::add_channel_bias(Graph<S>&, Var, Var);                                     \
  template Var ops::batch_norm(Graph<S>&, Var, Var, Var, const Tensor<S>&, const Tensor<S>&,   \
                               bool, BatchStats*, S);                                          \
  template Var ops::relu(Graph<S>&, Var);                                                      \
  template Var ops::add(Graph<S>&, Var, Var);                                                  \
  template Var ops::sub(Graph<S>&, Var, Var);                                                  \
  template Var ops::scale(Graph<S>&, Var, S);                                                  \
  template Var ops::mul_const(Graph<S>&, Var, const Tensor<S>&);                               \
  template Var ops::sum_squares(Graph<S>&, Var);                                               \
  template Var ops::global_avg_pool(Graph<S>&, Var);                                           \
  template Var ops::normalize_rows(Graph<S>&, Var);                                            \
  template Var ops::linear(Graph<S>&, Var, Var, Var);                                          \
  template Var ops::concat_features(Graph<S>&, Var, Var);                                      \
  template Var ops::reshape(Graph<S>&, Var, Shape);                                            \
  template Var ops::matmul_tn(Graph<S>&, Var, Var);                                            \
  template Var ops::bce_with_logits(Graph<S>&, Var, const Tensor<S>&);                         \
  template Var ops::bce_with_logits_sum(Graph<S>&, Var, const Tensor<S>&);                     \
  template Var ops::gather_rows(Graph<S>&, Var, std::span<const Index>);                       \
  template Var ops::median_filter(Graph<S>&, Var, Index);                                      \
  template Var ops::weighted_sum(Graph<S>&, std::span<const Var>, std::span<const S>);         \
  template Var ops::detach(Graph<S>&, Var);

CPR_INSTANTIATE_OPS(float)
CPR_INSTANTIATE_OPS(double)

}  // namespace cpr

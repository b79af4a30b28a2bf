#include "cpr/netcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

namespace cpr {

using nlohmann::json;

std::string to_string(Variant v) { return v == Variant::tiny ? "tiny" : "resnet18_1d"; }
std::string to_string(ModelKind k) { return k == ModelKind::dual ? "dual" : "baseline"; }
std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::content: return "content";
    case ParamGroup::style: return "style";
    case ParamGroup::decoder: return "decoder";
    case ParamGroup::classifier: return "classifier";
  }
  return "?";
}

ArchitectureSpec ArchitectureSpec::tiny(int in_leads, int n_samples, int n_classes) {
  ArchitectureSpec a;
  a.in_leads = in_leads;
  a.n_samples = n_samples;
  a.n_classes = n_classes;
  return a;
}

ArchitectureSpec ArchitectureSpec::resnet18_1d(int in_leads, int n_samples, int n_classes) {
  ArchitectureSpec a;
  a.variant = Variant::resnet18_1d;
  a.in_leads = in_leads;
  a.n_samples = n_samples;
  a.n_classes = n_classes;
  a.widths = {64, 128, 256, 512};
  a.n_blocks = {2, 2, 2, 2};
  a.kernel_size = 3;
  a.d_content = 64;
  a.d_style = 32;
  return a;
}

json ArchitectureSpec::to_json() const {
  return json{{"variant", to_string(variant)}, {"in_leads", in_leads},   {"n_samples", n_samples},
              {"d_content", d_content},         {"d_style", d_style},     {"n_classes", n_classes},
              {"widths", widths},               {"kernel_size", kernel_size}, {"n_blocks", n_blocks}};
}

ArchitectureSpec ArchitectureSpec::from_json(const json& j) {
  ArchitectureSpec a;
  const std::string v = j.at("variant").get<std::string>();
  if (v == "tiny") a.variant = Variant::tiny;
  else if (v == "resnet18_1d") a.variant = Variant::resnet18_1d;
  else throw Error("E_CONFIG", "unknown architecture variant '" + v + "'");
  a.in_leads = j.at("in_leads");
  a.n_samples = j.at("n_samples");
  a.d_content = j.at("d_content");
  a.d_style = j.at("d_style");
  a.n_classes = j.at("n_classes");
  a.widths = j.at("widths").get<std::vector<int>>();
  a.kernel_size = j.at("kernel_size");
  a.n_blocks = j.at("n_blocks").get<std::vector<int>>();
  validate(a);
  return a;
}

std::string ArchitectureSpec::hash() const { return sha256_hex(to_json().dump()); }

void validate(const ArchitectureSpec& a) {
  auto fail = [](const std::string& m) { throw Error("E_CONFIG", "architecture: " + m); };
  if (a.d_content < 2 || a.d_style < 2) fail("d_content and d_style must be at least 2");
  if (a.in_leads < 1 || a.n_classes < 1) fail("in_leads and n_classes must be positive");
  if (a.widths.empty() || a.widths.size() != a.n_blocks.size())
    fail("widths and n_blocks must be non-empty and of equal length");
  if (a.kernel_size < 1 || a.kernel_size % 2 == 0) fail("kernel_size must be odd");
  for (int w : a.widths)
    if (w < 1) fail("widths must be positive");
  for (int b : a.n_blocks)
    if (b < 1) fail("n_blocks must be positive");
  if (a.n_samples < a.downsample() || a.n_samples % a.downsample() != 0)
    fail("n_samples (" + std::to_string(a.n_samples) + ") must be a multiple of " +
         std::to_string(a.downsample()));
}

// ---------------------------------------------------------------------------------------------
// Construction

template <typename S>
ModelBundle<S>::ModelBundle(ArchitectureSpec arch, ModelKind kind, std::uint64_t seed)
    : arch_(std::move(arch)), kind_(kind) {
  validate(arch_);
  build(seed);
}

template <typename S>
void ModelBundle<S>::add(const std::string& name, ParamGroup group, Shape shape, S bound,
                         bool trainable, S fill) {
  Tensor<S> t = Tensor<S>::filled(std::move(shape), fill);
  // bound > 0 marks weights to be drawn later
  params_.push_back({name, group, std::move(t), trainable});
  if (bound > 0) params_.back().value.array().setConstant(std::numeric_limits<S>::quiet_NaN());
  index_[name] = static_cast<int>(params_.size() - 1);
}

template <typename S>
void ModelBundle<S>::build(std::uint64_t seed) {
  const auto& a = arch_;
  const Index K = a.kernel_size;
  // Kaiming-uniform (fan-in) weights, zero biases, unit batch-norm scale.
  std::vector<std::pair<int, Index>> fan_in;  // parameter index, fan in
  auto weight = [&](const std::string& n, ParamGroup g, Shape s, Index fin) {
    add(n, g, std::move(s), S(1));
    fan_in.emplace_back(static_cast<int>(params_.size() - 1), fin);
  };
  auto bias = [&](const std::string& n, ParamGroup g, Index c) { add(n, g, {c}, S(0)); };
  auto bn = [&](const std::string& p, ParamGroup g, Index c) {
    add(p + ".gamma", g, {c}, S(0), true, S(1));
    add(p + ".beta", g, {c}, S(0), true, S(0));
    add(p + ".mean", g, {c}, S(0), false, S(0));
    add(p + ".var", g, {c}, S(0), false, S(1));
  };
  auto conv = [&](const std::string& p, ParamGroup g, Index ci, Index co, Index k) {
    weight(p + ".w", g, {co, ci, k}, ci * k);
  };

  auto encoder = [&](const std::string& p, ParamGroup g, int d_out) {
    Index in = a.in_leads;
    if (a.variant == Variant::tiny) {
      for (int s = 0; s < a.n_stages(); ++s)
        for (int b = 0; b < a.n_blocks[s]; ++b) {
          const std::string q = p + ".s" + std::to_string(s) + ".b" + std::to_string(b);
          conv(q + ".conv", g, in, a.widths[s], K);
          bn(q + ".bn", g, a.widths[s]);
          in = a.widths[s];
        }
    } else {
      conv(p + ".stem.conv", g, in, a.widths[0], K);
      bn(p + ".stem.bn", g, a.widths[0]);
      in = a.widths[0];
      for (int s = 0; s < a.n_stages(); ++s)
        for (int b = 0; b < a.n_blocks[s]; ++b) {
          const std::string q = p + ".s" + std::to_string(s) + ".b" + std::to_string(b);
          const int stride = (s > 0 && b == 0) ? 2 : 1;
          conv(q + ".conv1", g, in, a.widths[s], K);
          bn(q + ".bn1", g, a.widths[s]);
          conv(q + ".conv2", g, a.widths[s], a.widths[s], K);
          bn(q + ".bn2", g, a.widths[s]);
          if (stride != 1 || in != a.widths[s]) {
            conv(q + ".down", g, in, a.widths[s], 1);
            bn(q + ".down_bn", g, a.widths[s]);
          }
          in = a.widths[s];
        }
    }
    weight(p + ".head.w", g, {d_out, in}, in);
    bias(p + ".head.b", g, d_out);
  };

  encoder("content", ParamGroup::content, a.d_content);
  if (is_dual()) {
    encoder("style", ParamGroup::style, a.d_style);
    const Index c_last = a.widths.back();
    const Index l_last = a.latent_length();
    const Index d_in = a.d_content + a.d_style;
    weight("decoder.proj.w", ParamGroup::decoder, {c_last * l_last, d_in}, d_in);
    bias("decoder.proj.b", ParamGroup::decoder, c_last * l_last);
    bn("decoder.proj_bn", ParamGroup::decoder, c_last);
    for (int s = a.n_stages() - 1; s >= 1; --s) {
      const std::string q = "decoder.up" + std::to_string(s);
      weight(q + ".w", ParamGroup::decoder, {a.widths[s], a.widths[s - 1], K}, a.widths[s] * K);
      bn(q + ".bn", ParamGroup::decoder, a.widths[s - 1]);
    }
    weight("decoder.out.w", ParamGroup::decoder, {a.widths[0], a.in_leads, K}, a.widths[0] * K);
    bias("decoder.out.b", ParamGroup::decoder, a.in_leads);
  }
  weight("classifier.w", ParamGroup::classifier, {a.n_classes, a.d_content}, a.d_content);
  bias("classifier.b", ParamGroup::classifier, a.n_classes);

  std::mt19937_64 rng(seed);
  for (auto [idx, fin] : fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fin));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index i = 0; i < params_[idx].value.size(); ++i) params_[idx].value[i] = static_cast<S>(u(rng));
  }
}

template <typename S>
void ModelBundle<S>::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = static_cast<int>(i);
}

template <typename S>
ModelBundle<S> ModelBundle<S>::from_parts(ArchitectureSpec arch, ModelKind kind,
                                          std::vector<Parameter<S>> params) {
  ModelBundle<S> reference(arch, kind, 0);
  if (reference.params_.size() != params.size())
    throw Error("E_CHECKPOINT", "parameter count does not match architecture");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (reference.params_[i].name != params[i].name ||
        reference.params_[i].value.shape() != params[i].value.shape())
      throw Error("E_CHECKPOINT", "parameter '" + params[i].name + "' does not match architecture");
  ModelBundle<S> m;
  m.arch_ = std::move(arch);
  m.kind_ = kind;
  m.params_ = std::move(params);
  m.reindex();
  return m;
}

template <typename S>
int ModelBundle<S>::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("E_PARAM", "no parameter named '" + name + "'");
  return it->second;
}

template <typename S>
bool ModelBundle<S>::contains(const std::string& name) const {
  return index_.count(name) > 0;
}

template <typename S>
Index ModelBundle<S>::parameter_count(std::optional<ParamGroup> group) const {
  Index n = 0;
  for (const auto& p : params_)
    if (p.trainable && (!group || p.group == *group)) n += p.value.size();
  return n;
}

template <typename S>
bool ModelBundle<S>::all_finite() const {
  for (const auto& p : params_)
    if (!p.value.array().allFinite()) return false;
  return true;
}

template <typename S>
void ModelBundle<S>::apply_batch_stats(const std::vector<std::pair<int, BatchStats>>& stats,
                                       double momentum) {
  for (const auto& [mi, st] : stats) {
    auto& mean = params_[mi].value;
    auto& var = params_[mi + 1].value;
    for (Index c = 0; c < mean.size(); ++c) {
      mean[c] = static_cast<S>((1.0 - momentum) * double(mean[c]) + momentum * st.mean[c]);
      var[c] = static_cast<S>((1.0 - momentum) * double(var[c]) + momentum * st.var[c]);
    }
  }
}

template <typename S>
template <typename O>
ModelBundle<O> ModelBundle<S>::cast() const {
  std::vector<Parameter<O>> ps;
  ps.reserve(params_.size());
  for (const auto& p : params_) ps.push_back({p.name, p.group, p.value.template cast<O>(), p.trainable});
  return ModelBundle<O>::from_parts(arch_, kind_, std::move(ps));
}

// ---------------------------------------------------------------------------------------------
// Session

template <typename S>
Session<S>::Session(Graph<S>& g, const ModelBundle<S>& m, Mode mode, bool params_require_grad)
    : graph_(&g), model_(&m), mode_(mode), requires_grad_(params_require_grad),
      vars_(m.parameters().size()) {}

template <typename S>
Var Session<S>::param(int index) {
  Var& v = vars_.at(index);
  if (!v.valid()) {
    const auto& p = model_->parameters()[index];
    v = (requires_grad_ && p.trainable) ? graph_->variable(p.value) : graph_->constant(p.value);
  }
  return v;
}

template <typename S>
void Session<S>::record_stats(int running_mean_index, BatchStats stats) {
  stats_.emplace_back(running_mean_index, std::move(stats));
}

template <typename S>
std::vector<Tensor<S>> Session<S>::gradients() const {
  std::vector<Tensor<S>> out;
  out.reserve(vars_.size());
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    if (vars_[i].valid() && graph_->requires_grad(vars_[i])) out.push_back(graph_->grad(vars_[i]));
    else out.push_back(Tensor<S>::zeros(model_->parameters()[i].value.shape()));
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Forward

namespace {

template <typename S>
Var batch_norm_layer(Session<S>& s, Var x, const std::string& p) {
  const auto& m = s.model();
  const int gi = m.index_of(p + ".gamma");
  const int mi = gi + 2;
  const bool train = s.mode() == Mode::train;
  BatchStats st;
  Var y = ops::batch_norm(s.graph(), x, s.param(gi), s.param(gi + 1), m.value(mi), m.value(mi + 1),
                          train, train && s.collect_stats ? &st : nullptr);
  if (train && s.collect_stats) s.record_stats(mi, std::move(st));
  return y;
}

template <typename S>
Var conv_layer(Session<S>& s, Var x, const std::string& p, Index stride) {
  const Index K = s.model().value(s.model().index_of(p + ".w")).dim(2);
  return ops::conv1d(s.graph(), x, s.param(p + ".w"), ConvGeometry{stride, K / 2, 0});
}

template <typename S>
Var encoder_features(Session<S>& s, Var x, const std::string& p) {
  const auto& a = s.model().arch();
  auto& g = s.graph();
  if (a.variant == Variant::tiny) {
    for (int st = 0; st < a.n_stages(); ++st)
      for (int b = 0; b < a.n_blocks[st]; ++b) {
        const std::string q = p + ".s" + std::to_string(st) + ".b" + std::to_string(b);
        x = conv_layer(s, x, q + ".conv", b == 0 ? 2 : 1);
        x = ops::relu(g, batch_norm_layer(s, x, q + ".bn"));
      }
    return x;
  }
  x = conv_layer(s, x, p + ".stem.conv", 2);
  x = ops::relu(g, batch_norm_layer(s, x, p + ".stem.bn"));
  for (int st = 0; st < a.n_stages(); ++st)
    for (int b = 0; b < a.n_blocks[st]; ++b) {
      const std::string q = p + ".s" + std::to_string(st) + ".b" + std::to_string(b);
      const Index stride = (st > 0 && b == 0) ? 2 : 1;
      Var y = conv_layer(s, x, q + ".conv1", stride);
      y = ops::relu(g, batch_norm_layer(s, y, q + ".bn1"));
      y = conv_layer(s, y, q + ".conv2", 1);
      y = batch_norm_layer(s, y, q + ".bn2");
      Var shortcut = x;
      if (s.model().contains(q + ".down.w")) {
        shortcut = ops::conv1d(g, x, s.param(q + ".down.w"), ConvGeometry{stride, 0, 0});
        shortcut = batch_norm_layer(s, shortcut, q + ".down_bn");
      }
      x = ops::relu(g, ops::add(g, y, shortcut));
    }
  return x;
}

template <typename S>
Var encoder_head(Session<S>& s, Var features, const std::string& p) {
  auto& g = s.graph();
  Var z = ops::linear(g, ops::global_avg_pool(g, features), s.param(p + ".head.w"), s.param(p + ".head.b"));
  // Dual models put both latents on the unit sphere so that neither can shrink or grow to
  // cheat the scale-sensitive orthogonality, swap and invariance terms.
  return s.model().is_dual() ? ops::normalize_rows(g, z) : z;
}

template <typename S>
void check_x(Session<S>& s, Var x) {
  const auto& a = s.model().arch();
  const auto& shape = s.graph().value(x).shape();
  if (shape.size() != 3 || shape[1] != a.in_leads || shape[2] != a.n_samples)
    throw Error("E_SHAPE", "input shape " + shape_string(shape) + " does not match expected [B, " +
                               std::to_string(a.in_leads) + ", " + std::to_string(a.n_samples) + "]");
}

template <typename S>
void require_dual(const ModelBundle<S>& m, const char* what) {
  if (!m.is_dual())
    throw Error("E_MODEL", std::string(what) + " needs a dual-pathway model; this is an ERM baseline");
}

}  // namespace

template <typename S>
void check_input_shape(const ModelBundle<S>& m, const Tensor<S>& x) {
  const auto& a = m.arch();
  if (x.rank() != 3 || x.dim(1) != a.in_leads || x.dim(2) != a.n_samples)
    throw Error("E_SHAPE", "input shape " + shape_string(x.shape()) + " does not match expected [B, " +
                               std::to_string(a.in_leads) + ", " + std::to_string(a.n_samples) + "]");
}

template <typename S>
Var content_features(Session<S>& s, Var x) {
  check_x(s, x);
  s.model().count_forward(s.graph().value(x).dim(0));
  return encoder_features(s, x, "content");
}

template <typename S>
Var content_head(Session<S>& s, Var features) {
  return encoder_head(s, features, "content");
}

template <typename S>
Var encode_content(Session<S>& s, Var x) {
  return content_head(s, content_features(s, x));
}

template <typename S>
Var encode_style(Session<S>& s, Var x) {
  require_dual(s.model(), "encode_style");
  check_x(s, x);
  return encoder_head(s, encoder_features(s, x, "style"), "style");
}

template <typename S>
Var decode(Session<S>& s, Var z_c, Var z_s) {
  const auto& m = s.model();
  require_dual(m, "decode");
  const auto& a = m.arch();
  auto& g = s.graph();
  const auto& zc = g.value(z_c);
  const auto& zs = g.value(z_s);
  if (zc.rank() != 2 || zs.rank() != 2 || zc.dim(1) != a.d_content || zs.dim(1) != a.d_style ||
      zc.dim(0) != zs.dim(0))
    throw Error("E_SHAPE", "decode: latent shapes " + shape_string(zc.shape()) + ", " +
                               shape_string(zs.shape()) + " do not match [B, " +
                               std::to_string(a.d_content) + "], [B, " + std::to_string(a.d_style) + "]");
  const Index B = zc.dim(0);
  const Index K = a.kernel_size;
  Var h = ops::linear(g, ops::concat_features(g, z_c, z_s), s.param("decoder.proj.w"),
                      s.param("decoder.proj.b"));
  h = ops::reshape(g, h, {B, a.widths.back(), a.latent_length()});
  h = ops::relu(g, batch_norm_layer(s, h, "decoder.proj_bn"));
  const ConvGeometry up{2, K / 2, 1};
  for (int st = a.n_stages() - 1; st >= 1; --st) {
    const std::string q = "decoder.up" + std::to_string(st);
    h = ops::conv_transpose1d(g, h, s.param(q + ".w"), up);
    h = ops::relu(g, batch_norm_layer(s, h, q + ".bn"));
  }
  h = ops::conv_transpose1d(g, h, s.param("decoder.out.w"), up);
  return ops::add_channel_bias(g, h, s.param("decoder.out.b"));
}

template <typename S>
Var classify(Session<S>& s, Var z_c) {
  return ops::linear(s.graph(), z_c, s.param("classifier.w"), s.param("classifier.b"));
}

template <typename S>
Var forward_baseline(Session<S>& s, Var x) {
  return classify(s, encode_content(s, x));
}

template <typename S>
Tensor<S> predict_logits(const ModelBundle<S>& m, const Tensor<S>& x) {
  check_input_shape(m, x);
  Graph<S> g;
  Session<S> s(g, m, Mode::eval, false);
  return g.value(forward_baseline(s, g.constant(x)));
}

template <typename S>
std::vector<LatentPair<S>> encode(const ModelBundle<S>& m, const Tensor<S>& x) {
  check_input_shape(m, x);
  Graph<S> g;
  Session<S> s(g, m, Mode::eval, false);
  Var xv = g.constant(x);
  const Tensor<S> zc = g.value(encode_content(s, xv));
  Tensor<S> zs;
  if (m.is_dual()) zs = g.value(encode_style(s, xv));
  const Index B = x.dim(0);
  std::vector<LatentPair<S>> out(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) {
    out[b].z_c = zc.matrix(B, zc.dim(1)).row(b).transpose();
    if (m.is_dual()) out[b].z_s = zs.matrix(B, zs.dim(1)).row(b).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Gradients

template <typename S>
GradientResult<S> gradient(const ModelBundle<S>& m, const LossFn<S>& loss_fn, const Tensor<S>& x,
                           Mode mode) {
  Graph<S> g;
  Session<S> s(g, m, mode, true);
  s.collect_stats = false;
  Var xv = g.variable(x);
  Var loss = loss_fn(s, xv);
  GradientResult<S> r;
  r.loss = g.value(loss).item();
  if (!std::isfinite(static_cast<double>(r.loss)))
    throw Error("E_NONFINITE", "loss is not finite (" + std::to_string(double(r.loss)) + ")");
  g.backward(loss);
  r.params = s.gradients();
  r.input = g.grad(xv);
  return r;
}

template <typename S>
Tensor<S> input_gradient(const ModelBundle<S>& m, const LossFn<S>& loss_fn, const Tensor<S>& x,
                         Mode mode) {
  Graph<S> g;
  Session<S> s(g, m, mode, false);
  s.collect_stats = false;
  Var xv = g.variable(x);
  Var loss = loss_fn(s, xv);
  if (!std::isfinite(static_cast<double>(g.value(loss).item())))
    throw Error("E_NONFINITE", "loss is not finite");
  g.backward(loss);
  return g.grad(xv);
}

namespace {

template <typename S>
std::pair<double, std::uint64_t> probe(const ModelBundle<S>& m, const LossFn<S>& loss_fn,
                                       const Tensor<S>& x, Mode mode) {
  Graph<S> g;
  g.set_track_kinks(true);
  Session<S> s(g, m, mode, false);
  s.collect_stats = false;
  Var loss = loss_fn(s, g.constant(x));
  return {static_cast<double>(g.value(loss).item()), g.kink_signature()};
}

}  // namespace

template <typename S>
GradCheckReport compare_gradients(const ModelBundle<S>& m, const LossFn<S>& loss_fn,
                                  const Tensor<S>& x, const GradientResult<S>& analytic,
                                  const GradCheckOptions& opts) {
  GradCheckReport rep;
  ModelBundle<S> work = m;
  Tensor<S> xw = x;
  // Candidate pool: every trainable scalar (and input entries on request).
  std::vector<std::pair<int, Index>> pool;  // param index (-1 = input), coordinate
  const auto& ps = m.parameters();
  Index total = 0;
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps[i].trainable) total += ps[i].value.size();
  if (opts.include_input) total += x.size();
  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<Index> pick(0, std::max<Index>(0, total - 1));
  const auto base_kinks = probe(work, loss_fn, xw, opts.mode).second;

  auto locate = [&](Index flat) -> std::pair<int, Index> {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!ps[i].trainable) continue;
      if (flat < ps[i].value.size()) return {static_cast<int>(i), flat};
      flat -= ps[i].value.size();
    }
    return {-1, flat};
  };

  const int max_attempts = opts.n_coordinates * 20;
  for (int attempt = 0; attempt < max_attempts && rep.n_checked < opts.n_coordinates; ++attempt) {
    auto [pi, c] = locate(pick(rng));
    S& slot = pi >= 0 ? work.parameters()[pi].value[c] : xw[c];
    const S orig = slot;
    slot = orig + S(opts.h);
    auto [fp, kp] = probe(work, loss_fn, xw, opts.mode);
    slot = orig - S(opts.h);
    auto [fm, km] = probe(work, loss_fn, xw, opts.mode);
    slot = orig;
    if (kp != base_kinks || km != base_kinks) {
      ++rep.n_skipped_kinks;
      continue;
    }
    GradCheckEntry e;
    e.name = pi >= 0 ? ps[pi].name : "input";
    e.coordinate = c;
    e.numeric = (fp - fm) / (2.0 * opts.h);
    e.analytic = pi >= 0 ? double(analytic.params[pi][c]) : double(analytic.input[c]);
    e.rel_error = std::abs(e.analytic - e.numeric) /
                  std::max({std::abs(e.analytic), std::abs(e.numeric), opts.abs_floor});
    rep.max_rel_error = std::max(rep.max_rel_error, e.rel_error);
    rep.entries.push_back(e);
    ++rep.n_checked;
  }
  rep.passed = rep.n_checked == opts.n_coordinates && rep.max_rel_error < opts.tolerance;
  return rep;
}

template <typename S>
GradCheckReport check_gradients(const ModelBundle<S>& m, const LossFn<S>& loss_fn,
                                const Tensor<S>& x, const GradCheckOptions& opts) {
  return compare_gradients(m, loss_fn, x, gradient(m, loss_fn, x, opts.mode), opts);
}

// ---------------------------------------------------------------------------------------------
// Checkpoint container

namespace {
constexpr char kCheckpointMagic[] = "CPRCKP01";
}

std::vector<std::uint8_t> encode_checkpoint(CheckpointData data) {
  ByteWriter payload;
  json tensors = json::array();
  for (const auto& [name, t] : data.arrays) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}});
    for (Index i = 0; i < t.size(); ++i) payload.f32(t[i]);
  }
  data.header["tensors"] = tensors;
  data.header["payload_sha256"] = sha256_hex(payload.buffer());
  const std::string header = data.header.dump();
  ByteWriter w;
  w.str(std::string_view(kCheckpointMagic, 8));
  w.u64(header.size());
  w.str(header);
  w.bytes(payload.buffer());
  return std::move(w.buffer());
}

CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader rd(bytes);
  if (bytes.size() < 8 || rd.str(8) != std::string_view(kCheckpointMagic, 8))
    throw Error("E_FORMAT", "not a CPRCKP01 checkpoint (unknown magic or version)");
  const std::uint64_t hlen = rd.u64();
  if (hlen > rd.remaining()) throw Error("E_TRUNCATED", "checkpoint header exceeds file size");
  CheckpointData out;
  try {
    out.header = json::parse(rd.str(hlen));
  } catch (const json::exception& e) {
    throw Error("E_FORMAT", std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const auto payload = bytes.subspan(rd.pos());
  if (sha256_hex(payload) != out.header.value("payload_sha256", ""))
    throw Error("E_CHECKSUM", "checkpoint payload SHA-256 mismatch");
  ByteReader pr(payload);
  for (const auto& t : out.header.at("tensors")) {
    Shape shape = t.at("shape").get<Shape>();
    Tensor<float> v(shape);
    for (Index i = 0; i < v.size(); ++i) v[i] = pr.f32();
    out.arrays.emplace_back(t.at("name").get<std::string>(), std::move(v));
  }
  if (pr.remaining() != 0) throw Error("E_FORMAT", "checkpoint payload has trailing bytes");
  return out;
}

CheckpointData model_checkpoint(const ModelBundle<float>& m) {
  CheckpointData d;
  d.header["arch"] = m.arch().to_json();
  d.header["arch_hash"] = m.arch().hash();
  d.header["model_kind"] = to_string(m.kind());
  for (const auto& p : m.parameters()) d.arrays.emplace_back("model/" + p.name, p.value);
  return d;
}

ModelBundle<float> model_from_checkpoint(const CheckpointData& data, const ArchitectureSpec* expected) {
  const auto arch = ArchitectureSpec::from_json(data.header.at("arch"));
  if (data.header.value("arch_hash", "") != arch.hash())
    throw Error("E_CHECKPOINT", "architecture hash does not match the stored architecture");
  if (expected && expected->hash() != arch.hash())
    throw Error("E_ARCH_MISMATCH", "checkpoint architecture " + arch.hash().substr(0, 12) +
                                       " differs from expected " + expected->hash().substr(0, 12));
  const std::string kind = data.header.at("model_kind");
  const ModelKind mk = kind == "dual" ? ModelKind::dual : ModelKind::baseline;
  ModelBundle<float> ref(arch, mk, 0);
  std::vector<Parameter<float>> ps;
  for (const auto& p : ref.parameters()) {
    auto it = std::find_if(data.arrays.begin(), data.arrays.end(),
                           [&](const auto& a) { return a.first == "model/" + p.name; });
    if (it == data.arrays.end()) throw Error("E_CHECKPOINT", "missing array model/" + p.name);
    ps.push_back({p.name, p.group, it->second, p.trainable});
  }
  return ModelBundle<float>::from_parts(arch, mk, std::move(ps));
}

// ---------------------------------------------------------------------------------------------

#define CPR_INSTANTIATE_NET(S)                                                                  \
  template class ModelBundle<S>;                                                                \
  template class Session<S>;                                                                    \
  template Var content_features(Session<S>&, Var);                                              \
  template Var content_head(Session<S>&, Var);                                                  \
  template Var encode_content(Session<S>&, Var);                                                \
  template Var encode_style(Session<S>&, Var);                                                  \
  template Var decode(Session<S>&, Var, Var);                                                   \
  template Var classify(Session<S>&, Var);                                                      \
  template Var forward_baseline(Session<S>&, Var);                                              \
  template Tensor<S> predict_logits(const ModelBundle<S>&, const Tensor<S>&);                   \
  template std::vector<LatentPair<S>> encode(const ModelBundle<S>&, const Tensor<S>&);          \
  template void check_input_shape(const ModelBundle<S>&, const Tensor<S>&);                     \
  template GradientResult<S> gradient(const ModelBundle<S>&, const LossFn<S>&, const Tensor<S>&, \
                                      Mode);                                                    \
  template Tensor<S> input_gradient(const ModelBundle<S>&, const LossFn<S>&, const Tensor<S>&,  \
                                    Mode);                                                      \
  template GradCheckReport compare_gradients(const ModelBundle<S>&, const LossFn<S>&,           \
                                             const Tensor<S>&, const GradientResult<S>&,        \
                                             const GradCheckOptions&);                          \
  template GradCheckReport check_gradients(const ModelBundle<S>&, const LossFn<S>&,             \
                                           const Tensor<S>&, const GradCheckOptions&);

CPR_INSTANTIATE_NET(float)
CPR_INSTANTIATE_NET(double)
template ModelBundle<double> ModelBundle<float>::cast<double>() const;
template ModelBundle<float> ModelBundle<double>::cast<float>() const;
template ModelBundle<float> ModelBundle<float>::cast<float>() const;
template ModelBundle<double> ModelBundle<double>::cast<double>() const;

}  // namespace cpr

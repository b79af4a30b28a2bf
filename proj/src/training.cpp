#include "cpr/training.hpp"

#include "cpr/defenses.hpp"
#include "cpr/evaluation.hpp"
#include "cpr/signals.hpp"
#include "cpr/util.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace cpr {

using nlohmann::json;

namespace {
constexpr const char* kPresetNames[] = {"erm", "resnet_mask", "naive_disent", "cpr_no_const", "cpr_full", "sap_at"};
}

std::string to_string(Preset p) { return kPresetNames[static_cast<int>(p)]; }

Preset preset_from_string(const std::string& s) {
  for (int i = 0; i < 6; ++i)
    if (s == kPresetNames[i]) return static_cast<Preset>(i);
  throw Error("E_CONFIG", "unknown preset '" + s + "'");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd_momentum"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  throw Error("E_CONFIG", "unknown optimizer '" + s + "'");
}

LossWeights preset_weights(Preset p) {
  LossWeights w;
  switch (p) {
    case Preset::erm:
    case Preset::resnet_mask:
    case Preset::sap_at:
      return LossWeights{0, 0, 0, 0, 0, 1, 0};
    case Preset::naive_disent:
      w.w_cons = 0;
      w.w_adv = 0;
      return w;
    case Preset::cpr_no_const:
      w.w_cons = 0;
      return w;
    case Preset::cpr_full:
      return w;
  }
  return w;
}

ModelKind preset_model_kind(Preset p) {
  return (p == Preset::erm || p == Preset::resnet_mask || p == Preset::sap_at) ? ModelKind::baseline
                                                                              : ModelKind::dual;
}

bool preset_uses_mask_guidance(Preset p) { return p == Preset::cpr_no_const || p == Preset::cpr_full; }
bool preset_masks_input(Preset p) { return p == Preset::resnet_mask; }
bool preset_needs_masks(Preset p) { return preset_uses_mask_guidance(p) || preset_masks_input(p); }

json TrainConfig::to_json() const {
  json j = {{"preset", to_string(preset)},
            {"variant", to_string(variant)},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"optimizer", to_string(optimizer)},
            {"momentum", momentum},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"loss_weights", weights().to_json()},
            {"attack", attack.to_json()},
            {"early_stop_patience", early_stop_patience},
            {"seed", seed}};
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (j.contains("preset")) c.preset = preset_from_string(j.at("preset"));
  if (j.contains("variant")) {
    const std::string v = j.at("variant");
    if (v == "tiny")
      c.variant = Variant::tiny;
    else if (v == "resnet18_1d")
      c.variant = Variant::resnet18_1d;
    else
      throw Error("E_CONFIG", "unknown variant '" + v + "'");
  }
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer"));
  c.momentum = j.value("momentum", c.momentum);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  if (j.contains("loss_weights")) {
    // Partial overrides start from the preset's pattern.
    json merged = preset_weights(c.preset).to_json();
    merged.update(j.at("loss_weights"));
    c.loss_weights = LossWeights::from_json(merged);
  }
  if (j.contains("attack")) c.attack = AttackConfig::from_json(j.at("attack"));
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::string TrainConfig::hash() const { return sha256_hex(to_json().dump()); }

void validate(const TrainConfig& c) {
  const LossWeights w = c.weights();
  validate(w);
  if (c.epochs < 0) throw Error("E_CONFIG", "epochs must be >= 0");
  if (c.batch_size < 1) throw Error("E_CONFIG", "batch_size must be >= 1");
  if (w.w_cons > 0 && preset_model_kind(c.preset) == ModelKind::dual && c.batch_size < 2)
    throw Error("E_CONFIG", "the latent swap needs batch_size >= 2");
  if (!(c.learning_rate > 0)) throw Error("E_CONFIG", "learning_rate must be > 0");
  if (c.early_stop_patience < 1) throw Error("E_CONFIG", "early_stop_patience must be >= 1");
  if (!(c.attack.epsilon >= 0)) throw Error("E_CONFIG", "attack epsilon must be >= 0");
}

namespace {

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

std::mt19937_64 rng_from_string(const std::string& s) {
  std::mt19937_64 rng;
  std::istringstream is(s);
  is >> rng;
  if (is.fail()) throw Error("E_CHECKPOINT", "corrupt random-generator state");
  return rng;
}

Predictor<float> make_predictor(const TrainConfig& cfg, const ModelBundle<float>& m, Mode mode) {
  Predictor<float> p;
  p.model = &m;
  p.mask_input = preset_masks_input(cfg.preset);
  p.mode = mode;
  return p;
}

void check_masks(const TrainConfig& cfg, const LabeledBatch<float>& data) {
  if (!preset_needs_masks(cfg.preset)) return;
  if (data.mask.empty())
    throw Error("E_MASK", "preset " + to_string(cfg.preset) + " needs physio-masks for the training data");
  const Index N = data.size();
  const Index row = data.mask.size() / N;
  for (Index i = 0; i < N; ++i) {
    const float cover = data.mask.array().segment(i * row, row).sum() / float(row);
    if (cover <= 0.0f || cover >= 1.0f)
      throw Error("E_MASK", "data-quality error: mask of record " + data.ids[i] + " has coverage " +
                                std::to_string(cover) + " (needs 0 < coverage < 1)");
  }
}

}  // namespace

TrainState init_state(const TrainConfig& cfg, const LabeledBatch<float>& data) {
  validate(cfg);
  const int leads = static_cast<int>(data.x.dim(1));
  const int samples = static_cast<int>(data.x.dim(2));
  const int classes = static_cast<int>(data.labels.dim(1));
  const ArchitectureSpec arch = cfg.variant == Variant::tiny
                                    ? ArchitectureSpec::tiny(leads, samples, classes)
                                    : ArchitectureSpec::resnet18_1d(leads, samples, classes);
  validate(arch);
  TrainState s;
  s.model = ModelBundle<float>(arch, preset_model_kind(cfg.preset), splitmix64(cfg.seed));
  s.best_model = s.model;
  for (const auto& p : s.model.parameters()) {
    s.moment1.emplace_back(p.value.shape());
    s.moment2.emplace_back(p.value.shape());
  }
  s.rng_state = rng_to_string(std::mt19937_64(splitmix64(cfg.seed + 1)));
  s.config = cfg.to_json();
  return s;
}

double validation_f1(const TrainConfig& cfg, const ModelBundle<float>& m, const LabeledBatch<float>& data) {
  const Predictor<float> p = make_predictor(cfg, m, Mode::eval);
  const Tensor<float>* mask = p.mask_input ? &data.mask : nullptr;
  return macro_f1(to_matrix(predict_scores(p, data.x, mask)), to_matrix(data.labels));
}

LossReport train_step(const TrainConfig& cfg, TrainState& state, const LabeledBatch<float>& batch,
                      std::mt19937_64& rng) {
  const LossWeights w = cfg.weights();
  ModelBundle<float>& m = state.model;
  const Index B = batch.size();
  const double fs = cfg.attack.fs > 0 ? cfg.attack.fs : batch.fs;

  ObjectiveBatch<float> ob;
  ob.x = batch.x;
  ob.labels = batch.labels;
  if (preset_masks_input(cfg.preset)) {
    ob.mask = batch.mask;
    ob.mask_input = true;
  }
  if (cfg.preset == Preset::sap_at && cfg.attack.epsilon > 0) {
    AttackConfig ac = cfg.attack;
    ac.kind = AttackKind::sap;
    ac.fs = fs;
    ac.seed = splitmix64(cfg.attack.seed ^ static_cast<std::uint64_t>(state.step));
    ob.x = make_adversarial_batch(make_predictor(cfg, m, Mode::train), batch.x, batch.labels, ac,
                                  ob.mask_input ? &ob.mask : nullptr);
  }
  if (m.is_dual()) {
    if (w.w_recon > 0)
      ob.mask = preset_uses_mask_guidance(cfg.preset) ? batch.mask
                                                      : Tensor<float>::filled(batch.x.shape(), 1.0f);
    if (w.w_cons > 0) ob.donor = derangement(B, rng);
    if (w.w_adv > 0 && cfg.attack.epsilon > 0)
      ob.x_adv = run_attack(make_predictor(cfg, m, Mode::train), batch.x, batch.labels,
                            single_step(cfg.attack.epsilon, fs, cfg.attack.smooth_sigma_s))
                     .x_adv;
  }

  Graph<float> g;
  Session<float> s(g, m, Mode::train, true);
  const LossTerms<float> terms = objective_terms(s, g.constant(ob.x), ob, w);
  auto [total, report] = loss_total(g, terms, w);
  const std::pair<const char*, double> named[] = {{"recon", report.recon}, {"orth", report.orth},
                                                  {"cons", report.cons},   {"adv", report.adv},
                                                  {"cls", report.cls},     {"weight_decay", report.weight_decay}};
  for (const auto& [name, v] : named)
    if (!std::isfinite(v))
      throw Error("E_NONFINITE", std::string("loss term '") + name + "' is not finite at step " +
                                     std::to_string(state.step));
  g.backward(total);
  const auto grads = s.gradients();

  ++state.step;
  const double t = double(state.step);
  const float lr = float(cfg.learning_rate);
  const float b1 = float(cfg.beta1), b2 = float(cfg.beta2), eps = float(cfg.adam_eps);
  const float c1 = float(1.0 - std::pow(cfg.beta1, t)), c2 = float(1.0 - std::pow(cfg.beta2, t));
  const float decay = float(w.weight_decay);
  auto& ps = m.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!ps[i].trainable) continue;
    auto& theta = ps[i].value.array();
    const auto& gi = grads[i].array();
    if (decay > 0 && ps[i].group != ParamGroup::content) theta -= lr * decay * theta;
    auto& m1 = state.moment1[i].array();
    auto& m2 = state.moment2[i].array();
    if (cfg.optimizer == OptimizerKind::adam) {
      m1 = b1 * m1 + (1.0f - b1) * gi;
      m2 = b2 * m2 + (1.0f - b2) * gi.square();
      theta -= lr * (m1 / c1) / ((m2 / c2).sqrt() + eps);
    } else {
      m1 = float(cfg.momentum) * m1 + gi;
      theta -= lr * m1;
    }
  }
  m.apply_batch_stats(s.batch_stats());
  if (!m.all_finite())
    throw Error("E_NONFINITE", "parameters became non-finite at step " + std::to_string(state.step));
  return report;
}

TrainState train(const TrainConfig& cfg, const LabeledBatch<float>& train_data, const LabeledBatch<float>& val_data,
                 std::optional<TrainState> resume, const LogSink& log) {
  validate(cfg);
  check_masks(cfg, train_data);
  if (preset_masks_input(cfg.preset) && val_data.mask.empty())
    throw Error("E_MASK", "preset resnet_mask needs physio-masks for the validation data");
  TrainState state = resume ? std::move(*resume) : init_state(cfg, train_data);
  check_input_shape(state.model, train_data.x);
  std::mt19937_64 rng = rng_from_string(state.rng_state);
  const Index N = train_data.size();
  const Index bs = cfg.batch_size;
  const Index min_batch = preset_model_kind(cfg.preset) == ModelKind::dual ? 2 : 1;

  while (state.epoch < cfg.epochs && !state.stopped) {
    std::vector<Index> order(static_cast<std::size_t>(N));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    int n_steps = 0;
    for (Index b = 0; b < N; b += bs) {
      const Index e = std::min(N, b + bs);
      if (e - b < min_batch) continue;
      const LabeledBatch<float> batch =
          train_data.gather(std::span<const Index>(order.data() + b, static_cast<std::size_t>(e - b)));
      const LossReport rep = train_step(cfg, state, batch, rng);
      epoch_loss += rep.total;
      ++n_steps;
      if (log) {
        json j = rep.to_json();
        j["type"] = "step";
        j["step"] = state.step;
        j["epoch"] = state.epoch;
        log(j);
      }
    }
    const double f1 = validation_f1(cfg, state.model, val_data);
    if (f1 > state.best_metric) {
      state.best_metric = f1;
      state.best_model = state.model;
      state.best_epoch = state.epoch;
      state.epochs_since_best = 0;
    } else {
      ++state.epochs_since_best;
    }
    ++state.epoch;
    state.epoch_losses.push_back(n_steps ? epoch_loss / n_steps : 0.0);
    if (state.epoch_losses.size() == 5) {
      const auto& l = state.epoch_losses;
      for (std::size_t k = 0; k + 2 < l.size(); ++k)
        if (l[k + 1] + l[k + 2] > l[k] + l[k + 1]) state.loss_flagged = true;
    }
    if (state.epochs_since_best >= cfg.early_stop_patience) state.stopped = true;
    state.rng_state = rng_to_string(rng);
    if (log)
      log({{"type", "epoch"},
           {"epoch", state.epoch - 1},
           {"mean_loss", n_steps ? epoch_loss / n_steps : 0.0},
           {"val_macro_f1", f1},
           {"best_val_macro_f1", state.best_metric},
           {"stopped", state.stopped},
           {"loss_flagged", state.loss_flagged}});
  }
  return state;
}

// ---- checkpoints ----------------------------------------------------------------------------

CheckpointData state_checkpoint(const TrainState& s) {
  CheckpointData d = model_checkpoint(s.best_model);
  const auto& ps = s.model.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    d.arrays.emplace_back("current/" + ps[i].name, ps[i].value);
    d.arrays.emplace_back("adam_m/" + ps[i].name, s.moment1[i]);
    d.arrays.emplace_back("adam_v/" + ps[i].name, s.moment2[i]);
  }
  d.header["format_version"] = 1;
  d.header["train"] = {{"step", s.step},
                       {"epoch", s.epoch},
                       {"best_metric", s.best_metric},
                       {"best_epoch", s.best_epoch},
                       {"epochs_since_best", s.epochs_since_best},
                       {"stopped", s.stopped},
                       {"rng_state", s.rng_state},
                       {"epoch_losses", s.epoch_losses},
                       {"loss_flagged", s.loss_flagged},
                       {"config", s.config}};
  return d;
}

TrainState state_from_checkpoint(const CheckpointData& d) {
  if (d.header.value("format_version", 0) != 1 || !d.header.contains("train"))
    throw Error("E_CHECKPOINT", "checkpoint does not carry a training state (unsupported version)");
  TrainState s;
  s.best_model = model_from_checkpoint(d);
  CheckpointData cur;
  cur.header = d.header;
  for (const auto& [name, t] : d.arrays)
    if (name.rfind("current/", 0) == 0) cur.arrays.emplace_back("model/" + name.substr(8), t);
  s.model = model_from_checkpoint(cur);
  auto find = [&](const std::string& name) -> const Tensor<float>& {
    for (const auto& a : d.arrays)
      if (a.first == name) return a.second;
    throw Error("E_CHECKPOINT", "missing array " + name);
  };
  for (const auto& p : s.model.parameters()) {
    s.moment1.push_back(find("adam_m/" + p.name));
    s.moment2.push_back(find("adam_v/" + p.name));
  }
  const json& t = d.header.at("train");
  s.step = t.at("step");
  s.epoch = t.at("epoch");
  s.best_metric = t.at("best_metric");
  s.best_epoch = t.at("best_epoch");
  s.epochs_since_best = t.at("epochs_since_best");
  s.stopped = t.at("stopped");
  s.rng_state = t.at("rng_state");
  s.config = t.at("config");
  s.epoch_losses = t.value("epoch_losses", std::vector<double>{});
  s.loss_flagged = t.value("loss_flagged", false);
  return s;
}

void save_checkpoint(const TrainState& s, const std::string& path) {
  write_file_atomic(path, encode_checkpoint(state_checkpoint(s)));
}

TrainState load_checkpoint(const std::string& path) {
  return state_from_checkpoint(decode_checkpoint(read_file(path)));
}

ModelBundle<float> load_model(const std::string& path, const ArchitectureSpec* expected) {
  return model_from_checkpoint(decode_checkpoint(read_file(path)), expected);
}

}  // namespace cpr

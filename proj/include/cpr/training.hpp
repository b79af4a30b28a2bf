#pragma once

#include "cpr/attacks.hpp"
#include "cpr/batch.hpp"
#include "cpr/netcore.hpp"
#include "cpr/objectives.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cpr {

enum class Preset { erm, resnet_mask, naive_disent, cpr_no_const, cpr_full, sap_at };
enum class OptimizerKind { adam, sgd_momentum };

std::string to_string(Preset p);
Preset preset_from_string(const std::string& s);
std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

/// Loss weights of each preset (before any user override).
LossWeights preset_weights(Preset p);
ModelKind preset_model_kind(Preset p);
/// naive_disent reconstructs without the physio-mask (M = all ones).
bool preset_uses_mask_guidance(Preset p);
/// resnet_mask feeds x * M to the classifier.
bool preset_masks_input(Preset p);
/// Presets that read physio-masks during training.
bool preset_needs_masks(Preset p);

struct TrainConfig {
  Preset preset = Preset::cpr_full;
  Variant variant = Variant::tiny;
  int epochs = 15;
  int batch_size = 32;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double momentum = 0.9;  // sgd_momentum
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::optional<LossWeights> loss_weights;  // overrides the preset weights
  // Budget of the single-step invariance term (cpr presets) and of the sap_at attack.
  AttackConfig attack{AttackKind::sap, 0.1, 0.025, 10, 0.02, 4.0, false, 0, 0.0};
  int early_stop_patience = 5;
  std::uint64_t seed = 0;

  LossWeights weights() const { return loss_weights ? *loss_weights : preset_weights(preset); }
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

void validate(const TrainConfig& cfg);

struct TrainState {
  ModelBundle<float> model;       // current parameters
  ModelBundle<float> best_model;  // best validation macro-F1 so far
  std::vector<Tensor<float>> moment1, moment2;  // aligned with model parameters
  std::int64_t step = 0;
  int epoch = 0;
  double best_metric = -1.0;
  int best_epoch = -1;
  int epochs_since_best = 0;
  bool stopped = false;
  std::string rng_state;
  nlohmann::json config;
  std::vector<double> epoch_losses;  // mean training loss per finished epoch
  // Set when the two-epoch moving average of the first five epoch losses ever rises.
  bool loss_flagged = false;
};

/// Fresh model and optimizer state for the data's shape.
TrainState init_state(const TrainConfig& cfg, const LabeledBatch<float>& train_data);

using LogSink = std::function<void(const nlohmann::json&)>;

/// Runs the remaining epochs of state (or a fresh state) and returns it. The sink receives one
/// JSON object per optimizer step and one per epoch.
TrainState train(const TrainConfig& cfg, const LabeledBatch<float>& train_data,
                 const LabeledBatch<float>& val_data, std::optional<TrainState> resume = std::nullopt,
                 const LogSink& log = {});

/// One mini-batch update; exposed for tests. Returns the loss report.
LossReport train_step(const TrainConfig& cfg, TrainState& state, const LabeledBatch<float>& batch,
                      std::mt19937_64& rng);

/// Clean macro-F1 of the model on data (eval mode, masks applied for resnet_mask).
double validation_f1(const TrainConfig& cfg, const ModelBundle<float>& m, const LabeledBatch<float>& data);

CheckpointData state_checkpoint(const TrainState& s);
TrainState state_from_checkpoint(const CheckpointData& d);
void save_checkpoint(const TrainState& s, const std::string& path);
TrainState load_checkpoint(const std::string& path);
/// The evaluation model (best_model) of a checkpoint; expected arch is optional.
ModelBundle<float> load_model(const std::string& path, const ArchitectureSpec* expected = nullptr);

}  // namespace cpr

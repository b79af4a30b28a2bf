#include "helpers.hpp"

#include "cpr/training.hpp"

#include <gtest/gtest.h>

using namespace cpr;

namespace {

bool same_parameters(const ModelBundle<float>& a, const ModelBundle<float>& b) {
  if (a.parameters().size() != b.parameters().size()) return false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    if (!(a.parameters()[i].value == b.parameters()[i].value)) return false;
  return true;
}

TrainConfig small_config(Preset p, int epochs) {
  TrainConfig c;
  c.preset = p;
  c.epochs = epochs;
  c.batch_size = 16;
  c.seed = 4;
  return c;
}

}  // namespace

TEST(Training, PresetWeights) {
  const LossWeights full = preset_weights(Preset::cpr_full);
  EXPECT_EQ(full, LossWeights{});
  EXPECT_EQ(preset_weights(Preset::cpr_no_const).w_cons, 0.0);
  EXPECT_EQ(preset_weights(Preset::cpr_no_const).w_adv, 1.0);
  EXPECT_EQ(preset_weights(Preset::naive_disent).w_adv, 0.0);
  EXPECT_EQ(preset_weights(Preset::naive_disent).w_recon, 1.0);
  for (Preset p : {Preset::erm, Preset::resnet_mask, Preset::sap_at}) {
    const LossWeights w = preset_weights(p);
    EXPECT_EQ(w.w_cls, 1.0);
    EXPECT_EQ(w.w_recon + w.w_orth + w.w_cons + w.w_adv, 0.0);
    EXPECT_EQ(preset_model_kind(p), ModelKind::baseline);
  }
  EXPECT_FALSE(preset_uses_mask_guidance(Preset::naive_disent));
  EXPECT_TRUE(preset_masks_input(Preset::resnet_mask));
  for (Preset p : {Preset::erm, Preset::resnet_mask, Preset::naive_disent, Preset::cpr_no_const, Preset::cpr_full,
                   Preset::sap_at})
    EXPECT_EQ(preset_from_string(to_string(p)), p);
  CPR_EXPECT_ERROR("E_CONFIG", preset_from_string("mystery"));
}

TEST(Training, ConfigJsonRoundTrip) {
  TrainConfig c = small_config(Preset::cpr_full, 3);
  LossWeights w;
  w.w_orth = 0.5;
  c.loss_weights = w;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_NE(small_config(Preset::erm, 3).hash(), c.hash());
  // partial weight overrides keep the preset's other weights
  const TrainConfig part = TrainConfig::from_json({{"preset", "cpr_no_const"}, {"loss_weights", {{"w_orth", 0.2}}}});
  EXPECT_EQ(part.weights().w_orth, 0.2);
  EXPECT_EQ(part.weights().w_cons, 0.0);
}

TEST(Training, ConfigValidation) {
  TrainConfig c;
  c.epochs = -1;
  CPR_EXPECT_ERROR("E_CONFIG", validate(c));
  TrainConfig b;
  b.batch_size = 0;
  CPR_EXPECT_ERROR("E_CONFIG", validate(b));
  TrainConfig l;
  l.learning_rate = 0;
  CPR_EXPECT_ERROR("E_CONFIG", validate(l));
}

TEST(Training, ZeroEpochsGivesInitialCheckpoint) {
  const auto data = fixture::synth_batch(20, 1);
  const TrainConfig c = small_config(Preset::cpr_full, 0);
  const TrainState s = train(c, data, data);
  EXPECT_EQ(s.step, 0);
  EXPECT_EQ(s.epoch, 0);
  EXPECT_TRUE(same_parameters(s.model, init_state(c, data).model));
  const auto dir = fixture::temp_dir("train_zero");
  save_checkpoint(s, (dir / "m.ckpt").string());
  const TrainState back = load_checkpoint((dir / "m.ckpt").string());
  EXPECT_TRUE(same_parameters(back.model, s.model));
  EXPECT_EQ(back.step, 0);
}

TEST(Training, DeterministicForFixedSeed) {
  const auto data = fixture::synth_batch(40, 1);
  const auto val = fixture::synth_batch(10, 1, Split::val);
  const TrainConfig c = small_config(Preset::cpr_full, 1);
  const TrainState a = train(c, data, val);
  const TrainState b = train(c, data, val);
  EXPECT_TRUE(same_parameters(a.model, b.model));
  EXPECT_EQ(a.best_metric, b.best_metric);
  TrainConfig other = c;
  other.seed = 5;
  EXPECT_FALSE(same_parameters(a.model, train(other, data, val).model));
}

TEST(Training, ResumeIsBitIdentical) {
  const auto data = fixture::synth_batch(40, 2);
  const auto val = fixture::synth_batch(10, 2, Split::val);
  const TrainConfig two = small_config(Preset::cpr_full, 2);
  const TrainState straight = train(two, data, val);

  const TrainState first = train(small_config(Preset::cpr_full, 1), data, val);
  const auto dir = fixture::temp_dir("train_resume");
  save_checkpoint(first, (dir / "e1.ckpt").string());
  const TrainState resumed = train(two, data, val, load_checkpoint((dir / "e1.ckpt").string()));
  EXPECT_EQ(resumed.step, straight.step);
  EXPECT_EQ(resumed.epoch, 2);
  EXPECT_TRUE(same_parameters(resumed.model, straight.model));
  EXPECT_TRUE(same_parameters(resumed.best_model, straight.best_model));
  for (std::size_t i = 0; i < straight.moment1.size(); ++i) {
    EXPECT_TRUE(resumed.moment1[i] == straight.moment1[i]);
    EXPECT_TRUE(resumed.moment2[i] == straight.moment2[i]);
  }
}

TEST(Training, LogsStepsAndEpochs) {
  const auto data = fixture::synth_batch(40, 3);
  std::vector<nlohmann::json> lines;
  train(small_config(Preset::cpr_full, 1), data, data, std::nullopt,
        [&](const nlohmann::json& j) { lines.push_back(j); });
  ASSERT_EQ(lines.size(), 4u);  // 16 + 16 + 8 records, then the epoch summary
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(lines[i].at("type"), "step");
    for (const char* k : {"recon", "orth", "cons", "adv", "cls", "total"}) EXPECT_TRUE(lines[i].contains(k)) << k;
  }
  EXPECT_EQ(lines[3].at("type"), "epoch");
  EXPECT_TRUE(lines[3].contains("loss_flagged"));
}

TEST(Training, LossSanityFlag) {
  const auto data = fixture::synth_batch(40, 3);
  const TrainState s = train(small_config(Preset::cpr_full, 5), data, data);
  ASSERT_EQ(s.epoch_losses.size(), 5u);
  std::vector<double> avg;
  for (std::size_t k = 0; k + 1 < 5; ++k) avg.push_back(0.5 * (s.epoch_losses[k] + s.epoch_losses[k + 1]));
  const bool rises = std::adjacent_find(avg.begin(), avg.end(), std::less<double>()) != avg.end();
  EXPECT_EQ(s.loss_flagged, rises);
  const auto dir = fixture::temp_dir("train_flag");
  save_checkpoint(s, (dir / "m.ckpt").string());
  const TrainState back = load_checkpoint((dir / "m.ckpt").string());
  EXPECT_EQ(back.epoch_losses, s.epoch_losses);
  EXPECT_EQ(back.loss_flagged, s.loss_flagged);
}

TEST(Training, MaskRequirements) {
  auto data = fixture::synth_batch(10, 1);
  auto flat = data;
  flat.mask.array().setZero();
  CPR_EXPECT_ERROR("E_MASK", train(small_config(Preset::cpr_full, 1), flat, data));
  auto full = data;
  full.mask.array().setOnes();
  CPR_EXPECT_ERROR("E_MASK", train(small_config(Preset::resnet_mask, 1), full, data));
  auto none = data;
  none.mask = Tensor<float>();
  CPR_EXPECT_ERROR("E_MASK", train(small_config(Preset::cpr_no_const, 1), none, data));
  // masks are not read by ERM or by the naive disentangler
  EXPECT_NO_THROW(train(small_config(Preset::erm, 1), none, none));
  EXPECT_NO_THROW(train(small_config(Preset::naive_disent, 1), none, none));
}

TEST(Training, EarlyStopping) {
  const auto data = fixture::synth_batch(20, 1);
  TrainConfig c = small_config(Preset::erm, 50);
  c.early_stop_patience = 1;
  c.learning_rate = 1e-9;  // validation F1 cannot improve
  const TrainState s = train(c, data, data);
  EXPECT_TRUE(s.stopped);
  EXPECT_EQ(s.epoch, 2);
  EXPECT_EQ(s.best_epoch, 0);
}

TEST(Training, SgdMomentumRuns) {
  const auto data = fixture::synth_batch(20, 1);
  TrainConfig c = small_config(Preset::erm, 1);
  c.optimizer = OptimizerKind::sgd_momentum;
  c.learning_rate = 0.01;
  const TrainState s = train(c, data, data);
  EXPECT_FALSE(same_parameters(s.model, init_state(c, data).model));
}

TEST(Training, CprLearnsCleanTask) {
  const auto data = fixture::synth_batch(600, 31);
  const auto val = fixture::synth_batch(100, 31, Split::val);
  const auto test = fixture::synth_batch(200, 31, Split::test);
  TrainConfig c = small_config(Preset::cpr_full, 10);
  c.batch_size = 32;
  LossWeights w;
  w.w_recon = 0.01;
  w.w_orth = 1.0;
  w.w_cons = 10.0;
  w.w_adv = 10.0;
  c.loss_weights = w;
  const TrainState s = train(c, data, val);
  EXPECT_GE(validation_f1(c, s.best_model, test), 0.8);
}

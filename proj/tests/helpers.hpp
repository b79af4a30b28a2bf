#pragma once

#include "cpr/batch.hpp"
#include "cpr/netcore.hpp"
#include "cpr/physiomask.hpp"
#include "cpr/signals.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace cpr::fixture {

template <typename S>
Tensor<S> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = S(n(rng));
  return t;
}

inline ArchitectureSpec small_arch(int n_samples = 64, int n_classes = 3) {
  ArchitectureSpec a = ArchitectureSpec::tiny(1, n_samples, n_classes);
  a.widths = {4, 6};
  a.n_blocks = {1, 1};
  a.kernel_size = 3;
  a.d_content = 4;
  a.d_style = 3;
  return a;
}

inline SynthConfig quiet_synth() {
  SynthConfig c = SynthConfig::standard();
  c.noise = NoiseConfig{};
  return c;
}

inline LabeledBatch<float> synth_batch(int n, std::uint64_t seed, Split split = Split::train,
                                       const SynthConfig& cfg = SynthConfig::standard()) {
  const auto records = generate_dataset(cfg, static_cast<std::size_t>(n), seed, split);
  std::vector<PhysioMask> masks;
  for (const auto& r : records) masks.push_back(mask_from_annotations(r));
  return make_batch<float>(records, &masks);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cpr_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace cpr::fixture

#define CPR_EXPECT_ERROR(code_str, stmt)                                   \
  do {                                                                     \
    try {                                                                  \
      stmt;                                                                \
      ADD_FAILURE() << "expected " << code_str << " from " #stmt;          \
    } catch (const ::cpr::Error& e) {                                      \
      EXPECT_EQ(e.code(), code_str) << e.what();                           \
    }                                                                      \
  } while (0)

#include "cpr/training.hpp"

namespace cpr::fixture {

/// Briefly trained model on the standard synthetic classes at the given sampling rate.
inline TrainState quick_model(Preset preset, const SynthConfig& cfg = SynthConfig::standard(), int n_train = 200,
                              int epochs = 3, std::uint64_t seed = 1) {
  const double fs = cfg.fs;
  const auto train_data = synth_batch(n_train, 100 + seed, Split::train, cfg);
  const auto val_data = synth_batch(50, 100 + seed, Split::val, cfg);
  TrainConfig tc;
  tc.preset = preset;
  tc.epochs = epochs;
  tc.seed = seed;
  tc.attack.fs = fs;
  return train(tc, train_data, val_data);
}

}  // namespace cpr::fixture

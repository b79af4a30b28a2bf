#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cpr {

/// Signal storage: leads x samples, row-major, millivolts.
using SignalMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class WaveKind : std::uint8_t { P = 0, Q = 1, R = 2, S = 3, T = 4 };
inline constexpr int kNumWaveKinds = 5;
char wave_kind_char(WaveKind k);

struct WaveAnnotation {
  WaveKind kind = WaveKind::R;
  std::uint32_t onset = 0;
  std::uint32_t peak = 0;
  std::uint32_t offset = 0;

  bool operator==(const WaveAnnotation&) const = default;
};

struct EcgRecord {
  std::string record_id;
  SignalMatrix signal;
  float fs = 250.0f;
  std::vector<std::uint8_t> labels;
  std::vector<WaveAnnotation> annotations;

  Eigen::Index n_leads() const { return signal.rows(); }
  Eigen::Index n_samples() const { return signal.cols(); }
  int n_classes() const { return static_cast<int>(labels.size()); }
  // argmax of labels (first positive class)
  int primary_class() const;

  bool operator==(const EcgRecord& o) const;
};

// Throws Error("E_RECORD") if the record breaks a structural invariant.
void validate_record(const EcgRecord& r, bool require_label = false);

/// One Gaussian bump of a beat, positioned relative to the R peak.
struct WaveParams {
  double amplitude_mv = 0.0;
  double width_s = 0.01;   // Gaussian standard deviation
  double offset_s = 0.0;   // centre relative to R
};

/// Per-class morphology indexed by WaveKind.
using Morphology = std::array<WaveParams, kNumWaveKinds>;

struct Sinusoid {
  double amplitude_mv = 0.0;
  double frequency_hz = 0.0;
};

struct NoiseConfig {
  Sinusoid baseline_wander;
  Sinusoid powerline;
  double gaussian_std = 0.0;

  bool is_zero() const {
    return baseline_wander.amplitude_mv == 0.0 && powerline.amplitude_mv == 0.0 &&
           gaussian_std == 0.0;
  }
};

struct SynthConfig {
  int n_classes = 5;
  int n_leads = 1;
  double fs = 128.0;
  double duration_s = 3.0;
  double heart_rate_min_bpm = 45.0;
  double heart_rate_max_bpm = 70.0;
  std::vector<Morphology> wave_params;
  NoiseConfig noise;
  // Probability that a record carries a second label; its beats alternate morphologies.
  double co_occurrence = 0.0;
  std::uint64_t seed = 0;

  Eigen::Index n_samples() const;
  /// Five-class morphology set used by the benchmark and the examples.
  static SynthConfig standard();
};

void validate(const SynthConfig& cfg);
void validate(const NoiseConfig& noise);

std::uint64_t splitmix64(std::uint64_t x);

/// Synthetic record: sum of five Gaussian bumps per beat plus configured noise.
EcgRecord generate_record(const SynthConfig& cfg, int class_id, std::uint64_t seed);

/// Additive noise; labels and annotations are carried over untouched.
EcgRecord add_noise(const EcgRecord& x, const NoiseConfig& noise, std::uint64_t seed);

enum class Split : int { train = 0, val = 1, test = 2 };

/// Balanced dataset (class = index mod n_classes); record seed = split seed xor index.
std::vector<EcgRecord> generate_dataset(const SynthConfig& cfg, std::size_t n_records,
                                        std::uint64_t seed, Split split = Split::train);

/// Zero mean, unit standard deviation over the whole record (all leads together).
EcgRecord normalize_record(const EcgRecord& r);
std::vector<EcgRecord> normalize_records(const std::vector<EcgRecord>& rs);

// Record container "CPRSIG01".
std::vector<std::uint8_t> encode_records(const std::vector<EcgRecord>& records);
std::vector<EcgRecord> decode_records(std::span<const std::uint8_t> bytes);
void write_records(const std::string& path, const std::vector<EcgRecord>& records);
std::vector<EcgRecord> read_records(const std::string& path);

/// One row per sample, one column per lead.
std::string records_csv(const EcgRecord& r);

}  // namespace cpr

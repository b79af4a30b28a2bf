#pragma once

#include "cpr/signals.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cpr {

using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class MaskSource : std::uint8_t { annotation = 0, detector = 1 };

/// Binary P-QRS-T support aligned sample-for-sample with a record.
struct PhysioMask {
  std::string record_id;
  float fs = 0.0f;
  MaskMatrix mask;
  double coverage = 0.0;
  MaskSource source = MaskSource::annotation;

  bool operator==(const PhysioMask& o) const {
    return record_id == o.record_id && fs == o.fs && source == o.source &&
           mask.rows() == o.mask.rows() && mask.cols() == o.mask.cols() && mask == o.mask;
  }
};

struct Window {
  double start_s = 0.0;
  double end_s = 0.0;
};

struct DetectorConfig {
  double bandpass_low_hz = 5.0;
  double bandpass_high_hz = 15.0;
  double integration_window_s = 0.15;
  double refractory_s = 0.2;
  double threshold_factor = 0.4;
  Window p_window{0.20, 0.08};  // seconds before R: [R - start, R - end]
  Window t_window{0.08, 0.40};  // seconds after R:  [R + start, R + end]
  double qrs_halfwidth_s = 0.06;
  int min_run = -1;              // samples; negative means 0.02 s at the record's fs

  int min_run_samples(double fs) const;
};

void validate(const DetectorConfig& cfg, double fs);

double mask_coverage(const MaskMatrix& m);

/// Union of annotation intervals, shared across leads.
PhysioMask mask_from_annotations(const EcgRecord& record);

/// Pan-Tompkins style R-peak detector on lead 0. Returns strictly increasing sample indices.
std::vector<Eigen::Index> detect_r_peaks(const EcgRecord& record, const DetectorConfig& cfg);

/// Fixed physiological windows around detected R peaks, chatter shorter than min_run removed.
PhysioMask mask_from_detection(const EcgRecord& record, const DetectorConfig& cfg);

/// Builds the mask from the same peaks as mask_from_detection (exposed for tests).
MaskMatrix mask_from_peaks(std::span<const Eigen::Index> peaks, Eigen::Index n_leads,
                           Eigen::Index n_samples, double fs, const DetectorConfig& cfg);

/// Drops runs of ones shorter than min_run samples, per row.
void remove_short_runs(MaskMatrix& m, int min_run);

/// Throws Error("E_MASK") unless 0 < coverage < 1.
void require_trainable(const PhysioMask& m);

double jaccard(const MaskMatrix& a, const MaskMatrix& b);

// Mask container "CPRMSK01": CPRSIG01 layout with a source byte and u8 payload.
std::vector<std::uint8_t> encode_masks(const std::vector<PhysioMask>& masks);
std::vector<PhysioMask> decode_masks(std::span<const std::uint8_t> bytes);
void write_masks(const std::string& path, const std::vector<PhysioMask>& masks);
std::vector<PhysioMask> read_masks(const std::string& path);
std::string mask_csv(const PhysioMask& m);

}  // namespace cpr

#include "helpers.hpp"

#include "cpr/util.hpp"

#include <gtest/gtest.h>

#include <cstdlib>

using namespace cpr;

namespace {

SynthConfig at_250(double gaussian_std = 0.0) {
  SynthConfig c = fixture::quiet_synth();
  c.fs = 250.0;
  c.noise.gaussian_std = gaussian_std;
  return c;
}

std::vector<Eigen::Index> true_r(const EcgRecord& r, Eigen::Index margin = 0) {
  std::vector<Eigen::Index> out;
  for (const auto& a : r.annotations)
    if (a.kind == WaveKind::R && Eigen::Index(a.peak) >= margin && Eigen::Index(a.peak) + margin < r.n_samples())
      out.push_back(a.peak);
  return out;
}

EcgRecord blank(Eigen::Index n) {
  EcgRecord r;
  r.record_id = "blank";
  r.fs = 250.0f;
  r.signal = SignalMatrix::Zero(2, n);
  r.labels = {1};
  return r;
}

}  // namespace

TEST(PhysioMask, SingleAnnotationCoverage) {
  EcgRecord r = blank(1000);
  for (int k = 0; k < kNumWaveKinds; ++k)
    r.annotations.push_back({static_cast<WaveKind>(k), 100, 125, 150});
  const PhysioMask m = mask_from_annotations(r);
  EXPECT_EQ(m.mask.rows(), 2);
  EXPECT_DOUBLE_EQ(m.coverage, 51.0 / 1000.0);
  EXPECT_EQ(m.source, MaskSource::annotation);
  EXPECT_EQ(m.mask.row(0), m.mask.row(1));
}

TEST(PhysioMask, OverlappingIntervalsUnionOnce) {
  EcgRecord r = blank(200);
  r.annotations = {{WaveKind::P, 10, 20, 30}, {WaveKind::Q, 25, 35, 40}, {WaveKind::R, 38, 40, 60}};
  const PhysioMask m = mask_from_annotations(r);
  EXPECT_DOUBLE_EQ(m.coverage, 51.0 / 200.0);
  EXPECT_EQ(m.mask.maxCoeff(), 1);
  EXPECT_EQ(m.mask.row(0).segment(10, 51).minCoeff(), 1);
}

TEST(PhysioMask, MissingAnnotationsRejected) {
  CPR_EXPECT_ERROR("E_MASK", mask_from_annotations(blank(100)));
}

TEST(PhysioMask, NoiseFreeEnergyInsideMask) {
  const SynthConfig cfg = at_250();
  for (const auto& r : generate_dataset(cfg, 20, 3)) {
    const PhysioMask m = mask_from_annotations(r);
    const Eigen::ArrayXd e = r.signal.row(0).cast<double>().array().square().transpose();
    const Eigen::ArrayXd in = m.mask.row(0).cast<double>().array().transpose();
    EXPECT_GE((e * in).sum() / e.sum(), 0.99);
  }
}

TEST(PhysioMask, DetectorFindsNoiseFreePeaksExactly) {
  const DetectorConfig dc;
  // Beats whose QRS is cut by the record boundary carry a clamped R annotation; skip that edge.
  const Eigen::Index edge = 15;
  for (const auto& r : generate_dataset(at_250(), 50, 9)) {
    const auto truth = true_r(r, edge);
    std::vector<Eigen::Index> found;
    for (auto f : detect_r_peaks(r, dc))
      if (f >= edge && f + edge < r.n_samples()) found.push_back(f);
    ASSERT_EQ(found.size(), truth.size()) << r.record_id;
    for (std::size_t i = 0; i < truth.size(); ++i) EXPECT_LE(std::abs(found[i] - truth[i]), 2) << r.record_id;
  }
}

TEST(PhysioMask, DetectorRecallUnderNoise) {
  SynthConfig cfg = at_250(0.1);
  int hit = 0, total = 0;
  for (int i = 0; i < 100; ++i) {
    const EcgRecord r = generate_record(cfg, 0, 500 + i);  // R amplitude 1.0 mV
    const auto found = detect_r_peaks(r, DetectorConfig{});
    for (auto t : true_r(r)) {
      ++total;
      hit += std::any_of(found.begin(), found.end(), [&](Eigen::Index f) { return std::abs(f - t) <= 2; });
    }
  }
  EXPECT_GE(double(hit) / total, 0.95);
}

TEST(PhysioMask, DetectorIncreasingAndEmptyOnZeros) {
  EXPECT_TRUE(detect_r_peaks(blank(1000), DetectorConfig{}).empty());
  const auto found = detect_r_peaks(generate_record(at_250(0.05), 3, 2), DetectorConfig{});
  EXPECT_TRUE(std::adjacent_find(found.begin(), found.end(), std::greater_equal<>()) == found.end());
}

TEST(PhysioMask, DetectorMaskOverlapsAnnotationMask) {
  double sum = 0;
  const auto records = generate_dataset(at_250(), 100, 21);
  for (const auto& r : records)
    sum += jaccard(mask_from_detection(r, DetectorConfig{}).mask, mask_from_annotations(r).mask);
  EXPECT_GE(sum / double(records.size()), 0.8);
}

TEST(PhysioMask, EmptyDetectionGivesZeroCoverage) {
  const PhysioMask m = mask_from_detection(blank(500), DetectorConfig{});
  EXPECT_EQ(m.coverage, 0.0);
  EXPECT_EQ(m.source, MaskSource::detector);
  CPR_EXPECT_ERROR("E_MASK", require_trainable(m));
}

TEST(PhysioMask, SymmetricWindowsGiveSymmetricMask) {
  DetectorConfig dc;
  dc.p_window = {0.3, 0.1};
  dc.t_window = {0.1, 0.3};
  const Eigen::Index n = 501;
  const std::vector<Eigen::Index> peaks{250};
  const MaskMatrix m = mask_from_peaks(peaks, 1, n, 250.0, dc);
  for (Eigen::Index i = 0; i < n; ++i) EXPECT_EQ(m(0, i), m(0, n - 1 - i)) << i;
}

TEST(PhysioMask, Idempotent) {
  const EcgRecord r = generate_record(at_250(0.02), 2, 6);
  EXPECT_EQ(mask_from_annotations(r), mask_from_annotations(r));
  EXPECT_EQ(mask_from_detection(r, DetectorConfig{}), mask_from_detection(r, DetectorConfig{}));
}

TEST(PhysioMask, WiderWindowsNeverRemoveOnes) {
  const EcgRecord r = generate_record(at_250(), 1, 12);
  DetectorConfig narrow, wide;
  wide.p_window = {0.25, 0.05};
  wide.t_window = {0.05, 0.45};
  const MaskMatrix a = mask_from_detection(r, narrow).mask;
  const MaskMatrix b = mask_from_detection(r, wide).mask;
  EXPECT_TRUE(((a.array() == 1) <= (b.array() == 1)).all());
}

TEST(PhysioMask, MaskIsBinary) {
  const PhysioMask m = mask_from_detection(generate_record(at_250(0.05), 0, 3), DetectorConfig{});
  EXPECT_TRUE(((m.mask.array() == 0) || (m.mask.array() == 1)).all());
  const MaskMatrix sq = (m.mask.array() * m.mask.array()).matrix();
  EXPECT_EQ(sq, m.mask);
}

TEST(PhysioMask, ShortRunsRemoved) {
  MaskMatrix m(1, 12);
  m << 1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1;
  remove_short_runs(m, 3);
  MaskMatrix want(1, 12);
  want << 0, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0;
  EXPECT_EQ(m, want);
}

TEST(PhysioMask, InvalidDetectorConfig) {
  DetectorConfig dc;
  dc.bandpass_high_hz = 200;
  CPR_EXPECT_ERROR("E_CONFIG", validate(dc, 250.0));
  DetectorConfig dr;
  dr.refractory_s = 0;
  CPR_EXPECT_ERROR("E_CONFIG", validate(dr, 250.0));
}

TEST(PhysioMask, ContainerRoundTripAndCorruption) {
  std::vector<PhysioMask> masks;
  for (const auto& r : generate_dataset(at_250(0.02), 4, 1)) masks.push_back(mask_from_annotations(r));
  masks.push_back(mask_from_detection(generate_record(at_250(), 2, 3), DetectorConfig{}));
  const auto dir = fixture::temp_dir("masks");
  const std::string path = (dir / "m.cprmsk").string();
  write_masks(path, masks);
  EXPECT_EQ(read_masks(path), masks);

  auto bytes = encode_masks(masks);
  bytes[bytes.size() - 10] ^= 1;
  EXPECT_THROW(decode_masks(bytes), Error);
}

TEST(PhysioMask, CsvExport) {
  const PhysioMask m = mask_from_annotations(generate_record(at_250(), 0, 1));
  const std::string csv = mask_csv(m);
  EXPECT_EQ(csv.rfind("lead_0\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), m.mask.cols() + 1);
}

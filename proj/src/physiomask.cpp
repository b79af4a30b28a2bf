#include "cpr/physiomask.hpp"

#include "cpr/util.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cpr {

namespace {

constexpr char kMaskMagic[] = "CPRMSK01";

Eigen::Index secs(double s, double fs) { return static_cast<Eigen::Index>(std::llround(s * fs)); }

// Centred moving average; the window shrinks at the edges.
Eigen::ArrayXd moving_average(const Eigen::ArrayXd& x, Eigen::Index window) {
  const Eigen::Index n = x.size();
  Eigen::ArrayXd prefix(n + 1);
  prefix(0) = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) prefix(i + 1) = prefix(i) + x(i);
  const Eigen::Index half = window / 2;
  Eigen::ArrayXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index lo = std::max<Eigen::Index>(0, i - half);
    Eigen::Index hi = std::min<Eigen::Index>(n, i - half + window);
    out(i) = (prefix(hi) - prefix(lo)) / static_cast<double>(hi - lo);
  }
  return out;
}

void set_range(MaskMatrix& m, Eigen::Index a, Eigen::Index b) {
  a = std::max<Eigen::Index>(a, 0);
  b = std::min<Eigen::Index>(b, m.cols() - 1);
  if (a > b) return;
  m.middleCols(a, b - a + 1).setOnes();
}

}  // namespace

int DetectorConfig::min_run_samples(double fs) const {
  return min_run >= 0 ? min_run : static_cast<int>(std::llround(0.02 * fs));
}

void validate(const DetectorConfig& cfg, double fs) {
  if (!(cfg.bandpass_low_hz > 0 && cfg.bandpass_low_hz < cfg.bandpass_high_hz &&
        cfg.bandpass_high_hz < fs / 2))
    throw Error("E_CONFIG", "bandpass must satisfy 0 < low < high < fs/2");
  if (!(cfg.refractory_s > 0)) throw Error("E_CONFIG", "refractory_s must be positive");
  if (!(cfg.integration_window_s > 0)) throw Error("E_CONFIG", "integration window must be positive");
  if (cfg.p_window.end_s < 0 || cfg.p_window.start_s < cfg.p_window.end_s)
    throw Error("E_CONFIG", "p_window must be non-negative with start >= end (seconds before R)");
  if (cfg.t_window.start_s < 0 || cfg.t_window.end_s < cfg.t_window.start_s)
    throw Error("E_CONFIG", "t_window must be non-negative and ordered");
  if (cfg.qrs_halfwidth_s < 0) throw Error("E_CONFIG", "qrs_halfwidth_s must be non-negative");
}

double mask_coverage(const MaskMatrix& m) {
  if (m.size() == 0) return 0.0;
  return m.cast<double>().sum() / static_cast<double>(m.size());
}

PhysioMask mask_from_annotations(const EcgRecord& record) {
  if (record.annotations.empty())
    throw Error("E_MASK", record.record_id + ": record has no annotations");
  PhysioMask out;
  out.record_id = record.record_id;
  out.fs = record.fs;
  out.source = MaskSource::annotation;
  out.mask = MaskMatrix::Zero(record.n_leads(), record.n_samples());
  for (const auto& a : record.annotations) set_range(out.mask, a.onset, a.offset);
  out.coverage = mask_coverage(out.mask);
  return out;
}

std::vector<Eigen::Index> detect_r_peaks(const EcgRecord& record, const DetectorConfig& cfg) {
  const double fs = record.fs;
  validate(cfg, fs);
  const Eigen::Index n = record.n_samples();
  std::vector<Eigen::Index> peaks;
  if (n < 5 || record.n_leads() == 0) return peaks;

  const Eigen::ArrayXd x = record.signal.row(0).cast<double>().transpose().array();
  // Band-pass as a difference of moving averages.
  const Eigen::ArrayXd baseline =
      moving_average(x, std::max<Eigen::Index>(1, secs(1.0 / cfg.bandpass_low_hz, fs)));
  const Eigen::ArrayXd detail = x - baseline;
  const Eigen::ArrayXd band =
      moving_average(x, std::max<Eigen::Index>(1, secs(1.0 / cfg.bandpass_high_hz, fs))) - baseline;

  // Five-point derivative (centred), squaring, moving-window integration.
  Eigen::ArrayXd deriv(n);
  auto at = [&](Eigen::Index i) { return band(std::clamp<Eigen::Index>(i, 0, n - 1)); };
  for (Eigen::Index i = 0; i < n; ++i)
    deriv(i) = (2.0 * at(i + 2) + at(i + 1) - at(i - 1) - 2.0 * at(i - 2)) / 8.0;
  const Eigen::ArrayXd integrated = moving_average(
      deriv.square(), std::max<Eigen::Index>(1, secs(cfg.integration_window_s, fs)));

  const Eigen::Index learn = std::min<Eigen::Index>(n, secs(2.0, fs));
  double running = integrated.head(learn).maxCoeff();
  if (!(running > 0)) return peaks;
  const Eigen::Index refractory = std::max<Eigen::Index>(1, secs(cfg.refractory_s, fs));

  std::vector<std::pair<Eigen::Index, double>> accepted;
  for (Eigen::Index i = 1; i + 1 < n; ++i) {
    const double v = integrated(i);
    if (!(v > integrated(i - 1) && v >= integrated(i + 1))) continue;
    if (!(v > cfg.threshold_factor * running)) continue;
    if (!accepted.empty() && i - accepted.back().first < refractory) {
      if (v > accepted.back().second) accepted.back() = {i, v};
      continue;
    }
    accepted.emplace_back(i, v);
    running = 0.875 * running + 0.125 * v;
  }

  // Refine each integrated peak to the local maximum of the high-passed signal.
  const Eigen::Index search = std::max<Eigen::Index>(1, secs(0.06, fs));
  for (const auto& [i, v] : accepted) {
    const Eigen::Index lo = std::max<Eigen::Index>(0, i - search);
    const Eigen::Index hi = std::min<Eigen::Index>(n - 1, i + search);
    Eigen::Index best = lo;
    for (Eigen::Index j = lo; j <= hi; ++j)
      if (detail(j) > detail(best)) best = j;
    if (peaks.empty() || best > peaks.back()) peaks.push_back(best);
  }
  return peaks;
}

void remove_short_runs(MaskMatrix& m, int min_run) {
  if (min_run <= 1) return;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index i = 0;
    while (i < m.cols()) {
      if (!m(r, i)) {
        ++i;
        continue;
      }
      Eigen::Index j = i;
      while (j < m.cols() && m(r, j)) ++j;
      if (j - i < min_run) m.row(r).segment(i, j - i).setZero();
      i = j;
    }
  }
}

MaskMatrix mask_from_peaks(std::span<const Eigen::Index> peaks, Eigen::Index n_leads,
                           Eigen::Index n_samples, double fs, const DetectorConfig& cfg) {
  MaskMatrix m = MaskMatrix::Zero(n_leads, n_samples);
  const Eigen::Index qrs = secs(cfg.qrs_halfwidth_s, fs);
  for (Eigen::Index r : peaks) {
    set_range(m, r - qrs, r + qrs);
    set_range(m, r - secs(cfg.p_window.start_s, fs), r - secs(cfg.p_window.end_s, fs));
    set_range(m, r + secs(cfg.t_window.start_s, fs), r + secs(cfg.t_window.end_s, fs));
  }
  remove_short_runs(m, cfg.min_run_samples(fs));
  return m;
}

PhysioMask mask_from_detection(const EcgRecord& record, const DetectorConfig& cfg) {
  const auto peaks = detect_r_peaks(record, cfg);
  PhysioMask out;
  out.record_id = record.record_id;
  out.fs = record.fs;
  out.source = MaskSource::detector;
  out.mask = mask_from_peaks(peaks, record.n_leads(), record.n_samples(), record.fs, cfg);
  out.coverage = mask_coverage(out.mask);
  return out;
}

void require_trainable(const PhysioMask& m) {
  if (!(m.coverage > 0.0 && m.coverage < 1.0))
    throw Error("E_MASK", m.record_id + ": mask coverage " + std::to_string(m.coverage) +
                              " is degenerate (must lie strictly between 0 and 1)");
}

double jaccard(const MaskMatrix& a, const MaskMatrix& b) {
  const auto inter = (a.array() * b.array()).cast<double>().sum();
  const auto uni = (a.array().max(b.array())).cast<double>().sum();
  return uni > 0 ? inter / uni : 1.0;
}

std::vector<std::uint8_t> encode_masks(const std::vector<PhysioMask>& masks) {
  ByteWriter w;
  w.str(std::string_view(kMaskMagic, 8));
  w.u32(static_cast<std::uint32_t>(masks.size()));
  for (const auto& m : masks) {
    ByteWriter p;
    p.u32(static_cast<std::uint32_t>(m.record_id.size()));
    p.str(m.record_id);
    p.u32(static_cast<std::uint32_t>(m.mask.rows()));
    p.u32(static_cast<std::uint32_t>(m.mask.cols()));
    p.f32(m.fs);
    p.u32(0);  // no labels
    p.u32(0);  // no annotations
    p.u8(static_cast<std::uint8_t>(m.source));
    for (Eigen::Index l = 0; l < m.mask.rows(); ++l)
      for (Eigen::Index i = 0; i < m.mask.cols(); ++i) p.u8(m.mask(l, i));
    w.bytes(p.buffer());
    w.u32(crc32(p.buffer()));
  }
  return std::move(w.buffer());
}

std::vector<PhysioMask> decode_masks(std::span<const std::uint8_t> bytes) {
  ByteReader rd(bytes);
  if (bytes.size() < 8 || rd.str(8) != std::string_view(kMaskMagic, 8))
    throw Error("E_FORMAT", "not a CPRMSK01 container (unknown magic or version)");
  const std::uint32_t count = rd.u32();
  std::vector<PhysioMask> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = rd.pos();
    PhysioMask m;
    m.record_id = rd.str(rd.u32());
    const std::uint32_t leads = rd.u32();
    const std::uint32_t samples = rd.u32();
    m.fs = rd.f32();
    rd.bytes(rd.u32());
    const std::uint32_t n_ann = rd.u32();
    rd.bytes(std::size_t(n_ann) * 13);
    const std::uint8_t source = rd.u8();
    if (source > 1) throw Error("E_FORMAT", "unknown mask source");
    m.source = static_cast<MaskSource>(source);
    if (std::uint64_t(leads) * samples > rd.remaining())
      throw Error("E_TRUNCATED", "mask payload exceeds file size");
    m.mask.resize(leads, samples);
    for (std::uint32_t l = 0; l < leads; ++l)
      for (std::uint32_t s = 0; s < samples; ++s) {
        const std::uint8_t v = rd.u8();
        if (v > 1) throw Error("E_FORMAT", "mask values must be 0 or 1");
        m.mask(l, s) = v;
      }
    const auto payload = bytes.subspan(start, rd.pos() - start);
    if (rd.u32() != crc32(payload))
      throw Error("E_CHECKSUM", "CRC32 mismatch in mask " + std::to_string(i));
    m.coverage = mask_coverage(m.mask);
    out.push_back(std::move(m));
  }
  if (rd.remaining() != 0) throw Error("E_FORMAT", "trailing bytes after last mask");
  return out;
}

void write_masks(const std::string& path, const std::vector<PhysioMask>& masks) {
  write_file_atomic(path, encode_masks(masks));
}

std::vector<PhysioMask> read_masks(const std::string& path) { return decode_masks(read_file(path)); }

std::string mask_csv(const PhysioMask& m) {
  std::ostringstream os;
  for (Eigen::Index l = 0; l < m.mask.rows(); ++l) os << (l ? "," : "") << "lead_" << l;
  os << "\n";
  for (Eigen::Index i = 0; i < m.mask.cols(); ++i) {
    for (Eigen::Index l = 0; l < m.mask.rows(); ++l) os << (l ? "," : "") << int(m.mask(l, i));
    os << "\n";
  }
  return os.str();
}

}  // namespace cpr

#include "cpr/signals.hpp"

#include "cpr/util.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace cpr {

namespace {

constexpr char kSignalMagic[] = "CPRSIG01";

// Extent of a beat template around R, in seconds: (before, after).
std::pair<double, double> template_extent(const Morphology& m) {
  double before = 0.0, after = 0.0;
  for (const auto& w : m) {
    before = std::max(before, -(w.offset_s - 3.0 * w.width_s));
    after = std::max(after, w.offset_s + 3.0 * w.width_s);
  }
  return {before, after};
}

bool same_params(const WaveParams& a, const WaveParams& b) {
  return a.amplitude_mv == b.amplitude_mv && a.width_s == b.width_s && a.offset_s == b.offset_s;
}

}  // namespace

char wave_kind_char(WaveKind k) { return "PQRST"[static_cast<int>(k)]; }

int EcgRecord::primary_class() const {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) return static_cast<int>(i);
  return -1;
}

bool EcgRecord::operator==(const EcgRecord& o) const {
  return record_id == o.record_id && fs == o.fs && labels == o.labels &&
         annotations == o.annotations && signal.rows() == o.signal.rows() &&
         signal.cols() == o.signal.cols() && signal == o.signal;
}

void validate_record(const EcgRecord& r, bool require_label) {
  if (!r.signal.allFinite()) throw Error("E_RECORD", r.record_id + ": non-finite sample");
  for (auto l : r.labels)
    if (l > 1) throw Error("E_RECORD", r.record_id + ": label entries must be 0 or 1");
  if (require_label && std::none_of(r.labels.begin(), r.labels.end(), [](auto l) { return l; }))
    throw Error("E_RECORD", r.record_id + ": record has no positive label");
  const auto n = static_cast<std::uint32_t>(r.n_samples());
  std::array<std::int64_t, kNumWaveKinds> last_offset;
  last_offset.fill(-1);
  std::uint32_t prev_onset = 0;
  for (const auto& a : r.annotations) {
    if (!(a.onset <= a.peak && a.peak <= a.offset && a.offset < n))
      throw Error("E_RECORD", r.record_id + ": annotation bounds violated");
    if (a.onset < prev_onset) throw Error("E_RECORD", r.record_id + ": annotations not sorted");
    auto k = static_cast<int>(a.kind);
    if (k >= kNumWaveKinds) throw Error("E_RECORD", r.record_id + ": unknown wave kind");
    if (static_cast<std::int64_t>(a.onset) <= last_offset[k])
      throw Error("E_RECORD", r.record_id + ": overlapping annotations of one kind");
    last_offset[k] = a.offset;
    prev_onset = a.onset;
  }
}

Eigen::Index SynthConfig::n_samples() const {
  return static_cast<Eigen::Index>(std::llround(duration_s * fs));
}

SynthConfig SynthConfig::standard() {
  SynthConfig cfg;
  //                    P                      Q                      R                   S                      T
  cfg.wave_params = {
      {{{0.15, 0.020, -0.15}, {-0.10, 0.010, -0.03}, {1.00, 0.010, 0.0}, {-0.25, 0.010, 0.03}, {0.30, 0.045, 0.25}}},
      {{{0.15, 0.020, -0.15}, {-0.35, 0.012, -0.03}, {0.70, 0.010, 0.0}, {-0.15, 0.010, 0.03}, {-0.25, 0.045, 0.25}}},
      {{{0.15, 0.020, -0.15}, {-0.05, 0.015, -0.04}, {0.90, 0.018, 0.0}, {-0.35, 0.015, 0.04}, {0.25, 0.050, 0.26}}},
      {{{0.15, 0.020, -0.15}, {-0.10, 0.010, -0.03}, {1.80, 0.011, 0.0}, {-0.60, 0.011, 0.03}, {0.35, 0.045, 0.25}}},
      {{{0.08, 0.020, -0.15}, {-0.10, 0.010, -0.03}, {1.00, 0.010, 0.0}, {-0.25, 0.010, 0.03}, {0.08, 0.050, 0.25}}},
  };
  cfg.noise.baseline_wander = {0.10, 0.3};
  cfg.noise.powerline = {0.02, 50.0};
  cfg.noise.gaussian_std = 0.03;
  return cfg;
}

void validate(const NoiseConfig& noise) {
  if (noise.baseline_wander.amplitude_mv < 0 || noise.powerline.amplitude_mv < 0 ||
      noise.gaussian_std < 0)
    throw Error("E_CONFIG", "noise amplitudes must be non-negative");
}

void validate(const SynthConfig& cfg) {
  if (cfg.n_classes < 1) throw Error("E_CONFIG", "n_classes must be positive");
  if (cfg.n_leads < 1) throw Error("E_CONFIG", "n_leads must be positive");
  if (cfg.fs < 100.0) throw Error("E_CONFIG", "fs must be at least 100 Hz");
  double n = cfg.duration_s * cfg.fs;
  if (n < 1.0 || std::abs(n - std::round(n)) > 1e-9)
    throw Error("E_CONFIG", "duration_s * fs must be a positive integer");
  if (!(cfg.heart_rate_min_bpm > 0 && cfg.heart_rate_min_bpm <= cfg.heart_rate_max_bpm))
    throw Error("E_CONFIG", "heart rate range must be positive and ordered");
  if (static_cast<int>(cfg.wave_params.size()) != cfg.n_classes)
    throw Error("E_CONFIG", "wave_params must have one entry per class");
  validate(cfg.noise);
  const double rr_min = 60.0 / cfg.heart_rate_max_bpm;
  for (const auto& m : cfg.wave_params) {
    for (const auto& w : m)
      if (!(w.width_s > 0)) throw Error("E_CONFIG", "wave widths must be positive");
    auto [before, after] = template_extent(m);
    if (before + after > rr_min)
      throw Error("E_CONFIG", "beat template (" + std::to_string(before + after) +
                                  " s) exceeds the shortest beat interval (" +
                                  std::to_string(rr_min) + " s)");
  }
  for (int a = 0; a < cfg.n_classes; ++a)
    for (int b = a + 1; b < cfg.n_classes; ++b) {
      bool identical = true;
      for (int k = 0; k < kNumWaveKinds; ++k)
        identical = identical && same_params(cfg.wave_params[a][k], cfg.wave_params[b][k]);
      if (identical)
        throw Error("E_CONFIG", "classes " + std::to_string(a) + " and " + std::to_string(b) +
                                    " have identical wave parameters");
    }
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

EcgRecord generate_record(const SynthConfig& cfg, int class_id, std::uint64_t seed) {
  validate(cfg);
  if (class_id < 0 || class_id >= cfg.n_classes)
    throw Error("E_CONFIG", "class_id " + std::to_string(class_id) + " out of range [0, " +
                                std::to_string(cfg.n_classes) + ")");
  std::mt19937_64 rng(splitmix64(seed));
  const Eigen::Index n = cfg.n_samples();
  const double fs = cfg.fs;

  EcgRecord rec;
  {
    std::ostringstream id;
    id << "c" << class_id << "_" << std::hex << seed;
    rec.record_id = id.str();
  }
  rec.fs = static_cast<float>(fs);
  rec.labels.assign(cfg.n_classes, 0);
  rec.labels[class_id] = 1;

  int second = -1;
  if (cfg.co_occurrence > 0 && cfg.n_classes > 1) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < cfg.co_occurrence) {
      std::uniform_int_distribution<int> pick(0, cfg.n_classes - 2);
      second = pick(rng);
      if (second >= class_id) ++second;
      rec.labels[second] = 1;
    }
  }

  std::uniform_real_distribution<double> hr(cfg.heart_rate_min_bpm, cfg.heart_rate_max_bpm);
  const auto rr = std::max<Eigen::Index>(1, std::llround(60.0 / hr(rng) * fs));
  std::uniform_int_distribution<Eigen::Index> first(0, rr - 1);
  const Eigen::Index r0 = first(rng);

  double before = 0.0, after = 0.0;
  for (const auto& m : cfg.wave_params) {
    auto [b, a] = template_extent(m);
    before = std::max(before, b);
    after = std::max(after, a);
  }
  // beats whose template can touch [0, n)
  const auto lo = static_cast<Eigen::Index>(std::floor(-after * fs)) - 1;
  const auto hi = n + static_cast<Eigen::Index>(std::ceil(before * fs)) + 1;
  Eigen::Index k_begin = -((r0 - lo) / rr) - 1;

  Eigen::ArrayXd clean = Eigen::ArrayXd::Zero(n);
  Eigen::ArrayXd t = Eigen::ArrayXd::LinSpaced(n, 0.0, static_cast<double>(n - 1));
  int beat = 0;
  for (Eigen::Index k = k_begin;; ++k) {
    const Eigen::Index r = r0 + k * rr;
    if (r > hi) break;
    if (r < lo) continue;
    const int cls = (second >= 0 && (beat % 2 == 1)) ? second : class_id;
    ++beat;
    for (int w = 0; w < kNumWaveKinds; ++w) {
      const auto& p = cfg.wave_params[cls][w];
      const double centre = static_cast<double>(r) + p.offset_s * fs;
      const double sd = p.width_s * fs;
      clean += p.amplitude_mv * (-0.5 * ((t - centre) / sd).square()).exp();
      const auto onset = static_cast<Eigen::Index>(std::ceil(centre - 3.0 * sd));
      const auto offset = static_cast<Eigen::Index>(std::floor(centre + 3.0 * sd));
      const Eigen::Index on = std::max<Eigen::Index>(0, onset);
      const Eigen::Index off = std::min<Eigen::Index>(n - 1, offset);
      if (on > off) continue;
      const Eigen::Index pk = std::clamp<Eigen::Index>(std::llround(centre), on, off);
      rec.annotations.push_back({static_cast<WaveKind>(w), static_cast<std::uint32_t>(on),
                                 static_cast<std::uint32_t>(pk),
                                 static_cast<std::uint32_t>(off)});
    }
  }
  std::stable_sort(rec.annotations.begin(), rec.annotations.end(),
                   [](const WaveAnnotation& a, const WaveAnnotation& b) {
                     return a.onset < b.onset;
                   });

  rec.signal.resize(cfg.n_leads, n);
  for (int l = 0; l < cfg.n_leads; ++l) {
    const double gain = 1.0 - 0.07 * l;
    rec.signal.row(l) = (gain * clean).cast<float>().matrix().transpose();
  }
  if (!cfg.noise.is_zero()) rec = add_noise(rec, cfg.noise, seed ^ 0xA5A5A5A5DEADBEEFull);
  return rec;
}

EcgRecord add_noise(const EcgRecord& x, const NoiseConfig& noise, std::uint64_t seed) {
  validate(noise);
  if (!x.signal.allFinite()) throw Error("E_RECORD", x.record_id + ": non-finite sample");
  EcgRecord out = x;
  if (noise.is_zero()) return out;
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Eigen::Index n = x.n_samples();
  const double fs = x.fs;
  for (Eigen::Index l = 0; l < x.n_leads(); ++l) {
    const double ph_bw = phase(rng);
    const double ph_pl = phase(rng);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / fs;
      double v = x.signal(l, i);
      v += noise.baseline_wander.amplitude_mv *
           std::sin(2.0 * std::numbers::pi * noise.baseline_wander.frequency_hz * t + ph_bw);
      v += noise.powerline.amplitude_mv *
           std::sin(2.0 * std::numbers::pi * noise.powerline.frequency_hz * t + ph_pl);
      if (noise.gaussian_std > 0) v += noise.gaussian_std * gauss(rng);
      out.signal(l, i) = static_cast<float>(v);
    }
  }
  return out;
}

std::vector<EcgRecord> generate_dataset(const SynthConfig& cfg, std::size_t n_records,
                                        std::uint64_t seed, Split split) {
  validate(cfg);
  const std::uint64_t split_seed = splitmix64(seed * 4 + static_cast<std::uint64_t>(split));
  std::vector<EcgRecord> out(n_records);
  parallel_for(n_records, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i)
      out[i] = generate_record(cfg, static_cast<int>(i % cfg.n_classes), split_seed ^ i);
  });
  return out;
}

EcgRecord normalize_record(const EcgRecord& r) {
  EcgRecord out = r;
  const Eigen::ArrayXXd v = r.signal.cast<double>().array();
  const double mean = v.mean();
  const double var = (v - mean).square().mean();
  const double sd = std::sqrt(var);
  Eigen::ArrayXXd z = v - mean;
  if (sd > 0) z /= sd;
  out.signal = z.cast<float>().matrix();
  return out;
}

std::vector<EcgRecord> normalize_records(const std::vector<EcgRecord>& rs) {
  std::vector<EcgRecord> out;
  out.reserve(rs.size());
  for (const auto& r : rs) out.push_back(normalize_record(r));
  return out;
}

std::vector<std::uint8_t> encode_records(const std::vector<EcgRecord>& records) {
  for (std::size_t i = 1; i < records.size(); ++i)
    if (records[i].n_leads() != records[0].n_leads() || records[i].fs != records[0].fs)
      throw Error("E_RECORD", "records in one container must share n_leads and fs");
  ByteWriter w;
  w.str(std::string_view(kSignalMagic, 8));
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    validate_record(r);
    ByteWriter p;
    p.u32(static_cast<std::uint32_t>(r.record_id.size()));
    p.str(r.record_id);
    p.u32(static_cast<std::uint32_t>(r.n_leads()));
    p.u32(static_cast<std::uint32_t>(r.n_samples()));
    p.f32(r.fs);
    p.u32(static_cast<std::uint32_t>(r.labels.size()));
    for (auto l : r.labels) p.u8(l);
    p.u32(static_cast<std::uint32_t>(r.annotations.size()));
    for (const auto& a : r.annotations) {
      p.u8(static_cast<std::uint8_t>(a.kind));
      p.u32(a.onset);
      p.u32(a.peak);
      p.u32(a.offset);
    }
    for (Eigen::Index l = 0; l < r.n_leads(); ++l)
      for (Eigen::Index i = 0; i < r.n_samples(); ++i) p.f32(r.signal(l, i));
    w.bytes(p.buffer());
    w.u32(crc32(p.buffer()));
  }
  return std::move(w.buffer());
}

std::vector<EcgRecord> decode_records(std::span<const std::uint8_t> bytes) {
  ByteReader rd(bytes);
  if (bytes.size() < 8 || rd.str(8) != std::string_view(kSignalMagic, 8))
    throw Error("E_FORMAT", "not a CPRSIG01 container (unknown magic or version)");
  const std::uint32_t count = rd.u32();
  std::vector<EcgRecord> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = rd.pos();
    EcgRecord r;
    r.record_id = rd.str(rd.u32());
    const std::uint32_t leads = rd.u32();
    const std::uint32_t samples = rd.u32();
    r.fs = rd.f32();
    r.labels.resize(rd.u32());
    for (auto& l : r.labels) l = rd.u8();
    const std::uint32_t n_ann = rd.u32();
    if (std::uint64_t(n_ann) * 13 > rd.remaining())
      throw Error("E_TRUNCATED", "annotation table exceeds file size");
    r.annotations.resize(n_ann);
    for (auto& a : r.annotations) {
      a.kind = static_cast<WaveKind>(rd.u8());
      a.onset = rd.u32();
      a.peak = rd.u32();
      a.offset = rd.u32();
    }
    if (std::uint64_t(leads) * samples * 4 > rd.remaining())
      throw Error("E_TRUNCATED", "signal payload exceeds file size");
    r.signal.resize(leads, samples);
    for (std::uint32_t l = 0; l < leads; ++l)
      for (std::uint32_t s = 0; s < samples; ++s) r.signal(l, s) = rd.f32();
    const auto payload = bytes.subspan(start, rd.pos() - start);
    const std::uint32_t stored = rd.u32();
    if (stored != crc32(payload))
      throw Error("E_CHECKSUM", "CRC32 mismatch in record " + std::to_string(i));
    validate_record(r);
    out.push_back(std::move(r));
  }
  if (rd.remaining() != 0) throw Error("E_FORMAT", "trailing bytes after last record");
  return out;
}

void write_records(const std::string& path, const std::vector<EcgRecord>& records) {
  write_file_atomic(path, encode_records(records));
}

std::vector<EcgRecord> read_records(const std::string& path) {
  return decode_records(read_file(path));
}

std::string records_csv(const EcgRecord& r) {
  std::ostringstream os;
  os.precision(9);
  for (Eigen::Index l = 0; l < r.n_leads(); ++l) os << (l ? "," : "") << "lead_" << l;
  os << "\n";
  for (Eigen::Index i = 0; i < r.n_samples(); ++i) {
    for (Eigen::Index l = 0; l < r.n_leads(); ++l) os << (l ? "," : "") << r.signal(l, i);
    os << "\n";
  }
  return os.str();
}

}  // namespace cpr

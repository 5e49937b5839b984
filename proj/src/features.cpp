#include "contactsense/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "contactsense/error.hpp"
#include "contactsense/log.hpp"
#include "contactsense/spectral.hpp"

namespace contactsense {

namespace {
constexpr double kMelFsp = 200.0 / 3.0;
constexpr double kMinLogHz = 1000.0;
constexpr double kMinLogMel = kMinLogHz / kMelFsp;
const double kLogStep = std::log(6.4) / 27.0;
}  // namespace

double hz_to_mel(double hz) {
  if (hz < kMinLogHz) return hz / kMelFsp;
  return kMinLogMel + std::log(hz / kMinLogHz) / kLogStep;
}

double mel_to_hz(double mel) {
  if (mel < kMinLogMel) return mel * kMelFsp;
  return kMinLogHz * std::exp(kLogStep * (mel - kMinLogMel));
}

namespace {
std::vector<double> mel_edges(int n_mels, double fmin, double fmax) {
  const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
  std::vector<double> hz(static_cast<std::size_t>(n_mels + 2));
  for (int i = 0; i < n_mels + 2; ++i) hz[static_cast<std::size_t>(i)] = mel_to_hz(lo + (hi - lo) * i / (n_mels + 1));
  return hz;
}
}  // namespace

std::vector<double> mel_center_frequencies(int n_mels, double fmin, double fmax) {
  auto edges = mel_edges(n_mels, fmin, fmax);
  return std::vector<double>(edges.begin() + 1, edges.end() - 1);
}

Eigen::MatrixXd mel_filterbank(int sample_rate, int n_fft, int n_mels, double fmin, double fmax) {
  const int bins = n_fft / 2 + 1;
  const auto edges = mel_edges(n_mels, fmin, fmax);
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(n_mels, bins);
  for (int m = 0; m < n_mels; ++m) {
    const double f0 = edges[static_cast<std::size_t>(m)], f1 = edges[static_cast<std::size_t>(m + 1)],
                 f2 = edges[static_cast<std::size_t>(m + 2)];
    const double norm = 2.0 / (f2 - f0);
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n_fft;
      const double w = std::max(0.0, std::min((f - f0) / (f1 - f0), (f2 - f) / (f2 - f1)));
      fb(m, k) = w * norm;
    }
  }
  return fb;
}

int mel_frame_count(std::size_t n_samples) {
  return static_cast<int>((n_samples + MelConfig::kHop - 1) / MelConfig::kHop);
}

namespace {

void require_mel_rate(const Waveform& w) {
  if (w.sample_rate() != MelConfig::kSampleRate) {
    throw ParameterError("mel features expect " + std::to_string(MelConfig::kSampleRate) + " Hz input, got " +
                         std::to_string(w.sample_rate()) + " Hz");
  }
  if (w.empty()) throw ParameterError("empty input");
}

const Eigen::MatrixXd& default_filterbank() {
  static const Eigen::MatrixXd fb = mel_filterbank(MelConfig::kSampleRate, MelConfig::kFft, MelConfig::kMels,
                                                   MelConfig::kFmin, MelConfig::kFmax);
  return fb;
}

}  // namespace

Eigen::MatrixXd power_frames(const Waveform& w) {
  require_mel_rate(w);
  const int frames = mel_frame_count(w.size());
  const auto win = hann_window(MelConfig::kWindow);
  auto& fft = fft_for(MelConfig::kFft);
  const int bins = MelConfig::kFft / 2 + 1;
  const auto& x = w.samples();
  const auto n = static_cast<std::ptrdiff_t>(x.size());

  Eigen::MatrixXd p(bins, frames);
  std::vector<double> buf(MelConfig::kFft, 0.0);
  std::vector<std::complex<double>> spec(static_cast<std::size_t>(bins));
  for (int f = 0; f < frames; ++f) {
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(f) * MelConfig::kHop - MelConfig::kWindow / 2;
    std::fill(buf.begin(), buf.end(), 0.0);
    for (int i = 0; i < MelConfig::kWindow; ++i) {
      const std::ptrdiff_t idx = start + i;
      if (idx >= 0 && idx < n) buf[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(idx)] * win[static_cast<std::size_t>(i)];
    }
    fft.forward(buf, spec);
    for (int k = 0; k < bins; ++k) p(k, f) = std::norm(spec[static_cast<std::size_t>(k)]);
  }
  return p;
}

MelSpectrogram mel_spectrogram(const Waveform& w) {
  require_mel_rate(w);
  const int frames = mel_frame_count(w.size());
  if (frames > MelConfig::kFrames) {
    throw ParameterError("clip exceeds frame budget: " + std::to_string(frames) + " frames > " +
                         std::to_string(MelConfig::kFrames));
  }
  const Eigen::MatrixXd power = power_frames(w);
  const Eigen::MatrixXd mel = default_filterbank() * power;

  MelSpectrogram out;
  out.values = Eigen::MatrixXd::Constant(MelConfig::kMels, MelConfig::kFrames, MelConfig::kDbFloor);
  out.pad_frames = MelConfig::kFrames - frames;
  const double floor_power = std::pow(10.0, MelConfig::kDbFloor / 10.0);
  for (int f = 0; f < frames; ++f) {
    for (int m = 0; m < MelConfig::kMels; ++m) {
      const double v = mel(m, f);
      out.values(m, f) = v <= floor_power ? MelConfig::kDbFloor : 10.0 * std::log10(v);
    }
  }
  return out;
}

double rms(const Waveform& w) {
  if (w.empty()) throw ParameterError("empty input");
  double acc = 0.0;
  for (double s : w.samples()) acc += s * s;
  return std::sqrt(acc / static_cast<double>(w.size()));
}

double zero_crossing_rate(const Waveform& w) {
  if (w.empty()) throw ParameterError("empty input");
  int prev = 0;
  std::size_t crossings = 0;
  for (double s : w.samples()) {
    const int sign = s > 0.0 ? 1 : (s < 0.0 ? -1 : 0);
    if (sign == 0) continue;  // zeros inherit the previous sign
    if (prev != 0 && sign != prev) ++crossings;
    prev = sign;
  }
  return static_cast<double>(crossings) / w.duration_seconds();
}

std::array<double, MelConfig::kMfcc> mfcc(const Waveform& w) {
  const MelSpectrogram mel = mel_spectrogram(w);
  const int frames = mel.real_frames();
  Eigen::VectorXd mean = mel.values.leftCols(frames).rowwise().mean();
  std::array<double, MelConfig::kMfcc> c{};
  const int n = MelConfig::kMels;
  for (int k = 0; k < MelConfig::kMfcc; ++k) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += mean(i) * std::cos(M_PI * k * (2.0 * i + 1.0) / (2.0 * n));
    c[static_cast<std::size_t>(k)] = acc * (k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n));
  }
  return c;
}

double spectral_centroid(const Waveform& w) {
  const Eigen::MatrixXd p = power_frames(w);
  const Eigen::VectorXd mean = p.rowwise().mean();
  double num = 0.0, den = 0.0;
  for (Eigen::Index k = 0; k < mean.size(); ++k) {
    const double f = static_cast<double>(k) * w.sample_rate() / MelConfig::kFft;
    num += f * mean(k);
    den += mean(k);
  }
  return den > 0.0 ? num / den : 0.0;
}

FeatureVector extract_features(const Waveform& w) {
  FeatureVector v;
  v.rms = rms(w);
  v.zcr = zero_crossing_rate(w);
  v.mfcc = mfcc(w);
  v.spectral_centroid = spectral_centroid(w);
  return v;
}

std::string feature_csv_header() {
  std::string h = "trial_id,segment_id,window_start_s,label,rms,zcr";
  for (int i = 0; i < MelConfig::kMfcc; ++i) h += ",mfcc_" + std::to_string(i);
  return h + ",centroid";
}

std::string to_csv_line(const FeatureRow& row) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << row.trial_id << ',' << row.segment_id << ',' << row.window_start_s << ',' << row.label << ','
     << row.features.rms << ',' << row.features.zcr;
  for (double c : row.features.mfcc) os << ',' << c;
  os << ',' << row.features.spectral_centroid;
  return os.str();
}

void write_feature_csv(const std::filesystem::path& path, const std::vector<FeatureRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << feature_csv_header() << '\n';
  for (const auto& r : rows) out << to_csv_line(r) << '\n';
}

AugmentParams AugmentParams::identity() {
  AugmentParams p;
  const double inf = std::numeric_limits<double>::infinity();
  p.pitch_semitones = {0.0, 0.0};
  p.gain_db = {0.0, 0.0};
  p.noise_snr_db = {inf, inf};
  p.motor_snr_db = {inf, inf};
  p.motor_probability = 0.0;
  return p;
}

void AugmentParams::validate() const {
  for (const Range* r : {&pitch_semitones, &gain_db, &noise_snr_db, &motor_snr_db}) {
    if (!(r->lo <= r->hi)) throw ParameterError("augmentation range must satisfy lo <= hi");
  }
  if (!(motor_probability >= 0.0 && motor_probability <= 1.0)) {
    throw ParameterError("motor_probability must lie in [0, 1]");
  }
}

Waveform pitch_shift(const Waveform& w, double semitones) {
  if (semitones == 0.0 || w.empty()) return w;
  const double factor = std::pow(2.0, semitones / 12.0);
  // Reading the input `factor` times faster raises the pitch; the result is
  // cut or zero-extended back to the original length.
  const auto shifted_len = static_cast<std::size_t>(std::llround(static_cast<double>(w.size()) / factor));
  std::vector<double> y = resample_ratio(w.samples(), 1.0 / factor, std::max<std::size_t>(shifted_len, 1));
  y.resize(w.size(), 0.0);
  return Waveform(std::move(y), w.sample_rate());
}

namespace {
double signal_power(const std::vector<double>& x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return x.empty() ? 0.0 : acc / static_cast<double>(x.size());
}
}  // namespace

Waveform augment(const Waveform& w, const AugmentParams& p, const std::vector<Waveform>& motor_bank, Rng& rng) {
  p.validate();
  const double semitones = rng.uniform(p.pitch_semitones.lo, p.pitch_semitones.hi);
  const double gain_db = rng.uniform(p.gain_db.lo, p.gain_db.hi);
  const double noise_snr = rng.uniform(p.noise_snr_db.lo, p.noise_snr_db.hi);
  const bool motor = rng.uniform() < p.motor_probability;
  const double motor_snr = rng.uniform(p.motor_snr_db.lo, p.motor_snr_db.hi);
  const std::uint64_t motor_pick = rng.next_u64();
  const std::uint64_t motor_offset = rng.next_u64();
  const std::uint64_t noise_seed = rng.next_u64();

  std::vector<double> y = pitch_shift(w, semitones).samples();
  if (gain_db != 0.0) {
    const double g = std::pow(10.0, gain_db / 20.0);
    for (double& v : y) v *= g;
  }
  const double power = signal_power(y);

  if (std::isfinite(noise_snr) && power > 0.0) {
    const double sigma = std::sqrt(power / std::pow(10.0, noise_snr / 10.0));
    Rng noise(noise_seed);
    for (double& v : y) v += sigma * noise.normal();
  }

  if (motor && std::isfinite(motor_snr)) {
    if (motor_bank.empty()) {
      log_info("augment: motor-noise injection drawn but the noise bank is empty; skipping");
    } else if (power > 0.0) {
      const Waveform& clip = motor_bank[motor_pick % motor_bank.size()];
      const double clip_power = signal_power(clip.samples());
      if (clip_power > 0.0 && !clip.empty()) {
        const double scale = std::sqrt(power / std::pow(10.0, motor_snr / 10.0) / clip_power);
        const std::size_t off = motor_offset % clip.size();
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += scale * clip.samples()[(off + i) % clip.size()];
      }
    }
  }
  return Waveform(std::move(y), w.sample_rate());
}

}  // namespace contactsense

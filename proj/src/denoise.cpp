#include "contactsense/denoise.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "contactsense/error.hpp"
#include "contactsense/random.hpp"

namespace contactsense {

void GateParams::validate() const {
  if (!(prop_decrease >= 0.0 && prop_decrease <= 1.0)) throw ParameterError("prop_decrease must lie in [0, 1]");
  if (mask_smooth_freq_bins < 0 || mask_smooth_time_frames < 0) {
    throw ParameterError("mask smoothing sizes must be non-negative");
  }
  if (!(transition_db > 0.0)) throw ParameterError("transition_db must be positive");
}

namespace {

double to_db(double magnitude) {
  return std::max(kGateDbFloor, 20.0 * std::log10(std::max(magnitude, 1e-300)));
}

Eigen::MatrixXd db_of(const Spectrogram& s) {
  Eigen::MatrixXd d(s.rows(), s.cols());
  for (Eigen::Index f = 0; f < s.cols(); ++f)
    for (Eigen::Index k = 0; k < s.rows(); ++k) d(k, f) = to_db(std::abs(s(k, f)));
  return d;
}

// Centred box mean over the cells that exist. A size of 0 or 1 disables
// smoothing along that axis.
Eigen::MatrixXd box_mean(const Eigen::MatrixXd& m, int freq, int time) {
  if (freq <= 1 && time <= 1) return m;
  const int f_lo = freq <= 1 ? 0 : (freq - 1) / 2, f_hi = freq <= 1 ? 0 : freq / 2;
  const int t_lo = time <= 1 ? 0 : (time - 1) / 2, t_hi = time <= 1 ? 0 : time / 2;
  const auto rows = m.rows(), cols = m.cols();
  Eigen::MatrixXd out(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    const Eigen::Index c0 = std::max<Eigen::Index>(0, c - t_lo), c1 = std::min<Eigen::Index>(cols - 1, c + t_hi);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Eigen::Index r0 = std::max<Eigen::Index>(0, r - f_lo), r1 = std::min<Eigen::Index>(rows - 1, r + f_hi);
      out(r, c) = m.block(r0, c0, r1 - r0 + 1, c1 - c0 + 1).mean();
    }
  }
  return out;
}

}  // namespace

NoiseProfile build_noise_profile(const Waveform& reference, const StftParams& sp) {
  sp.validate();
  const double min_samples = kMinReferenceSeconds * reference.sample_rate();
  if (static_cast<double>(reference.size()) < min_samples) {
    std::ostringstream msg;
    msg << "noise reference too short: " << reference.duration_seconds() << " s given, minimum is "
        << kMinReferenceSeconds << " s";
    throw ParameterError(msg.str());
  }
  const Spectrogram s = stft(reference.samples(), sp);
  const Eigen::MatrixXd d = db_of(s);

  // Only frames whose window lies entirely inside the reference; padded
  // edge frames would bias the statistics low.
  std::vector<Eigen::Index> frames;
  const auto n = static_cast<Eigen::Index>(reference.size());
  for (Eigen::Index f = 0; f < d.cols(); ++f) {
    const Eigen::Index lo = f * sp.hop - sp.n_fft / 2;
    if (lo >= 0 && lo + sp.n_fft <= n) frames.push_back(f);
  }
  if (frames.empty()) throw ParameterError("noise reference shorter than one analysis frame");

  NoiseProfile p;
  p.stft = sp;
  p.sample_rate = reference.sample_rate();
  p.mean_db.assign(static_cast<std::size_t>(sp.bins()), 0.0);
  p.std_db.assign(static_cast<std::size_t>(sp.bins()), 0.0);
  const auto count = static_cast<double>(frames.size());
  for (int k = 0; k < sp.bins(); ++k) {
    double sum = 0.0;
    for (auto f : frames) sum += d(k, f);
    const double mean = sum / count;
    double var = 0.0;
    for (auto f : frames) var += (d(k, f) - mean) * (d(k, f) - mean);
    p.mean_db[static_cast<std::size_t>(k)] = mean;
    p.std_db[static_cast<std::size_t>(k)] = std::sqrt(var / count);
  }
  return p;
}

Eigen::MatrixXd gate_mask(const Spectrogram& s, const NoiseProfile& profile, const GateParams& gp) {
  gp.validate();
  if (s.rows() != static_cast<Eigen::Index>(profile.mean_db.size())) {
    throw ParameterError("spectrogram and noise profile disagree on bin count");
  }
  // The level is smoothed before the soft decision so that isolated noise
  // peaks do not open the gate and a tone's shoulders are not gated away.
  const Eigen::MatrixXd level = box_mean(db_of(s), gp.mask_smooth_freq_bins, gp.mask_smooth_time_frames);
  const double scale = gp.transition_db / (2.0 * std::log(9.0));
  const double floor_gain = 1.0 - gp.prop_decrease;
  Eigen::MatrixXd mask(s.rows(), s.cols());
  for (Eigen::Index k = 0; k < s.rows(); ++k) {
    const auto kk = static_cast<std::size_t>(k);
    const double thresh = profile.mean_db[kk] + gp.n_std_thresh * profile.std_db[kk];
    for (Eigen::Index f = 0; f < s.cols(); ++f) {
      const double open = 1.0 / (1.0 + std::exp(-(level(k, f) - thresh) / scale));
      mask(k, f) = std::clamp(floor_gain + gp.prop_decrease * open, floor_gain, 1.0);
    }
  }
  return mask;
}

Waveform spectral_gate(const Waveform& w, const NoiseProfile& profile, const GateParams& gp) {
  if (w.sample_rate() != profile.sample_rate) {
    throw ParameterError("sample rate mismatch: waveform " + std::to_string(w.sample_rate()) + " Hz, profile " +
                         std::to_string(profile.sample_rate) + " Hz");
  }
  if (w.empty()) return w;
  Spectrogram s = stft(w.samples(), profile.stft);
  const Eigen::MatrixXd mask = gate_mask(s, profile, gp);
  s = s.cwiseProduct(mask.cast<std::complex<double>>());
  return Waveform(istft(s, profile.stft, w.size()), w.sample_rate());
}

std::string to_json(const NoiseProfile& p) {
  nlohmann::ordered_json doc;
  doc["n_fft"] = p.stft.n_fft;
  doc["hop"] = p.stft.hop;
  doc["sample_rate"] = p.sample_rate;
  doc["mean_db"] = p.mean_db;
  doc["std_db"] = p.std_db;
  return doc.dump() + "\n";
}

NoiseProfile noise_profile_from_json(const std::string& text) {
  NoiseProfile p;
  try {
    const auto doc = nlohmann::json::parse(text);
    p.stft.n_fft = doc.at("n_fft").get<int>();
    p.stft.hop = doc.at("hop").get<int>();
    p.sample_rate = doc.at("sample_rate").get<int>();
    p.mean_db = doc.at("mean_db").get<std::vector<double>>();
    p.std_db = doc.at("std_db").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed noise profile: ") + e.what());
  }
  p.stft.validate();
  const auto bins = static_cast<std::size_t>(p.stft.bins());
  if (p.mean_db.size() != bins || p.std_db.size() != bins) {
    throw FormatError("noise profile bin count does not match n_fft");
  }
  for (double s : p.std_db) {
    if (!(s >= 0.0)) throw FormatError("noise profile std_db must be non-negative");
  }
  return p;
}

NoiseProfile load_noise_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open noise profile " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return noise_profile_from_json(ss.str());
}

void save_noise_profile(const std::filesystem::path& path, const NoiseProfile& p) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(p);
}

Waveform synthetic_reference(std::string_view embodiment, double seconds, int sample_rate, std::uint64_t seed) {
  Rng rng(seed);
  const auto n = static_cast<std::size_t>(std::llround(seconds * sample_rate));
  std::vector<double> x(n);
  const bool robot = embodiment == "robot";
  const double hiss = robot ? 0.004 : 0.002;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate;
    double v = hiss * rng.normal();
    if (robot) {
      // motor whine harmonics and generator rumble
      v += 0.010 * std::sin(2.0 * M_PI * 120.0 * t) + 0.006 * std::sin(2.0 * M_PI * 240.0 * t + 0.3) +
           0.004 * std::sin(2.0 * M_PI * 360.0 * t + 1.1) + 0.008 * std::sin(2.0 * M_PI * 31.0 * t);
    }
    x[i] = v;
  }
  return Waveform(std::move(x), sample_rate);
}

}  // namespace contactsense

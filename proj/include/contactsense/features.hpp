#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "contactsense/audio.hpp"
#include "contactsense/random.hpp"

namespace contactsense {

// Mel front-end constants. Changing any of these changes the dataset
// fingerprint.
struct MelConfig {
  static constexpr int kSampleRate = 16000;
  static constexpr int kMels = 128;
  static constexpr int kFrames = 1024;
  static constexpr int kWindow = 400;  // 25 ms
  static constexpr int kHop = 160;     // 10 ms
  static constexpr int kFft = 512;
  static constexpr double kFmin = 0.0;
  static constexpr double kFmax = 8000.0;
  static constexpr double kDbFloor = -100.0;
  static constexpr int kMfcc = 13;
};

struct MelSpectrogram {
  Eigen::MatrixXd values;  // kMels x kFrames, dB
  int sample_rate = MelConfig::kSampleRate;
  int pad_frames = 0;

  int real_frames() const { return MelConfig::kFrames - pad_frames; }
};

// Slaney-style mel scale (linear below 1 kHz, logarithmic above).
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// n_mels x (n_fft/2 + 1) triangular filters with area normalisation.
Eigen::MatrixXd mel_filterbank(int sample_rate, int n_fft, int n_mels, double fmin, double fmax);

// Centre frequencies of the mel filters (Hz).
std::vector<double> mel_center_frequencies(int n_mels, double fmin, double fmax);

// Number of centred analysis frames for n samples: ceil(n / hop).
int mel_frame_count(std::size_t n_samples);

// Power spectra of the centred 25 ms frames: bins x frames.
Eigen::MatrixXd power_frames(const Waveform& w);

MelSpectrogram mel_spectrogram(const Waveform& w);

double rms(const Waveform& w);
double zero_crossing_rate(const Waveform& w);
std::array<double, MelConfig::kMfcc> mfcc(const Waveform& w);
double spectral_centroid(const Waveform& w);

struct FeatureVector {
  double rms = 0.0;
  double zcr = 0.0;
  std::array<double, MelConfig::kMfcc> mfcc{};
  double spectral_centroid = 0.0;
};

FeatureVector extract_features(const Waveform& w);

struct FeatureRow {
  std::string trial_id;
  std::string segment_id;
  double window_start_s = 0.0;
  std::string label;
  FeatureVector features;
};

std::string feature_csv_header();
std::string to_csv_line(const FeatureRow& row);
void write_feature_csv(const std::filesystem::path& path, const std::vector<FeatureRow>& rows);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AugmentParams {
  Range pitch_semitones{-2.0, 2.0};
  Range gain_db{-6.0, 6.0};
  // +inf disables the additive white noise step.
  Range noise_snr_db{20.0, 40.0};
  Range motor_snr_db{5.0, 20.0};
  double motor_probability = 0.5;
  std::vector<std::filesystem::path> motor_noise_bank;
  std::uint64_t seed = 0;

  static AugmentParams identity();
  void validate() const;
};

// Pitch shift by resample-then-truncate, gain, white noise and motor noise
// at drawn SNRs. Output has the input's length. All draws happen in a fixed
// order so a given RNG state always yields the same output. `motor_bank`
// holds the already-loaded clips at the waveform's rate.
Waveform augment(const Waveform& w, const AugmentParams& p, const std::vector<Waveform>& motor_bank, Rng& rng);

Waveform pitch_shift(const Waveform& w, double semitones);

}  // namespace contactsense

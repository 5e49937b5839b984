#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "contactsense/audio.hpp"
#include "contactsense/spectral.hpp"

namespace contactsense {

inline constexpr double kGateDbFloor = -100.0;

// Per-bin log-magnitude statistics of a contact-free reference recording.
struct NoiseProfile {
  StftParams stft;
  int sample_rate = 16000;
  std::vector<double> mean_db;
  std::vector<double> std_db;
};

struct GateParams {
  double n_std_thresh = 1.5;
  double prop_decrease = 1.0;
  int mask_smooth_freq_bins = 3;
  int mask_smooth_time_frames = 5;
  // dB span over which the soft decision rises from 0.1 to 0.9.
  double transition_db = 3.0;

  void validate() const;
};

inline constexpr double kMinReferenceSeconds = 0.5;

NoiseProfile build_noise_profile(const Waveform& reference, const StftParams& sp = {});

// Gain per (bin, frame) in [1 - prop_decrease, 1].
Eigen::MatrixXd gate_mask(const Spectrogram& s, const NoiseProfile& profile, const GateParams& gp);

Waveform spectral_gate(const Waveform& w, const NoiseProfile& profile, const GateParams& gp = {});

std::string to_json(const NoiseProfile& p);
NoiseProfile noise_profile_from_json(const std::string& text);
NoiseProfile load_noise_profile(const std::filesystem::path& path);
void save_noise_profile(const std::filesystem::path& path, const NoiseProfile& p);

// Contact-free reference recordings for the two embodiments: broadband hiss
// for the hand-held probe; hiss plus motor harmonics and generator rumble
// for the robot. Used to produce the shipped profiles and test fixtures.
Waveform synthetic_reference(std::string_view embodiment, double seconds, int sample_rate, std::uint64_t seed);

}  // namespace contactsense

#include <doctest.h>

#include <cmath>
#include <fstream>

#include "contactsense/error.hpp"
#include "contactsense/features.hpp"
#include "fixtures_audio.hpp"
#include "oracles.hpp"
#include "synth.hpp"

using namespace contactsense;

namespace {

constexpr int kRate = MelConfig::kSampleRate;

Waveform tone(double hz, double seconds, double amp = 0.5) {
  return Waveform(fixtures::tone_in_noise(hz, amp, 0.0, kRate, static_cast<std::size_t>(seconds * kRate), 1), kRate);
}

}  // namespace

TEST_CASE("mel output is always 128 x 1024 with the real frame count recorded") {
  for (double secs : {0.1, 0.8, 10.24}) {
    const auto mel = mel_spectrogram(tone(440.0, secs));
    CHECK(mel.values.rows() == 128);
    CHECK(mel.values.cols() == 1024);
    CHECK(mel.real_frames() == static_cast<int>(std::ceil(secs * kRate / 160.0 - 1e-9)));
    for (int f = mel.real_frames(); f < 1024; ++f) REQUIRE(mel.values.col(f).maxCoeff() == MelConfig::kDbFloor);
  }
  CHECK_THROWS_AS(mel_spectrogram(tone(440.0, 10.25)), ParameterError);
  CHECK_THROWS_AS(mel_spectrogram(Waveform(std::vector<double>(800, 0.1), 8000)), ParameterError);
}

TEST_CASE("a 1 kHz tone peaks in the filter centred nearest 1 kHz") {
  const auto centres = oracle::slaney_centres(128, 8000.0);
  std::size_t nearest = 0;
  for (std::size_t i = 0; i < centres.size(); ++i)
    if (std::abs(centres[i] - 1000.0) < std::abs(centres[nearest] - 1000.0)) nearest = i;
  const auto lib = mel_center_frequencies(128, 0.0, 8000.0);
  for (std::size_t i = 0; i < centres.size(); ++i) CHECK(lib[i] == doctest::Approx(centres[i]).epsilon(1e-12));

  const auto mel = mel_spectrogram(tone(1000.0, 0.8));
  Eigen::Index arg = 0;
  mel.values.leftCols(mel.real_frames()).rowwise().mean().maxCoeff(&arg);
  CHECK(static_cast<std::size_t>(arg) == nearest);
}

TEST_CASE("silence sits on the floor everywhere") {
  const auto mel = mel_spectrogram(Waveform(std::vector<double>(kRate, 0.0), kRate));
  CHECK(mel.values.minCoeff() == MelConfig::kDbFloor);
  CHECK(mel.values.maxCoeff() == MelConfig::kDbFloor);
  const auto c = mfcc(Waveform(std::vector<double>(kRate, 0.0), kRate));
  CHECK(c[0] == doctest::Approx(-100.0 * std::sqrt(128.0)));
  for (int k = 1; k < MelConfig::kMfcc; ++k) CHECK(std::abs(c[static_cast<std::size_t>(k)]) < 1e-9);
}

TEST_CASE("mel scale is linear below 1 kHz and logarithmic above") {
  CHECK(hz_to_mel(1000.0) == doctest::Approx(15.0));
  CHECK(hz_to_mel(500.0) == doctest::Approx(7.5));
  CHECK(hz_to_mel(6400.0) == doctest::Approx(42.0));
  for (double hz : {0.0, 120.0, 999.0, 1000.0, 3000.0, 8000.0}) CHECK(mel_to_hz(hz_to_mel(hz)) == doctest::Approx(hz));
  const auto fb = mel_filterbank(kRate, 512, 128, 0.0, 8000.0);
  CHECK(fb.minCoeff() >= 0.0);
  // area normalisation: each wide filter integrates to about one over frequency
  for (int m = 60; m < 127; ++m) CHECK(fb.row(m).sum() * kRate / 512.0 == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("scalar features match closed forms") {
  const auto w = tone(100.0, 1.0, 0.5);
  CHECK(rms(w) == doctest::Approx(0.5 / std::sqrt(2.0)).epsilon(1e-3));
  CHECK(zero_crossing_rate(w) == doctest::Approx(199.0).epsilon(0.01));
  CHECK(spectral_centroid(tone(2000.0, 1.0)) == doctest::Approx(2000.0).epsilon(0.02));
  const auto f = extract_features(w);
  CHECK(f.rms == rms(w));
  CHECK(f.mfcc == mfcc(w));
}

TEST_CASE("feature CSV lines carry full precision") {
  FeatureRow row;
  row.trial_id = "t";
  row.segment_id = "3";
  row.window_start_s = 0.1;
  row.label = "leaf";
  row.features.rms = 1.0 / 3.0;
  const auto line = to_csv_line(row);
  CHECK(line.rfind("t,3,0.10000000000000001,leaf,0.33333333333333331,0", 0) == 0);
  const auto header = feature_csv_header();
  CHECK(std::count(header.begin(), header.end(), ',') == std::count(line.begin(), line.end(), ','));
  synth::TempDir dir("csv");
  write_feature_csv(dir / "f.csv", {row, row});
  std::ifstream in(dir / "f.csv");
  std::string first;
  std::getline(in, first);
  CHECK(first == header);
}

TEST_CASE("augmentation is deterministic and each step does what it says") {
  const auto w = tone(500.0, 1.0, 0.2);
  Rng a(1), b(1);
  AugmentParams p;
  p.motor_probability = 1.0;
  const std::vector<Waveform> bank = {Waveform(fixtures::white_noise(0.1, kRate, 9), kRate)};
  CHECK(augment(w, p, bank, a).samples() == augment(w, p, bank, b).samples());

  Rng r(2);
  CHECK(augment(w, AugmentParams::identity(), {}, r).samples() == w.samples());

  auto gain = AugmentParams::identity();
  gain.gain_db = {6.0, 6.0};
  const auto g = augment(w, gain, {}, r);
  for (std::size_t i = 0; i < w.size(); i += 97) CHECK(g.samples()[i] == doctest::Approx(w.samples()[i] * 1.9952623149688795));

  auto noisy = AugmentParams::identity();
  noisy.noise_snr_db = {20.0, 20.0};
  const auto n = augment(w, noisy, {}, r);
  double sig = 0.0, err = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    sig += w.samples()[i] * w.samples()[i];
    err += (n.samples()[i] - w.samples()[i]) * (n.samples()[i] - w.samples()[i]);
  }
  CHECK(10.0 * std::log10(sig / err) == doctest::Approx(20.0).epsilon(0.03));

  // motor noise drawn with an empty bank is skipped, not an error
  auto motor = AugmentParams::identity();
  motor.motor_probability = 1.0;
  motor.motor_snr_db = {10.0, 10.0};
  CHECK(augment(w, motor, {}, r).samples() == w.samples());
  CHECK(augment(w, motor, bank, r).samples() != w.samples());

  p.gain_db = {3.0, -3.0};
  CHECK_THROWS_AS(augment(w, p, bank, r), ParameterError);
}

TEST_CASE("pitch shift by an octave doubles the frequency and keeps the length") {
  const auto y = pitch_shift(tone(1000.0, 1.0), 12.0);
  CHECK(y.size() == static_cast<std::size_t>(kRate));
  std::vector<double> head(y.samples().begin(), y.samples().begin() + kRate / 2);
  CHECK(oracle::band_energy(head, kRate, 1990.0, 2010.0) > 100.0 * oracle::band_energy(head, kRate, 990.0, 1010.0));
  // the second half is zero padding after the faster read
  CHECK(std::abs(y.samples().back()) < 1e-3);
}

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "contactsense/denoise.hpp"
#include "contactsense/error.hpp"
#include "fixtures_audio.hpp"
#include "oracles.hpp"
#include "synth.hpp"

using namespace contactsense;

namespace {

constexpr int kRate = 16000;

NoiseProfile white_profile(double sigma, std::uint64_t seed = 100) {
  return build_noise_profile(Waveform(fixtures::white_noise(sigma, 2 * kRate, seed), kRate));
}

double energy(const std::vector<double>& x) { return std::inner_product(x.begin(), x.end(), x.begin(), 0.0); }

}  // namespace

TEST_CASE("profile of white noise has a flat mean and Rayleigh spread") {
  const auto p = white_profile(0.02);
  CHECK(p.mean_db.size() == 257);
  CHECK(p.sample_rate == kRate);
  // |X| of complex Gaussian noise is Rayleigh; its dB spread is about 5.57 dB
  double mean_std = 0.0;
  for (int k = 20; k < 237; ++k) mean_std += p.std_db[static_cast<std::size_t>(k)] / 217.0;
  CHECK(mean_std == doctest::Approx(5.57).epsilon(0.05));
  // E[10 log10 |X|^2] for |X|^2 ~ sigma^2 sum(w^2) Exp(1) is 10 log10(sigma^2 sum(w^2)) - 10 gamma / ln 10
  const double sum_w2 = 512.0 * 3.0 / 8.0;
  const double expected = 10.0 * std::log10(0.02 * 0.02 * sum_w2) - 10.0 * 0.5772156649 / std::log(10.0);
  double avg = 0.0;
  for (int k = 20; k < 237; ++k) avg += p.mean_db[static_cast<std::size_t>(k)] / 217.0;
  CHECK(avg == doctest::Approx(expected).epsilon(0.01));
  for (int k = 20; k < 237; ++k) CHECK(std::abs(p.mean_db[static_cast<std::size_t>(k)] - expected) < 1.6);
}

TEST_CASE("short references are rejected with the minimum length") {
  try {
    build_noise_profile(Waveform(fixtures::white_noise(0.1, kRate / 4, 1), kRate));
    FAIL("expected ParameterError");
  } catch (const ParameterError& e) {
    CHECK(std::string(e.what()).find("0.5") != std::string::npos);
  }
}

TEST_CASE("zero decrease is the identity") {
  GateParams gp;
  gp.prop_decrease = 0.0;
  const auto x = fixtures::tone_in_noise(440.0, 0.3, 0.05, kRate, kRate, 3);
  const auto y = spectral_gate(Waveform(x, kRate), white_profile(0.05), gp);
  CHECK(oracle::rel_l2(y.samples(), x) < 1e-6);
}

TEST_CASE("tone in noise keeps the tone and drops the noise") {
  const std::size_t n = 2 * kRate;
  const auto x = fixtures::tone_in_noise(1000.0, 0.1, 0.02, kRate, n, 7);
  const auto y = spectral_gate(Waveform(x, kRate), white_profile(0.02)).samples();
  const double band_in = oracle::band_energy(x, kRate, 950.0, 1050.0);
  const double band_out = oracle::band_energy(y, kRate, 950.0, 1050.0);
  CHECK(std::abs(10.0 * std::log10(band_out / band_in)) < 1.0);
  // everything outside 800-1200 Hz, via Parseval on the full spectrum
  const double wide_in = oracle::band_energy(x, kRate, 800.0, 1200.0);
  const double wide_out = oracle::band_energy(y, kRate, 800.0, 1200.0);
  const auto rest = [&](const std::vector<double>& s, double wide) {
    // one-sided DFT energy: bins 1..n/2-1 count twice, so halve the total
    return energy(s) * static_cast<double>(n) / 2.0 - wide;
  };
  CHECK(10.0 * std::log10(rest(x, wide_in) / rest(y, wide_out)) >= 10.0);
}

TEST_CASE("mask range and per-bin attenuation hold on random inputs") {
  Rng rng(41);
  for (int rep = 0; rep < 100; ++rep) {
    GateParams gp;
    gp.prop_decrease = rng.uniform();
    gp.n_std_thresh = rng.uniform(0.0, 3.0);
    gp.mask_smooth_freq_bins = static_cast<int>(rng.below(6));
    gp.mask_smooth_time_frames = static_cast<int>(rng.below(8));
    gp.transition_db = rng.uniform(0.5, 10.0);
    const auto profile = white_profile(rng.uniform(0.001, 0.1), rep);
    const auto x = fixtures::tone_in_noise(rng.uniform(50.0, 7000.0), rng.uniform(0.0, 0.5), rng.uniform(0.001, 0.1),
                                           kRate, 2000 + rng.below(6000), 1000 + static_cast<std::uint64_t>(rep));
    const Spectrogram s = stft(x, profile.stft);
    const auto mask = gate_mask(s, profile, gp);
    const double floor_gain = 1.0 - gp.prop_decrease;
    CHECK(mask.minCoeff() >= floor_gain);
    CHECK(mask.maxCoeff() <= 1.0);
    for (Eigen::Index f = 0; f < s.cols(); ++f)
      for (Eigen::Index k = 0; k < s.rows(); ++k) {
        const double before = std::abs(s(k, f)), after = std::abs(s(k, f) * mask(k, f));
        REQUIRE(after <= before);
        REQUIRE(after >= floor_gain * before - 1e-15);
      }
    CHECK(spectral_gate(Waveform(x, kRate), profile, gp).size() == x.size());
  }
}

TEST_CASE("gate validates its inputs") {
  const auto profile = white_profile(0.01);
  GateParams gp;
  gp.prop_decrease = 1.5;
  CHECK_THROWS_AS(gp.validate(), ParameterError);
  CHECK_THROWS_AS(spectral_gate(Waveform({0.0, 0.1}, 8000), profile), ParameterError);
  CHECK(spectral_gate(Waveform({}, kRate), profile).empty());
}

TEST_CASE("profiles round-trip through JSON") {
  synth::TempDir dir("prof");
  const auto p = build_noise_profile(synthetic_reference("robot", 1.0, kRate, 3));
  save_noise_profile(dir / "p.json", p);
  const auto q = load_noise_profile(dir / "p.json");
  CHECK(q.mean_db == p.mean_db);
  CHECK(q.std_db == p.std_db);
  CHECK(to_json(q) == to_json(p));
  CHECK_THROWS_AS(noise_profile_from_json("{\"n_fft\": 512}"), FormatError);
  CHECK_THROWS_AS(noise_profile_from_json(R"({"n_fft":8,"hop":2,"sample_rate":1,"mean_db":[0],"std_db":[0]})"),
                  FormatError);
  CHECK_THROWS_AS(load_noise_profile(dir / "none.json"), IoError);
}

TEST_CASE("robot reference carries its motor harmonics") {
  const auto w = synthetic_reference("robot", 1.0, kRate, 1);
  const auto e120 = oracle::band_energy(w.samples(), kRate, 118.0, 122.0);
  const auto e1000 = oracle::band_energy(w.samples(), kRate, 998.0, 1002.0);
  CHECK(e120 > 100.0 * e1000);
}

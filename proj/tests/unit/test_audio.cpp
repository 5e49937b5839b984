#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "contactsense/audio.hpp"
#include "contactsense/error.hpp"
#include "contactsense/random.hpp"
#include "contactsense/spectral.hpp"
#include "oracles.hpp"
#include "synth.hpp"

using namespace contactsense;

namespace {

void put(std::string& s, std::uint32_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

// Minimal PCM WAV writer independent of the library.
std::string pcm_wav(const std::vector<std::int32_t>& interleaved, int channels, int rate, int bits) {
  std::string body;
  for (auto v : interleaved) put(body, static_cast<std::uint32_t>(v), bits / 8);
  std::string s = "RIFF";
  put(s, static_cast<std::uint32_t>(36 + body.size()), 4);
  s += "WAVEfmt ";
  put(s, 16, 4);
  put(s, 1, 2);
  put(s, static_cast<std::uint32_t>(channels), 2);
  put(s, static_cast<std::uint32_t>(rate), 4);
  put(s, static_cast<std::uint32_t>(rate * channels * bits / 8), 4);
  put(s, static_cast<std::uint32_t>(channels * bits / 8), 2);
  put(s, static_cast<std::uint32_t>(bits), 2);
  s += "LIST";  // unknown chunk to skip
  put(s, 3, 4);
  s += "abc";
  s.push_back('\0');  // pad byte
  s += "data";
  put(s, static_cast<std::uint32_t>(body.size()), 4);
  return s + body;
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

std::vector<double> tone(double hz, int rate, std::size_t n, double amp = 0.5) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2.0 * M_PI * hz * static_cast<double>(i) / rate);
  return x;
}

}  // namespace

TEST_CASE("WAV reader decodes 16- and 24-bit PCM and keeps the first channel") {
  synth::TempDir dir("wav");
  write_bytes(dir / "a.wav", pcm_wav({16384, -1, -32768, 5}, 2, 8000, 16));
  auto w = read_wav(dir / "a.wav");
  CHECK(w.sample_rate() == 8000);
  REQUIRE(w.size() == 2);
  CHECK(w.samples()[0] == 0.5);
  CHECK(w.samples()[1] == -1.0);

  write_bytes(dir / "b.wav", pcm_wav({4194304, -8388608 & 0xFFFFFF}, 1, 44100, 24));
  w = read_wav(dir / "b.wav");
  REQUIRE(w.size() == 2);
  CHECK(w.samples()[0] == 0.5);
  CHECK(w.samples()[1] == -1.0);
}

TEST_CASE("float WAV round-trips float-representable samples exactly") {
  synth::TempDir dir("wavf");
  std::vector<double> x = {0.0, 0.25, -0.125, 1.0 / 3.0};
  x[3] = static_cast<float>(x[3]);
  write_wav(dir / "f.wav", Waveform(x, 16000));
  const auto w = read_wav(dir / "f.wav");
  CHECK(w.samples() == x);
  CHECK(w.sample_rate() == 16000);
}

TEST_CASE("WAV reader reports the failure kind") {
  synth::TempDir dir("wavbad");
  CHECK_THROWS_AS(read_wav(dir / "missing.wav"), IoError);
  write_bytes(dir / "junk.wav", "this is not audio at all");
  CHECK_THROWS_AS(read_wav(dir / "junk.wav"), FormatError);
  auto bytes = pcm_wav({1, 2}, 1, 8000, 16);
  bytes[20] = 7;  // unknown format tag
  write_bytes(dir / "fmt.wav", bytes);
  CHECK_THROWS_AS(read_wav(dir / "fmt.wav"), FormatError);
}

TEST_CASE("resampling keeps an in-band tone and its length") {
  const auto x = tone(1000.0, 48000, 48000);
  const auto y = resample(Waveform(x, 48000), 16000);
  CHECK(y.sample_rate() == 16000);
  REQUIRE(y.size() == 16000);
  const auto expect = tone(1000.0, 16000, 16000);
  double err = 0.0;
  for (std::size_t i = 1000; i < 15000; ++i) err = std::max(err, std::abs(y.samples()[i] - expect[i]));
  CHECK(err < 5e-3);
  const Waveform same(x, 48000);
  CHECK(resample(same, 48000).samples() == x);
  CHECK_THROWS_AS(resample(same, 0), ParameterError);
}

TEST_CASE("downsampling removes content above the new Nyquist") {
  const auto x = tone(7000.0, 48000, 48000);
  const auto y = resample(Waveform(x, 48000), 8000);
  double peak = 0.0;
  for (std::size_t i = 500; i + 500 < y.size(); ++i) peak = std::max(peak, std::abs(y.samples()[i]));
  CHECK(peak < 0.05);
}

TEST_CASE("envelope is the centred mean absolute amplitude") {
  Rng rng(5);
  std::vector<double> x(4000);
  for (auto& v : x) v = rng.normal();
  const Waveform w(x, 1000);
  const auto e = smoothed_envelope(w, 0.050, 0.010);
  CHECK(e.hop_seconds == 0.010);
  CHECK(e.values.size() == 400);
  for (std::size_t k : {std::size_t{0}, std::size_t{1}, std::size_t{200}, std::size_t{399}}) {
    const auto c = static_cast<std::ptrdiff_t>(k * 10);
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, c - 25), hi = std::min<std::ptrdiff_t>(4000, c + 25);
    double m = 0.0;
    for (auto i = lo; i < hi; ++i) m += std::abs(x[static_cast<std::size_t>(i)]);
    CHECK(e.values[k] == doctest::Approx(m / static_cast<double>(hi - lo)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(smoothed_envelope(w, 0.01, 0.05), ParameterError);
  CHECK_THROWS_AS(smoothed_envelope(Waveform({0.1}, 1000), 0.05, 0.01), ParameterError);
}

TEST_CASE("FFT and STFT invert") {
  Rng rng(9);
  for (int n : {8, 15, 512}) {
    std::vector<double> x(static_cast<std::size_t>(n)), back(static_cast<std::size_t>(n));
    for (auto& v : x) v = rng.normal();
    std::vector<std::complex<double>> X(static_cast<std::size_t>(n / 2 + 1));
    auto& f = fft_for(n);
    f.forward(x, X);
    f.inverse(X, back);
    for (int i = 0; i < n; ++i) CHECK(back[static_cast<std::size_t>(i)] / n == doctest::Approx(x[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
  std::vector<double> x(5000);
  for (auto& v : x) v = rng.normal();
  const StftParams p;
  const auto s = stft(x, p);
  CHECK(s.rows() == 257);
  CHECK(s.cols() == 1 + 5000 / 128);
  const auto y = istft(s, p, x.size());
  CHECK(oracle::rel_l2(y, x) < 1e-10);
}

TEST_CASE("hann window is periodic") {
  const auto w = hann_window(8);
  CHECK(w[0] == 0.0);
  CHECK(w[4] == doctest::Approx(1.0));
  CHECK(w[2] == doctest::Approx(0.5));
  CHECK(w[6] == doctest::Approx(0.5));
}

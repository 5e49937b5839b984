#include "contactsense/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "contactsense/error.hpp"

namespace contactsense {

Waveform::Waveform(std::vector<double> samples, int sample_rate)
    : samples_(std::move(samples)), sample_rate_(sample_rate) {
  if (sample_rate <= 0) throw ParameterError("sample_rate must be positive");
  for (double s : samples_) {
    if (!std::isfinite(s)) throw ParameterError("waveform contains a non-finite sample");
  }
}

Waveform Waveform::slice(std::size_t begin, std::size_t count) const {
  if (begin > samples_.size()) begin = samples_.size();
  count = std::min(count, samples_.size() - begin);
  return Waveform(std::vector<double>(samples_.begin() + begin, samples_.begin() + begin + count),
                  sample_rate_);
}

namespace {

constexpr int kHalfTaps = 16;  // 32-tap kernel
constexpr double kKaiserBeta = 8.0;

double bessel_i0(double x) {
  double sum = 1.0, term = 1.0;
  const double q = x * x / 4.0;
  for (int k = 1; k < 64; ++k) {
    term *= q / (static_cast<double>(k) * k);
    sum += term;
    if (term < sum * 1e-17) break;
  }
  return sum;
}

double sinc(double x) {
  if (x == 0.0) return 1.0;
  return std::sin(M_PI * x) / (M_PI * x);
}

}  // namespace

std::vector<double> resample_ratio(std::span<const double> in, double ratio, std::size_t out_len) {
  if (in.empty()) throw ParameterError("empty input");
  if (!(ratio > 0.0)) throw ParameterError("resample ratio must be positive");
  const double cutoff = std::min(1.0, ratio);
  const double i0_beta = bessel_i0(kKaiserBeta);
  const auto n_in = static_cast<std::ptrdiff_t>(in.size());

  std::vector<double> out(out_len);
  double weights[2 * kHalfTaps];
  for (std::size_t n = 0; n < out_len; ++n) {
    const double x = static_cast<double>(n) / ratio;
    const auto base = static_cast<std::ptrdiff_t>(std::floor(x));
    double wsum = 0.0;
    for (int t = 0; t < 2 * kHalfTaps; ++t) {
      const std::ptrdiff_t k = base - kHalfTaps + 1 + t;
      const double d = x - static_cast<double>(k);
      const double r = d / kHalfTaps;
      const double win = std::abs(r) >= 1.0 ? 0.0 : bessel_i0(kKaiserBeta * std::sqrt(1.0 - r * r)) / i0_beta;
      weights[t] = cutoff * sinc(cutoff * d) * win;
      wsum += weights[t];
    }
    double acc = 0.0;
    for (int t = 0; t < 2 * kHalfTaps; ++t) {
      const std::ptrdiff_t k = base - kHalfTaps + 1 + t;
      if (k >= 0 && k < n_in) acc += weights[t] * in[static_cast<std::size_t>(k)];
    }
    // Normalising by the kernel sum keeps unity gain at DC for every phase.
    out[n] = wsum != 0.0 ? acc / wsum : 0.0;
  }
  return out;
}

Waveform resample(const Waveform& w, int target_rate) {
  if (target_rate <= 0) throw ParameterError("target_rate must be positive");
  if (w.empty()) throw ParameterError("empty input");
  if (target_rate == w.sample_rate()) return w;
  const double ratio = static_cast<double>(target_rate) / w.sample_rate();
  const auto out_len = static_cast<std::size_t>(std::llround(static_cast<double>(w.size()) * ratio));
  return Waveform(resample_ratio(w.samples(), ratio, out_len), target_rate);
}

Envelope smoothed_envelope(const Waveform& w, double window_seconds, double hop_seconds) {
  if (!(window_seconds > 0.0) || !(hop_seconds > 0.0)) {
    throw ParameterError("envelope window and hop must be positive");
  }
  if (hop_seconds > window_seconds) throw ParameterError("envelope hop must not exceed the window");
  const auto sr = static_cast<double>(w.sample_rate());
  const auto win = std::max<std::ptrdiff_t>(1, std::llround(window_seconds * sr));
  const auto hop = std::max<std::ptrdiff_t>(1, std::llround(hop_seconds * sr));
  const auto n = static_cast<std::ptrdiff_t>(w.size());
  if (n == 0) throw ParameterError("empty input");
  if (win > n) throw ParameterError("envelope window is longer than the signal");

  const auto& x = w.samples();
  Envelope env;
  env.hop_seconds = static_cast<double>(hop) / sr;
  env.start_offset_seconds = 0.0;
  const std::ptrdiff_t frames = (n + hop - 1) / hop;
  env.values.resize(static_cast<std::size_t>(frames));
  for (std::ptrdiff_t k = 0; k < frames; ++k) {
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, k * hop - win / 2);
    const std::ptrdiff_t hi = std::min(n, k * hop - win / 2 + win);
    double acc = 0.0;
    for (std::ptrdiff_t i = lo; i < hi; ++i) acc += std::abs(x[static_cast<std::size_t>(i)]);
    env.values[static_cast<std::size_t>(k)] = acc / static_cast<double>(hi - lo);
  }
  return env;
}

// --- WAV ---------------------------------------------------------------

namespace {

std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
void put32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
void put16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError(path.string() + ": not a RIFF/WAVE file");
  }

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t len = le32(chunk + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = std::min<std::size_t>(len, bytes.size() - body);
    if (std::memcmp(chunk, "fmt ", 4) == 0 && avail >= 16) {
      format = le16(chunk + 8);
      channels = le16(chunk + 10);
      rate = le32(chunk + 12);
      bits = le16(chunk + 22);
      if (format == 0xFFFE && avail >= 26) format = le16(chunk + 8 + 24);  // extensible sub-format
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = avail;
    }
    pos = body + len + (len & 1u);
  }
  if (channels == 0 || rate == 0) throw FormatError(path.string() + ": missing fmt chunk");
  if (data == nullptr) throw FormatError(path.string() + ": missing data chunk");

  const bool pcm = format == 1 && (bits == 16 || bits == 24);
  const bool flt = format == 3 && bits == 32;
  if (!pcm && !flt) {
    throw FormatError(path.string() + ": unsupported encoding (format " + std::to_string(format) + ", " +
                      std::to_string(bits) + " bits)");
  }
  const std::size_t frame_bytes = static_cast<std::size_t>(bits / 8) * channels;
  const std::size_t frames = data_len / frame_bytes;
  std::vector<double> samples(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    const unsigned char* p = data + i * frame_bytes;
    double v;
    if (flt) {
      float f;
      std::uint32_t u = le32(p);
      std::memcpy(&f, &u, 4);
      v = f;
    } else if (bits == 16) {
      v = static_cast<std::int16_t>(le16(p)) / 32768.0;
    } else {
      std::int32_t s = static_cast<std::int32_t>(p[0] | (p[1] << 8) | (p[2] << 16));
      if (s & 0x800000) s -= 0x1000000;
      v = s / 8388608.0;
    }
    samples[i] = v;
  }
  return Waveform(std::move(samples), static_cast<int>(rate));
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  const auto data_len = static_cast<std::uint32_t>(w.size() * 4);
  os.write("RIFF", 4);
  put32(os, 36 + data_len);
  os.write("WAVEfmt ", 8);
  put32(os, 16);
  put16(os, 3);  // IEEE float
  put16(os, 1);
  put32(os, static_cast<std::uint32_t>(w.sample_rate()));
  put32(os, static_cast<std::uint32_t>(w.sample_rate()) * 4);
  put16(os, 4);
  put16(os, 32);
  os.write("data", 4);
  put32(os, data_len);
  for (double s : w.samples()) {
    const float f = static_cast<float>(s);
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put32(os, u);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace contactsense

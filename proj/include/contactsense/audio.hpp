#pragma once

#include <filesystem>
#include <span>
#include <vector>

namespace contactsense {

// Mono signal with its sample rate. Samples are nominally in [-1, 1].
class Waveform {
 public:
  Waveform() = default;
  Waveform(std::vector<double> samples, int sample_rate);

  const std::vector<double>& samples() const noexcept { return samples_; }
  int sample_rate() const noexcept { return sample_rate_; }
  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  double duration_seconds() const noexcept {
    return static_cast<double>(samples_.size()) / sample_rate_;
  }

  Waveform slice(std::size_t begin, std::size_t count) const;

 private:
  std::vector<double> samples_;
  int sample_rate_ = 1;
};

// Smoothed amplitude; value k sits at start_offset_seconds + k * hop_seconds.
struct Envelope {
  std::vector<double> values;
  double hop_seconds = 0.0;
  double start_offset_seconds = 0.0;

  double time_at(std::size_t k) const { return start_offset_seconds + static_cast<double>(k) * hop_seconds; }
};

struct EnvelopeParams {
  double window_seconds = 0.050;
  double hop_seconds = 0.010;
};

Waveform resample(const Waveform& w, int target_rate);

// Band-limited interpolation at an arbitrary rate ratio (output/input);
// out_len output samples are produced.
std::vector<double> resample_ratio(std::span<const double> in, double ratio, std::size_t out_len);

// Mean absolute amplitude over a window centred on each hop; windows are
// truncated at the signal edges.
Envelope smoothed_envelope(const Waveform& w, double window_seconds, double hop_seconds);
inline Envelope smoothed_envelope(const Waveform& w, const EnvelopeParams& p) {
  return smoothed_envelope(w, p.window_seconds, p.hop_seconds);
}

// WAV I/O: PCM 16/24-bit and 32-bit float. Multi-channel files keep the
// first channel. Integer PCM is scaled by the type's maximum magnitude.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& w);

}  // namespace contactsense

#pragma once

#include <complex>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace contactsense {

// Real-to-complex transform of a fixed power-of-two-or-not length, backed
// by FFTW. Instances are cheap to reuse and not shared across threads.
class RealFft {
 public:
  explicit RealFft(int n);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  int size() const noexcept { return n_; }
  int bins() const noexcept { return n_ / 2 + 1; }

  // in.size() == n, out.size() == n/2 + 1
  void forward(std::span<const double> in, std::span<std::complex<double>> out);
  // Unnormalised inverse: returns n * x for a round trip.
  void inverse(std::span<const std::complex<double>> in, std::span<double> out);

 private:
  int n_;
  double* real_ = nullptr;
  void* cplx_ = nullptr;
  void* fwd_ = nullptr;
  void* inv_ = nullptr;
};

// Per-thread cache of transforms keyed by length.
RealFft& fft_for(int n);

enum class WindowKind { hann };

struct StftParams {
  int n_fft = 512;
  int hop = 128;
  WindowKind window = WindowKind::hann;

  int bins() const { return n_fft / 2 + 1; }
  void validate() const;
};

// Periodic Hann window.
std::vector<double> hann_window(int n);

// bins x frames
using Spectrogram = Eigen::MatrixXcd;

// Centre-padded framing: frame k is centred on sample k*hop, zero padding
// of n_fft/2 on both sides, 1 + n/hop frames.
Spectrogram stft(std::span<const double> x, const StftParams& p);

// Weighted overlap-add inverse, trimmed to `length` samples.
std::vector<double> istft(const Spectrogram& s, const StftParams& p, std::size_t length);

}  // namespace contactsense

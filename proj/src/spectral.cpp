#include "contactsense/spectral.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>

#include "contactsense/error.hpp"

namespace contactsense {

namespace {
// FFTW's planner is not thread-safe; execution on distinct plans is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

RealFft::RealFft(int n) : n_(n) {
  if (n <= 0) throw ParameterError("FFT length must be positive");
  std::lock_guard lock(planner_mutex());
  real_ = fftw_alloc_real(static_cast<std::size_t>(n));
  auto* c = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
  cplx_ = c;
  fwd_ = fftw_plan_dft_r2c_1d(n, real_, c, FFTW_ESTIMATE);
  inv_ = fftw_plan_dft_c2r_1d(n, c, real_, FFTW_ESTIMATE);
}

RealFft::~RealFft() {
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(static_cast<fftw_plan>(fwd_));
  fftw_destroy_plan(static_cast<fftw_plan>(inv_));
  fftw_free(real_);
  fftw_free(cplx_);
}

void RealFft::forward(std::span<const double> in, std::span<std::complex<double>> out) {
  std::copy(in.begin(), in.end(), real_);
  fftw_execute(static_cast<fftw_plan>(fwd_));
  const auto* c = static_cast<const fftw_complex*>(cplx_);
  for (int k = 0; k < bins(); ++k) out[static_cast<std::size_t>(k)] = {c[k][0], c[k][1]};
}

void RealFft::inverse(std::span<const std::complex<double>> in, std::span<double> out) {
  auto* c = static_cast<fftw_complex*>(cplx_);
  for (int k = 0; k < bins(); ++k) {
    c[k][0] = in[static_cast<std::size_t>(k)].real();
    c[k][1] = in[static_cast<std::size_t>(k)].imag();
  }
  fftw_execute(static_cast<fftw_plan>(inv_));
  std::copy(real_, real_ + n_, out.begin());
}

RealFft& fft_for(int n) {
  thread_local std::map<int, std::unique_ptr<RealFft>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<RealFft>(n);
  return *slot;
}

void StftParams::validate() const {
  if (n_fft <= 0 || (n_fft & (n_fft - 1)) != 0) throw ParameterError("n_fft must be a positive power of two");
  if (hop <= 0 || hop > n_fft) throw ParameterError("hop must lie in [1, n_fft]");
}

std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / n);
  return w;
}

Spectrogram stft(std::span<const double> x, const StftParams& p) {
  p.validate();
  const int n = p.n_fft;
  const auto len = static_cast<std::ptrdiff_t>(x.size());
  const std::ptrdiff_t frames = 1 + len / p.hop;
  const auto win = hann_window(n);
  auto& fft = fft_for(n);

  Spectrogram s(p.bins(), frames);
  std::vector<double> buf(static_cast<std::size_t>(n));
  std::vector<std::complex<double>> spec(static_cast<std::size_t>(p.bins()));
  for (std::ptrdiff_t f = 0; f < frames; ++f) {
    const std::ptrdiff_t start = f * p.hop - n / 2;
    for (int i = 0; i < n; ++i) {
      const std::ptrdiff_t idx = start + i;
      buf[static_cast<std::size_t>(i)] =
          (idx >= 0 && idx < len) ? x[static_cast<std::size_t>(idx)] * win[static_cast<std::size_t>(i)] : 0.0;
    }
    fft.forward(buf, spec);
    for (int k = 0; k < p.bins(); ++k) s(k, f) = spec[static_cast<std::size_t>(k)];
  }
  return s;
}

std::vector<double> istft(const Spectrogram& s, const StftParams& p, std::size_t length) {
  p.validate();
  if (s.rows() != p.bins()) throw ParameterError("spectrogram bin count does not match n_fft");
  const int n = p.n_fft;
  const auto frames = s.cols();
  const auto win = hann_window(n);
  auto& fft = fft_for(n);

  const std::size_t total = static_cast<std::size_t>(n + (frames - 1) * p.hop);
  std::vector<double> acc(total, 0.0), wsum(total, 0.0);
  std::vector<std::complex<double>> spec(static_cast<std::size_t>(p.bins()));
  std::vector<double> frame(static_cast<std::size_t>(n));
  for (Eigen::Index f = 0; f < frames; ++f) {
    for (int k = 0; k < p.bins(); ++k) spec[static_cast<std::size_t>(k)] = s(k, f);
    fft.inverse(spec, frame);
    const std::size_t off = static_cast<std::size_t>(f * p.hop);
    for (int i = 0; i < n; ++i) {
      const double w = win[static_cast<std::size_t>(i)];
      acc[off + static_cast<std::size_t>(i)] += w * frame[static_cast<std::size_t>(i)] / n;
      wsum[off + static_cast<std::size_t>(i)] += w * w;
    }
  }
  std::vector<double> out(length, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(n / 2);
    if (j < total && wsum[j] > 1e-12) out[i] = acc[j] / wsum[j];
  }
  return out;
}

}  // namespace contactsense

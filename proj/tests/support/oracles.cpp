#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

namespace oracle {

using namespace contactsense;

std::vector<ContactSegment> reference_segments(const BinaryMask& mask, double hop, const SegmentationParams& p,
                                               double offset) {
  const auto t = [&](std::size_t k) { return offset + static_cast<double>(k) * hop; };
  struct Run {
    std::size_t s, e;  // [s, e)
  };
  std::vector<Run> runs;
  for (std::size_t s = 0; s < mask.size(); ++s) {
    if (!mask[s] || (s > 0 && mask[s - 1])) continue;
    std::size_t e = s;
    for (std::size_t k = s; k < mask.size() && mask[k]; ++k) e = k + 1;
    runs.push_back({s, e});
  }
  const auto linked = [&](std::size_t a) { return t(runs[a + 1].s) - t(runs[a].e) <= p.gamma_squeeze_seconds; };
  std::vector<ContactSegment> out;
  for (std::size_t a = 0; a < runs.size(); ++a) {
    if (a > 0 && linked(a - 1)) continue;  // not the head of a chain
    std::size_t b = a;
    for (std::size_t c = a; c + 1 < runs.size(); ++c) {
      bool all = true;
      for (std::size_t k = a; k <= c; ++k) all = all && linked(k);
      if (!all) break;
      b = c + 1;
    }
    const double start = t(runs[a].s), end = t(runs[b].e);
    if (end - start >= p.delta_min_seconds) {
      out.push_back(ContactSegment{start, end, SegmentKind::contact, std::nullopt, ReviewState::automatic});
    }
  }
  return out;
}

double reference_percentile(const std::vector<double>& values, double p) {
  const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const auto kth = [&](std::size_t k) {
    std::vector<double> v = values;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    return v[k];
  };
  const double a = kth(lo), b = kth(hi);
  return a + (b - a) * (rank - static_cast<double>(lo));
}

Envelope random_envelope(Rng& rng, std::size_t n, double hop) {
  Envelope e;
  e.hop_seconds = hop;
  e.values.resize(n);
  const double floor_level = rng.uniform(0.005, 0.05);
  for (auto& v : e.values) v = floor_level * (1.0 + 0.3 * std::abs(rng.normal()));
  const auto bursts = rng.below(8);
  for (std::uint64_t b = 0; b < bursts; ++b) {
    const auto start = rng.below(n);
    const auto len = 1 + rng.below(std::max<std::uint64_t>(2, n / 4));
    const double level = rng.uniform(0.05, 1.0);
    const bool ramp = rng.uniform() < 0.3;
    for (std::size_t k = start; k < std::min<std::size_t>(n, start + len); ++k) {
      const double shape = ramp ? static_cast<double>(k - start + 1) / static_cast<double>(len) : 1.0;
      e.values[k] += level * shape * (1.0 + 0.2 * rng.normal());
      e.values[k] = std::abs(e.values[k]);
    }
    // occasional dropouts inside bursts exercise the gap merge
    if (rng.uniform() < 0.5 && len > 4) {
      const auto d = start + rng.below(len);
      for (std::size_t k = d; k < std::min<std::size_t>(n, d + 1 + rng.below(20)); ++k) e.values[k] = floor_level;
    }
  }
  return e;
}

SegmentationParams random_params(Rng& rng, double hop) {
  SegmentationParams p;
  p.alpha_offset = rng.uniform();
  p.beta_factor = rng.uniform(0.1, 1.0);
  // integer multiples of the hop hit the merge and duration boundaries exactly
  p.gamma_squeeze_seconds = rng.uniform() < 0.5 ? static_cast<double>(rng.below(40)) * hop : rng.uniform(0.0, 0.4);
  p.delta_min_seconds = rng.uniform() < 0.5 ? static_cast<double>(1 + rng.below(120)) * hop : rng.uniform(0.01, 1.2);
  return p;
}

long coverage_frames(const std::vector<ContactSegment>& segs, double hop, double offset) {
  long c = 0;
  for (const auto& s : segs) c += std::lround((s.end_seconds - offset) / hop) - std::lround((s.start_seconds - offset) / hop);
  return c;
}

double rel_l2(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

double band_energy(const std::vector<double>& x, int sample_rate, double lo_hz, double hi_hz) {
  const std::size_t n = x.size();
  const double df = static_cast<double>(sample_rate) / static_cast<double>(n);
  double e = 0.0;
  for (auto k = static_cast<std::size_t>(std::ceil(lo_hz / df)); k <= static_cast<std::size_t>(std::floor(hi_hz / df)) && k <= n / 2; ++k) {
    std::complex<double> acc = 0.0;
    const double w = -2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * std::polar(1.0, w * static_cast<double>(i));
    e += std::norm(acc);
  }
  return e;
}

std::vector<double> slaney_centres(int n, double fmax) {
  const auto mel = [](double hz) { return hz < 1000.0 ? 3.0 * hz / 200.0 : 15.0 + 27.0 * std::log(hz / 1000.0) / std::log(6.4); };
  const auto inv = [](double m) { return m < 15.0 ? 200.0 * m / 3.0 : 1000.0 * std::pow(6.4, (m - 15.0) / 27.0); };
  std::vector<double> c(static_cast<std::size_t>(n));
  for (int i = 1; i <= n; ++i) c[static_cast<std::size_t>(i - 1)] = inv(mel(fmax) * i / (n + 1));
  return c;
}

}  // namespace oracle

#include "synth.hpp"

#include <atomic>
#include <cmath>
#include <fstream>

#include <json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <unistd.h>

#include "contactsense/audio.hpp"

namespace synth {

using namespace contactsense;

std::vector<double> contact_sound(Label cls, std::size_t n, Rng& rng) {
  std::vector<double> out(n, 0.0);
  const double dt = 1.0 / kRate;
  switch (cls) {
    case Label::leaf: {
      double prev = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double w = rng.normal();
        const double flutter = 0.6 + 0.4 * std::sin(2.0 * M_PI * 7.0 * static_cast<double>(i) * dt);
        out[i] = 0.25 * flutter * (w - prev);  // first difference tilts energy upwards
        prev = w;
      }
      break;
    }
    case Label::twig: {
      std::size_t next = 0;
      while (next < n) {
        const double amp = rng.uniform(0.3, 0.6);
        const double f = rng.uniform(1800.0, 2600.0);
        for (std::size_t k = 0; k < 400 && next + k < n; ++k) {
          const double t = static_cast<double>(k) * dt;
          out[next + k] += amp * std::exp(-t / 0.004) * std::sin(2.0 * M_PI * f * t);
        }
        next += 240 + rng.below(400);
      }
      break;
    }
    case Label::trunk: {
      const double f0 = rng.uniform(110.0, 160.0);
      double rough = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) * dt;
        rough = 0.995 * rough + 0.005 * rng.normal();
        out[i] = (0.35 + 4.0 * rough) *
                 (std::sin(2.0 * M_PI * f0 * t) + 0.5 * std::sin(2.0 * M_PI * 2.0 * f0 * t) +
                  0.25 * std::sin(2.0 * M_PI * 3.0 * f0 * t));
      }
      break;
    }
    case Label::ambient:
      break;
  }
  return out;
}

std::vector<double> cycled_sound(Label cls, std::size_t n, double cycle, Rng& rng) {
  std::vector<double> out(n, 0.0);
  const double dt = 1.0 / kRate;
  // shared texture: low-passed noise under a slow random swell
  double lp = 0.0, swell = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    lp = 0.9 * lp + 0.1 * rng.normal();
    swell = 0.999 * swell + 0.001 * rng.normal();
    out[i] = (0.5 + 6.0 * std::abs(swell)) * lp;
  }
  const double hz = cls == Label::leaf ? 900.0 : cls == Label::twig ? 2400.0 : 5200.0;
  const auto period = static_cast<std::size_t>(std::llround(cycle * kRate));
  const std::size_t burst = kRate * 6 / 100;  // 60 ms
  const std::size_t phase = rng.below(period);
  for (std::size_t start = phase; start < n; start += period) {
    for (std::size_t k = 0; k < burst && start + k < n; ++k) {
      const double t = static_cast<double>(k) * dt;
      out[start + k] += 0.3 * std::sin(M_PI * t / 0.06) * std::sin(2.0 * M_PI * hz * t);
    }
  }
  return out;
}

Waveform trial_audio(const TrialSpec& s) {
  Rng rng(s.seed);
  const auto n = static_cast<std::size_t>(std::llround(s.seconds * kRate));
  std::vector<double> x(n);
  for (auto& v : x) v = s.hiss * rng.normal();
  for (const auto& [a, b] : s.contacts) {
    const auto i0 = static_cast<std::size_t>(std::llround(a * kRate));
    const auto i1 = std::min(n, static_cast<std::size_t>(std::llround(b * kRate)));
    const auto burst = s.cycle > 0.0 ? cycled_sound(s.cls, i1 - i0, s.cycle, rng) : contact_sound(s.cls, i1 - i0, rng);
    const std::size_t ramp = 160;
    for (std::size_t i = 0; i < burst.size(); ++i) {
      const double edge = std::min({1.0, static_cast<double>(i) / ramp, static_cast<double>(burst.size() - i) / ramp});
      x[i0 + i] += edge * burst[i];
    }
  }
  for (auto& v : x) v = std::clamp(v, -0.99, 0.99);
  return Waveform(std::move(x), kRate);
}

namespace {

cv::Vec3b class_bgr(Label cls) {
  switch (cls) {
    case Label::leaf: return {40, 170, 60};
    case Label::twig: return {40, 90, 150};
    case Label::trunk: return {30, 40, 70};
    case Label::ambient: break;
  }
  return {200, 180, 150};
}

}  // namespace

TrialRecording write_trial(const std::filesystem::path& root, const TrialSpec& s) {
  TrialRecording t;
  t.trial_id = s.id;
  t.dir = root / s.id;
  t.embodiment = s.embodiment;
  t.declared_class = s.cls;
  t.audio_start_ns = kClockStartNs;
  std::filesystem::create_directories(t.frames_dir());
  write_wav(t.audio_path(), trial_audio(s));
  if (s.frame_rate > 0.0) {
    Rng rng(s.seed ^ 0xF4A3E5);
    const auto count = static_cast<std::size_t>(std::floor(s.seconds * s.frame_rate));
    for (std::size_t k = 0; k < count; ++k) {
      const double time = static_cast<double>(k) / s.frame_rate;
      bool touching = false;
      for (const auto& [a, b] : s.contacts) touching = touching || (time >= a && time < b);
      const cv::Vec3b base = touching ? class_bgr(s.cls) : class_bgr(Label::ambient);
      cv::Mat img(48, 64, CV_8UC3);
      for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c)
          for (int ch = 0; ch < 3; ++ch)
            img.at<cv::Vec3b>(r, c)[ch] = cv::saturate_cast<std::uint8_t>(base[ch] + 12.0 * rng.normal());
      const auto ns = kClockStartNs + static_cast<std::int64_t>(std::llround(time * 1e9));
      const auto path = t.frames_dir() / (std::to_string(ns) + ".png");
      cv::imwrite(path.string(), img);
      t.frames.push_back({ns, path});
    }
  }
  write_trial_json(t);
  return t;
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("cs_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

}  // namespace synth

#include "contactsense/inference.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <json.hpp>
#include <mutex>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <thread>

#include "contactsense/error.hpp"
#include "contactsense/features.hpp"
#include "contactsense/log.hpp"
#include "contactsense/util.hpp"

namespace contactsense {

using ordered_json = nlohmann::ordered_json;

void StreamConfig::validate() const {
  std::vector<std::string> bad;
  if (window_frames < 1) bad.push_back("window_frames");
  if (stride_frames < 1 || stride_frames > window_frames) bad.push_back("stride_frames (1..window_frames)");
  if (!(frame_rate > 0.0)) bad.push_back("frame_rate");
  if (!(audio_window_s > 0.0)) bad.push_back("audio_window_s");
  if (!bad.empty()) {
    std::string msg = "invalid stream config:";
    for (const auto& b : bad) msg += " " + b;
    throw ParameterError(msg);
  }
}

// --- rolling buffer -------------------------------------------------------------

RollingBuffer::RollingBuffer(double capacity_seconds, int sample_rate)
    : capacity_(static_cast<std::size_t>(std::llround(capacity_seconds * sample_rate))), sample_rate_(sample_rate) {
  if (sample_rate <= 0 || capacity_ == 0) throw ParameterError("buffer capacity and sample rate must be positive");
  ring_ = std::make_unique<std::atomic<double>[]>(capacity_);
  for (std::size_t i = 0; i < capacity_; ++i) ring_[i].store(0.0, std::memory_order_relaxed);
}

void RollingBuffer::push(std::span<const double> chunk) {
  if (chunk.size() > capacity_) {
    throw ParameterError("chunk of " + std::to_string(chunk.size()) + " samples exceeds buffer capacity " +
                         std::to_string(capacity_));
  }
  const std::uint64_t start = total_.load(std::memory_order_relaxed);
  const std::uint64_t end = start + chunk.size();
  writing_.store(end, std::memory_order_relaxed);
  std::atomic_thread_fence(std::memory_order_release);
  for (std::size_t i = 0; i < chunk.size(); ++i) ring_[(start + i) % capacity_].store(chunk[i], std::memory_order_relaxed);
  total_.store(end, std::memory_order_release);
}

bool RollingBuffer::read(std::uint64_t start, std::size_t count, std::vector<double>& out) const {
  if (count > capacity_) return false;
  const std::uint64_t total = total_.load(std::memory_order_acquire);
  if (start + count > total || start + capacity_ < total) return false;
  out.resize(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = ring_[(start + i) % capacity_].load(std::memory_order_relaxed);
  std::atomic_thread_fence(std::memory_order_acquire);
  // any write that began after our copy started must not have reached start
  return start + capacity_ >= writing_.load(std::memory_order_relaxed);
}

// --- windows ---------------------------------------------------------------------

AudioStream::AudioStream(const StreamConfig& cfg, int sample_rate, double capacity_seconds)
    : cfg_(cfg),
      buffer_(capacity_seconds, sample_rate),
      window_len_(static_cast<std::size_t>(std::llround(cfg.audio_window_s * sample_rate))) {
  cfg_.validate();
  if (window_len_ > buffer_.capacity()) throw ParameterError("buffer capacity is shorter than one audio window");
}

WindowRef AudioStream::window(std::uint64_t k) const {
  const double start_s = static_cast<double>(k) * cfg_.stride_seconds();
  return WindowRef{k, static_cast<std::uint64_t>(std::llround(start_s * buffer_.sample_rate())), window_len_, start_s};
}

std::vector<WindowRef> AudioStream::ready_windows(std::uint64_t first, std::uint64_t total) const {
  std::vector<WindowRef> out;
  for (std::uint64_t k = first;; ++k) {
    const auto w = window(k);
    if (w.start_sample + w.length > total) break;
    out.push_back(w);
  }
  return out;
}

std::vector<WindowRef> AudioStream::push_audio(std::span<const double> chunk) {
  buffer_.push(chunk);
  auto ready = ready_windows(next_, buffer_.total_samples_seen());
  next_ += ready.size();
  return ready;
}

// --- classification ----------------------------------------------------------------

WindowClassifier::WindowClassifier(std::shared_ptr<const FusionModel> model, std::optional<NoiseProfile> profile,
                                   GateParams gate)
    : model_(std::move(model)), profile_(std::move(profile)), gate_(gate) {
  if (!model_) throw ParameterError("classifier needs a model");
  gate_.validate();
}

EmbeddingBundle WindowClassifier::embed(const Waveform& window, double start_s) const {
  Waveform w = window.sample_rate() == MelConfig::kSampleRate ? window : resample(window, MelConfig::kSampleRate);
  if (profile_) w = spectral_gate(w, *profile_, gate_);
  const auto& enc = BuiltinEncoders::instance();
  const MelSpectrogram mel = mel_spectrogram(w);
  EmbeddingBundle b;
  b.set(Slot::audio_spectral, enc.encode_audio(mel));
  b.set(Slot::audio_semantic, enc.encode_semantic(mel));
  const auto& slots = model_->config().slots;
  if (std::find(slots.begin(), slots.end(), Slot::image) != slots.end()) {
    std::optional<ImageRef> ref;
    if (trial_) ref = pair_frame(*trial_, start_s, w.duration_seconds());
    b.set(Slot::image, ref ? enc.encode_image(preprocess_image(ref->frame_path))
                           : Eigen::VectorXd::Zero(slot_dim(Slot::image)).eval());
  }
  return b;
}

TimedPrediction WindowClassifier::classify(const Waveform& window, double start_s, const StreamConfig& cfg) const {
  const auto t0 = std::chrono::steady_clock::now();
  const Prediction p = model_->predict(embed(window, start_s));
  const auto t1 = std::chrono::steady_clock::now();
  TimedPrediction out;
  out.timestamp_s = cfg.timestamp == Timestamp::midpoint ? start_s + cfg.audio_window_s / 2.0 : start_s;
  out.label = p.label;
  out.probabilities = p.probabilities;
  out.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  log_debug("window " + std::to_string(start_s) + " s latency " + std::to_string(out.latency_ms) + " ms");
  return out;
}

std::vector<TimedPrediction> classify_offline(const Waveform& audio, const WindowClassifier& classifier,
                                              const StreamConfig& cfg) {
  const AudioStream layout(cfg, audio.sample_rate(), std::max(cfg.audio_window_s, 1e-3));
  std::vector<TimedPrediction> out;
  for (const auto& w : layout.ready_windows(0, audio.size())) {
    std::vector<double> x(audio.samples().begin() + static_cast<std::ptrdiff_t>(w.start_sample),
                          audio.samples().begin() + static_cast<std::ptrdiff_t>(w.start_sample + w.length));
    out.push_back(classifier.classify(Waveform(std::move(x), audio.sample_rate()), w.start_s, cfg));
  }
  return out;
}

std::vector<TimedPrediction> classify_stream(const Waveform& audio, const WindowClassifier& classifier,
                                             const StreamConfig& cfg, const StreamOptions& opts,
                                             const std::function<void(const TimedPrediction&)>& on_prediction) {
  if (opts.chunk_samples == 0) throw ParameterError("chunk_samples must be positive");
  AudioStream stream(cfg, audio.sample_rate(), opts.capacity_seconds);
  RollingBuffer& buffer = stream.buffer();
  const std::size_t window_len = stream.window(0).length;
  if (!opts.realtime && window_len + opts.chunk_samples > buffer.capacity()) {
    throw ParameterError("buffer capacity must hold one window plus one chunk");
  }

  std::atomic<bool> done{false};
  std::exception_ptr producer_error;
  std::thread producer([&] {
    try {
      const auto t0 = std::chrono::steady_clock::now();
      const auto& x = audio.samples();
      for (std::size_t pos = 0; pos < x.size(); pos += opts.chunk_samples) {
        const std::size_t n = std::min(opts.chunk_samples, x.size() - pos);
        if (!opts.realtime) {
          while (buffer.total_samples_seen() + n > buffer.needed_from() + buffer.capacity()) std::this_thread::yield();
        }
        buffer.push(std::span<const double>(x.data() + pos, n));
        if (opts.realtime) {
          std::this_thread::sleep_until(t0 + std::chrono::duration<double>(static_cast<double>(pos + n) / audio.sample_rate()));
        }
      }
    } catch (...) {
      producer_error = std::current_exception();
    }
    done.store(true, std::memory_order_release);
  });

  std::vector<TimedPrediction> out;
  std::vector<double> scratch;
  std::uint64_t next = 0;
  try {
    for (;;) {
      const bool finished = done.load(std::memory_order_acquire);
      const auto ready = stream.ready_windows(next, buffer.total_samples_seen());
      for (const auto& w : ready) {
        if (stream.read(w, scratch)) {
          out.push_back(classifier.classify(Waveform(scratch, audio.sample_rate()), w.start_s, cfg));
          if (on_prediction) on_prediction(out.back());
        } else {
          log_warn("window at " + std::to_string(w.start_s) + " s was overwritten before it could be read");
        }
        next = w.index + 1;
        buffer.release_before(stream.window(next).start_sample);
      }
      if (ready.empty()) {
        if (finished) break;
        std::this_thread::yield();
      }
    }
  } catch (...) {
    buffer.release_before(UINT64_MAX / 2);
    producer.join();
    throw;
  }
  producer.join();
  if (producer_error) std::rethrow_exception(producer_error);
  return out;
}

namespace {
ordered_json event_json(const TimedPrediction& p) {
  ordered_json j;
  j["t"] = p.timestamp_s;
  j["class"] = std::string(to_string(p.label));
  j["p"] = p.confidence();
  j["probs"] = p.probabilities;
  j["latency_ms"] = p.latency_ms;
  return j;
}
}  // namespace

std::string prediction_json(const TimedPrediction& p) { return event_json(p).dump(); }

// --- timeline and overlay --------------------------------------------------------------

std::string to_json(const Timeline& t) {
  ordered_json j;
  j["events"] = ordered_json::array();
  for (const auto& p : t.events) j["events"].push_back(event_json(p));
  j["segments"] = ordered_json::array();
  for (const auto& s : t.segments) {
    ordered_json seg;
    seg["start_s"] = s.start_seconds;
    seg["end_s"] = s.end_seconds;
    seg["kind"] = std::string(to_string(s.kind));
    seg["label"] = s.label ? ordered_json(std::string(to_string(*s.label))) : ordered_json(nullptr);
    seg["review_state"] = std::string(to_string(s.review_state));
    j["segments"].push_back(seg);
  }
  return j.dump(2) + "\n";
}

Timeline timeline_from_json(const std::string& text) {
  Timeline t;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& e : j.at("events")) {
      TimedPrediction p;
      p.timestamp_s = e.at("t").get<double>();
      const auto l = parse_label(e.at("class").get<std::string>());
      if (!l) throw FormatError("unknown class in timeline");
      p.label = *l;
      p.probabilities = e.at("probs").get<std::array<double, kNumClasses>>();
      p.latency_ms = e.value("latency_ms", 0.0);
      t.events.push_back(p);
    }
    for (const auto& s : j.value("segments", nlohmann::json::array())) {
      ContactSegment seg;
      seg.start_seconds = s.at("start_s").get<double>();
      seg.end_seconds = s.at("end_s").get<double>();
      const auto kind = parse_segment_kind(s.at("kind").get<std::string>());
      const auto state = parse_review_state(s.value("review_state", std::string("auto")));
      if (!kind || !state) throw FormatError("bad segment in timeline");
      seg.kind = *kind;
      seg.review_state = *state;
      if (!s.at("label").is_null()) seg.label = parse_label(s["label"].get<std::string>());
      t.segments.push_back(seg);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed timeline: ") + e.what());
  }
  return t;
}

std::optional<std::size_t> covering_prediction(const std::vector<TimedPrediction>& preds, double t,
                                               const StreamConfig& cfg) {
  std::optional<std::size_t> best;
  double best_d = 0.0;
  const double lead = cfg.timestamp == Timestamp::midpoint ? cfg.audio_window_s / 2.0 : 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double start = preds[i].timestamp_s - lead;
    if (t < start || t > start + cfg.audio_window_s) continue;
    const double d = std::abs(t - (start + cfg.audio_window_s / 2.0));
    if (!best || d < best_d) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

std::array<std::uint8_t, 3> class_color_rgb(std::optional<Label> label) {
  if (!label) return {40, 40, 40};
  switch (*label) {
    case Label::leaf: return {60, 180, 75};
    case Label::twig: return {245, 130, 48};
    case Label::trunk: return {145, 30, 180};
    case Label::ambient: return {230, 25, 75};
  }
  return {40, 40, 40};
}

namespace {
cv::Scalar bgr(std::array<std::uint8_t, 3> rgb) { return cv::Scalar(rgb[2], rgb[1], rgb[0]); }
}  // namespace

OverlayReport overlay_export(const Timeline& timeline, const TrialRecording* trial, double duration_s,
                             const StreamConfig& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  atomic_write(out_dir / "timeline.json", to_json(timeline));
  OverlayReport report;
  if (trial == nullptr || trial->frames.empty()) {
    report.frames_missing = true;
    log_warn("no frames available; wrote timeline only");
    return report;
  }
  const double span = duration_s > 0.0 ? duration_s : 1.0;
  const auto frames_dir = out_dir / "frames";
  std::filesystem::create_directories(frames_dir);
  for (const auto& f : trial->frames) {
    cv::Mat img = cv::imread(f.path.string(), cv::IMREAD_COLOR);
    if (img.empty()) {
      log_warn("cannot decode frame " + f.path.string());
      continue;
    }
    const double t = trial->frame_time(f);
    const auto cover = covering_prediction(timeline.events, t, cfg);
    const std::optional<Label> cls = cover ? std::optional<Label>(timeline.events[*cover].label) : std::nullopt;

    cv::Mat status(kStatusStripHeight, img.cols, CV_8UC3, bgr(class_color_rgb(cls)));
    cv::Mat strip(kTimelineStripHeight, img.cols, CV_8UC3, cv::Scalar(30, 30, 30));
    const auto to_x = [&](double s) { return static_cast<int>(std::lround(s / span * (img.cols - 1))); };
    for (const auto& seg : timeline.segments) {
      if (seg.review_state == ReviewState::rejected) continue;
      const cv::Scalar color = seg.kind == SegmentKind::contact ? cv::Scalar(75, 180, 60) : cv::Scalar(90, 60, 140);
      cv::rectangle(strip, cv::Point(to_x(seg.start_seconds), 0),
                    cv::Point(to_x(seg.end_seconds), kTimelineStripHeight / 2 - 1), color, cv::FILLED);
    }
    for (const auto& p : timeline.events) {
      const int x = to_x(p.timestamp_s);
      cv::line(strip, cv::Point(x, kTimelineStripHeight / 2), cv::Point(x, kTimelineStripHeight - 1),
               bgr(class_color_rgb(p.label)), 2);
    }
    const int head = to_x(t);
    cv::line(strip, cv::Point(head, 0), cv::Point(head, kTimelineStripHeight - 1), cv::Scalar(255, 255, 255), 1);

    cv::Mat out;
    cv::vconcat(std::vector<cv::Mat>{status, img, strip}, out);
    const auto path = frames_dir / (std::to_string(f.epoch_ns) + ".png");
    if (!cv::imwrite(path.string(), out)) throw IoError("cannot write " + path.string());
    ++report.frames_written;
  }
  return report;
}

}  // namespace contactsense

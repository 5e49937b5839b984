#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "contactsense/audio.hpp"
#include "contactsense/dataset.hpp"
#include "contactsense/denoise.hpp"
#include "contactsense/model.hpp"
#include "contactsense/segmentation.hpp"

namespace contactsense {

enum class Timestamp { midpoint, start };

struct StreamConfig {
  int window_frames = 30;
  int stride_frames = 15;
  double frame_rate = 30.0;
  double audio_window_s = 0.8;
  Timestamp timestamp = Timestamp::midpoint;

  void validate() const;
  double stride_seconds() const { return stride_frames / frame_rate; }
};

// Single-producer single-consumer ring of audio samples. The producer
// publishes total_samples_seen with release semantics; a reader that copies
// a range re-checks afterwards that no slot of it was overwritten meanwhile.
class RollingBuffer {
 public:
  RollingBuffer(double capacity_seconds, int sample_rate);

  std::size_t capacity() const { return capacity_; }
  int sample_rate() const { return sample_rate_; }

  // Producer side. Throws when the chunk exceeds the capacity.
  void push(std::span<const double> chunk);
  std::uint64_t total_samples_seen() const { return total_.load(std::memory_order_acquire); }

  // Consumer side. Copies samples [start, start + count) of the logical
  // stream; false when not yet available or already overwritten.
  bool read(std::uint64_t start, std::size_t count, std::vector<double>& out) const;

  // Lowest logical sample the consumer still needs; a blocking producer
  // never overwrites it.
  void release_before(std::uint64_t sample) { floor_.store(sample, std::memory_order_release); }
  std::uint64_t needed_from() const { return floor_.load(std::memory_order_acquire); }

 private:
  std::size_t capacity_;
  int sample_rate_;
  std::unique_ptr<std::atomic<double>[]> ring_;
  std::atomic<std::uint64_t> total_{0};
  std::atomic<std::uint64_t> writing_{0};
  std::atomic<std::uint64_t> floor_{0};
};

struct WindowRef {
  std::uint64_t index = 0;
  std::uint64_t start_sample = 0;
  std::size_t length = 0;
  double start_s = 0.0;
};

// Window k starts at k * stride (in samples, rounded) and spans
// audio_window_s. Windows become ready once fully buffered.
class AudioStream {
 public:
  AudioStream(const StreamConfig& cfg, int sample_rate, double capacity_seconds = 4.0);

  // Appends the chunk and returns every window that became ready.
  std::vector<WindowRef> push_audio(std::span<const double> chunk);
  bool read(const WindowRef& w, std::vector<double>& out) const { return buffer_.read(w.start_sample, w.length, out); }
  RollingBuffer& buffer() { return buffer_; }
  const StreamConfig& config() const { return cfg_; }

  WindowRef window(std::uint64_t k) const;
  // Windows that are complete once `total` samples have arrived, from `first`.
  std::vector<WindowRef> ready_windows(std::uint64_t first, std::uint64_t total) const;
  std::uint64_t next_window() const { return next_; }

 private:
  StreamConfig cfg_;
  RollingBuffer buffer_;
  std::size_t window_len_;
  std::uint64_t next_ = 0;
};

struct TimedPrediction {
  double timestamp_s = 0.0;
  Label label = Label::ambient;
  std::array<double, kNumClasses> probabilities{};
  double latency_ms = 0.0;

  double confidence() const { return probabilities[static_cast<std::size_t>(index_of(label))]; }
};

// Turns one audio window into a prediction: optional denoise with a fixed
// profile, mel features, builtin embeddings, fusion model.
class WindowClassifier {
 public:
  WindowClassifier(std::shared_ptr<const FusionModel> model, std::optional<NoiseProfile> profile = {},
                   GateParams gate = {});

  // Frames used for the image slot; windows with no frame within 0.5 s
  // get a zero image embedding, the same convention as training.
  void set_frames(const TrialRecording& trial) { trial_ = trial; }

  TimedPrediction classify(const Waveform& window, double start_s, const StreamConfig& cfg) const;
  // Embedding bundle for one window (no timing).
  EmbeddingBundle embed(const Waveform& window, double start_s) const;

 private:
  std::shared_ptr<const FusionModel> model_;
  std::optional<NoiseProfile> profile_;
  GateParams gate_;
  std::optional<TrialRecording> trial_;
};

// Every window of a whole recording, evaluated in order.
std::vector<TimedPrediction> classify_offline(const Waveform& audio, const WindowClassifier& classifier,
                                              const StreamConfig& cfg);

struct StreamOptions {
  std::size_t chunk_samples = 1600;
  bool realtime = false;          // pace the producer at the audio rate
  double capacity_seconds = 4.0;
};

// Producer thread replays `audio` in chunks through a rolling buffer while
// the calling thread classifies ready windows. In max-speed mode the
// producer waits for the consumer, so no window is ever dropped; in
// realtime mode a lagging consumer loses overwritten windows (logged).
std::vector<TimedPrediction> classify_stream(const Waveform& audio, const WindowClassifier& classifier,
                                             const StreamConfig& cfg, const StreamOptions& opts,
                                             const std::function<void(const TimedPrediction&)>& on_prediction = {});

std::string prediction_json(const TimedPrediction& p);

// --- overlay -------------------------------------------------------------------

struct Timeline {
  std::vector<TimedPrediction> events;
  std::vector<ContactSegment> segments;
};

std::string to_json(const Timeline& t);
Timeline timeline_from_json(const std::string& text);

struct OverlayReport {
  std::size_t frames_written = 0;
  bool frames_missing = false;
};

// Prediction covering a frame time: the one whose audio window contains it,
// nearest midpoint first.
std::optional<std::size_t> covering_prediction(const std::vector<TimedPrediction>& preds, double t,
                                               const StreamConfig& cfg);

inline constexpr int kStatusStripHeight = 12;
inline constexpr int kTimelineStripHeight = 24;
std::array<std::uint8_t, 3> class_color_rgb(std::optional<Label> label);

// Writes <out_dir>/timeline.json and <out_dir>/frames/<epoch_ns>.png, each
// frame topped by a status strip in the covering prediction's class colour
// and footed by a timeline strip with segments and a playhead.
OverlayReport overlay_export(const Timeline& timeline, const TrialRecording* trial, double duration_s,
                             const StreamConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace contactsense

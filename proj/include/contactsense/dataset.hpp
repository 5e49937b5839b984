#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "contactsense/denoise.hpp"
#include "contactsense/labels.hpp"
#include "contactsense/segmentation.hpp"
#include "contactsense/tensor_io.hpp"

namespace contactsense {

struct FrameRef {
  std::int64_t epoch_ns = 0;
  std::filesystem::path path;
};

// One recorded interaction. On disk: <dir>/trial.wav, <dir>/trial.json,
// <dir>/frames/<epoch_ns>.{jpg,png}. Audio sample 0 sits at audio_start_ns
// on the shared clock.
struct TrialRecording {
  std::string trial_id;
  std::filesystem::path dir;
  Embodiment embodiment = Embodiment::probe;
  Label declared_class = Label::leaf;
  std::int64_t audio_start_ns = 0;
  std::map<std::string, std::string> meta;
  std::vector<FrameRef> frames;  // sorted by epoch_ns

  std::filesystem::path audio_path() const { return dir / "trial.wav"; }
  std::filesystem::path frames_dir() const { return dir / "frames"; }
  double frame_time(const FrameRef& f) const { return static_cast<double>(f.epoch_ns - audio_start_ns) * 1e-9; }
};

TrialRecording load_trial(const std::filesystem::path& dir);
void write_trial_json(const TrialRecording& t);

struct WindowSpec {
  double start_s = 0.0;
  Label label = Label::ambient;
  std::size_t segment_index = 0;
};

// Tiles each non-rejected segment with windows at `stride_s`. When the
// stride leaves an uncovered tail, one more window is placed flush with the
// segment end. Segments shorter than the window yield nothing. Contact
// windows take the segment label when present, else `contact_label`.
std::vector<WindowSpec> window_segments(const std::vector<ContactSegment>& segments, double window_len_s,
                                        double stride_s, Label contact_label);

struct ImageRef {
  std::filesystem::path frame_path;
  double frame_time_s = 0.0;
  int resize_short = 256;
  int crop = 224;

  friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

inline constexpr double kMaxFrameOffsetSeconds = 0.5;

// Nearest frame to the window midpoint (ties go to the earlier frame);
// nullopt when no frame lies within kMaxFrameOffsetSeconds.
std::optional<ImageRef> pair_frame(const TrialRecording& trial, double window_start_s, double window_len_s);

enum class Split { train, val, test };
std::string_view to_string(Split s);
std::optional<Split> parse_split(std::string_view s);

struct SampleRecord {
  std::string sample_id;
  std::string trial_id;
  double window_start_s = 0.0;
  double window_len_s = 0.8;
  Label label = Label::ambient;
  std::optional<ImageRef> image;  // nullopt: image-missing
  Split split = Split::train;
  Embodiment embodiment = Embodiment::probe;
  std::size_t segment_index = 0;

  bool image_missing() const { return !image.has_value(); }
  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

inline constexpr int kManifestSchemaVersion = 1;

struct Manifest {
  int schema_version = kManifestSchemaVersion;
  std::string feature_params_fingerprint;
  std::vector<SampleRecord> samples;

  std::array<std::size_t, kNumClasses> class_counts() const;
};

// JSON Lines: one header object, then one SampleRecord per line.
std::string to_jsonl(const Manifest& m);
Manifest manifest_from_jsonl(const std::string& text);
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const Manifest& m);

inline constexpr std::size_t kMinSamplesPerClass = 5;

// Group-aware split: every trial lands wholly in train or val. Trials are
// stratified by their dominant contact label (ambient-only trials form
// their own stratum), shuffled with `seed`, and the first
// round(ratio * n) of each stratum go to train, keeping at least one trial
// per side whenever a stratum has two or more. Classes with fewer than
// kMinSamplesPerClass samples are rejected.
void stratified_split(Manifest& m, double ratio, std::uint64_t seed);

// The same assignment without the per-class sample minimum.
void group_split(Manifest& m, double ratio, std::uint64_t seed);

// Hash of the mel, image and augmentation constants.
std::string feature_params_fingerprint();

struct BuildParams {
  double window_len_s = 0.8;
  double stride_s = 0.4;
  double eval_stride_s = 0.8;  // validation trials
  double split_ratio = 0.8;
  std::uint64_t seed = 0;
  std::optional<std::size_t> balance_cap;
  bool materialize = true;
  std::map<Embodiment, NoiseProfile> noise_profiles;
  GateParams gate;
  int jobs = 1;
};

struct BuildReport {
  Manifest manifest;
  std::size_t image_missing = 0;
  std::vector<std::string> errors;  // per-trial failures
};

// Tensor file names under <out_dir>/tensors.
std::filesystem::path mel_tensor_path(const std::filesystem::path& out_dir, const std::string& sample_id);
std::filesystem::path image_tensor_path(const std::filesystem::path& out_dir, const std::string& sample_id);

// Writes <out_dir>/manifest.jsonl (atomically) and, when materialising,
// one mel tensor [1,128,1024] and one image tensor [3,224,224] per sample.
BuildReport build_dataset(const std::vector<TrialRecording>& trials,
                          const std::map<std::string, SegmentFile>& segments, const BuildParams& params,
                          const std::filesystem::path& out_dir);

// Loads a frame, resizes its shorter side to 256, centre-crops 224x224 and
// normalises per channel. Returns CHW RGB.
Tensor preprocess_image(const std::filesystem::path& path);

// Audio for one window at the working rate, optionally denoised.
Waveform load_working_audio(const TrialRecording& trial, const NoiseProfile* profile, const GateParams& gate);

// [start, start + len) of `w`, zero-padded past either end.
Waveform window_audio(const Waveform& w, double start_s, double len_s);

}  // namespace contactsense

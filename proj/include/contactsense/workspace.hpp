#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "contactsense/dataset.hpp"
#include "contactsense/denoise.hpp"
#include "contactsense/model.hpp"
#include "contactsense/segmentation.hpp"

namespace contactsense {

// workspace/config.json. Paths are relative to the workspace root unless
// absolute.
struct WorkspaceConfig {
  int sample_rate = 16000;
  bool denoise = true;
  SegmentationParams segmentation;
  EnvelopeParams envelope;
  GateParams gate;
  std::map<Embodiment, std::string> noise_profiles = {{Embodiment::probe, "profiles/probe.json"},
                                                      {Embodiment::robot, "profiles/robot.json"}};
  std::map<Slot, std::string> embedding_stores;  // external stores override builtin embeddings
};

std::string to_json(const WorkspaceConfig& c);
WorkspaceConfig workspace_config_from_json(const std::string& text);

// Applies the keys present in `j` (alpha, beta, delta_min, gamma_squeeze,
// percentiles, min_ambient) on top of `base` and validates. Unknown keys
// are reported together with invalid values.
SegmentationParams segmentation_params_from_json(const nlohmann::json& j, SegmentationParams base = {});

class Workspace {
 public:
  // Creates the directory layout when missing and loads config.json.
  static Workspace open(const std::filesystem::path& root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path trials_dir() const { return root_ / "trials"; }
  std::filesystem::path profiles_dir() const { return root_ / "profiles"; }
  std::filesystem::path segments_dir() const { return root_ / "segments"; }
  std::filesystem::path datasets_dir() const { return root_ / "datasets"; }
  std::filesystem::path checkpoints_dir() const { return root_ / "checkpoints"; }
  std::filesystem::path reports_dir() const { return root_ / "reports"; }
  std::filesystem::path resolve(const std::string& p) const;

  const WorkspaceConfig& config() const { return config_; }
  WorkspaceConfig& config() { return config_; }
  void save_config() const;

  std::vector<std::string> trial_ids() const;
  bool has_trial(const std::string& id) const;
  TrialRecording trial(const std::string& id) const;
  std::filesystem::path segment_path(const std::string& id) const;
  std::optional<SegmentFile> saved_segments(const std::string& id) const;
  std::map<std::string, SegmentFile> all_saved_segments() const;

  std::optional<NoiseProfile> noise_profile(Embodiment e) const;
  std::map<Embodiment, NoiseProfile> noise_profiles() const;

  // Trial audio at the working rate, denoised when enabled and a profile
  // for the trial's embodiment exists.
  Waveform working_audio(const TrialRecording& t) const;

  // The single segmentation entry point shared by the CLI and the review
  // service, so both produce identical documents for identical params.
  SegmentFile segment(const TrialRecording& t, const SegmentationParams& p, SegmentationResult* detail = nullptr) const;

 private:
  std::filesystem::path root_;
  WorkspaceConfig config_;
};

}  // namespace contactsense

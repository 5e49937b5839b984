#include "contactsense/workspace.hpp"

#include <algorithm>

#include "contactsense/error.hpp"
#include "contactsense/log.hpp"
#include "contactsense/util.hpp"

namespace contactsense {

using ordered_json = nlohmann::ordered_json;

std::string to_json(const WorkspaceConfig& c) {
  ordered_json j;
  j["sample_rate"] = c.sample_rate;
  j["denoise"] = c.denoise;
  const auto& s = c.segmentation;
  j["segmentation"] = {{"alpha", s.alpha_offset},
                       {"beta", s.beta_factor},
                       {"delta_min", s.delta_min_seconds},
                       {"gamma_squeeze", s.gamma_squeeze_seconds},
                       {"percentiles", {s.noise_percentile, s.signal_percentile}},
                       {"min_ambient", s.min_ambient_seconds}};
  j["envelope"] = {{"window_s", c.envelope.window_seconds}, {"hop_s", c.envelope.hop_seconds}};
  j["gate"] = {{"n_std_thresh", c.gate.n_std_thresh},
               {"prop_decrease", c.gate.prop_decrease},
               {"smooth_freq_bins", c.gate.mask_smooth_freq_bins},
               {"smooth_time_frames", c.gate.mask_smooth_time_frames},
               {"transition_db", c.gate.transition_db}};
  j["noise_profiles"] = ordered_json::object();
  for (const auto& [e, p] : c.noise_profiles) j["noise_profiles"][std::string(to_string(e))] = p;
  j["embedding_stores"] = ordered_json::object();
  for (const auto& [s2, p] : c.embedding_stores) j["embedding_stores"][std::string(to_string(s2))] = p;
  return j.dump(2) + "\n";
}

SegmentationParams segmentation_params_from_json(const nlohmann::json& j, SegmentationParams p) {
  if (!j.is_object()) throw ParameterError("segmentation params must be a JSON object");
  std::vector<std::string> bad;
  auto num = [&](const char* key, double& dst) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) {
      bad.push_back(key);
      return;
    }
    dst = j[key].get<double>();
  };
  for (const auto& [k, v] : j.items()) {
    static const std::vector<std::string> known = {"alpha", "beta", "delta_min", "gamma_squeeze", "percentiles",
                                                   "min_ambient", "envelope"};
    if (std::find(known.begin(), known.end(), k) == known.end()) bad.push_back(k + " (unknown)");
  }
  num("alpha", p.alpha_offset);
  num("beta", p.beta_factor);
  num("delta_min", p.delta_min_seconds);
  num("gamma_squeeze", p.gamma_squeeze_seconds);
  num("min_ambient", p.min_ambient_seconds);
  if (j.contains("percentiles")) {
    const auto& pc = j["percentiles"];
    if (!pc.is_array() || pc.size() != 2 || !pc[0].is_number() || !pc[1].is_number()) {
      bad.push_back("percentiles");
    } else {
      p.noise_percentile = pc[0].get<double>();
      p.signal_percentile = pc[1].get<double>();
    }
  }
  if (!bad.empty()) {
    std::string msg = "invalid segmentation params:";
    for (const auto& b : bad) msg += " " + b;
    throw ParameterError(msg);
  }
  p.validate();
  return p;
}

WorkspaceConfig workspace_config_from_json(const std::string& text) {
  WorkspaceConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    if (c.sample_rate != 16000) throw ParameterError("workspace sample_rate must be 16000");
    c.denoise = j.value("denoise", c.denoise);
    if (j.contains("segmentation")) c.segmentation = segmentation_params_from_json(j["segmentation"], c.segmentation);
    if (j.contains("envelope")) {
      c.envelope.window_seconds = j["envelope"].value("window_s", c.envelope.window_seconds);
      c.envelope.hop_seconds = j["envelope"].value("hop_s", c.envelope.hop_seconds);
    }
    if (j.contains("gate")) {
      const auto& g = j["gate"];
      c.gate.n_std_thresh = g.value("n_std_thresh", c.gate.n_std_thresh);
      c.gate.prop_decrease = g.value("prop_decrease", c.gate.prop_decrease);
      c.gate.mask_smooth_freq_bins = g.value("smooth_freq_bins", c.gate.mask_smooth_freq_bins);
      c.gate.mask_smooth_time_frames = g.value("smooth_time_frames", c.gate.mask_smooth_time_frames);
      c.gate.transition_db = g.value("transition_db", c.gate.transition_db);
      c.gate.validate();
    }
    if (j.contains("noise_profiles")) {
      c.noise_profiles.clear();
      for (const auto& [k, v] : j["noise_profiles"].items()) {
        const auto e = parse_embodiment(k);
        if (!e) throw ParameterError("unknown embodiment '" + k + "' in noise_profiles");
        c.noise_profiles[*e] = v.get<std::string>();
      }
    }
    if (j.contains("embedding_stores")) {
      for (const auto& [k, v] : j["embedding_stores"].items()) {
        const auto s = parse_slot(k);
        if (!s) throw ParameterError("unknown slot '" + k + "' in embedding_stores");
        c.embedding_stores[*s] = v.get<std::string>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed config.json: ") + e.what());
  }
  return c;
}

Workspace Workspace::open(const std::filesystem::path& root) {
  Workspace ws;
  ws.root_ = std::filesystem::absolute(root).lexically_normal();
  for (const auto& d : {ws.trials_dir(), ws.profiles_dir(), ws.segments_dir(), ws.datasets_dir(), ws.checkpoints_dir(),
                        ws.reports_dir()}) {
    std::error_code ec;
    std::filesystem::create_directories(d, ec);
    if (ec) throw IoError("cannot create " + d.string() + ": " + ec.message());
  }
  const auto cfg = ws.root_ / "config.json";
  if (std::filesystem::exists(cfg)) ws.config_ = workspace_config_from_json(read_file(cfg));
  return ws;
}

std::filesystem::path Workspace::resolve(const std::string& p) const {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : root_ / path;
}

void Workspace::save_config() const { atomic_write(root_ / "config.json", to_json(config_)); }

std::vector<std::string> Workspace::trial_ids() const {
  std::vector<std::string> ids;
  for (const auto& e : std::filesystem::directory_iterator(trials_dir())) {
    if (e.is_directory() && std::filesystem::exists(e.path() / "trial.json")) ids.push_back(e.path().filename().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

bool Workspace::has_trial(const std::string& id) const {
  if (id.empty() || id.find('/') != std::string::npos || id == "." || id == "..") return false;
  return std::filesystem::exists(trials_dir() / id / "trial.json");
}

TrialRecording Workspace::trial(const std::string& id) const {
  if (!has_trial(id)) throw NotFoundError("unknown trial '" + id + "'");
  auto t = load_trial(trials_dir() / id);
  t.trial_id = id;
  return t;
}

std::filesystem::path Workspace::segment_path(const std::string& id) const {
  return segments_dir() / (id + ".segments.json");
}

std::optional<SegmentFile> Workspace::saved_segments(const std::string& id) const {
  const auto p = segment_path(id);
  if (!std::filesystem::exists(p)) return std::nullopt;
  return segment_file_from_json(read_file(p));
}

std::map<std::string, SegmentFile> Workspace::all_saved_segments() const {
  std::map<std::string, SegmentFile> out;
  for (const auto& id : trial_ids())
    if (auto s = saved_segments(id)) out.emplace(id, std::move(*s));
  return out;
}

std::optional<NoiseProfile> Workspace::noise_profile(Embodiment e) const {
  const auto it = config_.noise_profiles.find(e);
  if (it == config_.noise_profiles.end()) return std::nullopt;
  const auto path = resolve(it->second);
  if (!std::filesystem::exists(path)) return std::nullopt;
  return load_noise_profile(path);
}

std::map<Embodiment, NoiseProfile> Workspace::noise_profiles() const {
  std::map<Embodiment, NoiseProfile> out;
  for (auto e : {Embodiment::probe, Embodiment::robot})
    if (auto p = noise_profile(e)) out.emplace(e, std::move(*p));
  return out;
}

Waveform Workspace::working_audio(const TrialRecording& t) const {
  std::optional<NoiseProfile> profile;
  if (config_.denoise) {
    profile = noise_profile(t.embodiment);
    if (!profile) log_warn(t.trial_id + ": no noise profile for " + std::string(to_string(t.embodiment)) + ", not denoising");
  }
  return load_working_audio(t, profile ? &*profile : nullptr, config_.gate);
}

SegmentFile Workspace::segment(const TrialRecording& t, const SegmentationParams& p, SegmentationResult* detail) const {
  p.validate();
  auto result = segment_trial(working_audio(t), p, config_.envelope);
  SegmentFile f;
  f.trial_id = t.trial_id;
  f.params = p;
  f.envelope_params = config_.envelope;
  f.thresholds = result.thresholds;
  f.segments = result.all_segments();
  if (detail != nullptr) *detail = std::move(result);
  return f;
}

}  // namespace contactsense

#include "contactsense/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <set>
#include <sstream>

#include "contactsense/error.hpp"
#include "contactsense/features.hpp"
#include "contactsense/log.hpp"
#include "contactsense/random.hpp"
#include "contactsense/util.hpp"
#include "parallel.hpp"

namespace contactsense {

using ordered_json = nlohmann::ordered_json;

namespace {
constexpr double kTimeEps = 1e-9;
constexpr std::array<float, 3> kImageMean = {0.485f, 0.456f, 0.406f};
constexpr std::array<float, 3> kImageStd = {0.229f, 0.224f, 0.225f};
}  // namespace

// --- trials --------------------------------------------------------------

TrialRecording load_trial(const std::filesystem::path& dir) {
  const auto meta_path = dir / "trial.json";
  if (!std::filesystem::exists(meta_path)) throw NotFoundError("missing " + meta_path.string());
  TrialRecording t;
  t.dir = dir;
  try {
    const auto doc = nlohmann::json::parse(read_file(meta_path));
    t.trial_id = doc.value("trial_id", dir.filename().string());
    const auto emb = parse_embodiment(doc.value("embodiment", std::string("probe")));
    if (!emb) throw FormatError(meta_path.string() + ": unknown embodiment");
    t.embodiment = *emb;
    const auto cls = parse_label(doc.at("declared_class").get<std::string>());
    if (!cls || *cls == Label::ambient) throw FormatError(meta_path.string() + ": declared_class must be leaf, twig or trunk");
    t.declared_class = *cls;
    t.audio_start_ns = doc.value("audio_start_ns", std::int64_t{0});
    if (doc.contains("meta")) {
      for (const auto& [k, v] : doc["meta"].items()) t.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }

  if (std::filesystem::is_directory(t.frames_dir())) {
    for (const auto& entry : std::filesystem::directory_iterator(t.frames_dir())) {
      const auto ext = entry.path().extension().string();
      if (ext != ".png" && ext != ".jpg" && ext != ".jpeg") continue;
      try {
        std::size_t used = 0;
        const auto stem = entry.path().stem().string();
        const std::int64_t ns = std::stoll(stem, &used);
        if (used != stem.size()) continue;
        t.frames.push_back(FrameRef{ns, entry.path()});
      } catch (const std::exception&) {
        continue;
      }
    }
  }
  std::sort(t.frames.begin(), t.frames.end(), [](const FrameRef& a, const FrameRef& b) { return a.epoch_ns < b.epoch_ns; });
  for (std::size_t i = 1; i < t.frames.size(); ++i) {
    if (t.frames[i].epoch_ns == t.frames[i - 1].epoch_ns) {
      throw FormatError(t.trial_id + ": duplicate frame timestamp " + std::to_string(t.frames[i].epoch_ns));
    }
  }
  return t;
}

void write_trial_json(const TrialRecording& t) {
  ordered_json doc;
  doc["trial_id"] = t.trial_id;
  doc["embodiment"] = std::string(to_string(t.embodiment));
  doc["declared_class"] = std::string(to_string(t.declared_class));
  doc["audio_start_ns"] = t.audio_start_ns;
  doc["meta"] = ordered_json::object();
  for (const auto& [k, v] : t.meta) doc["meta"][k] = v;
  atomic_write(t.dir / "trial.json", doc.dump(2) + "\n");
}

// --- windows and frames ----------------------------------------------------

std::vector<WindowSpec> window_segments(const std::vector<ContactSegment>& segments, double window_len_s,
                                        double stride_s, Label contact_label) {
  if (!(window_len_s > 0.0) || !(stride_s > 0.0)) throw ParameterError("window length and stride must be positive");
  std::vector<WindowSpec> out;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& s = segments[i];
    if (s.review_state == ReviewState::rejected) continue;
    const Label label = s.kind == SegmentKind::ambient ? Label::ambient : s.label.value_or(contact_label);
    if (s.end_seconds - s.start_seconds + kTimeEps < window_len_s) continue;
    double last_end = s.start_seconds;
    for (std::size_t j = 0;; ++j) {
      const double start = s.start_seconds + static_cast<double>(j) * stride_s;
      if (start + window_len_s > s.end_seconds + kTimeEps) break;
      out.push_back(WindowSpec{start, label, i});
      last_end = start + window_len_s;
    }
    if (s.end_seconds - last_end > kTimeEps) out.push_back(WindowSpec{s.end_seconds - window_len_s, label, i});
  }
  return out;
}

std::optional<ImageRef> pair_frame(const TrialRecording& trial, double window_start_s, double window_len_s) {
  if (trial.frames.empty()) return std::nullopt;
  const std::int64_t mid = trial.audio_start_ns + std::llround((window_start_s + window_len_s / 2.0) * 1e9);
  auto it = std::lower_bound(trial.frames.begin(), trial.frames.end(), mid,
                             [](const FrameRef& f, std::int64_t t) { return f.epoch_ns < t; });
  const FrameRef* best = nullptr;
  std::int64_t best_d = 0;
  if (it != trial.frames.begin()) {
    best = &*std::prev(it);
    best_d = mid - best->epoch_ns;
  }
  if (it != trial.frames.end()) {
    const std::int64_t d = it->epoch_ns - mid;
    if (best == nullptr || d < best_d) {  // strict: ties keep the earlier frame
      best = &*it;
      best_d = d;
    }
  }
  if (best_d > static_cast<std::int64_t>(kMaxFrameOffsetSeconds * 1e9)) return std::nullopt;
  return ImageRef{best->path, trial.frame_time(*best), 256, 224};
}

// --- manifest ---------------------------------------------------------------

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  return std::nullopt;
}

std::array<std::size_t, kNumClasses> Manifest::class_counts() const {
  std::array<std::size_t, kNumClasses> c{};
  for (const auto& s : samples) ++c[static_cast<std::size_t>(index_of(s.label))];
  return c;
}

std::string to_jsonl(const Manifest& m) {
  std::string out;
  ordered_json header;
  header["schema_version"] = m.schema_version;
  header["kind"] = "contactsense-manifest";
  header["fingerprint"] = m.feature_params_fingerprint;
  header["n_samples"] = m.samples.size();
  ordered_json counts;
  const auto cc = m.class_counts();
  for (int i = 0; i < kNumClasses; ++i) counts[std::string(kLabelNames[i])] = cc[static_cast<std::size_t>(i)];
  header["class_counts"] = counts;
  out += header.dump() + "\n";
  for (const auto& s : m.samples) {
    ordered_json j;
    j["sample_id"] = s.sample_id;
    j["trial_id"] = s.trial_id;
    j["window_start_s"] = s.window_start_s;
    j["window_len_s"] = s.window_len_s;
    j["label"] = std::string(to_string(s.label));
    if (s.image) {
      j["image"] = {{"frame", s.image->frame_path.generic_string()},
                    {"frame_time_s", s.image->frame_time_s},
                    {"resize", s.image->resize_short},
                    {"crop", s.image->crop}};
    } else {
      j["image"] = nullptr;
    }
    j["image_missing"] = s.image_missing();
    j["split"] = std::string(to_string(s.split));
    j["embodiment"] = std::string(to_string(s.embodiment));
    j["segment_index"] = s.segment_index;
    out += j.dump() + "\n";
  }
  return out;
}

Manifest manifest_from_jsonl(const std::string& text) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  std::set<std::string> ids;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (header) {
        m.schema_version = j.at("schema_version").get<int>();
        if (m.schema_version != kManifestSchemaVersion) {
          throw FormatError("unsupported manifest schema_version " + std::to_string(m.schema_version));
        }
        m.feature_params_fingerprint = j.value("fingerprint", std::string());
        header = false;
        continue;
      }
      SampleRecord s;
      s.sample_id = j.at("sample_id").get<std::string>();
      if (!ids.insert(s.sample_id).second) throw FormatError("duplicate sample_id " + s.sample_id);
      s.trial_id = j.at("trial_id").get<std::string>();
      s.window_start_s = j.at("window_start_s").get<double>();
      s.window_len_s = j.at("window_len_s").get<double>();
      const auto l = parse_label(j.at("label").get<std::string>());
      if (!l) throw FormatError("unknown label in manifest");
      s.label = *l;
      if (!j.at("image").is_null()) {
        const auto& im = j["image"];
        s.image = ImageRef{im.at("frame").get<std::string>(), im.at("frame_time_s").get<double>(),
                           im.at("resize").get<int>(), im.at("crop").get<int>()};
      }
      const auto sp = parse_split(j.at("split").get<std::string>());
      if (!sp) throw FormatError("unknown split in manifest");
      s.split = *sp;
      const auto e = parse_embodiment(j.at("embodiment").get<std::string>());
      if (!e) throw FormatError("unknown embodiment in manifest");
      s.embodiment = *e;
      s.segment_index = j.value("segment_index", std::size_t{0});
      m.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
  if (header) throw FormatError("manifest has no header line");
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) { return manifest_from_jsonl(read_file(path)); }
void save_manifest(const std::filesystem::path& path, const Manifest& m) { atomic_write(path, to_jsonl(m)); }

// --- split -----------------------------------------------------------------

void stratified_split(Manifest& m, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ParameterError("split ratio must lie in (0, 1)");
  const auto counts = m.class_counts();
  for (int c = 0; c < kNumClasses; ++c) {
    const auto n = counts[static_cast<std::size_t>(c)];
    if (n > 0 && n < kMinSamplesPerClass) {
      throw ParameterError("class '" + std::string(kLabelNames[c]) + "' has " + std::to_string(n) +
                           " samples; at least " + std::to_string(kMinSamplesPerClass) + " are required");
    }
  }
  group_split(m, ratio, seed);
}

void group_split(Manifest& m, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ParameterError("split ratio must lie in (0, 1)");

  // trial -> per-label counts, in first-seen order
  std::vector<std::string> trials;
  std::map<std::string, std::array<std::size_t, kNumClasses>> per_trial;
  for (const auto& s : m.samples) {
    auto [it, inserted] = per_trial.try_emplace(s.trial_id, std::array<std::size_t, kNumClasses>{});
    if (inserted) trials.push_back(s.trial_id);
    ++it->second[static_cast<std::size_t>(index_of(s.label))];
  }
  std::sort(trials.begin(), trials.end());

  std::array<std::vector<std::string>, kNumClasses> strata;
  for (const auto& t : trials) {
    const auto& c = per_trial[t];
    int best = index_of(Label::ambient);
    std::size_t best_n = 0;
    for (int k = 0; k < kNumClasses; ++k) {
      if (k == index_of(Label::ambient)) continue;
      if (c[static_cast<std::size_t>(k)] > best_n) {
        best = k;
        best_n = c[static_cast<std::size_t>(k)];
      }
    }
    strata[static_cast<std::size_t>(best)].push_back(t);
  }

  std::map<std::string, Split> assignment;
  for (int k = 0; k < kNumClasses; ++k) {
    auto groups = strata[static_cast<std::size_t>(k)];
    Rng rng(splitmix64(seed ^ (0x5151ULL + static_cast<std::uint64_t>(k))));
    rng.shuffle(groups.begin(), groups.end());
    const auto g = groups.size();
    std::size_t n_train = g;
    if (g >= 2) {
      n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(g)));
      n_train = std::clamp<std::size_t>(n_train, 1, g - 1);
    }
    for (std::size_t i = 0; i < g; ++i) assignment[groups[i]] = i < n_train ? Split::train : Split::val;
  }
  for (auto& s : m.samples) s.split = assignment.at(s.trial_id);
}

std::string feature_params_fingerprint() {
  ordered_json j;
  j["mel"] = {{"sample_rate", MelConfig::kSampleRate}, {"n_mels", MelConfig::kMels}, {"frames", MelConfig::kFrames},
              {"window", MelConfig::kWindow},         {"hop", MelConfig::kHop},     {"n_fft", MelConfig::kFft},
              {"fmin", MelConfig::kFmin},             {"fmax", MelConfig::kFmax},   {"floor_db", MelConfig::kDbFloor},
              {"scale", "slaney"}};
  j["image"] = {{"resize_short", 256}, {"crop", 224}, {"mean", kImageMean}, {"std", kImageStd}, {"order", "RGB"}};
  const auto aug = AugmentParams{};
  j["augment"] = {{"pitch", {aug.pitch_semitones.lo, aug.pitch_semitones.hi}},
                  {"gain_db", {aug.gain_db.lo, aug.gain_db.hi}},
                  {"noise_snr_db", {aug.noise_snr_db.lo, aug.noise_snr_db.hi}},
                  {"motor_snr_db", {aug.motor_snr_db.lo, aug.motor_snr_db.hi}},
                  {"motor_probability", aug.motor_probability}};
  return sha256_hex(j.dump()).substr(0, 16);
}

// --- materialisation ----------------------------------------------------------

std::filesystem::path mel_tensor_path(const std::filesystem::path& out_dir, const std::string& sample_id) {
  return out_dir / "tensors" / (sample_id + ".mel.bin");
}

std::filesystem::path image_tensor_path(const std::filesystem::path& out_dir, const std::string& sample_id) {
  return out_dir / "tensors" / (sample_id + ".img.bin");
}

Tensor preprocess_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw FormatError("cannot decode image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  const double scale = 256.0 / std::min(rgb.cols, rgb.rows);
  const int w = std::max(224, static_cast<int>(std::lround(rgb.cols * scale)));
  const int h = std::max(224, static_cast<int>(std::lround(rgb.rows * scale)));
  cv::Mat resized;
  cv::resize(rgb, resized, cv::Size(w, h), 0, 0, cv::INTER_AREA);
  const cv::Mat crop = resized(cv::Rect((w - 224) / 2, (h - 224) / 2, 224, 224));

  Tensor t;
  t.dims = {3, 224, 224};
  t.data.resize(3 * 224 * 224);
  for (int y = 0; y < 224; ++y) {
    for (int x = 0; x < 224; ++x) {
      const auto px = crop.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) {
        const float v = static_cast<float>(px[c]) / 255.0f;
        t.data[static_cast<std::size_t>((c * 224 + y) * 224 + x)] =
            (v - kImageMean[static_cast<std::size_t>(c)]) / kImageStd[static_cast<std::size_t>(c)];
      }
    }
  }
  return t;
}

Waveform load_working_audio(const TrialRecording& trial, const NoiseProfile* profile, const GateParams& gate) {
  Waveform w = resample(read_wav(trial.audio_path()), MelConfig::kSampleRate);
  if (profile != nullptr) w = spectral_gate(w, *profile, gate);
  return w;
}

Waveform window_audio(const Waveform& w, double start_s, double len_s) {
  const auto begin = static_cast<std::size_t>(std::max<long long>(0, std::llround(start_s * w.sample_rate())));
  const auto count = static_cast<std::size_t>(std::llround(len_s * w.sample_rate()));
  std::vector<double> x(count, 0.0);
  for (std::size_t i = 0; i < count && begin + i < w.size(); ++i) x[i] = w.samples()[begin + i];
  return Waveform(std::move(x), w.sample_rate());
}

namespace {

void materialize_trial(const TrialRecording& trial, const std::vector<const SampleRecord*>& samples,
                       const BuildParams& params, const std::filesystem::path& out_dir) {
  const auto it = params.noise_profiles.find(trial.embodiment);
  const NoiseProfile* profile = it == params.noise_profiles.end() ? nullptr : &it->second;
  const Waveform audio = load_working_audio(trial, profile, params.gate);
  for (const auto* s : samples) {
    const MelSpectrogram mel = mel_spectrogram(window_audio(audio, s->window_start_s, s->window_len_s));
    Tensor t;
    t.dims = {1, MelConfig::kMels, MelConfig::kFrames};
    t.data.resize(static_cast<std::size_t>(MelConfig::kMels) * MelConfig::kFrames);
    for (int m = 0; m < MelConfig::kMels; ++m)
      for (int f = 0; f < MelConfig::kFrames; ++f)
        t.data[static_cast<std::size_t>(m) * MelConfig::kFrames + static_cast<std::size_t>(f)] =
            static_cast<float>(mel.values(m, f));
    write_tensor(mel_tensor_path(out_dir, s->sample_id), t);
    if (s->image) write_tensor(image_tensor_path(out_dir, s->sample_id), preprocess_image(s->image->frame_path));
  }
}

}  // namespace

BuildReport build_dataset(const std::vector<TrialRecording>& trials_in,
                          const std::map<std::string, SegmentFile>& segments, const BuildParams& params,
                          const std::filesystem::path& out_dir) {
  BuildReport report;
  report.manifest.feature_params_fingerprint = feature_params_fingerprint();

  std::vector<const TrialRecording*> trials;
  for (const auto& t : trials_in) trials.push_back(&t);
  std::sort(trials.begin(), trials.end(),
            [](const TrialRecording* a, const TrialRecording* b) { return a->trial_id < b->trial_id; });

  auto windowed = [&](const TrialRecording& t, const SegmentFile& seg, double stride, std::vector<SampleRecord>& out) {
    std::map<std::size_t, int> per_segment;
    for (const auto& w : window_segments(seg.segments, params.window_len_s, stride, t.declared_class)) {
      SampleRecord s;
      const int n = per_segment[w.segment_index]++;
      s.sample_id = t.trial_id + "_s" + std::to_string(w.segment_index) + "_w" + std::to_string(n);
      s.trial_id = t.trial_id;
      s.window_start_s = w.start_s;
      s.window_len_s = params.window_len_s;
      s.label = w.label;
      s.image = pair_frame(t, w.start_s, params.window_len_s);
      s.embodiment = t.embodiment;
      s.segment_index = w.segment_index;
      out.push_back(std::move(s));
    }
  };

  std::vector<SampleRecord> samples;
  for (const auto* t : trials) {
    const auto it = segments.find(t->trial_id);
    if (it == segments.end()) {
      report.errors.push_back(t->trial_id + ": no segment file");
      continue;
    }
    windowed(*t, it->second, params.stride_s, samples);
  }

  report.manifest.samples = std::move(samples);
  if (!report.manifest.samples.empty()) stratified_split(report.manifest, params.split_ratio, params.seed);

  // validation trials are re-tiled without overlap so eval counts are not inflated
  if (params.eval_stride_s != params.stride_s && !report.manifest.samples.empty()) {
    std::set<std::string> val_trials;
    for (const auto& s : report.manifest.samples)
      if (s.split == Split::val) val_trials.insert(s.trial_id);
    std::vector<SampleRecord> rebuilt;
    for (const auto* t : trials) {
      if (val_trials.count(t->trial_id) == 0) continue;
      const auto first = rebuilt.size();
      windowed(*t, segments.at(t->trial_id), params.eval_stride_s, rebuilt);
      for (auto i = first; i < rebuilt.size(); ++i) rebuilt[i].split = Split::val;
    }
    std::vector<SampleRecord> merged;
    auto next_val = rebuilt.begin();
    for (auto& s : report.manifest.samples) {
      if (val_trials.count(s.trial_id) == 0) {
        merged.push_back(std::move(s));
        continue;
      }
      // emit the re-tiled trial once, where its first sample used to be
      while (next_val != rebuilt.end() && next_val->trial_id == s.trial_id) merged.push_back(std::move(*next_val++));
    }
    report.manifest.samples = std::move(merged);
  }

  if (params.balance_cap) {
    auto& all = report.manifest.samples;
    std::array<std::vector<std::size_t>, kNumClasses> by_class;
    for (std::size_t i = 0; i < all.size(); ++i) by_class[static_cast<std::size_t>(index_of(all[i].label))].push_back(i);
    std::vector<bool> keep(all.size(), false);
    Rng rng(splitmix64(params.seed ^ 0xBA1A9CEULL));
    for (auto& idx : by_class) {
      rng.shuffle(idx.begin(), idx.end());
      for (std::size_t k = 0; k < idx.size() && k < *params.balance_cap; ++k) keep[idx[k]] = true;
    }
    std::vector<SampleRecord> kept;
    for (std::size_t i = 0; i < all.size(); ++i)
      if (keep[i]) kept.push_back(std::move(all[i]));
    all = std::move(kept);
  }

  if (params.materialize) {
    std::vector<std::vector<const SampleRecord*>> per_trial(trials.size());
    std::map<std::string, std::size_t> trial_index;
    for (std::size_t i = 0; i < trials.size(); ++i) trial_index[trials[i]->trial_id] = i;
    for (const auto& s : report.manifest.samples) per_trial[trial_index.at(s.trial_id)].push_back(&s);
    std::vector<std::string> failures(trials.size());
    detail::parallel_for(trials.size(), params.jobs, [&](std::size_t i) {
      if (per_trial[i].empty()) return;
      try {
        materialize_trial(*trials[i], per_trial[i], params, out_dir);
      } catch (const std::exception& e) {
        failures[i] = trials[i]->trial_id + ": " + e.what();
      }
    });
    std::set<std::string> failed;
    for (std::size_t i = 0; i < trials.size(); ++i) {
      if (failures[i].empty()) continue;
      report.errors.push_back(failures[i]);
      failed.insert(trials[i]->trial_id);
      log_error(failures[i]);
    }
    if (!failed.empty()) {
      std::erase_if(report.manifest.samples, [&](const SampleRecord& s) { return failed.count(s.trial_id) > 0; });
    }
  }

  for (const auto& s : report.manifest.samples) report.image_missing += s.image_missing() ? 1 : 0;
  if (report.image_missing > 0) {
    log_warn(std::to_string(report.image_missing) + " samples have no frame within 0.5 s (image-missing)");
  }
  std::filesystem::create_directories(out_dir);
  save_manifest(out_dir / "manifest.jsonl", report.manifest);
  return report;
}

}  // namespace contactsense

#include "contactsense/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <thread>

#include "contactsense/error.hpp"
#include "contactsense/features.hpp"
#include "contactsense/inference.hpp"
#include "contactsense/log.hpp"
#include "contactsense/random.hpp"
#include "contactsense/util.hpp"
#include "parallel.hpp"

namespace contactsense {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

int default_jobs() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

struct Options {
  const json& j;

  bool has(const char* k) const { return j.contains(k) && !j[k].is_null(); }
  template <class T>
  T get(const char* k, T fallback) const {
    if (!has(k)) return fallback;
    try {
      return j[k].get<T>();
    } catch (const json::exception&) {
      throw ParameterError(std::string("option '") + k + "' has the wrong type");
    }
  }
  std::string str(const char* k, const std::string& fallback = {}) const { return get<std::string>(k, fallback); }
  std::string required(const char* k) const {
    if (!has(k)) throw ParameterError(std::string("missing required option '") + k + "'");
    return str(k);
  }
  int jobs() const { return std::max(1, get<int>("jobs", default_jobs())); }
  std::uint64_t seed() const { return get<std::uint64_t>("seed", 0); }
  bool force() const { return get<bool>("force", false); }
};

std::string rel(const Workspace& ws, const fs::path& p) {
  const auto r = p.lexically_normal().lexically_relative(ws.root().lexically_normal());
  if (r.empty() || *r.begin() == "..") return fs::absolute(p).lexically_normal().string();
  return r.string();
}

// Caller-supplied paths resolve against the working directory first, then
// the workspace root.
fs::path input_path(const Workspace& ws, const std::string& p) {
  if (fs::path(p).is_absolute() || fs::exists(p)) return fs::path(p);
  return ws.resolve(p);
}

fs::path checkpoint_path(const Workspace& ws, const std::string& name) {
  if (fs::path(name).extension() == ".ckpt" && fs::exists(name)) return name;
  return ws.checkpoints_dir() / (name + ".ckpt");
}

ojson seg_params_json(const SegmentationParams& s) {
  return {{"alpha", s.alpha_offset},
          {"beta", s.beta_factor},
          {"delta_min", s.delta_min_seconds},
          {"gamma_squeeze", s.gamma_squeeze_seconds},
          {"percentiles", {s.noise_percentile, s.signal_percentile}},
          {"min_ambient", s.min_ambient_seconds}};
}

ojson gate_json(const GateParams& g) {
  return {{"n_std_thresh", g.n_std_thresh},
          {"prop_decrease", g.prop_decrease},
          {"smooth_freq_bins", g.mask_smooth_freq_bins},
          {"smooth_time_frames", g.mask_smooth_time_frames},
          {"transition_db", g.transition_db}};
}

// Profile file feeding a trial's working audio, when denoising applies.
std::optional<fs::path> profile_input(const Workspace& ws, Embodiment e) {
  if (!ws.config().denoise) return std::nullopt;
  const auto it = ws.config().noise_profiles.find(e);
  if (it == ws.config().noise_profiles.end()) return std::nullopt;
  const auto p = ws.resolve(it->second);
  if (!fs::exists(p)) return std::nullopt;
  return p;
}

ojson audio_params(const Workspace& ws, const TrialRecording& t) {
  const bool denoised = profile_input(ws, t.embodiment).has_value();
  ojson j = {{"denoise", denoised}, {"sample_rate", MelConfig::kSampleRate}};
  if (denoised) j["gate"] = gate_json(ws.config().gate);
  return j;
}

std::vector<fs::path> trial_inputs(const Workspace& ws, const TrialRecording& t) {
  std::vector<fs::path> in = {t.audio_path(), t.dir / "trial.json"};
  if (auto p = profile_input(ws, t.embodiment)) in.push_back(*p);
  return in;
}

std::vector<std::string> selected_trials(const Workspace& ws, const Options& o) {
  if (o.has("trials")) {
    const auto list = o.get<std::vector<std::string>>("trials", {});
    if (!list.empty()) return list;
  }
  return ws.trial_ids();
}

struct UnitOutcome {
  bool skipped = false;
  ojson info = ojson::object();
};

void run_units(CommandResult& r, const std::vector<std::string>& units, int jobs,
               const std::function<UnitOutcome(const std::string&)>& fn) {
  std::vector<std::optional<UnitOutcome>> outcomes(units.size());
  std::vector<std::string> failures(units.size());
  detail::parallel_for(units.size(), jobs, [&](std::size_t i) {
    try {
      outcomes[i] = fn(units[i]);
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  });
  ojson list = ojson::array();
  for (std::size_t i = 0; i < units.size(); ++i) {
    ojson entry = {{"unit", units[i]}};
    if (!outcomes[i]) {
      r.errors.push_back(units[i] + ": " + failures[i]);
      log_error(units[i] + ": " + failures[i]);
      entry["status"] = "failed";
      entry["error"] = failures[i];
    } else {
      entry["status"] = outcomes[i]->skipped ? "skipped" : "done";
      (outcomes[i]->skipped ? r.units_skipped : r.units_done)++;
      for (auto& [k, v] : outcomes[i]->info.items()) entry[k] = v;
    }
    list.push_back(std::move(entry));
  }
  r.summary["units"] = std::move(list);
}

// --- ingest -------------------------------------------------------------------------

UnitOutcome ingest_one(Workspace& ws, const Options& o) {
  const fs::path source = o.required("source");
  if (!fs::exists(source)) throw NotFoundError("no such source " + source.string());
  TrialRecording meta;
  fs::path wav, frames_dir;
  if (fs::is_directory(source)) {
    meta = load_trial(source);
    wav = meta.audio_path();
    frames_dir = meta.frames_dir();
  } else {
    wav = source;
    meta.trial_id = o.required("trial_id");
    const auto cls = parse_label(o.required("declared_class"));
    if (!cls || *cls == Label::ambient) throw ParameterError("declared_class must be leaf, twig or trunk");
    meta.declared_class = *cls;
    if (o.has("frames_dir")) frames_dir = o.str("frames_dir");
  }
  if (o.has("trial_id")) meta.trial_id = o.str("trial_id");
  if (o.has("embodiment")) {
    const auto e = parse_embodiment(o.str("embodiment"));
    if (!e) throw ParameterError("embodiment must be probe or robot");
    meta.embodiment = *e;
  }
  if (o.has("declared_class")) {
    const auto cls = parse_label(o.str("declared_class"));
    if (!cls || *cls == Label::ambient) throw ParameterError("declared_class must be leaf, twig or trunk");
    meta.declared_class = *cls;
  }
  if (o.has("audio_start_ns")) meta.audio_start_ns = o.get<std::int64_t>("audio_start_ns", 0);
  if (meta.trial_id.empty() || meta.trial_id.find_first_of("/\\") != std::string::npos) {
    throw ParameterError("trial_id must be a non-empty name without path separators");
  }

  std::vector<fs::path> frame_files;
  if (!frames_dir.empty() && fs::is_directory(frames_dir)) {
    for (const auto& e : fs::directory_iterator(frames_dir)) {
      const auto ext = e.path().extension().string();
      if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") frame_files.push_back(e.path());
    }
    std::sort(frame_files.begin(), frame_files.end());
  }

  RunRecord rec{"ingest", meta.trial_id, {}, {}, {}};
  rec.params = {{"embodiment", std::string(to_string(meta.embodiment))},
                {"declared_class", std::string(to_string(meta.declared_class))},
                {"audio_start_ns", meta.audio_start_ns}};
  rec.inputs = {wav};
  rec.inputs.insert(rec.inputs.end(), frame_files.begin(), frame_files.end());
  const fs::path dest = ws.trials_dir() / meta.trial_id;
  rec.outputs = {dest / "trial.wav", dest / "trial.json"};
  if (!o.force() && run_is_current(ws, rec)) return {true, {{"trial_id", meta.trial_id}}};
  if (fs::exists(dest) && !o.force()) {
    throw ConflictError("trial " + meta.trial_id + " already exists with different content; pass --force to replace it");
  }

  const Waveform audio = read_wav(wav);  // rejects unreadable audio before anything is copied
  fs::remove_all(dest);
  fs::create_directories(dest / "frames");
  fs::copy_file(wav, dest / "trial.wav");
  for (const auto& f : frame_files) fs::copy_file(f, dest / "frames" / f.filename());
  meta.dir = dest;
  meta.frames.clear();
  write_trial_json(meta);
  const auto loaded = load_trial(dest);  // validates frame names
  write_run_record(ws, rec);
  return {false,
          {{"trial_id", meta.trial_id}, {"duration_s", audio.duration_seconds()}, {"n_frames", loaded.frames.size()}}};
}

// --- profile / denoise ----------------------------------------------------------------

UnitOutcome profile_one(Workspace& ws, const Options& o) {
  const auto e = parse_embodiment(o.required("embodiment"));
  if (!e) throw ParameterError("embodiment must be probe or robot");
  const auto name = std::string(to_string(*e));
  auto& paths = ws.config().noise_profiles;
  if (!paths.count(*e)) paths[*e] = "profiles/" + name + ".json";
  const fs::path out = ws.resolve(paths.at(*e));
  RunRecord rec{"profile", name, {}, {}, {out}};
  Waveform reference;
  if (o.has("source")) {
    const fs::path src = input_path(ws, o.str("source"));
    rec.inputs = {src};
    rec.params = {{"source", "recording"}};
    if (!o.force() && run_is_current(ws, rec)) return {true, {{"profile", rel(ws, out)}}};
    reference = resample(read_wav(src), MelConfig::kSampleRate);
  } else if (o.get<bool>("synthetic", false)) {
    const double seconds = o.get<double>("seconds", 5.0);
    rec.params = {{"source", "synthetic"}, {"seconds", seconds}, {"seed", o.seed()}};
    if (!o.force() && run_is_current(ws, rec)) return {true, {{"profile", rel(ws, out)}}};
    reference = synthetic_reference(name, seconds, MelConfig::kSampleRate, o.seed());
  } else {
    throw ParameterError("profile needs a source recording or synthetic=true");
  }
  const NoiseProfile p = build_noise_profile(reference);
  fs::create_directories(out.parent_path());
  save_noise_profile(out, p);
  write_run_record(ws, rec);
  return {false, {{"profile", rel(ws, out)}, {"bins", p.mean_db.size()}}};
}

UnitOutcome denoise_one(const Workspace& ws, const Options& o, const std::string& id) {
  const auto t = ws.trial(id);
  const auto profile_path = profile_input(ws, t.embodiment);
  if (!profile_path) throw NotFoundError("no noise profile for embodiment " + std::string(to_string(t.embodiment)));
  const fs::path out = t.dir / "denoised.wav";
  RunRecord rec{"denoise", id, {{"gate", gate_json(ws.config().gate)}}, {t.audio_path(), *profile_path}, {out}};
  if (!o.force() && run_is_current(ws, rec)) return {true, {{"output", rel(ws, out)}}};
  const NoiseProfile p = load_noise_profile(*profile_path);
  const Waveform w = load_working_audio(t, &p, ws.config().gate);
  write_wav(out, w);
  write_run_record(ws, rec);
  return {false, {{"output", rel(ws, out)}}};
}

// --- segment / review / featurize -------------------------------------------------------

bool has_review_edits(const SegmentFile& f) {
  return std::any_of(f.segments.begin(), f.segments.end(),
                     [](const ContactSegment& s) { return s.review_state != ReviewState::automatic; });
}

UnitOutcome segment_one(const Workspace& ws, const Options& o, const SegmentationParams& params,
                        const std::string& id) {
  const auto t = ws.trial(id);
  const fs::path out = ws.segment_path(id);
  RunRecord rec{"segment", id, {}, trial_inputs(ws, t), {out}};
  rec.params = {{"segmentation", seg_params_json(params)},
                {"envelope", {{"window_s", ws.config().envelope.window_seconds}, {"hop_s", ws.config().envelope.hop_seconds}}},
                {"audio", audio_params(ws, t)}};
  if (!o.force() && run_is_current(ws, rec)) return {true, {{"output", rel(ws, out)}}};
  if (!o.force()) {
    if (const auto saved = ws.saved_segments(id); saved && has_review_edits(*saved)) {
      log_warn(id + ": segment file carries review decisions; left unchanged (use --force to overwrite)");
      return {true, {{"output", rel(ws, out)}, {"reason", "reviewed"}}};
    }
  }
  const SegmentFile doc = ws.segment(t, params);
  fs::create_directories(out.parent_path());
  atomic_write(out, to_json(doc));
  write_run_record(ws, rec);
  std::size_t contact = 0;
  for (const auto& s : doc.segments) contact += s.kind == SegmentKind::contact ? 1 : 0;
  return {false, {{"output", rel(ws, out)}, {"contact", contact}, {"ambient", doc.segments.size() - contact}}};
}

UnitOutcome accept_one(const Workspace& ws, const std::string& id) {
  auto f = ws.saved_segments(id);
  if (!f) throw NotFoundError("no segment file for " + id + "; run segment first");
  std::size_t changed = 0;
  for (auto& s : f->segments) {
    if (s.review_state != ReviewState::automatic) continue;
    s.review_state = ReviewState::accepted;
    ++changed;
  }
  if (changed == 0) return {true, {{"accepted", 0}}};
  atomic_write(ws.segment_path(id), to_json(*f));
  return {false, {{"accepted", changed}}};
}

UnitOutcome featurize_one(const Workspace& ws, const Options& o, const std::string& id) {
  const auto t = ws.trial(id);
  const double len = o.get<double>("window_len", 0.8);
  const double stride = o.get<double>("stride", 0.4);
  const fs::path out = ws.reports_dir() / "features" / (id + ".csv");
  RunRecord rec{"featurize", id, {{"window_len", len}, {"stride", stride}, {"audio", audio_params(ws, t)}}, trial_inputs(ws, t), {out}};
  rec.inputs.push_back(ws.segment_path(id));
  const auto saved = ws.saved_segments(id);
  if (!saved) throw NotFoundError("no segment file for " + id + "; run segment first");
  if (!o.force() && run_is_current(ws, rec)) return {true, {{"output", rel(ws, out)}}};
  const Waveform audio = ws.working_audio(t);
  std::vector<FeatureRow> rows;
  for (const auto& w : window_segments(saved->segments, len, stride, t.declared_class)) {
    rows.push_back(FeatureRow{id, "s" + std::to_string(w.segment_index), w.start_s, std::string(to_string(w.label)),
                              extract_features(window_audio(audio, w.start_s, len))});
  }
  fs::create_directories(out.parent_path());
  write_feature_csv(out, rows);
  write_run_record(ws, rec);
  return {false, {{"output", rel(ws, out)}, {"rows", rows.size()}}};
}

// --- dataset / embed ------------------------------------------------------------------

fs::path dataset_dir(const Workspace& ws, const Options& o) { return ws.datasets_dir() / o.str("dataset", "default"); }

void run_dataset(Workspace& ws, const Options& o, CommandResult& r) {
  const fs::path out = dataset_dir(ws, o);
  BuildParams bp;
  bp.window_len_s = o.get<double>("window_len", bp.window_len_s);
  bp.stride_s = o.get<double>("stride", bp.stride_s);
  bp.eval_stride_s = o.get<double>("eval_stride", bp.eval_stride_s);
  bp.split_ratio = o.get<double>("split_ratio", bp.split_ratio);
  bp.seed = o.seed();
  if (o.has("balance_cap")) bp.balance_cap = o.get<std::size_t>("balance_cap", 0);
  bp.materialize = o.get<bool>("materialize", true);
  bp.gate = ws.config().gate;
  bp.jobs = o.jobs();
  if (ws.config().denoise) bp.noise_profiles = ws.noise_profiles();
  if (!(bp.window_len_s > 0.0) || !(bp.stride_s > 0.0) || !(bp.eval_stride_s > 0.0))
    throw ParameterError("window_len and strides must be positive");
  if (!(bp.split_ratio > 0.0 && bp.split_ratio < 1.0)) throw ParameterError("split_ratio must lie in (0, 1)");

  std::vector<TrialRecording> trials;
  std::map<std::string, SegmentFile> segments;
  RunRecord rec{"dataset", out.filename().string(), {}, {}, {out / "manifest.jsonl"}};
  for (const auto& id : selected_trials(ws, o)) {
    try {
      auto t = ws.trial(id);
      for (const auto& p : trial_inputs(ws, t)) rec.inputs.push_back(p);
      if (auto s = ws.saved_segments(id)) {
        segments.emplace(id, std::move(*s));
        rec.inputs.push_back(ws.segment_path(id));
      }
      trials.push_back(std::move(t));
    } catch (const std::exception& e) {
      r.errors.push_back(id + ": " + e.what());
    }
  }
  rec.params = {{"window_len", bp.window_len_s},
                {"stride", bp.stride_s},
                {"eval_stride", bp.eval_stride_s},
                {"split_ratio", bp.split_ratio},
                {"seed", bp.seed},
                {"balance_cap", bp.balance_cap ? ojson(*bp.balance_cap) : ojson(nullptr)},
                {"materialize", bp.materialize},
                {"fingerprint", feature_params_fingerprint()},
                {"gate", gate_json(bp.gate)},
                {"trials", ojson::array()}};
  for (const auto& t : trials) rec.params["trials"].push_back(t.trial_id);
  if (!r.errors.empty() || (!o.force() && run_is_current(ws, rec))) {
    if (r.errors.empty()) {
      ++r.units_skipped;
      r.summary["manifest"] = rel(ws, out / "manifest.jsonl");
      r.summary["status"] = "skipped";
    }
    return;
  }
  fs::remove_all(out / "tensors");
  fs::remove_all(out / "embeddings");
  const BuildReport report = build_dataset(trials, segments, bp, out);
  for (const auto& e : report.errors) r.errors.push_back(e);
  if (report.errors.empty()) write_run_record(ws, rec);
  ++r.units_done;
  const auto counts = report.manifest.class_counts();
  std::size_t n_train = 0;
  for (const auto& s : report.manifest.samples) n_train += s.split == Split::train ? 1 : 0;
  r.summary["manifest"] = rel(ws, out / "manifest.jsonl");
  r.summary["n_samples"] = report.manifest.samples.size();
  r.summary["n_train"] = n_train;
  r.summary["n_val"] = report.manifest.samples.size() - n_train;
  r.summary["image_missing"] = report.image_missing;
  r.summary["class_counts"] = ojson::object();
  for (int c = 0; c < kNumClasses; ++c) r.summary["class_counts"][std::string(kLabelNames[static_cast<std::size_t>(c)])] = counts[static_cast<std::size_t>(c)];
  for (int c = 0; c < kNumClasses; ++c) {
    if (counts[static_cast<std::size_t>(c)] < kMinSamplesPerClass) {
      log_warn("class " + std::string(kLabelNames[static_cast<std::size_t>(c)]) + " has only " +
               std::to_string(counts[static_cast<std::size_t>(c)]) + " samples");
    }
  }
}

MelSpectrogram mel_from_tensor(const Tensor& t, double window_len_s) {
  if (t.dims != std::vector<int>{1, MelConfig::kMels, MelConfig::kFrames}) throw FormatError("mel tensor has the wrong shape");
  MelSpectrogram mel;
  mel.values.resize(MelConfig::kMels, MelConfig::kFrames);
  for (int m = 0; m < MelConfig::kMels; ++m)
    for (int f = 0; f < MelConfig::kFrames; ++f)
      mel.values(m, f) = t.data[static_cast<std::size_t>(m) * MelConfig::kFrames + static_cast<std::size_t>(f)];
  const int real = std::min(MelConfig::kFrames, mel_frame_count(static_cast<std::size_t>(std::llround(window_len_s * MelConfig::kSampleRate))));
  mel.pad_frames = MelConfig::kFrames - real;
  return mel;
}

std::string augmented_id(const std::string& id, int k) { return id + "~aug" + std::to_string(k); }

struct EmbeddedSample {
  std::string id;
  std::array<Eigen::VectorXd, kNumSlots> v;
};

void run_embed(Workspace& ws, const Options& o, CommandResult& r) {
  const fs::path dir = dataset_dir(ws, o);
  const fs::path manifest_path = dir / "manifest.jsonl";
  if (!fs::exists(manifest_path)) throw NotFoundError("no dataset at " + rel(ws, dir) + "; run dataset first");
  const int augment_k = o.get<int>("augment", 0);
  if (augment_k < 0) throw ParameterError("augment must be >= 0");
  const fs::path emb_dir = dir / "embeddings";
  RunRecord rec{"embed", dir.filename().string(), {}, {manifest_path}, {}};
  for (int s = 0; s < kNumSlots; ++s) rec.outputs.push_back(embedding_store_path(emb_dir, static_cast<Slot>(s)));
  rec.params = {{"augment", augment_k}, {"seed", o.seed()}, {"fingerprint", feature_params_fingerprint()}};
  if (!o.force() && run_is_current(ws, rec)) {
    ++r.units_skipped;
    r.summary["status"] = "skipped";
    return;
  }
  const Manifest m = load_manifest(manifest_path);
  if (m.feature_params_fingerprint != feature_params_fingerprint()) {
    throw ConflictError("dataset was built with different feature constants; rebuild it");
  }
  std::vector<std::string> trial_order;
  std::map<std::string, std::vector<const SampleRecord*>> by_trial;
  for (const auto& s : m.samples) {
    if (!by_trial.count(s.trial_id)) trial_order.push_back(s.trial_id);
    by_trial[s.trial_id].push_back(&s);
  }
  const auto& enc = BuiltinEncoders::instance();
  const std::vector<Waveform> motor_bank = {synthetic_reference("robot", 2.0, MelConfig::kSampleRate, 0x0707)};
  AugmentParams aug;
  aug.seed = o.seed();

  std::vector<std::vector<EmbeddedSample>> results(trial_order.size());
  run_units(r, trial_order, o.jobs(), [&](const std::string& id) {
    auto& out = results[static_cast<std::size_t>(std::find(trial_order.begin(), trial_order.end(), id) - trial_order.begin())];
    std::optional<Waveform> audio;
    const auto working = [&]() -> const Waveform& {
      if (!audio) audio = ws.working_audio(ws.trial(id));
      return *audio;
    };
    for (const auto* s : by_trial.at(id)) {
      const fs::path mel_path = mel_tensor_path(dir, s->sample_id);
      const MelSpectrogram mel = fs::exists(mel_path)
                                     ? mel_from_tensor(read_tensor(mel_path), s->window_len_s)
                                     : mel_spectrogram(window_audio(working(), s->window_start_s, s->window_len_s));
      Eigen::VectorXd image = Eigen::VectorXd::Zero(slot_dim(Slot::image));
      if (s->image) {
        const fs::path img_path = image_tensor_path(dir, s->sample_id);
        image = enc.encode_image(fs::exists(img_path) ? read_tensor(img_path) : preprocess_image(s->image->frame_path));
      }
      out.push_back({s->sample_id, {enc.encode_audio(mel), enc.encode_semantic(mel), image}});
      if (s->split != Split::train) continue;
      for (int k = 1; k <= augment_k; ++k) {
        Rng rng(splitmix64(splitmix64(o.seed() ^ fnv1a(s->sample_id)) + static_cast<std::uint64_t>(k)));
        const Waveform w = augment(window_audio(working(), s->window_start_s, s->window_len_s), aug, motor_bank, rng);
        const MelSpectrogram am = mel_spectrogram(w);
        out.push_back({augmented_id(s->sample_id, k), {enc.encode_audio(am), enc.encode_semantic(am), image}});
      }
    }
    return UnitOutcome{false, {{"embedded", out.size()}}};
  });

  std::array<EmbeddingStore, kNumSlots> stores = {EmbeddingStore(Slot::audio_spectral), EmbeddingStore(Slot::audio_semantic),
                                                  EmbeddingStore(Slot::image)};
  std::size_t n = 0;
  for (const auto& trial : results) {
    for (const auto& e : trial) {
      for (int s = 0; s < kNumSlots; ++s) stores[static_cast<std::size_t>(s)].put(e.id, e.v[static_cast<std::size_t>(s)]);
      ++n;
    }
  }
  fs::create_directories(emb_dir);
  for (const auto& st : stores) st.save(embedding_store_path(emb_dir, st.slot()));
  if (r.errors.empty()) write_run_record(ws, rec);
  r.summary["embeddings"] = n;
  r.summary["directory"] = rel(ws, emb_dir);
}

// --- train / eval ---------------------------------------------------------------------

FusionConfig fusion_config_option(const Workspace& ws, const Options& o, std::vector<fs::path>* inputs) {
  if (!o.has("config")) return FusionConfig{};
  const fs::path p = input_path(ws, o.str("config"));
  if (inputs != nullptr) inputs->push_back(p);
  return fusion_config_from_json(read_file(p));
}

TrainConfig train_config_option(const Options& o) {
  TrainConfig tc;
  tc.seed = o.seed();
  tc.max_epochs = o.get<int>("epochs", tc.max_epochs);
  tc.batch_size = o.get<int>("batch_size", tc.batch_size);
  tc.learning_rate = o.get<double>("lr", tc.learning_rate);
  tc.weight_decay = o.get<double>("weight_decay", tc.weight_decay);
  tc.early_stop_patience = o.get<int>("patience", tc.early_stop_patience);
  tc.validate();
  return tc;
}

ojson train_config_json(const TrainConfig& tc) {
  return {{"batch_size", tc.batch_size}, {"max_epochs", tc.max_epochs},     {"lr", tc.learning_rate},
          {"weight_decay", tc.weight_decay}, {"beta1", tc.beta1},           {"beta2", tc.beta2},
          {"adam_eps", tc.adam_eps},     {"seed", tc.seed},                 {"patience", tc.early_stop_patience}};
}

class BundleSource {
 public:
  BundleSource(const Workspace& ws, const fs::path& dataset, const FusionConfig& fc, std::vector<fs::path>* inputs) {
    for (Slot s : fc.slots) {
      const auto it = ws.config().embedding_stores.find(s);
      const fs::path p = it != ws.config().embedding_stores.end() ? ws.resolve(it->second)
                                                                   : embedding_store_path(dataset / "embeddings", s);
      if (!fs::exists(p)) throw NotFoundError("no embedding store " + p.string() + "; run embed first");
      if (inputs != nullptr) inputs->push_back(p);
      stores_.emplace(s, EmbeddingStore::load(p));
    }
  }

  const EmbeddingStore& store(Slot s) const { return stores_.at(s); }

  // Samples without a frame only serve models that leave the image slot out;
  // the embed step's zero placeholder is not a real image embedding.
  bool usable(const SampleRecord& base) const { return stores_.count(Slot::image) == 0 || !base.image_missing(); }

  EmbeddingBundle bundle(const std::string& id, const SampleRecord& base) const {
    EmbeddingBundle b;
    for (const auto& [slot, store] : stores_) {
      const Eigen::VectorXd* v = store.find(id);
      if (v == nullptr && id != base.sample_id) v = store.find(base.sample_id);
      if (v != nullptr) {
        b.set(slot, *v);
      } else {
        throw NotFoundError("no " + std::string(to_string(slot)) + " embedding for " + id);
      }
    }
    return b;
  }

 private:
  std::map<Slot, EmbeddingStore> stores_;
};

void run_train(Workspace& ws, const Options& o, CommandResult& r) {
  const fs::path dir = dataset_dir(ws, o);
  const std::string name = o.str("name", dir.filename().string());
  const fs::path ckpt = ws.checkpoints_dir() / (name + ".ckpt");
  const fs::path csv = ws.checkpoints_dir() / (name + ".metrics.csv");
  const fs::path report = ws.checkpoints_dir() / (name + ".train.json");
  RunRecord rec{"train", name, {}, {dir / "manifest.jsonl"}, {ckpt, csv, report}};
  const FusionConfig fc = fusion_config_option(ws, o, &rec.inputs);
  const TrainConfig tc = train_config_option(o);
  const BundleSource source(ws, dir, fc, &rec.inputs);
  rec.params = {{"model", ojson::parse(to_json(fc))}, {"train", train_config_json(tc)}};
  if (!o.force() && run_is_current(ws, rec)) {
    ++r.units_skipped;
    r.summary["checkpoint"] = rel(ws, ckpt);
    r.summary["status"] = "skipped";
    return;
  }
  const Manifest m = load_manifest(dir / "manifest.jsonl");
  std::map<std::string, const SampleRecord*> by_id;
  for (const auto& s : m.samples) by_id[s.sample_id] = &s;
  std::vector<LabeledBundle> train_set, val_set;
  std::size_t excluded = 0;
  const auto& index_store = source.store(fc.slots.front());
  for (const auto& id : index_store.ids()) {
    const auto base_id = id.substr(0, id.find('~'));
    const auto it = by_id.find(base_id);
    if (it == by_id.end()) continue;
    const SampleRecord& s = *it->second;
    if (id != base_id && s.split != Split::train) continue;
    if (!source.usable(s)) {
      excluded += id == base_id ? 1 : 0;
      continue;
    }
    auto& dest = s.split == Split::train ? train_set : val_set;
    dest.push_back({id, source.bundle(id, s), index_of(s.label)});
  }
  for (const auto& s : m.samples) {
    if (!index_store.find(s.sample_id)) throw NotFoundError("sample " + s.sample_id + " has no embedding; rerun embed");
  }
  if (excluded > 0) log_warn(std::to_string(excluded) + " image-missing samples left out of fused training");
  if (train_set.empty() || val_set.empty()) throw ParameterError("training needs non-empty train and val splits");
  log_info("training on " + std::to_string(train_set.size()) + " samples, validating on " + std::to_string(val_set.size()));
  const TrainResult result = train(train_set, val_set, fc, tc);
  fs::create_directories(ws.checkpoints_dir());
  result.model.save(ckpt);
  atomic_write(csv, metrics_csv(result.history));
  ojson summary = {{"checkpoint", rel(ws, ckpt)},
                   {"best_epoch", result.best_epoch},
                   {"epochs_run", result.history.size()},
                   {"n_train", train_set.size()},
                   {"n_val", val_set.size()},
                   {"image_missing_excluded", excluded}};
  for (const auto& e : result.history) {
    if (e.epoch != result.best_epoch) continue;
    summary["best_val_macro_f1"] = e.val_f1;
    summary["best_val_loss"] = e.val_loss;
  }
  atomic_write(report, summary.dump(2) + "\n");
  write_run_record(ws, rec);
  ++r.units_done;
  for (auto& [k, v] : summary.items()) r.summary[k] = v;
}

void run_eval(Workspace& ws, const Options& o, CommandResult& r) {
  const fs::path dir = dataset_dir(ws, o);
  const std::string ck_name = o.str("checkpoint", dir.filename().string());
  const fs::path ckpt = checkpoint_path(ws, ck_name);
  if (!fs::exists(ckpt)) throw NotFoundError("no checkpoint " + ckpt.string());
  const std::string split = o.str("split", "val");
  std::optional<Split> only;
  if (split != "all") {
    only = parse_split(split);
    if (!only) throw ParameterError("split must be train, val, test or all");
  }
  const std::string stem = fs::path(ck_name).stem().string() + "." + dir.filename().string() + "." + split;
  const fs::path out_json = ws.reports_dir() / (stem + ".eval.json");
  const fs::path out_txt = ws.reports_dir() / (stem + ".eval.txt");
  RunRecord rec{"eval", stem, {{"split", split}}, {ckpt, dir / "manifest.jsonl"}, {out_json, out_txt}};
  const FusionModel model = FusionModel::load(ckpt);
  const BundleSource source(ws, dir, model.config(), &rec.inputs);
  if (!o.force() && run_is_current(ws, rec)) {
    ++r.units_skipped;
    r.summary["report"] = rel(ws, out_json);
    r.summary["status"] = "skipped";
    return;
  }
  const Manifest m = load_manifest(dir / "manifest.jsonl");
  std::vector<int> preds, labels;
  std::size_t excluded = 0;
  for (const auto& s : m.samples) {
    if (only && s.split != *only) continue;
    if (!source.usable(s)) {
      ++excluded;
      continue;
    }
    preds.push_back(index_of(model.predict(source.bundle(s.sample_id, s)).label));
    labels.push_back(index_of(s.label));
  }
  if (labels.empty()) throw ParameterError("split '" + split + "' has no samples");
  const ConfusionMatrix cm = confusion(preds, labels);
  const MetricReport four = metrics(cm);
  const ConfusionMatrix bin = binary_collapse(cm);
  const MetricReport two = metrics(bin);
  ojson doc = {{"checkpoint", rel(ws, ckpt)},
               {"dataset", dir.filename().string()},
               {"split", split},
               {"image_missing_excluded", excluded},
               {"four_class", ojson::parse(report_json(cm, four))},
               {"binary", ojson::parse(report_json(bin, two))}};
  fs::create_directories(ws.reports_dir());
  atomic_write(out_json, doc.dump(2) + "\n");
  atomic_write(out_txt, "four-class\n" + report_text(cm, four) + "\nbinary (ambient vs contact)\n" + report_text(bin, two));
  write_run_record(ws, rec);
  ++r.units_done;
  r.summary["report"] = rel(ws, out_json);
  r.summary["n_samples"] = labels.size();
  r.summary["image_missing_excluded"] = excluded;
  r.summary["accuracy"] = four.accuracy;
  r.summary["macro_f1"] = four.macro_f1;
  r.summary["binary_macro_f1"] = two.macro_f1;
}

// --- infer / overlay ------------------------------------------------------------------

StreamConfig stream_config_option(const Options& o) {
  StreamConfig c;
  c.window_frames = o.get<int>("window_frames", c.window_frames);
  c.stride_frames = o.get<int>("stride_frames", c.stride_frames);
  c.frame_rate = o.get<double>("frame_rate", c.frame_rate);
  c.audio_window_s = o.get<double>("audio_window", c.audio_window_s);
  const auto ts = o.str("timestamp", "midpoint");
  if (ts == "start") {
    c.timestamp = Timestamp::start;
  } else if (ts != "midpoint") {
    throw ParameterError("timestamp must be midpoint or start");
  }
  c.validate();
  return c;
}

struct InferSource {
  Waveform audio;
  std::optional<TrialRecording> trial;
  std::optional<NoiseProfile> profile;
};

InferSource infer_source(const Workspace& ws, const Options& o) {
  InferSource src;
  Embodiment emb = Embodiment::probe;
  if (o.has("trial")) {
    src.trial = ws.trial(o.str("trial"));
    src.audio = read_wav(src.trial->audio_path());
    emb = src.trial->embodiment;
  } else if (o.has("wav")) {
    src.audio = read_wav(input_path(ws, o.str("wav")));
    const auto e = parse_embodiment(o.str("embodiment", "probe"));
    if (!e) throw ParameterError("embodiment must be probe or robot");
    emb = *e;
  } else {
    throw ParameterError("infer needs a trial or a wav");
  }
  if (ws.config().denoise && o.get<bool>("denoise", true)) src.profile = ws.noise_profile(emb);
  return src;
}

void run_infer(Workspace& ws, const Options& o, const LineSink& emit, CommandResult& r) {
  const fs::path ckpt = checkpoint_path(ws, o.required("checkpoint"));
  auto model = std::make_shared<const FusionModel>(FusionModel::load(ckpt));
  const StreamConfig cfg = stream_config_option(o);
  InferSource src = infer_source(ws, o);
  WindowClassifier classifier(model, src.profile, ws.config().gate);
  if (src.trial) classifier.set_frames(*src.trial);
  StreamOptions so;
  so.realtime = o.get<bool>("realtime", false);
  so.chunk_samples = o.get<std::size_t>("chunk", so.chunk_samples);
  std::ofstream file;
  if (o.has("out")) {
    file.open(o.str("out"), std::ios::trunc);
    if (!file) throw IoError("cannot write " + o.str("out"));
  }
  const auto preds = classify_stream(src.audio, classifier, cfg, so, [&](const TimedPrediction& p) {
    const std::string line = prediction_json(p);
    if (emit) emit(line);
    if (file) file << line << '\n';
  });
  double mean_latency = 0.0;
  for (const auto& p : preds) mean_latency += p.latency_ms / static_cast<double>(std::max<std::size_t>(1, preds.size()));
  ++r.units_done;
  r.summary["windows"] = preds.size();
  r.summary["mean_latency_ms"] = mean_latency;
}

void run_overlay(Workspace& ws, const Options& o, CommandResult& r) {
  const std::string id = o.required("trial");
  const auto trial = ws.trial(id);
  const fs::path ckpt = checkpoint_path(ws, o.required("checkpoint"));
  const fs::path out = o.has("out") ? fs::path(o.str("out")) : ws.reports_dir() / "overlay" / id;
  RunRecord rec{"overlay", id, {}, trial_inputs(ws, trial), {out / "timeline.json"}};
  rec.inputs.push_back(ckpt);
  if (fs::exists(ws.segment_path(id))) rec.inputs.push_back(ws.segment_path(id));
  const StreamConfig cfg = stream_config_option(o);
  rec.params = {{"window_frames", cfg.window_frames}, {"stride_frames", cfg.stride_frames}, {"frame_rate", cfg.frame_rate},
                {"audio_window", cfg.audio_window_s}, {"out", fs::absolute(out).string()}};
  if (!o.force() && run_is_current(ws, rec)) {
    ++r.units_skipped;
    r.summary["timeline"] = rel(ws, out / "timeline.json");
    r.summary["status"] = "skipped";
    return;
  }
  auto model = std::make_shared<const FusionModel>(FusionModel::load(ckpt));
  const Waveform raw = read_wav(trial.audio_path());
  WindowClassifier classifier(model, ws.config().denoise ? ws.noise_profile(trial.embodiment) : std::nullopt,
                              ws.config().gate);
  classifier.set_frames(trial);
  Timeline tl;
  tl.events = classify_offline(raw, classifier, cfg);
  for (auto& e : tl.events) e.latency_ms = 0.0;  // keeps the file reproducible
  if (const auto seg = ws.saved_segments(id)) tl.segments = seg->segments;
  const OverlayReport rep = overlay_export(tl, &trial, raw.duration_seconds(), cfg, out);
  write_run_record(ws, rec);
  ++r.units_done;
  r.summary["timeline"] = rel(ws, out / "timeline.json");
  r.summary["frames_written"] = rep.frames_written;
  r.summary["events"] = tl.events.size();
}

// --- ablate ---------------------------------------------------------------------------

void run_ablate(Workspace& ws, const Options& o, CommandResult& r) {
  AblationSettings s;
  s.durations = parse_duration_range(o.str("durations", "0.1:1.0:0.1"));
  s.stride_s = o.get<double>("stride", s.stride_s);
  s.split_ratio = o.get<double>("split_ratio", s.split_ratio);
  s.seed = o.seed();
  std::vector<fs::path> inputs;
  s.model = fusion_config_option(ws, o, &inputs);
  s.train = train_config_option(o);
  if (!o.has("epochs")) s.train.max_epochs = 30;
  s.max_train = o.get<std::size_t>("max_train", 0);
  s.jobs = o.jobs();
  const std::string name = o.str("name", "ablation");
  const fs::path csv = ws.reports_dir() / (name + ".csv");
  const fs::path js = ws.reports_dir() / (name + ".json");
  RunRecord rec{"ablate", name, {}, inputs, {csv, js}};
  ojson trial_list = ojson::array();
  for (const auto& id : ws.trial_ids()) {
    if (!fs::exists(ws.segment_path(id))) continue;
    trial_list.push_back(id);
    for (const auto& p : trial_inputs(ws, ws.trial(id))) rec.inputs.push_back(p);
    rec.inputs.push_back(ws.segment_path(id));
  }
  rec.params = {{"durations", s.durations}, {"stride", s.stride_s},           {"split_ratio", s.split_ratio},
                {"seed", s.seed},           {"model", ojson::parse(to_json(s.model))}, {"train", train_config_json(s.train)},
                {"max_train", s.max_train}, {"trials", trial_list}};
  if (!o.force() && run_is_current(ws, rec)) {
    ++r.units_skipped;
    r.summary["csv"] = rel(ws, csv);
    r.summary["status"] = "skipped";
    return;
  }
  const bool parallel = o.get<bool>("parallel", false);
  const auto curve = window_ablation(s.durations, workspace_ablation_hooks(ws, s), s.seed, parallel ? s.jobs : 1);
  fs::create_directories(ws.reports_dir());
  atomic_write(csv, ablation_csv(curve));
  atomic_write(js, ablation_json(curve));
  write_run_record(ws, rec);
  ++r.units_done;
  r.summary["csv"] = rel(ws, csv);
  r.summary["json"] = rel(ws, js);
  r.summary["curve"] = ojson::parse(ablation_json(curve));
}

}  // namespace

// --- run records ---------------------------------------------------------------------

fs::path run_record_path(const Workspace& ws, const RunRecord& r) {
  return ws.reports_dir() / "runs" / r.command / (r.unit + ".json");
}

namespace {

ojson hash_map(const Workspace& ws, const std::vector<fs::path>& paths) {
  ojson m = ojson::object();
  for (const auto& p : paths) m[rel(ws, p)] = fs::exists(p) ? sha256_file(p) : std::string("missing");
  return m;
}

}  // namespace

bool run_is_current(const Workspace& ws, const RunRecord& r) {
  const auto path = run_record_path(ws, r);
  if (!fs::exists(path)) return false;
  try {
    const auto prior = ojson::parse(read_file(path));
    if (prior.at("params") != r.params) return false;
    if (prior.at("inputs") != hash_map(ws, r.inputs)) return false;
    for (const auto& p : r.outputs) {
      if (!fs::exists(p)) return false;
    }
    return prior.at("outputs") == hash_map(ws, r.outputs);
  } catch (const std::exception&) {
    return false;
  }
}

void write_run_record(const Workspace& ws, const RunRecord& r) {
  ojson j;
  j["command"] = r.command;
  j["unit"] = r.unit;
  j["params"] = r.params;
  j["inputs"] = hash_map(ws, r.inputs);
  j["outputs"] = hash_map(ws, r.outputs);
  const auto path = run_record_path(ws, r);
  fs::create_directories(path.parent_path());
  atomic_write(path, j.dump(2) + "\n");
}

// --- ablation hooks --------------------------------------------------------------------

AblationHooks workspace_ablation_hooks(const Workspace& ws, const AblationSettings& s) {
  struct Source {
    TrialRecording trial;
    std::vector<ContactSegment> segments;
    Waveform audio;
    Split split = Split::train;
  };
  auto sources = std::make_shared<std::vector<Source>>();
  Manifest by_trial;  // one record per trial drives the group split
  for (const auto& id : ws.trial_ids()) {
    auto seg = ws.saved_segments(id);
    if (!seg) continue;
    Source src{ws.trial(id), seg->segments, {}, Split::train};
    src.audio = ws.working_audio(src.trial);
    SampleRecord rec;
    rec.sample_id = id;
    rec.trial_id = id;
    rec.label = src.trial.declared_class;
    by_trial.samples.push_back(rec);
    sources->push_back(std::move(src));
  }
  if (sources->size() < 2) throw ParameterError("ablation needs at least two segmented trials");
  group_split(by_trial, s.split_ratio, s.seed);
  for (std::size_t i = 0; i < sources->size(); ++i) (*sources)[i].split = by_trial.samples[i].split;

  struct Item {
    std::size_t source = 0;
    WindowSpec w;
  };
  const auto items = [sources, s](double d) {
    std::pair<std::vector<Item>, std::vector<Item>> out;
    for (std::size_t i = 0; i < sources->size(); ++i) {
      const auto& src = (*sources)[i];
      for (const auto& w : window_segments(src.segments, d, s.stride_s, src.trial.declared_class)) {
        (src.split == Split::train ? out.first : out.second).push_back({i, w});
      }
    }
    return out;
  };

  AblationHooks hooks;
  hooks.available = [items, s](double d) {
    const auto [tr, ev] = items(d);
    const std::size_t n_train = s.max_train > 0 ? std::min(s.max_train, tr.size()) : tr.size();
    return std::make_pair(n_train, ev.size());
  };
  hooks.run = [items, sources, s](double d, std::size_t n_train, std::size_t n_eval, std::uint64_t seed) {
    auto [tr, ev] = items(d);
    Rng rng(splitmix64(seed ^ 0xAB1A7E));
    rng.shuffle(tr.begin(), tr.end());
    rng.shuffle(ev.begin(), ev.end());
    tr.resize(n_train);
    ev.resize(n_eval);
    const auto& enc = BuiltinEncoders::instance();
    const auto has_slot = [&](Slot slot) { return std::find(s.model.slots.begin(), s.model.slots.end(), slot) != s.model.slots.end(); };
    const auto embed_all = [&](const std::vector<Item>& list) {
      std::vector<LabeledBundle> out(list.size());
      detail::parallel_for(list.size(), s.jobs, [&](std::size_t i) {
        const auto& src = (*sources)[list[i].source];
        const MelSpectrogram mel = mel_spectrogram(window_audio(src.audio, list[i].w.start_s, d));
        EmbeddingBundle b;
        if (has_slot(Slot::audio_spectral)) b.set(Slot::audio_spectral, enc.encode_audio(mel));
        if (has_slot(Slot::audio_semantic)) b.set(Slot::audio_semantic, enc.encode_semantic(mel));
        if (has_slot(Slot::image)) {
          const auto ref = pair_frame(src.trial, list[i].w.start_s, d);
          b.set(Slot::image, ref ? enc.encode_image(preprocess_image(ref->frame_path))
                                 : Eigen::VectorXd::Zero(slot_dim(Slot::image)).eval());
        }
        out[i] = {src.trial.trial_id, std::move(b), index_of(list[i].w.label)};
      });
      return out;
    };
    std::vector<LabeledBundle> train_all = embed_all(tr);
    const std::vector<LabeledBundle> eval_set = embed_all(ev);
    // model selection uses a slice of the training budget, never the eval set
    const std::size_t n_sel = std::max<std::size_t>(1, train_all.size() / 5);
    std::vector<LabeledBundle> select(train_all.end() - static_cast<std::ptrdiff_t>(n_sel), train_all.end());
    train_all.resize(train_all.size() - n_sel);
    TrainConfig tc = s.train;
    tc.seed = seed;
    const TrainResult result = train(train_all, select, s.model, tc);
    std::size_t correct = 0;
    for (const auto& e : eval_set) correct += index_of(result.model.predict(e.bundle).label) == e.label ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(std::max<std::size_t>(1, eval_set.size()));
  };
  return hooks;
}

// --- dispatch ------------------------------------------------------------------------------

std::vector<std::string> command_names() {
  return {"ingest", "profile", "denoise", "segment", "accept", "featurize", "dataset",
          "embed",  "train",   "eval",    "infer",   "ablate", "overlay"};
}

CommandResult run_command(Workspace& ws, const std::string& command, const json& options, const LineSink& emit) {
  if (!options.is_object()) throw ParameterError("options must be a JSON object");
  const Options o{options};
  CommandResult r;
  r.summary["command"] = command;
  if (command == "ingest") {
    run_units(r, {o.str("trial_id", fs::path(o.required("source")).filename().string())}, 1,
              [&](const std::string&) { return ingest_one(ws, o); });
  } else if (command == "profile") {
    run_units(r, {o.required("embodiment")}, 1, [&](const std::string&) { return profile_one(ws, o); });
  } else if (command == "denoise") {
    run_units(r, selected_trials(ws, o), o.jobs(), [&](const std::string& id) { return denoise_one(ws, o, id); });
  } else if (command == "segment") {
    const auto params =
        segmentation_params_from_json(o.has("params") ? options["params"] : json::object(), ws.config().segmentation);
    r.summary["params"] = seg_params_json(params);
    run_units(r, selected_trials(ws, o), o.jobs(), [&](const std::string& id) { return segment_one(ws, o, params, id); });
  } else if (command == "accept") {
    run_units(r, selected_trials(ws, o), o.jobs(), [&](const std::string& id) { return accept_one(ws, id); });
  } else if (command == "featurize") {
    run_units(r, selected_trials(ws, o), o.jobs(), [&](const std::string& id) { return featurize_one(ws, o, id); });
  } else if (command == "dataset") {
    run_dataset(ws, o, r);
  } else if (command == "embed") {
    run_embed(ws, o, r);
  } else if (command == "train") {
    run_train(ws, o, r);
  } else if (command == "eval") {
    run_eval(ws, o, r);
  } else if (command == "infer") {
    run_infer(ws, o, emit, r);
  } else if (command == "ablate") {
    run_ablate(ws, o, r);
  } else if (command == "overlay") {
    run_overlay(ws, o, r);
  } else {
    throw ParameterError("unknown command '" + command + "'");
  }
  r.summary["ok"] = r.ok();
  r.summary["units_done"] = r.units_done;
  r.summary["units_skipped"] = r.units_skipped;
  if (!r.errors.empty()) r.summary["errors"] = r.errors;
  return r;
}

}  // namespace contactsense

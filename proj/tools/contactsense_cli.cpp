// contactsense: command-line front end over the C API.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "contactsense/contactsense.h"

namespace {

using nlohmann::json;

struct Global {
  std::string workspace;
  std::optional<int> jobs;
  std::optional<unsigned long long> seed;
  bool force = false;
  bool log_json = false;
  std::string log_level = "info";
};

// Only flags the user actually gave are forwarded, so workspace config and
// defaults fill the rest.
template <class T>
void put(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v != nullptr && *v != '\0' ? std::string(v) : fallback;
}

int level_of(const std::string& s) {
  if (s == "debug") return 0;
  if (s == "info") return 1;
  if (s == "warn") return 2;
  if (s == "error") return 3;
  return 4;
}

volatile std::sig_atomic_t g_stop = 0;

void on_signal(int) { g_stop = 1; }

void print_line(const char* line, void*) {
  std::fputs(line, stdout);
  std::fputc('\n', stdout);
  std::fflush(stdout);
}

int run(cs_workspace* ws, const std::string& command, const json& options, bool stream) {
  char* summary = nullptr;
  const cs_status st = cs_run(ws, command.c_str(), options.dump().c_str(), stream ? print_line : nullptr, nullptr, &summary);
  if (summary != nullptr) {
    const std::string text = json::parse(summary).dump(2);
    (stream ? std::cerr : std::cout) << text << "\n";
    cs_string_free(summary);
  }
  if (st != CS_OK) {
    std::cerr << "error: " << cs_last_error() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contactsense: contact-microphone segmentation, dataset curation and fusion classification"};
  app.require_subcommand(1);
  Global g;
  app.add_option("-w,--workspace", g.workspace, "Workspace root (env CONTACTSENSE_WORKSPACE, default ./workspace)");
  app.add_option("-j,--jobs", g.jobs, "Parallel jobs (env CONTACTSENSE_JOBS, default: all cores)")->check(CLI::PositiveNumber);
  app.add_option("--seed", g.seed, "Seed for every random choice of this run (default 0)");
  app.add_flag("--force", g.force, "Redo work even when inputs are unchanged");
  app.add_flag("--log-json", g.log_json, "JSON-lines logs on stderr");
  app.add_option("--log-level", g.log_level, "debug, info, warn, error or off")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));

  std::vector<std::pair<CLI::App*, std::function<json()>>> commands;
  std::vector<std::string> trials;

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Copy a recording (WAV + frame directory) into the workspace");
  std::string src, frames, trial_id, emb, cls;
  std::optional<long long> start_ns;
  ingest->add_option("source", src, "Trial directory (trial.wav, trial.json, frames/) or a WAV file")->required();
  ingest->add_option("--trial-id", trial_id, "Trial id (default: from trial.json)");
  ingest->add_option("--frames", frames, "Frame directory of <epoch_ns>.png|jpg files");
  ingest->add_option("--embodiment", emb, "probe or robot");
  ingest->add_option("--class", cls, "Declared contact class: leaf, twig or trunk");
  ingest->add_option("--audio-start-ns", start_ns, "Epoch time of the first audio sample (ns)");
  commands.emplace_back(ingest, [&] {
    json o = {{"source", src}};
    if (!trial_id.empty()) o["trial_id"] = trial_id;
    if (!frames.empty()) o["frames_dir"] = frames;
    if (!emb.empty()) o["embodiment"] = emb;
    if (!cls.empty()) o["declared_class"] = cls;
    put(o, "audio_start_ns", start_ns);
    return o;
  });

  // profile
  auto* profile = app.add_subcommand("profile", "Build a noise profile from a contact-free recording");
  std::string prof_emb, prof_src;
  bool prof_synth = false;
  std::optional<double> prof_seconds;
  profile->add_option("--embodiment", prof_emb, "probe or robot")->required();
  profile->add_option("--source", prof_src, "Contact-free WAV recording");
  profile->add_flag("--synthetic", prof_synth, "Use the built-in synthetic reference instead");
  profile->add_option("--seconds", prof_seconds, "Length of the synthetic reference");
  commands.emplace_back(profile, [&] {
    json o = {{"embodiment", prof_emb}};
    if (!prof_src.empty()) o["source"] = prof_src;
    if (prof_synth) o["synthetic"] = true;
    put(o, "seconds", prof_seconds);
    return o;
  });

  // denoise
  auto* denoise = app.add_subcommand("denoise", "Write spectrally gated working audio per trial");
  denoise->add_option("--trial", trials, "Trial id (repeatable; default all)");
  commands.emplace_back(denoise, [&] { return json{{"trials", trials}}; });

  // segment
  auto* segment = app.add_subcommand("segment", "Detect contact and ambient segments");
  std::optional<double> alpha, beta, delta_min, gamma, p_noise, p_signal, min_ambient;
  segment->add_option("--trial", trials, "Trial id (repeatable; default all)");
  segment->add_option("--alpha", alpha, "Threshold offset above the noise level");
  segment->add_option("--beta", beta, "Non-contact threshold factor");
  segment->add_option("--delta-min", delta_min, "Minimum contact duration (s)");
  segment->add_option("--gamma", gamma, "Gap merged between contacts (s)");
  segment->add_option("--noise-percentile", p_noise, "Envelope percentile for the noise level");
  segment->add_option("--signal-percentile", p_signal, "Envelope percentile for the signal level");
  segment->add_option("--min-ambient", min_ambient, "Minimum ambient interval (s)");
  commands.emplace_back(segment, [&] {
    json params = json::object();
    put(params, "alpha", alpha);
    put(params, "beta", beta);
    put(params, "delta_min", delta_min);
    put(params, "gamma_squeeze", gamma);
    put(params, "min_ambient", min_ambient);
    if (p_noise || p_signal) {
      params["percentiles"] = {p_noise.value_or(10.0), p_signal.value_or(90.0)};
    }
    return json{{"trials", trials}, {"params", params}};
  });

  // review
  auto* review = app.add_subcommand("review", "Serve the review UI and API, or bulk-accept segments");
  review->alias("serve");
  std::string host = "127.0.0.1", static_dir;
  int port = 8765;
  bool accept_all = false;
  review->add_option("--host", host, "Bind address (loopback by default)");
  review->add_option("--port", port, "Port (0 picks a free one)");
  review->add_option("--static", static_dir, "Directory with the built review UI");
  review->add_flag("--accept-all", accept_all, "Accept every automatic segment and exit");
  review->add_option("--trial", trials, "Trial id for --accept-all (repeatable; default all)");

  // featurize
  auto* featurize = app.add_subcommand("featurize", "Export scalar audio features (RMS, ZCR, MFCC) per window");
  std::optional<double> f_len, f_stride;
  featurize->add_option("--trial", trials, "Trial id (repeatable; default all)");
  featurize->add_option("--window-len", f_len, "Window length (s)");
  featurize->add_option("--stride", f_stride, "Window stride (s)");
  commands.emplace_back(featurize, [&] {
    json o = {{"trials", trials}};
    put(o, "window_len", f_len);
    put(o, "stride", f_stride);
    return o;
  });

  // dataset
  auto* dataset = app.add_subcommand("dataset", "Build a windowed, split dataset manifest");
  std::string ds_name = "default";
  std::optional<double> d_len, d_stride, d_eval_stride, d_ratio;
  std::optional<std::size_t> d_cap;
  bool no_materialize = false;
  dataset->add_option("--name", ds_name, "Dataset name under datasets/");
  dataset->add_option("--trial", trials, "Trial id (repeatable; default all)");
  dataset->add_option("--window-len", d_len, "Window length (s)");
  dataset->add_option("--stride", d_stride, "Window stride for training trials (s)");
  dataset->add_option("--eval-stride", d_eval_stride, "Window stride for validation trials (s)");
  dataset->add_option("--split-ratio", d_ratio, "Train fraction of trials");
  dataset->add_option("--balance-cap", d_cap, "Maximum samples per class");
  dataset->add_flag("--no-materialize", no_materialize, "Write the manifest only");
  commands.emplace_back(dataset, [&] {
    json o = {{"dataset", ds_name}, {"trials", trials}};
    put(o, "window_len", d_len);
    put(o, "stride", d_stride);
    put(o, "eval_stride", d_eval_stride);
    put(o, "split_ratio", d_ratio);
    put(o, "balance_cap", d_cap);
    if (no_materialize) o["materialize"] = false;
    return o;
  });

  // embed
  auto* embed = app.add_subcommand("embed", "Compute builtin embeddings for a dataset");
  int augment_k = 0;
  embed->add_option("--dataset", ds_name, "Dataset name");
  embed->add_option("--augment", augment_k, "Augmented copies per training sample")->check(CLI::NonNegativeNumber);
  commands.emplace_back(embed, [&] { return json{{"dataset", ds_name}, {"augment", augment_k}}; });

  // train
  auto* train = app.add_subcommand("train", "Train the fusion classifier");
  std::string config, ck_name;
  std::optional<int> epochs, batch, patience;
  std::optional<double> lr, wd;
  train->add_option("--dataset", ds_name, "Dataset name");
  train->add_option("--config", config, "Fusion model config (JSON)");
  train->add_option("--name", ck_name, "Checkpoint name (default: dataset name)");
  train->add_option("--epochs", epochs, "Maximum epochs");
  train->add_option("--batch-size", batch, "Batch size");
  train->add_option("--lr", lr, "Learning rate");
  train->add_option("--weight-decay", wd, "AdamW weight decay");
  train->add_option("--patience", patience, "Early-stop patience in epochs");
  commands.emplace_back(train, [&] {
    json o = {{"dataset", ds_name}};
    if (!config.empty()) o["config"] = config;
    if (!ck_name.empty()) o["name"] = ck_name;
    put(o, "epochs", epochs);
    put(o, "batch_size", batch);
    put(o, "lr", lr);
    put(o, "weight_decay", wd);
    put(o, "patience", patience);
    return o;
  });

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  std::string checkpoint, split = "val";
  eval->add_option("--dataset", ds_name, "Dataset name");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint name or .ckpt path (default: dataset name)");
  eval->add_option("--split", split, "train, val, test or all");
  commands.emplace_back(eval, [&] {
    json o = {{"dataset", ds_name}, {"split", split}};
    if (!checkpoint.empty()) o["checkpoint"] = checkpoint;
    return o;
  });

  // infer
  auto* infer = app.add_subcommand("infer", "Stream a recording through the classifier (JSON lines on stdout)");
  std::string i_trial, i_wav, i_emb, i_out, i_ts;
  std::optional<int> wf, sf;
  std::optional<double> fr;
  std::optional<std::size_t> chunk;
  bool realtime = false, no_denoise = false;
  infer->add_option("--checkpoint", checkpoint, "Checkpoint name or .ckpt path")->required();
  auto* src_trial = infer->add_option("--trial", i_trial, "Trial id");
  auto* src_wav = infer->add_option("--wav", i_wav, "WAV file");
  src_trial->excludes(src_wav);
  infer->add_option("--embodiment", i_emb, "Noise profile to use with --wav");
  infer->add_option("--window-frames", wf, "Clip length in video frames");
  infer->add_option("--stride-frames", sf, "Clip stride in video frames");
  infer->add_option("--frame-rate", fr, "Video frame rate");
  infer->add_option("--timestamp", i_ts, "midpoint or start");
  infer->add_option("--chunk", chunk, "Producer chunk size in samples");
  infer->add_flag("--realtime", realtime, "Pace input at the audio rate; late windows may be dropped");
  infer->add_flag("--no-denoise", no_denoise, "Skip spectral gating");
  infer->add_option("--out", i_out, "Also write predictions to this file");
  commands.emplace_back(infer, [&] {
    json o = {{"checkpoint", checkpoint}, {"realtime", realtime}};
    if (!i_trial.empty()) o["trial"] = i_trial;
    if (!i_wav.empty()) o["wav"] = i_wav;
    if (!i_emb.empty()) o["embodiment"] = i_emb;
    if (!i_ts.empty()) o["timestamp"] = i_ts;
    if (!i_out.empty()) o["out"] = i_out;
    if (no_denoise) o["denoise"] = false;
    put(o, "window_frames", wf);
    put(o, "stride_frames", sf);
    put(o, "frame_rate", fr);
    put(o, "chunk", chunk);
    return o;
  });

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Window-length ablation over segmented trials");
  std::string durations = "0.1:1.0:0.1", ab_name;
  std::optional<std::size_t> max_train;
  bool parallel = false;
  ablate->add_option("--durations", durations, "lo:hi:step in seconds");
  ablate->add_option("--config", config, "Fusion model config (JSON)");
  ablate->add_option("--epochs", epochs, "Maximum epochs per point");
  ablate->add_option("--max-train", max_train, "Cap on training samples per point");
  ablate->add_option("--name", ab_name, "Report name under reports/");
  ablate->add_flag("--parallel", parallel, "Run duration points concurrently");
  commands.emplace_back(ablate, [&] {
    json o = {{"durations", durations}, {"parallel", parallel}};
    if (!config.empty()) o["config"] = config;
    if (!ab_name.empty()) o["name"] = ab_name;
    put(o, "epochs", epochs);
    put(o, "max_train", max_train);
    return o;
  });

  // overlay
  auto* overlay = app.add_subcommand("overlay", "Render per-frame prediction overlays and timeline JSON");
  std::string o_trial, o_out;
  overlay->add_option("--trial", o_trial, "Trial id")->required();
  overlay->add_option("--checkpoint", checkpoint, "Checkpoint name or .ckpt path")->required();
  overlay->add_option("--out", o_out, "Output directory (default reports/overlay/<trial>)");
  commands.emplace_back(overlay, [&] {
    json o = {{"trial", o_trial}, {"checkpoint", checkpoint}};
    if (!o_out.empty()) o["out"] = o_out;
    return o;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  // flags > environment > workspace config.json > defaults
  if (g.workspace.empty()) g.workspace = env_or("CONTACTSENSE_WORKSPACE", "workspace");
  if (!g.jobs) {
    const std::string env = env_or("CONTACTSENSE_JOBS", "");
    if (!env.empty()) {
      try {
        g.jobs = std::max(1, std::stoi(env));
      } catch (const std::exception&) {
        std::cerr << "error: CONTACTSENSE_JOBS must be a positive integer\n";
        return 2;
      }
    }
  }
  cs_set_logging(level_of(g.log_level), g.log_json ? 1 : 0);

  cs_workspace* raw = nullptr;
  if (cs_workspace_open(g.workspace.c_str(), &raw) != CS_OK) {
    std::cerr << "error: " << cs_last_error() << "\n";
    return 1;
  }
  std::unique_ptr<cs_workspace, decltype(&cs_workspace_close)> ws(raw, cs_workspace_close);

  const auto with_common = [&](json o) {
    if (g.jobs) o["jobs"] = *g.jobs;
    if (g.seed) o["seed"] = *g.seed;
    if (g.force) o["force"] = true;
    return o;
  };

  if (review->parsed()) {
    if (accept_all) return run(ws.get(), "accept", with_common(json{{"trials", trials}}), false);
    int bound = 0;
    cs_service* service = nullptr;
    if (cs_service_start(ws.get(), static_dir.empty() ? nullptr : static_dir.c_str(), host.c_str(), port, &service,
                         &bound) != CS_OK) {
      std::cerr << "error: " << cs_last_error() << "\n";
      return 1;
    }
    std::cout << "serving http://" << host << ":" << bound << "/" << std::endl;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    while (g_stop == 0) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    cs_service_stop(service);
    return 0;
  }
  for (auto& [sub, build] : commands) {
    if (sub->parsed()) return run(ws.get(), sub->get_name(), with_common(build()), sub == infer);
  }
  std::cerr << app.help();
  return 2;
}

#include <doctest.h>

#include <cstdlib>
#include <json.hpp>
#include <memory>

#include "contactsense/contactsense.h"
#include "contactsense/pipeline.hpp"
#include "contactsense/util.hpp"
#include "gradcheck.hpp"
#include "synth.hpp"

using namespace contactsense;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  cs_status status;
  json summary;
  std::vector<std::string> lines;
  std::string error;
};

Run run(cs_workspace* ws, const std::string& cmd, const json& opts = json::object()) {
  Run r;
  char* summary = nullptr;
  r.status = cs_run(
      ws, cmd.c_str(), opts.dump().c_str(),
      [](const char* line, void* user) { static_cast<Run*>(user)->lines.emplace_back(line); }, &r, &summary);
  if (summary != nullptr) {
    r.summary = json::parse(summary);
    cs_string_free(summary);
  }
  r.error = cs_last_error();
  return r;
}

using WsHandle = std::unique_ptr<cs_workspace, decltype(&cs_workspace_close)>;

WsHandle open_ws(const fs::path& root) {
  cs_workspace* raw = nullptr;
  REQUIRE(cs_workspace_open(root.c_str(), &raw) == CS_OK);
  return {raw, cs_workspace_close};
}

// Six short trials, two per contact class, ingested through the API.
struct Project {
  synth::TempDir dir{"pipe"};
  fs::path root = dir / "ws";
  WsHandle ws = open_ws(root);
  fs::path config = dir / "tiny.json";

  Project() {
    cs_set_logging(3, 0);
    const Label classes[] = {Label::leaf, Label::twig, Label::trunk};
    for (int i = 0; i < 6; ++i) {
      synth::TrialSpec s;
      s.id = "t" + std::to_string(i);
      s.cls = classes[i % 3];
      s.seed = static_cast<std::uint64_t>(10 + i);
      s.seconds = 7.0;
      s.contacts = {{1.0, 2.6}, {4.0, 5.6}};
      synth::write_trial(dir / "raw", s);
      REQUIRE(run(ws.get(), "ingest", {{"source", (dir / "raw" / s.id).string()}}).status == CS_OK);
    }
    atomic_write(config, to_json(gradcheck::tiny_config()));
  }
};

std::string slurp(const fs::path& p) { return read_file(p); }

}  // namespace

TEST_CASE("the full pipeline runs through the C API and is reproducible") {
  Project p;
  auto* ws = p.ws.get();
  auto r = run(ws, "profile", {{"embodiment", "probe"}, {"synthetic", true}});
  REQUIRE(r.status == CS_OK);
  CHECK(fs::exists(p.root / "profiles" / "probe.json"));

  r = run(ws, "segment");
  REQUIRE(r.status == CS_OK);
  CHECK(r.summary["units_done"] == 6);
  for (const auto& u : r.summary["units"]) CHECK(u["contact"] == 2);
  CHECK(fs::exists(p.root / "reports" / "runs" / "segment" / "t0.json"));

  r = run(ws, "segment");
  CHECK(r.summary["units_skipped"] == 6);
  r = run(ws, "segment", {{"trials", {"t0"}}, {"force", true}});
  CHECK(r.summary["units_done"] == 1);

  REQUIRE(run(ws, "accept").status == CS_OK);
  // reviewed files are not overwritten by a later automatic pass
  r = run(ws, "segment", {{"params", {{"alpha", 0.4}}}});
  REQUIRE(r.status == CS_OK);
  CHECK(r.summary["units_skipped"] == 6);
  CHECK(r.summary["units"][0]["reason"] == "reviewed");

  r = run(ws, "dataset", {{"window_len", 0.8}, {"stride", 0.4}});
  REQUIRE(r.status == CS_OK);
  CHECK(r.summary["n_samples"].get<int>() > 0);
  CHECK(r.summary["image_missing"] == 0);
  REQUIRE(run(ws, "embed").status == CS_OK);

  const json train_opts = {{"config", p.config.string()}, {"epochs", 3}, {"batch_size", 8}};
  r = run(ws, "train", train_opts);
  REQUIRE(r.status == CS_OK);
  CHECK(r.summary["epochs_run"].get<int>() >= 1);
  const auto ckpt = p.root / "checkpoints" / "default.ckpt";
  const std::string first = slurp(ckpt);
  const std::string first_csv = slurp(p.root / "checkpoints" / "default.metrics.csv");
  CHECK(run(ws, "train", train_opts).summary["units_skipped"] == 1);
  json forced = train_opts;
  forced["force"] = true;
  r = run(ws, "train", forced);
  REQUIRE(r.status == CS_OK);
  CHECK(slurp(ckpt) == first);
  CHECK(slurp(p.root / "checkpoints" / "default.metrics.csv") == first_csv);

  r = run(ws, "eval", {{"split", "val"}});
  REQUIRE(r.status == CS_OK);
  const auto report = json::parse(slurp(p.root / "reports" / "default.default.val.eval.json"));
  CHECK(report["four_class"]["total"] == r.summary["n_samples"]);
  CHECK(report["binary"]["classes"] == json({"ambient", "contact"}));
  CHECK(fs::exists(p.root / "reports" / "default.default.val.eval.txt"));
  CHECK(run(ws, "eval", {{"split", "bogus"}}).status == CS_INVALID_ARGUMENT);

  r = run(ws, "infer", {{"checkpoint", "default"}, {"trial", "t1"}});
  REQUIRE(r.status == CS_OK);
  CHECK(r.summary["windows"] == 13);  // 7 s: floor((7 - 0.8) / 0.5) + 1
  REQUIRE(r.lines.size() == 13);
  CHECK(json::parse(r.lines[0])["t"] == 0.4);

  r = run(ws, "overlay", {{"checkpoint", "default"}, {"trial", "t1"}});
  REQUIRE(r.status == CS_OK);
  CHECK(r.summary["frames_written"] == 14);
  const std::string timeline = slurp(p.root / "reports" / "overlay" / "t1" / "timeline.json");
  CHECK(run(ws, "overlay", {{"checkpoint", "default"}, {"trial", "t1"}, {"force", true}}).status == CS_OK);
  CHECK(slurp(p.root / "reports" / "overlay" / "t1" / "timeline.json") == timeline);

  // the single-window entry point of the C API
  cs_classifier* c = nullptr;
  REQUIRE(cs_classifier_open(ckpt.c_str(), (p.root / "profiles" / "probe.json").c_str(), &c) == CS_OK);
  const auto audio = read_wav(p.root / "trials" / "t1" / "trial.wav");
  char* out = nullptr;
  REQUIRE(cs_classify_window(c, audio.samples().data(), 12800, audio.sample_rate(), 0.0, &out) == CS_OK);
  const auto one = json::parse(out);
  cs_string_free(out);
  cs_classifier_close(c);
  CHECK(one["t"] == 0.4);
  CHECK(one["probs"].size() == 4);
}

TEST_CASE("samples without a frame stay out of fused training but feed audio-only models") {
  Project p;
  auto* ws = p.ws.get();
  const Label classes[] = {Label::leaf, Label::twig, Label::trunk};
  for (int i = 0; i < 3; ++i) {
    synth::TrialSpec s;
    s.id = "blind" + std::to_string(i);
    s.cls = classes[i];
    s.seed = static_cast<std::uint64_t>(40 + i);
    s.seconds = 7.0;
    s.contacts = {{1.0, 2.6}, {4.0, 5.6}};
    s.frame_rate = 0.0;
    synth::write_trial(p.dir / "raw", s);
    REQUIRE(run(ws, "ingest", {{"source", (p.dir / "raw" / s.id).string()}}).status == CS_OK);
  }
  REQUIRE(run(ws, "segment").status == CS_OK);
  auto r = run(ws, "dataset", {{"materialize", false}});
  REQUIRE(r.status == CS_OK);
  const int n_samples = r.summary["n_samples"].get<int>();
  const int missing = r.summary["image_missing"].get<int>();
  CHECK(missing > 0);
  REQUIRE(run(ws, "embed").status == CS_OK);

  r = run(ws, "train", {{"config", p.config.string()}, {"epochs", 1}});
  REQUIRE(r.status == CS_OK);
  CHECK(r.summary["image_missing_excluded"] == missing);
  CHECK(r.summary["n_train"].get<int>() + r.summary["n_val"].get<int>() + missing == n_samples);

  auto audio_only = gradcheck::tiny_config();
  audio_only.slots = {Slot::audio_spectral, Slot::audio_semantic};
  const auto cfg = p.dir / "audio.json";
  atomic_write(cfg, to_json(audio_only));
  r = run(ws, "train", {{"config", cfg.string()}, {"epochs", 1}, {"name", "audio"}});
  REQUIRE(r.status == CS_OK);
  CHECK(r.summary["image_missing_excluded"] == 0);
  CHECK(r.summary["n_train"].get<int>() + r.summary["n_val"].get<int>() == n_samples);
  r = run(ws, "eval", {{"checkpoint", "audio"}, {"split", "all"}});
  REQUIRE(r.status == CS_OK);
  CHECK(r.summary["n_samples"] == n_samples);
}

TEST_CASE("failures are reported per unit and through status codes") {
  Project p;
  auto* ws = p.ws.get();
  auto r = run(ws, "segment", {{"trials", {"t0", "ghost"}}});
  CHECK(r.status == CS_PARTIAL);
  CHECK(r.summary["units_done"] == 1);
  CHECK(r.summary["units"][1]["status"] == "failed");
  CHECK(r.error.find("ghost") != std::string::npos);

  CHECK(run(ws, "frobnicate").status == CS_INVALID_ARGUMENT);
  char* summary = nullptr;
  CHECK(cs_run(ws, "segment", "{oops", nullptr, nullptr, &summary) == CS_INVALID_ARGUMENT);
  CHECK(std::string(cs_last_error()).find("malformed JSON") != std::string::npos);
  CHECK(cs_run(nullptr, "segment", nullptr, nullptr, nullptr, nullptr) == CS_INVALID_ARGUMENT);
  CHECK(run(ws, "segment", {{"params", {{"alpha", -3}}}}).status == CS_INVALID_ARGUMENT);
  CHECK(run(ws, "train").status == CS_NOT_FOUND);
  CHECK(run(ws, "profile", {{"embodiment", "probe"}}).status == CS_PARTIAL);

  // same trial id with different content needs --force
  synth::TrialSpec other;
  other.id = "t0";
  other.seed = 99;
  synth::write_trial(p.dir / "other", other);
  r = run(ws, "ingest", {{"source", (p.dir / "other" / "t0").string()}});
  CHECK(r.status == CS_PARTIAL);
  CHECK(r.error.find("force") != std::string::npos);
  CHECK(run(ws, "ingest", {{"source", (p.dir / "raw" / "t0").string()}}).summary["units_skipped"] == 1);
  CHECK(run(ws, "ingest", {{"source", (p.dir / "other" / "t0").string()}, {"force", true}}).status == CS_OK);

  cs_classifier* c = nullptr;
  CHECK(cs_classifier_open((p.dir / "none.ckpt").c_str(), nullptr, &c) != CS_OK);
  CHECK(c == nullptr);
  char* names = nullptr;
  REQUIRE(cs_command_names(&names) == CS_OK);
  CHECK(std::string(names).find("ablate\n") != std::string::npos);
  cs_string_free(names);
}

TEST_CASE("featurize and ablate write their reports") {
  Project p;
  auto* ws = p.ws.get();
  REQUIRE(run(ws, "segment").status == CS_OK);
  auto r = run(ws, "featurize", {{"trials", {"t2"}}});
  REQUIRE(r.status == CS_OK);
  const std::string csv = slurp(p.root / "reports" / "features" / "t2.csv");
  CHECK(csv.rfind("trial_id,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + static_cast<long>(r.summary["units"][0]["rows"].get<int>()));

  r = run(ws, "ablate", {{"config", p.config.string()}, {"epochs", 2}, {"max_train", 24}, {"name", "abl"}});
  INFO(r.error);
  REQUIRE(r.status == CS_OK);
  const std::string ab = slurp(p.root / "reports" / "abl.csv");
  CHECK(std::count(ab.begin(), ab.end(), '\n') == 11);
  const auto pts = json::parse(slurp(p.root / "reports" / "abl.json"))["points"];
  REQUIRE(pts.size() == 10);
  for (const auto& pt : pts) {
    CHECK(pt["n_samples"] == pts[0]["n_samples"]);
    CHECK(pt["accuracy"].get<double>() >= 0.0);
  }
  CHECK(run(ws, "ablate", {{"config", p.config.string()}, {"epochs", 2}, {"max_train", 24}, {"name", "abl"}})
            .summary["units_skipped"] == 1);
}

TEST_CASE("the command line maps outcomes to exit codes") {
  Project p;
  const std::string cli = CONTACTSENSE_CLI_PATH;
  const auto sh = [&](const std::string& args) {
    const int rc = std::system((cli + " -w " + p.root.string() + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(rc);
  };
  CHECK(sh("--help") == 0);
  CHECK(sh("segment --trial t0") == 0);
  CHECK(fs::exists(p.root / "segments" / "t0.segments.json"));
  CHECK(sh("segment --trial ghost") == 1);
  CHECK(sh("segment --alpha notanumber") == 2);
  CHECK(sh("--no-such-flag") == 2);
  CHECK(sh("") == 2);
  CHECK(sh("review --accept-all --trial t0") == 0);
  CHECK(json::parse(slurp(p.root / "segments" / "t0.segments.json"))["segments"][0]["review_state"] == "accepted");
}

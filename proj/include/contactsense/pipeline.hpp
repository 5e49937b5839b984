#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "contactsense/eval.hpp"
#include "contactsense/workspace.hpp"

namespace contactsense {

// Outcome of one command. `errors` holds one entry per failed unit of work
// (usually a trial); units that succeeded keep their outputs.
struct CommandResult {
  nlohmann::ordered_json summary = nlohmann::ordered_json::object();
  std::vector<std::string> errors;
  std::size_t units_done = 0;
  std::size_t units_skipped = 0;

  bool ok() const { return errors.empty(); }
};

// Receives streamed output lines (infer predictions).
using LineSink = std::function<void(const std::string&)>;

// Runs one pipeline command against a workspace. Options use snake_case keys
// matching the CLI flags; absent keys fall back to workspace config, then
// defaults. Common keys: trials, seed, jobs, force.
CommandResult run_command(Workspace& ws, const std::string& command, const nlohmann::json& options,
                          const LineSink& emit = {});

std::vector<std::string> command_names();

// Provenance record kept under reports/runs/<command>/<unit>.json. A unit
// whose parameters, input hashes and output hashes are unchanged is skipped.
struct RunRecord {
  std::string command;
  std::string unit;
  nlohmann::ordered_json params;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
};

std::filesystem::path run_record_path(const Workspace& ws, const RunRecord& r);
bool run_is_current(const Workspace& ws, const RunRecord& r);
void write_run_record(const Workspace& ws, const RunRecord& r);

struct AblationSettings {
  std::vector<double> durations;
  double stride_s = 0.4;
  double split_ratio = 0.8;
  std::uint64_t seed = 0;
  FusionConfig model;
  TrainConfig train;
  std::size_t max_train = 0;  // 0: no cap beyond the common budget
  int jobs = 1;
};

// Ablation hooks over the workspace's trials and saved segments: windows of
// each duration are re-sliced, embedded with the builtin encoders, trained
// on and scored by sample accuracy.
AblationHooks workspace_ablation_hooks(const Workspace& ws, const AblationSettings& s);

}  // namespace contactsense

#pragma once

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "contactsense/workspace.hpp"

namespace httplib {
class Server;
}

namespace contactsense {

struct Response {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

// Review state for one trial. Every acknowledged change is first appended
// to <segments>/.review/<trial>.log.jsonl; a snapshot is rewritten every
// few entries so replay stays short.
struct ReviewSession {
  std::string trial_id;
  SegmentationParams params;
  SegmentFile file;  // segments carry review_state
  bool dirty = false;
  std::string last_export_path;
  std::uint64_t log_entries = 0;
};

class ReviewService {
 public:
  explicit ReviewService(Workspace ws, std::filesystem::path static_dir = {});
  ~ReviewService();
  ReviewService(const ReviewService&) = delete;
  ReviewService& operator=(const ReviewService&) = delete;

  // Endpoint handlers; the HTTP layer is a thin adapter over these.
  Response list_trials();
  Response get_trial(const std::string& id);
  Response get_envelope(const std::string& id, std::size_t points);
  Response get_frames(const std::string& id, std::optional<double> from, std::optional<double> to);
  Response get_frame_image(const std::string& id, const std::string& epoch_ns);
  Response resegment(const std::string& id, const std::string& body);
  Response review(const std::string& id, std::size_t segment_id, const std::string& body);
  Response export_trial(const std::string& id);

  // Binds to host:port (port 0 picks a free one) and serves on a
  // background thread. Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  void stop();
  // Blocks until the background server exits.
  void wait();
  // Serves on the calling thread until stop().
  void serve_forever(const std::string& host, int port);

  static constexpr std::uint64_t kSnapshotEvery = 16;

 private:
  struct TrialState {
    std::mutex mutex;
    std::unique_ptr<ReviewSession> session;
    std::optional<SegmentationResult> detail;  // envelope and thresholds of the current params
    std::atomic<std::uint64_t> generation{0};
  };

  TrialState& state(const std::string& id);
  ReviewSession& session_locked(TrialState& st, const std::string& id);
  const SegmentationResult& detail_locked(TrialState& st, const std::string& id);
  void append_log(ReviewSession& s, const nlohmann::ordered_json& entry);
  void write_snapshot(const ReviewSession& s);
  std::filesystem::path review_dir() const;
  void apply_entry(ReviewSession& s, const nlohmann::json& entry, const TrialRecording& trial);
  void install_routes();

  Workspace ws_;
  std::filesystem::path static_dir_;
  std::mutex states_mutex_;
  std::map<std::string, std::unique_ptr<TrialState>> states_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  std::mutex run_mutex_;
  std::condition_variable run_cv_;
  bool running_ = false;
};

std::string error_body(const std::string& message);

// Applies one review action to a session's segment list. Throws
// ParameterError or ConflictError naming the violated rule.
ContactSegment apply_review_action(std::vector<ContactSegment>& segments, std::size_t segment_id,
                                   const nlohmann::json& action, const SegmentationParams& p);

// Export form of a reviewed file: rejected segments dropped, ambient
// intervals recomputed from the envelope around the remaining contacts.
SegmentFile curated_export(const SegmentFile& reviewed, const SegmentationResult& detail);

}  // namespace contactsense

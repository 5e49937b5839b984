#include "contactsense/service.hpp"

#include <httplib.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>

#include "contactsense/error.hpp"
#include "contactsense/log.hpp"
#include "contactsense/util.hpp"

namespace contactsense {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string error_body(const std::string& message) {
  ordered_json j;
  j["error"] = message;
  return j.dump();
}

namespace {

Response ok_json(const std::string& body) { return Response{200, body, "application/json"}; }

int status_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::invalid_argument: return 400;
    case ErrorCode::not_found: return 404;
    case ErrorCode::conflict: return 409;
    case ErrorCode::format: return 422;
    default: return 500;
  }
}

template <class Fn>
Response guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    return Response{status_for(e), error_body(e.what())};
  } catch (const json::exception& e) {
    return Response{400, error_body(std::string("malformed JSON: ") + e.what())};
  } catch (const std::exception& e) {
    return Response{500, error_body(e.what())};
  }
}

SegmentFile doc_from(const json& j) { return segment_file_from_json(j.dump()); }

bool overlaps(const ContactSegment& a, double start, double end) { return start < a.end_seconds && a.start_seconds < end; }

ordered_json segment_view(const ContactSegment& s, std::size_t id) {
  ordered_json j;
  j["id"] = id;
  j["start_s"] = s.start_seconds;
  j["end_s"] = s.end_seconds;
  j["kind"] = std::string(to_string(s.kind));
  j["label"] = s.label ? ordered_json(std::string(to_string(*s.label))) : ordered_json(nullptr);
  j["review_state"] = std::string(to_string(s.review_state));
  return j;
}

}  // namespace

ContactSegment apply_review_action(std::vector<ContactSegment>& segments, std::size_t segment_id, const json& action,
                                   const SegmentationParams& p) {
  if (segment_id >= segments.size()) throw NotFoundError("no segment " + std::to_string(segment_id));
  if (!action.is_object() || !action.contains("action") || !action["action"].is_string()) {
    throw ParameterError("body must be an object with an 'action' field");
  }
  auto& seg = segments[segment_id];
  const auto kind = action["action"].get<std::string>();
  if (kind == "accept") {
    seg.review_state = ReviewState::accepted;
  } else if (kind == "reject") {
    seg.review_state = ReviewState::rejected;
  } else if (kind == "relabel") {
    if (!action.contains("label") || !action["label"].is_string()) throw ParameterError("relabel needs a 'label'");
    const auto l = parse_label(action["label"].get<std::string>());
    if (!l || *l == Label::ambient) throw ParameterError("label must be leaf, twig or trunk");
    if (seg.kind != SegmentKind::contact) throw ParameterError("only contact segments carry a label");
    seg.label = *l;
    seg.review_state = ReviewState::edited;
  } else if (kind == "adjust_bounds") {
    if (!action.contains("start_s") || !action.contains("end_s") || !action["start_s"].is_number() ||
        !action["end_s"].is_number()) {
      throw ParameterError("adjust_bounds needs numeric start_s and end_s");
    }
    const double start = action["start_s"].get<double>();
    const double end = action["end_s"].get<double>();
    if (!(start >= 0.0) || !(end > start)) throw ParameterError("start_s must be >= 0 and below end_s");
    if (seg.kind == SegmentKind::contact && end - start < p.delta_min_seconds) {
      throw ParameterError("delta_min violated: duration " + std::to_string(end - start) + " s is below delta_min " +
                           std::to_string(p.delta_min_seconds) + " s");
    }
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const auto& other = segments[i];
      if (i == segment_id || other.review_state == ReviewState::rejected) continue;
      const bool relevant = seg.kind == SegmentKind::contact || other.kind == SegmentKind::contact;
      if (relevant && overlaps(other, start, end)) {
        throw ConflictError("overlap: bounds [" + std::to_string(start) + ", " + std::to_string(end) +
                            "] intersect segment " + std::to_string(i));
      }
    }
    seg.start_seconds = start;
    seg.end_seconds = end;
    seg.review_state = ReviewState::edited;
  } else {
    throw ParameterError("unknown action '" + kind + "' (accept, reject, relabel, adjust_bounds)");
  }
  return seg;
}

SegmentFile curated_export(const SegmentFile& reviewed, const SegmentationResult& detail) {
  SegmentFile out = reviewed;
  out.thresholds = detail.thresholds;
  std::vector<ContactSegment> contact;
  std::vector<ContactSegment> rejected_ambient;
  for (const auto& s : reviewed.segments) {
    if (s.kind == SegmentKind::contact && s.review_state != ReviewState::rejected) contact.push_back(s);
    if (s.kind == SegmentKind::ambient && s.review_state == ReviewState::rejected) rejected_ambient.push_back(s);
  }
  std::sort(contact.begin(), contact.end(),
            [](const ContactSegment& a, const ContactSegment& b) { return a.start_seconds < b.start_seconds; });
  auto ambient = mine_ambient(detail.envelope, detail.thresholds, contact, reviewed.params.min_ambient_seconds);
  std::erase_if(ambient, [&](const ContactSegment& a) {
    return std::any_of(rejected_ambient.begin(), rejected_ambient.end(),
                       [&](const ContactSegment& r) { return overlaps(r, a.start_seconds, a.end_seconds); });
  });
  for (auto& a : ambient) {
    for (const auto& s : reviewed.segments) {
      if (s.kind == SegmentKind::ambient && s.start_seconds == a.start_seconds && s.end_seconds == a.end_seconds) {
        a.review_state = s.review_state;
      }
    }
  }
  out.segments = contact;
  out.segments.insert(out.segments.end(), ambient.begin(), ambient.end());
  std::stable_sort(out.segments.begin(), out.segments.end(),
                   [](const ContactSegment& a, const ContactSegment& b) { return a.start_seconds < b.start_seconds; });
  return out;
}

// --- sessions -----------------------------------------------------------------------

ReviewService::ReviewService(Workspace ws, std::filesystem::path static_dir)
    : ws_(std::move(ws)), static_dir_(std::move(static_dir)) {
  std::filesystem::create_directories(review_dir());
}

ReviewService::~ReviewService() { stop(); }

std::filesystem::path ReviewService::review_dir() const { return ws_.segments_dir() / ".review"; }

ReviewService::TrialState& ReviewService::state(const std::string& id) {
  if (!ws_.has_trial(id)) throw NotFoundError("unknown trial '" + id + "'");
  std::lock_guard lock(states_mutex_);
  auto& slot = states_[id];
  if (!slot) slot = std::make_unique<TrialState>();
  return *slot;
}

void ReviewService::append_log(ReviewSession& s, const ordered_json& entry) {
  const auto path = review_dir() / (s.trial_id + ".log.jsonl");
  const std::string line = entry.dump() + "\n";
  std::FILE* f = std::fopen(path.c_str(), "ab");
  if (f == nullptr) throw IoError("cannot open review log " + path.string());
  const bool ok = std::fwrite(line.data(), 1, line.size(), f) == line.size() && std::fflush(f) == 0 && ::fsync(fileno(f)) == 0;
  std::fclose(f);
  if (!ok) throw IoError("cannot append to review log " + path.string());
  ++s.log_entries;
  if (s.log_entries % kSnapshotEvery == 0) write_snapshot(s);
}

void ReviewService::write_snapshot(const ReviewSession& s) {
  ordered_json j;
  j["log_entries"] = s.log_entries;
  j["trial_id"] = s.trial_id;
  j["file"] = ordered_json::parse(to_json(s.file));
  j["dirty"] = s.dirty;
  j["last_export_path"] = s.last_export_path;
  atomic_write(review_dir() / (s.trial_id + ".snapshot.json"), j.dump() + "\n");
}

void ReviewService::apply_entry(ReviewSession& s, const json& entry, const TrialRecording&) {
  const auto op = entry.at("op").get<std::string>();
  if (op == "init" || op == "resegment") {
    s.file = doc_from(entry.at("file"));
    s.params = s.file.params;
    s.dirty = op == "resegment";
  } else if (op == "review") {
    apply_review_action(s.file.segments, entry.at("segment_id").get<std::size_t>(), entry.at("action"), s.params);
    s.dirty = true;
  } else if (op == "export") {
    s.dirty = false;
    s.last_export_path = entry.at("path").get<std::string>();
  } else {
    throw FormatError("unknown review log entry '" + op + "'");
  }
}

ReviewSession& ReviewService::session_locked(TrialState& st, const std::string& id) {
  if (st.session) return *st.session;
  auto s = std::make_unique<ReviewSession>();
  s->trial_id = id;
  const auto trial = ws_.trial(id);
  const auto snap_path = review_dir() / (id + ".snapshot.json");
  const auto log_path = review_dir() / (id + ".log.jsonl");
  std::uint64_t skip = 0;
  if (std::filesystem::exists(snap_path)) {
    const auto j = json::parse(read_file(snap_path));
    s->file = doc_from(j.at("file"));
    s->params = s->file.params;
    s->dirty = j.value("dirty", false);
    s->last_export_path = j.value("last_export_path", std::string());
    skip = j.at("log_entries").get<std::uint64_t>();
  }
  std::uint64_t seen = 0;
  if (std::filesystem::exists(log_path)) {
    const std::string text = read_file(log_path);
    std::size_t pos = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      if (nl == std::string::npos) {
        // cut it off so the next append starts on a clean line
        log_warn(id + ": dropping torn final review log line");
        std::filesystem::resize_file(log_path, pos);
        break;
      }
      const std::string line = text.substr(pos, nl - pos);
      pos = nl + 1;
      if (line.empty()) continue;
      ++seen;
      if (seen <= skip) continue;
      apply_entry(*s, json::parse(line), trial);
    }
  }
  s->log_entries = seen;
  if (seen == 0) {
    auto initial = ws_.saved_segments(id);
    if (!initial) initial = ws_.segment(trial, ws_.config().segmentation);
    s->file = *initial;
    s->params = initial->params;
    append_log(*s, ordered_json{{"op", "init"}, {"file", ordered_json::parse(to_json(*initial))}});
  }
  st.session = std::move(s);
  return *st.session;
}

const SegmentationResult& ReviewService::detail_locked(TrialState& st, const std::string& id) {
  auto& s = session_locked(st, id);
  if (!st.detail) {  // reset whenever the session params change
    SegmentationResult d;
    ws_.segment(ws_.trial(id), s.params, &d);
    st.detail = std::move(d);
  }
  return *st.detail;
}

// --- handlers ------------------------------------------------------------------------

Response ReviewService::list_trials() {
  return guarded([&] {
    ordered_json out = ordered_json::array();
    for (const auto& id : ws_.trial_ids()) {
      const auto t = ws_.trial(id);
      ordered_json j;
      j["trial_id"] = id;
      j["embodiment"] = std::string(to_string(t.embodiment));
      j["declared_class"] = std::string(to_string(t.declared_class));
      j["n_frames"] = t.frames.size();
      j["has_segments"] = std::filesystem::exists(ws_.segment_path(id));
      out.push_back(j);
    }
    return ok_json(out.dump());
  });
}

Response ReviewService::get_trial(const std::string& id) {
  return guarded([&] {
    auto& st = state(id);
    std::lock_guard lock(st.mutex);
    const auto& s = session_locked(st, id);
    const auto t = ws_.trial(id);
    const auto audio = read_wav(t.audio_path());
    ordered_json j;
    j["trial_id"] = id;
    j["embodiment"] = std::string(to_string(t.embodiment));
    j["declared_class"] = std::string(to_string(t.declared_class));
    j["duration_s"] = audio.duration_seconds();
    j["n_frames"] = t.frames.size();
    j["dirty"] = s.dirty;
    j["last_export_path"] = s.last_export_path;
    const auto doc = ordered_json::parse(to_json(s.file));
    j["params"] = doc["params"];
    j["thresholds"] = doc["thresholds"];
    j["segments"] = ordered_json::array();
    for (std::size_t i = 0; i < s.file.segments.size(); ++i) j["segments"].push_back(segment_view(s.file.segments[i], i));
    return ok_json(j.dump());
  });
}

Response ReviewService::get_envelope(const std::string& id, std::size_t points) {
  return guarded([&] {
    if (points < 2) throw ParameterError("points must be at least 2");
    auto& st = state(id);
    std::lock_guard lock(st.mutex);
    const auto& d = detail_locked(st, id);
    const auto& v = d.envelope.values;
    ordered_json j;
    j["hop_s"] = d.envelope.hop_seconds;
    j["start_offset_s"] = d.envelope.start_offset_seconds;
    j["n_values"] = v.size();
    ordered_json pts = ordered_json::array();
    if (v.size() <= points) {
      for (std::size_t k = 0; k < v.size(); ++k) pts.push_back({d.envelope.time_at(k), v[k]});
    } else {
      // bucket maxima keep short contact peaks visible
      for (std::size_t b = 0; b < points; ++b) {
        const std::size_t lo = b * v.size() / points;
        const std::size_t hi = std::max(lo + 1, (b + 1) * v.size() / points);
        const auto it = std::max_element(v.begin() + static_cast<std::ptrdiff_t>(lo), v.begin() + static_cast<std::ptrdiff_t>(hi));
        const auto k = static_cast<std::size_t>(it - v.begin());
        pts.push_back({d.envelope.time_at(k), *it});
      }
    }
    j["points"] = pts;
    j["thresholds"] = {{"t_contact", d.thresholds.t_contact}, {"t_noncontact", d.thresholds.t_noncontact}};
    return ok_json(j.dump());
  });
}

Response ReviewService::get_frames(const std::string& id, std::optional<double> from, std::optional<double> to) {
  return guarded([&] {
    const auto t = ws_.trial(id);
    ordered_json out = ordered_json::array();
    for (const auto& f : t.frames) {
      const double ft = t.frame_time(f);
      if ((from && ft < *from) || (to && ft > *to)) continue;
      out.push_back({{"t", ft},
                     {"epoch_ns", f.epoch_ns},
                     {"url", "/trials/" + id + "/frames/" + std::to_string(f.epoch_ns)}});
    }
    return ok_json(out.dump());
  });
}

Response ReviewService::get_frame_image(const std::string& id, const std::string& epoch_ns) {
  return guarded([&] {
    const auto t = ws_.trial(id);
    for (const auto& f : t.frames) {
      if (std::to_string(f.epoch_ns) != epoch_ns) continue;
      const auto ext = f.path.extension().string();
      return Response{200, read_file(f.path), ext == ".png" ? "image/png" : "image/jpeg"};
    }
    throw NotFoundError("no frame " + epoch_ns);
  });
}

Response ReviewService::resegment(const std::string& id, const std::string& body) {
  return guarded([&] {
    auto& st = state(id);
    SegmentationParams base;
    {
      std::lock_guard lock(st.mutex);
      base = session_locked(st, id).params;
    }
    const auto params = segmentation_params_from_json(body.empty() ? json::object() : json::parse(body), base);
    const std::uint64_t mine = ++st.generation;
    SegmentationResult detail;
    const SegmentFile doc = ws_.segment(ws_.trial(id), params, &detail);  // off the session lock
    std::lock_guard lock(st.mutex);
    if (st.generation.load() != mine) throw ConflictError("superseded by a newer resegment request");
    auto& s = session_locked(st, id);
    const std::string text = to_json(doc);
    append_log(s, ordered_json{{"op", "resegment"}, {"file", ordered_json::parse(text)}});
    s.file = doc;
    s.params = params;
    s.dirty = true;
    st.detail = std::move(detail);
    return ok_json(text);
  });
}

Response ReviewService::review(const std::string& id, std::size_t segment_id, const std::string& body) {
  return guarded([&] {
    const auto action = json::parse(body);
    auto& st = state(id);
    std::lock_guard lock(st.mutex);
    auto& s = session_locked(st, id);
    auto trial_segments = s.file.segments;  // validate on a copy before logging
    const auto updated = apply_review_action(trial_segments, segment_id, action, s.params);
    append_log(s, ordered_json{{"op", "review"}, {"segment_id", segment_id}, {"action", ordered_json::parse(action.dump())}});
    s.file.segments = std::move(trial_segments);
    s.dirty = true;
    return ok_json(segment_view(updated, segment_id).dump());
  });
}

Response ReviewService::export_trial(const std::string& id) {
  return guarded([&] {
    auto& st = state(id);
    std::lock_guard lock(st.mutex);
    auto& s = session_locked(st, id);
    const auto& detail = detail_locked(st, id);
    const SegmentFile curated = curated_export(s.file, detail);
    if (const auto problem = check_segment_invariants(curated.segments, curated.params); !problem.empty()) {
      throw ConflictError("export would violate segment invariants: " + problem);
    }
    const std::string text = to_json(curated);
    const auto path = ws_.segment_path(id);
    atomic_write(path, text);
    append_log(s, ordered_json{{"op", "export"}, {"path", path.string()}});
    s.dirty = false;
    s.last_export_path = path.string();
    write_snapshot(s);
    return ok_json(text);
  });
}

// --- HTTP --------------------------------------------------------------------------------

void ReviewService::install_routes() {
  auto& srv = *server_;
  const auto send = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  srv.Get("/trials", [this, send](const httplib::Request&, httplib::Response& res) { send(res, list_trials()); });
  srv.Get(R"(/trials/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, get_trial(req.matches[1]));
  });
  srv.Get(R"(/trials/([^/]+)/envelope)", [this, send](const httplib::Request& req, httplib::Response& res) {
    std::size_t points = 2000;
    if (req.has_param("points")) {
      try {
        points = std::stoul(req.get_param_value("points"));
      } catch (const std::exception&) {
        send(res, Response{400, error_body("points must be a positive integer")});
        return;
      }
    }
    send(res, get_envelope(req.matches[1], points));
  });
  srv.Get(R"(/trials/([^/]+)/frames)", [this, send](const httplib::Request& req, httplib::Response& res) {
    std::optional<double> from, to;
    try {
      if (req.has_param("from")) from = std::stod(req.get_param_value("from"));
      if (req.has_param("to")) to = std::stod(req.get_param_value("to"));
    } catch (const std::exception&) {
      send(res, Response{400, error_body("from/to must be numbers of seconds")});
      return;
    }
    send(res, get_frames(req.matches[1], from, to));
  });
  srv.Get(R"(/trials/([^/]+)/frames/(\d+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, get_frame_image(req.matches[1], req.matches[2]));
  });
  srv.Post(R"(/trials/([^/]+)/resegment)", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, resegment(req.matches[1], req.body));
  });
  srv.Post(R"(/trials/([^/]+)/segments/(\d+)/review)", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, review(req.matches[1], std::stoul(req.matches[2]), req.body));
  });
  srv.Post(R"(/trials/([^/]+)/export)", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, export_trial(req.matches[1]));
  });
  if (!static_dir_.empty() && std::filesystem::is_directory(static_dir_)) srv.set_mount_point("/", static_dir_.string());
}

int ReviewService::start(const std::string& host, int port) {
  if (server_) throw StateError("service already running");
  server_ = std::make_unique<httplib::Server>();
  install_routes();
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) {
    server_.reset();
    throw IoError("cannot bind " + host + ":" + std::to_string(port));
  }
  {
    std::lock_guard lock(run_mutex_);
    running_ = true;
  }
  thread_ = std::thread([this] {
    server_->listen_after_bind();
    std::lock_guard lock(run_mutex_);
    running_ = false;
    run_cv_.notify_all();
  });
  server_->wait_until_ready();
  log_info("review service listening on " + host + ":" + std::to_string(bound));
  return bound;
}

void ReviewService::serve_forever(const std::string& host, int port) {
  start(host, port);
  wait();
}

void ReviewService::wait() {
  std::unique_lock lock(run_mutex_);
  run_cv_.wait(lock, [this] { return !running_; });
}

void ReviewService::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
  server_.reset();
}

}  // namespace contactsense

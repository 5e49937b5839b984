#include "contactsense/contactsense.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <string>

#include "contactsense/error.hpp"
#include "contactsense/inference.hpp"
#include "contactsense/log.hpp"
#include "contactsense/pipeline.hpp"
#include "contactsense/service.hpp"

struct cs_workspace {
  contactsense::Workspace ws;
};

struct cs_classifier {
  std::unique_ptr<contactsense::WindowClassifier> classifier;
  contactsense::StreamConfig cfg;
};

struct cs_service {
  std::unique_ptr<contactsense::ReviewService> service;
};

namespace {

thread_local std::string g_last_error;

cs_status fail(cs_status code, const std::string& msg) {
  g_last_error = msg;
  return code;
}

char* dup(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out != nullptr) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <class Fn>
cs_status guarded(Fn&& fn) {
  g_last_error.clear();
  try {
    return fn();
  } catch (const contactsense::Error& e) {
    return fail(static_cast<cs_status>(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(CS_INVALID_ARGUMENT, std::string("malformed JSON: ") + e.what());
  } catch (const std::exception& e) {
    return fail(CS_INTERNAL, e.what());
  }
}

}  // namespace

extern "C" {

const char* cs_version(void) { return "1.0.0"; }

const char* cs_last_error(void) { return g_last_error.c_str(); }

void cs_string_free(char* s) { std::free(s); }

void cs_set_logging(int level, int json_lines) {
  contactsense::set_log_level(static_cast<contactsense::LogLevel>(level < 0 ? 0 : level > 4 ? 4 : level));
  contactsense::set_log_json(json_lines != 0);
}

cs_status cs_workspace_open(const char* root, cs_workspace** out) {
  if (root == nullptr || out == nullptr) return fail(CS_INVALID_ARGUMENT, "root and out must be non-null");
  *out = nullptr;
  return guarded([&] {
    *out = new cs_workspace{contactsense::Workspace::open(root)};
    return CS_OK;
  });
}

void cs_workspace_close(cs_workspace* ws) { delete ws; }

cs_status cs_run(cs_workspace* ws, const char* command, const char* options_json, cs_line_fn on_line, void* user,
                 char** summary_json) {
  if (ws == nullptr || command == nullptr) return fail(CS_INVALID_ARGUMENT, "workspace and command must be non-null");
  if (summary_json != nullptr) *summary_json = nullptr;
  return guarded([&] {
    const auto options =
        options_json == nullptr ? nlohmann::json::object() : nlohmann::json::parse(options_json);
    contactsense::LineSink sink;
    if (on_line != nullptr) sink = [&](const std::string& line) { on_line(line.c_str(), user); };
    const auto result = contactsense::run_command(ws->ws, command, options, sink);
    if (summary_json != nullptr) *summary_json = dup(result.summary.dump());
    if (result.ok()) return CS_OK;
    std::string msg = std::to_string(result.errors.size()) + " unit(s) failed";
    for (const auto& e : result.errors) msg += "\n  " + e;
    return fail(CS_PARTIAL, msg);
  });
}

cs_status cs_command_names(char** out) {
  if (out == nullptr) return fail(CS_INVALID_ARGUMENT, "out must be non-null");
  std::string joined;
  for (const auto& n : contactsense::command_names()) joined += n + "\n";
  *out = dup(joined);
  return CS_OK;
}

cs_status cs_classifier_open(const char* checkpoint_path, const char* noise_profile_path, cs_classifier** out) {
  if (checkpoint_path == nullptr || out == nullptr) return fail(CS_INVALID_ARGUMENT, "checkpoint and out must be non-null");
  *out = nullptr;
  return guarded([&] {
    auto model = std::make_shared<const contactsense::FusionModel>(contactsense::FusionModel::load(checkpoint_path));
    std::optional<contactsense::NoiseProfile> profile;
    if (noise_profile_path != nullptr) profile = contactsense::load_noise_profile(noise_profile_path);
    auto c = std::make_unique<cs_classifier>();
    c->classifier = std::make_unique<contactsense::WindowClassifier>(std::move(model), std::move(profile));
    *out = c.release();
    return CS_OK;
  });
}

void cs_classifier_close(cs_classifier* c) { delete c; }

cs_status cs_classify_window(const cs_classifier* c, const double* samples, size_t n_samples, int sample_rate,
                             double start_s, char** prediction_json) {
  if (c == nullptr || samples == nullptr || prediction_json == nullptr) {
    return fail(CS_INVALID_ARGUMENT, "classifier, samples and out must be non-null");
  }
  *prediction_json = nullptr;
  return guarded([&] {
    contactsense::Waveform w(std::vector<double>(samples, samples + n_samples), sample_rate);
    *prediction_json = dup(contactsense::prediction_json(c->classifier->classify(w, start_s, c->cfg)));
    return CS_OK;
  });
}

cs_status cs_service_start(const cs_workspace* ws, const char* static_dir, const char* host, int port,
                           cs_service** out, int* bound_port) {
  if (ws == nullptr || out == nullptr) return fail(CS_INVALID_ARGUMENT, "workspace and out must be non-null");
  *out = nullptr;
  return guarded([&] {
    auto s = std::make_unique<cs_service>();
    s->service = std::make_unique<contactsense::ReviewService>(ws->ws, static_dir == nullptr ? "" : static_dir);
    const int port_used = s->service->start(host == nullptr ? "127.0.0.1" : host, port);
    if (bound_port != nullptr) *bound_port = port_used;
    *out = s.release();
    return CS_OK;
  });
}

cs_status cs_service_wait(cs_service* s) {
  if (s == nullptr) return fail(CS_INVALID_ARGUMENT, "service must be non-null");
  s->service->wait();
  return CS_OK;
}

void cs_service_stop(cs_service* s) {
  if (s == nullptr) return;
  s->service->stop();
  delete s;
}

}  // extern "C"

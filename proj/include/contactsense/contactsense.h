#ifndef CONTACTSENSE_H
#define CONTACTSENSE_H

#include <stddef.h>

#if defined(_WIN32)
#define CS_API __declspec(dllexport)
#else
#define CS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cs_status {
  CS_OK = 0,
  CS_INVALID_ARGUMENT = 1,
  CS_IO = 2,
  CS_FORMAT = 3,
  CS_NOT_FOUND = 4,
  CS_CONFLICT = 5,
  CS_STATE = 6,
  CS_INTERNAL = 7,
  /* the command ran, but at least one unit of work failed */
  CS_PARTIAL = 8
} cs_status;

typedef struct cs_workspace cs_workspace;
typedef struct cs_classifier cs_classifier;
typedef struct cs_service cs_service;

CS_API const char* cs_version(void);

/* Message of the last failure on the calling thread ("" if none). */
CS_API const char* cs_last_error(void);

/* Strings returned through char** out-parameters are owned by the caller. */
CS_API void cs_string_free(char* s);

/* level: 0 debug, 1 info, 2 warn, 3 error, 4 off. */
CS_API void cs_set_logging(int level, int json_lines);

CS_API cs_status cs_workspace_open(const char* root, cs_workspace** out);
CS_API void cs_workspace_close(cs_workspace* ws);

typedef void (*cs_line_fn)(const char* line, void* user);

/* Runs a pipeline command. options_json is an object of snake_case options
   (NULL means {}). Streamed output lines go to on_line when given. On CS_OK
   and CS_PARTIAL, *summary_json (if non-NULL) receives the run summary. */
CS_API cs_status cs_run(cs_workspace* ws, const char* command, const char* options_json, cs_line_fn on_line,
                        void* user, char** summary_json);

/* Newline-separated command names. */
CS_API cs_status cs_command_names(char** out);

/* Window classifier over a checkpoint; noise_profile_path may be NULL. */
CS_API cs_status cs_classifier_open(const char* checkpoint_path, const char* noise_profile_path, cs_classifier** out);
CS_API void cs_classifier_close(cs_classifier* c);
CS_API cs_status cs_classify_window(const cs_classifier* c, const double* samples, size_t n_samples, int sample_rate,
                                    double start_s, char** prediction_json);

/* Review service on host:port (port 0 picks one); static_dir may be NULL. */
CS_API cs_status cs_service_start(const cs_workspace* ws, const char* static_dir, const char* host, int port,
                                  cs_service** out, int* bound_port);
/* Blocks until the service stops. */
CS_API cs_status cs_service_wait(cs_service* s);
/* Stops the service and releases it. */
CS_API void cs_service_stop(cs_service* s);

#ifdef __cplusplus
}
#endif

#endif

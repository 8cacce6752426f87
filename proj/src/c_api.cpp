#include "romelab.h"

#include <cstdlib>
#include <cstring>
#include <algorithm>
#include <exception>
#include <memory>
#include <string>

#include "romelab/editor.hpp"
#include "romelab/error.hpp"
#include "romelab/io.hpp"
#include "romelab/metrics.hpp"
#include "romelab/pipeline.hpp"

struct romelab_experiment {
  romelab::ExperimentConfig config;
};

struct romelab_model {
  romelab::Checkpoint checkpoint;
  romelab::Tokenizer tok;
};

namespace {

thread_local std::string last_error = "null";

romelab_status record(romelab_status s, const std::string& name, const std::string& message) {
  last_error = romelab::Json{{"code", static_cast<int>(s)}, {"error", name}, {"message", message}}.dump();
  return s;
}

// Runs fn and maps any exception to a status.
template <typename Fn>
romelab_status guarded(Fn fn) {
  try {
    fn();
    last_error = "null";
    return ROMELAB_OK;
  } catch (const romelab::Error& e) {
    return record(static_cast<romelab_status>(e.code()), romelab::error_code_name(e.code()), e.what());
  } catch (const romelab::Json::exception& e) {
    return record(ROMELAB_FORMAT, "format", e.what());
  } catch (const std::exception& e) {
    return record(ROMELAB_INTERNAL, "internal", e.what());
  } catch (...) {
    return record(ROMELAB_INTERNAL, "internal", "unknown exception");
  }
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void emit(const romelab::Json& j, char** out) {
  if (out != nullptr) *out = copy_string(j.dump());
}

void require(const void* p, const char* what) {
  if (p == nullptr) romelab::fail(romelab::ErrorCode::kInvalidArgument, std::string(what) + " is null");
}

}  // namespace

extern "C" {

const char* romelab_version(void) { return "0.1.0"; }

const char* romelab_status_name(romelab_status status) {
  if (status == ROMELAB_OK) return "ok";
  if (status == ROMELAB_INTERNAL) return "internal";
  if (status >= ROMELAB_INVALID_ARGUMENT && status <= ROMELAB_FORMAT) {
    return romelab::error_code_name(static_cast<romelab::ErrorCode>(status));
  }
  return "unknown";
}

const char* romelab_last_error(void) { return last_error.c_str(); }

void romelab_free_string(char* s) { std::free(s); }

romelab_status romelab_experiment_create(const char* config_json, romelab_experiment** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    romelab::Json j = romelab::Json::object();
    if (config_json != nullptr && *config_json != '\0') j = romelab::Json::parse(config_json);
    if (!j.is_object()) romelab::fail(romelab::ErrorCode::kFormat, "config must be a JSON object");
    if (!j.contains("output_root")) {
      const char* env = std::getenv(ROMELAB_OUTPUT_ROOT_ENV);
      if (env != nullptr && *env != '\0') j["output_root"] = env;
    }
    auto* exp = new romelab_experiment{romelab::experiment_config_from_json(j)};
    *out = exp;
  });
}

void romelab_experiment_destroy(romelab_experiment* exp) { delete exp; }

romelab_status romelab_experiment_set(romelab_experiment* exp, const char* field, const char* json_value) {
  return guarded([&] {
    require(exp, "experiment");
    require(field, "field");
    require(json_value, "value");
    romelab::override_config_field(&exp->config, field, romelab::Json::parse(json_value));
  });
}

romelab_status romelab_experiment_config(const romelab_experiment* exp, char** out_json) {
  return guarded([&] {
    require(exp, "experiment");
    require(out_json, "out_json");
    emit(romelab::experiment_config_to_json(exp->config), out_json);
  });
}

romelab_status romelab_world(romelab_experiment* exp, char** out_json) {
  return guarded([&] {
    require(exp, "experiment");
    emit(romelab::cmd_world(exp->config), out_json);
  });
}

romelab_status romelab_train(romelab_experiment* exp, char** out_json) {
  return guarded([&] {
    require(exp, "experiment");
    emit(romelab::cmd_train(exp->config), out_json);
  });
}

romelab_status romelab_trace(romelab_experiment* exp, const char* site, int disable_mlp, int n_prompts,
                             char** out_json) {
  return guarded([&] {
    require(exp, "experiment");
    require(site, "site");
    romelab::TraceRequest r;
    r.site = romelab::parse_trace_site(site);
    r.disable_mlp = disable_mlp != 0;
    r.n_prompts = n_prompts;
    emit(romelab::cmd_trace(exp->config, r), out_json);
  });
}

romelab_status romelab_edit(romelab_experiment* exp, const char* method, char** out_json) {
  return guarded([&] {
    require(exp, "experiment");
    require(method, "method");
    emit(romelab::cmd_edit(exp->config, romelab::parse_edit_method(method)), out_json);
  });
}

romelab_status romelab_eval(romelab_experiment* exp, const char* method, char** out_json) {
  return guarded([&] {
    require(exp, "experiment");
    require(method, "method");
    emit(romelab::cmd_eval(exp->config, method), out_json);
  });
}

romelab_status romelab_sweep(romelab_experiment* exp, const char* method, char** out_json) {
  return guarded([&] {
    require(exp, "experiment");
    require(method, "method");
    emit(romelab::cmd_sweep(exp->config, romelab::parse_edit_method(method)), out_json);
  });
}

romelab_status romelab_model_load(const char* checkpoint_path, romelab_model** out) {
  return guarded([&] {
    require(checkpoint_path, "checkpoint_path");
    require(out, "out");
    *out = nullptr;
    auto m = std::make_unique<romelab_model>();
    m->checkpoint = romelab::load_checkpoint(checkpoint_path);
    m->tok = romelab::tokenizer_from_json(m->checkpoint.tokenizer);
    *out = m.release();
  });
}

void romelab_model_destroy(romelab_model* model) { delete model; }

romelab_status romelab_model_probability(const romelab_model* model, const char* prompt, const char* target,
                                         double* out) {
  return guarded([&] {
    require(model, "model");
    require(prompt, "prompt");
    require(target, "target");
    require(out, "out");
    *out = romelab::object_probability(model->checkpoint.params, model->tok, prompt, target);
  });
}

romelab_status romelab_model_complete(const romelab_model* model, const char* prompt, int max_len,
                                      char** out_text) {
  return guarded([&] {
    require(model, "model");
    require(prompt, "prompt");
    require(out_text, "out_text");
    const auto tokens = model->tok.encode_prompt(prompt);
    romelab::SamplerConfig s;
    s.top_k = 1;
    s.max_len = std::min(max_len, model->checkpoint.params.config.max_context - static_cast<int>(tokens.size()));
    if (s.max_len < 1) romelab::fail(romelab::ErrorCode::kInvalidArgument, "no room left in the context");
    *out_text = copy_string(model->tok.decode(romelab::generate(model->checkpoint.params, tokens, s)));
  });
}

}  // extern "C"

// romelab command-line front end over the C API.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "romelab.h"

namespace {

using Json = nlohmann::json;

struct Options {
  std::string config_file;
  std::vector<std::string> sets;
  std::string output_root;
  long long seed = -1;
  int workers = 0;
  bool quiet = false;
};

void print_error(const Json& j) { std::cerr << j.dump() << std::endl; }

int fail_with_last(romelab_status s) {
  Json err = Json::parse(romelab_last_error(), nullptr, false);
  if (err.is_discarded() || !err.is_object()) err = {{"code", static_cast<int>(s)}, {"error", romelab_status_name(s)}};
  print_error(err);
  return static_cast<int>(s);
}

int usage_error(const std::string& message) {
  print_error({{"code", 2}, {"error", "usage"}, {"message", message}});
  return 2;
}

// Parses a --set value as JSON, falling back to a JSON string.
std::string as_json(const std::string& raw) {
  const Json j = Json::parse(raw, nullptr, false);
  return j.is_discarded() ? Json(raw).dump() : raw;
}

// Returns 0, or the exit code after printing the error.
int make_experiment(const Options& o, romelab_experiment** exp) {
  std::string config;
  if (!o.config_file.empty()) {
    std::ifstream in(o.config_file);
    if (!in) {
      print_error({{"code", ROMELAB_IO}, {"error", "io"}, {"message", "cannot read config " + o.config_file}});
      return ROMELAB_IO;
    }
    std::stringstream ss;
    ss << in.rdbuf();
    config = ss.str();
  }
  romelab_status s = romelab_experiment_create(config.empty() ? nullptr : config.c_str(), exp);
  if (s != ROMELAB_OK) return fail_with_last(s);
  const auto set = [&](const std::string& field, const std::string& value) {
    if (s == ROMELAB_OK) s = romelab_experiment_set(*exp, field.c_str(), value.c_str());
  };
  if (!o.output_root.empty()) set("output_root", Json(o.output_root).dump());
  if (o.seed >= 0) set("seed", std::to_string(o.seed));
  if (o.workers > 0) set("workers", std::to_string(o.workers));
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) return usage_error("--set expects field=value, got " + kv);
    set(kv.substr(0, eq), as_json(kv.substr(eq + 1)));
  }
  return s == ROMELAB_OK ? 0 : fail_with_last(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"romelab: locate and edit factual associations in a toy transformer"};
  app.require_subcommand(1);
  Options o;
  app.add_option("-c,--config", o.config_file, "Experiment config (JSON)");
  app.add_option("--set", o.sets, "Override a config field, e.g. --set trace.window_width=3");
  app.add_option("-o,--output-root", o.output_root,
                 std::string("Output root (default: $") + ROMELAB_OUTPUT_ROOT_ENV + " or ./romelab_out)");
  app.add_option("--seed", o.seed, "Master seed");
  app.add_option("-j,--workers", o.workers, "Worker threads");
  app.add_flag("-q,--quiet", o.quiet, "Do not print the command summary");

  auto* world = app.add_subcommand("world", "Generate the world, training corpus and edit records");
  auto* train = app.add_subcommand("train", "Train the model and cache per-layer key statistics");

  auto* trace = app.add_subcommand("trace", "Causal tracing over known prompts");
  std::string site = "hidden";
  bool disable_mlp = false;
  int n_prompts = -1;
  trace->add_option("--site", site, "hidden, mlp or attn")->check(CLI::IsMember({"hidden", "mlp", "attn"}));
  trace->add_flag("--disable-mlp", disable_mlp, "Freeze MLP outputs at their corrupted values");
  trace->add_option("-n,--prompts", n_prompts, "Number of known prompts");

  std::string method;
  const auto method_option = [&](CLI::App* sub, bool allow_none) {
    std::vector<std::string> names = {"rome", "ft", "ft+l", "attnedit"};
    if (allow_none) names.push_back("none");
    sub->add_option("method", method, "Editing method")->required()->check(CLI::IsMember(names));
  };
  auto* edit = app.add_subcommand("edit", "Apply one edit per record to fresh model copies");
  method_option(edit, false);
  auto* eval = app.add_subcommand("eval", "Evaluate edited checkpoints");
  method_option(eval, true);
  auto* sweep = app.add_subcommand("sweep", "Layer and eps sweep on a record subsample");
  method_option(sweep, false);
  std::vector<int> layers;
  std::vector<double> eps;
  sweep->add_option("--layers", layers, "Layers to sweep");
  sweep->add_option("--eps", eps, "L-infinity bounds to sweep");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return usage_error(e.what());
  }

  romelab_experiment* exp = nullptr;
  if (const int code = make_experiment(o, &exp); code != 0) {
    romelab_experiment_destroy(exp);
    return code;
  }
  romelab_status s = ROMELAB_OK;
  if (sweep->parsed()) {
    if (!layers.empty()) s = romelab_experiment_set(exp, "sweep.layers", Json(layers).dump().c_str());
    if (s == ROMELAB_OK && !eps.empty()) s = romelab_experiment_set(exp, "sweep.eps", Json(eps).dump().c_str());
    if (s != ROMELAB_OK) {
      romelab_experiment_destroy(exp);
      return fail_with_last(s);
    }
  }

  char* summary = nullptr;
  if (world->parsed()) {
    s = romelab_world(exp, &summary);
  } else if (train->parsed()) {
    s = romelab_train(exp, &summary);
  } else if (trace->parsed()) {
    s = romelab_trace(exp, site.c_str(), disable_mlp ? 1 : 0, n_prompts, &summary);
  } else if (edit->parsed()) {
    s = romelab_edit(exp, method.c_str(), &summary);
  } else if (eval->parsed()) {
    s = romelab_eval(exp, method.c_str(), &summary);
  } else if (sweep->parsed()) {
    s = romelab_sweep(exp, method.c_str(), &summary);
  }
  romelab_experiment_destroy(exp);
  if (s != ROMELAB_OK) return fail_with_last(s);

  if (!o.quiet && summary != nullptr) {
    Json j = Json::parse(summary);
    if (j.contains("table")) {
      std::cout << j["table"].get<std::string>();
      j.erase("table");
    }
    std::cout << j.dump(2) << std::endl;
  }
  romelab_free_string(summary);
  return 0;
}

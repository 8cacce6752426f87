#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "romelab/dataset.hpp"
#include "romelab/editor.hpp"
#include "romelab/io.hpp"
#include "romelab/metrics.hpp"
#include "romelab/model.hpp"
#include "romelab/tracing.hpp"

namespace romelab {

constexpr const char* kOutputRootEnv = "ROMELAB_OUTPUT_ROOT";

// Artifact locations, relative to the output root.
struct ArtifactPaths {
  std::string world = "world.json";
  std::string corpus = "corpus.json";
  std::string records = "records.json";
  std::string checkpoint = "checkpoint.json";
  std::string covariance = "covariance";  // layer_<l>.json inside
  std::string traces = "traces";
  std::string edits = "edits";
  std::string reports = "reports";
  std::string sweeps = "sweeps";
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelConfig model;  // vocab_size is taken from the tokenizer
  WorldConfig world;
  int corpus_repeats = 4;
  TrainSchedule train;
  TraceConfig trace;  // noise_scale < 0 selects default_noise_scale
  int trace_prompts = 100;
  int n_records = 100;
  int edit_layer = -1;  // < 0: the layer selected by the last mlp trace, else 0
  RomeConfig rome;
  FineTuneSchedule fine_tune;
  double ftl_eps = 0.02;
  double attn_eps = 0.02;
  GenerationConfig generation;
  bool eval_generation = true;
  std::vector<int> sweep_layers;  // empty = every layer
  std::vector<double> sweep_eps = {0.001, 0.005, 0.02, 0.05};
  int sweep_subsample = 50;
  double sweep_min_efficacy = 0.9;
  int workers = 1;
  std::string output_root = ".";
  ArtifactPaths paths;

  ExperimentConfig();
  void validate() const;
  std::string path(const std::string& relative) const;
};

Json experiment_config_to_json(const ExperimentConfig& c);
/// Fields missing from `j` keep their defaults; unknown fields are errors.
ExperimentConfig experiment_config_from_json(const Json& j);
/// Sets a dotted field ("trace.window_width") to a JSON value.
void override_config_field(ExperimentConfig* c, const std::string& dotted, const Json& value);

/// Hash of the config with the output root removed.
std::string config_hash(const ExperimentConfig& c);
/// {config_hash, seed, versions}, embedded in every artifact.
Json artifact_meta(const ExperimentConfig& c);

// Every command returns a small JSON summary of what it wrote.

Json cmd_world(const ExperimentConfig& c);
Json cmd_train(const ExperimentConfig& c);

struct TraceRequest {
  TraceSite site = TraceSite::kHidden;
  bool disable_mlp = false;
  int n_prompts = -1;  // < 0: config.trace_prompts
};
std::string trace_dir_name(const TraceRequest& r);
Json cmd_trace(const ExperimentConfig& c, const TraceRequest& request);

enum class EditMethod { kRome, kFt, kFtL, kAttnEdit };
const char* edit_method_name(EditMethod m);
EditMethod parse_edit_method(const std::string& name);

/// The layer cmd_edit uses for ROME when edit_layer < 0.
int resolve_edit_layer(const ExperimentConfig& c);

/// Applies one edit in place; `stats` is required for ROME only.
EditResult run_edit(Parameters* params, const Tokenizer& tok, const CounterfactRecord& record,
                    EditMethod method, int layer, double eps, const ExperimentConfig& c,
                    const std::vector<std::vector<int>>* prefixes, const CovarianceAccumulator* stats);

Json cmd_edit(const ExperimentConfig& c, EditMethod method);
/// `method` "none" evaluates the unedited checkpoint.
Json cmd_eval(const ExperimentConfig& c, const std::string& method);
Json cmd_sweep(const ExperimentConfig& c, EditMethod method);

}  // namespace romelab

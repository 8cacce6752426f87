#include "romelab/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "romelab/error.hpp"

namespace romelab {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kArtifactFormat = 1;

// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the
// exception of the lowest failing index.
template <typename Fn>
void parallel_for(int n, int workers, Fn fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  const auto run = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(workers, n); ++w) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string padded(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", i);
  return buf;
}

// Recursively rejects keys of `j` that the reference document lacks.
void reject_unknown(const Json& j, const Json& reference, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::kFormat, "config: " + (where.empty() ? "document" : where) + " must be an object");
  for (const auto& [key, value] : j.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!reference.contains(key)) fail(ErrorCode::kFormat, "config: unknown field " + path);
    if (reference.at(key).is_object()) reject_unknown(value, reference.at(key), path);
  }
}

template <typename T>
void read_field(const Json& j, const char* key, T* out) {
  if (j.contains(key)) *out = j.at(key).get<T>();
}

Json world_config_json(const WorldConfig& w) {
  return {{"seed", w.seed}, {"n_entities", w.n_entities}, {"n_relations", w.n_relations},
          {"facts_per_relation", w.facts_per_relation}};
}

Json train_json(const TrainSchedule& s) {
  return {{"max_epochs", s.max_epochs},     {"batch_size", s.batch_size},   {"lr", s.lr},
          {"min_lr_ratio", s.min_lr_ratio}, {"warmup_steps", s.warmup_steps}, {"grad_clip", s.grad_clip},
          {"weight_decay", s.weight_decay}, {"seed", s.seed},               {"target_accuracy", s.target_accuracy},
          {"eval_every", s.eval_every}};
}

Json trace_json(const TraceConfig& t) {
  return {{"noise_scale", t.noise_scale}, {"n_noise_repeats", t.n_noise_repeats}, {"window_width", t.window_width},
          {"seed", t.seed}};
}

Json key_plan_json(const KeyPlan& k) {
  Json prefixes = Json::array();
  for (const auto& [len, count] : k.prefixes) prefixes.push_back({len, count});
  return {{"prefixes", prefixes}, {"top_k", k.top_k}, {"seed", k.seed}};
}

Json v_star_json(const VStarConfig& v) {
  return {{"lr", v.lr}, {"weight_decay", v.weight_decay}, {"kl_weight", v.kl_weight}, {"max_steps", v.max_steps},
          {"early_stop_loss", v.early_stop_loss}};
}

Json generation_json(const GenerationConfig& g) {
  return {{"top_k", g.top_k}, {"samples_per_prompt", g.samples_per_prompt}, {"max_len", g.max_len}, {"seed", g.seed}};
}

Json paths_json(const ArtifactPaths& p) {
  return {{"world", p.world},   {"corpus", p.corpus}, {"records", p.records},
          {"checkpoint", p.checkpoint}, {"covariance", p.covariance}, {"traces", p.traces},
          {"edits", p.edits},   {"reports", p.reports}, {"sweeps", p.sweeps}};
}

std::string covariance_path(const ExperimentConfig& c, int layer) {
  return c.path(c.paths.covariance + "/layer_" + std::to_string(layer) + ".json");
}

// "ft+l" is stored as "ft_l".
std::string file_name(const std::string& method) { return method == "ft+l" ? std::string("ft_l") : method; }

std::string edit_dir(const ExperimentConfig& c, const std::string& method) {
  return c.path(c.paths.edits + "/" + file_name(method));
}

std::string report_base(const ExperimentConfig& c, const std::string& method) {
  return c.path(c.paths.reports + "/" + file_name(method));
}

// Inputs shared by the commands that start from a trained checkpoint.
struct Trained {
  Checkpoint checkpoint;
  Tokenizer tok;
  WorldModel world;
};

Trained load_trained(const ExperimentConfig& c) {
  Trained t;
  const std::string ck = c.path(c.paths.checkpoint);
  if (!fs::exists(ck)) fail(ErrorCode::kIo, "no checkpoint at " + ck + "; run train first");
  t.checkpoint = load_checkpoint(ck);
  t.tok = tokenizer_from_json(t.checkpoint.tokenizer);
  t.world = world_from_json(read_json(c.path(c.paths.world)).at("world"));
  return t;
}

std::vector<CounterfactRecord> load_records(const ExperimentConfig& c) {
  const Json j = read_json(c.path(c.paths.records));
  std::vector<CounterfactRecord> out;
  for (const auto& r : j.at("records")) out.push_back(record_from_json(r));
  return out;
}

std::vector<std::vector<int>> encoded_corpus(const ExperimentConfig& c, const Tokenizer& tok) {
  const Json j = read_json(c.path(c.paths.corpus));
  std::vector<std::vector<int>> out;
  for (const auto& d : j.at("documents")) out.push_back(tok.encode_prompt(d.get<std::string>()));
  return out;
}

CovarianceAccumulator load_covariance(const ExperimentConfig& c, int layer) {
  const std::string p = covariance_path(c, layer);
  if (!fs::exists(p)) fail(ErrorCode::kIo, "no covariance cache at " + p + "; run train first");
  int stored = -1;
  CovarianceAccumulator acc = covariance_from_json(read_json(p), &stored);
  if (stored != layer) fail(ErrorCode::kFormat, "covariance cache " + p + " holds layer " + std::to_string(stored));
  return acc;
}

Json edit_result_json(const EditResult& r) {
  Json blocks = Json::array();
  for (const auto& b : r.edited_blocks) blocks.push_back(block_name(b));
  Json j = {{"method", r.method},
            {"layer", r.layer},
            {"losses", r.losses},
            {"constraint_residual", r.constraint_residual},
            {"pre_p_true", r.pre_p_true},
            {"pre_p_new", r.pre_p_new},
            {"post_p_true", r.post_p_true},
            {"post_p_new", r.post_p_new},
            {"converged", r.converged},
            {"edited_blocks", blocks}};
  if (r.k_star.size() > 0) j["k_star"] = vector_to_json(r.k_star);
  if (r.v_star.size() > 0) j["v_star"] = vector_to_json(r.v_star);
  if (r.u.size() > 0) j["u"] = vector_to_json(r.u);
  if (r.v.size() > 0) j["v"] = vector_to_json(r.v);
  return j;
}

// Returned summaries carry the absolute directory; files on disk stay location-independent.
Json with_directory(Json summary, const std::string& dir) {
  summary["directory"] = dir;
  return summary;
}

Json summary_json(const MetricSummary& s) { return {{"mean", s.mean}, {"ci", s.ci}, {"n", s.n}}; }

Json report_json(const MetricReport& r) {
  Json metrics = Json::object();
  const int n = r.has_generation ? kMetricCount : static_cast<int>(Metric::kGE);
  for (int k = 0; k < n; ++k) metrics[metric_name(static_cast<Metric>(k))] = summary_json(r.metrics[static_cast<std::size_t>(k)]);
  return {{"method", r.method}, {"n_records", r.n_records}, {"has_generation", r.has_generation}, {"metrics", metrics}};
}

MetricReport report_from_json(const Json& j) {
  MetricReport r;
  r.method = j.at("method").get<std::string>();
  r.n_records = j.at("n_records").get<int>();
  r.has_generation = j.at("has_generation").get<bool>();
  for (int k = 0; k < kMetricCount; ++k) {
    const char* name = metric_name(static_cast<Metric>(k));
    if (!j.at("metrics").contains(name)) continue;
    const Json& m = j.at("metrics").at(name);
    r.metrics[static_cast<std::size_t>(k)] = {m.at("mean").get<double>(), m.at("ci").get<double>(), m.at("n").get<int>()};
  }
  return r;
}

Json record_metrics_json(const RecordMetrics& m) {
  Json values = Json::object();
  const int n = m.has_generation ? kMetricCount : static_cast<int>(Metric::kGE);
  for (int k = 0; k < n; ++k) values[metric_name(static_cast<Metric>(k))] = m.values[static_cast<std::size_t>(k)];
  return {{"case_id", m.case_id}, {"has_generation", m.has_generation}, {"values", values}};
}

double eps_for(const ExperimentConfig& c, EditMethod m) {
  switch (m) {
    case EditMethod::kFtL: return c.ftl_eps;
    case EditMethod::kAttnEdit: return c.attn_eps;
    default: return 0.0;
  }
}

bool uses_eps(EditMethod m) { return m == EditMethod::kFtL || m == EditMethod::kAttnEdit; }

std::vector<CounterfactRecord> subsample(const std::vector<CounterfactRecord>& records, int n, std::uint64_t seed) {
  if (n >= static_cast<int>(records.size())) return records;
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(n));
  std::sort(idx.begin(), idx.end());
  std::vector<CounterfactRecord> out;
  for (std::size_t i : idx) out.push_back(records[i]);
  return out;
}

}  // namespace

// Config -------------------------------------------------------------------

ExperimentConfig::ExperimentConfig() {
  train.lr = 8e-3;
  train.max_epochs = 45;
  train.eval_every = 5;
  trace.noise_scale = -1.0;
  trace.window_width = 1;
  output_root = "romelab_out";
}

void ExperimentConfig::validate() const {
  model.validate();
  if (corpus_repeats < 1) fail(ErrorCode::kInvalidArgument, "config: corpus_repeats must be >= 1");
  TraceConfig t = trace;
  if (t.noise_scale < 0) t.noise_scale = 0.0;
  t.validate();
  if (trace_prompts < 1) fail(ErrorCode::kInvalidArgument, "config: trace_prompts must be >= 1");
  if (n_records < 1) fail(ErrorCode::kInvalidArgument, "config: n_records must be >= 1");
  if (edit_layer >= model.n_layers) fail(ErrorCode::kInvalidArgument, "config: edit_layer outside the model");
  rome.key_plan.validate();
  rome.v_star.validate();
  if (ftl_eps < 0 || attn_eps < 0) fail(ErrorCode::kInvalidArgument, "config: eps values must be >= 0");
  if (fine_tune.max_steps < 0 || fine_tune.lr <= 0) fail(ErrorCode::kInvalidArgument, "config: bad fine_tune schedule");
  for (int l : sweep_layers) {
    if (l < 0 || l >= model.n_layers) fail(ErrorCode::kInvalidArgument, "config: sweep layer outside the model");
  }
  for (double e : sweep_eps) {
    if (!(e >= 0)) fail(ErrorCode::kInvalidArgument, "config: sweep eps values must be >= 0");
  }
  if (sweep_subsample < 2) fail(ErrorCode::kInvalidArgument, "config: sweep_subsample must be >= 2");
  if (workers < 1) fail(ErrorCode::kInvalidArgument, "config: workers must be >= 1");
  if (output_root.empty()) fail(ErrorCode::kInvalidArgument, "config: output_root is empty");
}

std::string ExperimentConfig::path(const std::string& relative) const {
  return (fs::path(output_root) / relative).string();
}

Json experiment_config_to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"model", config_to_json(c.model)},
          {"world", world_config_json(c.world)},
          {"corpus_repeats", c.corpus_repeats},
          {"train", train_json(c.train)},
          {"trace", trace_json(c.trace)},
          {"trace_prompts", c.trace_prompts},
          {"n_records", c.n_records},
          {"edit_layer", c.edit_layer},
          {"rome", {{"key_plan", key_plan_json(c.rome.key_plan)}, {"v_star", v_star_json(c.rome.v_star)},
                    {"ridge", c.rome.ridge}}},
          {"fine_tune", {{"lr", c.fine_tune.lr}, {"max_steps", c.fine_tune.max_steps},
                         {"early_stop_loss", c.fine_tune.early_stop_loss}}},
          {"ftl_eps", c.ftl_eps},
          {"attn_eps", c.attn_eps},
          {"generation", generation_json(c.generation)},
          {"eval_generation", c.eval_generation},
          {"sweep", {{"layers", c.sweep_layers}, {"eps", c.sweep_eps}, {"subsample", c.sweep_subsample},
                     {"min_efficacy", c.sweep_min_efficacy}}},
          {"workers", c.workers},
          {"output_root", c.output_root},
          {"paths", paths_json(c.paths)}};
}

ExperimentConfig experiment_config_from_json(const Json& j) {
  ExperimentConfig c;
  reject_unknown(j, experiment_config_to_json(c), "");
  try {
    read_field(j, "seed", &c.seed);
    if (j.contains("model")) {
      Json m = config_to_json(c.model);
      m.update(j.at("model"));
      c.model = config_from_json(m);
    }
    if (j.contains("world")) {
      const Json& w = j.at("world");
      read_field(w, "seed", &c.world.seed);
      read_field(w, "n_entities", &c.world.n_entities);
      read_field(w, "n_relations", &c.world.n_relations);
      read_field(w, "facts_per_relation", &c.world.facts_per_relation);
    }
    read_field(j, "corpus_repeats", &c.corpus_repeats);
    if (j.contains("train")) {
      const Json& t = j.at("train");
      read_field(t, "max_epochs", &c.train.max_epochs);
      read_field(t, "batch_size", &c.train.batch_size);
      read_field(t, "lr", &c.train.lr);
      read_field(t, "min_lr_ratio", &c.train.min_lr_ratio);
      read_field(t, "warmup_steps", &c.train.warmup_steps);
      read_field(t, "grad_clip", &c.train.grad_clip);
      read_field(t, "weight_decay", &c.train.weight_decay);
      read_field(t, "seed", &c.train.seed);
      read_field(t, "target_accuracy", &c.train.target_accuracy);
      read_field(t, "eval_every", &c.train.eval_every);
    }
    if (j.contains("trace")) {
      const Json& t = j.at("trace");
      read_field(t, "noise_scale", &c.trace.noise_scale);
      read_field(t, "n_noise_repeats", &c.trace.n_noise_repeats);
      read_field(t, "window_width", &c.trace.window_width);
      read_field(t, "seed", &c.trace.seed);
    }
    read_field(j, "trace_prompts", &c.trace_prompts);
    read_field(j, "n_records", &c.n_records);
    read_field(j, "edit_layer", &c.edit_layer);
    if (j.contains("rome")) {
      const Json& r = j.at("rome");
      if (r.contains("key_plan")) {
        const Json& k = r.at("key_plan");
        if (k.contains("prefixes")) {
          c.rome.key_plan.prefixes.clear();
          for (const auto& p : k.at("prefixes")) c.rome.key_plan.prefixes.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
        }
        read_field(k, "top_k", &c.rome.key_plan.top_k);
        read_field(k, "seed", &c.rome.key_plan.seed);
      }
      if (r.contains("v_star")) {
        const Json& v = r.at("v_star");
        read_field(v, "lr", &c.rome.v_star.lr);
        read_field(v, "weight_decay", &c.rome.v_star.weight_decay);
        read_field(v, "kl_weight", &c.rome.v_star.kl_weight);
        read_field(v, "max_steps", &c.rome.v_star.max_steps);
        read_field(v, "early_stop_loss", &c.rome.v_star.early_stop_loss);
      }
      read_field(r, "ridge", &c.rome.ridge);
    }
    if (j.contains("fine_tune")) {
      const Json& f = j.at("fine_tune");
      read_field(f, "lr", &c.fine_tune.lr);
      read_field(f, "max_steps", &c.fine_tune.max_steps);
      read_field(f, "early_stop_loss", &c.fine_tune.early_stop_loss);
    }
    read_field(j, "ftl_eps", &c.ftl_eps);
    read_field(j, "attn_eps", &c.attn_eps);
    if (j.contains("generation")) {
      const Json& g = j.at("generation");
      read_field(g, "top_k", &c.generation.top_k);
      read_field(g, "samples_per_prompt", &c.generation.samples_per_prompt);
      read_field(g, "max_len", &c.generation.max_len);
      read_field(g, "seed", &c.generation.seed);
    }
    read_field(j, "eval_generation", &c.eval_generation);
    if (j.contains("sweep")) {
      const Json& s = j.at("sweep");
      read_field(s, "layers", &c.sweep_layers);
      read_field(s, "eps", &c.sweep_eps);
      read_field(s, "subsample", &c.sweep_subsample);
      read_field(s, "min_efficacy", &c.sweep_min_efficacy);
    }
    read_field(j, "workers", &c.workers);
    read_field(j, "output_root", &c.output_root);
    if (j.contains("paths")) {
      const Json& p = j.at("paths");
      read_field(p, "world", &c.paths.world);
      read_field(p, "corpus", &c.paths.corpus);
      read_field(p, "records", &c.paths.records);
      read_field(p, "checkpoint", &c.paths.checkpoint);
      read_field(p, "covariance", &c.paths.covariance);
      read_field(p, "traces", &c.paths.traces);
      read_field(p, "edits", &c.paths.edits);
      read_field(p, "reports", &c.paths.reports);
      read_field(p, "sweeps", &c.paths.sweeps);
    }
  } catch (const Json::exception& e) {
    fail(ErrorCode::kFormat, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void override_config_field(ExperimentConfig* c, const std::string& dotted, const Json& value) {
  Json j = experiment_config_to_json(*c);
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty() || !node->is_object() || !node->contains(key)) {
      fail(ErrorCode::kInvalidArgument, "config: unknown field " + dotted);
    }
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
  *c = experiment_config_from_json(j);
}

std::string config_hash(const ExperimentConfig& c) {
  Json j = experiment_config_to_json(c);
  j.erase("output_root");
  j.erase("workers");
  return hex64(fnv1a64(j.dump()));
}

Json artifact_meta(const ExperimentConfig& c) {
  return {{"config_hash", config_hash(c)},
          {"seed", c.seed},
          {"versions", {{"romelab", kVersion},
                        {"artifact_format", kArtifactFormat},
                        {"modules", {{"numerics", 1}, {"model", 1}, {"tracing", 1}, {"editor", 1},
                                     {"dataset", 1}, {"metrics", 1}, {"cli", 1}}}}}};
}

// World and training -------------------------------------------------------

Json cmd_world(const ExperimentConfig& c) {
  c.validate();
  const WorldModel world = generate_world(c.world);
  const Tokenizer tok = build_tokenizer(world);
  const auto docs = training_corpus(world, c.corpus_repeats, c.seed);
  const auto records = build_records(world, c.n_records, c.seed);
  const Json meta = artifact_meta(c);

  write_json(c.path(c.paths.world), {{"meta", meta}, {"world", world_to_json(world)}});
  write_json(c.path(c.paths.corpus), {{"meta", meta}, {"documents", docs}});
  Json recs = Json::array();
  for (const auto& r : records) recs.push_back(record_to_json(r));
  write_json(c.path(c.paths.records), {{"meta", meta}, {"records", recs}});
  return {{"command", "world"}, {"meta", meta}, {"facts", world.facts.size()}, {"entities", world.entities.size()},
          {"documents", docs.size()}, {"records", records.size()}, {"vocab_size", tok.size()}};
}

Json cmd_train(const ExperimentConfig& c) {
  c.validate();
  const WorldModel world = world_from_json(read_json(c.path(c.paths.world)).at("world"));
  const Tokenizer tok = build_tokenizer(world);
  const auto corpus_tokens = encoded_corpus(c, tok);

  ModelConfig mc = c.model;
  mc.vocab_size = tok.size();
  mc.validate();
  std::vector<LmExample> corpus;
  for (const auto& t : corpus_tokens) corpus.push_back({t, 1});
  std::vector<Probe> probes;
  for (const auto& f : world.facts) {
    const auto& rel = world.relations[static_cast<std::size_t>(f.relation)];
    const auto& name = world.entities[static_cast<std::size_t>(f.subject)].name;
    for (const auto& t : rel.query_templates) probes.push_back({tok.encode_prompt(render_template(t, name)), tok.encode(f.object)});
  }

  TrainReport report;
  Checkpoint ck;
  ck.params = train(Parameters::init(mc, c.seed), corpus, c.train, probes, &report);
  ck.seed = c.seed;
  ck.tokenizer = tokenizer_to_json(tok);
  const Json meta = artifact_meta(c);
  ck.training_meta = {{"meta", meta},
                      {"epochs", report.epochs},
                      {"steps", report.steps},
                      {"final_loss", report.final_loss},
                      {"probe_accuracy", report.probe_accuracy},
                      {"epoch_loss", report.epoch_loss}};
  save_checkpoint(c.path(c.paths.checkpoint), ck);

  const auto stats = collect_all_key_statistics(ck.params, corpus_tokens);
  for (int l = 0; l < mc.n_layers; ++l) {
    Json j = covariance_to_json(stats[static_cast<std::size_t>(l)], l);
    j["meta"] = meta;
    write_json(covariance_path(c, l), j);
  }
  return {{"command", "train"},          {"meta", meta},
          {"epochs", report.epochs},     {"final_loss", report.final_loss},
          {"probe_accuracy", report.probe_accuracy}, {"covariance_layers", mc.n_layers},
          {"key_dim", mc.mlp_dim}};
}

// Tracing ------------------------------------------------------------------

std::string trace_dir_name(const TraceRequest& r) {
  return std::string(trace_site_name(r.site)) + (r.disable_mlp ? "_mlp_disabled" : "");
}

Json cmd_trace(const ExperimentConfig& c, const TraceRequest& request) {
  c.validate();
  const Trained t = load_trained(c);
  const Parameters& params = t.checkpoint.params;
  const int n = request.n_prompts < 0 ? c.trace_prompts : request.n_prompts;
  if (n < 1) fail(ErrorCode::kInvalidArgument, "trace: n_prompts must be >= 1");
  const KnownPromptSelection sel = select_known_prompts(params, t.world, t.tok, n, c.seed);
  if (sel.prompts.empty()) fail(ErrorCode::kInsufficientData, "trace: no known prompts found");

  TraceConfig tc = c.trace;
  tc.site = request.site;
  tc.disable_mlp = request.disable_mlp;
  if (tc.noise_scale < 0) tc.noise_scale = default_noise_scale(params);
  tc.validate();

  std::vector<TraceGrid> grids(sel.prompts.size());
  parallel_for(static_cast<int>(grids.size()), c.workers, [&](int i) {
    grids[static_cast<std::size_t>(i)] = trace_grid(params, sel.prompts[static_cast<std::size_t>(i)], tc);
  });

  const Json meta = artifact_meta(c);
  const std::string dir = c.path(c.paths.traces + "/" + trace_dir_name(request));
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const std::string stem = dir + "/prompt_" + padded(static_cast<int>(i));
    Json j = trace_grid_to_json(grids[i], t.tok);
    j["meta"] = meta;
    write_json(stem + ".json", j);
    write_file_atomic(stem + ".csv", trace_grid_csv(grids[i], t.tok));
  }
  const AveragedGrid avg = average_grids(grids);
  Json aj = averaged_grid_to_json(avg);
  aj["meta"] = meta;
  write_json(dir + "/averaged.json", aj);
  write_file_atomic(dir + "/averaged.csv", averaged_grid_csv(avg));

  // Layer with the strongest last-subject effect.
  int best = 0;
  for (int l = 1; l < avg.effect.cols(); ++l) {
    if (avg.bucket(TokenRole::kLastSubject, l) > avg.bucket(TokenRole::kLastSubject, best)) best = l;
  }
  Json buckets = Json::object();
  for (TokenRole r : {TokenRole::kFirstSubject, TokenRole::kMidSubject, TokenRole::kLastSubject,
                      TokenRole::kPostSubject, TokenRole::kLastToken}) {
    buckets[token_role_name(r)] = avg.bucket_mean(r);
  }
  const Json summary = {{"command", "trace"},
                        {"meta", meta},
                        {"site", trace_site_name(request.site)},
                        {"disable_mlp", request.disable_mlp},
                        {"noise_scale", tc.noise_scale},
                        {"window_width", tc.window_width},
                        {"requested", sel.requested},
                        {"prompts", grids.size()},
                        {"shortfall", sel.shortfall},
                        {"mean_clean_p", avg.mean_clean_p},
                        {"mean_corrupted_p", avg.mean_corrupted_p},
                        {"bucket_means", buckets},
                        {"peak_last_subject_layer", best}};
  write_json(dir + "/summary.json", summary);
  return with_directory(summary, dir);
}

// Editing ------------------------------------------------------------------

const char* edit_method_name(EditMethod m) {
  switch (m) {
    case EditMethod::kRome: return "rome";
    case EditMethod::kFt: return "ft";
    case EditMethod::kFtL: return "ft+l";
    case EditMethod::kAttnEdit: return "attnedit";
  }
  return "?";
}

EditMethod parse_edit_method(const std::string& name) {
  if (name == "rome") return EditMethod::kRome;
  if (name == "ft") return EditMethod::kFt;
  if (name == "ft+l" || name == "ftl" || name == "ft_l") return EditMethod::kFtL;
  if (name == "attnedit" || name == "attn") return EditMethod::kAttnEdit;
  fail(ErrorCode::kInvalidArgument, "unknown edit method '" + name + "' (rome, ft, ft+l, attnedit)");
}

int resolve_edit_layer(const ExperimentConfig& c) {
  if (c.edit_layer >= 0) return c.edit_layer;
  const std::string p = c.path(c.paths.traces + "/" + trace_dir_name({TraceSite::kMlp, false, -1}) + "/summary.json");
  if (!fs::exists(p)) return 0;
  const int l = read_json(p).at("peak_last_subject_layer").get<int>();
  if (l < 0 || l >= c.model.n_layers) fail(ErrorCode::kFormat, "trace summary names a layer outside the model");
  return l;
}

EditResult run_edit(Parameters* params, const Tokenizer& tok, const CounterfactRecord& record, EditMethod method,
                    int layer, double eps, const ExperimentConfig& c,
                    const std::vector<std::vector<int>>* prefixes, const CovarianceAccumulator* stats) {
  const EditRequest req = request_from_record(record, layer);
  switch (method) {
    case EditMethod::kRome:
      if (prefixes == nullptr || stats == nullptr) fail(ErrorCode::kInvalidArgument, "rome needs key statistics");
      return rome_edit(params, tok, req, *prefixes, *stats, c.rome);
    case EditMethod::kFt: return fine_tune(params, tok, req, FineTuneMode::kFt, 0.0, c.fine_tune);
    case EditMethod::kFtL: return fine_tune(params, tok, req, FineTuneMode::kFtL, eps, c.fine_tune);
    case EditMethod::kAttnEdit: return fine_tune(params, tok, req, FineTuneMode::kAttnEdit, eps, c.fine_tune);
  }
  fail(ErrorCode::kInvalidArgument, "unknown edit method");
}

Json cmd_edit(const ExperimentConfig& c, EditMethod method) {
  c.validate();
  const Trained t = load_trained(c);
  const auto records = load_records(c);
  const int layer = resolve_edit_layer(c);
  const double eps = eps_for(c, method);
  const std::string name = edit_method_name(method);
  const std::string base = c.path(c.paths.checkpoint);

  CovarianceAccumulator stats(1);
  std::vector<std::vector<int>> prefixes;
  if (method == EditMethod::kRome) {
    stats = load_covariance(c, layer);
    prefixes = sample_prefixes(t.checkpoint.params, c.rome.key_plan);
  }

  const Json meta = artifact_meta(c);
  const std::string dir = edit_dir(c, name);
  std::vector<Json> outcomes(records.size());
  parallel_for(static_cast<int>(records.size()), c.workers, [&](int i) {
    const CounterfactRecord& rec = records[static_cast<std::size_t>(i)];
    const std::string stem = dir + "/case_" + padded(rec.case_id);
    try {
      Checkpoint edited = t.checkpoint;
      const EditResult res = run_edit(&edited.params, t.tok, rec, method, layer, eps, c, &prefixes, &stats);
      edited.edit = {{"meta", meta}, {"method", name}, {"case_id", rec.case_id}, {"subject", rec.subject},
                     {"layer", layer}, {"eps", eps}};
      save_sparse_checkpoint(stem + ".ckpt.json", edited, base, res.edited_blocks);
      Json rj = edit_result_json(res);
      rj["meta"] = meta;
      rj["case_id"] = rec.case_id;
      write_json(stem + ".result.json", rj);
      outcomes[static_cast<std::size_t>(i)] = {{"case_id", rec.case_id}, {"ok", true},
                                               {"constraint_residual", res.constraint_residual},
                                               {"converged", res.converged}};
    } catch (const Error& e) {
      std::error_code ec;
      fs::remove(stem + ".ckpt.json", ec);
      fs::remove(stem + ".result.json", ec);
      outcomes[static_cast<std::size_t>(i)] = {{"case_id", rec.case_id}, {"ok", false},
                                               {"error", error_code_name(e.code())}, {"message", e.what()}};
    }
  });

  int failed = 0, converged = 0;
  double max_residual = 0.0;
  Json errors = Json::array();
  for (const auto& o : outcomes) {
    if (!o.at("ok").get<bool>()) {
      ++failed;
      errors.push_back(o);
      continue;
    }
    converged += o.at("converged").get<bool>() ? 1 : 0;
    max_residual = std::max(max_residual, o.at("constraint_residual").get<double>());
  }
  const Json summary = {{"command", "edit"},   {"meta", meta},       {"method", name},
                        {"layer", layer},      {"eps", eps},         {"records", records.size()},
                        {"failed", failed},    {"converged", converged}, {"max_constraint_residual", max_residual},
                        {"errors", errors}};
  write_json(dir + "/summary.json", summary);
  return with_directory(summary, dir);
}

// Evaluation ---------------------------------------------------------------

Json cmd_eval(const ExperimentConfig& c, const std::string& method_name) {
  c.validate();
  const bool unedited = method_name == "none";
  const std::string name = unedited ? std::string("none") : edit_method_name(parse_edit_method(method_name));
  const Trained t = load_trained(c);
  const auto records = load_records(c);
  const std::string dir = edit_dir(c, name);
  const Json meta = artifact_meta(c);
  const std::string out_dir = report_base(c, name);

  std::vector<RecordMetrics> per(records.size());
  std::vector<char> present(records.size(), 0);
  parallel_for(static_cast<int>(records.size()), c.workers, [&](int i) {
    const CounterfactRecord& rec = records[static_cast<std::size_t>(i)];
    Parameters params = t.checkpoint.params;
    if (!unedited) {
      const std::string p = dir + "/case_" + padded(rec.case_id) + ".ckpt.json";
      if (!fs::exists(p)) return;  // the edit failed and was logged by cmd_edit
      const Json j = read_json(p);
      const Json& e = j.at("edit");
      if (e.at("case_id").get<int>() != rec.case_id || e.at("subject").get<std::string>() != rec.subject ||
          e.at("method").get<std::string>() != name) {
        fail(ErrorCode::kFormat, "eval: " + p + " does not belong to record " + std::to_string(rec.case_id));
      }
      if (!(config_from_json(j.at("config")) == params.config)) {
        fail(ErrorCode::kFormat, "eval: " + p + " was made from a different model");
      }
      apply_parameter_json(&params, j.at("parameters"));
    }
    per[static_cast<std::size_t>(i)] =
        edit_metrics(params, t.tok, rec, c.eval_generation ? &c.generation : nullptr);
    present[static_cast<std::size_t>(i)] = 1;
  });

  std::vector<RecordMetrics> kept;
  Json missing = Json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!present[i]) {
      missing.push_back(records[i].case_id);
      continue;
    }
    kept.push_back(per[i]);
    Json rj = record_metrics_json(per[i]);
    rj["meta"] = meta;
    rj["method"] = name;
    write_json(out_dir + "/case_" + padded(per[i].case_id) + ".json", rj);
  }
  if (kept.size() < 2) fail(ErrorCode::kInsufficientData, "eval: fewer than two evaluable records for " + name);
  const MetricReport report = aggregate(kept, name);
  Json rj = report_json(report);
  rj["meta"] = meta;
  rj["missing"] = missing;
  write_json(out_dir + ".json", rj);
  write_file_atomic(out_dir + ".txt", format_table({report}));

  // Combined table over every report present, in a fixed order.
  std::vector<MetricReport> all;
  for (const char* m : {"none", "ft", "ft+l", "attnedit", "rome"}) {
    const std::string p = report_base(c, m) + ".json";
    if (fs::exists(p)) all.push_back(report_from_json(read_json(p)));
  }
  write_file_atomic(c.path(c.paths.reports + "/table.txt"), format_table(all));

  Json out = rj;
  out["command"] = "eval";
  out["table"] = format_table({report});
  return out;
}

// Sweeps -------------------------------------------------------------------

Json cmd_sweep(const ExperimentConfig& c, EditMethod method) {
  c.validate();
  const Trained t = load_trained(c);
  const auto sample = subsample(load_records(c), c.sweep_subsample, c.seed);
  std::vector<int> layers = c.sweep_layers;
  if (layers.empty()) {
    layers.resize(static_cast<std::size_t>(c.model.n_layers));
    std::iota(layers.begin(), layers.end(), 0);
  }
  const std::vector<double> eps_grid = uses_eps(method) ? c.sweep_eps : std::vector<double>{0.0};
  if (eps_grid.empty()) fail(ErrorCode::kInvalidArgument, "sweep: empty eps grid");
  std::vector<std::vector<int>> prefixes;
  if (method == EditMethod::kRome) prefixes = sample_prefixes(t.checkpoint.params, c.rome.key_plan);

  const Json meta = artifact_meta(c);
  Json points = Json::array();
  int selected = -1;
  double sel_eps = 0.0, sel_score = -1.0;
  int fallback = -1;
  double fallback_es = -1.0;
  for (int layer : layers) {
    CovarianceAccumulator stats(1);
    if (method == EditMethod::kRome) stats = load_covariance(c, layer);
    for (double eps : eps_grid) {
      std::vector<RecordMetrics> per(sample.size());
      std::vector<char> ok(sample.size(), 0);
      parallel_for(static_cast<int>(sample.size()), c.workers, [&](int i) {
        Parameters params = t.checkpoint.params;
        try {
          run_edit(&params, t.tok, sample[static_cast<std::size_t>(i)], method, layer, eps, c, &prefixes, &stats);
        } catch (const Error&) {
          return;
        }
        per[static_cast<std::size_t>(i)] = edit_metrics(params, t.tok, sample[static_cast<std::size_t>(i)]);
        ok[static_cast<std::size_t>(i)] = 1;
      });
      std::vector<RecordMetrics> kept;
      for (std::size_t i = 0; i < per.size(); ++i) {
        if (ok[i]) kept.push_back(per[i]);
      }
      Json point = {{"layer", layer}, {"n", kept.size()}, {"failed", sample.size() - kept.size()}};
      if (uses_eps(method)) point["eps"] = eps;
      double es = 0.0, ps = 0.0, ns = 0.0;
      if (kept.size() >= 2) {
        const MetricReport r = aggregate(kept, edit_method_name(method));
        for (int k = 0; k < static_cast<int>(Metric::kGE); ++k) {
          point[metric_name(static_cast<Metric>(k))] = r.metrics[static_cast<std::size_t>(k)].mean;
        }
        es = r.get(Metric::kES).mean;
        ps = r.get(Metric::kPS).mean;
        ns = r.get(Metric::kNS).mean;
      }
      const int index = static_cast<int>(points.size());
      points.push_back(point);
      if (es > fallback_es) {
        fallback_es = es;
        fallback = index;
      }
      // Smallest eps reaching the efficacy floor; ties go to the best PS + NS.
      if (kept.size() >= 2 && es >= c.sweep_min_efficacy) {
        const bool better = selected < 0 || eps < sel_eps || (eps == sel_eps && ps + ns > sel_score);
        if (better) {
          selected = index;
          sel_eps = eps;
          sel_score = ps + ns;
        }
      }
    }
  }
  const bool reached = selected >= 0;
  const Json chosen = points[static_cast<std::size_t>(reached ? selected : fallback)];
  const Json summary = {{"command", "sweep"},
                        {"meta", meta},
                        {"method", edit_method_name(method)},
                        {"subsample", sample.size()},
                        {"min_efficacy", c.sweep_min_efficacy},
                        {"points", points},
                        {"selected", chosen},
                        {"efficacy_floor_reached", reached}};
  write_json(c.path(c.paths.sweeps + "/" + file_name(edit_method_name(method)) + ".json"), summary);
  return summary;
}

}  // namespace romelab

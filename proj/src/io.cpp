#include "romelab/io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "romelab/error.hpp"

namespace romelab {

namespace fs = std::filesystem;

// Files --------------------------------------------------------------------

void write_file_atomic(const std::string& path, const std::string& contents) {
  const fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
    if (ec) fail(ErrorCode::kIo, "cannot create directory " + target.parent_path().string() + ": " + ec.message());
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot open " + tmp.string() + " for writing");
    out << contents;
    out.flush();
    if (!out) fail(ErrorCode::kIo, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) fail(ErrorCode::kIo, "cannot rename " + tmp.string() + " to " + path + ": " + ec.message());
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json read_json(const std::string& path) {
  try {
    return Json::parse(read_file(path));
  } catch (const Json::exception& e) {
    fail(ErrorCode::kFormat, path + ": " + e.what());
  }
}

void write_json(const std::string& path, const Json& doc) { write_file_atomic(path, doc.dump(1) + "\n"); }

std::uint64_t fnv1a64(const std::string& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t x) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << x;
  return ss.str();
}

// Numerics -----------------------------------------------------------------

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const Json& j) {
  if (!j.is_array()) fail(ErrorCode::kFormat, "matrix must be an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows == 0 ? 0 : static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Json& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      fail(ErrorCode::kFormat, "matrix rows have inconsistent lengths");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

Json vector_to_json(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Vector vector_from_json(const Json& j) {
  if (!j.is_array()) fail(ErrorCode::kFormat, "vector must be an array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

Json covariance_to_json(const CovarianceAccumulator& acc, int layer) {
  return {{"layer", layer},
          {"dim", acc.dim()},
          {"n_samples", acc.n_samples()},
          {"sum_outer", matrix_to_json(acc.sum_outer())}};
}

CovarianceAccumulator covariance_from_json(const Json& j, int* layer) {
  try {
    const auto dim = j.at("dim").get<Eigen::Index>();
    const Matrix s = matrix_from_json(j.at("sum_outer"));
    if (s.rows() != dim || s.cols() != dim) fail(ErrorCode::kFormat, "covariance cache: sum_outer is not dim x dim");
    if (layer != nullptr) *layer = j.at("layer").get<int>();
    return CovarianceAccumulator(s, j.at("n_samples").get<std::size_t>());
  } catch (const Json::exception& e) {
    fail(ErrorCode::kFormat, std::string("covariance cache: ") + e.what());
  }
}

// Model --------------------------------------------------------------------

Json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},         {"hidden", c.hidden},
          {"mlp_dim", c.mlp_dim},           {"n_heads", c.n_heads},
          {"vocab_size", c.vocab_size},     {"max_context", c.max_context},
          {"wiring", wiring_name(c.wiring)}, {"nonlinearity", "gelu"},
          {"tie_embeddings", c.tie_embeddings}, {"ln_eps", c.ln_eps}};
}

ModelConfig config_from_json(const Json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.hidden = j.value("hidden", c.hidden);
    c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_context = j.value("max_context", c.max_context);
    c.wiring = parse_wiring(j.value("wiring", std::string(wiring_name(c.wiring))));
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
    c.ln_eps = j.value("ln_eps", c.ln_eps);
    if (j.value("nonlinearity", std::string("gelu")) != "gelu") {
      fail(ErrorCode::kFormat, "model config: only the gelu nonlinearity is supported");
    }
  } catch (const Json::exception& e) {
    fail(ErrorCode::kFormat, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

Json parameters_to_json(const Parameters& p, const std::vector<BlockId>& only) {
  Json out = Json::object();
  const auto blocks = only.empty() ? all_blocks(p.config) : only;
  for (BlockId id : blocks) {
    auto [rows, cols] = block_shape(p.config, id);
    auto span = block_span(p, id);
    if (cols == 1) {
      out[block_name(id)] = Json(std::vector<double>(span.begin(), span.end()));
    } else {
      Json m = Json::array();
      for (int r = 0; r < rows; ++r) {
        m.push_back(std::vector<double>(span.begin() + static_cast<std::ptrdiff_t>(r) * cols,
                                        span.begin() + static_cast<std::ptrdiff_t>(r + 1) * cols));
      }
      out[block_name(id)] = std::move(m);
    }
  }
  return out;
}

void apply_parameter_json(Parameters* p, const Json& j) {
  if (!j.is_object()) fail(ErrorCode::kFormat, "parameters must be an object of named blocks");
  for (const auto& [name, value] : j.items()) {
    const BlockId id = parse_block_name(name, p->config);
    auto [rows, cols] = block_shape(p->config, id);
    auto span = block_span(*p, id);
    std::size_t k = 0;
    auto put = [&](const Json& x) {
      if (k >= span.size()) fail(ErrorCode::kFormat, "block " + name + " has too many entries");
      span[k++] = x.get<double>();
    };
    if (!value.is_array()) fail(ErrorCode::kFormat, "block " + name + " must be an array");
    if (cols == 1) {
      for (const auto& x : value) put(x);
    } else {
      if (static_cast<int>(value.size()) != rows) fail(ErrorCode::kFormat, "block " + name + " has wrong row count");
      for (const auto& row : value) {
        if (static_cast<int>(row.size()) != cols) fail(ErrorCode::kFormat, "block " + name + " has wrong column count");
        for (const auto& x : row) put(x);
      }
    }
    if (k != span.size()) fail(ErrorCode::kFormat, "block " + name + " has too few entries");
  }
}

Json tokenizer_to_json(const Tokenizer& tok) { return tok.words(); }

Tokenizer tokenizer_from_json(const Json& j) {
  if (!j.is_array()) fail(ErrorCode::kFormat, "tokenizer must be an array of words");
  return Tokenizer(j.get<std::vector<std::string>>());
}

Json checkpoint_to_json(const Checkpoint& ck) {
  Json j = {{"format", "romelab.checkpoint"},
            {"config", config_to_json(ck.params.config)},
            {"seed", ck.seed},
            {"training_meta", ck.training_meta},
            {"tokenizer", ck.tokenizer},
            {"parameters", parameters_to_json(ck.params)}};
  if (!ck.edit.is_null()) j["edit"] = ck.edit;
  return j;
}

namespace {

Checkpoint checkpoint_from_json(const Json& j, const fs::path& dir, int depth) {
  if (depth > 8) fail(ErrorCode::kFormat, "checkpoint: base chain too deep");
  try {
    if (j.value("format", std::string()) != "romelab.checkpoint") {
      fail(ErrorCode::kFormat, "not a romelab checkpoint");
    }
    Checkpoint ck;
    if (j.contains("base")) {
      const fs::path base = dir / j.at("base").get<std::string>();
      ck = checkpoint_from_json(read_json(base.string()), base.parent_path(), depth + 1);
      if (!(config_from_json(j.at("config")) == ck.params.config)) {
        fail(ErrorCode::kFormat, "checkpoint: config differs from its base");
      }
    } else {
      ck.params.config = config_from_json(j.at("config"));
      ck.params = Parameters::init(ck.params.config, 0);
      ck.seed = j.at("seed").get<std::uint64_t>();
      ck.training_meta = j.value("training_meta", Json::object());
      ck.tokenizer = j.value("tokenizer", Json::array());
    }
    apply_parameter_json(&ck.params, j.at("parameters"));
    if (j.contains("edit")) ck.edit = j.at("edit");
    ck.params.validate();
    return ck;
  } catch (const Json::exception& e) {
    fail(ErrorCode::kFormat, std::string("checkpoint: ") + e.what());
  }
}

}  // namespace

Checkpoint load_checkpoint(const std::string& path) {
  return checkpoint_from_json(read_json(path), fs::path(path).parent_path(), 0);
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file_atomic(path, checkpoint_to_json(ck).dump() + "\n");
}

void save_sparse_checkpoint(const std::string& path, const Checkpoint& ck,
                            const std::string& base_path, const std::vector<BlockId>& blocks) {
  const fs::path dir = fs::path(path).parent_path();
  const fs::path rel = fs::relative(fs::absolute(base_path), fs::absolute(dir.empty() ? "." : dir));
  Json j = {{"format", "romelab.checkpoint"},
            {"base", rel.generic_string()},
            {"config", config_to_json(ck.params.config)},
            {"parameters", parameters_to_json(ck.params, blocks)}};
  if (!ck.edit.is_null()) j["edit"] = ck.edit;
  write_file_atomic(path, j.dump() + "\n");
}

// Dataset ------------------------------------------------------------------

Json world_to_json(const WorldModel& w) {
  Json rel = Json::array();
  for (const auto& r : w.relations) {
    rel.push_back({{"name", r.name},
                   {"query_templates", r.query_templates},
                   {"generation_templates", r.generation_templates},
                   {"object_pool", r.object_pool}});
  }
  Json ent = Json::array();
  for (const auto& e : w.entities) ent.push_back({{"name", e.name}, {"kind", e.kind}, {"adjective", e.adjective}});
  Json facts = Json::array();
  for (const auto& f : w.facts) {
    facts.push_back({{"subject", w.entities[static_cast<std::size_t>(f.subject)].name},
                     {"relation", w.relations[static_cast<std::size_t>(f.relation)].name},
                     {"object", f.object}});
  }
  return {{"config",
           {{"seed", w.config.seed},
            {"n_entities", w.config.n_entities},
            {"n_relations", w.config.n_relations},
            {"facts_per_relation", w.config.facts_per_relation}}},
          {"relations", rel},
          {"entities", ent},
          {"facts", facts}};
}

WorldModel world_from_json(const Json& j) {
  try {
    WorldModel w;
    const Json& c = j.at("config");
    w.config.seed = c.at("seed").get<std::uint64_t>();
    w.config.n_entities = c.at("n_entities").get<int>();
    w.config.n_relations = c.at("n_relations").get<int>();
    w.config.facts_per_relation = c.at("facts_per_relation").get<int>();
    for (const auto& r : j.at("relations")) {
      w.relations.push_back({r.at("name").get<std::string>(),
                             r.at("query_templates").get<std::vector<std::string>>(),
                             r.at("generation_templates").get<std::vector<std::string>>(),
                             r.at("object_pool").get<std::vector<std::string>>()});
    }
    for (const auto& e : j.at("entities")) {
      w.entities.push_back({e.at("name").get<std::string>(), e.at("kind").get<std::string>(),
                            e.at("adjective").get<std::string>()});
    }
    for (const auto& f : j.at("facts")) {
      w.facts.push_back({w.entity_index(f.at("subject").get<std::string>()),
                         w.relation_index(f.at("relation").get<std::string>()),
                         f.at("object").get<std::string>()});
    }
    w.validate();
    return w;
  } catch (const Json::exception& e) {
    fail(ErrorCode::kFormat, std::string("world: ") + e.what());
  }
}

Json record_to_json(const CounterfactRecord& r) {
  return {{"case_id", r.case_id},
          {"fact_index", r.fact_index},
          {"requested_rewrite",
           {{"subject", r.subject},
            {"relation", r.relation},
            {"target_true", r.target_true},
            {"target_new", r.target_new},
            {"template_index", r.rewrite_template},
            {"prompt", r.rewrite_prompt}}},
          {"essence_prompt", r.essence_prompt},
          {"paraphrase_prompts", r.paraphrase_prompts},
          {"neighborhood_prompts", r.neighborhood_prompts},
          {"generation_prompts", r.generation_prompts},
          {"reference_texts", r.reference_texts},
          {"essence_texts", r.essence_texts}};
}

CounterfactRecord record_from_json(const Json& j) {
  try {
    CounterfactRecord r;
    r.case_id = j.at("case_id").get<int>();
    r.fact_index = j.value("fact_index", -1);
    const Json& rw = j.at("requested_rewrite");
    r.subject = rw.at("subject").get<std::string>();
    r.relation = rw.at("relation").get<std::string>();
    r.target_true = rw.at("target_true").get<std::string>();
    r.target_new = rw.at("target_new").get<std::string>();
    r.rewrite_template = rw.value("template_index", -1);
    r.rewrite_prompt = rw.at("prompt").get<std::string>();
    r.essence_prompt = j.at("essence_prompt").get<std::string>();
    r.paraphrase_prompts = j.at("paraphrase_prompts").get<std::vector<std::string>>();
    r.neighborhood_prompts = j.at("neighborhood_prompts").get<std::vector<std::string>>();
    r.generation_prompts = j.at("generation_prompts").get<std::vector<std::string>>();
    r.reference_texts = j.at("reference_texts").get<std::vector<std::string>>();
    r.essence_texts = j.at("essence_texts").get<std::vector<std::string>>();
    return r;
  } catch (const Json::exception& e) {
    fail(ErrorCode::kFormat, std::string("record: ") + e.what());
  }
}

// Tracing ------------------------------------------------------------------

Json trace_grid_to_json(const TraceGrid& g, const Tokenizer& tok) {
  Json tokens = Json::array();
  Json roles = Json::array();
  for (std::size_t i = 0; i < g.prompt.tokens.size(); ++i) {
    tokens.push_back(tok.word(g.prompt.tokens[i]));
    roles.push_back(token_role_name(g.roles[i]));
  }
  return {{"prompt", g.prompt.text},
          {"tokens", tokens},
          {"token_ids", g.prompt.tokens},
          {"subject_span", {g.prompt.subject_first, g.prompt.subject_last}},
          {"target", g.prompt.target},
          {"fact_index", g.prompt.fact_index},
          {"template_index", g.prompt.template_index},
          {"site", trace_site_name(g.site)},
          {"disable_mlp", g.disable_mlp},
          {"clean_p", g.clean_p},
          {"corrupted_p", g.corrupted_p},
          {"roles", roles},
          {"cells", matrix_to_json(g.restored_p)}};
}

TraceGrid trace_grid_from_json(const Json& j) {
  try {
    TraceGrid g;
    g.prompt.text = j.at("prompt").get<std::string>();
    g.prompt.tokens = j.at("token_ids").get<std::vector<int>>();
    g.prompt.subject_first = j.at("subject_span").at(0).get<int>();
    g.prompt.subject_last = j.at("subject_span").at(1).get<int>();
    g.prompt.target = j.at("target").get<std::vector<int>>();
    g.prompt.fact_index = j.value("fact_index", -1);
    g.prompt.template_index = j.value("template_index", -1);
    g.site = parse_trace_site(j.at("site").get<std::string>());
    g.disable_mlp = j.at("disable_mlp").get<bool>();
    g.clean_p = j.at("clean_p").get<double>();
    g.prompt.clean_p = g.clean_p;
    g.corrupted_p = j.at("corrupted_p").get<double>();
    g.restored_p = matrix_from_json(j.at("cells"));
    g.roles = token_roles(g.prompt);
    return g;
  } catch (const Json::exception& e) {
    fail(ErrorCode::kFormat, std::string("trace grid: ") + e.what());
  }
}

namespace {
std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}
}  // namespace

std::string trace_grid_csv(const TraceGrid& g, const Tokenizer& tok) {
  std::string out = "token_index,token_text,layer,restored_p,effect\n";
  for (Eigen::Index i = 0; i < g.restored_p.rows(); ++i) {
    for (Eigen::Index l = 0; l < g.restored_p.cols(); ++l) {
      out += std::to_string(i) + "," + tok.word(g.prompt.tokens[static_cast<std::size_t>(i)]) + "," +
             std::to_string(l) + "," + fmt17(g.restored_p(i, l)) + "," +
             fmt17(g.effect(static_cast<int>(i), static_cast<int>(l))) + "\n";
    }
  }
  return out;
}

Json averaged_grid_to_json(const AveragedGrid& a) {
  Json buckets = Json::object();
  for (int b = 0; b < kBucketCount; ++b) {
    const auto role = static_cast<TokenRole>(b + 1);
    buckets[token_role_name(role)] = {{"support", a.support[static_cast<std::size_t>(b)]},
                                      {"effect", vector_to_json(a.effect.row(b).transpose())}};
  }
  return {{"site", trace_site_name(a.site)},
          {"disable_mlp", a.disable_mlp},
          {"n_grids", a.n_grids},
          {"mean_clean_p", a.mean_clean_p},
          {"mean_corrupted_p", a.mean_corrupted_p},
          {"buckets", buckets}};
}

std::string averaged_grid_csv(const AveragedGrid& a) {
  std::string out = "bucket,layer,effect\n";
  for (int b = 0; b < kBucketCount; ++b) {
    for (Eigen::Index l = 0; l < a.effect.cols(); ++l) {
      out += std::string(token_role_name(static_cast<TokenRole>(b + 1))) + "," + std::to_string(l) + "," +
             fmt17(a.effect(b, l)) + "\n";
    }
  }
  return out;
}

}  // namespace romelab

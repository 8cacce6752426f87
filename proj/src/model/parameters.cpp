#include <cmath>
#include <random>
#include <type_traits>
#include <sstream>

#include "romelab/error.hpp"
#include "romelab/model.hpp"

namespace romelab {

namespace {

constexpr BlockKind kLayerKinds[] = {
    BlockKind::kLnAttnGain, BlockKind::kLnAttnBias, BlockKind::kAttnQ,     BlockKind::kAttnK,
    BlockKind::kAttnV,      BlockKind::kAttnO,      BlockKind::kLnMlpGain, BlockKind::kLnMlpBias,
    BlockKind::kMlpFc,      BlockKind::kMlpProj,
};
constexpr int kLayerKindCount = 10;

constexpr BlockKind kGlobalKinds[] = {
    BlockKind::kTokenEmbedding, BlockKind::kPositionEmbedding, BlockKind::kFinalGain,
    BlockKind::kFinalBias,      BlockKind::kReadout,
};

bool is_layer_kind(BlockKind k) {
  for (auto lk : kLayerKinds) {
    if (lk == k) return true;
  }
  return false;
}

const char* kind_suffix(BlockKind k) {
  switch (k) {
    case BlockKind::kTokenEmbedding: return "token_embedding";
    case BlockKind::kPositionEmbedding: return "position_embedding";
    case BlockKind::kLnAttnGain: return "ln_attn.gain";
    case BlockKind::kLnAttnBias: return "ln_attn.bias";
    case BlockKind::kAttnQ: return "attn.w_q";
    case BlockKind::kAttnK: return "attn.w_k";
    case BlockKind::kAttnV: return "attn.w_v";
    case BlockKind::kAttnO: return "attn.w_o";
    case BlockKind::kLnMlpGain: return "ln_mlp.gain";
    case BlockKind::kLnMlpBias: return "ln_mlp.bias";
    case BlockKind::kMlpFc: return "mlp.w_fc";
    case BlockKind::kMlpProj: return "mlp.w_proj";
    case BlockKind::kFinalGain: return "final_norm.gain";
    case BlockKind::kFinalBias: return "final_norm.bias";
    case BlockKind::kReadout: return "readout";
  }
  return "?";
}

template <class P, class F>
auto with_block(P& p, BlockId id, F&& f) {
  auto layer = [&]() -> decltype(&p.layers.front()) {
    if (!is_layer_kind(id.kind)) return nullptr;
    if (id.layer < 0 || id.layer >= static_cast<int>(p.layers.size())) {
      fail(ErrorCode::kBounds, "block layer " + std::to_string(id.layer) + " out of range");
    }
    return &p.layers[static_cast<std::size_t>(id.layer)];
  }();
  switch (id.kind) {
    case BlockKind::kTokenEmbedding: return f(p.token_embedding);
    case BlockKind::kPositionEmbedding: return f(p.position_embedding);
    case BlockKind::kLnAttnGain: return f(layer->ln_attn.gain);
    case BlockKind::kLnAttnBias: return f(layer->ln_attn.bias);
    case BlockKind::kAttnQ: return f(layer->w_q);
    case BlockKind::kAttnK: return f(layer->w_k);
    case BlockKind::kAttnV: return f(layer->w_v);
    case BlockKind::kAttnO: return f(layer->w_o);
    case BlockKind::kLnMlpGain: return f(layer->ln_mlp.gain);
    case BlockKind::kLnMlpBias: return f(layer->ln_mlp.bias);
    case BlockKind::kMlpFc: return f(layer->w_fc);
    case BlockKind::kMlpProj: return f(layer->w_proj);
    case BlockKind::kFinalGain: return f(p.final_norm.gain);
    case BlockKind::kFinalBias: return f(p.final_norm.bias);
    case BlockKind::kReadout: return f(p.readout);
  }
  fail(ErrorCode::kInvalidArgument, "unknown parameter block");
}

void fill_normal(Matrix& m, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

LayerNormParams unit_norm(int h) {
  return {Vector::Ones(h), Vector::Zero(h)};
}

}  // namespace

const char* wiring_name(Wiring w) { return w == Wiring::kSerial ? "serial" : "parallel"; }

Wiring parse_wiring(const std::string& name) {
  if (name == "serial") return Wiring::kSerial;
  if (name == "parallel") return Wiring::kParallel;
  fail(ErrorCode::kInvalidArgument, "unknown wiring '" + name + "'");
}

void ModelConfig::validate() const {
  std::ostringstream msg;
  if (n_layers < 1) msg << "n_layers must be >= 1; ";
  if (hidden < 1 || n_heads < 1 || hidden % n_heads != 0) {
    msg << "hidden (" << hidden << ") must be divisible by n_heads (" << n_heads << "); ";
  }
  if (mlp_dim < 1) msg << "mlp_dim must be >= 1; ";
  if (vocab_size < 2) msg << "vocab_size must be >= 2; ";
  if (max_context < 1) msg << "max_context must be >= 1; ";
  if (!(ln_eps > 0.0)) msg << "ln_eps must be > 0; ";
  if (!msg.str().empty()) fail(ErrorCode::kInvalidArgument, "model config: " + msg.str());
}

Parameters Parameters::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const int h = config.hidden;
  const int d = config.mlp_dim;
  const double std_w = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * config.n_layers);

  Parameters p;
  p.config = config;
  p.token_embedding.resize(config.vocab_size, h);
  fill_normal(p.token_embedding, std_w, rng);
  p.position_embedding.resize(config.max_context, h);
  fill_normal(p.position_embedding, 0.01, rng);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : p.layers) {
    layer.ln_attn = unit_norm(h);
    layer.ln_mlp = unit_norm(h);
    for (Matrix* w : {&layer.w_q, &layer.w_k, &layer.w_v}) {
      w->resize(h, h);
      fill_normal(*w, std_w, rng);
    }
    layer.w_o.resize(h, h);
    fill_normal(layer.w_o, std_resid, rng);
    layer.w_fc.resize(d, h);
    fill_normal(layer.w_fc, std_w, rng);
    layer.w_proj.resize(h, d);
    fill_normal(layer.w_proj, std_resid, rng);
  }
  p.final_norm = unit_norm(h);
  if (!config.tie_embeddings) {
    p.readout.resize(config.vocab_size, h);
    fill_normal(p.readout, std_w, rng);
  }
  return p;
}

const Matrix& Parameters::output_embedding() const {
  return config.tie_embeddings ? token_embedding : readout;
}

void Parameters::validate() const {
  config.validate();
  if (static_cast<int>(layers.size()) != config.n_layers) {
    fail(ErrorCode::kDimension, "parameters: layer count does not match config");
  }
  for (BlockId id : all_blocks(config)) {
    auto [rows, cols] = block_shape(config, id);
    auto span = block_span(*this, id);
    if (span.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
      fail(ErrorCode::kDimension, "parameters: block " + block_name(id) + " has " +
                                      std::to_string(span.size()) + " entries, expected " +
                                      std::to_string(rows * cols));
    }
    for (double x : span) {
      if (!std::isfinite(x)) {
        fail(ErrorCode::kInvalidArgument, "parameters: non-finite entry in " + block_name(id));
      }
    }
  }
}

std::vector<BlockId> all_blocks(const ModelConfig& config) {
  std::vector<BlockId> out{{BlockKind::kTokenEmbedding, -1}, {BlockKind::kPositionEmbedding, -1}};
  for (int l = 0; l < config.n_layers; ++l) {
    for (auto k : kLayerKinds) out.push_back({k, l});
  }
  out.push_back({BlockKind::kFinalGain, -1});
  out.push_back({BlockKind::kFinalBias, -1});
  if (!config.tie_embeddings) out.push_back({BlockKind::kReadout, -1});
  return out;
}

std::string block_name(BlockId id) {
  if (is_layer_kind(id.kind)) {
    return "layers." + std::to_string(id.layer) + "." + kind_suffix(id.kind);
  }
  return kind_suffix(id.kind);
}

BlockId parse_block_name(const std::string& name, const ModelConfig& config) {
  for (BlockId id : all_blocks(config)) {
    if (block_name(id) == name) return id;
  }
  fail(ErrorCode::kFormat, "unknown parameter block '" + name + "'");
}

std::span<double> block_span(Parameters& p, BlockId id) {
  return with_block(p, id, [](auto& m) { return std::span<double>(m.data(), static_cast<std::size_t>(m.size())); });
}

std::span<const double> block_span(const Parameters& p, BlockId id) {
  return with_block(p, id, [](const auto& m) {
    return std::span<const double>(m.data(), static_cast<std::size_t>(m.size()));
  });
}

std::pair<int, int> block_shape(const ModelConfig& c, BlockId id) {
  switch (id.kind) {
    case BlockKind::kTokenEmbedding: return {c.vocab_size, c.hidden};
    case BlockKind::kPositionEmbedding: return {c.max_context, c.hidden};
    case BlockKind::kLnAttnGain:
    case BlockKind::kLnAttnBias:
    case BlockKind::kLnMlpGain:
    case BlockKind::kLnMlpBias:
    case BlockKind::kFinalGain:
    case BlockKind::kFinalBias: return {c.hidden, 1};
    case BlockKind::kAttnQ:
    case BlockKind::kAttnK:
    case BlockKind::kAttnV:
    case BlockKind::kAttnO: return {c.hidden, c.hidden};
    case BlockKind::kMlpFc: return {c.mlp_dim, c.hidden};
    case BlockKind::kMlpProj: return {c.hidden, c.mlp_dim};
    case BlockKind::kReadout: return {c.tie_embeddings ? 0 : c.vocab_size, c.hidden};
  }
  return {0, 0};
}

// --- ParamSelector ---------------------------------------------------------

ParamSelector::ParamSelector(const ModelConfig& config)
    : n_layers_(config.n_layers),
      tied_(config.tie_embeddings),
      on_(static_cast<std::size_t>(5 + kLayerKindCount * config.n_layers), false) {}

int ParamSelector::index(BlockId id) const {
  if (is_layer_kind(id.kind)) {
    if (id.layer < 0 || id.layer >= n_layers_) {
      fail(ErrorCode::kBounds, "selector layer " + std::to_string(id.layer) + " out of range");
    }
    int k = 0;
    while (kLayerKinds[k] != id.kind) ++k;
    return 5 + id.layer * kLayerKindCount + k;
  }
  int k = 0;
  while (kGlobalKinds[k] != id.kind) ++k;
  return k;
}

ParamSelector ParamSelector::none(const ModelConfig& config) { return ParamSelector(config); }

ParamSelector ParamSelector::all(const ModelConfig& config) {
  ParamSelector s(config);
  for (BlockId id : all_blocks(config)) s.set(id, true);
  return s;
}

ParamSelector ParamSelector::mlp_proj(const ModelConfig& config, int layer) {
  ParamSelector s(config);
  s.set({BlockKind::kMlpProj, layer}, true);
  return s;
}

ParamSelector ParamSelector::attention_qkv(const ModelConfig& config, int layer) {
  ParamSelector s(config);
  s.set({BlockKind::kAttnQ, layer}, true);
  s.set({BlockKind::kAttnK, layer}, true);
  s.set({BlockKind::kAttnV, layer}, true);
  return s;
}

void ParamSelector::set(BlockId id, bool on) {
  if (id.kind == BlockKind::kReadout && tied_ && on) {
    fail(ErrorCode::kInvalidArgument, "selector: readout block does not exist with tied embeddings");
  }
  on_[static_cast<std::size_t>(index(id))] = on;
}

bool ParamSelector::selected(BlockId id) const {
  if (id.kind == BlockKind::kReadout && tied_) return false;
  return on_[static_cast<std::size_t>(index(id))];
}

bool ParamSelector::any() const {
  for (bool b : on_) {
    if (b) return true;
  }
  return false;
}

std::vector<BlockId> ParamSelector::blocks() const {
  ModelConfig c;
  c.n_layers = n_layers_;
  c.tie_embeddings = tied_;
  std::vector<BlockId> out;
  for (BlockId id : all_blocks(c)) {
    if (selected(id)) out.push_back(id);
  }
  return out;
}

int ParamSelector::lowest_layer() const {
  if (on_[0] || on_[1]) return -1;
  for (int l = 0; l < n_layers_; ++l) {
    for (int k = 0; k < kLayerKindCount; ++k) {
      if (on_[static_cast<std::size_t>(5 + l * kLayerKindCount + k)]) return l;
    }
  }
  return n_layers_;
}

Parameters zero_gradients(const Parameters& like, const ParamSelector& selector) {
  Parameters g;
  g.config = like.config;
  g.layers.resize(like.layers.size());
  for (BlockId id : all_blocks(like.config)) {
    if (!selector.selected(id)) continue;
    auto [rows, cols] = block_shape(like.config, id);
    with_block(g, id, [&](auto& m) { m.setZero(rows, cols); });
  }
  return g;
}

}  // namespace romelab

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "romelab/numerics.hpp"

namespace romelab {

// ---------------------------------------------------------------------------
// Configuration and parameters
// ---------------------------------------------------------------------------

enum class Wiring {
  kSerial,    // m = mlp(ln(a + h))   (GPT-2)
  kParallel,  // m = mlp(ln(h))       (GPT-J)
};

const char* wiring_name(Wiring w);
Wiring parse_wiring(const std::string& name);

struct ModelConfig {
  int n_layers = 4;
  int hidden = 64;
  int mlp_dim = 256;
  int n_heads = 4;
  int vocab_size = 512;
  int max_context = 32;
  Wiring wiring = Wiring::kSerial;
  bool tie_embeddings = true;
  double ln_eps = 1e-5;

  void validate() const;
  int head_dim() const { return hidden / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

struct LayerNormParams {
  Vector gain;
  Vector bias;
};

struct LayerParams {
  LayerNormParams ln_attn;
  LayerNormParams ln_mlp;
  // All projections act as y = W x on column vectors.
  Matrix w_q;     // H x H
  Matrix w_k;     // H x H
  Matrix w_v;     // H x H
  Matrix w_o;     // H x H
  Matrix w_fc;    // D x H
  Matrix w_proj;  // H x D
};

struct Parameters {
  ModelConfig config;
  Matrix token_embedding;     // |V| x H
  Matrix position_embedding;  // T x H
  std::vector<LayerParams> layers;
  LayerNormParams final_norm;
  Matrix readout;  // |V| x H; empty when embeddings are tied

  static Parameters init(const ModelConfig& config, std::uint64_t seed);

  // Matrix used by the output softmax: W_e when tied, the readout otherwise.
  const Matrix& output_embedding() const;
  void validate() const;
};

enum class BlockKind {
  kTokenEmbedding,
  kPositionEmbedding,
  kLnAttnGain,
  kLnAttnBias,
  kAttnQ,
  kAttnK,
  kAttnV,
  kAttnO,
  kLnMlpGain,
  kLnMlpBias,
  kMlpFc,
  kMlpProj,
  kFinalGain,
  kFinalBias,
  kReadout,
};

struct BlockId {
  BlockKind kind;
  int layer = -1;  // -1 for blocks outside the layer stack
  bool operator==(const BlockId&) const = default;
};

std::vector<BlockId> all_blocks(const ModelConfig& config);
std::string block_name(BlockId id);
BlockId parse_block_name(const std::string& name, const ModelConfig& config);
std::span<double> block_span(Parameters& p, BlockId id);
std::span<const double> block_span(const Parameters& p, BlockId id);
// Rows x cols of a block for the given config.
std::pair<int, int> block_shape(const ModelConfig& config, BlockId id);

/// Subset of parameter blocks that a gradient computation or optimizer may touch.
class ParamSelector {
 public:
  static ParamSelector none(const ModelConfig& config);
  static ParamSelector all(const ModelConfig& config);
  static ParamSelector mlp_proj(const ModelConfig& config, int layer);
  static ParamSelector attention_qkv(const ModelConfig& config, int layer);

  void set(BlockId id, bool on);
  bool selected(BlockId id) const;
  bool any() const;
  std::vector<BlockId> blocks() const;
  // Smallest layer index holding a selected block, or n_layers if none / only
  // blocks above the stack are selected; embeddings count as -1.
  int lowest_layer() const;

 private:
  explicit ParamSelector(const ModelConfig& config);
  int index(BlockId id) const;

  int n_layers_ = 0;
  bool tied_ = true;
  std::vector<bool> on_;
};

/// Parameters-shaped storage sized only for the selected blocks.
Parameters zero_gradients(const Parameters& like, const ParamSelector& selector);

// ---------------------------------------------------------------------------
// Interventions
// ---------------------------------------------------------------------------

enum class Site {
  kEmbeddingNoise,  // payload added to h^(0)_token
  kHidden,          // h^(layer+1)_token := payload (output of block `layer`)
  kMlpOut,          // m^(layer)_token := payload
  kAttnOut,         // a^(layer)_token := payload
  kMlpFreeze,       // m^(layer)_token pinned to a corrupted-run value
};

const char* site_name(Site s);

struct Patch {
  Site site;
  int token = 0;
  int layer = 0;
  Vector payload;
};

class InterventionSet {
 public:
  // Rejects a second patch on the same (site, token, layer).
  void add(Patch patch);
  void add(Site site, int token, int layer, Vector payload);
  const std::vector<Patch>& patches() const { return patches_; }
  bool empty() const { return patches_.empty(); }

 private:
  std::vector<Patch> patches_;
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct LayerTrace {
  Matrix ln_attn_out;
  Vector ln_attn_mean, ln_attn_rstd;
  Matrix q, k, v;
  std::vector<Matrix> attn_probs;  // per head, T x T
  Matrix attn_heads;               // concatenated head outputs, T x H
  Matrix attn_out;                 // a^(l)
  Matrix mlp_in;                   // input to the MLP layer norm
  Matrix ln_mlp_out;
  Vector ln_mlp_mean, ln_mlp_rstd;
  Matrix mlp_pre;  // W_fc gamma(.), T x D
  Matrix mlp_key;  // sigma(mlp_pre), the key read by ROME
  Matrix mlp_out;  // m^(l)
};

struct ForwardTrace {
  std::vector<int> tokens;
  std::vector<Matrix> hidden;  // n_layers + 1 entries; hidden[0] is the embedding
  std::vector<LayerTrace> layers;
  Matrix final_norm_out;
  Vector final_mean, final_rstd;
  Matrix logits;  // T x |V|
  Matrix probs;   // T x |V|

  int length() const { return static_cast<int>(tokens.size()); }
  Vector distribution(int position) const;
};

ForwardTrace forward(const Parameters& params, const std::vector<int>& tokens,
                     const InterventionSet& interventions = {});

/// softmax(W_e^T gamma(h^(L)_position)) read from a trace.
Vector output_distribution(const ForwardTrace& trace, int position);

Vector softmax(const Vector& logits);

double gelu(double x);
double gelu_grad(double x);

// ---------------------------------------------------------------------------
// Reverse mode
// ---------------------------------------------------------------------------

struct ActivationSite {
  int layer = 0;
  int token = 0;
};

/// Back-propagates `dlogits` (dLoss/dlogits, T x |V|) through a recorded
/// trace.  Gradients for selected blocks are accumulated into `grads` (which
/// must come from zero_gradients with the same selector).  For each requested
/// site the gradient with respect to m^(layer)_token is written to
/// `site_grads` in order.  When the site carries an MLP patch this is the
/// gradient with respect to the substituted value.
void backward(const Parameters& params, const ForwardTrace& trace,
              const InterventionSet& interventions, const Matrix& dlogits,
              const ParamSelector& selector, Parameters* grads,
              const std::vector<ActivationSite>& sites = {},
              std::vector<Vector>* site_grads = nullptr);

/// Negative log-likelihood of `targets[j]` read at `positions[j]`, summed.
/// Writes the matching dlogits (scaled by `weight`) into `dlogits`.
double nll_loss(const ForwardTrace& trace, const std::vector<int>& positions,
                const std::vector<int>& targets, double weight, Matrix* dlogits);

/// KL(p || q) where p is the trace distribution at `position` and q a fixed
/// reference distribution.  Writes weight * dKL/dlogits into `dlogits`.
double kl_loss(const ForwardTrace& trace, int position, const Vector& reference, double weight,
               Matrix* dlogits);

struct LossSpec {
  enum class Kind { kNll, kKl };
  Kind kind = Kind::kNll;
  // kNll: sum of -log P[targets[j] | prefix] at positions[j].
  std::vector<int> positions;
  std::vector<int> targets;
  // kKl: KL(patched distribution at position || reference).
  int position = 0;
  Vector reference;
};

struct ActivationGradient {
  double loss = 0.0;
  Vector gradient;
};

/// d loss / d z where z is substituted for m^(layer)_token.  When `value` is
/// empty the substitution uses the model's own m^(layer)_token.
ActivationGradient grad_wrt_activation(const Parameters& params, const std::vector<int>& tokens,
                                       ActivationSite site, const LossSpec& loss,
                                       const std::optional<Vector>& value = std::nullopt);

/// A token sequence whose tokens from `loss_from` on are prediction targets.
struct LmExample {
  std::vector<int> tokens;
  int loss_from = 1;
};

struct ParamGradient {
  double loss = 0.0;  // mean NLL per target token
  std::size_t n_targets = 0;
  Parameters grads;
};

ParamGradient grad_wrt_params(const Parameters& params, const std::vector<LmExample>& batch,
                              const ParamSelector& selector);

// ---------------------------------------------------------------------------
// Training, sampling, scoring
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // coupled L2, as in torch.optim.Adam
};

/// Adam state over the selected blocks of a parameter set.
class AdamOptimizer {
 public:
  AdamOptimizer(const Parameters& like, const ParamSelector& selector, AdamConfig config);
  void step(Parameters* params, const Parameters& grads, double lr);
  const AdamConfig& config() const { return config_; }

 private:
  ParamSelector selector_;
  AdamConfig config_;
  Parameters m_, v_;
  long t_ = 0;
};

struct Probe {
  std::vector<int> prompt;
  std::vector<int> target;
};

struct TrainSchedule {
  int max_epochs = 200;
  int batch_size = 16;
  double lr = 3e-3;
  double min_lr_ratio = 0.1;
  int warmup_steps = 50;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  double target_accuracy = 1.0;  // stop once probe accuracy reaches this
  int eval_every = 1;            // epochs
};

struct TrainReport {
  int epochs = 0;
  long steps = 0;
  double final_loss = 0.0;
  double probe_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

/// Fraction of probes whose every target token is the argmax under teacher forcing.
double probe_accuracy(const Parameters& params, const std::vector<Probe>& probes);

Parameters train(Parameters params, const std::vector<LmExample>& corpus,
                 const TrainSchedule& schedule, const std::vector<Probe>& probes,
                 TrainReport* report = nullptr);

struct SamplerConfig {
  int top_k = 1;
  int max_len = 16;
  std::uint64_t seed = 0;
  int stop_token = -1;
};

/// Continuation tokens sampled autoregressively after `prompt`.
std::vector<int> generate(const Parameters& params, const std::vector<int>& prompt,
                          const SamplerConfig& sampler);

/// exp(mean NLL of tokens[1..n-1]).
double perplexity(const Parameters& params, const std::vector<int>& tokens);

/// log P[continuation | prompt] under teacher forcing (sum over tokens).
double sequence_log_prob(const Parameters& params, const std::vector<int>& prompt,
                         const std::vector<int>& continuation,
                         const InterventionSet& interventions = {});

}  // namespace romelab

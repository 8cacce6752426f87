#include "romelab/editor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "romelab/error.hpp"

namespace romelab {

EditRequest request_from_record(const CounterfactRecord& record, int layer) {
  EditRequest r;
  r.subject = record.subject;
  r.relation = record.relation;
  r.target_true = record.target_true;
  r.target_new = record.target_new;
  r.rewrite_prompt = record.rewrite_prompt;
  r.essence_prompt = record.essence_prompt;
  r.layer = layer;
  return r;
}

int last_subject_index(const std::vector<int>& tokens, const std::vector<int>& subject) {
  if (subject.empty()) fail(ErrorCode::kTokenization, "empty subject");
  auto it = std::search(tokens.begin(), tokens.end(), subject.begin(), subject.end());
  if (it == tokens.end()) fail(ErrorCode::kTokenization, "subject does not occur in the prompt");
  return static_cast<int>(it - tokens.begin()) + static_cast<int>(subject.size()) - 1;
}

double target_log_prob(const Parameters& params, const Tokenizer& tok, const std::string& prompt,
                       const std::string& target, const InterventionSet& iv) {
  return sequence_log_prob(params, tok.encode_prompt(prompt), tok.encode(target), iv);
}

// Keys ---------------------------------------------------------------------

void KeyPlan::validate() const {
  if (prefixes.empty()) fail(ErrorCode::kInvalidArgument, "key plan: no prefix groups");
  for (auto [len, count] : prefixes) {
    if (len < 0 || count < 1) fail(ErrorCode::kInvalidArgument, "key plan: lengths must be >= 0 and counts >= 1");
  }
  if (top_k < 1) fail(ErrorCode::kInvalidArgument, "key plan: top_k must be >= 1");
}

int KeyPlan::total() const {
  int n = 0;
  for (auto [len, count] : prefixes) n += count;
  return n;
}

std::vector<std::vector<int>> sample_prefixes(const Parameters& params, const KeyPlan& plan) {
  plan.validate();
  std::vector<std::vector<int>> out;
  std::uint64_t j = 0;
  for (auto [len, count] : plan.prefixes) {
    for (int c = 0; c < count; ++c, ++j) {
      if (len == 0) {
        out.emplace_back();
        continue;
      }
      SamplerConfig s;
      s.top_k = plan.top_k;
      s.max_len = len;
      s.seed = plan.seed + j;
      out.push_back(generate(params, {Tokenizer::kBos}, s));
    }
  }
  return out;
}

Vector subject_key(const Parameters& params, const std::vector<int>& prefix,
                   const std::vector<int>& subject, int layer) {
  if (layer < 0 || layer >= params.config.n_layers) fail(ErrorCode::kBounds, "subject_key: layer out of range");
  if (subject.empty()) fail(ErrorCode::kTokenization, "subject_key: empty subject");
  std::vector<int> seq{Tokenizer::kBos};
  seq.insert(seq.end(), prefix.begin(), prefix.end());
  seq.insert(seq.end(), subject.begin(), subject.end());
  const ForwardTrace tr = forward(params, seq);
  return tr.layers[static_cast<std::size_t>(layer)].mlp_key.row(tr.length() - 1).transpose();
}

Vector compute_k_star(const Parameters& params, const std::vector<int>& subject,
                      const std::vector<std::vector<int>>& prefixes, int layer) {
  if (prefixes.empty()) fail(ErrorCode::kInvalidArgument, "compute_k_star: no prefixes");
  Vector sum = Vector::Zero(params.config.mlp_dim);
  for (const auto& p : prefixes) sum += subject_key(params, p, subject, layer);
  return sum / static_cast<double>(prefixes.size());
}

std::vector<CovarianceAccumulator> collect_all_key_statistics(
    const Parameters& params, const std::vector<std::vector<int>>& corpus) {
  std::vector<CovarianceAccumulator> out(static_cast<std::size_t>(params.config.n_layers),
                                         CovarianceAccumulator(static_cast<std::size_t>(params.config.mlp_dim)));
  for (const auto& seq : corpus) {
    const ForwardTrace tr = forward(params, seq);
    for (int l = 0; l < params.config.n_layers; ++l) {
      out[static_cast<std::size_t>(l)].accumulate_rows(tr.layers[static_cast<std::size_t>(l)].mlp_key);
    }
  }
  return out;
}

CovarianceAccumulator collect_key_statistics(const Parameters& params,
                                             const std::vector<std::vector<int>>& corpus, int layer) {
  if (layer < 0 || layer >= params.config.n_layers) fail(ErrorCode::kBounds, "collect_key_statistics: layer out of range");
  CovarianceAccumulator acc(static_cast<std::size_t>(params.config.mlp_dim));
  for (const auto& seq : corpus) {
    acc.accumulate_rows(forward(params, seq).layers[static_cast<std::size_t>(layer)].mlp_key);
  }
  return acc;
}

// Values -------------------------------------------------------------------

void VStarConfig::validate() const {
  if (!(lr > 0.0) || weight_decay < 0.0 || kl_weight < 0.0 || max_steps < 1 || early_stop_loss < 0.0) {
    fail(ErrorCode::kInvalidArgument, "v* config: lr > 0, weight_decay >= 0, kl_weight >= 0, max_steps >= 1 required");
  }
}

VStarProblem::VStarProblem(const Parameters& params, const Tokenizer& tok, const EditRequest& request)
    : params_(params), layer_(request.layer) {
  if (layer_ < 0 || layer_ >= params.config.n_layers) fail(ErrorCode::kBounds, "edit layer out of range");
  if (request.target_new == request.target_true) {
    fail(ErrorCode::kInvalidArgument, "edit request: target_new equals target_true");
  }
  const std::vector<int> subject = tok.encode(request.subject);
  const std::vector<int> prompt = tok.encode_prompt(request.rewrite_prompt);
  const std::vector<int> target = tok.encode(request.target_new);
  if (target.empty()) fail(ErrorCode::kTokenization, "edit request: empty target");
  t_ = last_subject_index(prompt, subject);
  rewrite_tokens_ = prompt;
  rewrite_tokens_.insert(rewrite_tokens_.end(), target.begin(), target.end() - 1);
  for (std::size_t j = 0; j < target.size(); ++j) {
    target_positions_.push_back(static_cast<int>(prompt.size() + j) - 1);
    target_ids_.push_back(target[j]);
  }
  essence_tokens_ = tok.encode_prompt(request.essence_prompt);
  t_essence_ = last_subject_index(essence_tokens_, subject);
  const ForwardTrace ess = forward(params, essence_tokens_);
  reference_ = ess.distribution(ess.length() - 1);
  initial_ = forward(params, rewrite_tokens_).layers[static_cast<std::size_t>(layer_)].mlp_out.row(t_).transpose();
}

VStarObjective VStarProblem::evaluate(const Vector& z, double kl_weight) const {
  LossSpec nll;
  nll.positions = target_positions_;
  nll.targets = target_ids_;
  const ActivationGradient a = grad_wrt_activation(params_, rewrite_tokens_, {layer_, t_}, nll, z);
  VStarObjective out;
  out.nll = a.loss;
  out.gradient = a.gradient;
  if (kl_weight > 0.0) {
    LossSpec kl;
    kl.kind = LossSpec::Kind::kKl;
    kl.position = static_cast<int>(essence_tokens_.size()) - 1;
    kl.reference = reference_;
    const ActivationGradient b = grad_wrt_activation(params_, essence_tokens_, {layer_, t_essence_}, kl, z);
    out.kl = b.loss;
    out.gradient += kl_weight * b.gradient;
  }
  out.loss = out.nll + kl_weight * out.kl;
  return out;
}

VStarResult optimize_v_star(const Parameters& params, const Tokenizer& tok, const EditRequest& request,
                            const VStarConfig& config) {
  config.validate();
  const VStarProblem problem(params, tok, request);
  VStarResult res;
  res.initial = problem.initial();
  Vector z = res.initial;
  Vector m = Vector::Zero(z.size());
  Vector v = Vector::Zero(z.size());
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int step = 0;; ++step) {
    const VStarObjective obj = problem.evaluate(z, config.kl_weight);
    res.losses.push_back(obj.loss);
    res.nll.push_back(obj.nll);
    res.kl.push_back(obj.kl);
    if (!std::isfinite(obj.loss) || !obj.gradient.allFinite()) {
      std::ostringstream msg;
      msg << "v* optimization diverged at step " << step << "; losses:";
      for (double l : res.losses) msg << ' ' << l;
      fail(ErrorCode::kOptimizationFailure, msg.str());
    }
    if (step == 0) res.first_gradient = obj.gradient;
    if (obj.loss <= config.early_stop_loss || step == config.max_steps) break;
    const Vector g = obj.gradient + config.weight_decay * (z - res.initial);
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(b1, step + 1);
    const double bc2 = 1.0 - std::pow(b2, step + 1);
    z.array() -= config.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
    res.steps = step + 1;
  }
  res.v_star = z;
  return res;
}

// Edits --------------------------------------------------------------------

namespace {

void record_probs(const Parameters& params, const Tokenizer& tok, const EditRequest& r, double* p_true,
                  double* p_new) {
  *p_true = std::exp(target_log_prob(params, tok, r.rewrite_prompt, r.target_true));
  *p_new = std::exp(target_log_prob(params, tok, r.rewrite_prompt, r.target_new));
}

}  // namespace

EditResult apply_rome(Parameters* params, const Tokenizer& tok, const EditRequest& request,
                      const Vector& k_star, const Vector& v_star, const Matrix& c) {
  if (request.layer < 0 || request.layer >= params->config.n_layers) {
    fail(ErrorCode::kBounds, "apply_rome: layer out of range");
  }
  EditResult res;
  res.method = "rome";
  res.layer = request.layer;
  res.k_star = k_star;
  res.v_star = v_star;
  record_probs(*params, tok, request, &res.pre_p_true, &res.pre_p_new);
  Matrix& w = params->layers[static_cast<std::size_t>(request.layer)].w_proj;
  const RankOneUpdate up = rank_one_update(w, c, k_star, v_star);
  res.v = up.v;
  res.u = up.u;
  w = up.w_hat;
  res.constraint_residual = (w * k_star - v_star).norm() / (1.0 + v_star.norm());
  res.edited_blocks = {{BlockKind::kMlpProj, request.layer}};
  record_probs(*params, tok, request, &res.post_p_true, &res.post_p_new);
  return res;
}

EditResult rome_edit(Parameters* params, const Tokenizer& tok, const EditRequest& request,
                     const std::vector<std::vector<int>>& prefixes, const CovarianceAccumulator& stats,
                     const RomeConfig& config) {
  const Vector k_star = compute_k_star(*params, tok.encode(request.subject), prefixes, request.layer);
  const VStarResult vs = optimize_v_star(*params, tok, request, config.v_star);
  const Matrix c0 = finalize_covariance(stats, 0.0);
  const double ridge = config.ridge >= 0.0 ? config.ridge : default_ridge(c0);
  const Matrix c = ridge > 0.0 ? finalize_covariance(stats, ridge) : c0;
  EditResult res = apply_rome(params, tok, request, k_star, vs.v_star, c);
  res.losses = vs.losses;
  res.converged = vs.losses.back() <= config.v_star.early_stop_loss;
  return res;
}

const char* fine_tune_mode_name(FineTuneMode m) {
  switch (m) {
    case FineTuneMode::kFt: return "ft";
    case FineTuneMode::kFtL: return "ft+l";
    case FineTuneMode::kAttnEdit: return "attnedit";
  }
  return "?";
}

FineTuneMode parse_fine_tune_mode(const std::string& name) {
  if (name == "ft") return FineTuneMode::kFt;
  if (name == "ft+l" || name == "ftl") return FineTuneMode::kFtL;
  if (name == "attnedit") return FineTuneMode::kAttnEdit;
  fail(ErrorCode::kInvalidArgument, "unknown fine-tuning mode '" + name + "' (expected ft, ft+l or attnedit)");
}

EditResult fine_tune(Parameters* params, const Tokenizer& tok, const EditRequest& request,
                     FineTuneMode mode, double eps, const FineTuneSchedule& schedule) {
  const ModelConfig& cfg = params->config;
  if (request.layer < 0 || request.layer >= cfg.n_layers) fail(ErrorCode::kBounds, "fine_tune: layer out of range");
  if (mode != FineTuneMode::kFt && !(eps >= 0.0)) fail(ErrorCode::kInvalidArgument, "fine_tune: eps must be >= 0");
  if (!(schedule.lr > 0.0) || schedule.max_steps < 0) {
    fail(ErrorCode::kInvalidArgument, "fine_tune: lr must be > 0 and max_steps >= 0");
  }
  const ParamSelector sel = mode == FineTuneMode::kAttnEdit ? ParamSelector::attention_qkv(cfg, request.layer)
                                                            : ParamSelector::mlp_proj(cfg, request.layer);
  const bool clamp = mode != FineTuneMode::kFt;

  EditResult res;
  res.method = fine_tune_mode_name(mode);
  res.layer = request.layer;
  res.edited_blocks = sel.blocks();
  record_probs(*params, tok, request, &res.pre_p_true, &res.pre_p_new);

  const std::vector<int> prompt = tok.encode_prompt(request.rewrite_prompt);
  const std::vector<int> target = tok.encode(request.target_new);
  if (target.empty()) fail(ErrorCode::kTokenization, "fine_tune: empty target");
  std::vector<int> seq = prompt;
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  std::vector<int> pos;
  for (std::size_t j = 0; j < target.size(); ++j) pos.push_back(static_cast<int>(prompt.size() + j) - 1);

  const Parameters theta0 = zero_gradients(*params, sel);
  Parameters origin = theta0;
  Parameters best = theta0;
  for (BlockId id : sel.blocks()) {
    auto src = block_span(*params, id);
    std::copy(src.begin(), src.end(), block_span(origin, id).begin());
  }
  double best_loss = std::numeric_limits<double>::infinity();
  AdamOptimizer adam(*params, sel, {schedule.lr});
  res.converged = false;
  for (int step = 0;; ++step) {
    const ForwardTrace tr = forward(*params, seq);
    Matrix dlogits;
    const double loss = nll_loss(tr, pos, target, 1.0, &dlogits);
    res.losses.push_back(loss);
    if (!std::isfinite(loss)) fail(ErrorCode::kOptimizationFailure, "fine_tune: non-finite loss");
    if (loss < best_loss) {
      best_loss = loss;
      for (BlockId id : sel.blocks()) {
        auto src = block_span(*params, id);
        std::copy(src.begin(), src.end(), block_span(best, id).begin());
      }
    }
    if (loss <= schedule.early_stop_loss) {
      res.converged = true;
      break;
    }
    if (step == schedule.max_steps) break;
    Parameters grads = zero_gradients(*params, sel);
    backward(*params, tr, {}, dlogits, sel, &grads);
    adam.step(params, grads, schedule.lr);
    if (clamp) {
      for (BlockId id : sel.blocks()) {
        auto w = block_span(*params, id);
        auto w0 = block_span(origin, id);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::clamp(w[i], w0[i] - eps, w0[i] + eps);
      }
    }
  }
  if (!res.converged) {
    for (BlockId id : sel.blocks()) {
      auto src = block_span(best, id);
      std::copy(src.begin(), src.end(), block_span(*params, id).begin());
    }
  }
  record_probs(*params, tok, request, &res.post_p_true, &res.post_p_new);
  return res;
}

}  // namespace romelab

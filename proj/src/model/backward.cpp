#include <algorithm>
#include <cmath>

#include "romelab/error.hpp"
#include "romelab/model.hpp"

namespace romelab {

namespace {

// Gradient of y = gain * xhat + bias with respect to x, given dy.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& x, const Vector& mean,
                           const Vector& rstd, const LayerNormParams& p, Vector* dgain,
                           Vector* dbias) {
  const Eigen::Index t = x.rows();
  const Eigen::Index h = x.cols();
  Matrix dx(t, h);
  for (Eigen::Index i = 0; i < t; ++i) {
    const RowVector xhat = ((x.row(i).array() - mean(i)) * rstd(i)).matrix();
    const RowVector dxhat = dy.row(i).cwiseProduct(p.gain.transpose());
    if (dgain != nullptr) *dgain += dy.row(i).cwiseProduct(xhat).transpose();
    if (dbias != nullptr) *dbias += dy.row(i).transpose();
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(xhat).mean();
    dx.row(i) = rstd(i) * (dxhat.array() - m1 - xhat.array() * m2).matrix();
  }
  return dx;
}

}  // namespace

void backward(const Parameters& params, const ForwardTrace& tr,
              const InterventionSet& interventions, const Matrix& dlogits,
              const ParamSelector& sel, Parameters* grads,
              const std::vector<ActivationSite>& sites, std::vector<Vector>* site_grads) {
  const ModelConfig& cfg = params.config;
  const int t = tr.length();
  const int n_layers = cfg.n_layers;
  if (dlogits.rows() != t || dlogits.cols() != cfg.vocab_size) {
    fail(ErrorCode::kDimension, "backward: dlogits must be " + std::to_string(t) + "x" +
                                    std::to_string(cfg.vocab_size));
  }
  if (sel.any() && grads == nullptr) {
    fail(ErrorCode::kInvalidArgument, "backward: gradient storage required for selected blocks");
  }
  if (!sites.empty() && site_grads == nullptr) {
    fail(ErrorCode::kInvalidArgument, "backward: storage required for activation gradients");
  }
  int stop = sel.lowest_layer();
  for (const auto& s : sites) {
    if (s.layer < 0 || s.layer >= n_layers || s.token < 0 || s.token >= t) {
      fail(ErrorCode::kBounds, "backward: activation site (layer " + std::to_string(s.layer) +
                                   ", token " + std::to_string(s.token) + ") out of range");
    }
    stop = std::min(stop, s.layer);
  }
  if (site_grads != nullptr) site_grads->assign(sites.size(), Vector::Zero(cfg.hidden));

  const int h = cfg.hidden;
  const int n_heads = cfg.n_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Readout and final norm.
  const Matrix& w_out = params.output_embedding();
  if (cfg.tie_embeddings) {
    if (sel.selected({BlockKind::kTokenEmbedding, -1})) {
      grads->token_embedding.noalias() += dlogits.transpose() * tr.final_norm_out;
    }
  } else if (sel.selected({BlockKind::kReadout, -1})) {
    grads->readout.noalias() += dlogits.transpose() * tr.final_norm_out;
  }
  const bool final_selected =
      sel.selected({BlockKind::kFinalGain, -1}) || sel.selected({BlockKind::kFinalBias, -1});
  if (stop >= n_layers && !final_selected) return;
  const Matrix dnorm = dlogits * w_out;
  Vector* dgf = sel.selected({BlockKind::kFinalGain, -1}) ? &grads->final_norm.gain : nullptr;
  Vector* dbf = sel.selected({BlockKind::kFinalBias, -1}) ? &grads->final_norm.bias : nullptr;
  Matrix dh_cur = layer_norm_backward(dnorm, tr.hidden.back(), tr.final_mean, tr.final_rstd,
                                      params.final_norm, dgf, dbf);
  if (stop >= n_layers) return;

  const int first = std::max(stop, 0);
  for (int l = n_layers - 1; l >= first; --l) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
    const LayerTrace& lt = tr.layers[static_cast<std::size_t>(l)];
    LayerParams* gl = grads != nullptr && !grads->layers.empty()
                          ? &grads->layers[static_cast<std::size_t>(l)]
                          : nullptr;

    for (const auto& p : interventions.patches()) {
      if (p.site == Site::kHidden && p.layer == l) dh_cur.row(p.token).setZero();
    }

    Matrix dm = dh_cur;
    for (std::size_t s = 0; s < sites.size(); ++s) {
      if (sites[s].layer == l) (*site_grads)[s] = dm.row(sites[s].token).transpose();
    }

    bool layer_selected = false;
    for (BlockId id : sel.blocks()) layer_selected |= id.layer == l;
    if (l == stop && !layer_selected && stop >= 0) break;

    for (const auto& p : interventions.patches()) {
      if ((p.site == Site::kMlpOut || p.site == Site::kMlpFreeze) && p.layer == l) {
        dm.row(p.token).setZero();
      }
    }

    Matrix da = dh_cur;
    Matrix dx = dh_cur;

    // MLP: m = gelu(ln(mlp_in) W_fc^T) W_proj^T
    if (sel.selected({BlockKind::kMlpProj, l})) gl->w_proj.noalias() += dm.transpose() * lt.mlp_key;
    Matrix dpre = dm * lp.w_proj;
    for (Eigen::Index i = 0; i < dpre.size(); ++i) {
      dpre.data()[i] *= gelu_grad(lt.mlp_pre.data()[i]);
    }
    if (sel.selected({BlockKind::kMlpFc, l})) gl->w_fc.noalias() += dpre.transpose() * lt.ln_mlp_out;
    const Matrix dln2 = dpre * lp.w_fc;
    Vector* dg2 = sel.selected({BlockKind::kLnMlpGain, l}) ? &gl->ln_mlp.gain : nullptr;
    Vector* db2 = sel.selected({BlockKind::kLnMlpBias, l}) ? &gl->ln_mlp.bias : nullptr;
    const Matrix dmlp_in =
        layer_norm_backward(dln2, lt.mlp_in, lt.ln_mlp_mean, lt.ln_mlp_rstd, lp.ln_mlp, dg2, db2);
    dx += dmlp_in;
    if (cfg.wiring == Wiring::kSerial) da += dmlp_in;

    for (const auto& p : interventions.patches()) {
      if (p.site == Site::kAttnOut && p.layer == l) da.row(p.token).setZero();
    }

    // Attention.
    if (sel.selected({BlockKind::kAttnO, l})) gl->w_o.noalias() += da.transpose() * lt.attn_heads;
    const Matrix dheads = da * lp.w_o;
    Matrix dq(t, h), dk(t, h), dv(t, h);
    for (int hd = 0; hd < n_heads; ++hd) {
      const Matrix& pr = lt.attn_probs[static_cast<std::size_t>(hd)];
      const auto d_o = dheads.middleCols(hd * dh, dh);
      Matrix dp = d_o * lt.v.middleCols(hd * dh, dh).transpose();
      dv.middleCols(hd * dh, dh).noalias() = pr.transpose() * d_o;
      Matrix ds = Matrix::Zero(t, t);
      for (int i = 0; i < t; ++i) {
        double dot = 0.0;
        for (int j = 0; j <= i; ++j) dot += dp(i, j) * pr(i, j);
        for (int j = 0; j <= i; ++j) ds(i, j) = pr(i, j) * (dp(i, j) - dot) * scale;
      }
      dq.middleCols(hd * dh, dh).noalias() = ds * lt.k.middleCols(hd * dh, dh);
      dk.middleCols(hd * dh, dh).noalias() = ds.transpose() * lt.q.middleCols(hd * dh, dh);
    }
    if (sel.selected({BlockKind::kAttnQ, l})) gl->w_q.noalias() += dq.transpose() * lt.ln_attn_out;
    if (sel.selected({BlockKind::kAttnK, l})) gl->w_k.noalias() += dk.transpose() * lt.ln_attn_out;
    if (sel.selected({BlockKind::kAttnV, l})) gl->w_v.noalias() += dv.transpose() * lt.ln_attn_out;
    Matrix dln1 = dq * lp.w_q;
    dln1.noalias() += dk * lp.w_k;
    dln1.noalias() += dv * lp.w_v;
    Vector* dg1 = sel.selected({BlockKind::kLnAttnGain, l}) ? &gl->ln_attn.gain : nullptr;
    Vector* db1 = sel.selected({BlockKind::kLnAttnBias, l}) ? &gl->ln_attn.bias : nullptr;
    dx += layer_norm_backward(dln1, tr.hidden[static_cast<std::size_t>(l)], lt.ln_attn_mean,
                              lt.ln_attn_rstd, lp.ln_attn, dg1, db1);
    dh_cur = std::move(dx);
  }

  if (stop < 0) {
    // Embedding noise is additive, so the gradient reaches the embeddings intact.
    if (sel.selected({BlockKind::kTokenEmbedding, -1})) {
      for (int i = 0; i < t; ++i) {
        grads->token_embedding.row(tr.tokens[static_cast<std::size_t>(i)]) += dh_cur.row(i);
      }
    }
    if (sel.selected({BlockKind::kPositionEmbedding, -1})) {
      grads->position_embedding.topRows(t) += dh_cur;
    }
  }
}

double nll_loss(const ForwardTrace& trace, const std::vector<int>& positions,
                const std::vector<int>& targets, double weight, Matrix* dlogits) {
  if (positions.size() != targets.size()) {
    fail(ErrorCode::kDimension, "nll_loss: positions and targets differ in length");
  }
  if (dlogits != nullptr && dlogits->size() == 0) {
    dlogits->setZero(trace.length(), trace.probs.cols());
  }
  double loss = 0.0;
  for (std::size_t j = 0; j < positions.size(); ++j) {
    const int pos = positions[j];
    const int tgt = targets[j];
    if (pos < 0 || pos >= trace.length() || tgt < 0 || tgt >= trace.probs.cols()) {
      fail(ErrorCode::kBounds, "nll_loss: position/target out of range");
    }
    const double p = trace.probs(pos, tgt);
    loss -= std::log(std::max(p, 1e-300));
    if (dlogits != nullptr) {
      dlogits->row(pos) += weight * trace.probs.row(pos);
      (*dlogits)(pos, tgt) -= weight;
    }
  }
  return loss;
}

double kl_loss(const ForwardTrace& trace, int position, const Vector& reference, double weight,
               Matrix* dlogits) {
  if (position < 0 || position >= trace.length()) {
    fail(ErrorCode::kBounds, "kl_loss: position out of range");
  }
  if (reference.size() != trace.probs.cols()) {
    fail(ErrorCode::kDimension, "kl_loss: reference distribution has wrong size");
  }
  if (dlogits != nullptr && dlogits->size() == 0) {
    dlogits->setZero(trace.length(), trace.probs.cols());
  }
  const auto p = trace.probs.row(position);
  Vector log_ratio(p.size());
  double kl = 0.0;
  for (Eigen::Index j = 0; j < p.size(); ++j) {
    if (p(j) > 0.0) {
      log_ratio(j) = std::log(p(j)) - std::log(std::max(reference(j), 1e-300));
      kl += p(j) * log_ratio(j);
    } else {
      log_ratio(j) = 0.0;
    }
  }
  if (dlogits != nullptr) {
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      (*dlogits)(position, j) += weight * p(j) * (log_ratio(j) - kl);
    }
  }
  return kl;
}

ActivationGradient grad_wrt_activation(const Parameters& params, const std::vector<int>& tokens,
                                       ActivationSite site, const LossSpec& loss,
                                       const std::optional<Vector>& value) {
  const ModelConfig& cfg = params.config;
  if (site.layer < 0 || site.layer >= cfg.n_layers || site.token < 0 ||
      site.token >= static_cast<int>(tokens.size())) {
    fail(ErrorCode::kBounds, "grad_wrt_activation: site out of range");
  }
  Vector z;
  if (value.has_value()) {
    z = *value;
  } else {
    const ForwardTrace clean = forward(params, tokens);
    z = clean.layers[static_cast<std::size_t>(site.layer)].mlp_out.row(site.token).transpose();
  }
  InterventionSet iv;
  iv.add(Site::kMlpOut, site.token, site.layer, z);
  const ForwardTrace tr = forward(params, tokens, iv);
  Matrix dlogits;
  ActivationGradient out;
  if (loss.kind == LossSpec::Kind::kNll) {
    out.loss = nll_loss(tr, loss.positions, loss.targets, 1.0, &dlogits);
  } else {
    out.loss = kl_loss(tr, loss.position, loss.reference, 1.0, &dlogits);
  }
  std::vector<Vector> g;
  backward(params, tr, iv, dlogits, ParamSelector::none(cfg), nullptr, {site}, &g);
  out.gradient = g.front();
  return out;
}

ParamGradient grad_wrt_params(const Parameters& params, const std::vector<LmExample>& batch,
                              const ParamSelector& selector) {
  std::size_t n_targets = 0;
  for (const auto& ex : batch) {
    const int n = static_cast<int>(ex.tokens.size());
    if (ex.loss_from < 1) fail(ErrorCode::kInvalidArgument, "grad_wrt_params: loss_from must be >= 1");
    if (n > ex.loss_from) n_targets += static_cast<std::size_t>(n - ex.loss_from);
  }
  if (batch.empty() || n_targets == 0) {
    fail(ErrorCode::kInvalidArgument, "grad_wrt_params: empty batch");
  }
  ParamGradient out;
  out.grads = zero_gradients(params, selector);
  out.n_targets = n_targets;
  const double w = 1.0 / static_cast<double>(n_targets);
  for (const auto& ex : batch) {
    const int n = static_cast<int>(ex.tokens.size());
    if (n <= ex.loss_from) continue;
    const ForwardTrace tr = forward(params, ex.tokens);
    std::vector<int> pos, tgt;
    for (int i = ex.loss_from; i < n; ++i) {
      pos.push_back(i - 1);
      tgt.push_back(ex.tokens[static_cast<std::size_t>(i)]);
    }
    Matrix dlogits;
    out.loss += w * nll_loss(tr, pos, tgt, w, selector.any() ? &dlogits : nullptr);
    if (selector.any()) backward(params, tr, {}, dlogits, selector, &out.grads);
  }
  return out;
}

}  // namespace romelab

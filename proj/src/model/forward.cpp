#include <cmath>
#include <limits>
#include <sstream>

#include "romelab/error.hpp"
#include "romelab/model.hpp"

namespace romelab {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

void layer_norm(const Matrix& x, const LayerNormParams& p, double eps, Matrix* out, Vector* mean,
                Vector* rstd) {
  const Eigen::Index t = x.rows();
  const Eigen::Index h = x.cols();
  out->resize(t, h);
  mean->resize(t);
  rstd->resize(t);
  for (Eigen::Index i = 0; i < t; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double rs = 1.0 / std::sqrt(var + eps);
    (*mean)(i) = mu;
    (*rstd)(i) = rs;
    out->row(i) = ((x.row(i).array() - mu) * rs).matrix().cwiseProduct(p.gain.transpose()) +
                  p.bias.transpose();
  }
}

std::string site_key(Site s, int token, int layer) {
  return std::string(site_name(s)) + "@" + std::to_string(token) + ":" + std::to_string(layer);
}

void check_patch(const Patch& patch, const ModelConfig& cfg, int length) {
  if (patch.token < 0 || patch.token >= length) {
    fail(ErrorCode::kBounds, "intervention token " + std::to_string(patch.token) +
                                 " out of range for sequence of length " + std::to_string(length));
  }
  if (patch.site == Site::kEmbeddingNoise) {
    if (patch.layer != 0) fail(ErrorCode::kBounds, "embedding noise must use layer 0");
  } else if (patch.layer < 0 || patch.layer >= cfg.n_layers) {
    fail(ErrorCode::kBounds, "intervention layer " + std::to_string(patch.layer) +
                                 " out of range for " + std::to_string(cfg.n_layers) + " layers");
  }
  if (patch.payload.size() != cfg.hidden) {
    fail(ErrorCode::kDimension, "intervention payload has " + std::to_string(patch.payload.size()) +
                                    " entries, hidden size is " + std::to_string(cfg.hidden));
  }
}

}  // namespace

const char* site_name(Site s) {
  switch (s) {
    case Site::kEmbeddingNoise: return "embedding_noise";
    case Site::kHidden: return "hidden";
    case Site::kMlpOut: return "mlp_out";
    case Site::kAttnOut: return "attn_out";
    case Site::kMlpFreeze: return "mlp_freeze";
  }
  return "?";
}

void InterventionSet::add(Patch patch) {
  for (const auto& p : patches_) {
    if (p.site == patch.site && p.token == patch.token && p.layer == patch.layer) {
      fail(ErrorCode::kInvalidArgument,
           "duplicate intervention at " + site_key(patch.site, patch.token, patch.layer));
    }
  }
  if (!patch.payload.allFinite()) {
    fail(ErrorCode::kInvalidArgument, "non-finite intervention payload");
  }
  patches_.push_back(std::move(patch));
}

void InterventionSet::add(Site site, int token, int layer, Vector payload) {
  add(Patch{site, token, layer, std::move(payload)});
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  const double inner = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(inner);
  const double sech2 = 1.0 - th * th;
  return 0.5 * (1.0 + th) + 0.5 * x * sech2 * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

ForwardTrace forward(const Parameters& params, const std::vector<int>& tokens,
                     const InterventionSet& interventions) {
  const ModelConfig& cfg = params.config;
  const int t = static_cast<int>(tokens.size());
  if (t == 0) fail(ErrorCode::kInvalidArgument, "forward: empty token sequence");
  if (t > cfg.max_context) {
    fail(ErrorCode::kBounds, "forward: sequence length " + std::to_string(t) +
                                 " exceeds context " + std::to_string(cfg.max_context));
  }
  for (int id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) {
      fail(ErrorCode::kBounds, "forward: token id " + std::to_string(id) + " outside vocabulary of " +
                                   std::to_string(cfg.vocab_size));
    }
  }

  // Index the patches per (site, layer) for the loop below.
  const int n_layers = cfg.n_layers;
  std::vector<const Patch*> noise;
  std::vector<std::vector<const Patch*>> hidden(n_layers), mlp(n_layers), freeze(n_layers),
      attn(n_layers);
  for (const auto& p : interventions.patches()) {
    check_patch(p, cfg, t);
    switch (p.site) {
      case Site::kEmbeddingNoise: noise.push_back(&p); break;
      case Site::kHidden: hidden[p.layer].push_back(&p); break;
      case Site::kMlpOut: mlp[p.layer].push_back(&p); break;
      case Site::kMlpFreeze: freeze[p.layer].push_back(&p); break;
      case Site::kAttnOut: attn[p.layer].push_back(&p); break;
    }
  }

  const int h = cfg.hidden;
  const int n_heads = cfg.n_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardTrace tr;
  tr.tokens = tokens;
  tr.hidden.resize(static_cast<std::size_t>(n_layers + 1));
  tr.layers.resize(static_cast<std::size_t>(n_layers));

  Matrix& h0 = tr.hidden[0];
  h0.resize(t, h);
  for (int i = 0; i < t; ++i) {
    h0.row(i) = params.token_embedding.row(tokens[static_cast<std::size_t>(i)]) +
                params.position_embedding.row(i);
  }
  for (const Patch* p : noise) h0.row(p->token) += p->payload.transpose();

  for (int l = 0; l < n_layers; ++l) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
    LayerTrace& lt = tr.layers[static_cast<std::size_t>(l)];
    const Matrix& x = tr.hidden[static_cast<std::size_t>(l)];

    layer_norm(x, lp.ln_attn, cfg.ln_eps, &lt.ln_attn_out, &lt.ln_attn_mean, &lt.ln_attn_rstd);
    lt.q.noalias() = lt.ln_attn_out * lp.w_q.transpose();
    lt.k.noalias() = lt.ln_attn_out * lp.w_k.transpose();
    lt.v.noalias() = lt.ln_attn_out * lp.w_v.transpose();
    lt.attn_probs.resize(static_cast<std::size_t>(n_heads));
    lt.attn_heads.resize(t, h);
    for (int hd = 0; hd < n_heads; ++hd) {
      Matrix s = lt.q.middleCols(hd * dh, dh) * lt.k.middleCols(hd * dh, dh).transpose();
      Matrix& pr = lt.attn_probs[static_cast<std::size_t>(hd)];
      pr.setZero(t, t);
      for (int i = 0; i < t; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j <= i; ++j) mx = std::max(mx, s(i, j) * scale);
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
          const double e = std::exp(s(i, j) * scale - mx);
          pr(i, j) = e;
          z += e;
        }
        for (int j = 0; j <= i; ++j) pr(i, j) /= z;
      }
      lt.attn_heads.middleCols(hd * dh, dh).noalias() = pr * lt.v.middleCols(hd * dh, dh);
    }
    lt.attn_out.noalias() = lt.attn_heads * lp.w_o.transpose();
    for (const Patch* p : attn[l]) lt.attn_out.row(p->token) = p->payload.transpose();

    if (cfg.wiring == Wiring::kSerial) {
      lt.mlp_in = x + lt.attn_out;
    } else {
      lt.mlp_in = x;
    }
    layer_norm(lt.mlp_in, lp.ln_mlp, cfg.ln_eps, &lt.ln_mlp_out, &lt.ln_mlp_mean, &lt.ln_mlp_rstd);
    lt.mlp_pre.noalias() = lt.ln_mlp_out * lp.w_fc.transpose();
    lt.mlp_key = lt.mlp_pre.unaryExpr([](double v) { return gelu(v); });
    lt.mlp_out.noalias() = lt.mlp_key * lp.w_proj.transpose();
    // A restoration (mlp_out) takes precedence over a freeze on the same cell.
    for (const Patch* p : freeze[l]) lt.mlp_out.row(p->token) = p->payload.transpose();
    for (const Patch* p : mlp[l]) lt.mlp_out.row(p->token) = p->payload.transpose();

    Matrix& out = tr.hidden[static_cast<std::size_t>(l + 1)];
    out = x + lt.attn_out + lt.mlp_out;
    for (const Patch* p : hidden[l]) out.row(p->token) = p->payload.transpose();
  }

  layer_norm(tr.hidden.back(), params.final_norm, cfg.ln_eps, &tr.final_norm_out, &tr.final_mean,
             &tr.final_rstd);
  tr.logits.noalias() = tr.final_norm_out * params.output_embedding().transpose();
  tr.probs.resize(t, cfg.vocab_size);
  for (int i = 0; i < t; ++i) {
    const double mx = tr.logits.row(i).maxCoeff();
    tr.probs.row(i) = (tr.logits.row(i).array() - mx).exp().matrix();
    tr.probs.row(i) /= tr.probs.row(i).sum();
  }
  return tr;
}

Vector ForwardTrace::distribution(int position) const {
  if (position < 0 || position >= length()) {
    fail(ErrorCode::kBounds, "distribution: position " + std::to_string(position) +
                                 " out of range for length " + std::to_string(length()));
  }
  return probs.row(position).transpose();
}

Vector output_distribution(const ForwardTrace& trace, int position) {
  return trace.distribution(position);
}

}  // namespace romelab

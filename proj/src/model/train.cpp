#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "romelab/error.hpp"
#include "romelab/model.hpp"

namespace romelab {

AdamOptimizer::AdamOptimizer(const Parameters& like, const ParamSelector& selector,
                             AdamConfig config)
    : selector_(selector),
      config_(config),
      m_(zero_gradients(like, selector)),
      v_(zero_gradients(like, selector)) {}

void AdamOptimizer::step(Parameters* params, const Parameters& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (BlockId id : selector_.blocks()) {
    auto w = block_span(*params, id);
    auto g = block_span(grads, id);
    auto m = block_span(m_, id);
    auto v = block_span(v_, id);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + config_.weight_decay * w[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

double probe_accuracy(const Parameters& params, const std::vector<Probe>& probes) {
  if (probes.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& probe : probes) {
    std::vector<int> seq = probe.prompt;
    seq.insert(seq.end(), probe.target.begin(), probe.target.end() - 1);
    const ForwardTrace tr = forward(params, seq);
    bool ok = true;
    for (std::size_t j = 0; j < probe.target.size() && ok; ++j) {
      const int pos = static_cast<int>(probe.prompt.size() + j) - 1;
      Eigen::Index arg = 0;
      tr.probs.row(pos).maxCoeff(&arg);
      ok = arg == probe.target[j];
    }
    hits += ok ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

Parameters train(Parameters params, const std::vector<LmExample>& corpus,
                 const TrainSchedule& schedule, const std::vector<Probe>& probes,
                 TrainReport* report) {
  if (corpus.empty()) fail(ErrorCode::kInvalidArgument, "train: empty corpus");
  if (schedule.batch_size < 1 || schedule.max_epochs < 1) {
    fail(ErrorCode::kInvalidArgument, "train: batch_size and max_epochs must be >= 1");
  }
  params.validate();
  const ParamSelector all = ParamSelector::all(params.config);
  AdamOptimizer adam(params, all, {schedule.lr, 0.9, 0.999, 1e-8, schedule.weight_decay});
  std::mt19937_64 rng(schedule.seed);

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  const long steps_per_epoch =
      static_cast<long>((corpus.size() + static_cast<std::size_t>(schedule.batch_size) - 1) /
                        static_cast<std::size_t>(schedule.batch_size));
  const long total_steps = steps_per_epoch * schedule.max_epochs;

  TrainReport rep;
  long step = 0;
  for (int epoch = 0; epoch < schedule.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_targets = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(schedule.batch_size)) {
      std::vector<LmExample> batch;
      for (std::size_t j = start;
           j < std::min(order.size(), start + static_cast<std::size_t>(schedule.batch_size)); ++j) {
        batch.push_back(corpus[order[j]]);
      }
      ParamGradient g = grad_wrt_params(params, batch, all);
      if (!std::isfinite(g.loss)) {
        fail(ErrorCode::kTrainingFailure, "train: loss diverged at epoch " + std::to_string(epoch) +
                                              ", step " + std::to_string(step));
      }
      epoch_loss += g.loss * static_cast<double>(g.n_targets);
      epoch_targets += g.n_targets;

      double sq = 0.0;
      for (BlockId id : all.blocks()) {
        for (double x : block_span(g.grads, id)) sq += x * x;
      }
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm)) {
        fail(ErrorCode::kTrainingFailure, "train: non-finite gradient at step " + std::to_string(step));
      }
      if (schedule.grad_clip > 0.0 && norm > schedule.grad_clip) {
        const double s = schedule.grad_clip / norm;
        for (BlockId id : all.blocks()) {
          for (double& x : block_span(g.grads, id)) x *= s;
        }
      }

      double lr = schedule.lr;
      if (step < schedule.warmup_steps) {
        lr *= static_cast<double>(step + 1) / static_cast<double>(schedule.warmup_steps);
      } else {
        const double progress = static_cast<double>(step - schedule.warmup_steps) /
                                static_cast<double>(std::max(1L, total_steps - schedule.warmup_steps));
        const double cosine = 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
        lr *= schedule.min_lr_ratio + (1.0 - schedule.min_lr_ratio) * cosine;
      }
      adam.step(&params, g.grads, lr);
      ++step;
    }
    rep.epochs = epoch + 1;
    rep.final_loss = epoch_loss / static_cast<double>(std::max<std::size_t>(1, epoch_targets));
    rep.epoch_loss.push_back(rep.final_loss);
    if (!probes.empty() && schedule.eval_every > 0 && (epoch + 1) % schedule.eval_every == 0) {
      rep.probe_accuracy = probe_accuracy(params, probes);
      if (rep.probe_accuracy >= schedule.target_accuracy) break;
    }
  }
  rep.steps = step;
  if (!probes.empty()) rep.probe_accuracy = probe_accuracy(params, probes);
  if (report != nullptr) *report = rep;
  return params;
}

std::vector<int> generate(const Parameters& params, const std::vector<int>& prompt,
                          const SamplerConfig& sampler) {
  if (prompt.empty()) fail(ErrorCode::kInvalidArgument, "generate: empty prompt");
  if (sampler.top_k < 1) fail(ErrorCode::kInvalidArgument, "generate: top_k must be >= 1");
  std::mt19937_64 rng(sampler.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<int> seq = prompt;
  std::vector<int> out;
  const int vocab = params.config.vocab_size;
  std::vector<int> idx(static_cast<std::size_t>(vocab));
  for (int n = 0; n < sampler.max_len; ++n) {
    if (static_cast<int>(seq.size()) >= params.config.max_context) break;
    const ForwardTrace tr = forward(params, seq);
    const auto p = tr.probs.row(tr.length() - 1);
    std::iota(idx.begin(), idx.end(), 0);
    const int k = std::min(sampler.top_k, vocab);
    // Stable ordering: higher probability first, lower id on ties.
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
      return p(a) > p(b) || (p(a) == p(b) && a < b);
    });
    int next = idx[0];
    if (k > 1) {
      double mass = 0.0;
      for (int j = 0; j < k; ++j) mass += p(idx[static_cast<std::size_t>(j)]);
      double r = unif(rng) * mass;
      for (int j = 0; j < k; ++j) {
        r -= p(idx[static_cast<std::size_t>(j)]);
        next = idx[static_cast<std::size_t>(j)];
        if (r <= 0.0) break;
      }
    }
    seq.push_back(next);
    out.push_back(next);
    if (next == sampler.stop_token) break;
  }
  return out;
}

double perplexity(const Parameters& params, const std::vector<int>& tokens) {
  if (tokens.size() < 2) fail(ErrorCode::kInvalidArgument, "perplexity: need at least 2 tokens");
  const ForwardTrace tr = forward(params, tokens);
  double nll = 0.0;
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    nll -= std::log(tr.probs(static_cast<Eigen::Index>(i - 1), tokens[i]));
  }
  return std::exp(nll / static_cast<double>(tokens.size() - 1));
}

double sequence_log_prob(const Parameters& params, const std::vector<int>& prompt,
                         const std::vector<int>& continuation,
                         const InterventionSet& interventions) {
  if (prompt.empty() || continuation.empty()) {
    fail(ErrorCode::kInvalidArgument, "sequence_log_prob: empty prompt or continuation");
  }
  std::vector<int> seq = prompt;
  seq.insert(seq.end(), continuation.begin(), continuation.end() - 1);
  const ForwardTrace tr = forward(params, seq, interventions);
  double lp = 0.0;
  for (std::size_t j = 0; j < continuation.size(); ++j) {
    const auto pos = static_cast<Eigen::Index>(prompt.size() + j - 1);
    lp += std::log(tr.probs(pos, continuation[j]));
  }
  return lp;
}

}  // namespace romelab

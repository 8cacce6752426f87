#include "romelab/tracing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "romelab/error.hpp"

namespace romelab {

TracePrompt make_trace_prompt(const Tokenizer& tok, const std::string& tmpl,
                              const std::string& subject, const std::string& object) {
  const auto slot = tmpl.find("{}");
  if (slot == std::string::npos) fail(ErrorCode::kFormat, "template lacks a subject slot: '" + tmpl + "'");
  TracePrompt p;
  p.text = render_template(tmpl, subject);
  p.tokens = tok.encode_prompt(p.text);
  p.subject_first = 1 + static_cast<int>(split_words(tmpl.substr(0, slot)).size());
  p.subject_last = p.subject_first + static_cast<int>(split_words(subject).size()) - 1;
  p.target = tok.encode(object);
  if (p.target.empty()) fail(ErrorCode::kTokenization, "empty object");
  return p;
}

KnownPromptSelection select_known_prompts(const Parameters& params, const WorldModel& world,
                                          const Tokenizer& tok, int n, std::uint64_t seed) {
  if (n < 1) fail(ErrorCode::kInvalidArgument, "select_known_prompts: n must be >= 1");
  std::vector<std::pair<int, int>> pairs;
  for (std::size_t f = 0; f < world.facts.size(); ++f) {
    const auto& rel = world.relations[static_cast<std::size_t>(world.facts[f].relation)];
    for (std::size_t t = 0; t < rel.query_templates.size(); ++t) {
      pairs.emplace_back(static_cast<int>(f), static_cast<int>(t));
    }
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pairs.begin(), pairs.end(), rng);

  KnownPromptSelection sel;
  sel.requested = n;
  for (auto [f, t] : pairs) {
    if (static_cast<int>(sel.prompts.size()) >= n) break;
    const Fact& fact = world.facts[static_cast<std::size_t>(f)];
    const auto& rel = world.relations[static_cast<std::size_t>(fact.relation)];
    TracePrompt p = make_trace_prompt(tok, rel.query_templates[static_cast<std::size_t>(t)],
                                      world.entities[static_cast<std::size_t>(fact.subject)].name,
                                      fact.object);
    SamplerConfig greedy;
    greedy.max_len = static_cast<int>(p.target.size());
    if (generate(params, p.tokens, greedy) != p.target) continue;
    const ForwardTrace tr = forward(params, p.tokens);
    p.clean_p = tr.probs(tr.length() - 1, p.correct_object());
    p.fact_index = f;
    p.template_index = t;
    sel.prompts.push_back(std::move(p));
  }
  sel.shortfall = static_cast<int>(sel.prompts.size()) < n;
  return sel;
}

const char* trace_site_name(TraceSite s) {
  switch (s) {
    case TraceSite::kHidden: return "hidden";
    case TraceSite::kMlp: return "mlp";
    case TraceSite::kAttn: return "attn";
  }
  return "?";
}

TraceSite parse_trace_site(const std::string& name) {
  if (name == "hidden") return TraceSite::kHidden;
  if (name == "mlp") return TraceSite::kMlp;
  if (name == "attn") return TraceSite::kAttn;
  fail(ErrorCode::kInvalidArgument, "unknown trace site '" + name + "' (expected hidden, mlp or attn)");
}

void TraceConfig::validate() const {
  if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) {
    fail(ErrorCode::kInvalidArgument, "trace: noise scale must be finite and >= 0");
  }
  if (n_noise_repeats < 1) fail(ErrorCode::kInvalidArgument, "trace: n_noise_repeats must be >= 1");
  if (window_width < 1) fail(ErrorCode::kInvalidArgument, "trace: window_width must be >= 1");
}

double default_noise_scale(const Parameters& params) {
  const Matrix& e = params.token_embedding;
  return 3.0 * std::sqrt(e.squaredNorm() / static_cast<double>(e.size()));
}

std::pair<int, int> restoration_window(int layer, int width, int n_layers) {
  const int lo = layer - (width - 1) / 2;
  const int hi = lo + width - 1;
  return {std::max(0, lo), std::min(n_layers - 1, hi)};
}

namespace {

InterventionSet subject_noise(const TracePrompt& prompt, int hidden, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  InterventionSet iv;
  for (int i = prompt.subject_first; i <= prompt.subject_last; ++i) {
    Vector eps(hidden);
    for (int j = 0; j < hidden; ++j) eps(j) = scale * dist(rng);
    iv.add(Site::kEmbeddingNoise, i, 0, eps);
  }
  return iv;
}

void check_prompt(const TracePrompt& p) {
  const int t = static_cast<int>(p.tokens.size());
  if (p.subject_first < 0 || p.subject_first > p.subject_last || p.subject_last >= t) {
    fail(ErrorCode::kBounds, "trace prompt: subject span out of range");
  }
  if (p.target.empty()) fail(ErrorCode::kInvalidArgument, "trace prompt: empty target");
}

}  // namespace

CorruptedRun corrupted_run(const Parameters& params, const TracePrompt& prompt, double noise_scale,
                           std::uint64_t seed) {
  check_prompt(prompt);
  if (!(noise_scale >= 0.0)) fail(ErrorCode::kInvalidArgument, "corrupted_run: noise scale must be >= 0");
  CorruptedRun run;
  run.noise = subject_noise(prompt, params.config.hidden, noise_scale, seed);
  run.trace = forward(params, prompt.tokens, run.noise);
  run.corrupted_p = run.trace.probs(run.trace.length() - 1, prompt.correct_object());
  return run;
}

const char* token_role_name(TokenRole r) {
  switch (r) {
    case TokenRole::kPrefix: return "prefix";
    case TokenRole::kFirstSubject: return "first_subject";
    case TokenRole::kMidSubject: return "mid_subject";
    case TokenRole::kLastSubject: return "last_subject";
    case TokenRole::kPostSubject: return "post_subject";
    case TokenRole::kLastToken: return "last_token";
  }
  return "?";
}

std::vector<TokenRole> token_roles(const TracePrompt& p) {
  check_prompt(p);
  const int t = static_cast<int>(p.tokens.size());
  std::vector<TokenRole> roles(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) {
    TokenRole r;
    if (i == t - 1) {
      r = TokenRole::kLastToken;
    } else if (i == p.subject_last) {
      r = TokenRole::kLastSubject;
    } else if (i == p.subject_first) {
      r = TokenRole::kFirstSubject;
    } else if (i > p.subject_first && i < p.subject_last) {
      r = TokenRole::kMidSubject;
    } else if (i > p.subject_last) {
      r = TokenRole::kPostSubject;
    } else {
      r = TokenRole::kPrefix;
    }
    roles[static_cast<std::size_t>(i)] = r;
  }
  return roles;
}

TraceGrid trace_grid(const Parameters& params, const TracePrompt& prompt, const TraceConfig& config) {
  config.validate();
  check_prompt(prompt);
  const int t = static_cast<int>(prompt.tokens.size());
  const int n_layers = params.config.n_layers;
  const int target = prompt.correct_object();
  const ForwardTrace clean = forward(params, prompt.tokens);

  TraceGrid grid;
  grid.prompt = prompt;
  grid.site = config.site;
  grid.disable_mlp = config.disable_mlp;
  grid.clean_p = clean.probs(t - 1, target);
  grid.prompt.clean_p = grid.clean_p;
  grid.roles = token_roles(prompt);
  grid.restored_p = Matrix::Zero(t, n_layers);

  for (int r = 0; r < config.n_noise_repeats; ++r) {
    const CorruptedRun run =
        corrupted_run(params, prompt, config.noise_scale, config.seed + static_cast<std::uint64_t>(r));
    grid.corrupted_p += run.corrupted_p;
    InterventionSet base = run.noise;
    if (config.disable_mlp) {
      for (int l = 0; l < n_layers; ++l) {
        base.add(Site::kMlpFreeze, prompt.subject_last, l,
                 run.trace.layers[static_cast<std::size_t>(l)].mlp_out.row(prompt.subject_last).transpose());
      }
    }
    for (int i = 0; i < t; ++i) {
      for (int l = 0; l < n_layers; ++l) {
        InterventionSet iv = base;
        if (config.site == TraceSite::kHidden) {
          iv.add(Site::kHidden, i, l, clean.hidden[static_cast<std::size_t>(l + 1)].row(i).transpose());
        } else {
          auto [lo, hi] = restoration_window(l, config.window_width, n_layers);
          for (int j = lo; j <= hi; ++j) {
            const LayerTrace& lt = clean.layers[static_cast<std::size_t>(j)];
            if (config.site == TraceSite::kMlp) {
              iv.add(Site::kMlpOut, i, j, lt.mlp_out.row(i).transpose());
            } else {
              iv.add(Site::kAttnOut, i, j, lt.attn_out.row(i).transpose());
            }
          }
        }
        const ForwardTrace tr = forward(params, prompt.tokens, iv);
        grid.restored_p(i, l) += tr.probs(t - 1, target);
      }
    }
  }
  const double n = static_cast<double>(config.n_noise_repeats);
  grid.corrupted_p /= n;
  grid.restored_p /= n;
  return grid;
}

int bucket_index(TokenRole role) {
  if (role == TokenRole::kPrefix) fail(ErrorCode::kInvalidArgument, "prefix tokens have no bucket");
  return static_cast<int>(role) - 1;
}

double AveragedGrid::bucket(TokenRole role, int layer) const {
  return effect(bucket_index(role), layer);
}

double AveragedGrid::bucket_mean(TokenRole role) const { return effect.row(bucket_index(role)).mean(); }

AveragedGrid average_grids(const std::vector<TraceGrid>& grids) {
  if (grids.empty()) fail(ErrorCode::kInvalidArgument, "average_grids: no grids");
  const Eigen::Index n_layers = grids.front().restored_p.cols();
  AveragedGrid avg;
  avg.site = grids.front().site;
  avg.disable_mlp = grids.front().disable_mlp;
  avg.n_grids = static_cast<int>(grids.size());
  avg.effect = Matrix::Zero(kBucketCount, n_layers);
  for (const auto& g : grids) {
    if (g.restored_p.cols() != n_layers) {
      fail(ErrorCode::kDimension, "average_grids: grids disagree on the layer count");
    }
    if (static_cast<std::size_t>(g.restored_p.rows()) != g.roles.size()) {
      fail(ErrorCode::kDimension, "average_grids: grid rows and role labels disagree");
    }
    Matrix sum = Matrix::Zero(kBucketCount, n_layers);
    std::array<int, kBucketCount> count{};
    for (std::size_t i = 0; i < g.roles.size(); ++i) {
      if (g.roles[i] == TokenRole::kPrefix) continue;
      const int b = bucket_index(g.roles[i]);
      for (Eigen::Index l = 0; l < n_layers; ++l) sum(b, l) += g.effect(static_cast<int>(i), static_cast<int>(l));
      ++count[static_cast<std::size_t>(b)];
    }
    for (int b = 0; b < kBucketCount; ++b) {
      if (count[static_cast<std::size_t>(b)] == 0) continue;
      avg.effect.row(b) += sum.row(b) / static_cast<double>(count[static_cast<std::size_t>(b)]);
      ++avg.support[static_cast<std::size_t>(b)];
    }
    avg.mean_clean_p += g.clean_p;
    avg.mean_corrupted_p += g.corrupted_p;
  }
  for (int b = 0; b < kBucketCount; ++b) {
    if (avg.support[static_cast<std::size_t>(b)] > 0) {
      avg.effect.row(b) /= static_cast<double>(avg.support[static_cast<std::size_t>(b)]);
    }
  }
  avg.mean_clean_p /= static_cast<double>(grids.size());
  avg.mean_corrupted_p /= static_cast<double>(grids.size());
  return avg;
}

}  // namespace romelab

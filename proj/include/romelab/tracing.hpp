#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "romelab/dataset.hpp"
#include "romelab/model.hpp"
#include "romelab/tokenizer.hpp"

namespace romelab {

struct TracePrompt {
  std::string text;            // prompt without the BOS marker
  std::vector<int> tokens;     // BOS + text
  int subject_first = 0;       // inclusive token indices into `tokens`
  int subject_last = 0;
  std::vector<int> target;     // object tokens
  double clean_p = 0.0;        // P[first object token] in the clean run
  int fact_index = -1;
  int template_index = -1;
  int correct_object() const { return target.front(); }
};

/// Builds a prompt for `subject` rendered into `tmpl`, locating the subject span.
TracePrompt make_trace_prompt(const Tokenizer& tok, const std::string& tmpl,
                              const std::string& subject, const std::string& object);

struct KnownPromptSelection {
  std::vector<TracePrompt> prompts;
  int requested = 0;
  bool shortfall = false;
};

/// Shuffles (fact, template) pairs with `seed` and keeps those whose greedy
/// continuation reproduces the object, up to `n` prompts.
KnownPromptSelection select_known_prompts(const Parameters& params, const WorldModel& world,
                                          const Tokenizer& tok, int n, std::uint64_t seed);

enum class TraceSite { kHidden, kMlp, kAttn };
const char* trace_site_name(TraceSite s);
TraceSite parse_trace_site(const std::string& name);

struct TraceConfig {
  double noise_scale = 0.1;  // standard deviation of the subject-embedding noise
  int n_noise_repeats = 10;
  int window_width = 10;     // layers restored for the mlp/attn sites
  TraceSite site = TraceSite::kHidden;
  bool disable_mlp = false;
  std::uint64_t seed = 0;    // repeat r draws noise with seed + r

  void validate() const;
};

/// 3 x RMS of the token-embedding entries.
double default_noise_scale(const Parameters& params);

/// Inclusive layer range [lo, hi] restored around `layer`, clipped to the stack.
std::pair<int, int> restoration_window(int layer, int width, int n_layers);

struct CorruptedRun {
  double corrupted_p = 0.0;
  InterventionSet noise;
  ForwardTrace trace;
};

CorruptedRun corrupted_run(const Parameters& params, const TracePrompt& prompt, double noise_scale,
                           std::uint64_t seed);

enum class TokenRole { kPrefix, kFirstSubject, kMidSubject, kLastSubject, kPostSubject, kLastToken };
constexpr int kBucketCount = 5;  // every role except kPrefix
const char* token_role_name(TokenRole r);
std::vector<TokenRole> token_roles(const TracePrompt& prompt);

struct TraceGrid {
  TracePrompt prompt;
  TraceSite site = TraceSite::kHidden;
  bool disable_mlp = false;
  double clean_p = 0.0;
  double corrupted_p = 0.0;  // mean over noise repeats
  Matrix restored_p;         // tokens x layers, mean over repeats
  std::vector<TokenRole> roles;

  double effect(int token, int layer) const { return restored_p(token, layer) - corrupted_p; }
};

TraceGrid trace_grid(const Parameters& params, const TracePrompt& prompt, const TraceConfig& config);

struct AveragedGrid {
  TraceSite site = TraceSite::kHidden;
  bool disable_mlp = false;
  int n_grids = 0;
  // Rows follow TokenRole order without kPrefix; columns are layers.
  Matrix effect;
  std::array<int, kBucketCount> support{};  // grids contributing to each bucket
  double mean_clean_p = 0.0;
  double mean_corrupted_p = 0.0;

  double bucket(TokenRole role, int layer) const;
  // Mean over layers of one bucket row.
  double bucket_mean(TokenRole role) const;
};

/// Bucket means per grid, then averaged over the grids holding each bucket.
AveragedGrid average_grids(const std::vector<TraceGrid>& grids);

int bucket_index(TokenRole role);

}  // namespace romelab

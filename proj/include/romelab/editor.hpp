#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "romelab/dataset.hpp"
#include "romelab/model.hpp"
#include "romelab/numerics.hpp"
#include "romelab/tokenizer.hpp"

namespace romelab {

struct EditRequest {
  std::string subject;
  std::string relation;
  std::string target_true;
  std::string target_new;
  std::string rewrite_prompt;  // p*, without the BOS marker
  std::string essence_prompt;  // p', "s is a"
  int layer = 0;               // l*
};

EditRequest request_from_record(const CounterfactRecord& record, int layer);

/// Index of the last subject token in `tokens` (first occurrence of the subject).
int last_subject_index(const std::vector<int>& tokens, const std::vector<int>& subject);

/// Teacher-forced log P[target tokens | prompt], with the BOS marker added.
double target_log_prob(const Parameters& params, const Tokenizer& tok, const std::string& prompt,
                       const std::string& target, const InterventionSet& iv = {});

// Keys ---------------------------------------------------------------------

struct KeyPlan {
  std::vector<std::pair<int, int>> prefixes = {{2, 20}, {5, 20}, {10, 10}};  // (length, count)
  int top_k = 5;
  std::uint64_t seed = 0;

  void validate() const;
  int total() const;
};

/// Model-generated context prefixes (BOS not included); prefix j uses seed + j.
std::vector<std::vector<int>> sample_prefixes(const Parameters& params, const KeyPlan& plan);

/// MLP key at `layer` for the last subject token of BOS + prefix + subject.
Vector subject_key(const Parameters& params, const std::vector<int>& prefix,
                   const std::vector<int>& subject, int layer);

/// Mean of subject_key over the prefixes.
Vector compute_k_star(const Parameters& params, const std::vector<int>& subject,
                      const std::vector<std::vector<int>>& prefixes, int layer);

/// Second-moment statistics of the layer's MLP keys over every token of the corpus.
CovarianceAccumulator collect_key_statistics(const Parameters& params,
                                             const std::vector<std::vector<int>>& corpus, int layer);
/// Same, for every layer in one pass over the corpus.
std::vector<CovarianceAccumulator> collect_all_key_statistics(
    const Parameters& params, const std::vector<std::vector<int>>& corpus);

// Values -------------------------------------------------------------------

struct VStarConfig {
  double lr = 0.5;
  double weight_decay = 1.5e-3;
  double kl_weight = 1e2;
  int max_steps = 25;
  double early_stop_loss = 5e-2;

  void validate() const;
};

struct VStarResult {
  Vector v_star;
  Vector initial;           // unpatched m at (t, l*)
  std::vector<double> losses;  // total loss at each evaluated iterate
  std::vector<double> nll;
  std::vector<double> kl;
  int steps = 0;           // optimizer steps taken
  Vector first_gradient;   // gradient at the initial iterate
};

struct VStarObjective {
  double loss = 0.0;
  double nll = 0.0;
  double kl = 0.0;
  Vector gradient;
};

/// NLL of o* at p* plus kl_weight * KL(p' patched || p' clean), both with
/// m^(l*) at the last subject token replaced by z.
class VStarProblem {
 public:
  VStarProblem(const Parameters& params, const Tokenizer& tok, const EditRequest& request);
  VStarObjective evaluate(const Vector& z, double kl_weight) const;
  const Vector& initial() const { return initial_; }
  int subject_token() const { return t_; }

 private:
  const Parameters& params_;
  int layer_ = 0;
  std::vector<int> rewrite_tokens_;
  std::vector<int> target_positions_;
  std::vector<int> target_ids_;
  int t_ = 0;
  std::vector<int> essence_tokens_;
  int t_essence_ = 0;
  Vector reference_;
  Vector initial_;
};

VStarResult optimize_v_star(const Parameters& params, const Tokenizer& tok, const EditRequest& request,
                            const VStarConfig& config);

// Edits --------------------------------------------------------------------

struct EditResult {
  std::string method;
  int layer = 0;
  Vector k_star;
  Vector v_star;
  Vector v;  // Lagrange factor; delta W = v u^T
  Vector u;  // C^{-1} k*
  std::vector<double> losses;
  double constraint_residual = 0.0;  // |W_hat k* - v*| / (1 + |v*|)
  double pre_p_true = 0.0, pre_p_new = 0.0;
  double post_p_true = 0.0, post_p_new = 0.0;
  bool converged = true;
  std::vector<BlockId> edited_blocks;
};

/// Replaces W_proj^(l*) with its rank-one update; nothing else changes.
EditResult apply_rome(Parameters* params, const Tokenizer& tok, const EditRequest& request,
                      const Vector& k_star, const Vector& v_star, const Matrix& c);

struct RomeConfig {
  KeyPlan key_plan;
  VStarConfig v_star;
  double ridge = -1.0;  // < 0 selects default_ridge(C)
};

/// compute_k_star + optimize_v_star + apply_rome.
EditResult rome_edit(Parameters* params, const Tokenizer& tok, const EditRequest& request,
                     const std::vector<std::vector<int>>& prefixes, const CovarianceAccumulator& stats,
                     const RomeConfig& config);

enum class FineTuneMode { kFt, kFtL, kAttnEdit };
const char* fine_tune_mode_name(FineTuneMode m);
FineTuneMode parse_fine_tune_mode(const std::string& name);

struct FineTuneSchedule {
  double lr = 5e-3;
  int max_steps = 100;
  double early_stop_loss = 0.03;
};

/// Adam on -log P[o* | p*] over W_proj^(layer) (FT, FT+L) or W_Q/W_K/W_V^(layer)
/// (AttnEdit); the constrained modes clamp every weight to [theta - eps, theta + eps].
EditResult fine_tune(Parameters* params, const Tokenizer& tok, const EditRequest& request,
                     FineTuneMode mode, double eps, const FineTuneSchedule& schedule);

}  // namespace romelab

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "romelab/dataset.hpp"
#include "romelab/model.hpp"
#include "romelab/tokenizer.hpp"

namespace romelab {

using ScorePair = std::pair<double, double>;  // (A, B)

/// Fraction of pairs with A > B (strict).
double success_score(const std::vector<ScorePair>& pairs);
/// Mean of A - B.
double magnitude_score(const std::vector<ScorePair>& pairs);

/// Entropy in bits of the relative n-gram frequencies pooled over `texts`;
/// n-grams never span two texts.
double ngram_entropy(const std::vector<std::vector<std::string>>& texts, int n);
/// (1/3) H_2 + (2/3) H_3.  Needs at least one trigram overall.
double generation_entropy(const std::vector<std::vector<std::string>>& texts);
double generation_entropy(const std::string& text);

/// Cosine similarity of unigram TF-IDF vectors of the concatenated generated
/// texts and the concatenated reference texts; idf = ln((1+N)/(1+df)) + 1 over
/// the N documents of both lists.
double reference_score(const std::vector<std::string>& generated, const std::vector<std::string>& references);

/// Mean perplexity over the texts (each scored after a BOS marker).
double essence_score(const Parameters& params, const Tokenizer& tok, const std::vector<std::string>& texts);

/// P[target | prompt] with teacher forcing over multi-token targets.
double object_probability(const Parameters& params, const Tokenizer& tok, const std::string& prompt,
                          const std::string& target);

struct GenerationConfig {
  int top_k = 5;
  int samples_per_prompt = 3;
  int max_len = 12;
  std::uint64_t seed = 0;
};

/// Sampled continuations (text only, prompt excluded); sample j of prompt i
/// uses seed + samples_per_prompt * i + j.
std::vector<std::string> generate_texts(const Parameters& params, const Tokenizer& tok,
                                        const std::vector<std::string>& prompts, const GenerationConfig& config);

enum class Metric { kES, kEM, kPS, kPM, kNS, kNM, kGE, kRS, kEssence };
constexpr int kMetricCount = 9;
const char* metric_name(Metric m);

struct RecordMetrics {
  int case_id = 0;
  std::array<double, kMetricCount> values{};
  bool has_generation = false;  // GE, RS and essence filled in

  double get(Metric m) const { return values[static_cast<std::size_t>(m)]; }
  void set(Metric m, double v) { values[static_cast<std::size_t>(m)] = v; }
};

struct EditPairs {
  std::vector<ScorePair> efficacy;      // (P[o*], P[o^c]) on p*
  std::vector<ScorePair> paraphrase;    // (P[o*], P[o^c]) on P^P
  std::vector<ScorePair> neighborhood;  // (P[o^c], P[o*]) on P^N
};

EditPairs edit_pairs(const Parameters& params, const Tokenizer& tok, const CounterfactRecord& record);

/// ES/EM/PS/PM/NS/NM, plus GE/RS/essence when `generation` is given.
RecordMetrics edit_metrics(const Parameters& params, const Tokenizer& tok, const CounterfactRecord& record,
                           const GenerationConfig* generation = nullptr);

struct MetricSummary {
  double mean = 0.0;
  double ci = 0.0;  // 95% half-width, 1.96 * sd / sqrt(n)
  int n = 0;
};

/// Mean and 95% half-width of the values. Needs at least two values.
MetricSummary summarize(const std::vector<double>& values);

struct MetricReport {
  std::string method;
  int n_records = 0;
  std::array<MetricSummary, kMetricCount> metrics{};
  bool has_generation = false;

  const MetricSummary& get(Metric m) const { return metrics[static_cast<std::size_t>(m)]; }
};

MetricReport aggregate(const std::vector<RecordMetrics>& records, const std::string& method = "");

/// One row per report; columns ES, PS, NS, EM, PM, NM, GE, RS, Essence as
/// "mean (ci)".
std::string format_table(const std::vector<MetricReport>& reports);

}  // namespace romelab

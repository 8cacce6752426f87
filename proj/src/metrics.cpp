#include "romelab/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "romelab/editor.hpp"
#include "romelab/error.hpp"

namespace romelab {

double success_score(const std::vector<ScorePair>& pairs) {
  if (pairs.empty()) fail(ErrorCode::kInvalidArgument, "success_score: empty pair set");
  std::size_t wins = 0;
  for (const auto& [a, b] : pairs) wins += a > b ? 1 : 0;
  return static_cast<double>(wins) / static_cast<double>(pairs.size());
}

double magnitude_score(const std::vector<ScorePair>& pairs) {
  if (pairs.empty()) fail(ErrorCode::kInvalidArgument, "magnitude_score: empty pair set");
  double s = 0.0;
  for (const auto& [a, b] : pairs) s += a - b;
  return s / static_cast<double>(pairs.size());
}

double ngram_entropy(const std::vector<std::vector<std::string>>& texts, int n) {
  if (n < 1) fail(ErrorCode::kInvalidArgument, "ngram_entropy: n must be >= 1");
  std::map<std::vector<std::string>, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& t : texts) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i) {
      ++counts[std::vector<std::string>(t.begin() + static_cast<std::ptrdiff_t>(i),
                                        t.begin() + static_cast<std::ptrdiff_t>(i) + n)];
      ++total;
    }
  }
  if (total == 0) fail(ErrorCode::kInvalidArgument, "ngram_entropy: text too short for the n-gram order");
  double h = 0.0;
  for (const auto& [gram, c] : counts) {
    const double f = static_cast<double>(c) / static_cast<double>(total);
    h -= f * std::log2(f);
  }
  return h == 0.0 ? 0.0 : h;  // no negative zero
}

double generation_entropy(const std::vector<std::vector<std::string>>& texts) {
  return ngram_entropy(texts, 2) / 3.0 + 2.0 * ngram_entropy(texts, 3) / 3.0;
}

double generation_entropy(const std::string& text) {
  return generation_entropy(std::vector<std::vector<std::string>>{split_words(text)});
}

double reference_score(const std::vector<std::string>& generated, const std::vector<std::string>& references) {
  if (generated.empty() || references.empty()) {
    fail(ErrorCode::kInvalidArgument, "reference_score: generated and reference texts must be nonempty");
  }
  std::map<std::string, int> df;
  const auto add_doc = [&](const std::string& text) {
    const auto words = split_words(text);
    for (const auto& w : std::set<std::string>(words.begin(), words.end())) ++df[w];
  };
  for (const auto& t : generated) add_doc(t);
  for (const auto& t : references) add_doc(t);
  const double n_docs = static_cast<double>(generated.size() + references.size());

  const auto tfidf = [&](const std::vector<std::string>& texts) {
    std::map<std::string, double> v;
    for (const auto& t : texts) for (const auto& w : split_words(t)) v[w] += 1.0;
    double norm = 0.0;
    for (auto& [w, x] : v) {
      x *= std::log((1.0 + n_docs) / (1.0 + df[w])) + 1.0;
      norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm > 0.0) for (auto& [w, x] : v) x /= norm;
    return v;
  };
  const auto g = tfidf(generated);
  const auto r = tfidf(references);
  double dot = 0.0;
  for (const auto& [w, x] : g) {
    const auto it = r.find(w);
    if (it != r.end()) dot += x * it->second;
  }
  return dot;
}

double essence_score(const Parameters& params, const Tokenizer& tok, const std::vector<std::string>& texts) {
  if (texts.empty()) fail(ErrorCode::kInvalidArgument, "essence_score: no essence texts");
  double s = 0.0;
  for (const auto& t : texts) s += perplexity(params, tok.encode_prompt(t));
  return s / static_cast<double>(texts.size());
}

double object_probability(const Parameters& params, const Tokenizer& tok, const std::string& prompt,
                          const std::string& target) {
  return std::exp(target_log_prob(params, tok, prompt, target));
}

std::vector<std::string> generate_texts(const Parameters& params, const Tokenizer& tok,
                                        const std::vector<std::string>& prompts, const GenerationConfig& config) {
  if (config.top_k < 1 || config.samples_per_prompt < 1 || config.max_len < 1) {
    fail(ErrorCode::kInvalidArgument, "generation config: top_k, samples_per_prompt and max_len must be >= 1");
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const std::vector<int> prompt = tok.encode_prompt(prompts[i]);
    for (int j = 0; j < config.samples_per_prompt; ++j) {
      SamplerConfig s;
      s.top_k = config.top_k;
      s.max_len = std::min(config.max_len, params.config.max_context - static_cast<int>(prompt.size()));
      s.seed = config.seed + static_cast<std::uint64_t>(config.samples_per_prompt) * i + static_cast<std::uint64_t>(j);
      out.push_back(s.max_len > 0 ? tok.decode(generate(params, prompt, s)) : std::string());
    }
  }
  return out;
}

const char* metric_name(Metric m) {
  static const char* names[kMetricCount] = {"ES", "EM", "PS", "PM", "NS", "NM", "GE", "RS", "Essence"};
  return names[static_cast<int>(m)];
}

EditPairs edit_pairs(const Parameters& params, const Tokenizer& tok, const CounterfactRecord& record) {
  EditPairs out;
  const auto pair_for = [&](const std::string& prompt, bool flip) {
    const double p_new = object_probability(params, tok, prompt, record.target_new);
    const double p_true = object_probability(params, tok, prompt, record.target_true);
    return flip ? ScorePair{p_true, p_new} : ScorePair{p_new, p_true};
  };
  out.efficacy.push_back(pair_for(record.rewrite_prompt, false));
  for (const auto& p : record.paraphrase_prompts) out.paraphrase.push_back(pair_for(p, false));
  for (const auto& p : record.neighborhood_prompts) out.neighborhood.push_back(pair_for(p, true));
  return out;
}

RecordMetrics edit_metrics(const Parameters& params, const Tokenizer& tok, const CounterfactRecord& record,
                           const GenerationConfig* generation) {
  const EditPairs pairs = edit_pairs(params, tok, record);
  RecordMetrics m;
  m.case_id = record.case_id;
  m.set(Metric::kES, success_score(pairs.efficacy));
  m.set(Metric::kEM, magnitude_score(pairs.efficacy));
  m.set(Metric::kPS, success_score(pairs.paraphrase));
  m.set(Metric::kPM, magnitude_score(pairs.paraphrase));
  m.set(Metric::kNS, success_score(pairs.neighborhood));
  m.set(Metric::kNM, magnitude_score(pairs.neighborhood));
  if (generation != nullptr) {
    const auto texts = generate_texts(params, tok, record.generation_prompts, *generation);
    std::vector<std::vector<std::string>> words;
    for (const auto& t : texts) words.push_back(split_words(t));
    m.set(Metric::kGE, generation_entropy(words));
    m.set(Metric::kRS, reference_score(texts, record.reference_texts));
    m.set(Metric::kEssence, essence_score(params, tok, record.essence_texts));
    m.has_generation = true;
  }
  return m;
}

MetricSummary summarize(const std::vector<double>& values) {
  if (values.size() < 2) fail(ErrorCode::kInsufficientData, "confidence interval needs at least two records");
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  MetricSummary s;
  s.mean = mean;
  s.ci = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  s.n = static_cast<int>(values.size());
  return s;
}

MetricReport aggregate(const std::vector<RecordMetrics>& records, const std::string& method) {
  if (records.size() < 2) fail(ErrorCode::kInsufficientData, "aggregate: at least two records are required");
  MetricReport r;
  r.method = method;
  r.n_records = static_cast<int>(records.size());
  r.has_generation = true;
  for (const auto& rec : records) r.has_generation = r.has_generation && rec.has_generation;
  const int n_metrics = r.has_generation ? kMetricCount : static_cast<int>(Metric::kGE);
  for (int k = 0; k < n_metrics; ++k) {
    std::vector<double> v;
    for (const auto& rec : records) v.push_back(rec.values[static_cast<std::size_t>(k)]);
    r.metrics[static_cast<std::size_t>(k)] = summarize(v);
  }
  return r;
}

std::string format_table(const std::vector<MetricReport>& reports) {
  static const Metric order[] = {Metric::kES, Metric::kPS, Metric::kNS, Metric::kEM, Metric::kPM,
                                 Metric::kNM, Metric::kGE, Metric::kRS, Metric::kEssence};
  std::ostringstream out;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-10s", "Method");
  out << buf;
  for (Metric m : order) {
    std::snprintf(buf, sizeof buf, " %17s", metric_name(m));
    out << buf;
  }
  out << '\n';
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%-10s", r.method.c_str());
    out << buf;
    for (Metric m : order) {
      const bool gen = m == Metric::kGE || m == Metric::kRS || m == Metric::kEssence;
      if (gen && !r.has_generation) {
        std::snprintf(buf, sizeof buf, " %17s", "-");
      } else {
        const MetricSummary& s = r.get(m);
        const bool pct = m == Metric::kES || m == Metric::kPS || m == Metric::kNS || m == Metric::kEM ||
                         m == Metric::kPM || m == Metric::kNM;
        const double scale = pct ? 100.0 : 1.0;
        std::snprintf(buf, sizeof buf, " %8.2f (%6.2f)", s.mean * scale, s.ci * scale);
      }
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace romelab

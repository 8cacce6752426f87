// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--root DIR] [--keep]
//
// Without --root the run uses a temporary directory (or $ROMELAB_OUTPUT_ROOT/acceptance
// when that variable is set) and removes it afterwards unless --keep is given.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <map>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "romelab/error.hpp"
#include "romelab/metrics.hpp"
#include "romelab/numerics.hpp"
#include "romelab/pipeline.hpp"
#include "support/kkt_oracle.hpp"
#include "support/random.hpp"

using namespace romelab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

int failures = 0;

// `prior_s` is time already spent on pipeline stages this criterion depends on.
void criterion(int id, const char* name, double budget_s, const std::function<Outcome()>& fn, double prior_s = 0.0) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  const double secs = prior_s + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_s > 0 && secs > budget_s) {
    o.pass = false;
    o.detail += "; over the " + fmt("%.0f", budget_s) + " s budget";
  }
  failures += o.pass ? 0 : 1;
  std::printf("[%s] criterion %2d  %-34s %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
  std::fflush(stdout);
}

// 1 ------------------------------------------------------------------------

Outcome constrained_ls() {
  std::mt19937_64 rng(1);
  double worst = 0.0, worst_residual = 0.0;
  for (int i = 0; i < 20; ++i) {
    const int d = 2 + static_cast<int>(rng() % 7);
    const int n = d + static_cast<int>(rng() % static_cast<unsigned>(33 - d));
    const int h = 1 + static_cast<int>(rng() % 8);
    const Matrix k = testing::random_matrix(d, n, 100 + i);
    const Matrix w = testing::random_matrix(h, d, 200 + i);
    const Vector ks = testing::random_vector(d, 300 + i);
    const Vector vs = testing::random_vector(h, 400 + i);
    const RankOneUpdate up = rank_one_update(w, k * k.transpose(), ks, vs);
    const Matrix oracle = testing::constrained_ls_oracle(k, w * k, ks, vs);
    worst = std::max(worst, relative_frobenius(up.w_hat, oracle));
    worst_residual = std::max(worst_residual, (up.w_hat * ks - vs).norm() / vs.norm());
  }
  return {worst <= 1e-8 && worst_residual <= 1e-8,
          "max rel. Frobenius " + fmt("%.2e", worst) + ", max residual " + fmt("%.2e", worst_residual)};
}

// 2 ------------------------------------------------------------------------

Outcome scaling() {
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const Matrix k = testing::random_matrix(6, 20, 500 + i);
    const Matrix c = k * k.transpose();
    const Matrix w = testing::random_matrix(5, 6, 600 + i);
    const Vector ks = testing::random_vector(6, 700 + i);
    const Vector vs = testing::random_vector(5, 800 + i);
    const Matrix ref = rank_one_update(w, c, ks, vs).w_hat;
    for (double a : {1e-3, 1.0, 1e3}) worst = std::max(worst, relative_frobenius(rank_one_update(w, a * c, ks, vs).w_hat, ref));
  }
  return {worst <= 1e-10, "max rel. difference " + fmt("%.2e", worst)};
}

// 3 ------------------------------------------------------------------------

Parameters probe_model(std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden = 16;
  c.mlp_dim = 32;
  c.n_heads = 4;
  c.vocab_size = 13;
  c.max_context = 8;
  Parameters p = Parameters::init(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n01;
  for (BlockId id : all_blocks(c)) {
    const bool gain = id.kind == BlockKind::kLnAttnGain || id.kind == BlockKind::kLnMlpGain ||
                      id.kind == BlockKind::kFinalGain;
    for (double& x : block_span(p, id)) x = gain ? 1.0 + 0.3 * n01(rng) : 0.4 * n01(rng);
  }
  return p;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

Outcome gradients() {
  const Parameters p = probe_model(3);
  const std::vector<int> seq = {0, 3, 7, 2, 9, 4, 1};
  const double h = 1e-5;
  std::mt19937_64 rng(4);
  double worst_act = 0.0, worst_par = 0.0;
  for (int probe = 0; probe < 50; ++probe) {
    LossSpec spec;
    if (probe % 2 == 0) {
      spec.positions = {5, 6};
      spec.targets = {static_cast<int>(rng() % 13), static_cast<int>(rng() % 13)};
    } else {
      spec.kind = LossSpec::Kind::kKl;
      spec.position = 6;
      spec.reference = softmax(testing::random_vector(13, 900 + probe));
    }
    const ActivationSite site{static_cast<int>(rng() % 2), static_cast<int>(rng() % 7)};
    const int i = static_cast<int>(rng() % 16);
    const ActivationGradient g = grad_wrt_activation(p, seq, site, spec);
    const Vector z0 = forward(p, seq).layers[static_cast<std::size_t>(site.layer)].mlp_out.row(site.token).transpose();
    Vector zp = z0, zm = z0;
    zp(i) += h;
    zm(i) -= h;
    const double fd = (grad_wrt_activation(p, seq, site, spec, zp).loss - grad_wrt_activation(p, seq, site, spec, zm).loss) / (2 * h);
    worst_act = std::max(worst_act, rel_err(g.gradient(i), fd));
  }
  Parameters q = p;
  const std::vector<LmExample> batch = {{seq, 1}, {{0, 5, 5, 10, 3}, 2}};
  const ParamSelector all = ParamSelector::all(q.config);
  const ParamGradient g = grad_wrt_params(q, batch, all);
  const auto blocks = all.blocks();
  const auto loss = [&] { return grad_wrt_params(q, batch, ParamSelector::none(q.config)).loss; };
  for (int probe = 0; probe < 50; ++probe) {
    const BlockId id = blocks[rng() % blocks.size()];
    auto span = block_span(q, id);
    const std::size_t j = rng() % span.size();
    const double saved = span[j];
    span[j] = saved + h;
    const double lp = loss();
    span[j] = saved - h;
    const double lm = loss();
    span[j] = saved;
    worst_par = std::max(worst_par, rel_err(block_span(g.grads, id)[j], (lp - lm) / (2 * h)));
  }
  return {worst_act <= 1e-4 && worst_par <= 1e-4,
          "max rel. error activation " + fmt("%.1e", worst_act) + ", parameters " + fmt("%.1e", worst_par)};
}

// Shared trained run -------------------------------------------------------

struct Run {
  ExperimentConfig config;
  Json hidden, hidden_disabled, mlp;
  Json reports;  // method -> report JSON
  std::map<std::string, double> seconds;  // stage -> wall time

  double time(std::initializer_list<const char*> stages) const {
    double t = 0.0;
    for (const char* s : stages) t += seconds.count(s) ? seconds.at(s) : 0.0;
    return t;
  }
};

std::string prompt_file(const std::string& dir, int i) {
  char name[32];
  std::snprintf(name, sizeof name, "/prompt_%04d.json", i);
  return dir + name;
}

double bucket(const Json& summary, TokenRole role, int layer) {
  const Json avg = read_json(summary.at("directory").get<std::string>() + "/averaged.json");
  return avg.at("buckets").at(token_role_name(role)).at("effect").at(static_cast<std::size_t>(layer)).get<double>();
}

double metric(const Run& r, const char* method, const char* m) {
  return r.reports.at(method).at("metrics").at(m).at("mean").get<double>();
}

// 4 ------------------------------------------------------------------------

Outcome trace_exactness(const Run& r) {
  ExperimentConfig c = r.config;
  c.trace.noise_scale = 0.0;
  c.paths.traces = "traces_zero_noise";
  double max_abs = 0.0;
  int prompts = 0;
  for (TraceSite site : {TraceSite::kHidden, TraceSite::kMlp, TraceSite::kAttn}) {
    const Json s = cmd_trace(c, {site, false, 20});
    for (int i = 0; i < s.at("prompts").get<int>(); ++i) {
      const TraceGrid g = trace_grid_from_json(read_json(prompt_file(s.at("directory").get<std::string>(), i)));
      for (int t = 0; t < g.restored_p.rows(); ++t) {
        for (int l = 0; l < g.restored_p.cols(); ++l) max_abs = std::max(max_abs, std::abs(g.effect(t, l)));
      }
      ++prompts;
    }
  }
  double worst = 0.0;
  const std::string dir = r.hidden.at("directory").get<std::string>();
  const int n = r.hidden.at("prompts").get<int>();
  for (int i = 0; i < n; ++i) {
    const TraceGrid g = trace_grid_from_json(read_json(prompt_file(dir, i)));
    worst = std::max(worst, std::abs(g.restored_p(g.restored_p.rows() - 1, g.restored_p.cols() - 1) - g.clean_p));
  }
  return {max_abs == 0.0 && worst <= 1e-12,
          "nu=0 max |effect| " + fmt("%.1e", max_abs) + " over " + std::to_string(prompts) +
              " grids; last-cell restoration error " + fmt("%.1e", worst) + " over " + std::to_string(n) + " prompts"};
}

// 5 ------------------------------------------------------------------------

Outcome localization(const Run& r) {
  const double last = r.mlp.at("bucket_means").at("last_subject").get<double>();
  const double post = r.mlp.at("bucket_means").at("post_subject").get<double>();
  const int n = r.mlp.at("prompts").get<int>();
  const bool pass = n >= 100 && last > 0 && last >= 2.0 * post;
  return {pass, "last subject " + fmt("%.4f", last) + " vs post-subject " + fmt("%.4f", post) + " (window " +
                    std::to_string(r.mlp.at("window_width").get<int>()) + ", " + std::to_string(n) + " prompts)"};
}

// 6 ------------------------------------------------------------------------

Outcome mlp_disable(const Run& r) {
  const int L = r.config.model.n_layers;
  const int q = std::max(1, L / 4);
  double low_plain = 0, low_dis = 0, high_plain = 0, high_dis = 0;
  for (int l = 0; l < q; ++l) {
    low_plain += bucket(r.hidden, TokenRole::kLastSubject, l) / q;
    low_dis += bucket(r.hidden_disabled, TokenRole::kLastSubject, l) / q;
    high_plain += bucket(r.hidden, TokenRole::kLastSubject, L - 1 - l) / q;
    high_dis += bucket(r.hidden_disabled, TokenRole::kLastSubject, L - 1 - l) / q;
  }
  const double fall = 1.0 - low_dis / low_plain;
  // The top layer at a subject token has no downstream path, so both effects can be exactly zero.
  const double change = high_dis == high_plain ? 0.0 : std::abs(high_dis - high_plain) / std::abs(high_plain);
  return {fall >= 0.5 && change < 0.2,
          "bottom quartile " + fmt("%.4f", low_plain) + " -> " + fmt("%.4f", low_dis) + " (fall " + fmt("%.0f%%", 100 * fall) +
              "), top quartile " + fmt("%.4f", high_plain) + " -> " + fmt("%.4f", high_dis) + " (change " +
              fmt("%.0f%%", 100 * change) + ")"};
}

// 7 ------------------------------------------------------------------------

Outcome efficacy(const Run& r) {
  const ExperimentConfig& c = r.config;
  const Parameters base = load_checkpoint(c.path(c.paths.checkpoint)).params;
  const int layer = resolve_edit_layer(c);
  double p_new = 0, p_true = 0, worst_rank = 0;
  int n = 0, nonlocal = 0;
  for (int i = 0; i < c.n_records; ++i) {
    char stem[64];
    std::snprintf(stem, sizeof stem, "/rome/case_%04d", i);
    const std::string path = c.path(c.paths.edits) + stem;
    if (!fs::exists(path + ".ckpt.json")) continue;
    const Json res = read_json(path + ".result.json");
    p_new += res.at("post_p_new").get<double>();
    p_true += res.at("post_p_true").get<double>();
    const Parameters edited = load_checkpoint(path + ".ckpt.json").params;
    for (BlockId id : all_blocks(base.config)) {
      const bool target = id.kind == BlockKind::kMlpProj && id.layer == layer;
      const auto a = block_span(base, id);
      const auto b = block_span(edited, id);
      if (!target && !std::equal(a.begin(), a.end(), b.begin())) ++nonlocal;
    }
    const Matrix dw = edited.layers[static_cast<std::size_t>(layer)].w_proj - base.layers[static_cast<std::size_t>(layer)].w_proj;
    const Vector s = Eigen::JacobiSVD<Matrix>(dw).singularValues();
    if (s(0) > 0) worst_rank = std::max(worst_rank, s(1) / s(0));
    ++n;
  }
  p_new /= n;
  p_true /= n;
  const double es = metric(r, "rome", "ES");
  const bool pass = n == c.n_records && es >= 0.95 && p_new > p_true && nonlocal == 0 && worst_rank <= 1e-8;
  return {pass, "ES " + fmt("%.3f", es) + ", mean P[o*] " + fmt("%.3f", p_new) + " vs P[o^c] " + fmt("%.3f", p_true) +
                    "; " + std::to_string(n) + " edits, other blocks changed " + std::to_string(nonlocal) +
                    ", max s2/s1 " + fmt("%.1e", worst_rank)};
}

// 8, 9 ---------------------------------------------------------------------

Outcome ordering(const Run& r) {
  const double ns_rome = metric(r, "rome", "NS"), ns_ft = metric(r, "ft", "NS");
  const double ps_rome = metric(r, "rome", "PS"), ps_ftl = metric(r, "ft+l", "PS");
  return {ns_rome >= ns_ft && ps_rome >= ps_ftl, "NS rome " + fmt("%.3f", ns_rome) + " vs ft " + fmt("%.3f", ns_ft) +
                                                     "; PS rome " + fmt("%.3f", ps_rome) + " vs ft+l " + fmt("%.3f", ps_ftl)};
}

Outcome knowing_vs_saying(const Run& r) {
  const double ps_rome = metric(r, "rome", "PS"), ps_attn = metric(r, "attnedit", "PS");
  const double es_rome = metric(r, "rome", "ES"), es_attn = metric(r, "attnedit", "ES");
  return {ps_rome > ps_attn && es_rome >= 0.9 && es_attn >= 0.9,
          "PS rome " + fmt("%.3f", ps_rome) + " vs attnedit " + fmt("%.3f", ps_attn) + "; ES rome " + fmt("%.3f", es_rome) +
              ", attnedit " + fmt("%.3f", es_attn)};
}

// 10 -----------------------------------------------------------------------

Outcome metric_fixtures(const Run& r) {
  int bad = 0, total = 0;
  const auto check = [&](bool ok) {
    ++total;
    bad += ok ? 0 : 1;
  };
  const auto near = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };

  // Success and magnitude scores.
  check(success_score({{0.9, 0.1}, {0.2, 0.3}}) == 0.5);
  check(near(magnitude_score({{0.9, 0.1}, {0.2, 0.3}}), 0.35, 1e-15));
  check(success_score({{0.4, 0.4}, {0.1, 0.1}}) == 0.0 && magnitude_score({{0.4, 0.4}, {0.1, 0.1}}) == 0.0);
  {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u;
    std::vector<ScorePair> pairs;
    for (int i = 0; i < 1000; ++i) pairs.emplace_back(u(rng), u(rng));
    double wins = 0, diff = 0;
    for (const auto& [a, b] : pairs) {
      wins += a > b;
      diff += a - b;
    }
    check(near(success_score(pairs), wins / 1000, 1e-15) && near(magnitude_score(pairs), diff / 1000, 1e-15));
  }
  // Generation entropy.
  check(near(generation_entropy(std::vector<std::vector<std::string>>{
                 {"a", "b", "c"}, {"b", "c", "d"}, {"c", "d", "a"}, {"d", "a", "b"}}),
             2.0, 1e-12));
  check(generation_entropy("x x x x x") == 0.0);
  {
    std::mt19937_64 rng(12);
    std::vector<std::string> words;
    for (int i = 0; i < 300; ++i) words.push_back(std::string(1, static_cast<char>('a' + rng() % 5)));
    const auto entropy = [&](int n) {
      std::map<std::string, double> counts;
      for (std::size_t i = 0; i + n <= words.size(); ++i) {
        std::string key;
        for (int j = 0; j < n; ++j) key += words[i + static_cast<std::size_t>(j)] + "|";
        counts[key] += 1;
      }
      const double total_n = static_cast<double>(words.size() - static_cast<std::size_t>(n) + 1);
      double h = 0;
      for (const auto& [k, v] : counts) h -= v / total_n * std::log2(v / total_n);
      return h;
    };
    check(near(generation_entropy(std::vector<std::vector<std::string>>{words}), entropy(2) / 3 + 2 * entropy(3) / 3, 1e-12));
  }
  // Reference score.
  check(near(reference_score({"the cat sat"}, {"the cat sat"}), 1.0, 1e-12));
  check(reference_score({"alpha beta"}, {"gamma delta"}) == 0.0);
  {
    // Documents "a b" and "a c": df(a)=2, df(b)=df(c)=1, N=2.
    const double idf_a = std::log(3.0 / 3.0) + 1, idf_b = std::log(3.0 / 2.0) + 1;
    const double expected = idf_a * idf_a / (idf_a * idf_a + idf_b * idf_b);
    check(near(reference_score({"a b"}, {"a c"}), expected, 1e-12));
  }
  // Essence: unedited baseline, uniform model, direct likelihood.
  {
    const Checkpoint ck = load_checkpoint(r.config.path(r.config.paths.checkpoint));
    const Tokenizer tok = tokenizer_from_json(ck.tokenizer);
    const WorldModel world = world_from_json(read_json(r.config.path(r.config.paths.world)).at("world"));
    const std::vector<std::string> texts = world.description(0);
    check(essence_score(ck.params, tok, texts) == essence_score(ck.params, tok, texts));
    double direct = 0;
    for (const auto& t : texts) {
      const auto ids = tok.encode_prompt(t);
      const ForwardTrace tr = forward(ck.params, ids);
      double lp = 0;
      for (std::size_t i = 1; i < ids.size(); ++i) lp += std::log(tr.distribution(static_cast<int>(i) - 1)(ids[i]));
      direct += std::exp(-lp / static_cast<double>(ids.size() - 1));
    }
    check(near(essence_score(ck.params, tok, texts), direct / texts.size(), 1e-9 * direct));
    Parameters uniform = ck.params;
    for (double& x : block_span(uniform, {BlockKind::kFinalGain, -1})) x = 0.0;
    for (double& x : block_span(uniform, {BlockKind::kFinalBias, -1})) x = 0.0;
    check(near(essence_score(uniform, tok, texts), tok.size(), 1e-9 * tok.size()));
  }
  // Aggregation.
  {
    RecordMetrics a, b;
    a.set(Metric::kES, 0.0);
    b.set(Metric::kES, 1.0);
    const MetricReport two = aggregate({a, b});
    check(two.get(Metric::kES).mean == 0.5 && near(two.get(Metric::kES).ci, 1.96 * 0.5, 1e-15));
    const MetricReport same = aggregate({a, a, a});
    check(same.get(Metric::kES).ci == 0.0);
    std::mt19937_64 rng(13);
    std::normal_distribution<double> n01;
    std::vector<RecordMetrics> many(1000);
    double s = 0, ss = 0;
    for (auto& m : many) {
      m.set(Metric::kNM, n01(rng));
      s += m.get(Metric::kNM);
    }
    const double mean = s / 1000;
    for (const auto& m : many) ss += (m.get(Metric::kNM) - mean) * (m.get(Metric::kNM) - mean);
    const MetricSummary got = aggregate(many).get(Metric::kNM);
    check(near(got.mean, mean, 1e-12) && near(got.ci, 1.96 * std::sqrt(ss / 999) / std::sqrt(1000.0), 1e-12));
  }
  return {bad == 0, std::to_string(total - bad) + "/" + std::to_string(total) + " fixtures"};
}

// 11 -----------------------------------------------------------------------

ExperimentConfig small_config(const std::string& root) {
  ExperimentConfig c;
  c.model.n_layers = 2;
  c.model.hidden = 16;
  c.model.mlp_dim = 32;
  c.model.n_heads = 2;
  c.train.max_epochs = 6;
  c.train.eval_every = 3;
  c.train.lr = 1e-2;
  c.n_records = 6;
  c.trace_prompts = 6;
  c.trace.n_noise_repeats = 2;
  c.generation.max_len = 6;
  c.output_root = root;
  return c;
}

void pipeline(const ExperimentConfig& c) {
  cmd_world(c);
  cmd_train(c);
  cmd_trace(c, {TraceSite::kHidden, false, -1});
  cmd_trace(c, {TraceSite::kMlp, false, -1});
  for (EditMethod m : {EditMethod::kRome, EditMethod::kFt, EditMethod::kFtL, EditMethod::kAttnEdit}) {
    cmd_edit(c, m);
    cmd_eval(c, edit_method_name(m));
  }
  cmd_eval(c, "none");
}

Outcome determinism(const std::string& root) {
  const ExperimentConfig a = small_config(root + "/determinism_a");
  const ExperimentConfig b = small_config(root + "/determinism_b");
  pipeline(a);
  pipeline(b);
  int files = 0, differ = 0;
  std::string first;
  for (const auto& e : fs::recursive_directory_iterator(a.output_root)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a.output_root);
    const fs::path other = fs::path(b.output_root) / rel;
    ++files;
    if (!fs::exists(other) || read_file(e.path().string()) != read_file(other.string())) {
      if (differ++ == 0) first = rel.string();
    }
  }
  int b_files = 0;
  for (const auto& e : fs::recursive_directory_iterator(b.output_root)) b_files += e.is_regular_file() ? 1 : 0;
  return {differ == 0 && files == b_files && files > 0,
          std::to_string(files) + " artifacts compared, " + std::to_string(differ) + " differ" +
              (first.empty() ? "" : " (first: " + first + ")")};
}

}  // namespace

int main(int argc, char** argv) {
  std::string root;
  bool keep = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--keep") {
      keep = true;
    } else if (a == "--root" && i + 1 < argc) {
      root = argv[++i];
      keep = true;
    } else {
      std::fprintf(stderr, "usage: acceptance [--root DIR] [--keep]\n");
      return 2;
    }
  }
  if (root.empty()) {
    const char* env = std::getenv(kOutputRootEnv);
    if (env != nullptr && *env != '\0') {
      root = (fs::path(env) / "acceptance").string();
      keep = true;
    } else {
      root = (fs::temp_directory_path() / ("romelab_acceptance_" + std::to_string(::getpid()))).string();
    }
  }
  fs::remove_all(root);

  criterion(1, "constrained-LS equivalence", 1, constrained_ls);
  criterion(2, "C-scaling invariance", 1, scaling);
  criterion(3, "gradient suite", 60, gradients);

  // Main run on the default configuration.
  Run run;
  run.config.output_root = root + "/main";
  const auto t0 = std::chrono::steady_clock::now();
  std::string setup_error;
  const auto timed = [&](const std::string& stage, const std::function<Json()>& fn) {
    const auto s0 = std::chrono::steady_clock::now();
    Json out = fn();
    run.seconds[stage] = std::chrono::duration<double>(std::chrono::steady_clock::now() - s0).count();
    return out;
  };
  try {
    timed("world", [&] { return cmd_world(run.config); });
    const Json tr = timed("train", [&] { return cmd_train(run.config); });
    std::printf("        setup: trained %d epochs, probe accuracy %.3f\n", tr.at("epochs").get<int>(),
                tr.at("probe_accuracy").get<double>());
    run.hidden = timed("trace hidden", [&] { return cmd_trace(run.config, {TraceSite::kHidden, false, -1}); });
    run.hidden_disabled = timed("trace disabled", [&] { return cmd_trace(run.config, {TraceSite::kHidden, true, -1}); });
    run.mlp = timed("trace mlp", [&] { return cmd_trace(run.config, {TraceSite::kMlp, false, -1}); });
    run.reports["none"] = timed("eval none", [&] { return cmd_eval(run.config, "none"); });
    for (EditMethod m : {EditMethod::kRome, EditMethod::kFt, EditMethod::kFtL, EditMethod::kAttnEdit}) {
      const std::string name = edit_method_name(m);
      const Json e = timed("edit " + name, [&] { return cmd_edit(run.config, m); });
      if (e.at("failed").get<int>() > 0) std::printf("        setup: %s failed on %d records\n", name.c_str(), e.at("failed").get<int>());
      run.reports[name] = timed("eval " + name, [&] { return cmd_eval(run.config, name); });
    }
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  const double setup_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("        setup: world/train/trace/edit/eval in %.1f s%s\n", setup_s,
              setup_error.empty() ? "" : (", error: " + setup_error).c_str());

  const auto need_run = [&](const std::function<Outcome(const Run&)>& fn) {
    return [&, fn]() -> Outcome {
      if (!setup_error.empty()) return {false, "setup failed: " + setup_error};
      return fn(run);
    };
  };
  criterion(4, "trace exactness", 60, need_run(trace_exactness));
  // Stage times include building the trained model each of these depends on.
  const double model_s = run.time({"world", "train"});
  criterion(5, "localization", 600, need_run(localization), model_s + run.time({"trace mlp"}));
  criterion(6, "MLP-disable separation", 600, need_run(mlp_disable), model_s + run.time({"trace hidden", "trace disabled"}));
  criterion(7, "edit efficacy", 900, need_run(efficacy), model_s + run.time({"edit rome", "eval rome"}));
  criterion(8, "generalization/specificity order", 1800, need_run(ordering),
            model_s + run.time({"trace mlp", "edit rome", "eval rome", "edit ft", "eval ft", "edit ft+l", "eval ft+l"}));
  criterion(9, "knowing vs. saying", 1800, need_run(knowing_vs_saying),
            model_s + run.time({"trace mlp", "edit rome", "eval rome", "edit attnedit", "eval attnedit"}));
  criterion(10, "metric fixtures", 1, need_run(metric_fixtures));
  criterion(11, "determinism", 0, [&] { return determinism(root); });

  if (setup_error.empty()) {
    std::vector<MetricReport> reports;
    for (const char* m : {"none", "ft", "ft+l", "attnedit", "rome"}) {
      reports.push_back(MetricReport{});
      const Json& j = run.reports.at(m);
      MetricReport& r = reports.back();
      r.method = m;
      r.n_records = j.at("n_records").get<int>();
      r.has_generation = j.at("has_generation").get<bool>();
      for (int k = 0; k < kMetricCount; ++k) {
        const char* name = metric_name(static_cast<Metric>(k));
        if (!j.at("metrics").contains(name)) continue;
        const Json& s = j.at("metrics").at(name);
        r.metrics[static_cast<std::size_t>(k)] = {s.at("mean").get<double>(), s.at("ci").get<double>(), s.at("n").get<int>()};
      }
    }
    std::printf("\n%s", format_table(reports).c_str());
  }
  std::printf("\n%d of 11 criteria passed\n", 11 - failures);
  if (!keep) fs::remove_all(root);
  return failures == 0 ? 0 : 1;
}

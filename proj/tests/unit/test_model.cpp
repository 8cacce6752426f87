#include <doctest.h>

#include <cmath>
#include <random>

#include "romelab/error.hpp"
#include "romelab/model.hpp"
#include "support/random.hpp"

using namespace romelab;

namespace {

ModelConfig small_config(Wiring wiring = Wiring::kSerial, bool tied = true) {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden = 16;
  c.mlp_dim = 32;
  c.n_heads = 4;
  c.vocab_size = 11;
  c.max_context = 8;
  c.wiring = wiring;
  c.tie_embeddings = tied;
  return c;
}

// Every block drawn at O(1) scale so gradients are not vanishingly small.
Parameters random_params(const ModelConfig& c, std::uint64_t seed) {
  Parameters p = Parameters::init(c, seed);
  std::mt19937_64 rng(seed + 1000);
  std::normal_distribution<double> n01;
  for (BlockId id : all_blocks(c)) {
    const bool gain = id.kind == BlockKind::kLnAttnGain || id.kind == BlockKind::kLnMlpGain ||
                      id.kind == BlockKind::kFinalGain;
    for (double& x : block_span(p, id)) x = gain ? 1.0 + 0.3 * n01(rng) : 0.4 * n01(rng);
  }
  return p;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

double batch_loss(const Parameters& p, const std::vector<LmExample>& batch) {
  return grad_wrt_params(p, batch, ParamSelector::none(p.config)).loss;
}

const std::vector<int> kSeq = {0, 3, 7, 2, 9, 4, 1};

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  c.vocab_size = 1;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK_NOTHROW(small_config().validate());
}

TEST_CASE("block names round-trip") {
  const ModelConfig c = small_config(Wiring::kSerial, false);
  for (BlockId id : all_blocks(c)) {
    CHECK(parse_block_name(block_name(id), c) == id);
    auto [r, k] = block_shape(c, id);
    const Parameters p = Parameters::init(c, 1);
    CHECK(block_span(p, id).size() == static_cast<std::size_t>(r * k));
  }
}

TEST_CASE("forward: bounds and dimension errors") {
  const Parameters p = random_params(small_config(), 1);
  CHECK_THROWS_AS(forward(p, {0, 11}), Error);
  CHECK_THROWS_AS(forward(p, std::vector<int>(9, 0)), Error);
  InterventionSet bad_dim;
  bad_dim.add(Site::kHidden, 0, 0, Vector::Zero(3));
  CHECK_THROWS_AS(forward(p, {0, 1}, bad_dim), Error);
  InterventionSet bad_pos;
  bad_pos.add(Site::kMlpOut, 5, 0, Vector::Zero(16));
  try {
    forward(p, {0, 1}, bad_pos);
    FAIL("expected bounds error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kBounds);
  }
  InterventionSet dup;
  dup.add(Site::kMlpOut, 0, 0, Vector::Zero(16));
  CHECK_THROWS_AS(dup.add(Site::kMlpOut, 0, 0, Vector::Zero(16)), Error);
}

TEST_CASE("residual identity when attention and MLP outputs are zero") {
  for (Wiring w : {Wiring::kSerial, Wiring::kParallel}) {
    Parameters p = random_params(small_config(w), 2);
    for (auto& layer : p.layers) {
      layer.w_o.setZero();
      layer.w_proj.setZero();
    }
    const ForwardTrace tr = forward(p, kSeq);
    CHECK(tr.hidden.back() == tr.hidden.front());
  }
}

TEST_CASE("self-patching with clean values is a no-op") {
  const Parameters p = random_params(small_config(), 3);
  const ForwardTrace clean = forward(p, kSeq);
  InterventionSet iv;
  iv.add(Site::kHidden, 2, 0, clean.hidden[1].row(2).transpose());
  iv.add(Site::kMlpOut, 3, 1, clean.layers[1].mlp_out.row(3).transpose());
  iv.add(Site::kAttnOut, 4, 0, clean.layers[0].attn_out.row(4).transpose());
  iv.add(Site::kMlpFreeze, 1, 0, clean.layers[0].mlp_out.row(1).transpose());
  iv.add(Site::kEmbeddingNoise, 0, 0, Vector::Zero(16));
  const ForwardTrace patched = forward(p, kSeq, iv);
  CHECK(patched.logits == clean.logits);
}

TEST_CASE("causality: later tokens never affect earlier outputs") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Parameters p = random_params(small_config(seed % 2 ? Wiring::kParallel : Wiring::kSerial), seed);
    std::vector<int> a = kSeq;
    const ForwardTrace base = forward(p, a);
    for (std::size_t i = 0; i + 1 < a.size(); ++i) {
      std::vector<int> b = a;
      b[i + 1] = (b[i + 1] + 5) % 11;
      const ForwardTrace changed = forward(p, b);
      CHECK(changed.logits.topRows(static_cast<Eigen::Index>(i + 1)) ==
            base.logits.topRows(static_cast<Eigen::Index>(i + 1)));
    }
  }
}

TEST_CASE("output distributions are normalized") {
  const Parameters p = random_params(small_config(), 4);
  const ForwardTrace tr = forward(p, kSeq);
  for (int i = 0; i < tr.length(); ++i) {
    const Vector d = output_distribution(tr, i);
    CHECK(std::abs(d.sum() - 1.0) <= 1e-9);
    CHECK(d.minCoeff() >= 0.0);
  }
}

TEST_CASE("softmax") {
  Vector l(2);
  l << 0.0, std::log(3.0);
  const Vector p = softmax(l);
  CHECK(p(0) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(p(1) == doctest::Approx(0.75).epsilon(1e-15));

  const Vector r = testing::random_vector(9, 5, 3.0);
  Vector naive = r.array().exp();
  naive /= naive.sum();
  CHECK((softmax(r) - naive).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("zero final state gives a uniform distribution") {
  Parameters p = random_params(small_config(), 5);
  p.final_norm.gain.setZero();
  p.final_norm.bias.setZero();
  const ForwardTrace tr = forward(p, kSeq);
  for (int i = 0; i < tr.length(); ++i) {
    CHECK((tr.distribution(i).array() - 1.0 / 11.0).abs().maxCoeff() <= 1e-15);
  }
}

TEST_CASE("wiring distinction") {
  const ModelConfig cs = small_config(Wiring::kSerial);
  ModelConfig cp = cs;
  cp.wiring = Wiring::kParallel;
  Parameters ps = random_params(cs, 6);
  Parameters pp = ps;
  pp.config = cp;
  CHECK((forward(ps, kSeq).logits - forward(pp, kSeq).logits).cwiseAbs().maxCoeff() > 1e-6);
  for (auto* p : {&ps, &pp}) {
    for (auto& layer : p->layers) layer.w_o.setZero();
  }
  CHECK(forward(ps, kSeq).logits == forward(pp, kSeq).logits);
}

TEST_CASE("activation gradients match central finite differences") {
  const double h = 1e-5;
  for (Wiring w : {Wiring::kSerial, Wiring::kParallel}) {
    const Parameters p = random_params(small_config(w), 7);
    LossSpec nll;
    nll.positions = {5, 6};
    nll.targets = {4, 8};
    LossSpec kl;
    kl.kind = LossSpec::Kind::kKl;
    kl.position = 6;
    kl.reference = softmax(testing::random_vector(11, 3));
    for (const LossSpec* spec : {&nll, &kl}) {
      for (ActivationSite site : {ActivationSite{0, 2}, ActivationSite{1, 5}, ActivationSite{0, 6}}) {
        const ActivationGradient g = grad_wrt_activation(p, kSeq, site, *spec);
        const Vector z0 = forward(p, kSeq).layers[static_cast<std::size_t>(site.layer)]
                              .mlp_out.row(site.token).transpose();
        for (int i = 0; i < 16; ++i) {
          Vector zp = z0, zm = z0;
          zp(i) += h;
          zm(i) -= h;
          const double fd = (grad_wrt_activation(p, kSeq, site, *spec, zp).loss -
                             grad_wrt_activation(p, kSeq, site, *spec, zm).loss) /
                            (2 * h);
          CHECK(rel_err(g.gradient(i), fd) <= 1e-4);
        }
      }
    }
  }
}

TEST_CASE("activation gradient is zero past the readout position") {
  const Parameters p = random_params(small_config(), 8);
  LossSpec nll;
  nll.positions = {2};
  nll.targets = {5};
  const ActivationGradient g = grad_wrt_activation(p, kSeq, {0, 4}, nll);
  CHECK(g.gradient.isZero(0.0));
}

TEST_CASE("KL gradient vanishes at the unpatched value") {
  const Parameters p = random_params(small_config(), 9);
  LossSpec kl;
  kl.kind = LossSpec::Kind::kKl;
  kl.position = 6;
  kl.reference = forward(p, kSeq).distribution(6);
  const ActivationGradient g = grad_wrt_activation(p, kSeq, {1, 3}, kl);
  CHECK(g.loss == 0.0);
  CHECK(g.gradient.cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("parameter gradients match central finite differences") {
  const double h = 1e-5;
  const std::vector<LmExample> batch = {{kSeq, 1}, {{0, 5, 5, 10, 3}, 2}};
  for (bool tied : {true, false}) {
    for (Wiring w : {Wiring::kSerial, Wiring::kParallel}) {
      const ModelConfig c = small_config(w, tied);
      Parameters p = random_params(c, 10);
      const ParamSelector all = ParamSelector::all(c);
      const ParamGradient g = grad_wrt_params(p, batch, all);
      CHECK(g.loss == doctest::Approx(batch_loss(p, batch)).epsilon(1e-14));
      const auto blocks = all.blocks();
      std::mt19937_64 rng(static_cast<std::uint64_t>(tied) * 2 + (w == Wiring::kParallel));
      int checked = 0;
      for (int probe = 0; probe < 50; ++probe) {
        const BlockId id = blocks[rng() % blocks.size()];
        auto span = block_span(p, id);
        const std::size_t j = rng() % span.size();
        const double saved = span[j];
        span[j] = saved + h;
        const double lp = batch_loss(p, batch);
        span[j] = saved - h;
        const double lm = batch_loss(p, batch);
        span[j] = saved;
        const double fd = (lp - lm) / (2 * h);
        const double an = block_span(g.grads, id)[j];
        INFO(block_name(id), "[", j, "] analytic ", an, " fd ", fd);
        CHECK(rel_err(an, fd) <= 1e-4);
        ++checked;
      }
      CHECK(checked == 50);
    }
  }
}

TEST_CASE("restricted selectors match the full gradient") {
  const ModelConfig c = small_config();
  const Parameters p = random_params(c, 11);
  const std::vector<LmExample> batch = {{kSeq, 1}};
  const ParamGradient full = grad_wrt_params(p, batch, ParamSelector::all(c));
  for (const ParamSelector& sel :
       {ParamSelector::mlp_proj(c, 1), ParamSelector::mlp_proj(c, 0),
        ParamSelector::attention_qkv(c, 1)}) {
    const ParamGradient part = grad_wrt_params(p, batch, sel);
    for (BlockId id : sel.blocks()) {
      auto a = block_span(part.grads, id);
      auto b = block_span(full.grads, id);
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    }
  }
  const ParamGradient none = grad_wrt_params(p, batch, ParamSelector::none(c));
  for (BlockId id : all_blocks(c)) CHECK(block_span(none.grads, id).empty());
  CHECK_THROWS_AS(grad_wrt_params(p, {}, ParamSelector::all(c)), Error);
}

TEST_CASE("tied embedding gradient equals the sum of untied input and readout paths") {
  const ModelConfig tied = small_config(Wiring::kSerial, true);
  ModelConfig untied = tied;
  untied.tie_embeddings = false;
  const Parameters pt = random_params(tied, 12);
  Parameters pu = pt;
  pu.config = untied;
  pu.readout = pt.token_embedding;
  const std::vector<LmExample> batch = {{kSeq, 1}};
  const ParamGradient gt = grad_wrt_params(pt, batch, ParamSelector::all(tied));
  const ParamGradient gu = grad_wrt_params(pu, batch, ParamSelector::all(untied));
  CHECK(gt.loss == gu.loss);
  const Matrix sum = gu.grads.token_embedding + gu.grads.readout;
  CHECK((gt.grads.token_embedding - sum).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("perplexity") {
  ModelConfig c = small_config();
  c.vocab_size = 2;
  c.hidden = 4;
  c.n_heads = 2;
  Parameters p = random_params(c, 13);
  p.final_norm.gain.setZero();
  p.final_norm.bias.setZero();
  CHECK(perplexity(p, {0, 1, 1, 0, 1}) == doctest::Approx(2.0).epsilon(1e-14));

  // Constant final state aligned with token 0: probability exactly 1.
  p.token_embedding << 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0;
  p.final_norm.bias << 1000.0, 0.0, 0.0, 0.0;
  CHECK(perplexity(p, {0, 0, 0, 0}) == 1.0);

  const Parameters q = random_params(small_config(), 14);
  const std::vector<int> text = {0, 4, 2, 9, 6};
  const ForwardTrace tr = forward(q, text);
  double prod = 1.0;
  for (int i = 1; i < 5; ++i) prod *= tr.probs(i - 1, text[static_cast<std::size_t>(i)]);
  CHECK(perplexity(q, text) == doctest::Approx(std::pow(prod, -0.25)).epsilon(1e-12));
  CHECK_THROWS_AS(perplexity(q, {3}), Error);
}

TEST_CASE("sequence_log_prob is the teacher-forced sum") {
  const Parameters q = random_params(small_config(), 15);
  const std::vector<int> prompt = {0, 4, 2};
  const std::vector<int> cont = {9, 6};
  const ForwardTrace tr = forward(q, {0, 4, 2, 9});
  const double direct = std::log(tr.probs(2, 9)) + std::log(tr.probs(3, 6));
  CHECK(sequence_log_prob(q, prompt, cont) == doctest::Approx(direct).epsilon(1e-14));
}

TEST_CASE("generate") {
  const Parameters p = random_params(small_config(), 16);
  SamplerConfig greedy;
  greedy.max_len = 5;
  const std::vector<int> out = generate(p, {0, 3}, greedy);
  std::vector<int> seq = {0, 3};
  for (int n = 0; n < 5; ++n) {
    Eigen::Index arg = 0;
    forward(p, seq).probs.row(static_cast<Eigen::Index>(seq.size()) - 1).maxCoeff(&arg);
    CHECK(out[static_cast<std::size_t>(n)] == arg);
    seq.push_back(static_cast<int>(arg));
  }

  SamplerConfig s;
  s.top_k = 11;
  s.max_len = 6;
  s.seed = 42;
  CHECK(generate(p, {0}, s) == generate(p, {0}, s));
  CHECK(generate(p, std::vector<int>(8, 0), s).empty());
  CHECK_THROWS_AS(generate(p, {}, s), Error);
}

TEST_CASE("sampling frequencies match the model distribution") {
  const Parameters p = random_params(small_config(), 17);
  const std::vector<int> prompt = {0, 2};
  const Vector dist = forward(p, prompt).distribution(1);
  const int n = 10000;
  std::vector<int> counts(11, 0);
  SamplerConfig s;
  s.top_k = 11;
  s.max_len = 1;
  for (int i = 0; i < n; ++i) {
    s.seed = static_cast<std::uint64_t>(i);
    ++counts[static_cast<std::size_t>(generate(p, prompt, s).front())];
  }
  for (int v = 0; v < 11; ++v) {
    const double expected = n * dist(v);
    const double sigma = std::sqrt(n * dist(v) * (1.0 - dist(v)));
    CHECK(std::abs(counts[static_cast<std::size_t>(v)] - expected) <= 3.0 * sigma + 1e-9);
  }
}

TEST_CASE("train memorizes a repeated sequence deterministically") {
  ModelConfig c = small_config();
  const Parameters init = Parameters::init(c, 3);
  const std::vector<LmExample> corpus(4, LmExample{{0, 5, 2, 8, 3, 3, 7, 1}, 1});
  TrainSchedule sch;
  sch.max_epochs = 150;
  sch.batch_size = 2;
  sch.lr = 1e-2;
  sch.warmup_steps = 5;
  std::vector<Probe> probes;
  for (int i = 1; i < 8; ++i) {
    Probe pr;
    pr.prompt.assign(corpus[0].tokens.begin(), corpus[0].tokens.begin() + i);
    pr.target = {corpus[0].tokens[static_cast<std::size_t>(i)]};
    probes.push_back(pr);
  }
  TrainReport rep;
  const Parameters a = train(init, corpus, sch, probes, &rep);
  CHECK(rep.probe_accuracy >= 0.99);
  const Parameters b = train(init, corpus, sch, probes);
  for (BlockId id : all_blocks(c)) {
    auto x = block_span(a, id);
    auto y = block_span(b, id);
    CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
  }
  CHECK_THROWS_AS(train(init, {}, sch, probes), Error);
}

TEST_CASE("adam with zero gradient and no decay leaves parameters fixed") {
  const ModelConfig c = small_config();
  Parameters p = random_params(c, 18);
  const Parameters before = p;
  const ParamSelector sel = ParamSelector::mlp_proj(c, 0);
  AdamOptimizer adam(p, sel, {});
  adam.step(&p, zero_gradients(p, sel), 0.1);
  CHECK(p.layers[0].w_proj == before.layers[0].w_proj);
}

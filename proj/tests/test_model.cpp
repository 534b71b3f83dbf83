#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "nirvana/autodiff.hpp"
#include "nirvana/errors.hpp"
#include "nirvana/memory_rules.hpp"
#include "nirvana/model.hpp"
#include "nirvana/ops.hpp"

using namespace nirvana;
using T = Tensor<double>;

namespace {

ModelConfig tiny(std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab = 13;
  c.d_model = 16;
  c.n_layers = 3;
  c.n_prelude = 1;
  c.heads = 2;
  c.window = 3;
  c.d_trig = 4;
  c.bank_size = 2;
  c.rank = 2;
  c.seed = seed;
  return c;
}

std::vector<std::size_t> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::size_t> t(n);
  for (auto& x : t) x = rng.below(vocab);
  return t;
}

T row(const T& m, std::size_t i) {
  const std::size_t n = m.dim(1);
  return T({n}, std::vector<double>(m.values().begin() + i * n, m.values().begin() + (i + 1) * n));
}

// Every learnable scalar, independent of count_params.
std::size_t visited_scalars(const Model<double>& m) {
  std::size_t n = 0;
  for (const auto& [name, t] : m.named_params()) n += t->numel();
  return n;
}

T rms(const T& x) {
  double s = 0;
  for (double v : x.values()) s += v * v;
  const double inv = 1.0 / std::sqrt(s / double(x.numel()) + kRmsNormEps);
  T y = x;
  for (auto& v : y.values()) v *= inv;
  return y;
}

T mv(const T& a, const T& x) {
  T y({a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) y[i] += a(i, j) * x[j];
  return y;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// A model that is a single gated-delta layer plus FFN, rebuilt from the
// memory-rule library and plain loops.
T pure_gdn_oracle(const Model<double>& m, const std::vector<std::size_t>& toks) {
  const auto& c = m.cfg;
  const std::size_t d = c.d_model, dh = c.d_head();
  const auto& L = m.w.layers[0];
  std::vector<MemoryState<double>> mem;
  for (std::size_t h = 0; h < c.heads; ++h) mem.push_back(init_state<double>(RuleId::GatedDeltaNet, dh, dh));
  T out({toks.size(), c.vocab});
  for (std::size_t t = 0; t < toks.size(); ++t) {
    T x({d});
    for (std::size_t j = 0; j < d; ++j) x[j] = m.w.embed(toks[t], j);
    T hn = rms(x);
    for (std::size_t j = 0; j < d; ++j) hn[j] *= L.attn_norm[j];
    const T q = mv(L.mix.wq, hn), k = mv(L.mix.wk, hn), v = mv(L.mix.wv, hn);
    const T ga = mv(L.mix.w_alpha, hn), gb = mv(L.mix.w_beta, hn);
    for (std::size_t h = 0; h < c.heads; ++h) {
      auto unit = [&](const T& src) {
        T s({dh});
        for (std::size_t j = 0; j < dh; ++j) s[j] = src[h * dh + j];
        T n = rms(s);
        for (auto& e : n.values()) e /= std::sqrt(double(dh));
        return n;
      };
      T vh({dh});
      for (std::size_t j = 0; j < dh; ++j) vh[j] = v[h * dh + j];
      GateValues<double> g;
      g.alpha = sig(ga[h] + L.mix.c_alpha[h]);
      g.beta = sig(gb[h]);
      mem[h] = step(std::move(mem[h]), RuleId::GatedDeltaNet, unit(k), vh, g);
      const T r = read(mem[h], RuleId::GatedDeltaNet, unit(q));
      for (std::size_t j = 0; j < dh; ++j) x[h * dh + j] += r[j];
    }
    T fn = rms(x);
    for (std::size_t j = 0; j < d; ++j) fn[j] *= L.ffn_norm[j];
    T hid = mv(L.ffn_in, fn);
    for (auto& e : hid.values()) e = e * sig(e);
    const T f = mv(L.ffn_out, hid);
    for (std::size_t j = 0; j < d; ++j) x[j] += f[j];
    const T logits = mv(m.w.embed, rms(x));
    for (std::size_t j = 0; j < c.vocab; ++j) out(t, j) = logits[j];
  }
  return out;
}

}  // namespace

TEST(CountParams, ReferenceConfigItemized) {
  const auto pc = count_params(ModelConfig{});
  EXPECT_EQ(pc.total, 218296u);
  EXPECT_EQ(pc.of("embed"), 16384u);
  EXPECT_EQ(pc.of("bank"), 1088u);
  EXPECT_EQ(pc.of("norm"), 512u);
  EXPECT_EQ(pc.of("qkv"), 49152u);
  EXPECT_EQ(pc.of("gates"), 1032u);
  EXPECT_EQ(pc.of("lowrank"), 4608u);
  EXPECT_EQ(pc.of("trigger_proj"), 9216u);
  EXPECT_EQ(pc.of("theta"), 192u);
  EXPECT_EQ(pc.of("u"), 48u);
  EXPECT_EQ(pc.of("zeta"), 4992u);
  EXPECT_EQ(pc.of("ffn"), 131072u);
  std::size_t sum = 0;
  for (const auto& [g, n] : pc.items) sum += n;
  EXPECT_EQ(sum, pc.total);
}

TEST(CountParams, EmbeddingOnlyModel) {
  ModelConfig c = tiny();
  c.n_layers = 0;
  c.n_prelude = 0;
  EXPECT_EQ(count_params(c).total, c.vocab * c.d_model);
  EXPECT_EQ(visited_scalars(Model<double>::init(c)), c.vocab * c.d_model);
}

TEST(CountParams, ExtraBankBlockAddsOneMatrixAndBias) {
  ModelConfig c = tiny();
  const std::size_t base = count_params(c).total;
  c.bank_size += 1;
  EXPECT_EQ(count_params(c).total - base, c.d_trig * c.d_trig + c.d_trig);
}

TEST(CountParams, FormulaMatchesVisitor) {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    ModelConfig c;
    c.heads = 1 + rng.below(3);
    c.d_model = 8 * c.heads * (1 + rng.below(2));
    c.vocab = 2 + rng.below(20);
    c.n_layers = rng.below(4);
    c.n_prelude = rng.below(c.n_layers + 1);
    c.d_trig = 2 + rng.below(4);
    c.bank_size = 1 + rng.below(3);
    c.rank = 1 + rng.below(3);
    c.window = 1 + rng.below(4);
    EXPECT_EQ(count_params(c).total, visited_scalars(Model<double>::init(c))) << trial;
  }
}

TEST(Config, Validation) {
  ModelConfig c = tiny();
  c.n_prelude = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.d_model = 15;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.bank_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(ModelConfig::from_json(tiny().to_json()), tiny());
}

TEST(Forward, ZeroWeightsGiveUniformLogits) {
  auto m = Model<double>::init(tiny());
  for (auto& [n, t] : m.named_params()) t->fill(0.0);
  const auto logits = forward_sequence<double>({1, 2, 3, 4}, m);
  for (double v : logits.values()) EXPECT_EQ(v, 0.0);
  EXPECT_NEAR(cross_entropy(row(logits, 0), 5), std::log(double(m.cfg.vocab)), 1e-14);
}

TEST(Forward, SameSeedIsBitwiseReproducible) {
  const auto a = Model<double>::init(tiny(9));
  const auto b = Model<double>::init(tiny(9));
  const std::vector<std::size_t> toks = {3, 1, 4, 1, 5, 9, 2, 6};
  EXPECT_EQ(forward_sequence(toks, a), forward_sequence(toks, b));
  const auto c = Model<double>::init(tiny(10));
  EXPECT_NE(forward_sequence(toks, a), forward_sequence(toks, c));
}

TEST(Forward, RejectsOutOfVocabToken) {
  const auto m = Model<double>::init(tiny());
  EXPECT_THROW(forward_sequence<double>({0, 13}, m), DimensionError);
  EXPECT_THROW(forward_sequence<double>({}, m), DimensionError);
}

TEST(Forward, PureGatedDeltaMatchesRuleComposition) {
  ModelConfig c = tiny(5);
  c.n_layers = 1;
  c.n_prelude = 1;
  const auto m = Model<double>::init(c);
  Rng rng(17);
  const auto toks = random_tokens(rng, 24, c.vocab);
  EXPECT_LT(max_abs_diff(forward_sequence(toks, m), pure_gdn_oracle(m, toks)), 1e-12);
}

TEST(Forward, SingleTokenEqualsForwardToken) {
  const auto m = Model<double>::init(tiny(2));
  for (std::size_t tok = 0; tok < m.cfg.vocab; ++tok) {
    auto st = init_model_state<double>(m.cfg);
    const auto a = forward_token(st, tok, m);
    EXPECT_EQ(row(forward_sequence<double>({tok}, m), 0), a);
    EXPECT_EQ(st.position, 1u);
  }
}

TEST(Forward, CausalBitwise) {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    ModelConfig c = tiny(trial);
    c.rope_enabled = trial % 2 == 1;
    const auto m = Model<double>::init(c);
    auto toks = random_tokens(rng, 10, c.vocab);
    const auto base = forward_sequence(toks, m);
    const std::size_t j = rng.below(toks.size());
    toks[j] = (toks[j] + 1 + rng.below(c.vocab - 1)) % c.vocab;
    const auto pert = forward_sequence(toks, m);
    for (std::size_t i = 0; i < j; ++i) EXPECT_EQ(row(pert, i), row(base, i)) << trial << " row " << i;
    EXPECT_NE(row(pert, j), row(base, j));
  }
}

TEST(Forward, RepeatedTokenReachesSteadyStateOnceWindowFills) {
  // Values reach the window only through the low-rank delta, so the linear
  // memories stay empty. Rotary scores depend on relative offsets only, so
  // every layer sees a constant input once the window is full.
  ModelConfig c = tiny(3);
  c.window = 2;
  c.rope_enabled = true;
  auto m = Model<double>::init(c);
  Rng rng(31);
  for (auto& L : m.w.layers) {
    L.mix.wv.fill(0.0);
    if (L.mix.uv.numel()) L.mix.uv = rng.randn<double>(L.mix.uv.shape(), 0.5);
  }
  m.w.bank.w.fill(0.0);
  m.w.bank.b.fill(0.0);
  const auto logits = forward_sequence(std::vector<std::size_t>(12, 7), m);
  for (std::size_t t = c.window + 1; t < 12; ++t) EXPECT_LT(max_abs_diff(row(logits, t), row(logits, c.window)), 1e-9);
}

TEST(Forward, StateFootprintIsBounded) {
  const auto c = tiny();
  const auto m = Model<double>::init(c);
  auto st = init_model_state<double>(c);
  const std::size_t dh = c.d_head(), post = c.n_layers - c.n_prelude;
  const std::size_t bound = c.n_layers * c.heads * dh * dh + post * c.heads * c.window * 2 * dh;
  for (std::size_t t = 0; t < 40; ++t) {
    forward_token(st, t % c.vocab, m);
    EXPECT_LE(st.footprint(), bound);
  }
  EXPECT_EQ(st.footprint(), bound);
}

TEST(Forward, PositionOffsetIsInvisible) {
  // Exact without rotary embeddings; with them only relative offsets enter
  // the scores, so the offset survives as rounding alone.
  Rng rng(41);
  for (bool rope : {false, true}) {
    ModelConfig c = tiny(6);
    c.rope_enabled = rope;
    const auto m = Model<double>::init(c);
    const auto toks = random_tokens(rng, 8, c.vocab);
    auto s0 = init_model_state<double>(c);
    auto s1 = init_model_state<double>(c);
    s1.position = 37;
    double diff = 0;
    for (auto t : toks) diff = std::max(diff, max_abs_diff(forward_token(s0, t, m), forward_token(s1, t, m)));
    if (rope)
      EXPECT_LT(diff, 1e-12);
    else
      EXPECT_EQ(diff, 0.0);
  }
}

TEST(Forward, ShiftedWindowWithMatchedStateMatches) {
  // Evaluating tokens[s:] on a fresh state positioned at s equals a fresh
  // run on tokens[s:] when positions are not encoded.
  const auto c = tiny(8);
  const auto m = Model<double>::init(c);
  Rng rng(43);
  const auto toks = random_tokens(rng, 12, c.vocab);
  const std::vector<std::size_t> tail(toks.begin() + 5, toks.end());
  const auto fresh = forward_sequence(tail, m);
  auto st = init_model_state<double>(c);
  st.position = 5;
  for (std::size_t i = 0; i < tail.size(); ++i) EXPECT_EQ(forward_token(st, tail[i], m), row(fresh, i));
}

TEST(Generate, IncrementalMatchesFullRecompute) {
  const auto m = Model<double>::init(tiny(12));
  const std::vector<std::size_t> prompt = {1, 5, 2};
  std::vector<T> logits;
  const auto out = generate(prompt, 6, m, nullptr, &logits);
  ASSERT_EQ(out.size(), 9u);
  const auto full = forward_sequence(std::vector<std::size_t>(out.begin(), out.end() - 1), m);
  ASSERT_EQ(logits.size(), 8u);
  for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_LT(max_abs_diff(logits[i], row(full, i)), 1e-10);
  for (std::size_t i = prompt.size(); i < out.size(); ++i) EXPECT_EQ(out[i], argmax(row(full, i - 1)));
  EXPECT_EQ(generate(prompt, 6, m), out);
}

TEST(Generate, ZeroNewTokensReturnsPrompt) {
  const auto m = Model<double>::init(tiny());
  EXPECT_EQ(generate<double>({4, 2}, 0, m), (std::vector<std::size_t>{4, 2}));
  EXPECT_THROW(generate<double>({}, 2, m), DimensionError);
}

TEST(Generate, SamplingIsSeeded) {
  const auto m = Model<double>::init(tiny());
  Rng a(5), b(5);
  EXPECT_EQ(generate<double>({1}, 10, m, &a), generate<double>({1}, 10, m, &b));
}

TEST(Trigger, PreludeIgnoresTriggerParameters) {
  const auto c = tiny(14);
  const auto m = Model<double>::init(c);
  auto z = m;
  Rng rng(2);
  z.w.bank.w = rng.randn<double>(z.w.bank.w.shape());
  z.w.bank.b = rng.randn<double>(z.w.bank.b.shape());
  for (std::size_t l = c.n_prelude; l < c.n_layers; ++l) {
    auto& mx = z.w.layers[l].mix;
    for (auto* t : {&mx.tq, &mx.tk, &mx.tv, &mx.theta, &mx.u, &mx.zeta1, &mx.zeta2}) *t = rng.randn<double>(t->shape());
  }
  const std::vector<std::size_t> toks = {2, 7, 1, 8, 2, 8};
  std::vector<LayerTrace<double>> ta, tb;
  forward_sequence(toks, m, &ta);
  forward_sequence(toks, z, &tb);
  ASSERT_EQ(ta.size(), tb.size());
  bool post_differs = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].layer < c.n_prelude) {
      EXPECT_EQ(ta[i].output, tb[i].output);
      EXPECT_EQ(ta[i].alpha, tb[i].alpha);
      EXPECT_EQ(ta[i].beta, tb[i].beta);
      EXPECT_EQ(ta[i].p_in.numel(), 0u);
    } else if (ta[i].output != tb[i].output) {
      post_differs = true;
    }
  }
  EXPECT_TRUE(post_differs);
}

TEST(Trigger, FastParamsFlowLayerToLayer) {
  ModelConfig c = tiny(15);
  c.n_layers = 4;
  const auto m = Model<double>::init(c);
  Rng rng(3);
  std::vector<LayerTrace<double>> tr;
  forward_sequence(random_tokens(rng, 7, c.vocab), m, &tr);
  ASSERT_EQ(tr.size(), 7u * c.n_layers);
  const T ones = T::filled({c.bank_size}, 1.0);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const auto& r = tr[i];
    EXPECT_EQ(r.layer, i % c.n_layers);
    EXPECT_EQ(r.position, i / c.n_layers);
    if (r.layer == c.n_prelude) {
      EXPECT_EQ(r.p_in, ones);
    } else if (r.layer > c.n_prelude) {
      EXPECT_EQ(r.p_in, tr[i - 1].p_out);
      EXPECT_NE(r.p_in, ones);
    }
  }
}

TEST(Precision, F32ArgmaxAgreesWithF64) {
  const auto m64 = Model<double>::init(tiny(21));
  const auto m32 = convert_model<float>(m64);
  EXPECT_EQ(m32.cfg.precision, Precision::F32);
  Rng rng(8);
  std::size_t agree = 0, total = 0;
  for (int s = 0; s < 8; ++s) {
    const auto toks = random_tokens(rng, 64, m64.cfg.vocab);
    const auto a = forward_sequence(toks, m64);
    const auto b = forward_sequence(toks, m32);
    for (std::size_t t = 0; t < toks.size(); ++t) {
      agree += argmax(row(a, t)) == argmax(row(b.cast<double>(), t));
      ++total;
    }
  }
  EXPECT_GE(double(agree) / double(total), 0.99);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto m = Model<double>::init(tiny(30));
  const auto bytes = serialize_checkpoint(m);
  ASSERT_EQ(bytes.substr(0, 4), "NRVA");
  const auto back = deserialize_checkpoint<double>(bytes);
  EXPECT_EQ(back.cfg, m.cfg);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  const std::vector<std::size_t> toks = {1, 2, 3, 4, 5};
  EXPECT_EQ(forward_sequence(toks, back), forward_sequence(toks, m));
  EXPECT_EQ(checkpoint_precision(bytes), Precision::F64);

  const auto path = (std::filesystem::temp_directory_path() / "nirvana_test_ckpt.bin").string();
  save_checkpoint(path, convert_model<float>(m));
  const auto f = load_checkpoint<float>(path);
  EXPECT_EQ(f.w.embed, m.w.embed.cast<float>());
  EXPECT_THROW(load_checkpoint<double>(path), CheckpointError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptInputsAreRejected) {
  const auto bytes = serialize_checkpoint(Model<double>::init(tiny()));
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint<double>(bad), CheckpointError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(deserialize_checkpoint<double>(bad), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint<double>(bytes.substr(0, bytes.size() - 1)), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint<double>(bytes + '\0'), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint<double>(bytes.substr(0, 20)), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint<double>("short"), CheckpointError);
  EXPECT_THROW(load_checkpoint<double>("/nonexistent/dir/ckpt.bin"), CheckpointError);
}

TEST(Taped, LossEqualsPlainForward) {
  const auto m = Model<double>::init(tiny(33));
  Rng rng(5);
  Supervision sup;
  sup.tokens = random_tokens(rng, 9, m.cfg.vocab);
  sup.targets = random_tokens(rng, 9, m.cfg.vocab);
  sup.mask = {true, false, true, true, false, true, true, false, true};
  const auto plain = forward_sequence(sup.tokens, m);
  double want = 0;
  bool any = false;
  for (std::size_t t = 0; t < 9; ++t)
    if (sup.mask[t]) {
      const double ce = cross_entropy(row(plain, t), sup.targets[t]);
      want = any ? want + ce : ce;
      any = true;
    }
  Tape<double> tape;
  const auto tw = register_weights(tape, m);
  const TapeOps<double> ops{&tape};
  const auto loss = sequence_loss(ops, m.cfg, tw.w, sup);
  EXPECT_EQ(tape.value(loss).item(), want);
  EXPECT_EQ(sequence_loss(ValueOps<double>{}, m.cfg, m.w, sup).item(), want);
}

TEST(Taped, GradientMatchesFiniteDifferencesOnSampledScalars) {
  ModelConfig c = tiny(34);
  c.n_layers = 2;
  auto m = Model<double>::init(c);
  Rng rng(6);
  // Start away from the zero-initialized projections so every path is live.
  for (auto& [n, t] : m.named_params())
    if (std::all_of(t->values().begin(), t->values().end(), [](double v) { return v == 0.0; }))
      *t = rng.randn<double>(t->shape(), 0.3);
  Supervision sup;
  sup.tokens = random_tokens(rng, 6, c.vocab);
  sup.targets = random_tokens(rng, 6, c.vocab);
  sup.mask.assign(6, true);
  Tape<double> tape;
  const auto tw = register_weights(tape, m);
  const TapeOps<double> ops{&tape};
  const auto loss = sequence_loss(ops, c, tw.w, sup);
  const auto grads = tape.backward(loss);
  auto params = m.named_params();
  const double h = 1e-5;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& t = *params[pi].second;
    for (int s = 0; s < 3; ++s) {
      const std::size_t i = rng.below(t.numel());
      const double orig = t[i];
      t[i] = orig + h;
      const double lp = sequence_loss(ValueOps<double>{}, c, m.w, sup).item();
      t[i] = orig - h;
      const double lm = sequence_loss(ValueOps<double>{}, c, m.w, sup).item();
      t[i] = orig;
      const double fd = (lp - lm) / (2 * h);
      const double an = grads.at(tw.params[pi])[i];
      EXPECT_LT(std::abs(fd - an) / std::max(1.0, std::abs(fd)), 1e-6) << params[pi].first << "[" << i << "]";
    }
  }
}

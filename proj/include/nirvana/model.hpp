// SPDX-License-Identifier: Apache-2.0
//
// Full toy stack: tied embeddings, prelude layers running gated-delta linear
// attention only, post-prelude Nirvana layers with the fast parameters p
// carried from layer to layer for each token, pre-norm residual wiring and
// a swish FFN after every mixer.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nirvana/autodiff.hpp"
#include "nirvana/errors.hpp"
#include "nirvana/nirvana_block.hpp"
#include "nirvana/numerics.hpp"
#include "nirvana/ops.hpp"

namespace nirvana {

enum class Precision { F32, F64 };

inline const char* precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw ConfigError("precision must be f32 or f64, got '" + s + "'");
}

struct ModelConfig {
  std::size_t vocab = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_prelude = 1;
  std::size_t heads = 2;
  std::size_t window = 16;
  std::size_t d_trig = 16;
  std::size_t bank_size = 4;
  std::size_t rank = 4;
  bool rope_enabled = false;
  std::uint64_t seed = 0;
  Precision precision = Precision::F64;

  std::size_t d_head() const { return d_model / heads; }
  bool has_trigger() const { return n_layers > n_prelude; }
  bool is_prelude(std::size_t layer) const { return layer < n_prelude; }

  BlockConfig block() const {
    BlockConfig b;
    b.d_model = d_model;
    b.heads = heads;
    b.d_trig = d_trig;
    b.bank_size = bank_size;
    b.rank = rank;
    b.window = window;
    b.rope_enabled = rope_enabled;
    return b;
  }

  void validate() const {
    if (vocab == 0) throw ConfigError("vocab must be >= 1");
    if (n_prelude > n_layers) throw ConfigError("n_prelude exceeds n_layers");
    if (d_model == 0 || heads == 0 || d_model % heads != 0)
      throw ConfigError("d_model must be a positive multiple of heads");
    if (window == 0) throw ConfigError("window must be >= 1");
    if (bank_size == 0) throw ConfigError("bank size K must be >= 1");
    if (has_trigger()) block().validate();
  }

  nlohmann::json to_json() const {
    return {{"vocab", vocab},       {"d_model", d_model},     {"n_layers", n_layers},
            {"n_prelude", n_prelude}, {"heads", heads},       {"window", window},
            {"d_trig", d_trig},     {"bank_size", bank_size}, {"rank", rank},
            {"rope_enabled", rope_enabled}, {"seed", seed},   {"precision", precision_name(precision)}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab = j.at("vocab");
    c.d_model = j.at("d_model");
    c.n_layers = j.at("n_layers");
    c.n_prelude = j.at("n_prelude");
    c.heads = j.at("heads");
    c.window = j.at("window");
    c.d_trig = j.at("d_trig");
    c.bank_size = j.at("bank_size");
    c.rank = j.at("rank");
    c.rope_enabled = j.at("rope_enabled");
    c.seed = j.at("seed");
    c.precision = parse_precision(j.at("precision"));
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class V>
struct LayerWeights {
  V attn_norm;  // [d]
  MixerWeights<V> mix;
  V ffn_norm;  // [d]
  V ffn_in;    // [4d x d]
  V ffn_out;   // [d x 4d]
};

template <class V>
struct Weights {
  V embed;  // [vocab x d], shared with the LM head
  BankWeights<V> bank;
  std::vector<LayerWeights<V>> layers;
};

/// Visits every learnable tensor in canonical order with its dotted name.
/// Works on Weights<Tensor> and Weights<Var> alike.
template <class W, class F>
void for_each_param(const ModelConfig& cfg, W& w, F&& f) {
  f(std::string("embed"), w.embed);
  if (cfg.has_trigger()) {
    f(std::string("bank.w"), w.bank.w);
    f(std::string("bank.b"), w.bank.b);
  }
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    auto& m = L.mix;
    const std::string pre = "layers." + std::to_string(l) + ".";
    f(pre + "attn_norm", L.attn_norm);
    f(pre + "wq", m.wq);
    f(pre + "wk", m.wk);
    f(pre + "wv", m.wv);
    f(pre + "w_alpha", m.w_alpha);
    f(pre + "c_alpha", m.c_alpha);
    f(pre + "w_beta", m.w_beta);
    if (!cfg.is_prelude(l)) {
      f(pre + "uq", m.uq);
      f(pre + "vq", m.vq);
      f(pre + "uk", m.uk);
      f(pre + "vk", m.vk);
      f(pre + "uv", m.uv);
      f(pre + "vv", m.vv);
      f(pre + "tq", m.tq);
      f(pre + "tk", m.tk);
      f(pre + "tv", m.tv);
      f(pre + "theta", m.theta);
      f(pre + "u", m.u);
      f(pre + "zeta1", m.zeta1);
      f(pre + "zeta2", m.zeta2);
    }
    f(pre + "ffn_norm", L.ffn_norm);
    f(pre + "ffn_in", L.ffn_in);
    f(pre + "ffn_out", L.ffn_out);
  }
}

/// Component a parameter belongs to, for itemized counts and per-group
/// gradient reports.
inline std::string param_group(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  if (name == "embed") return "embed";
  if (name.rfind("bank.", 0) == 0) return "bank";
  if (leaf == "attn_norm" || leaf == "ffn_norm") return "norm";
  if (leaf == "wq" || leaf == "wk" || leaf == "wv") return "qkv";
  if (leaf == "w_alpha" || leaf == "c_alpha" || leaf == "w_beta") return "gates";
  if (leaf.size() == 2 && (leaf[0] == 'u' || leaf[0] == 'v')) return "lowrank";
  if (leaf == "tq" || leaf == "tk" || leaf == "tv") return "trigger_proj";
  if (leaf == "theta") return "theta";
  if (leaf == "u") return "u";
  if (leaf == "zeta1" || leaf == "zeta2") return "zeta";
  if (leaf == "ffn_in" || leaf == "ffn_out") return "ffn";
  return "other";
}

struct ParamCount {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> items;  // group -> scalars

  std::size_t of(const std::string& group) const {
    for (const auto& [g, n] : items)
      if (g == group) return n;
    return 0;
  }
};

/// Learnable scalars, by formula.
inline ParamCount count_params(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, H = cfg.heads, dt = cfg.d_trig, K = cfg.bank_size, r = cfg.rank;
  const std::size_t L = cfg.n_layers, post = cfg.n_layers - std::min(cfg.n_prelude, cfg.n_layers);
  const std::size_t hid = d / 8;
  ParamCount c;
  auto put = [&](const char* g, std::size_t n) {
    if (n == 0) return;
    c.items.emplace_back(g, n);
    c.total += n;
  };
  put("embed", cfg.vocab * d);
  put("bank", post > 0 ? K * (dt * dt + dt) : 0);
  put("norm", L * 2 * d);
  put("qkv", L * 3 * d * d);
  put("gates", L * (2 * H * d + H));
  put("lowrank", post * 6 * d * r);
  put("trigger_proj", post * 3 * dt * d);
  put("theta", post * d);
  put("u", post * dt);
  put("zeta", post * (hid * (2 * d + dt) + d * hid));
  put("ffn", L * 2 * 4 * d * d);
  return c;
}

/// Initial weights. Output-side projections that would perturb the
/// residual stream at step 0 (low-rank U, zeta's second layer) start at
/// zero; theta and u start at zero so eta = eta_ref/2 and t = 1/2.
template <typename Real>
Weights<Tensor<Real>> init_weights(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed, 0x5eed);
  const std::size_t d = cfg.d_model, H = cfg.heads, dt = cfg.d_trig, r = cfg.rank;
  const std::size_t hid = d / 8;
  auto mat = [&](std::size_t m, std::size_t n, double gain = 1.0) {
    return rng.randn<Real>({m, n}, gain / std::sqrt(static_cast<double>(n)));
  };
  Weights<Tensor<Real>> w;
  w.embed = mat(cfg.vocab, d);
  if (cfg.has_trigger()) {
    w.bank.w = rng.randn<Real>({cfg.bank_size * dt, dt}, 1.0 / std::sqrt(static_cast<double>(dt)));
    w.bank.b = Tensor<Real>({cfg.bank_size, dt});
  }
  const double out_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, cfg.n_layers)));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights<Tensor<Real>> L;
    L.attn_norm = Tensor<Real>::filled({d}, Real(1));
    L.ffn_norm = Tensor<Real>::filled({d}, Real(1));
    auto& m = L.mix;
    m.wq = mat(d, d);
    m.wk = mat(d, d);
    m.wv = mat(d, d, out_gain);
    m.w_alpha = mat(H, d, 0.1);
    m.w_beta = mat(H, d, 0.1);
    // Heads span short to long retention: alpha from sigmoid(2) to sigmoid(6).
    m.c_alpha = Tensor<Real>({H});
    for (std::size_t h = 0; h < H; ++h)
      m.c_alpha[h] = static_cast<Real>(H == 1 ? 4.0 : 2.0 + 4.0 * static_cast<double>(h) / static_cast<double>(H - 1));
    if (!cfg.is_prelude(l)) {
      m.uq = Tensor<Real>({d, r});
      m.uk = Tensor<Real>({d, r});
      m.uv = Tensor<Real>({d, r});
      m.vq = mat(r, d);
      m.vk = mat(r, d);
      m.vv = mat(r, d);
      m.tq = mat(dt, d);
      m.tk = mat(dt, d);
      m.tv = mat(dt, d);
      m.theta = Tensor<Real>({d});
      m.u = Tensor<Real>({dt});
      m.zeta1 = mat(hid, 2 * d + dt);
      m.zeta2 = Tensor<Real>({d, hid});
    }
    L.ffn_in = mat(4 * d, d);
    L.ffn_out = mat(d, 4 * d, out_gain);
    w.layers.push_back(std::move(L));
  }
  return w;
}

template <typename Real>
struct Model {
  ModelConfig cfg;
  Weights<Tensor<Real>> w;

  static Model init(const ModelConfig& cfg) { return {cfg, init_weights<Real>(cfg)}; }

  std::vector<std::pair<std::string, Tensor<Real>*>> named_params() {
    std::vector<std::pair<std::string, Tensor<Real>*>> out;
    for_each_param(cfg, w, [&](const std::string& n, Tensor<Real>& t) { out.emplace_back(n, &t); });
    return out;
  }
  std::vector<std::pair<std::string, const Tensor<Real>*>> named_params() const {
    std::vector<std::pair<std::string, const Tensor<Real>*>> out;
    for_each_param(cfg, w, [&](const std::string& n, const Tensor<Real>& t) { out.emplace_back(n, &t); });
    return out;
  }
};

/// Recurrent state for one sequence.
template <class V>
struct StackState {
  std::vector<LayerState<V>> layers;
  std::size_t position = 0;

  std::size_t footprint() const {
    std::size_t n = 0;
    for (const auto& l : layers) {
      for (const auto& m : l.linear) n += numel_of_state(m);
      for (const auto& buf : l.swa)
        for (const auto& [k, v] : buf) n += numel_of_state(k) + numel_of_state(v);
    }
    return n;
  }

 private:
  template <class X>
  static std::size_t numel_of_state(const X& x) {
    if constexpr (requires { x.numel(); })
      return x.numel();
    else
      return 1;
  }
};

template <typename Real>
using ModelState = StackState<Tensor<Real>>;

namespace stack {

template <class Ops>
StackState<typename Ops::V> init_state(const Ops& ops, const ModelConfig& cfg) {
  using Real = typename Ops::RealT;
  StackState<typename Ops::V> s;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerState<typename Ops::V> ls;
    if (!cfg.is_prelude(l)) ls.swa.resize(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h)
      ls.linear.push_back(ops.constant(Tensor<Real>({cfg.d_head(), cfg.d_head()})));
    s.layers.push_back(std::move(ls));
  }
  return s;
}

/// Everything a forward pass needs besides the state: weights, config and
/// constants built once per pass.
template <class Ops>
struct Runner {
  using V = typename Ops::V;
  using Real = typename Ops::RealT;

  const Ops& ops;
  const ModelConfig& cfg;
  const Weights<V>& w;
  BlockConfig bcfg;
  block::Consts<V> consts;
  V ones_p;
  V ones_d;

  Runner(const Ops& o, const ModelConfig& c, const Weights<V>& ww)
      : ops(o), cfg(c), w(ww), bcfg(c.block()), consts(block::make_consts(o, c.d_head())),
        ones_p(o.constant(Tensor<Real>::filled({c.bank_size}, Real(1)))),
        ones_d(o.constant(Tensor<Real>::filled({c.d_model}, Real(1)))) {}

  /// Logits for one token; `traces`, when given, receives one record per layer.
  V token(StackState<V>& st, std::size_t tok, std::vector<LayerTrace<Real>>* traces = nullptr) const {
    if (tok >= cfg.vocab)
      throw DimensionError("token id " + std::to_string(tok) + " outside vocab " + std::to_string(cfg.vocab));
    const Real eps = static_cast<Real>(kRmsNormEps);
    V x = ops.reshape(ops.slice(w.embed, tok, 1), {cfg.d_model});
    V p{};
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& L = w.layers[l];
      auto& ls = st.layers[l];
      const V hn = ops.rms_norm(x, L.attn_norm, eps);
      V mix{};
      LayerTrace<Real> tr;
      tr.layer = l;
      tr.position = st.position;
      if (cfg.is_prelude(l)) {
        const auto proj = block::updater_qkv(ops, hn, L.mix, false);
        V alpha{}, beta{};
        mix = block::linear_attention(ops, ls, proj, hn, L.mix, cfg.heads, consts, &alpha, &beta);
        if (traces) {
          tr.q = ops.value(proj.q);
          tr.k = ops.value(proj.k);
          tr.v = ops.value(proj.v);
          tr.alpha = ops.value(alpha);
          tr.beta = ops.value(beta);
          tr.b = ops.value(mix);
          tr.output = ops.value(mix);
        }
      } else {
        if (l == cfg.n_prelude) p = ones_p;
        auto out = block::block_forward(ops, hn, p, ls, L.mix, w.bank, bcfg, consts, st.position,
                                        traces ? &tr : nullptr);
        mix = out.v_out;
        p = out.p_out;
      }
      if (traces) traces->push_back(std::move(tr));
      x = ops.add(x, mix);
      const V f = ops.matmul(L.ffn_out, ops.swish(ops.matmul(L.ffn_in, ops.rms_norm(x, L.ffn_norm, eps))));
      x = ops.add(x, f);
    }
    ++st.position;
    return ops.matmul(w.embed, ops.rms_norm(x, ones_d, eps));
  }
};

}  // namespace stack

template <typename Real>
ModelState<Real> init_model_state(const ModelConfig& cfg) {
  return stack::init_state(ValueOps<Real>{}, cfg);
}

template <typename Real>
Tensor<Real> forward_token(ModelState<Real>& st, std::size_t token, const Model<Real>& m,
                           std::vector<LayerTrace<Real>>* traces = nullptr) {
  ValueOps<Real> ops;
  stack::Runner<ValueOps<Real>> run(ops, m.cfg, m.w);
  return run.token(st, token, traces);
}

/// Teacher-forced logits, one row per input token: [T x vocab].
template <typename Real>
Tensor<Real> forward_sequence(const std::vector<std::size_t>& tokens, const Model<Real>& m,
                              std::vector<LayerTrace<Real>>* traces = nullptr) {
  if (tokens.empty()) throw DimensionError("forward_sequence needs at least one token");
  ValueOps<Real> ops;
  stack::Runner<ValueOps<Real>> run(ops, m.cfg, m.w);
  auto st = init_model_state<Real>(m.cfg);
  Tensor<Real> out({tokens.size(), m.cfg.vocab});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto logits = run.token(st, tokens[t], traces);
    std::copy(logits.values().begin(), logits.values().end(), out.values().begin() + t * m.cfg.vocab);
  }
  return out;
}

/// Sample from softmax(logits) with one uniform draw.
template <typename Real>
std::size_t sample_categorical(const Tensor<Real>& logits, Rng& rng) {
  const auto probs = softmax(logits);
  double u = rng.uniform(), acc = 0;
  for (std::size_t i = 0; i < probs.numel(); ++i) {
    acc += static_cast<double>(probs[i]);
    if (u < acc) return i;
  }
  return probs.numel() - 1;
}

/// Prompt followed by n_new tokens, decoded incrementally from carried
/// state. Greedy unless an Rng is supplied.
template <typename Real>
std::vector<std::size_t> generate(const std::vector<std::size_t>& prompt, std::size_t n_new, const Model<Real>& m,
                                  Rng* sampler = nullptr, std::vector<Tensor<Real>>* logits_out = nullptr) {
  std::vector<std::size_t> out = prompt;
  if (n_new == 0) return out;
  if (prompt.empty()) throw DimensionError("generate needs a non-empty prompt");
  ValueOps<Real> ops;
  stack::Runner<ValueOps<Real>> run(ops, m.cfg, m.w);
  auto st = init_model_state<Real>(m.cfg);
  Tensor<Real> logits;
  for (std::size_t tok : prompt) {
    logits = run.token(st, tok);
    if (logits_out) logits_out->push_back(logits);
  }
  for (std::size_t i = 0; i < n_new; ++i) {
    const std::size_t next = sampler ? sample_categorical(logits, *sampler) : argmax(logits);
    out.push_back(next);
    if (i + 1 == n_new) break;
    logits = run.token(st, next);
    if (logits_out) logits_out->push_back(logits);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Taped evaluation

/// Weights registered as tape parameters, in for_each_param order.
template <typename Real>
struct TapedWeights {
  Weights<Var> w;
  std::vector<Var> params;
  std::vector<std::string> names;
};

template <typename Real>
TapedWeights<Real> register_weights(Tape<Real>& tape, const Model<Real>& m) {
  TapedWeights<Real> tw;
  tw.w.layers.resize(m.w.layers.size());
  std::vector<const Tensor<Real>*> src;
  for_each_param(m.cfg, m.w, [&](const std::string& n, const Tensor<Real>& t) {
    src.push_back(&t);
    tw.names.push_back(n);
  });
  std::size_t i = 0;
  for_each_param(m.cfg, tw.w, [&](const std::string& n, Var& v) {
    v = tape.parameter(*src[i++], n);
    tw.params.push_back(v);
  });
  return tw;
}

/// One supervised sequence: target[t] is the token the logits at position
/// t should predict, and only positions with weight[t] set contribute.
struct Supervision {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> targets;
  std::vector<bool> mask;

  std::size_t count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
};

/// Summed cross-entropy over supervised positions, recorded on `ops`.
template <class Ops>
typename Ops::V sequence_loss(const Ops& ops, const ModelConfig& cfg, const Weights<typename Ops::V>& w,
                              const Supervision& sup, std::vector<typename Ops::V>* logits_out = nullptr) {
  using Real = typename Ops::RealT;
  const stack::Runner<Ops> run(ops, cfg, w);
  auto st = stack::init_state(ops, cfg);
  typename Ops::V loss = ops.scalar(Real(0));
  bool any = false;
  for (std::size_t t = 0; t < sup.tokens.size(); ++t) {
    const auto logits = run.token(st, sup.tokens[t]);
    if (logits_out) logits_out->push_back(logits);
    if (t < sup.mask.size() && sup.mask[t]) {
      const auto ce = ops.cross_entropy(logits, sup.targets[t]);
      loss = any ? ops.add(loss, ce) : ce;
      any = true;
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "NRVA" | u32 version | u64 header length | header JSON | raw parameters
//
// The header holds the config, dtype and a manifest of (name, shape,
// offset) with offsets in bytes from the start of the parameter block.
// All integers and parameter values are little-endian.

inline constexpr char kCheckpointMagic[4] = {'N', 'R', 'V', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

template <typename U>
void put_le(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.append(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw CheckpointError("checkpoint truncated");
  unsigned char b[sizeof(U)];
  std::memcpy(b, in.data() + pos, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  pos += sizeof(U);
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

}  // namespace ckpt_detail

template <typename Real>
std::string serialize_checkpoint(const Model<Real>& m) {
  using namespace ckpt_detail;
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : m.named_params()) {
    manifest.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->numel() * sizeof(Real);
  }
  const nlohmann::json header = {{"config", m.cfg.to_json()},
                                 {"dtype", sizeof(Real) == 4 ? "f32" : "f64"},
                                 {"params", manifest}};
  const std::string hs = header.dump();
  std::string out(kCheckpointMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, hs.size());
  out += hs;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : m.named_params())
    for (Real v : t->values()) put_le<Real>(out, v);
  return out;
}

template <typename Real>
Model<Real> deserialize_checkpoint(const std::string& bytes) {
  using namespace ckpt_detail;
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = get_le<std::uint64_t>(bytes, pos);
  if (pos + hlen > bytes.size()) throw CheckpointError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  }
  pos += hlen;
  const std::string dtype = header.at("dtype");
  if (dtype != (sizeof(Real) == 4 ? "f32" : "f64"))
    throw CheckpointError("checkpoint dtype " + dtype + " does not match the requested precision");
  Model<Real> m;
  m.cfg = ModelConfig::from_json(header.at("config"));
  m.w = init_weights<Real>(m.cfg);
  const auto& manifest = header.at("params");
  auto params = m.named_params();
  if (manifest.size() != params.size()) throw CheckpointError("checkpoint manifest does not match config");
  const std::size_t base = pos;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    const auto& e = manifest[i];
    if (e.at("name") != name || e.at("shape").get<Shape>() != t->shape())
      throw CheckpointError("checkpoint entry " + std::to_string(i) + " does not match " + name);
    std::size_t p = base + e.at("offset").get<std::size_t>();
    for (auto& v : t->values()) v = get_le<Real>(bytes, p);
    pos = std::max(pos, p);
  }
  if (pos != bytes.size()) throw CheckpointError("trailing bytes after checkpoint data");
  return m;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("short write to " + path);
}

template <typename Real>
void save_checkpoint(const std::string& path, const Model<Real>& m) {
  write_file_bytes(path, serialize_checkpoint(m));
}

template <typename Real>
Model<Real> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint<Real>(read_file_bytes(path));
}

/// Precision recorded in a checkpoint header, without loading parameters.
inline Precision checkpoint_precision(const std::string& bytes) {
  std::size_t pos = 8;
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  const auto hlen = ckpt_detail::get_le<std::uint64_t>(bytes, pos);
  if (pos + hlen > bytes.size()) throw CheckpointError("checkpoint header truncated");
  return parse_precision(nlohmann::json::parse(bytes.substr(pos, hlen)).at("dtype"));
}

/// Same weights in another precision.
template <typename To, typename From>
Model<To> convert_model(const Model<From>& m) {
  Model<To> out;
  out.cfg = m.cfg;
  out.cfg.precision = sizeof(To) == 4 ? Precision::F32 : Precision::F64;
  out.w = init_weights<To>(out.cfg);
  auto dst = out.named_params();
  auto src = m.named_params();
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].second = src[i].second->template cast<To>();
  return out;
}

}  // namespace nirvana

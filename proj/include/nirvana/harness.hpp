// SPDX-License-Identifier: Apache-2.0
//
// Run configuration, toy trainer, evaluation and the verification drivers
// behind the CLI: gradient checks, rule oracle diffs and ablations.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nirvana/autodiff.hpp"
#include "nirvana/errors.hpp"
#include "nirvana/memory_rules.hpp"
#include "nirvana/model.hpp"
#include "nirvana/nirvana_block.hpp"
#include "nirvana/oracles.hpp"
#include "nirvana/rule_fixtures.hpp"
#include "nirvana/tasks.hpp"

namespace nirvana {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::size_t steps = 2000;
  double lr = 3e-3;
  std::size_t batch = 4;
  std::size_t eval_every = 50;
  std::size_t eval_size = 32;
  double warmup_frac = 0.05;
  double clip = 1.0;
  double weight_decay = 0.01;
  double stop_query_acc = 0;  // stop at the first eval reaching this; 0 disables
};

struct RunConfig {
  ModelConfig model;
  TaskSpec task;
  TrainConfig train;

  /// Task and model share vocab and seed.
  void sync() {
    task.vocab = model.vocab;
    task.seed = model.seed;
  }

  nlohmann::json to_json() const {
    return {{"model", model.to_json()},
            {"task",
             {{"kind", task_name(task.kind)},
              {"seq_len", task.seq_len},
              {"n_pairs", task.n_pairs},
              {"filler_entropy", task.filler_entropy}}},
            {"train",
             {{"steps", train.steps},
              {"lr", train.lr},
              {"batch", train.batch},
              {"eval_every", train.eval_every},
              {"eval_size", train.eval_size},
              {"warmup_frac", train.warmup_frac},
              {"clip", train.clip},
              {"weight_decay", train.weight_decay},
              {"stop_query_acc", train.stop_query_acc}}}};
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &used, 10);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return x;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
  if (used != v.size() || !std::isfinite(x))
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

}  // namespace config_detail

/// Sets one key. Keys are the ModelConfig, TaskSpec and TrainConfig field
/// names; anything else is an error.
inline void set_config_key(RunConfig& rc, const std::string& key, const std::string& value) {
  using namespace config_detail;
  auto& m = rc.model;
  auto& t = rc.task;
  auto& tr = rc.train;
  const std::map<std::string, std::function<void(const std::string&)>> setters = {
      {"vocab", [&](const std::string& v) { m.vocab = to_u64(key, v); }},
      {"d_model", [&](const std::string& v) { m.d_model = to_u64(key, v); }},
      {"n_layers", [&](const std::string& v) { m.n_layers = to_u64(key, v); }},
      {"n_prelude", [&](const std::string& v) { m.n_prelude = to_u64(key, v); }},
      {"heads", [&](const std::string& v) { m.heads = to_u64(key, v); }},
      {"window", [&](const std::string& v) { m.window = to_u64(key, v); }},
      {"d_trig", [&](const std::string& v) { m.d_trig = to_u64(key, v); }},
      {"bank_size", [&](const std::string& v) { m.bank_size = to_u64(key, v); }},
      {"rank", [&](const std::string& v) { m.rank = to_u64(key, v); }},
      {"rope_enabled", [&](const std::string& v) { m.rope_enabled = to_bool(key, v); }},
      {"seed", [&](const std::string& v) { m.seed = to_u64(key, v); }},
      {"precision", [&](const std::string& v) { m.precision = parse_precision(v); }},
      {"kind", [&](const std::string& v) { t.kind = parse_task_kind(v); }},
      {"seq_len", [&](const std::string& v) { t.seq_len = to_u64(key, v); }},
      {"n_pairs", [&](const std::string& v) { t.n_pairs = to_u64(key, v); }},
      {"filler_entropy", [&](const std::string& v) { t.filler_entropy = to_double(key, v); }},
      {"steps", [&](const std::string& v) { tr.steps = to_u64(key, v); }},
      {"lr", [&](const std::string& v) { tr.lr = to_double(key, v); }},
      {"batch", [&](const std::string& v) { tr.batch = to_u64(key, v); }},
      {"eval_every", [&](const std::string& v) { tr.eval_every = to_u64(key, v); }},
      {"eval_size", [&](const std::string& v) { tr.eval_size = to_u64(key, v); }},
      {"warmup_frac", [&](const std::string& v) { tr.warmup_frac = to_double(key, v); }},
      {"clip", [&](const std::string& v) { tr.clip = to_double(key, v); }},
      {"weight_decay", [&](const std::string& v) { tr.weight_decay = to_double(key, v); }},
      {"stop_query_acc", [&](const std::string& v) { tr.stop_query_acc = to_double(key, v); }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(value);
}

/// Flat `key = value` text; `#` starts a comment. Later lines win.
inline RunConfig parse_run_config(const std::string& text, RunConfig rc = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    set_config_key(rc, key, value);
  }
  rc.sync();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

/// NIRVANA_SEED and NIRVANA_PRECISION override the file.
inline void apply_env_overrides(RunConfig& rc) {
  if (const char* s = std::getenv("NIRVANA_SEED"); s && *s) rc.model.seed = config_detail::to_u64("NIRVANA_SEED", s);
  if (const char* p = std::getenv("NIRVANA_PRECISION"); p && *p) rc.model.precision = parse_precision(p);
  rc.sync();
}

// ---------------------------------------------------------------------------
// Metrics

struct RunMetrics {
  std::size_t step = 0;
  double loss = 0;        // eval cross-entropy per supervised token
  double token_acc = 0;   // next-token accuracy over every position
  double query_acc = 0;   // accuracy on supervised positions
  double train_loss = 0;  // mean training loss per supervised token since the last record
  std::optional<double> wall_ms;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"step", step},
                        {"loss", loss},
                        {"token_acc", token_acc},
                        {"query_acc", query_acc},
                        {"train_loss", train_loss}};
    if (wall_ms) j["wall_ms"] = *wall_ms;
    return j;
  }
};

struct EvalResult {
  double loss = 0;
  double token_acc = 0;
  double query_acc = 0;
  std::size_t state_footprint = 0;  // scalars in the recurrent state after the last token
  bool finite = true;
};

/// Teacher-forced evaluation on instances [first, first + count) of `spec`.
template <typename Real>
EvalResult evaluate(const Model<Real>& m, const TaskSpec& spec, std::uint64_t first, std::size_t count) {
  EvalResult r;
  double loss = 0;
  std::size_t answered = 0, correct = 0, tok_total = 0, tok_correct = 0;
  ValueOps<Real> ops;
  stack::Runner<ValueOps<Real>> run(ops, m.cfg, m.w);
  for (std::size_t n = 0; n < count; ++n) {
    const Task task = gen_task(spec, first + n);
    const Supervision sup = to_supervision(task);
    auto st = init_model_state<Real>(m.cfg);
    for (std::size_t i = 0; i < sup.tokens.size(); ++i) {
      const auto logits = run.token(st, sup.tokens[i]);
      if (i + 1 == sup.tokens.size()) break;
      const bool hit = argmax(logits) == sup.targets[i];
      ++tok_total;
      tok_correct += hit;
      if (sup.mask[i]) {
        loss += static_cast<double>(cross_entropy(logits, sup.targets[i]));
        ++answered;
        correct += hit;
      }
    }
    r.state_footprint = std::max(r.state_footprint, st.footprint());
  }
  r.loss = answered ? loss / static_cast<double>(answered) : 0.0;
  r.query_acc = answered ? static_cast<double>(correct) / static_cast<double>(answered) : 0.0;
  r.token_acc = tok_total ? static_cast<double>(tok_correct) / static_cast<double>(tok_total) : 0.0;
  r.finite = std::isfinite(r.loss);
  return r;
}

// ---------------------------------------------------------------------------
// Training

inline constexpr std::uint64_t kEvalOffset = 1ull << 40;  // eval instances never overlap training ones

struct TrainOptions {
  std::string out_dir;         // empty: write nothing
  bool record_wall = false;    // wall_ms breaks byte-reproducibility, so it is opt-in
  bool write_checkpoint = true;
  bool zero_trigger = false;   // bank starts at zero and is never updated
  std::function<void(Supervision&)> batch_hook;             // edits each training sequence
  std::function<void(const RunMetrics&)> on_metrics;        // called per record
};

template <typename Real>
struct TrainResult {
  Model<Real> model;
  std::vector<RunMetrics> metrics;
  std::size_t steps_run = 0;
  std::optional<std::size_t> reached_step;  // first eval step meeting stop_query_acc
};

namespace train_detail {

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

inline std::string summary_csv(const std::vector<RunMetrics>& ms) {
  std::ostringstream os;
  os << "step,loss,token_acc,query_acc,train_loss\n";
  for (const auto& m : ms) {
    nlohmann::json j = {m.loss, m.token_acc, m.query_acc, m.train_loss};
    os << m.step << ',' << j[0].dump() << ',' << j[1].dump() << ',' << j[2].dump() << ',' << j[3].dump() << '\n';
  }
  return os.str();
}

template <typename Real>
void dump_divergence(const Model<Real>& m, const Supervision& sup, const std::string& out_dir) {
  if (out_dir.empty()) return;
  std::vector<LayerTrace<Real>> traces;
  try {
    forward_sequence(sup.tokens, m, &traces);
  } catch (const std::exception&) {
  }
  std::ofstream out(std::filesystem::path(out_dir) / "divergence_trace.jsonl", std::ios::trunc);
  if (traces.empty()) return;
  const std::size_t last = traces.back().position;
  for (const auto& t : traces)
    if (t.position == last) out << t.to_json().dump() << '\n';
}

}  // namespace train_detail

/// AdamW on freshly generated task instances: instance step * batch + i is
/// sequence i of the step's batch. The loss is the mean cross-entropy per
/// supervised token. A step with no supervised token leaves the model
/// untouched.
template <typename Real>
TrainResult<Real> train_toy(const RunConfig& rc_in, const TrainOptions& opt = {}) {
  RunConfig rc = rc_in;
  rc.sync();
  rc.model.validate();
  check_layout(rc.task);
  const auto& tc = rc.train;
  if (tc.batch == 0) throw ConfigError("batch must be >= 1");
  if (tc.eval_every == 0) throw ConfigError("eval_every must be >= 1");

  TrainResult<Real> res{Model<Real>::init(rc.model), {}, 0, std::nullopt};
  auto& model = res.model;
  auto named = model.named_params();
  std::vector<Tensor<Real>*> params;
  std::vector<std::size_t> slot;  // position in the tape's parameter list
  std::vector<char> decay;
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [n, t] = named[i];
    const bool bank = n.rfind("bank.", 0) == 0;
    if (bank && opt.zero_trigger) {
      *t = Tensor<Real>(t->shape());
      continue;
    }
    params.push_back(t);
    slot.push_back(i);
    decay.push_back(t->rank() == 2);
  }
  // Weight decay on matrices only; span<const bool> needs real bools.
  const std::unique_ptr<bool[]> decay_mask(new bool[decay.size()]);
  for (std::size_t i = 0; i < decay.size(); ++i) decay_mask[i] = decay[i] != 0;

  AdamWState<Real> adam;
  AdamWConfig acfg;
  acfg.weight_decay = tc.weight_decay;

  std::ofstream metrics_out;
  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    metrics_out.open(std::filesystem::path(opt.out_dir) / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics_out) throw std::runtime_error("cannot write metrics to " + opt.out_dir);
  }
  const auto t0 = std::chrono::steady_clock::now();
  double loss_acc = 0;
  std::size_t loss_count = 0;

  auto record = [&](std::size_t step) {
    const auto ev = evaluate(model, rc.task, kEvalOffset, tc.eval_size);
    RunMetrics m;
    m.step = step;
    m.loss = ev.loss;
    m.token_acc = ev.token_acc;
    m.query_acc = ev.query_acc;
    m.train_loss = loss_count ? loss_acc / static_cast<double>(loss_count) : 0.0;
    if (opt.record_wall)
      m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    loss_acc = 0;
    loss_count = 0;
    res.metrics.push_back(m);
    if (metrics_out.is_open()) {
      metrics_out << m.to_json().dump() << '\n';
      metrics_out.flush();
    }
    if (opt.on_metrics) opt.on_metrics(m);
    return m;
  };

  for (std::size_t step = 0; step < tc.steps; ++step) {
    std::vector<Tensor<Real>> grads;
    for (auto* p : params) grads.emplace_back(p->shape());
    double batch_loss = 0;
    std::size_t supervised = 0;
    for (std::size_t b = 0; b < tc.batch; ++b) {
      Supervision sup = to_supervision(gen_task(rc.task, step * tc.batch + b));
      if (opt.batch_hook) opt.batch_hook(sup);
      const std::size_t n = sup.count();
      if (n == 0) continue;
      Tape<Real> tape;
      auto tw = register_weights(tape, model);
      TapeOps<Real> ops{&tape};
      const Var loss = sequence_loss(ops, rc.model, tw.w, sup);
      const double lv = static_cast<double>(tape.value(loss).item());
      if (!std::isfinite(lv)) {
        train_detail::dump_divergence(model, sup, opt.out_dir);
        throw DivergenceError("non-finite loss at step " + std::to_string(step));
      }
      batch_loss += lv;
      supervised += n;
      const auto g = tape.backward(loss);
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& gi = g[tw.params[slot[i]]];
        for (std::size_t j = 0; j < gi.numel(); ++j) grads[i][j] += gi[j];
      }
    }
    res.steps_run = step + 1;
    if (supervised > 0) {
      const Real inv = Real(1) / static_cast<Real>(supervised);
      for (auto& gt : grads)
        for (std::size_t j = 0; j < gt.numel(); ++j) gt[j] *= inv;
      clip_grad_norm<Real>(grads, tc.clip);
      acfg.lr = warmup_lr(tc.lr, step, tc.steps, tc.warmup_frac);
      adamw_step<Real>(params, grads, adam, acfg, std::span<const bool>(decay_mask.get(), decay.size()));
      loss_acc += batch_loss / static_cast<double>(supervised);
      ++loss_count;
    }
    const bool last = step + 1 == tc.steps;
    if ((step + 1) % tc.eval_every == 0 || last) {
      const auto m = record(step + 1);
      if (!std::isfinite(m.loss)) {
        train_detail::dump_divergence(model, to_supervision(gen_task(rc.task, kEvalOffset)), opt.out_dir);
        throw DivergenceError("non-finite eval loss at step " + std::to_string(step + 1));
      }
      if (tc.stop_query_acc > 0 && m.query_acc >= tc.stop_query_acc) {
        res.reached_step = step + 1;
        break;
      }
    }
  }

  if (!opt.out_dir.empty()) {
    train_detail::write_text(std::filesystem::path(opt.out_dir) / "summary.csv",
                             train_detail::summary_csv(res.metrics));
    if (opt.write_checkpoint) save_checkpoint(std::filesystem::path(opt.out_dir) / "checkpoint.bin", model);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Gradient checks

enum class GradScope { Trigger, Block, Model };

inline GradScope parse_grad_scope(const std::string& s) {
  if (s == "trigger") return GradScope::Trigger;
  if (s == "block") return GradScope::Block;
  if (s == "model") return GradScope::Model;
  throw ConfigError("unknown gradcheck scope '" + s + "' (trigger, block, model)");
}

struct GradReport {
  std::map<std::string, double> max_rel_error;  // per parameter group
  std::size_t cases = 0;
  double tol = 0;

  double worst() const {
    double w = 0;
    for (const auto& [g, e] : max_rel_error) w = std::max(w, e);
    return w;
  }
  bool pass() const { return worst() <= tol; }

  nlohmann::json to_json() const {
    return {{"cases", cases}, {"tol", tol}, {"worst", worst()}, {"pass", pass()}, {"groups", max_rel_error}};
  }
};

/// Test fixture hook: receives each analytic gradient before comparison.
using GradCorruption = std::function<void(const std::string& group, Tensor<double>& grad)>;

namespace gradcheck_detail {

inline void note(GradReport& r, const std::string& group, double err) {
  auto& e = r.max_rel_error[group];
  e = std::max(e, err);
}

inline void trigger_case(GradReport& r, std::uint64_t seed, const GradCorruption& corrupt) {
  static constexpr std::size_t kDt[] = {2, 4, 8};
  static constexpr std::size_t kK[] = {1, 2, 4};
  Rng rng(seed, 0x67c);
  const std::size_t dt = kDt[seed % 3], K = kK[(seed / 3) % 3];
  const auto bank = random_bank<double>(K, dt, rng, 1.0);
  const auto k = rng.randn<double>({dt});
  const auto v = rng.randn<double>({dt});
  const auto p = rng.randn<double>({K});
  auto analytic = clogd_grad(p, bank, k, v);
  if (corrupt) corrupt("clogd", analytic);
  const auto numeric = oracle::meta_loss_grad_fd(p, bank, k, v);
  note(r, "clogd", relative_error(analytic, numeric));
}

/// Relative error per group of the concatenated gradients, against
/// central differences of `loss_of` over every scalar of every tensor.
inline void compare_all(GradReport& r, std::vector<std::pair<std::string, Tensor<double>*>> params,
                        const std::vector<std::string>& groups, const std::vector<Tensor<double>>& analytic,
                        const std::function<double()>& loss_of, const GradCorruption& corrupt) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_group;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& x = *params[i].second;
    auto a = analytic[i];
    if (corrupt) corrupt(groups[i], a);
    auto& [av, nv] = by_group[groups[i]];
    for (std::size_t j = 0; j < x.numel(); ++j) {
      const double orig = x[j];
      const double h = 1e-5;
      x[j] = orig + h;
      const double up = loss_of();
      x[j] = orig - h;
      const double dn = loss_of();
      x[j] = orig;
      av.push_back(a[j]);
      nv.push_back((up - dn) / (2 * h));
    }
  }
  for (auto& [g, pr] : by_group)
    note(r, g, relative_error(Tensor<double>::vector(pr.first), Tensor<double>::vector(pr.second)));
}

inline BlockConfig small_block_config() {
  BlockConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.d_trig = 4;
  c.bank_size = 2;
  c.rank = 2;
  c.window = 3;
  return c;
}

struct BlockCase {
  BlockConfig cfg;
  std::vector<Tensor<double>> hs, readout;
  Tensor<double> p0;
};

/// Sum over tokens of readout . v_out + sum(p_out), with the block state
/// carried across tokens.
template <class Ops>
typename Ops::V block_loss(const Ops& ops, const MixerWeights<typename Ops::V>& mw,
                           const BankWeights<typename Ops::V>& bw, const BlockCase& c) {
  auto st = block::init_state(ops, c.cfg);
  const auto consts = block::make_consts(ops, c.cfg.d_head());
  auto loss = ops.scalar(0.0);
  for (std::size_t t = 0; t < c.hs.size(); ++t) {
    const auto out = block::block_forward(ops, ops.constant(c.hs[t]), ops.constant(c.p0), st, mw, bw, c.cfg, consts, t);
    loss = ops.add(loss, ops.add(ops.sum(ops.mul(ops.constant(c.readout[t]), out.v_out)), ops.sum(out.p_out)));
  }
  return loss;
}

inline void block_case(GradReport& r, std::uint64_t seed, const GradCorruption& corrupt) {
  Rng rng(seed, 0xb10c);
  BlockCase c;
  c.cfg = small_block_config();
  auto w = random_block_params<double>(c.cfg, rng, 0.5);
  auto bank = random_bank<double>(c.cfg.bank_size, c.cfg.d_trig, rng, 1.0);
  for (std::size_t t = 0; t < 5; ++t) {
    c.hs.push_back(rng.randn<double>({c.cfg.d_model}));
    c.readout.push_back(rng.randn<double>({c.cfg.d_model}));
  }
  c.p0 = rng.rand<double>({c.cfg.bank_size}, 0.5, 1.5);

  std::vector<std::pair<std::string, Tensor<double>*>> params;
  for_each_mixer_param(w, [&](const std::string& n, Tensor<double>& t) { params.emplace_back(n, &t); });
  params.emplace_back("bank.w", &bank.w);
  params.emplace_back("bank.b", &bank.b);

  Tape<double> tape;
  TapeOps<double> tops{&tape};
  MixerWeights<Var> mv;
  BankWeights<Var> bv;
  std::size_t i = 0;
  for_each_mixer_param(mv, [&](const std::string&, Var& v) { v = tape.parameter(*params[i++].second); });
  bv.w = tape.parameter(bank.w);
  bv.b = tape.parameter(bank.b);
  std::vector<Var> vars;
  for_each_mixer_param(mv, [&](const std::string&, Var& v) { vars.push_back(v); });
  vars.push_back(bv.w);
  vars.push_back(bv.b);

  const auto g = tape.backward(block_loss(tops, mv, bv, c));
  std::vector<Tensor<double>> analytic;
  std::vector<std::string> groups;
  for (std::size_t k = 0; k < params.size(); ++k) {
    analytic.push_back(g[vars[k]]);
    groups.push_back(params[k].first);
  }
  ValueOps<double> vops;
  auto loss_of = [&] { return block_loss(vops, w, bank, c).item(); };
  compare_all(r, params, groups, analytic, loss_of, corrupt);
}

inline ModelConfig small_model_config(std::uint64_t seed) {
  ModelConfig c;
  c.vocab = 11;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_prelude = 1;
  c.heads = 2;
  c.window = 3;
  c.d_trig = 4;
  c.bank_size = 2;
  c.rank = 2;
  c.seed = seed;
  return c;
}

/// Every zero-initialized tensor gets small random values so no gradient
/// path is switched off by the initialization.
inline void randomize_zero_params(Model<double>& m, Rng& rng) {
  for (auto& [n, t] : m.named_params()) {
    bool all_zero = true;
    for (std::size_t i = 0; i < t->numel(); ++i) all_zero = all_zero && (*t)[i] == 0.0;
    if (all_zero) *t = rng.randn<double>(t->shape(), 0.3);
  }
}

inline void model_case(GradReport& r, std::uint64_t seed, const GradCorruption& corrupt) {
  Rng rng(seed, 0x30de1);
  auto m = Model<double>::init(small_model_config(seed));
  randomize_zero_params(m, rng);
  Supervision sup;
  for (std::size_t t = 0; t < 8; ++t) {
    sup.tokens.push_back(rng.below(m.cfg.vocab));
    sup.targets.push_back(rng.below(m.cfg.vocab));
    sup.mask.push_back(true);
  }
  Tape<double> tape;
  auto tw = register_weights(tape, m);
  TapeOps<double> ops{&tape};
  const auto g = tape.backward(sequence_loss(ops, m.cfg, tw.w, sup));
  auto named = m.named_params();
  std::vector<Tensor<double>> analytic;
  std::vector<std::string> groups;
  for (std::size_t i = 0; i < named.size(); ++i) {
    analytic.push_back(g[tw.params[i]]);
    groups.push_back(param_group(named[i].first));
  }
  ValueOps<double> vops;
  auto loss_of = [&] { return sequence_loss(vops, m.cfg, m.w, sup).item(); };
  compare_all(r, named, groups, analytic, loss_of, corrupt);
}

}  // namespace gradcheck_detail

/// Analytic gradients against finite differences, max relative error per
/// parameter group over `seeds` random cases.
inline GradReport gradcheck(GradScope scope, std::size_t seeds, double tol, const GradCorruption& corrupt = {}) {
  GradReport r;
  r.tol = tol;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    switch (scope) {
      case GradScope::Trigger: gradcheck_detail::trigger_case(r, s, corrupt); break;
      case GradScope::Block: gradcheck_detail::block_case(r, s, corrupt); break;
      case GradScope::Model: gradcheck_detail::model_case(r, s, corrupt); break;
    }
    ++r.cases;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Rule oracle diffs

struct DiffLine {
  std::string check;
  double max_abs = 0;
  double max_rel = 0;
};

struct RuleDiffReport {
  std::string rule;
  std::size_t len = 0;
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  std::vector<DiffLine> lines;

  double worst_abs() const {
    double w = 0;
    for (const auto& l : lines) w = std::max(w, l.max_abs);
    return w;
  }

  nlohmann::json to_json() const {
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& l : lines) checks.push_back({{"check", l.check}, {"max_abs", l.max_abs}, {"max_rel", l.max_rel}});
    return {{"rule", rule}, {"len", len}, {"dim", dim}, {"seed", seed}, {"checks", checks}};
  }
};

namespace rule_diff_detail {

inline DiffLine compare(std::string name, const std::vector<Tensor<double>>& a, const std::vector<Tensor<double>>& b) {
  DiffLine l{std::move(name), 0, 0};
  for (std::size_t t = 0; t < a.size(); ++t) {
    l.max_abs = std::max(l.max_abs, max_abs_diff(a[t], b[t]));
    l.max_rel = std::max(l.max_rel, relative_error(a[t], b[t]));
  }
  return l;
}

}  // namespace rule_diff_detail

/// Scan of `rule` against its brute-force oracle and, where the rule has
/// one, the reduction identity to a simpler rule.
inline RuleDiffReport rule_diff(RuleId rule, std::size_t T, std::size_t d, std::uint64_t seed) {
  using rule_diff_detail::compare;
  if (T == 0 || d == 0) throw DimensionError("rule_diff needs len >= 1 and dim >= 1");
  RuleDiffReport r{rule_name(rule), T, d, seed, {}};
  Rng rng(seed, 0xd1ff);
  auto seq = random_rule_sequence<double>(rule, T, d, d, rng);
  const auto& K = seq.keys;
  const auto& Vv = seq.values;
  const auto& Q = seq.queries;
  auto run = [&](RuleId id, const std::vector<GateValues<double>>& gates, std::size_t cap = 0) {
    return scan(id, K, Vv, gates, Q, cap);
  };
  auto edited = [&](auto edit) {
    auto g = seq.gates;
    for (auto& x : g) edit(x);
    return g;
  };
  using G = GateValues<double>;
  switch (rule) {
    case RuleId::Attention:
      r.lines.push_back(compare("softmax_attention_oracle", run(rule, seq.gates), oracle::causal_softmax_attention(K, Vv, Q)));
      break;
    case RuleId::SWA:
      r.lines.push_back(compare("full_attention_at_capacity_T", run(rule, seq.gates, T), oracle::causal_softmax_attention(K, Vv, Q)));
      r.lines.push_back(compare("windowed_attention_oracle_w2", run(rule, seq.gates, 2), oracle::causal_softmax_attention(K, Vv, Q, 2)));
      break;
    case RuleId::NaiveLinear:
      r.lines.push_back(compare("quadratic_oracle", run(rule, seq.gates), oracle::quadratic_linear_attention(K, Vv, Q)));
      break;
    default:
      r.lines.push_back(compare("explicit_operator_oracle", run(rule, seq.gates), oracle::explicit_operator_scan(rule, K, Vv, seq.gates, Q)));
      break;
  }
  switch (rule) {
    case RuleId::GatedDeltaNet: {
      auto g1 = edited([](G& g) { g.alpha = 1.0; });
      r.lines.push_back(compare("alpha1_equals_deltanet", scan(rule, K, Vv, g1, Q), scan(RuleId::DeltaNet, K, Vv, g1, Q)));
      std::vector<Tensor<double>> chunked = chunkwise_gated_delta(K, Vv, seq.gates, Q, std::max<std::size_t>(1, T / 4));
      r.lines.push_back(compare("chunkwise_equals_scan", chunked, run(rule, seq.gates)));
      break;
    }
    case RuleId::GLA: {
      auto g1 = edited([d](G& g) { g.alpha_vec = Tensor<double>::filled({d}, 1.0); });
      r.lines.push_back(compare("alpha1_equals_naive", scan(rule, K, Vv, g1, Q), scan(RuleId::NaiveLinear, K, Vv, g1, Q)));
      break;
    }
    case RuleId::RWKV7: {
      auto g1 = edited([d](G& g) { g.alpha_vec = Tensor<double>::filled({d}, 1.0); });
      r.lines.push_back(compare("alpha1_equals_deltanet", scan(rule, K, Vv, g1, Q), scan(RuleId::DeltaNet, K, Vv, g1, Q)));
      break;
    }
    case RuleId::PolySketch: {
      auto g1 = edited([](G& g) { g.p_degree = 1; });
      r.lines.push_back(compare("p1_equals_naive", scan(rule, K, Vv, g1, Q), scan(RuleId::NaiveLinear, K, Vv, g1, Q)));
      break;
    }
    case RuleId::Mamba2: {
      auto g1 = edited([](G& g) {
        g.alpha = 1.0;
        g.beta = 1.0;
      });
      r.lines.push_back(compare("alpha1_beta1_equals_naive", scan(rule, K, Vv, g1, Q), scan(RuleId::NaiveLinear, K, Vv, g1, Q)));
      break;
    }
    default: break;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Ablations

enum class Variant { Full, NoTrigger, RopeOn };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoTrigger: return "no_trigger";
    case Variant::RopeOn: return "rope_on";
  }
  return "unknown";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "no_trigger") return Variant::NoTrigger;
  if (s == "rope_on") return Variant::RopeOn;
  throw ConfigError("unknown variant '" + s + "' (full, no_trigger, rope_on)");
}

struct SweepPoint {
  std::size_t len = 0;
  EvalResult eval;
};

struct VariantResult {
  Variant variant = Variant::Full;
  std::vector<RunMetrics> metrics;
  std::vector<SweepPoint> sweep;  // lengths T, 2T, 4T
};

/// Trains each variant with the same seed and data, then evaluates at the
/// training length and at 2x and 4x.
template <typename Real>
std::vector<VariantResult> ablate(const RunConfig& base, const std::vector<Variant>& variants,
                                  const TrainOptions& opt = {}) {
  std::vector<VariantResult> out;
  for (Variant v : variants) {
    RunConfig rc = base;
    rc.model.rope_enabled = v == Variant::RopeOn;
    TrainOptions o = opt;
    o.on_metrics = nullptr;
    if (!opt.out_dir.empty()) o.out_dir = (std::filesystem::path(opt.out_dir) / variant_name(v)).string();
    o.zero_trigger = v == Variant::NoTrigger;
    const auto tr = train_toy<Real>(rc, o);
    VariantResult vr;
    vr.variant = v;
    vr.metrics = tr.metrics;
    for (std::size_t mult : {1, 2, 4}) {
      TaskSpec spec = rc.task;
      spec.seq_len = rc.task.seq_len * mult;
      spec.vocab = rc.model.vocab;
      spec.seed = rc.model.seed;
      vr.sweep.push_back({spec.seq_len, evaluate(tr.model, spec, kEvalOffset, rc.train.eval_size)});
    }
    out.push_back(std::move(vr));
  }
  return out;
}

}  // namespace nirvana

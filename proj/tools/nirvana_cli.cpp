// nirvana: command-line driver for training, evaluation and the
// verification reports.
//
//   nirvana rules diff --rule gated_deltanet --len 32 --seed 0
//   nirvana gradcheck --scope trigger --seeds 100 --tol 1e-4
//   nirvana train --config run.cfg --task assoc_recall --steps 2000 --out runs/a
//   nirvana eval --ckpt runs/a/checkpoint.bin --task assoc_recall --len 256
//   nirvana ablate --config run.cfg --variants full,no_trigger,rope_on --out runs/abl
//
// Exit status: 0 ok, 1 a check failed, 2 bad input.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nirvana/harness.hpp"

using namespace nirvana;
namespace fs = std::filesystem;

namespace {

constexpr int kCheckFailed = 1;
constexpr int kBadInput = 2;

void print_json(const nlohmann::json& j) { std::cout << j.dump() << '\n'; }

// Traces of one teacher-forced pass, one JSON object per (position, layer).
template <typename Real>
void dump_traces(const Model<Real>& m, const TaskSpec& spec, const std::string& path) {
  std::vector<LayerTrace<Real>> traces;
  forward_sequence(gen_task(spec, kEvalOffset).tokens, m, &traces);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write traces to " + path);
  for (const auto& t : traces) out << t.to_json().dump() << '\n';
}

RunConfig config_from(const std::string& path) {
  RunConfig rc = path.empty() ? RunConfig{} : load_run_config(path);
  apply_env_overrides(rc);
  return rc;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// ---------------------------------------------------------------------------

struct RulesArgs {
  std::string rule;
  std::size_t len = 32;
  std::size_t dim = 8;
  std::uint64_t seed = 0;
  double tol = 1e-9;
};

int run_rules_diff(const RulesArgs& a) {
  const auto id = parse_rule(a.rule);
  if (!id) {
    std::string names;
    for (RuleId r : kAllRules) names += std::string(names.empty() ? "" : ", ") + rule_name(r);
    throw ConfigError("unknown rule '" + a.rule + "' (" + names + ")");
  }
  const auto rep = rule_diff(*id, a.len, a.dim, a.seed);
  auto j = rep.to_json();
  j["tol"] = a.tol;
  j["pass"] = rep.worst_abs() <= a.tol;
  print_json(j);
  return rep.worst_abs() <= a.tol ? 0 : kCheckFailed;
}

struct GradArgs {
  std::string scope = "trigger";
  std::size_t seeds = 10;
  double tol = 1e-4;
  std::string corrupt;  // test hook: perturb this group's analytic gradient
};

int run_gradcheck(const GradArgs& a) {
  GradCorruption corrupt;
  if (!a.corrupt.empty())
    corrupt = [group = a.corrupt](const std::string& g, Tensor<double>& grad) {
      if (g == group && grad.numel() > 0) grad[0] += 1.0;
    };
  const auto rep = gradcheck(parse_grad_scope(a.scope), a.seeds, a.tol, corrupt);
  auto j = rep.to_json();
  j["scope"] = a.scope;
  print_json(j);
  return rep.pass() ? 0 : kCheckFailed;
}

struct TrainArgs {
  std::string config;
  std::string task;
  std::optional<std::size_t> steps;
  std::string out = "out";
  std::string traces;
  bool wall = false;
};

template <typename Real>
int train_as(const RunConfig& rc, const TrainArgs& a) {
  TrainOptions opt;
  opt.out_dir = a.out;
  opt.record_wall = a.wall;
  opt.on_metrics = [](const RunMetrics& m) { print_json(m.to_json()); };
  const auto res = train_toy<Real>(rc, opt);
  if (!a.traces.empty()) dump_traces(res.model, rc.task, a.traces);
  nlohmann::json done = {{"steps_run", res.steps_run}, {"out", a.out}};
  if (res.reached_step) done["reached_step"] = *res.reached_step;
  std::cerr << done.dump() << '\n';
  return 0;
}

int run_train(const TrainArgs& a) {
  RunConfig rc = config_from(a.config);
  if (!a.task.empty()) rc.task.kind = parse_task_kind(a.task);
  if (a.steps) rc.train.steps = *a.steps;
  fs::create_directories(a.out);
  {
    std::ofstream cfg(fs::path(a.out) / "config.json", std::ios::trunc);
    cfg << rc.to_json().dump(2) << '\n';
  }
  return rc.model.precision == Precision::F32 ? train_as<float>(rc, a) : train_as<double>(rc, a);
}

struct EvalArgs {
  std::string ckpt;
  std::string task = "assoc_recall";
  std::size_t len = 128;
  std::size_t pairs = 8;
  double filler_entropy = TaskSpec{}.filler_entropy;
  std::size_t count = 32;
  std::string out;
  std::string traces;
};

template <typename Real>
int eval_as(const std::string& bytes, const EvalArgs& a) {
  const auto m = deserialize_checkpoint<Real>(bytes);
  TaskSpec spec;
  spec.kind = parse_task_kind(a.task);
  spec.vocab = m.cfg.vocab;
  spec.seed = m.cfg.seed;
  spec.seq_len = a.len;
  spec.n_pairs = a.pairs;
  spec.filler_entropy = a.filler_entropy;
  const auto ev = evaluate(m, spec, kEvalOffset, a.count);
  const nlohmann::json j = {{"task", a.task},
                            {"len", a.len},
                            {"count", a.count},
                            {"loss", ev.loss},
                            {"token_acc", ev.token_acc},
                            {"query_acc", ev.query_acc},
                            {"state_footprint", ev.state_footprint},
                            {"finite", ev.finite}};
  print_json(j);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    std::ofstream out(fs::path(a.out) / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    out << j.dump() << '\n';
  }
  if (!a.traces.empty()) dump_traces(m, spec, a.traces);
  return ev.finite ? 0 : kCheckFailed;
}

int run_eval(const EvalArgs& a) {
  const std::string bytes = read_file_bytes(a.ckpt);
  return checkpoint_precision(bytes) == Precision::F32 ? eval_as<float>(bytes, a) : eval_as<double>(bytes, a);
}

struct AblateArgs {
  std::string config;
  std::string variants = "full,no_trigger,rope_on";
  std::string out = "out";
  bool wall = false;
};

template <typename Real>
int ablate_as(const RunConfig& rc, const std::vector<Variant>& vs, const AblateArgs& a) {
  TrainOptions opt;
  opt.out_dir = a.out;
  opt.record_wall = a.wall;
  const auto results = ablate<Real>(rc, vs, opt);
  std::ofstream table(fs::path(a.out) / "ablation.jsonl", std::ios::binary | std::ios::trunc);
  for (const auto& r : results) {
    const auto& last = r.metrics.back();
    for (const auto& pt : r.sweep) {
      const nlohmann::json j = {{"variant", variant_name(r.variant)},
                                {"train_len", rc.task.seq_len},
                                {"eval_len", pt.len},
                                {"final_step", last.step},
                                {"loss", pt.eval.loss},
                                {"token_acc", pt.eval.token_acc},
                                {"query_acc", pt.eval.query_acc},
                                {"state_footprint", pt.eval.state_footprint},
                                {"finite", pt.eval.finite}};
      table << j.dump() << '\n';
      print_json(j);
    }
  }
  return 0;
}

int run_ablate(const AblateArgs& a) {
  const RunConfig rc = config_from(a.config);
  std::vector<Variant> vs;
  for (const auto& s : split_csv(a.variants)) vs.push_back(parse_variant(s));
  if (vs.empty()) throw ConfigError("no variants given");
  fs::create_directories(a.out);
  return rc.model.precision == Precision::F32 ? ablate_as<float>(rc, vs, a) : ablate_as<double>(rc, vs, a);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nirvana toy models: memory-rule oracles, gradient checks, training and ablations"};
  app.require_subcommand(1);

  RulesArgs ra;
  auto* rules = app.add_subcommand("rules", "Memory-rule zoo");
  rules->require_subcommand(1);
  auto* diff = rules->add_subcommand("diff", "Scan against the rule's oracle and reduction identities");
  diff->add_option("--rule", ra.rule, "Rule id")->required();
  diff->add_option("--len", ra.len, "Sequence length")->check(CLI::PositiveNumber);
  diff->add_option("--dim", ra.dim, "Key and value width")->check(CLI::PositiveNumber);
  diff->add_option("--seed", ra.seed, "Seed");
  diff->add_option("--tol", ra.tol, "Largest allowed absolute difference");
  auto* list = rules->add_subcommand("list", "Print the rule ids");

  GradArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "Analytic gradients against finite differences");
  grad->add_option("--scope", ga.scope, "trigger, block or model");
  grad->add_option("--seeds", ga.seeds, "Number of random cases")->check(CLI::PositiveNumber);
  grad->add_option("--tol", ga.tol, "Largest allowed relative error");
  grad->add_option("--corrupt", ga.corrupt)->group("");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train on a synthetic task");
  train->add_option("--config", ta.config, "key=value config file")->check(CLI::ExistingFile);
  train->add_option("--task", ta.task, "assoc_recall, s_niah_toy or copy");
  train->add_option("--steps", ta.steps, "Override the configured step count");
  train->add_option("--out", ta.out, "Output directory");
  train->add_option("--dump-traces", ta.traces, "Write per-layer traces of the trained model (JSONL)");
  train->add_flag("--wall", ta.wall, "Record wall-clock time in the metrics");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--ckpt", ea.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--task", ea.task, "assoc_recall, s_niah_toy or copy");
  eval->add_option("--len", ea.len, "Sequence length")->check(CLI::PositiveNumber);
  eval->add_option("--pairs", ea.pairs, "Key-value pairs (assoc_recall)");
  eval->add_option("--filler-entropy", ea.filler_entropy, "Bits per filler token");
  eval->add_option("--count", ea.count, "Number of sequences")->check(CLI::PositiveNumber);
  eval->add_option("--out", ea.out, "Write metrics.jsonl here");
  eval->add_option("--dump-traces", ea.traces, "Write per-layer traces (JSONL)");

  AblateArgs aa;
  auto* abl = app.add_subcommand("ablate", "Train variants on the same seed and sweep eval length");
  abl->add_option("--config", aa.config, "key=value config file")->check(CLI::ExistingFile);
  abl->add_option("--variants", aa.variants, "Comma-separated: full, no_trigger, rope_on");
  abl->add_option("--out", aa.out, "Output directory");
  abl->add_flag("--wall", aa.wall, "Record wall-clock time in the metrics");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*list) {
      for (RuleId r : kAllRules) std::cout << rule_name(r) << '\n';
      return 0;
    }
    if (*diff) return run_rules_diff(ra);
    if (*grad) return run_gradcheck(ga);
    if (*train) return run_train(ta);
    if (*eval) return run_eval(ea);
    if (*abl) return run_ablate(aa);
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  }
  return kBadInput;
}

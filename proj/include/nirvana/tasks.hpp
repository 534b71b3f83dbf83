// SPDX-License-Identifier: Apache-2.0
//
// Synthetic retrieval tasks on token ids.
//
// Every task splits the vocabulary into disjoint alphabets so the role of a
// token (key, value, filler, separator) can be read off the token itself:
//
//   keys    [0, q)         q = vocab / 4
//   values  [q, 2q)
//   filler  [2q, 2q + f)   f = min(vocab - 2q - 1, round(2^filler_entropy))
//   sep     vocab - 1      (copy only)
//
// assoc_recall:  k1 v1 ... kn vn | filler ... | kπ1 vπ1 ... kπn vπn
//   every key is queried once, in shuffled order, after all the evidence;
//   the value after each query key is supervised.
// s_niah_toy:    filler with one (k, v) needle, then k v at the end.
// copy:          s1 .. sL sep s1 .. sL [sep], symbols from [0, vocab - 1).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nirvana/errors.hpp"
#include "nirvana/model.hpp"
#include "nirvana/numerics.hpp"

namespace nirvana {

enum class TaskKind { AssocRecall, SNiahToy, Copy };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::AssocRecall: return "assoc_recall";
    case TaskKind::SNiahToy: return "s_niah_toy";
    case TaskKind::Copy: return "copy";
  }
  return "unknown";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "assoc_recall") return TaskKind::AssocRecall;
  if (s == "s_niah_toy") return TaskKind::SNiahToy;
  if (s == "copy") return TaskKind::Copy;
  throw ConfigError("unknown task kind '" + s + "' (assoc_recall, s_niah_toy, copy)");
}

struct TaskSpec {
  TaskKind kind = TaskKind::AssocRecall;
  std::size_t vocab = 64;
  std::size_t seq_len = 128;
  std::size_t n_pairs = 8;
  double filler_entropy = 5.0;  // bits per filler token
  std::uint64_t seed = 0;
};

struct Alphabet {
  std::size_t keys = 0;     // [0, keys)
  std::size_t values = 0;   // [keys, keys + values)
  std::size_t filler_lo = 0;
  std::size_t filler = 0;   // [filler_lo, filler_lo + filler)
  std::size_t sep = 0;

  bool is_key(std::size_t t) const { return t < keys; }
  bool is_value(std::size_t t) const { return t >= keys && t < keys + values; }
  bool is_filler(std::size_t t) const { return t >= filler_lo && t < filler_lo + filler; }
};

inline Alphabet task_alphabet(const TaskSpec& s) {
  if (s.vocab < 4) throw LayoutError("vocab must be at least 4");
  Alphabet a;
  a.keys = s.vocab / 4;
  a.values = a.keys;
  a.filler_lo = 2 * a.keys;
  const double want = std::round(std::exp2(std::max(0.0, s.filler_entropy)));
  a.filler = std::max<std::size_t>(1, std::min<std::size_t>(s.vocab - a.filler_lo - 1,
                                                            static_cast<std::size_t>(std::min(want, 1e9))));
  a.sep = s.vocab - 1;
  return a;
}

struct Task {
  std::vector<std::size_t> tokens;
  std::vector<bool> answer_mask;     // true where tokens[i] is a supervised answer
  std::vector<std::size_t> answers;  // tokens at masked positions, in order

  std::size_t size() const { return tokens.size(); }
};

/// Throws LayoutError when the spec cannot be laid out.
inline void check_layout(const TaskSpec& s) {
  const Alphabet a = task_alphabet(s);
  switch (s.kind) {
    case TaskKind::AssocRecall:
      if (s.n_pairs == 0) throw LayoutError("assoc_recall needs n_pairs >= 1");
      if (s.n_pairs > a.keys)
        throw LayoutError("assoc_recall: " + std::to_string(s.n_pairs) + " distinct keys need vocab >= " +
                          std::to_string(4 * s.n_pairs));
      if (s.seq_len < 4 * s.n_pairs)
        throw LayoutError("assoc_recall: seq_len " + std::to_string(s.seq_len) + " cannot hold " +
                          std::to_string(s.n_pairs) + " pairs and their queries");
      break;
    case TaskKind::SNiahToy:
      if (s.seq_len < 4) throw LayoutError("s_niah_toy needs seq_len >= 4");
      break;
    case TaskKind::Copy:
      if (s.seq_len < 3) throw LayoutError("copy needs seq_len >= 3");
      break;
  }
}

/// Instance `index` of the task family; instance 0 is what gen_task(spec)
/// returns. Instances are independent draws from the same spec.
inline Task gen_task(const TaskSpec& s, std::uint64_t index = 0) {
  check_layout(s);
  const Alphabet a = task_alphabet(s);
  Rng rng(s.seed, 0x7a5c000000000000ull ^ index);
  Task t;
  t.tokens.reserve(s.seq_len);
  auto emit = [&](std::size_t tok, bool answer) {
    t.tokens.push_back(tok);
    t.answer_mask.push_back(answer);
    if (answer) t.answers.push_back(tok);
  };
  auto filler = [&] { return a.filler_lo + rng.below(a.filler); };
  switch (s.kind) {
    case TaskKind::AssocRecall: {
      std::vector<std::size_t> keys(a.keys);
      for (std::size_t i = 0; i < a.keys; ++i) keys[i] = i;
      for (std::size_t i = 0; i < s.n_pairs; ++i) std::swap(keys[i], keys[i + rng.below(a.keys - i)]);
      keys.resize(s.n_pairs);
      std::vector<std::size_t> vals(s.n_pairs);
      for (auto& v : vals) v = a.keys + rng.below(a.values);
      for (std::size_t i = 0; i < s.n_pairs; ++i) {
        emit(keys[i], false);
        emit(vals[i], false);
      }
      for (std::size_t i = 0; i < s.seq_len - 4 * s.n_pairs; ++i) emit(filler(), false);
      std::vector<std::size_t> order(s.n_pairs);
      for (std::size_t i = 0; i < s.n_pairs; ++i) order[i] = i;
      for (std::size_t i = s.n_pairs; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      for (std::size_t i : order) {
        emit(keys[i], false);
        emit(vals[i], true);
      }
      break;
    }
    case TaskKind::SNiahToy: {
      const std::size_t key = rng.below(a.keys);
      const std::size_t val = a.keys + rng.below(a.values);
      const std::size_t hay = s.seq_len - 2;
      const std::size_t at = rng.below(hay - 1);
      for (std::size_t i = 0; i < hay; ++i) {
        if (i == at) {
          emit(key, false);
        } else if (i == at + 1) {
          emit(val, false);
        } else {
          emit(filler(), false);
        }
      }
      emit(key, false);
      emit(val, true);
      break;
    }
    case TaskKind::Copy: {
      const std::size_t len = (s.seq_len - 1) / 2;
      std::vector<std::size_t> str(len);
      for (auto& x : str) x = rng.below(s.vocab - 1);
      for (auto x : str) emit(x, false);
      emit(a.sep, false);
      for (auto x : str) emit(x, true);
      while (t.tokens.size() < s.seq_len) emit(a.sep, false);
      break;
    }
  }
  return t;
}

/// Recovers (position, answer) pairs from a token stream using only the
/// alphabet layout, without any generator state.
inline std::vector<std::pair<std::size_t, std::size_t>> parse_answers(const TaskSpec& s,
                                                                      const std::vector<std::size_t>& tokens) {
  const Alphabet a = task_alphabet(s);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  switch (s.kind) {
    case TaskKind::AssocRecall: {
      // Leading key/value run is the evidence; keys seen again later are queries.
      std::map<std::size_t, std::size_t> kv;
      std::size_t i = 0;
      while (i + 1 < tokens.size() && a.is_key(tokens[i]) && a.is_value(tokens[i + 1]) &&
             !kv.count(tokens[i])) {
        kv[tokens[i]] = tokens[i + 1];
        i += 2;
      }
      for (; i + 1 < tokens.size(); ++i)
        if (a.is_key(tokens[i]) && kv.count(tokens[i])) {
          out.emplace_back(i + 1, kv.at(tokens[i]));
          ++i;
        }
      break;
    }
    case TaskKind::SNiahToy: {
      const std::size_t n = tokens.size();
      if (n < 2) break;
      const std::size_t key = tokens[n - 2];
      for (std::size_t i = 0; i + 3 < n; ++i)
        if (tokens[i] == key) {
          out.emplace_back(n - 1, tokens[i + 1]);
          break;
        }
      break;
    }
    case TaskKind::Copy: {
      const auto sep = std::find(tokens.begin(), tokens.end(), a.sep);
      const std::size_t len = static_cast<std::size_t>(sep - tokens.begin());
      for (std::size_t i = 0; i < len && len + 1 + i < tokens.size(); ++i)
        out.emplace_back(len + 1 + i, tokens[i]);
      break;
    }
  }
  return out;
}

/// Next-token supervision: the logits at position i predict token i + 1 and
/// count only when token i + 1 is an answer.
inline Supervision to_supervision(const Task& t) {
  Supervision s;
  s.tokens = t.tokens;
  s.targets.assign(t.tokens.size(), 0);
  s.mask.assign(t.tokens.size(), false);
  for (std::size_t i = 0; i + 1 < t.tokens.size(); ++i) {
    s.targets[i] = t.tokens[i + 1];
    s.mask[i] = t.answer_mask[i + 1];
  }
  return s;
}

}  // namespace nirvana

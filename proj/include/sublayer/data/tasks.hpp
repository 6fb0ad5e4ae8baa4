#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sublayer/errors.hpp"
#include "sublayer/model/config.hpp"
#include "sublayer/model/transformer.hpp"
#include "sublayer/numerics/rng.hpp"

namespace sublayer {

enum class TaskKind { kCopy, kReverse, kSort, kToyTranslate };
enum class Split { kTrain, kValid, kTest };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kSort: return "sort";
    case TaskKind::kToyTranslate: return "toy_translate";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "copy") return TaskKind::kCopy;
  if (s == "reverse") return TaskKind::kReverse;
  if (s == "sort") return TaskKind::kSort;
  if (s == "toy_translate") return TaskKind::kToyTranslate;
  throw ConfigError("data.task", "unknown task '" + s + "'");
}

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

struct TaskSpec {
  TaskKind kind = TaskKind::kToyTranslate;
  std::size_t len_min = 3;
  std::size_t len_max = 10;
  std::size_t vocab = 32;      // shared source/target vocabulary incl. specials
  std::uint64_t mapping_seed = 1234;  // fixes the toy_translate bijection

  bool operator==(const TaskSpec&) const = default;
};

struct Corpus {
  std::vector<SentencePair> pairs;
  std::size_t vocab = 0;
  Split split = Split::kTrain;
};

// Seeded permutation of the payload ids; specials map to themselves.
inline std::vector<int> token_bijection(std::size_t vocab, std::uint64_t seed) {
  std::vector<int> map(vocab);
  std::iota(map.begin(), map.end(), 0);
  Rng rng(seed);
  std::vector<int> payload(map.begin() + kFirstPayloadId, map.end());
  rng.shuffle(payload);
  std::copy(payload.begin(), payload.end(), map.begin() + kFirstPayloadId);
  return map;
}

// Maps each token through `mapping`, then swaps the adjacent pair starting at
// every position divisible by 3: [a b c d e] -> [b a c e d].
inline std::vector<int> toy_translate_target(const std::vector<int>& src, const std::vector<int>& mapping) {
  std::vector<int> out;
  out.reserve(src.size());
  for (int t : src) out.push_back(mapping.at(static_cast<std::size_t>(t)));
  for (std::size_t i = 0; i + 1 < out.size(); i += 3) std::swap(out[i], out[i + 1]);
  return out;
}

inline std::vector<int> task_target(const TaskSpec& spec, const std::vector<int>& src,
                                    const std::vector<int>& mapping) {
  switch (spec.kind) {
    case TaskKind::kCopy: return src;
    case TaskKind::kReverse: return {src.rbegin(), src.rend()};
    case TaskKind::kSort: {
      std::vector<int> t = src;
      std::sort(t.begin(), t.end());
      return t;
    }
    case TaskKind::kToyTranslate: return toy_translate_target(src, mapping);
  }
  return src;
}

inline void validate_task(const TaskSpec& spec, std::size_t max_len) {
  if (spec.len_min == 0 || spec.len_min > spec.len_max)
    throw ConfigError("data.len_min", "length range must satisfy 1 <= len_min <= len_max");
  if (spec.len_max > max_len)
    throw ConfigError("data.len_max", "exceeds model max_len " + std::to_string(max_len));
  if (spec.vocab <= static_cast<std::size_t>(kFirstPayloadId))
    throw ConfigError("data.vocab", "must exceed the special token ids");
}

namespace detail {

inline SentencePair sample_pair(const TaskSpec& spec, const std::vector<int>& mapping, Rng& rng) {
  const std::size_t len = spec.len_min + static_cast<std::size_t>(rng.below(spec.len_max - spec.len_min + 1));
  const std::uint64_t payload = spec.vocab - kFirstPayloadId;
  SentencePair p;
  p.src.resize(len);
  for (int& t : p.src) t = kFirstPayloadId + static_cast<int>(rng.below(payload));
  p.tgt = task_target(spec, p.src, mapping);
  return p;
}

}  // namespace detail

// Draws n distinct pairs; deterministic in (spec, n_pairs, seed).
inline Corpus generate(const TaskSpec& spec, std::size_t n_pairs, std::uint64_t seed,
                       std::size_t max_len = 24) {
  if (n_pairs == 0) throw ConfigError("data.n_train", "need at least one pair");
  validate_task(spec, max_len);
  const auto mapping = token_bijection(spec.vocab, spec.mapping_seed);
  Rng rng(seed);
  Corpus c;
  c.vocab = spec.vocab;
  std::set<SentencePair> seen;
  std::size_t attempts = 0;
  while (c.pairs.size() < n_pairs) {
    if (++attempts > 50 * n_pairs + 1000) throw Error("task space too small for requested corpus size");
    SentencePair p = detail::sample_pair(spec, mapping, rng);
    if (seen.insert(p).second) c.pairs.push_back(std::move(p));
  }
  return c;
}

struct CorpusSplits {
  Corpus train;
  Corpus valid;
  Corpus test;

  const Corpus& get(Split s) const {
    return s == Split::kTrain ? train : s == Split::kValid ? valid : test;
  }
};

// One distinct pool cut into train/valid/test, so the splits are disjoint.
// The held-out splits come first so that growing n_train (the data-size
// sweep) keeps them fixed.
inline CorpusSplits make_splits(const TaskSpec& spec, std::size_t n_train, std::size_t n_valid,
                                std::size_t n_test, std::uint64_t seed, std::size_t max_len = 24) {
  Corpus pool = generate(spec, n_train + n_valid + n_test, seed, max_len);
  CorpusSplits s;
  auto cut = [&](Corpus& dst, Split split, std::size_t from, std::size_t n) {
    dst.vocab = spec.vocab;
    dst.split = split;
    dst.pairs.assign(pool.pairs.begin() + static_cast<std::ptrdiff_t>(from),
                     pool.pairs.begin() + static_cast<std::ptrdiff_t>(from + n));
  };
  cut(s.valid, Split::kValid, 0, n_valid);
  cut(s.test, Split::kTest, n_valid, n_test);
  cut(s.train, Split::kTrain, n_valid + n_test, n_train);
  return s;
}

// One pair per line: "src ids<TAB>tgt ids", ids space-separated.
inline std::string export_corpus(const Corpus& c) {
  std::ostringstream out;
  auto ids = [&](const std::vector<int>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << v[i];
  };
  for (const auto& p : c.pairs) {
    ids(p.src);
    out << '\t';
    ids(p.tgt);
    out << '\n';
  }
  return out.str();
}

inline std::vector<SentencePair> import_corpus(const std::string& text) {
  std::vector<SentencePair> pairs;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("corpus line " + std::to_string(lineno) + " has no tab");
    auto parse = [&](const std::string& s) {
      std::vector<int> v;
      std::istringstream ss(s);
      int x;
      while (ss >> x) v.push_back(x);
      if (!ss.eof()) throw FormatError("corpus line " + std::to_string(lineno) + " has a non-integer id");
      return v;
    };
    pairs.push_back({parse(line.substr(0, tab)), parse(line.substr(tab + 1))});
  }
  return pairs;
}

}  // namespace sublayer

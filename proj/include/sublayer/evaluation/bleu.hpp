#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

#include "sublayer/errors.hpp"

namespace sublayer {

struct BleuStats {
  double score = 0.0;  // 0..100
  double brevity_penalty = 0.0;
  std::vector<double> precisions;  // after smoothing, orders 1..4
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

namespace detail {

using Ngram = std::vector<int>;

inline std::map<Ngram, std::size_t> ngram_counts(const std::vector<int>& tokens, std::size_t n) {
  std::map<Ngram, std::size_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[Ngram(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

}  // namespace detail

// Corpus-level 4-gram BLEU with clipped (modified) n-gram precisions and the
// brevity penalty, one reference per candidate. A zero match count at order
// n >= 2 is smoothed to 1 / (total + 1); order 1 is never smoothed.
inline BleuStats corpus_bleu(std::span<const std::vector<int>> candidates,
                             std::span<const std::vector<int>> references, std::size_t max_order = 4) {
  if (candidates.size() != references.size()) throw Error("bleu: candidate/reference count mismatch");
  if (candidates.empty()) throw Error("bleu: empty corpus");
  std::vector<std::size_t> matches(max_order, 0), totals(max_order, 0);
  BleuStats st;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const auto& cand = candidates[s];
    const auto& ref = references[s];
    st.candidate_length += cand.size();
    st.reference_length += ref.size();
    for (std::size_t n = 1; n <= max_order; ++n) {
      const auto cc = detail::ngram_counts(cand, n);
      const auto rc = detail::ngram_counts(ref, n);
      for (const auto& [gram, count] : cc) {
        auto it = rc.find(gram);
        matches[n - 1] += std::min(count, it == rc.end() ? std::size_t{0} : it->second);
        totals[n - 1] += count;
      }
    }
  }
  if (st.reference_length == 0) throw Error("bleu: references are empty");
  if (st.candidate_length == 0 || matches[0] == 0) {
    st.precisions.assign(max_order, 0.0);
    return st;
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < max_order; ++n) {
    double p;
    if (matches[n] == 0) {
      p = 1.0 / static_cast<double>(totals[n] + 1);
    } else {
      p = static_cast<double>(matches[n]) / static_cast<double>(totals[n]);
    }
    st.precisions.push_back(p);
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(st.candidate_length);
  const double r = static_cast<double>(st.reference_length);
  st.brevity_penalty = c > r ? 1.0 : std::exp(1.0 - r / c);
  st.score = 100.0 * st.brevity_penalty * std::exp(log_sum / static_cast<double>(max_order));
  return st;
}

inline double bleu(std::span<const std::vector<int>> candidates, std::span<const std::vector<int>> references) {
  return corpus_bleu(candidates, references).score;
}

}  // namespace sublayer

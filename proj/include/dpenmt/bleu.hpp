#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpenmt/error.hpp"
#include "dpenmt/vocab.hpp"

namespace dpenmt {

constexpr int kBleuOrder = 4;

namespace detail {

// n-grams keyed by tokens joined with an unprintable separator.
inline void count_ngrams(const std::vector<std::string>& toks, int n,
                         std::unordered_map<std::string, int>& counts) {
  if (static_cast<int>(toks.size()) < n) return;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key;
    for (int j = 0; j < n; ++j) {
      if (j) key += '\x1f';
      key += toks[i + j];
    }
    ++counts[key];
  }
}

}  // namespace detail

// Corpus-level BLEU-4: geometric mean of modified n-gram precisions times
// the brevity penalty exp(min(0, 1 - r/c)); zero when any precision is zero.
inline double bleu(const std::vector<std::vector<std::string>>& hyps,
                   const std::vector<std::vector<std::string>>& refs) {
  if (hyps.size() != refs.size())
    throw input_error("bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                      std::to_string(refs.size()) + " references");
  if (hyps.empty()) throw input_error("bleu: empty corpus");

  long long matched[kBleuOrder] = {0}, total[kBleuOrder] = {0};
  long long hyp_len = 0, ref_len = 0;
  std::unordered_map<std::string, int> hyp_counts, ref_counts;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    hyp_len += static_cast<long long>(hyps[s].size());
    ref_len += static_cast<long long>(refs[s].size());
    for (int n = 1; n <= kBleuOrder; ++n) {
      hyp_counts.clear();
      ref_counts.clear();
      detail::count_ngrams(hyps[s], n, hyp_counts);
      detail::count_ngrams(refs[s], n, ref_counts);
      for (const auto& [gram, count] : hyp_counts) {
        total[n - 1] += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matched[n - 1] += std::min(count, it->second);
      }
    }
  }

  if (hyp_len == 0) return 0.0;
  double log_prec = 0.0;
  for (int n = 0; n < kBleuOrder; ++n) {
    if (matched[n] == 0) return 0.0;
    log_prec += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
  }
  const double bp =
      std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)));
  return 100.0 * bp * std::exp(log_prec / kBleuOrder);
}

inline double bleu_lines(const std::vector<std::string>& hyp_lines,
                         const std::vector<std::string>& ref_lines) {
  if (hyp_lines.size() != ref_lines.size())
    throw input_error("bleu: " + std::to_string(hyp_lines.size()) + " hypothesis lines vs " +
                      std::to_string(ref_lines.size()) + " reference lines");
  std::vector<std::vector<std::string>> hyps, refs;
  hyps.reserve(hyp_lines.size());
  refs.reserve(ref_lines.size());
  for (const auto& l : hyp_lines) hyps.push_back(split_tokens(l));
  for (const auto& l : ref_lines) refs.push_back(split_tokens(l));
  return bleu(hyps, refs);
}

// Fraction of lines whose token sequences match exactly.
inline double exact_match(const std::vector<std::string>& hyp_lines,
                          const std::vector<std::string>& ref_lines) {
  if (hyp_lines.size() != ref_lines.size())
    throw input_error("exact_match: " + std::to_string(hyp_lines.size()) + " hypothesis lines vs " +
                      std::to_string(ref_lines.size()) + " reference lines");
  if (hyp_lines.empty()) throw input_error("exact_match: empty corpus");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < hyp_lines.size(); ++i)
    if (split_tokens(hyp_lines[i]) == split_tokens(ref_lines[i])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(hyp_lines.size());
}

}  // namespace dpenmt

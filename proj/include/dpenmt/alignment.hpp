#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dpenmt/error.hpp"
#include "dpenmt/tensor.hpp"

namespace dpenmt {

// Per-sentence-pair set of (source index, target index) links, 0-based.
struct AlignmentSet {
  std::set<std::pair<int, int>> links;
};

// Resolved target position of one source token.
struct TargetKey {
  // -1 marks an unaligned token; otherwise the clamped target position.
  int pos = -1;
  bool aligned() const { return pos >= 0; }
  static TargetKey unaligned() { return TargetKey{-1}; }
  static TargetKey at(int p) { return TargetKey{p}; }
  bool operator==(const TargetKey&) const = default;
};

using TargetKeyVector = std::vector<TargetKey>;

// Parses one line of whitespace-separated "i-j" pairs. An empty line is an
// empty alignment.
inline AlignmentSet parse_alignments(const std::string& line) {
  AlignmentSet out;
  std::istringstream is(line);
  std::string tok;
  int index = 0;
  while (is >> tok) {
    const auto dash = tok.find('-');
    bool ok = dash != std::string::npos && dash > 0 && dash + 1 < tok.size();
    int src = 0, tgt = 0;
    if (ok) {
      for (std::size_t i = 0; ok && i < tok.size(); ++i)
        if (i != dash && (tok[i] < '0' || tok[i] > '9')) ok = false;
      if (ok) {
        src = std::stoi(tok.substr(0, dash));
        tgt = std::stoi(tok.substr(dash + 1));
      }
    }
    if (!ok)
      throw parse_error("alignment token " + std::to_string(index) + " ('" + tok +
                        "') is not of the form i-j");
    out.links.emplace(src, tgt);
    ++index;
  }
  return out;
}

// Applies the per-token alignment rules: a token linked to one or more
// target positions takes the first (minimum) one; positions past the end of
// the source sentence are clamped to src_len - 1; tokens with no link stay
// unaligned.
inline TargetKeyVector assign_target_keys(const AlignmentSet& align, int src_len, int tgt_len) {
  TargetKeyVector keys(static_cast<std::size_t>(src_len), TargetKey::unaligned());
  for (const auto& [src, tgt] : align.links) {
    if (src < 0 || src >= src_len)
      throw input_error("alignment link " + std::to_string(src) + "-" + std::to_string(tgt) +
                        ": source index out of range for length " + std::to_string(src_len));
    if (tgt < 0 || tgt >= tgt_len)
      throw input_error("alignment link " + std::to_string(src) + "-" + std::to_string(tgt) +
                        ": target index out of range for length " + std::to_string(tgt_len));
    auto& key = keys[static_cast<std::size_t>(src)];
    if (!key.aligned() || tgt < key.pos) key.pos = tgt;
  }
  const int cap = src_len - 1;
  for (auto& key : keys)
    if (key.aligned() && key.pos > cap) key.pos = cap;
  return keys;
}

// Reorders tokens into target order. Unaligned tokens keep their original
// absolute slots; aligned tokens are stably sorted by (key, original index)
// and fill the remaining slots left to right, so tokens sharing a key move
// as one unit.
template <typename Token>
std::vector<Token> reorder_source(const std::vector<Token>& tokens, const TargetKeyVector& keys) {
  if (tokens.size() != keys.size())
    throw contract_error("reorder_source: " + std::to_string(tokens.size()) + " tokens vs " +
                         std::to_string(keys.size()) + " keys");
  const std::size_t n = tokens.size();
  std::vector<Token> out(n);
  std::vector<std::size_t> free_slots;
  std::vector<std::size_t> aligned_idx;
  for (std::size_t i = 0; i < n; ++i) {
    if (keys[i].aligned()) {
      free_slots.push_back(i);
      aligned_idx.push_back(i);
    } else {
      out[i] = tokens[i];
    }
  }
  std::stable_sort(aligned_idx.begin(), aligned_idx.end(),
                   [&](std::size_t a, std::size_t b) { return keys[a].pos < keys[b].pos; });
  for (std::size_t s = 0; s < aligned_idx.size(); ++s) out[free_slots[s]] = tokens[aligned_idx[s]];
  return out;
}

// Builds the supervision matrix: row i is the position-encoding row of the
// resolved target position, or of i itself for unaligned tokens.
template <typename S>
TensorT<S> supervising_positions(const TargetKeyVector& keys, const TensorT<S>& pe_table) {
  if (pe_table.rank() != 2)
    throw contract_error("supervising_positions: pe_table must be rank 2");
  const std::size_t max_len = pe_table.shape()[0], d = pe_table.shape()[1];
  std::vector<int> rows(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const std::size_t j = keys[i].aligned() ? static_cast<std::size_t>(keys[i].pos) : i;
    if (j >= max_len)
      throw contract_error("supervising_positions: position " + std::to_string(j) +
                           " >= max_len " + std::to_string(max_len));
    rows[i] = static_cast<int>(j);
  }
  std::vector<S> out(keys.size() * d);
  for (std::size_t i = 0; i < keys.size(); ++i)
    std::copy_n(pe_table.data().data() + static_cast<std::size_t>(rows[i]) * d, d,
                out.data() + i * d);
  return TensorT<S>({keys.size(), d}, std::move(out));
}

// ------------------------------------------------------------------
// Keys-file format: one line per sentence, space-separated entries,
// target position for aligned tokens and "-" for unaligned ones.
// ------------------------------------------------------------------

inline std::string format_keys(const TargetKeyVector& keys) {
  std::ostringstream os;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (i) os << ' ';
    if (keys[i].aligned())
      os << keys[i].pos;
    else
      os << '-';
  }
  return os.str();
}

inline TargetKeyVector parse_keys(const std::string& line) {
  TargetKeyVector keys;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    if (tok == "-") {
      keys.push_back(TargetKey::unaligned());
      continue;
    }
    for (char c : tok)
      if (c < '0' || c > '9')
        throw parse_error("keys entry " + std::to_string(keys.size()) + " ('" + tok +
                          "') is neither an integer nor '-'");
    keys.push_back(TargetKey::at(std::stoi(tok)));
  }
  return keys;
}

}  // namespace dpenmt

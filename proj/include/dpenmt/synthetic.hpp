#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dpenmt/alignment.hpp"
#include "dpenmt/config.hpp"
#include "dpenmt/error.hpp"
#include "dpenmt/vocab.hpp"

namespace dpenmt {

enum class PermutationFamily { kIdentity, kReverse, kRotate, kRandom };

inline PermutationFamily permutation_family_from_string(const std::string& s) {
  if (s == "identity") return PermutationFamily::kIdentity;
  if (s == "reverse") return PermutationFamily::kReverse;
  if (s == "rotate") return PermutationFamily::kRotate;
  if (s == "random") return PermutationFamily::kRandom;
  throw config_error("permutation family must be identity|reverse|rotate|random, got '" + s + "'");
}

inline const char* permutation_family_name(PermutationFamily f) {
  switch (f) {
    case PermutationFamily::kIdentity: return "identity";
    case PermutationFamily::kReverse: return "reverse";
    case PermutationFamily::kRotate: return "rotate";
    default: return "random";
  }
}

// A toy language pair where the target is the source under a known token
// mapping and a known permutation, so word alignments are exact and order
// supervision has a ground truth.
struct SyntheticTask {
  int vocab_size = 64;  // includes the 4 reserved ids
  int min_len = 5;
  int max_len = 12;
  PermutationFamily family = PermutationFamily::kReverse;
  int rotate_k = 1;
  int mapping_offset = 7;  // content-id shift from source token to target token
  std::uint64_t seed = 1;

  int content_tokens() const { return vocab_size - kNumReservedIds; }

  void validate() const {
    if (vocab_size < kNumReservedIds + 1)
      throw config_error("synthetic task: vocab must cover 4 reserved ids plus content");
    if (min_len < 1 || max_len < min_len)
      throw config_error("synthetic task: need 1 <= min_len <= max_len");
    if (max_len > 500)
      throw config_error("synthetic task: sentence length " + std::to_string(max_len) +
                         " exceeds the supported maximum");
    if (rotate_k < 0) throw config_error("synthetic task: rotate_k must be nonnegative");
  }

  static SyntheticTask from_config(const KeyValueConfig& kv) {
    SyntheticTask t;
    t.vocab_size = static_cast<int>(kv.get_int("vocab", t.vocab_size));
    t.min_len = static_cast<int>(kv.get_int("min_len", t.min_len));
    t.max_len = static_cast<int>(kv.get_int("max_len", t.max_len));
    t.family = permutation_family_from_string(kv.get_string("task", "reverse"));
    t.rotate_k = static_cast<int>(kv.get_int("rotate_k", t.rotate_k));
    t.mapping_offset = static_cast<int>(kv.get_int("mapping_offset", t.mapping_offset));
    t.seed = kv.get_uint("data_seed", t.seed);
    t.validate();
    return t;
  }
};

struct SyntheticData {
  Vocab vocab;  // shared by source and target side
  Bitext bitext;
  std::vector<std::string> src_lines;
  std::vector<std::string> tgt_lines;
  std::vector<std::string> align_lines;
  std::vector<TargetKeyVector> keys;
  std::vector<std::vector<int>> reordered_src;  // gold pre-reordered source ids
  std::vector<std::string> reordered_lines;
};

namespace detail {

inline std::vector<int> apply_permutation_inverse(const std::vector<int>& src,
                                                  const std::vector<std::size_t>& pi) {
  std::vector<int> tgt(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) tgt[pi[i]] = src[i];
  return tgt;
}

}  // namespace detail

// Generates n_pairs sentence pairs. Source token ids land at target slot
// pi(i); emitted alignments are the exact links i-pi(i), so feeding them
// through the reordering rules reconstructs the target word order.
inline SyntheticData make_synthetic(const SyntheticTask& task, std::size_t n_pairs) {
  task.validate();
  SyntheticData out;
  for (int id = kNumReservedIds; id < task.vocab_size; ++id)
    out.vocab.add("w" + std::to_string(id));

  std::mt19937_64 rng(task.seed);
  const int content = task.content_tokens();
  out.bitext.src.reserve(n_pairs);
  out.bitext.tgt.reserve(n_pairs);
  for (std::size_t p = 0; p < n_pairs; ++p) {
    const int len =
        task.min_len + static_cast<int>(rng() % static_cast<std::uint64_t>(
                                                    task.max_len - task.min_len + 1));
    std::vector<int> src(static_cast<std::size_t>(len));
    for (auto& t : src)
      t = kNumReservedIds + static_cast<int>(rng() % static_cast<std::uint64_t>(content));

    std::vector<std::size_t> pi(src.size());
    std::iota(pi.begin(), pi.end(), 0);
    switch (task.family) {
      case PermutationFamily::kIdentity:
        break;
      case PermutationFamily::kReverse:
        std::reverse(pi.begin(), pi.end());
        break;
      case PermutationFamily::kRotate:
        for (std::size_t i = 0; i < pi.size(); ++i)
          pi[i] = (i + static_cast<std::size_t>(task.rotate_k)) % pi.size();
        break;
      case PermutationFamily::kRandom:
        for (std::size_t i = pi.size(); i > 1; --i) std::swap(pi[i - 1], pi[rng() % i]);
        break;
    }

    std::vector<int> mapped(src.size());
    for (std::size_t i = 0; i < src.size(); ++i)
      mapped[i] = kNumReservedIds + (src[i] - kNumReservedIds + task.mapping_offset) % content;
    std::vector<int> tgt = detail::apply_permutation_inverse(mapped, pi);

    AlignmentSet align;
    std::string align_line;
    for (std::size_t i = 0; i < src.size(); ++i) {
      align.links.emplace(static_cast<int>(i), static_cast<int>(pi[i]));
      if (i) align_line += ' ';
      align_line += std::to_string(i) + "-" + std::to_string(pi[i]);
    }

    TargetKeyVector keys = assign_target_keys(align, len, len);
    out.keys.push_back(keys);
    out.reordered_src.push_back(reorder_source(src, keys));
    out.src_lines.push_back(out.vocab.decode_line(src));
    out.tgt_lines.push_back(out.vocab.decode_line(tgt));
    out.reordered_lines.push_back(out.vocab.decode_line(out.reordered_src.back()));
    out.align_lines.push_back(std::move(align_line));
    out.bitext.src.push_back(std::move(src));
    out.bitext.tgt.push_back(std::move(tgt));
  }
  return out;
}

}  // namespace dpenmt

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dpenmt/model.hpp"
#include "dpenmt/tensor.hpp"

namespace dpenmt {

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens, EOS included once finished
  double log_prob = 0.0;
  bool finished = false;

  double normalized_score() const {
    return tokens.empty() ? log_prob : log_prob / static_cast<double>(tokens.size());
  }
};

inline int default_max_out(std::size_t src_len) { return static_cast<int>(2 * src_len + 8); }

namespace detail {

// Candidates order: higher accumulated log-prob first, ties by token
// sequence (smaller ids first).
inline bool candidate_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

inline bool final_before(const Hypothesis& a, const Hypothesis& b) {
  const double sa = a.normalized_score(), sb = b.normalized_score();
  if (sa != sb) return sa > sb;
  return a.tokens < b.tokens;
}

template <typename S>
std::vector<S> row_log_softmax(const S* row, std::size_t v) {
  S mx = row[0];
  for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
  S sum = S(0);
  for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
  const S log_z = mx + std::log(sum);
  std::vector<S> out(v);
  for (std::size_t j = 0; j < v; ++j) out[j] = row[j] - log_z;
  return out;
}

// Replicates a single-sentence encode result so one decoder call expands
// every live hypothesis at once.
template <typename S>
typename TransformerModel<S>::EncodeResult tile_encoding(
    const typename TransformerModel<S>::EncodeResult& enc, std::size_t copies) {
  typename TransformerModel<S>::EncodeResult out;
  out.batch = copies;
  out.src_len = enc.src_len;
  const auto& src = enc.states.data();
  std::vector<S> data;
  data.reserve(src.size() * copies);
  for (std::size_t c = 0; c < copies; ++c) data.insert(data.end(), src.begin(), src.end());
  out.states = TensorT<S>({enc.src_len * copies, enc.states.shape()[1]}, std::move(data));
  out.src_mask.reserve(enc.src_mask.size() * copies);
  for (std::size_t c = 0; c < copies; ++c)
    out.src_mask.insert(out.src_mask.end(), enc.src_mask.begin(), enc.src_mask.end());
  return out;
}

}  // namespace detail

// Length-normalized beam search. EOS-extended candidates compete for beam
// slots by accumulated log-prob and retire to a finished pool; at the last
// step within the cap every surviving hypothesis is closed with EOS, so the
// search always returns a finished hypothesis. The final answer maximizes
// mean per-token log-prob, ties broken toward smaller token ids.
template <typename S>
Hypothesis beam_search_hypothesis(const TransformerModel<S>& model, const std::vector<int>& src,
                                  int beam, int max_out) {
  if (beam < 1) throw contract_error("beam_search: beam must be >= 1");
  if (max_out < 1) throw contract_error("beam_search: max_out must be >= 1");
  NoGradGuard no_grad;
  const ModelConfig& cfg = model.config();
  const std::size_t v = static_cast<std::size_t>(cfg.vocab_tgt);
  const int steps = std::min(max_out, cfg.max_len);
  auto enc = model.encoder_forward(src);

  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (int step = 0; step < steps && !live.empty(); ++step) {
    const std::size_t tgt_len = static_cast<std::size_t>(step) + 1;
    std::vector<int> tgt_in;
    tgt_in.reserve(live.size() * tgt_len);
    for (const auto& h : live) {
      tgt_in.push_back(cfg.bos_id);
      tgt_in.insert(tgt_in.end(), h.tokens.begin(), h.tokens.end());
    }
    auto tiled = detail::tile_encoding<S>(enc, live.size());
    TensorT<S> logits = model.decode(tgt_in, std::vector<std::uint8_t>(tgt_in.size(), 1), tiled,
                                     tgt_len);

    if (step + 1 == steps) {
      // Budget exhausted: close every live hypothesis with EOS.
      for (std::size_t h = 0; h < live.size(); ++h) {
        const S* last_row = logits.data().data() + ((h + 1) * tgt_len - 1) * v;
        std::vector<S> logp = detail::row_log_softmax(last_row, v);
        Hypothesis c = live[h];
        c.tokens.push_back(cfg.eos_id);
        c.log_prob += static_cast<double>(logp[static_cast<std::size_t>(cfg.eos_id)]);
        c.finished = true;
        finished.push_back(std::move(c));
      }
      live.clear();
      break;
    }

    std::vector<Hypothesis> candidates;
    candidates.reserve(live.size() * v);
    for (std::size_t h = 0; h < live.size(); ++h) {
      const S* last_row = logits.data().data() + ((h + 1) * tgt_len - 1) * v;
      std::vector<S> logp = detail::row_log_softmax(last_row, v);
      for (std::size_t tok = 0; tok < v; ++tok) {
        if (static_cast<int>(tok) == cfg.pad_id || static_cast<int>(tok) == cfg.bos_id) continue;
        Hypothesis c = live[h];
        c.tokens.push_back(static_cast<int>(tok));
        c.log_prob += static_cast<double>(logp[tok]);
        c.finished = static_cast<int>(tok) == cfg.eos_id;
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(beam),
                                                   candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), detail::candidate_before);
    candidates.resize(keep);
    live.clear();
    for (auto& c : candidates) {
      if (c.finished)
        finished.push_back(std::move(c));
      else
        live.push_back(std::move(c));
    }
  }

  if (finished.empty()) return Hypothesis{};
  const Hypothesis* best = &finished[0];
  for (const auto& h : finished)
    if (detail::final_before(h, *best)) best = &h;
  return *best;
}

template <typename S>
std::vector<int> beam_search(const TransformerModel<S>& model, const std::vector<int>& src,
                             int beam, int max_out) {
  Hypothesis best = beam_search_hypothesis(model, src, beam, max_out);
  if (best.finished) best.tokens.pop_back();  // strip EOS
  return best.tokens;
}

// Plain argmax decoding; ties go to the smallest token id. Stops at EOS or
// after max_out - 1 tokens (the EOS slot is reserved, mirroring the beam).
template <typename S>
std::vector<int> greedy_decode(const TransformerModel<S>& model, const std::vector<int>& src,
                               int max_out) {
  if (max_out < 1) throw contract_error("greedy_decode: max_out must be >= 1");
  NoGradGuard no_grad;
  const ModelConfig& cfg = model.config();
  const std::size_t v = static_cast<std::size_t>(cfg.vocab_tgt);
  const int steps = std::min(max_out, cfg.max_len);
  auto enc = model.encoder_forward(src);
  std::vector<int> tokens;
  for (int step = 0; step + 1 < steps; ++step) {
    std::vector<int> tgt_in{cfg.bos_id};
    tgt_in.insert(tgt_in.end(), tokens.begin(), tokens.end());
    TensorT<S> logits = model.decoder_forward(tgt_in, enc);
    const S* last_row = logits.data().data() + (tgt_in.size() - 1) * v;
    int best = -1;
    for (std::size_t tok = 0; tok < v; ++tok) {
      if (static_cast<int>(tok) == cfg.pad_id || static_cast<int>(tok) == cfg.bos_id) continue;
      if (best < 0 || last_row[tok] > last_row[best]) best = static_cast<int>(tok);
    }
    if (best == cfg.eos_id) break;
    tokens.push_back(best);
  }
  return tokens;
}

struct TwoPassResult {
  std::vector<int> output;     // translation of the machine-reordered source
  std::vector<int> reordered;  // what the reordering model produced
  bool truncated = false;      // some pass only stopped because the cap forced EOS
};

namespace detail {

template <typename S>
bool used_full_budget(const Hypothesis& h, const TransformerModel<S>& model, int max_out) {
  return static_cast<int>(h.tokens.size()) >= std::min(max_out, model.config().max_len);
}

}  // namespace detail

// Pipeline: the first model rewrites the source into target order, the
// second translates the rewrite. A degenerate empty rewrite falls back to
// the original source so the translator always sees a sentence.
template <typename S>
TwoPassResult run_2pt(const TransformerModel<S>& reorder_model,
                      const TransformerModel<S>& translate_model, const std::vector<int>& src,
                      int beam = 5) {
  TwoPassResult res;
  const int cap1 = default_max_out(src.size());
  Hypothesis first = beam_search_hypothesis(reorder_model, src, beam, cap1);
  res.truncated = detail::used_full_budget(first, reorder_model, cap1);
  if (first.finished) first.tokens.pop_back();
  res.reordered = first.tokens.empty() ? src : std::move(first.tokens);
  const int cap2 = default_max_out(res.reordered.size());
  Hypothesis second = beam_search_hypothesis(translate_model, res.reordered, beam, cap2);
  res.truncated = res.truncated || detail::used_full_budget(second, translate_model, cap2);
  if (second.finished) second.tokens.pop_back();
  res.output = std::move(second.tokens);
  return res;
}

}  // namespace dpenmt

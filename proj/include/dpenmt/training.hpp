#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dpenmt/alignment.hpp"
#include "dpenmt/bleu.hpp"
#include "dpenmt/checkpoint.hpp"
#include "dpenmt/config.hpp"
#include "dpenmt/decoding.hpp"
#include "dpenmt/error.hpp"
#include "dpenmt/model.hpp"

namespace dpenmt {

// Inverse-square-root schedule with linear warmup; peaks at step == warmup.
inline double lr_schedule(std::uint64_t step, int d_model, std::uint64_t warmup,
                          double lr_scale = 1.0) {
  if (step == 0) throw contract_error("lr_schedule: step starts at 1");
  if (warmup == 0) throw config_error("lr_schedule: warmup must be positive");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return lr_scale / std::sqrt(static_cast<double>(d_model)) *
         std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// First/second moments parallel to the parameter registry.
struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::uint64_t t = 0;

  static AdamState init(const ParamRegistry<float>& reg) {
    AdamState st;
    st.m.reserve(reg.items.size());
    st.v.reserve(reg.items.size());
    for (const auto& [name, p] : reg.items) {
      st.m.emplace_back(p.numel(), 0.0f);
      st.v.emplace_back(p.numel(), 0.0f);
    }
    return st;
  }
};

inline void adam_step(ParamRegistry<float>& reg, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  if (state.m.size() != reg.items.size())
    throw contract_error("adam_step: state does not match the parameter set");
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t pi = 0; pi < reg.items.size(); ++pi) {
    auto& p = reg.items[pi].second;
    if (!p.has_grad())
      throw contract_error("adam_step: parameter '" + reg.items[pi].first + "' has no gradient");
    auto& g = p.grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = static_cast<float>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]);
      v[i] = static_cast<float>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.data()[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// Scales gradients so their global L2 norm does not exceed max_norm;
// returns the pre-clip norm.
inline double clip_global_norm(ParamRegistry<float>& reg, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : reg.items) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float f = static_cast<float>(max_norm / norm);
    for (auto& [name, p] : reg.items) {
      if (!p.has_grad()) continue;
      for (float& g : p.grad()) g *= f;
    }
  }
  return norm;
}

// ------------------------------------------------------------------
// Batching: length-bucketed batches under a fixed token budget, batch
// order shuffled per epoch from the run seed.
// ------------------------------------------------------------------

inline std::vector<std::vector<std::size_t>> plan_batches(const Bitext& data,
                                                          std::size_t token_budget) {
  if (data.size() == 0) throw input_error("plan_batches: empty corpus");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const std::size_t la = data.src[a].size() + data.tgt[a].size();
    const std::size_t lb = data.src[b].size() + data.tgt[b].size();
    return la < lb;
  });
  std::vector<std::vector<std::size_t>> batches;
  std::size_t max_src = 0, max_tgt = 0;
  std::vector<std::size_t> current;
  for (std::size_t idx : order) {
    const std::size_t ns = std::max(max_src, data.src[idx].size());
    const std::size_t nt = std::max(max_tgt, data.tgt[idx].size() + 1);
    if (!current.empty() && (current.size() + 1) * (ns + nt) > token_budget) {
      batches.push_back(std::move(current));
      current.clear();
      max_src = max_tgt = 0;
    }
    max_src = std::max(max_src, data.src[idx].size());
    max_tgt = std::max(max_tgt, data.tgt[idx].size() + 1);
    current.push_back(idx);
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

inline std::vector<std::size_t> epoch_order(std::size_t n_batches, std::uint64_t seed,
                                            std::uint64_t epoch) {
  std::vector<std::size_t> order(n_batches);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + epoch + 1);
  for (std::size_t i = n_batches; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

// Pads selected sentence pairs into one batch. Supervision rows follow the
// alignment keys (identity for unaligned tokens).
inline PaddedBatch make_batch(const Bitext& data, const std::vector<TargetKeyVector>* keys,
                              const std::vector<std::size_t>& indices, const ModelConfig& cfg) {
  if (indices.empty()) throw contract_error("make_batch: no sentences");
  PaddedBatch b;
  b.batch = indices.size();
  for (std::size_t idx : indices) {
    b.src_len = std::max(b.src_len, data.src[idx].size());
    b.tgt_len = std::max(b.tgt_len, data.tgt[idx].size() + 1);
  }
  if (b.src_len > static_cast<std::size_t>(cfg.max_len) ||
      b.tgt_len > static_cast<std::size_t>(cfg.max_len))
    throw input_error("make_batch: sentence length exceeds model max_len " +
                      std::to_string(cfg.max_len));
  const std::size_t n = b.batch;
  b.src_ids.assign(n * b.src_len, cfg.pad_id);
  b.src_mask.assign(n * b.src_len, 0);
  b.tgt_in.assign(n * b.tgt_len, cfg.pad_id);
  b.tgt_out.assign(n * b.tgt_len, cfg.pad_id);
  b.tgt_mask.assign(n * b.tgt_len, 0);
  b.sup_row.assign(n * b.src_len, -1);
  b.has_supervision = keys != nullptr;
  for (std::size_t s = 0; s < n; ++s) {
    const auto& src = data.src[indices[s]];
    const auto& tgt = data.tgt[indices[s]];
    for (std::size_t i = 0; i < src.size(); ++i) {
      b.src_ids[s * b.src_len + i] = src[i];
      b.src_mask[s * b.src_len + i] = 1;
    }
    b.tgt_in[s * b.tgt_len + 0] = cfg.bos_id;
    for (std::size_t i = 0; i < tgt.size(); ++i) {
      b.tgt_in[s * b.tgt_len + i + 1] = tgt[i];
      b.tgt_out[s * b.tgt_len + i] = tgt[i];
      b.tgt_mask[s * b.tgt_len + i] = 1;
    }
    b.tgt_out[s * b.tgt_len + tgt.size()] = cfg.eos_id;
    b.tgt_mask[s * b.tgt_len + tgt.size()] = 1;
    if (keys) {
      const auto& kv = (*keys)[indices[s]];
      if (kv.size() != src.size())
        throw input_error("make_batch: keys length " + std::to_string(kv.size()) +
                          " vs sentence length " + std::to_string(src.size()));
      for (std::size_t i = 0; i < src.size(); ++i)
        b.sup_row[s * b.src_len + i] = kv[i].aligned() ? kv[i].pos : static_cast<int>(i);
    }
  }
  return b;
}

// ------------------------------------------------------------------
// Training run
// ------------------------------------------------------------------

struct RunConfig {
  std::uint64_t updates = 2000;
  std::uint64_t valid_interval = 100;
  std::size_t token_budget = 512;
  std::uint64_t warmup = 400;
  double lr_scale = 1.0;
  double clip_norm = 1.0;
  int beam = 5;
  std::uint64_t seed = 1;
  int avg_last = 5;

  void validate() const {
    if (updates == 0 || valid_interval == 0)
      throw config_error("updates and valid_interval must be positive");
    if (token_budget < 4) throw config_error("token_budget too small");
    if (beam < 1) throw config_error("beam must be >= 1");
    if (avg_last < 1) throw config_error("avg_last must be >= 1");
  }
};

inline const std::set<std::string>& model_config_keys() {
  static const std::set<std::string> keys{
      "d_model", "n_heads",    "enc_layers",     "dec_layers", "ff_dim",
      "max_len", "dpe_layers", "dpe_mode",       "lambda",     "label_smoothing"};
  return keys;
}

inline const std::set<std::string>& run_config_keys() {
  static const std::set<std::string> keys{"updates",  "valid_interval", "token_budget",
                                          "warmup",   "lr_scale",       "clip_norm",
                                          "beam",     "seed",           "avg_last"};
  return keys;
}

inline ModelConfig model_config_from(const KeyValueConfig& kv, int vocab_src, int vocab_tgt) {
  ModelConfig cfg;
  cfg.d_model = static_cast<int>(kv.get_int("d_model", cfg.d_model));
  cfg.n_heads = static_cast<int>(kv.get_int("n_heads", cfg.n_heads));
  cfg.n_enc_layers = static_cast<int>(kv.get_int("enc_layers", cfg.n_enc_layers));
  cfg.n_dec_layers = static_cast<int>(kv.get_int("dec_layers", cfg.n_dec_layers));
  cfg.ff_dim = static_cast<int>(kv.get_int("ff_dim", 4 * cfg.d_model));
  cfg.max_len = static_cast<int>(kv.get_int("max_len", cfg.max_len));
  cfg.dpe_layers = static_cast<int>(kv.get_int("dpe_layers", cfg.dpe_layers));
  cfg.dpe_mode = dpe_mode_from_string(kv.get_string("dpe_mode", "replace"));
  cfg.lambda = static_cast<float>(kv.get_double("lambda", cfg.lambda));
  cfg.label_smoothing = static_cast<float>(kv.get_double("label_smoothing", cfg.label_smoothing));
  cfg.vocab_src = vocab_src;
  cfg.vocab_tgt = vocab_tgt;
  cfg.validate();
  return cfg;
}

inline RunConfig run_config_from(const KeyValueConfig& kv) {
  RunConfig rc;
  rc.updates = kv.get_uint("updates", rc.updates);
  rc.valid_interval = kv.get_uint("valid_interval", rc.valid_interval);
  rc.token_budget = static_cast<std::size_t>(kv.get_uint("token_budget", rc.token_budget));
  rc.warmup = kv.get_uint("warmup", rc.warmup);
  rc.lr_scale = kv.get_double("lr_scale", rc.lr_scale);
  rc.clip_norm = kv.get_double("clip_norm", rc.clip_norm);
  rc.beam = static_cast<int>(kv.get_int("beam", rc.beam));
  rc.seed = kv.get_uint("seed", rc.seed);
  rc.avg_last = static_cast<int>(kv.get_int("avg_last", rc.avg_last));
  rc.validate();
  return rc;
}

struct ValidationEntry {
  std::uint64_t step = 0;
  double translation = 0.0;
  double order = 0.0;
  double total = 0.0;
  double bleu = 0.0;
};

struct TrainResult {
  std::vector<ValidationEntry> log;
  double initial_translation = 0.0;
  double initial_order = 0.0;
  std::vector<std::string> checkpoint_paths;
  std::string averaged_path;
  std::string metrics_path;
  Checkpoint averaged;
  double wall_seconds = 0.0;
};

namespace detail {

struct DevLosses {
  double translation = 0.0;
  double order = 0.0;
};

// Token-weighted dev losses under teacher forcing.
inline DevLosses eval_losses(const TransformerModel<float>& model, const Bitext& dev,
                             const std::vector<TargetKeyVector>* keys,
                             const std::vector<std::vector<std::size_t>>& batches) {
  NoGradGuard no_grad;
  double ce_sum = 0.0, ord_sum = 0.0;
  std::size_t ce_n = 0, ord_n = 0;
  for (const auto& indices : batches) {
    PaddedBatch b = make_batch(dev, keys, indices, model.config());
    auto loss = compute_loss(model, b);
    std::size_t toks = 0;
    for (auto m : b.tgt_mask) toks += m;
    ce_sum += static_cast<double>(loss.translation.item()) * static_cast<double>(toks);
    ce_n += toks;
    if (loss.has_order) {
      std::size_t stoks = 0;
      for (auto m : b.src_mask) stoks += m;
      ord_sum += static_cast<double>(loss.order.item()) * static_cast<double>(stoks);
      ord_n += stoks;
    }
  }
  DevLosses out;
  out.translation = ce_n ? ce_sum / static_cast<double>(ce_n) : 0.0;
  out.order = ord_n ? ord_sum / static_cast<double>(ord_n) : 0.0;
  return out;
}

inline double eval_bleu(const TransformerModel<float>& model, const Bitext& dev, int beam) {
  std::vector<std::vector<std::string>> hyps, refs;
  hyps.reserve(dev.size());
  refs.reserve(dev.size());
  for (std::size_t i = 0; i < dev.size(); ++i) {
    std::vector<int> hyp =
        beam_search(model, dev.src[i], beam, default_max_out(dev.src[i].size()));
    std::vector<std::string> htoks, rtoks;
    for (int id : hyp) htoks.push_back(std::to_string(id));
    for (int id : dev.tgt[i]) rtoks.push_back(std::to_string(id));
    hyps.push_back(std::move(htoks));
    refs.push_back(std::move(rtoks));
  }
  return bleu(hyps, refs);
}

inline std::string format_metrics_line(const ValidationEntry& e) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%llu\t%.9g\t%.9g\t%.9g\t%.4f",
                static_cast<unsigned long long>(e.step), e.translation, e.order, e.total, e.bleu);
  return buf;
}

}  // namespace detail

// Deterministic training: (seed, config, corpus) fix every checkpoint bit.
// Writes ckpt_<step>.dpec and metrics.log (one line per validation: step,
// translation loss, order loss, total loss, dev BLEU, tab-separated) under
// out_dir, plus an averaged.dpec over the last avg_last checkpoints.
inline TrainResult train(const ModelConfig& model_cfg, const RunConfig& run,
                         const Bitext& train_data, const std::vector<TargetKeyVector>* train_keys,
                         const Bitext& dev_data, const std::vector<TargetKeyVector>* dev_keys,
                         const std::string& out_dir) {
  model_cfg.validate();
  run.validate();
  if (model_cfg.dpe_layers > 0 && !train_keys)
    throw input_error("train: the position network needs a supervision keys file");
  if (train_keys && train_keys->size() != train_data.size())
    throw input_error("train: " + std::to_string(train_keys->size()) + " key lines vs " +
                      std::to_string(train_data.size()) + " training pairs");
  if (dev_keys && dev_keys->size() != dev_data.size())
    throw input_error("train: " + std::to_string(dev_keys->size()) + " key lines vs " +
                      std::to_string(dev_data.size()) + " dev pairs");
  std::filesystem::create_directories(out_dir);

  const auto t0 = std::chrono::steady_clock::now();
  TransformerModel<float> model(model_cfg, run.seed);
  AdamState adam = AdamState::init(model.params());
  auto batches = plan_batches(train_data, run.token_budget);
  auto dev_batches = plan_batches(dev_data, run.token_budget);

  TrainResult result;
  const bool track_order = model.has_dpe() && dev_keys != nullptr;
  {
    auto init = detail::eval_losses(model, dev_data, track_order ? dev_keys : nullptr, dev_batches);
    result.initial_translation = init.translation;
    result.initial_order = init.order;
  }

  std::ofstream metrics(out_dir + "/metrics.log");
  if (!metrics) throw input_error("cannot write " + out_dir + "/metrics.log");
  result.metrics_path = out_dir + "/metrics.log";

  std::uint64_t step = 0;
  for (std::uint64_t epoch = 0; step < run.updates; ++epoch) {
    for (std::size_t bi : epoch_order(batches.size(), run.seed, epoch)) {
      PaddedBatch batch = make_batch(train_data, train_keys, batches[bi], model_cfg);
      auto loss = compute_loss(model, batch);
      model.zero_grads();
      backward(loss.total);
      clip_global_norm(model.params(), run.clip_norm);
      ++step;
      adam_step(model.params(), adam, lr_schedule(step, model_cfg.d_model, run.warmup,
                                                  run.lr_scale));

      if (step % run.valid_interval == 0) {
        auto dev = detail::eval_losses(model, dev_data, track_order ? dev_keys : nullptr,
                                       dev_batches);
        ValidationEntry e;
        e.step = step;
        e.translation = dev.translation;
        e.order = dev.order;
        e.total = track_order ? model_cfg.lambda * dev.translation +
                                    (1.0 - model_cfg.lambda) * dev.order
                              : dev.translation;
        e.bleu = detail::eval_bleu(model, dev_data, run.beam);
        metrics << detail::format_metrics_line(e) << '\n';
        metrics.flush();
        result.log.push_back(e);

        char name[64];
        std::snprintf(name, sizeof(name), "ckpt_%08llu.dpec",
                      static_cast<unsigned long long>(step));
        const std::string path = out_dir + "/" + name;
        Checkpoint::from_model(model, step, run.seed).save(path);
        result.checkpoint_paths.push_back(path);
      }
      if (step == run.updates) break;
    }
  }

  const std::size_t k =
      std::min<std::size_t>(static_cast<std::size_t>(run.avg_last), result.checkpoint_paths.size());
  if (k > 0) {
    std::vector<std::string> tail(result.checkpoint_paths.end() - static_cast<std::ptrdiff_t>(k),
                                  result.checkpoint_paths.end());
    result.averaged = average_checkpoint_files(tail);
    result.averaged_path = out_dir + "/averaged.dpec";
    result.averaged.save(result.averaged_path);
  } else {
    result.averaged = Checkpoint::from_model(model, step, run.seed);
  }
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace dpenmt

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dpenmt/dpe.hpp"
#include "dpenmt/error.hpp"
#include "dpenmt/tensor.hpp"
#include "dpenmt/transformer.hpp"
#include "dpenmt/vocab.hpp"

namespace dpenmt {

// A padded batch of sentence pairs in plain arrays. Target input rows start
// with BOS; target output rows end with EOS. sup_row[i] is the position-
// encoding row supervising source slot i (-1 where absent or padded).
struct PaddedBatch {
  std::size_t batch = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;           // decoder input length (incl. BOS)
  std::vector<int> src_ids;          // batch * src_len
  std::vector<std::uint8_t> src_mask;
  std::vector<int> tgt_in;           // batch * tgt_len
  std::vector<int> tgt_out;
  std::vector<std::uint8_t> tgt_mask;
  std::vector<int> sup_row;          // batch * src_len
  bool has_supervision = false;
  std::size_t sentence_count() const { return batch; }
};

// Encoder–decoder Transformer with an optional dynamic position network in
// front of the encoder stack.
template <typename S>
class TransformerModel {
 public:
  TransformerModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    reg_.run_seed = seed;
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    src_embed_ = reg_.make("src_embed.weight",
                           {static_cast<std::size_t>(cfg_.vocab_src), d}, Init::kEmbedding);
    tgt_embed_ = reg_.make("tgt_embed.weight",
                           {static_cast<std::size_t>(cfg_.vocab_tgt), d}, Init::kEmbedding);
    dpe_ = DpeStack<S>(reg_, cfg_);
    enc_layers_.reserve(static_cast<std::size_t>(cfg_.n_enc_layers));
    for (int i = 0; i < cfg_.n_enc_layers; ++i)
      enc_layers_.emplace_back(reg_, "enc." + std::to_string(i), cfg_);
    dec_layers_.reserve(static_cast<std::size_t>(cfg_.n_dec_layers));
    for (int i = 0; i < cfg_.n_dec_layers; ++i)
      dec_layers_.emplace_back(reg_, "dec." + std::to_string(i), cfg_);
    out_w_ = reg_.make("out.weight", {d, static_cast<std::size_t>(cfg_.vocab_tgt)}, Init::kXavier);
    out_b_ = reg_.make("out.bias", {static_cast<std::size_t>(cfg_.vocab_tgt)}, Init::kZeros);
    pe_ = sinusoidal_pe<S>(cfg_.max_len, cfg_.d_model);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry<S>& params() { return reg_; }
  const ParamRegistry<S>& params() const { return reg_; }
  std::size_t param_count() const { return reg_.total_count(); }
  void zero_grads() { reg_.zero_grads(); }
  const TensorT<S>& pe_table() const { return pe_; }
  bool has_dpe() const { return dpe_.enabled(); }

  struct EncodeResult {
    TensorT<S> states;   // batch*src_len x d
    TensorT<S> refined;  // position-network output; empty handle when off
    std::size_t batch = 0;
    std::size_t src_len = 0;
    std::vector<std::uint8_t> src_mask;
  };

  EncodeResult encode(const std::vector<int>& src_ids, const std::vector<std::uint8_t>& src_mask,
                      std::size_t batch, std::size_t src_len) const {
    if (batch == 0 || src_len == 0 || src_ids.empty())
      throw contract_error("encode: empty input");
    if (src_ids.size() != batch * src_len || src_mask.size() != src_ids.size())
      throw dimension_error("encode: ids/mask sizes vs batch " + std::to_string(batch) + " x " +
                            std::to_string(src_len));
    if (src_len > static_cast<std::size_t>(cfg_.max_len))
      throw dimension_error("encode: length " + std::to_string(src_len) + " exceeds max_len " +
                            std::to_string(cfg_.max_len));
    TensorT<S> emb = embedding_rows(src_embed_, src_ids);
    TensorT<S> enriched = enrich(scale(emb, std::sqrt(static_cast<S>(cfg_.d_model))), pe_, batch);
    auto mask = key_padding_mask<S>(src_mask, batch, src_len, src_len);

    EncodeResult res;
    res.batch = batch;
    res.src_len = src_len;
    res.src_mask = src_mask;
    TensorT<S> x = enriched;
    if (dpe_.enabled()) {
      res.refined = dpe_.forward(enriched, mask, batch, src_len);
      switch (cfg_.dpe_mode) {
        case DpeMode::kReplace: x = res.refined; break;
        case DpeMode::kResidual: x = add(enriched, res.refined); break;
        case DpeMode::kBypass: break;
      }
    }
    for (const auto& layer : enc_layers_) x = layer(x, mask, batch, src_len);
    res.states = x;
    return res;
  }

  // Returns vocabulary logits, one row per decoder input position.
  TensorT<S> decode(const std::vector<int>& tgt_in, const std::vector<std::uint8_t>& tgt_mask,
                    const EncodeResult& enc, std::size_t tgt_len) const {
    const std::size_t batch = enc.batch;
    if (tgt_len == 0 || tgt_in.empty()) throw contract_error("decode: empty target");
    if (tgt_in.size() != batch * tgt_len || tgt_mask.size() != tgt_in.size())
      throw dimension_error("decode: ids/mask sizes vs batch " + std::to_string(batch) + " x " +
                            std::to_string(tgt_len));
    if (tgt_len > static_cast<std::size_t>(cfg_.max_len))
      throw dimension_error("decode: length " + std::to_string(tgt_len) + " exceeds max_len " +
                            std::to_string(cfg_.max_len));
    TensorT<S> emb = embedding_rows(tgt_embed_, tgt_in);
    TensorT<S> x = enrich(scale(emb, std::sqrt(static_cast<S>(cfg_.d_model))), pe_, batch);
    auto self_mask = causal_padding_mask<S>(tgt_mask, batch, tgt_len);
    auto cross_mask = key_padding_mask<S>(enc.src_mask, batch, tgt_len, enc.src_len);
    for (const auto& layer : dec_layers_)
      x = layer(x, enc.states, self_mask, cross_mask, batch, tgt_len, enc.src_len);
    return add_bias(matmul(x, out_w_), out_b_);
  }

  // Single-sentence conveniences.
  EncodeResult encoder_forward(const std::vector<int>& src_ids) const {
    if (src_ids.empty()) throw contract_error("encoder_forward: empty input");
    return encode(src_ids, std::vector<std::uint8_t>(src_ids.size(), 1), 1, src_ids.size());
  }

  TensorT<S> decoder_forward(const std::vector<int>& tgt_ids, const EncodeResult& enc) const {
    if (tgt_ids.empty()) throw contract_error("decoder_forward: empty target");
    return decode(tgt_ids, std::vector<std::uint8_t>(tgt_ids.size(), 1), enc, tgt_ids.size());
  }

  TensorT<S> dpe_forward(const TensorT<S>& enriched, const std::vector<std::uint8_t>& mask,
                         std::size_t batch, std::size_t len) const {
    return dpe_.forward(enriched, key_padding_mask<S>(mask, batch, len, len), batch, len);
  }

 private:
  ModelConfig cfg_;
  ParamRegistry<S> reg_;
  TensorT<S> src_embed_, tgt_embed_;
  DpeStack<S> dpe_;
  std::vector<EncoderLayer<S>> enc_layers_;
  std::vector<DecoderLayer<S>> dec_layers_;
  TensorT<S> out_w_, out_b_;
  TensorT<S> pe_;
};

// Scalar graph roots of one training step.
template <typename S>
struct LossBreakdown {
  TensorT<S> total;
  TensorT<S> translation;
  TensorT<S> order;  // empty handle when the position network is off
  bool has_order = false;
};

// Builds the supervision matrix for a padded batch from precomputed row
// indices (pad slots point at row 0 and are masked out of the loss).
template <typename S>
TensorT<S> batch_supervision(const std::vector<int>& sup_row, const TensorT<S>& pe_table) {
  const std::size_t d = pe_table.shape()[1];
  std::vector<S> data(sup_row.size() * d, S(0));
  for (std::size_t i = 0; i < sup_row.size(); ++i) {
    const int r = sup_row[i] < 0 ? 0 : sup_row[i];
    if (static_cast<std::size_t>(r) >= pe_table.shape()[0])
      throw contract_error("batch_supervision: row " + std::to_string(r) + " out of table");
    std::copy_n(pe_table.data().data() + static_cast<std::size_t>(r) * d, d, data.data() + i * d);
  }
  return TensorT<S>({sup_row.size(), d}, std::move(data));
}

template <typename S>
LossBreakdown<S> compute_loss(const TransformerModel<S>& model, const PaddedBatch& batch) {
  const ModelConfig& cfg = model.config();
  auto enc = model.encode(batch.src_ids, batch.src_mask, batch.batch, batch.src_len);
  TensorT<S> logits = model.decode(batch.tgt_in, batch.tgt_mask, enc, batch.tgt_len);
  LossBreakdown<S> out;
  out.translation =
      cross_entropy(logits, batch.tgt_out, batch.tgt_mask, static_cast<S>(cfg.label_smoothing));
  if (model.has_dpe() && batch.has_supervision) {
    TensorT<S> sup = batch_supervision(batch.sup_row, model.pe_table());
    out.order = order_loss(enc.refined, sup, batch.src_mask);
    out.has_order = true;
    out.total = total_loss(out.translation, out.order, static_cast<S>(cfg.lambda));
  } else {
    out.total = out.translation;
  }
  return out;
}

}  // namespace dpenmt

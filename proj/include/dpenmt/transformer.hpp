#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dpenmt/error.hpp"
#include "dpenmt/tensor.hpp"
#include "dpenmt/vocab.hpp"

namespace dpenmt {

constexpr float kMaskValue = -1e9f;
constexpr double kLayerNormEps = 1e-5;

// How the refined embeddings produced by the position network meet the
// first encoder layer.
enum class DpeMode {
  kReplace,   // encoder consumes the refined embeddings directly
  kResidual,  // encoder consumes enriched + refined
  kBypass,    // refined embeddings are computed but not fed to the encoder
};

inline DpeMode dpe_mode_from_string(const std::string& s) {
  if (s == "replace") return DpeMode::kReplace;
  if (s == "residual") return DpeMode::kResidual;
  if (s == "bypass") return DpeMode::kBypass;
  throw config_error("dpe_mode must be replace|residual|bypass, got '" + s + "'");
}

inline const char* dpe_mode_name(DpeMode m) {
  switch (m) {
    case DpeMode::kReplace: return "replace";
    case DpeMode::kResidual: return "residual";
    default: return "bypass";
  }
}

struct ModelConfig {
  int d_model = 64;
  int n_heads = 2;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int ff_dim = 256;
  int vocab_src = 0;
  int vocab_tgt = 0;
  int max_len = 64;
  int dpe_layers = 0;        // 0 disables the position network (baseline)
  float lambda = 0.5f;       // weight of the translation loss in the blend
  float label_smoothing = 0.1f;
  DpeMode dpe_mode = DpeMode::kReplace;
  int pad_id = kPadId;
  int bos_id = kBosId;
  int eos_id = kEosId;

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
      throw config_error("d_model " + std::to_string(d_model) + " must be divisible by n_heads " +
                         std::to_string(n_heads));
    if (d_model % 2 != 0) throw config_error("d_model must be even for sinusoidal encoding");
    if (n_enc_layers <= 0 || n_dec_layers <= 0 || ff_dim <= 0)
      throw config_error("layer counts and ff_dim must be positive");
    if (vocab_src < kNumReservedIds + 1 || vocab_tgt < kNumReservedIds + 1)
      throw config_error("vocab sizes must cover the reserved ids plus content");
    if (max_len < 2) throw config_error("max_len must be at least 2");
    if (dpe_layers < 0) throw config_error("dpe_layers must be nonnegative");
    if (lambda < 0.0f || lambda > 1.0f) throw config_error("lambda must be in [0, 1]");
    if (label_smoothing < 0.0f || label_smoothing >= 1.0f)
      throw config_error("label_smoothing must be in [0, 1)");
  }
};

// Fixed table of interleaved sin/cos rows: row p column 2i holds
// sin(p / 10000^(2i/d)), column 2i+1 the matching cos.
template <typename S>
TensorT<S> sinusoidal_pe(int max_len, int d_model) {
  if (d_model <= 0 || d_model % 2 != 0)
    throw config_error("sinusoidal_pe: d_model must be positive and even, got " +
                       std::to_string(d_model));
  if (max_len <= 0) throw config_error("sinusoidal_pe: max_len must be positive");
  std::vector<S> data(static_cast<std::size_t>(max_len) * d_model);
  for (int p = 0; p < max_len; ++p)
    for (int i = 0; 2 * i < d_model; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / d_model);
      const double angle = p * freq;
      data[static_cast<std::size_t>(p) * d_model + 2 * i] = static_cast<S>(std::sin(angle));
      data[static_cast<std::size_t>(p) * d_model + 2 * i + 1] = static_cast<S>(std::cos(angle));
    }
  return TensorT<S>({static_cast<std::size_t>(max_len), static_cast<std::size_t>(d_model)},
                    std::move(data));
}

// Adds position rows to a batch of embeddings: row (b, t) gets pe_table[t].
// The table is a fixed constant; gradients pass through to the embeddings
// only.
template <typename S>
TensorT<S> enrich(const TensorT<S>& embeddings, const TensorT<S>& pe_table, std::size_t batch = 1) {
  if (embeddings.rank() != 2 || pe_table.rank() != 2 ||
      embeddings.shape()[1] != pe_table.shape()[1])
    throw dimension_error("enrich: embeddings " + shape_str(embeddings.shape()) + " vs table " +
                          shape_str(pe_table.shape()));
  if (batch == 0 || embeddings.shape()[0] % batch != 0)
    throw dimension_error("enrich: rows " + std::to_string(embeddings.shape()[0]) +
                          " not a multiple of batch " + std::to_string(batch));
  const std::size_t seq_len = embeddings.shape()[0] / batch;
  const std::size_t d = embeddings.shape()[1];
  if (seq_len > pe_table.shape()[0])
    throw dimension_error("enrich: sequence length " + std::to_string(seq_len) +
                          " exceeds table length " + std::to_string(pe_table.shape()[0]));
  std::vector<S> out(embeddings.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < seq_len; ++t)
      for (std::size_t j = 0; j < d; ++j)
        out[(b * seq_len + t) * d + j] =
            embeddings.data()[(b * seq_len + t) * d + j] + pe_table.data()[t * d + j];
  auto bw = [](typename TensorT<S>::Node& nd) {
    auto& p = nd.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
  };
  return TensorT<S>::from_op(embeddings.shape(), std::move(out), {embeddings}, bw);
}

// ------------------------------------------------------------------
// Additive attention masks (plain data, shared across layers)
// ------------------------------------------------------------------

// Blocks attention to padded keys.
template <typename S>
std::shared_ptr<std::vector<S>> key_padding_mask(const std::vector<std::uint8_t>& key_real,
                                                 std::size_t batch, std::size_t q_len,
                                                 std::size_t k_len) {
  auto mask = std::make_shared<std::vector<S>>(batch * q_len * k_len, S(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < k_len; ++j)
      if (!key_real[b * k_len + j])
        for (std::size_t i = 0; i < q_len; ++i)
          (*mask)[(b * q_len + i) * k_len + j] = S(kMaskValue);
  return mask;
}

// Blocks future positions and padded keys.
template <typename S>
std::shared_ptr<std::vector<S>> causal_padding_mask(const std::vector<std::uint8_t>& key_real,
                                                    std::size_t batch, std::size_t len) {
  auto mask = std::make_shared<std::vector<S>>(batch * len * len, S(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < len; ++j)
        if (j > i || (!key_real[b * len + j] && j != i))
          (*mask)[(b * len + i) * len + j] = S(kMaskValue);
  return mask;
}

// ------------------------------------------------------------------
// Parameters
// ------------------------------------------------------------------

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Every parameter is seeded from (run seed, its own name), so adding or
// removing unrelated parameters does not shift the init of existing ones.
inline std::uint64_t param_seed(std::uint64_t run_seed, const std::string& name) {
  return fnv1a64(name) ^ (run_seed * 0x9E3779B97F4A7C15ULL + 0x85EBCA6B);
}

enum class Init { kZeros, kOnes, kEmbedding, kXavier };

template <typename S>
struct ParamRegistry {
  std::uint64_t run_seed = 0;
  std::vector<std::pair<std::string, TensorT<S>>> items;

  TensorT<S> make(const std::string& name, Shape shape, Init init) {
    TensorT<S> t(shape);
    switch (init) {
      case Init::kZeros:
        break;
      case Init::kOnes:
        std::fill(t.data().begin(), t.data().end(), S(1));
        break;
      case Init::kEmbedding:
        fill_uniform(t, S(-0.1), S(0.1), param_seed(run_seed, name));
        break;
      case Init::kXavier: {
        const std::size_t fan_in = shape.size() == 2 ? shape[0] : shape.back();
        const std::size_t fan_out = shape.back();
        const S bound = std::sqrt(S(6) / static_cast<S>(fan_in + fan_out));
        fill_uniform(t, -bound, bound, param_seed(run_seed, name));
        break;
      }
    }
    t.set_requires_grad(true);
    items.emplace_back(name, t);
    return t;
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : items) {
      t.grad();  // allocate on first use
      t.zero_grad();
    }
  }
};

// ------------------------------------------------------------------
// Sublayers
// ------------------------------------------------------------------

template <typename S>
struct MultiHeadAttention {
  int d_model = 0, n_heads = 0;
  TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry<S>& reg, const std::string& prefix, int d, int heads)
      : d_model(d), n_heads(heads) {
    const Shape sq{static_cast<std::size_t>(d), static_cast<std::size_t>(d)};
    const Shape sb{static_cast<std::size_t>(d)};
    wq = reg.make(prefix + ".wq", sq, Init::kXavier);
    bq = reg.make(prefix + ".bq", sb, Init::kZeros);
    wk = reg.make(prefix + ".wk", sq, Init::kXavier);
    bk = reg.make(prefix + ".bk", sb, Init::kZeros);
    wv = reg.make(prefix + ".wv", sq, Init::kXavier);
    bv = reg.make(prefix + ".bv", sb, Init::kZeros);
    wo = reg.make(prefix + ".wo", sq, Init::kXavier);
    bo = reg.make(prefix + ".bo", sb, Init::kZeros);
  }

  TensorT<S> operator()(const TensorT<S>& q_in, const TensorT<S>& k_in, const TensorT<S>& v_in,
                        std::shared_ptr<const std::vector<S>> mask, std::size_t batch,
                        std::size_t q_len, std::size_t k_len) const {
    TensorT<S> q = add_bias(matmul(q_in, wq), bq);
    TensorT<S> k = add_bias(matmul(k_in, wk), bk);
    TensorT<S> v = add_bias(matmul(v_in, wv), bv);
    TensorT<S> ctx = scaled_dot_attention(q, k, v, std::move(mask),
                                          static_cast<std::size_t>(n_heads), batch, q_len, k_len);
    return add_bias(matmul(ctx, wo), bo);
  }
};

template <typename S>
struct FeedForward {
  TensorT<S> w1, b1, w2, b2;

  FeedForward() = default;
  FeedForward(ParamRegistry<S>& reg, const std::string& prefix, int d, int ff) {
    w1 = reg.make(prefix + ".w1", {static_cast<std::size_t>(d), static_cast<std::size_t>(ff)},
                  Init::kXavier);
    b1 = reg.make(prefix + ".b1", {static_cast<std::size_t>(ff)}, Init::kZeros);
    w2 = reg.make(prefix + ".w2", {static_cast<std::size_t>(ff), static_cast<std::size_t>(d)},
                  Init::kXavier);
    b2 = reg.make(prefix + ".b2", {static_cast<std::size_t>(d)}, Init::kZeros);
  }

  TensorT<S> operator()(const TensorT<S>& x) const {
    return add_bias(matmul(relu(add_bias(matmul(x, w1), b1)), w2), b2);
  }
};

template <typename S>
struct LayerNormParams {
  TensorT<S> gain, bias;

  LayerNormParams() = default;
  LayerNormParams(ParamRegistry<S>& reg, const std::string& prefix, int d) {
    gain = reg.make(prefix + ".gain", {static_cast<std::size_t>(d)}, Init::kOnes);
    bias = reg.make(prefix + ".bias", {static_cast<std::size_t>(d)}, Init::kZeros);
  }

  TensorT<S> operator()(const TensorT<S>& x) const {
    return layer_norm(x, gain, bias, static_cast<S>(kLayerNormEps));
  }
};

// Post-norm residual order: x <- LN(x + Sublayer(x)).
template <typename S>
struct EncoderLayer {
  MultiHeadAttention<S> attn;
  LayerNormParams<S> ln1;
  FeedForward<S> ffn;
  LayerNormParams<S> ln2;

  EncoderLayer() = default;
  EncoderLayer(ParamRegistry<S>& reg, const std::string& prefix, const ModelConfig& cfg)
      : attn(reg, prefix + ".self_attn", cfg.d_model, cfg.n_heads),
        ln1(reg, prefix + ".ln1", cfg.d_model),
        ffn(reg, prefix + ".ffn", cfg.d_model, cfg.ff_dim),
        ln2(reg, prefix + ".ln2", cfg.d_model) {}

  TensorT<S> operator()(const TensorT<S>& x, std::shared_ptr<const std::vector<S>> mask,
                        std::size_t batch, std::size_t len) const {
    TensorT<S> h = ln1(add(x, attn(x, x, x, std::move(mask), batch, len, len)));
    return ln2(add(h, ffn(h)));
  }
};

template <typename S>
struct DecoderLayer {
  MultiHeadAttention<S> self_attn;
  LayerNormParams<S> ln1;
  MultiHeadAttention<S> cross_attn;
  LayerNormParams<S> ln2;
  FeedForward<S> ffn;
  LayerNormParams<S> ln3;

  DecoderLayer() = default;
  DecoderLayer(ParamRegistry<S>& reg, const std::string& prefix, const ModelConfig& cfg)
      : self_attn(reg, prefix + ".self_attn", cfg.d_model, cfg.n_heads),
        ln1(reg, prefix + ".ln1", cfg.d_model),
        cross_attn(reg, prefix + ".cross_attn", cfg.d_model, cfg.n_heads),
        ln2(reg, prefix + ".ln2", cfg.d_model),
        ffn(reg, prefix + ".ffn", cfg.d_model, cfg.ff_dim),
        ln3(reg, prefix + ".ln3", cfg.d_model) {}

  TensorT<S> operator()(const TensorT<S>& x, const TensorT<S>& memory,
                        std::shared_ptr<const std::vector<S>> self_mask,
                        std::shared_ptr<const std::vector<S>> cross_mask, std::size_t batch,
                        std::size_t tgt_len, std::size_t src_len) const {
    TensorT<S> h =
        ln1(add(x, self_attn(x, x, x, std::move(self_mask), batch, tgt_len, tgt_len)));
    h = ln2(add(h, cross_attn(h, memory, memory, std::move(cross_mask), batch, tgt_len, src_len)));
    return ln3(add(h, ffn(h)));
  }
};

}  // namespace dpenmt

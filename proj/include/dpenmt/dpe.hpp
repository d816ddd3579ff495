#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dpenmt/error.hpp"
#include "dpenmt/tensor.hpp"
#include "dpenmt/transformer.hpp"

namespace dpenmt {

// Refined position-aware embeddings plus the order loss they incur.
template <typename S>
struct DpeOutput {
  TensorT<S> r;
  TensorT<S> order_loss;
};

// The dynamic position network: a short stack of encoder-style layers
// sitting between the enriched embeddings and the first translation-encoder
// layer. Its output rows are regressed toward the target-order position
// encodings.
template <typename S>
struct DpeStack {
  std::vector<EncoderLayer<S>> layers;

  DpeStack() = default;
  DpeStack(ParamRegistry<S>& reg, const ModelConfig& cfg) {
    layers.reserve(static_cast<std::size_t>(cfg.dpe_layers));
    for (int i = 0; i < cfg.dpe_layers; ++i)
      layers.emplace_back(reg, "dpe." + std::to_string(i), cfg);
  }

  bool enabled() const { return !layers.empty(); }

  TensorT<S> forward(const TensorT<S>& enriched, std::shared_ptr<const std::vector<S>> mask,
                     std::size_t batch, std::size_t len) const {
    if (layers.empty())
      throw config_error("dpe_forward: called with dpe_layers = 0");
    TensorT<S> x = enriched;
    for (const auto& layer : layers) x = layer(x, mask, batch, len);
    return x;
  }
};

// Mean over real tokens of the per-token MSE between the refined
// embeddings and the supervising position rows.
template <typename S>
TensorT<S> order_loss(const TensorT<S>& r, const TensorT<S>& supervision,
                      const std::vector<std::uint8_t>& token_mask) {
  return masked_row_mse(r, supervision, token_mask);
}

template <typename S>
TensorT<S> order_loss(const TensorT<S>& r, const TensorT<S>& supervision) {
  if (r.rank() != 2)
    throw dimension_error("order_loss: expected rank 2, got " + shape_str(r.shape()));
  return masked_row_mse(r, supervision, std::vector<std::uint8_t>(r.shape()[0], 1));
}

// Affine blend of the two objectives: lambda * translation + (1 - lambda) *
// order.
template <typename S>
TensorT<S> total_loss(const TensorT<S>& l_translation, const TensorT<S>& l_order, S lambda) {
  if (lambda < S(0) || lambda > S(1))
    throw config_error("total_loss: lambda must be in [0, 1]");
  return add(scale(l_translation, lambda), scale(l_order, S(1) - lambda));
}

}  // namespace dpenmt

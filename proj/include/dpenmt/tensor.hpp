#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dpenmt/error.hpp"

namespace dpenmt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << " x ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// Thread-local switch: with grads disabled, ops produce plain leaves and no
// graph is recorded (used during decoding).
inline thread_local bool tl_grad_enabled = true;

inline bool grad_enabled() { return tl_grad_enabled; }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(tl_grad_enabled) { tl_grad_enabled = false; }
  ~NoGradGuard() { tl_grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major tensor, node in a reverse-mode computation graph. A
// TensorT is a cheap shared handle; copying it aliases the same storage.
template <typename S>
class TensorT {
 public:
  struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    std::vector<TensorT> parents;
    std::function<void(Node&)> backward;
  };

  TensorT() : node_(std::make_shared<Node>()) {}

  explicit TensorT(Shape shape, S fill = S(0), bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->shape = std::move(shape);
    node_->data.assign(shape_numel(node_->shape), fill);
    node_->requires_grad = requires_grad;
  }

  TensorT(Shape shape, std::vector<S> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != data.size())
      throw dimension_error("tensor: shape " + shape_str(shape) + " does not hold " +
                            std::to_string(data.size()) + " values");
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static TensorT scalar(S v, bool requires_grad = false) {
    return TensorT(Shape{1}, std::vector<S>{v}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  // 2-D helpers
  std::size_t rows() const { return node_->shape.empty() ? 0 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.size() < 2 ? 1 : node_->shape[1]; }

  std::vector<S>& data() { return node_->data; }
  const std::vector<S>& data() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  bool has_grad() const { return !node_->grad.empty(); }

  std::vector<S>& grad() {
    ensure_grad(*node_);
    return node_->grad;
  }
  const std::vector<S>& grad() const {
    ensure_grad(*node_);
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  S item() const {
    if (numel() != 1) throw contract_error("item: tensor is not scalar, shape " + shape_str(shape()));
    return node_->data[0];
  }

  S& at(std::size_t i, std::size_t j) { return node_->data[i * cols() + j]; }
  S at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }

  Node* node() const { return node_.get(); }

  // Builds an op output; parents/backward are recorded only when the result
  // participates in a graph.
  static TensorT from_op(Shape shape, std::vector<S> data, std::vector<TensorT> parents,
                         std::function<void(Node&)> backward) {
    TensorT out(std::move(shape), std::move(data));
    bool needs = grad_enabled() &&
                 std::any_of(parents.begin(), parents.end(),
                             [](const TensorT& p) { return p.requires_grad(); });
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->parents = std::move(parents);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  static void ensure_grad(Node& n) {
    if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), S(0));
  }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

// ------------------------------------------------------------------
// Deterministic random fills (hand-rolled mapping so the value stream does
// not depend on the standard library's distribution implementation).
// ------------------------------------------------------------------

inline double u64_to_unit(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

template <typename S>
void fill_uniform(TensorT<S>& t, S lo, S hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (S& v : t.data()) v = lo + (hi - lo) * static_cast<S>(u64_to_unit(rng()));
}

// ------------------------------------------------------------------
// Inner kernels (row-major, deterministic sequential reduction order)
// ------------------------------------------------------------------

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
template <typename S>
void gemm_accum(S* c, const S* a, const S* b, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    S* cr = c + i * n;
    const S* ar = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const S av = ar[l];
      const S* br = b + l * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T   (row-dot-row)
template <typename S>
void gemm_abt_accum(S* c, const S* a, const S* b, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* ar = a + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const S* br = b + l * n;
      S acc = S(0);
      for (std::size_t j = 0; j < n; ++j) acc += ar[j] * br[j];
      c[i * k + l] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename S>
void gemm_atb_accum(S* c, const S* a, const S* b, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* br = b + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const S av = a[i * k + l];
      S* cr = c + l * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

template <typename S>
void softmax_lane(const S* x, S* y, std::size_t len, std::size_t stride) {
  S mx = x[0];
  for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, x[i * stride]);
  S sum = S(0);
  for (std::size_t i = 0; i < len; ++i) {
    const S e = std::exp(x[i * stride] - mx);
    y[i * stride] = e;
    sum += e;
  }
  const S inv = S(1) / sum;
  for (std::size_t i = 0; i < len; ++i) y[i * stride] *= inv;
}

}  // namespace detail

// ------------------------------------------------------------------
// Primitive operations
// ------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw dimension_error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<S> out(m * n, S(0));
  detail::gemm_accum(out.data(), a.data().data(), b.data().data(), m, k, n);
  auto bw = [m, k, n](typename TensorT<S>::Node& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    if (pa.requires_grad())
      detail::gemm_abt_accum(pa.grad().data(), nd.grad.data(), pb.data().data(), m, n, k);
    if (pb.requires_grad())
      detail::gemm_atb_accum(pb.grad().data(), pa.data().data(), nd.grad.data(), m, k, n);
  };
  return TensorT<S>::from_op({m, n}, std::move(out), {a, b}, bw);
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& x) {
  if (x.rank() != 2) throw dimension_error("transpose: expected rank 2, got " + shape_str(x.shape()));
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.data()[i * n + j];
  auto bw = [m, n](typename TensorT<S>::Node& nd) {
    auto& p = nd.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += nd.grad[j * m + i];
  };
  return TensorT<S>::from_op({n, m}, std::move(out), {x}, bw);
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw dimension_error("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto bw = [](typename TensorT<S>::Node& nd) {
    for (int pi = 0; pi < 2; ++pi) {
      auto& p = nd.parents[pi];
      if (!p.requires_grad()) continue;
      auto& g = p.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
    }
  };
  return TensorT<S>::from_op(a.shape(), std::move(out), {a, b}, bw);
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw dimension_error("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto bw = [](typename TensorT<S>::Node& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    if (pa.requires_grad()) {
      auto& g = pa.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i] * pb.data()[i];
    }
    if (pb.requires_grad()) {
      auto& g = pb.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i] * pa.data()[i];
    }
  };
  return TensorT<S>::from_op(a.shape(), std::move(out), {a, b}, bw);
}

template <typename S>
TensorT<S> scale(const TensorT<S>& x, S c) {
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.data()[i];
  auto bw = [c](typename TensorT<S>::Node& nd) {
    auto& p = nd.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * nd.grad[i];
  };
  return TensorT<S>::from_op(x.shape(), std::move(out), {x}, bw);
}

// y[r, :] = x[r, :] + b  (bias broadcast over the last dimension)
template <typename S>
TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& b) {
  const std::size_t d = b.numel();
  if (x.numel() == 0 || x.shape().back() != d)
    throw dimension_error("add_bias: last dim of " + shape_str(x.shape()) + " vs bias " +
                          shape_str(b.shape()));
  const std::size_t rows = x.numel() / d;
  std::vector<S> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.data()[r * d + j] + b.data()[j];
  auto bw = [rows, d](typename TensorT<S>::Node& nd) {
    auto& px = nd.parents[0];
    auto& pb = nd.parents[1];
    if (px.requires_grad()) {
      auto& g = px.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
    }
    if (pb.requires_grad()) {
      auto& g = pb.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += nd.grad[r * d + j];
    }
  };
  return TensorT<S>::from_op(x.shape(), std::move(out), {x, b}, bw);
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > S(0) ? x.data()[i] : S(0);
  auto bw = [](typename TensorT<S>::Node& nd) {
    auto& p = nd.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.data()[i] > S(0)) g[i] += nd.grad[i];
  };
  return TensorT<S>::from_op(x.shape(), std::move(out), {x}, bw);
}

// Identity; stochastic dropout is deliberately disabled for determinism.
template <typename S>
TensorT<S> dropout(const TensorT<S>& x, double rate) {
  if (rate < 0.0 || rate >= 1.0) throw config_error("dropout: rate must be in [0, 1)");
  return x;
}

template <typename S>
TensorT<S> softmax(const TensorT<S>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw dimension_error("softmax: axis " + std::to_string(axis) + " out of bounds for " +
                          shape_str(x.shape()));
  const std::size_t len = x.shape()[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t outer = x.numel() / (len * inner);
  std::vector<S> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      detail::softmax_lane(x.data().data() + base, out.data() + base, len, inner);
    }
  auto bw = [len, inner, outer](typename TensorT<S>::Node& nd) {
    auto& p = nd.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        S dot = S(0);
        for (std::size_t i = 0; i < len; ++i)
          dot += nd.grad[base + i * inner] * nd.data[base + i * inner];
        for (std::size_t i = 0; i < len; ++i)
          g[base + i * inner] += nd.data[base + i * inner] * (nd.grad[base + i * inner] - dot);
      }
  };
  return TensorT<S>::from_op(x.shape(), std::move(out), {x}, bw);
}

// Normalizes over the last dimension: zero mean, unit variance before
// gain/bias, with eps inside the square root. Degenerate rows (variance +
// eps == 0) collapse to the bias.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, S eps) {
  const std::size_t d = x.shape().empty() ? 0 : x.shape().back();
  if (d == 0 || gain.numel() != d || bias.numel() != d)
    throw dimension_error("layer_norm: last dim of " + shape_str(x.shape()) + " vs gain " +
                          shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  const std::size_t rows = x.numel() / d;
  std::vector<S> out(x.numel());
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  auto inv_std = std::make_shared<std::vector<S>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = x.data().data() + r * d;
    S mean = S(0);
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<S>(d);
    S var = S(0);
    for (std::size_t j = 0; j < d; ++j) {
      const S c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S denom = var + eps;
    const S inv = denom > S(0) ? S(1) / std::sqrt(denom) : S(0);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const S h = (xr[j] - mean) * inv;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  auto bw = [rows, d, xhat, inv_std](typename TensorT<S>::Node& nd) {
    auto& px = nd.parents[0];
    auto& pg = nd.parents[1];
    auto& pb = nd.parents[2];
    if (pg.requires_grad()) {
      auto& g = pg.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += nd.grad[r * d + j] * (*xhat)[r * d + j];
    }
    if (pb.requires_grad()) {
      auto& g = pb.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += nd.grad[r * d + j];
    }
    if (px.requires_grad()) {
      auto& g = px.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        S mean_dh = S(0), mean_dhh = S(0);
        for (std::size_t j = 0; j < d; ++j) {
          const S dh = nd.grad[r * d + j] * pg.data()[j];
          mean_dh += dh;
          mean_dhh += dh * (*xhat)[r * d + j];
        }
        mean_dh /= static_cast<S>(d);
        mean_dhh /= static_cast<S>(d);
        const S inv = (*inv_std)[r];
        for (std::size_t j = 0; j < d; ++j) {
          const S dh = nd.grad[r * d + j] * pg.data()[j];
          g[r * d + j] += inv * (dh - mean_dh - (*xhat)[r * d + j] * mean_dhh);
        }
      }
    }
  };
  return TensorT<S>::from_op(x.shape(), std::move(out), {x, gain, bias}, bw);
}

// out[i, :] = table[ids[i], :]
template <typename S>
TensorT<S> embedding_rows(const TensorT<S>& table, const std::vector<int>& ids) {
  if (table.rank() != 2)
    throw dimension_error("embedding_rows: table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw contract_error("embedding_rows: id " + std::to_string(ids[i]) + " at position " +
                           std::to_string(i) + " out of range [0, " + std::to_string(v) + ")");
  std::vector<S> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  auto bw = [ids_copy, d](typename TensorT<S>::Node& nd) {
    auto& p = nd.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (std::size_t i = 0; i < ids_copy->size(); ++i) {
      const std::size_t row = static_cast<std::size_t>((*ids_copy)[i]) * d;
      for (std::size_t j = 0; j < d; ++j) g[row + j] += nd.grad[i * d + j];
    }
  };
  return TensorT<S>::from_op({ids.size(), d}, std::move(out), {table}, bw);
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& x, std::size_t offset, std::size_t width) {
  if (x.rank() != 2 || offset + width > x.shape()[1])
    throw dimension_error("slice_cols: [" + std::to_string(offset) + ", " +
                          std::to_string(offset + width) + ") out of " + shape_str(x.shape()));
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<S> out(m * width);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.data().data() + i * n + offset, width, out.data() + i * width);
  auto bw = [m, n, offset, width](typename TensorT<S>::Node& nd) {
    auto& p = nd.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < width; ++j) g[i * n + offset + j] += nd.grad[i * width + j];
  };
  return TensorT<S>::from_op({m, width}, std::move(out), {x}, bw);
}

template <typename S>
TensorT<S> slice_rows(const TensorT<S>& x, std::size_t offset, std::size_t count) {
  if (x.rank() != 2 || offset + count > x.shape()[0])
    throw dimension_error("slice_rows: [" + std::to_string(offset) + ", " +
                          std::to_string(offset + count) + ") out of " + shape_str(x.shape()));
  const std::size_t n = x.shape()[1];
  std::vector<S> out(count * n);
  std::copy_n(x.data().data() + offset * n, count * n, out.data());
  auto bw = [offset, count, n](typename TensorT<S>::Node& nd) {
    auto& p = nd.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (std::size_t i = 0; i < count * n; ++i) g[offset * n + i] += nd.grad[i];
  };
  return TensorT<S>::from_op({count, n}, std::move(out), {x}, bw);
}

// Concatenates rank-2 tensors with equal row counts along columns.
template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw contract_error("concat_cols: no inputs");
  const std::size_t m = parts[0].shape()[0];
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != m)
      throw dimension_error("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " +
                            shape_str(p.shape()));
    total += p.shape()[1];
  }
  std::vector<S> out(m * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.data().data() + i * w, w, out.data() + i * total + off);
    off += w;
  }
  auto bw = [m, total](typename TensorT<S>::Node& nd) {
    std::size_t off2 = 0;
    for (auto& p : nd.parents) {
      const std::size_t w = p.shape()[1];
      if (p.requires_grad()) {
        auto& g = p.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += nd.grad[i * total + off2 + j];
      }
      off2 += w;
    }
  };
  return TensorT<S>::from_op({m, total}, std::move(out), parts, bw);
}

template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
  S acc = S(0);
  for (S v : x.data()) acc += v;
  auto bw = [](typename TensorT<S>::Node& nd) {
    auto& p = nd.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[0];
  };
  return TensorT<S>::from_op({1}, {acc}, {x}, bw);
}

// Mean over all elements of the squared difference.
template <typename S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw dimension_error("mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  const std::size_t n = a.numel();
  S acc = S(0);
  for (std::size_t i = 0; i < n; ++i) {
    const S diff = a.data()[i] - b.data()[i];
    acc += diff * diff;
  }
  acc /= static_cast<S>(n);
  auto bw = [n](typename TensorT<S>::Node& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    const S f = S(2) / static_cast<S>(n) * nd.grad[0];
    for (std::size_t i = 0; i < n; ++i) {
      const S diff = pa.data()[i] - pb.data()[i];
      if (pa.requires_grad()) pa.grad()[i] += f * diff;
      if (pb.requires_grad()) pb.grad()[i] -= f * diff;
    }
  };
  return TensorT<S>::from_op({1}, {acc}, {a, b}, bw);
}

// Mean over unmasked rows of the per-row MSE (mean over columns). Rows with
// mask 0 contribute nothing to value or gradient.
template <typename S>
TensorT<S> masked_row_mse(const TensorT<S>& a, const TensorT<S>& b,
                          const std::vector<std::uint8_t>& row_mask) {
  if (a.shape() != b.shape())
    throw dimension_error("masked_row_mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  if (a.rank() != 2 || row_mask.size() != a.shape()[0])
    throw dimension_error("masked_row_mse: mask length " + std::to_string(row_mask.size()) +
                          " vs rows of " + shape_str(a.shape()));
  const std::size_t rows = a.shape()[0], d = a.shape()[1];
  std::size_t live = 0;
  S acc = S(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!row_mask[r]) continue;
    ++live;
    S row_acc = S(0);
    for (std::size_t j = 0; j < d; ++j) {
      const S diff = a.data()[r * d + j] - b.data()[r * d + j];
      row_acc += diff * diff;
    }
    acc += row_acc / static_cast<S>(d);
  }
  if (live == 0) throw input_error("masked_row_mse: all rows masked (degenerate batch)");
  acc /= static_cast<S>(live);
  auto mask_copy = std::make_shared<std::vector<std::uint8_t>>(row_mask);
  auto bw = [rows, d, live, mask_copy](typename TensorT<S>::Node& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    const S f = S(2) / (static_cast<S>(d) * static_cast<S>(live)) * nd.grad[0];
    for (std::size_t r = 0; r < rows; ++r) {
      if (!(*mask_copy)[r]) continue;
      for (std::size_t j = 0; j < d; ++j) {
        const S diff = pa.data()[r * d + j] - pb.data()[r * d + j];
        if (pa.requires_grad()) pa.grad()[r * d + j] += f * diff;
        if (pb.requires_grad()) pb.grad()[r * d + j] -= f * diff;
      }
    }
  };
  return TensorT<S>::from_op({1}, {acc}, {a, b}, bw);
}

// Mean over unmasked positions of the negative log-softmax at the target
// index, with optional uniform label smoothing folded in.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& targets,
                         const std::vector<std::uint8_t>& mask, S smoothing = S(0)) {
  if (logits.rank() != 2)
    throw dimension_error("cross_entropy: logits must be rank 2, got " + shape_str(logits.shape()));
  const std::size_t t = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != t || mask.size() != t)
    throw dimension_error("cross_entropy: " + std::to_string(t) + " logit rows vs " +
                          std::to_string(targets.size()) + " targets, " +
                          std::to_string(mask.size()) + " mask flags");
  for (std::size_t i = 0; i < t; ++i)
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw contract_error("cross_entropy: target " + std::to_string(targets[i]) +
                           " out of range [0, " + std::to_string(v) + ")");
  std::size_t live = 0;
  for (std::size_t i = 0; i < t; ++i) live += mask[i] ? 1 : 0;
  if (live == 0) throw input_error("cross_entropy: all positions masked (degenerate batch)");

  auto probs = std::make_shared<std::vector<S>>(t * v);
  S acc = S(0);
  const S eps = smoothing;
  for (std::size_t i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    const S* row = logits.data().data() + i * v;
    S mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    S sum = S(0);
    for (std::size_t j = 0; j < v; ++j) {
      const S e = std::exp(row[j] - mx);
      (*probs)[i * v + j] = e;
      sum += e;
    }
    const S log_z = mx + std::log(sum);
    const S inv = S(1) / sum;
    S mean_logit = S(0);
    for (std::size_t j = 0; j < v; ++j) {
      (*probs)[i * v + j] *= inv;
      mean_logit += row[j];
    }
    mean_logit /= static_cast<S>(v);
    // -(1-eps)*logp[y] - eps*mean_j logp[j]
    acc += log_z - (S(1) - eps) * row[targets[i]] - eps * mean_logit;
  }
  acc /= static_cast<S>(live);

  auto targets_copy = std::make_shared<std::vector<int>>(targets);
  auto mask_copy = std::make_shared<std::vector<std::uint8_t>>(mask);
  auto bw = [t, v, live, eps, probs, targets_copy, mask_copy](typename TensorT<S>::Node& nd) {
    auto& p = nd.parents[0];
    if (!p.requires_grad()) return;
    auto& g = p.grad();
    const S f = nd.grad[0] / static_cast<S>(live);
    const S uniform = eps / static_cast<S>(v);
    for (std::size_t i = 0; i < t; ++i) {
      if (!(*mask_copy)[i]) continue;
      const std::size_t y = static_cast<std::size_t>((*targets_copy)[i]);
      for (std::size_t j = 0; j < v; ++j) {
        S q = uniform;
        if (j == y) q += S(1) - eps;
        g[i * v + j] += f * ((*probs)[i * v + j] - q);
      }
    }
  };
  return TensorT<S>::from_op({1}, {acc}, {logits}, bw);
}

// Fused multi-head scaled-dot attention over a batch of equal-length
// sequences. q is [batch*q_len x d], k and v are [batch*k_len x d]; mask,
// when present, is an additive [batch x q_len x k_len] table applied to the
// pre-softmax logits.
template <typename S>
TensorT<S> scaled_dot_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                                std::shared_ptr<const std::vector<S>> mask, std::size_t n_heads,
                                std::size_t batch, std::size_t q_len, std::size_t k_len) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape()[1] != k.shape()[1] ||
      k.shape() != v.shape())
    throw dimension_error("attention: shapes q " + shape_str(q.shape()) + ", k " +
                          shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  const std::size_t d = q.shape()[1];
  if (n_heads == 0 || d % n_heads != 0)
    throw dimension_error("attention: d_model " + std::to_string(d) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
  if (q.shape()[0] != batch * q_len || k.shape()[0] != batch * k_len)
    throw dimension_error("attention: rows of q " + shape_str(q.shape()) + " / k " +
                          shape_str(k.shape()) + " vs batch " + std::to_string(batch));
  if (mask && mask->size() != batch * q_len * k_len)
    throw dimension_error("attention: mask size " + std::to_string(mask->size()) + " vs " +
                          std::to_string(batch * q_len * k_len));
  const std::size_t dh = d / n_heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));

  auto probs = std::make_shared<std::vector<S>>(batch * n_heads * q_len * k_len);
  std::vector<S> out(batch * q_len * d, S(0));
  std::vector<S> scores(k_len);
  for (std::size_t b = 0; b < batch; ++b) {
    const S* mrow_base = mask ? mask->data() + b * q_len * k_len : nullptr;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t hoff = h * dh;
      for (std::size_t i = 0; i < q_len; ++i) {
        const S* qrow = q.data().data() + (b * q_len + i) * d + hoff;
        for (std::size_t j = 0; j < k_len; ++j) {
          const S* krow = k.data().data() + (b * k_len + j) * d + hoff;
          S acc = S(0);
          for (std::size_t c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
          acc *= inv_sqrt;
          if (mrow_base) acc += mrow_base[i * k_len + j];
          scores[j] = acc;
        }
        S* prow = probs->data() + ((b * n_heads + h) * q_len + i) * k_len;
        detail::softmax_lane(scores.data(), prow, k_len, 1);
        S* orow = out.data() + (b * q_len + i) * d + hoff;
        for (std::size_t j = 0; j < k_len; ++j) {
          const S w = prow[j];
          if (w == S(0)) continue;
          const S* vrow = v.data().data() + (b * k_len + j) * d + hoff;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += w * vrow[c];
        }
      }
    }
  }

  auto bw = [probs, n_heads, batch, q_len, k_len, d, dh, inv_sqrt](typename TensorT<S>::Node& nd) {
    auto& pq = nd.parents[0];
    auto& pk = nd.parents[1];
    auto& pv = nd.parents[2];
    const bool want_q = pq.requires_grad(), want_k = pk.requires_grad(),
               want_v = pv.requires_grad();
    if (want_q) TensorT<S>::ensure_grad(*pq.node());
    if (want_k) TensorT<S>::ensure_grad(*pk.node());
    if (want_v) TensorT<S>::ensure_grad(*pv.node());
    std::vector<S> dprob(k_len), dscore(k_len);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t hoff = h * dh;
        for (std::size_t i = 0; i < q_len; ++i) {
          const S* gout = nd.grad.data() + (b * q_len + i) * d + hoff;
          const S* prow = probs->data() + ((b * n_heads + h) * q_len + i) * k_len;
          S dot = S(0);
          for (std::size_t j = 0; j < k_len; ++j) {
            const S* vrow = pv.data().data() + (b * k_len + j) * d + hoff;
            S acc = S(0);
            for (std::size_t c = 0; c < dh; ++c) acc += gout[c] * vrow[c];
            dprob[j] = acc;
            dot += acc * prow[j];
          }
          for (std::size_t j = 0; j < k_len; ++j) dscore[j] = prow[j] * (dprob[j] - dot);
          if (want_v) {
            for (std::size_t j = 0; j < k_len; ++j) {
              const S w = prow[j];
              if (w == S(0)) continue;
              S* gv = pv.node()->grad.data() + (b * k_len + j) * d + hoff;
              for (std::size_t c = 0; c < dh; ++c) gv[c] += w * gout[c];
            }
          }
          if (want_q) {
            S* gq = pq.node()->grad.data() + (b * q_len + i) * d + hoff;
            for (std::size_t j = 0; j < k_len; ++j) {
              const S s = dscore[j] * inv_sqrt;
              if (s == S(0)) continue;
              const S* krow = pk.data().data() + (b * k_len + j) * d + hoff;
              for (std::size_t c = 0; c < dh; ++c) gq[c] += s * krow[c];
            }
          }
          if (want_k) {
            const S* qrow = pq.data().data() + (b * q_len + i) * d + hoff;
            for (std::size_t j = 0; j < k_len; ++j) {
              const S s = dscore[j] * inv_sqrt;
              if (s == S(0)) continue;
              S* gk = pk.node()->grad.data() + (b * k_len + j) * d + hoff;
              for (std::size_t c = 0; c < dh; ++c) gk[c] += s * qrow[c];
            }
          }
        }
      }
  };
  return TensorT<S>::from_op({batch * q_len, d}, std::move(out), {q, k, v}, bw);
}

// ------------------------------------------------------------------
// Reverse-mode traversal
// ------------------------------------------------------------------

template <typename S>
void backward(const TensorT<S>& loss) {
  if (loss.numel() != 1)
    throw contract_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  using Node = typename TensorT<S>::Node;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS; parents of a node are pushed before the node
  // is emitted, so `order` is topological.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx].node();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) TensorT<S>::ensure_grad(*n);
  loss.node()->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

// ------------------------------------------------------------------
// Gradient checking
// ------------------------------------------------------------------

// Compares backward() gradients of the scalar-valued callable `f` (which
// must rebuild its graph from `inputs` on every call) against central
// finite differences. Returns the max relative error with denominator
// max(|analytic|, |numeric|, 1e-8).
template <typename S, typename F>
S grad_check(F&& f, std::vector<TensorT<S>> inputs, S eps) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  TensorT<S> loss = f();
  backward(loss);
  std::vector<std::vector<S>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());

  S max_rel = S(0);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const S saved = t.data()[i];
      t.data()[i] = saved + eps;
      const S up = f().item();
      t.data()[i] = saved - eps;
      const S down = f().item();
      t.data()[i] = saved;
      const S numeric = (up - down) / (S(2) * eps);
      const S a = analytic[ti][i];
      const S denom = std::max({std::abs(a), std::abs(numeric), S(1e-8)});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace dpenmt

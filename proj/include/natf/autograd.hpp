#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "natf/error.hpp"
#include "natf/kernels.hpp"
#include "natf/mask.hpp"
#include "natf/tensor.hpp"

namespace natf {

template <typename T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;

  std::span<T> grad_buffer() {
    if (grad.empty()) {
      grad.assign(value.size(), T(0));
    }
    return grad;
  }
};

// Shared handle to a value that may participate in differentiation.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }

  explicit operator bool() const noexcept { return static_cast<bool>(node_); }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  T item() const { return node_->value.item(); }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  // Gradient as a tensor; zeros when nothing has been accumulated.
  Tensor<T> grad() const {
    if (node_->grad.empty()) {
      return Tensor<T>(shape());
    }
    return Tensor<T>(shape(), node_->grad);
  }
  void zero_grad() { node_->grad.clear(); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

enum class Reduction { kMean, kSum };

enum class GradMode { kRecord, kInference };

namespace detail {

template <typename T>
void require_finite(std::span<const T> values, const char* op) {
  if (!kernels::all_finite(values.data(), values.size())) {
    throw NumericError(std::string(op) + ": non-finite input");
  }
}

inline void require_matrix(const Shape& shape, const char* op) {
  if (shape.size() != 2) {
    throw UsageError(std::string(op) + ": expected a matrix, got " + shape_string(shape));
  }
}

}  // namespace detail

// Tape of executed differentiable operations. Ops are appended in execution
// order, so every record's inputs precede it; backward() walks the tape in
// reverse. A graph in inference mode records nothing and only computes values.
template <typename T>
class Graph {
 public:
  explicit Graph(GradMode mode = GradMode::kRecord) : record_(mode == GradMode::kRecord) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return tape_.size(); }

  Var<T> constant(Tensor<T> value) const { return Var<T>::leaf(std::move(value), false); }

  // ---------------------------------------------------------------- linear

  Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    detail::require_matrix(a.shape(), "matmul");
    detail::require_matrix(b.shape(), "matmul");
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    if (b.shape()[0] != k) {
      throw UsageError("matmul: inner dimensions differ " + shape_string(a.shape()) + " * " +
                       shape_string(b.shape()));
    }
    Tensor<T> out(Shape{n, m});
    kernels::gemm_nn(a.value().data(), b.value().data(), out.data(), n, k, m);
    return emit(std::move(out), {a, b}, [a, b, n, k, m](const Node<T>& o) {
      if (a.requires_grad()) {
        kernels::gemm_nt_acc(o.grad.data(), b.value().data(), a.node()->grad_buffer().data(), n, m, k);
      }
      if (b.requires_grad()) {
        kernels::gemm_tn_acc(a.value().data(), o.grad.data(), b.node()->grad_buffer().data(), n, k, m);
      }
    });
  }

  // x[n x in] * w[in x out] + bias[out]
  Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
    detail::require_matrix(x.shape(), "linear");
    detail::require_matrix(w.shape(), "linear");
    const std::size_t n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[1];
    if (w.shape()[0] != in || bias.size() != out_dim) {
      throw UsageError("linear: shape mismatch " + shape_string(x.shape()) + " * " +
                       shape_string(w.shape()) + " + " + shape_string(bias.shape()));
    }
    Tensor<T> out(Shape{n, out_dim});
    const T* bv = bias.value().data();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(bv, bv + out_dim, out.data() + i * out_dim);
    }
    kernels::gemm_nn(x.value().data(), w.value().data(), out.data(), n, in, out_dim, true);
    return emit(std::move(out), {x, w, bias}, [x, w, bias, n, in, out_dim](const Node<T>& o) {
      if (x.requires_grad()) {
        kernels::gemm_nt_acc(o.grad.data(), w.value().data(), x.node()->grad_buffer().data(), n,
                             out_dim, in);
      }
      if (w.requires_grad()) {
        kernels::gemm_tn_acc(x.value().data(), o.grad.data(), w.node()->grad_buffer().data(), n, in,
                             out_dim);
      }
      if (bias.requires_grad()) {
        auto gb = bias.node()->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < out_dim; ++j) {
            gb[j] += o.grad[i * out_dim + j];
          }
        }
      }
    });
  }

  // ----------------------------------------------------------- elementwise

  Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) {
      throw UsageError("add: shapes differ " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
    }
    Tensor<T> out = a.value();
    const T* bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] += bv[i];
    }
    return emit(std::move(out), {a, b}, [a, b](const Node<T>& o) {
      for (const Var<T>* in : {&a, &b}) {
        if (in->requires_grad()) {
          auto g = in->node()->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += o.grad[i];
          }
        }
      }
    });
  }

  Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape()) {
      throw UsageError("mul: shapes differ " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
    }
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] *= b.value()[i];
    }
    return emit(std::move(out), {a, b}, [a, b](const Node<T>& o) {
      if (a.requires_grad()) {
        auto g = a.node()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] += o.grad[i] * b.value()[i];
        }
      }
      if (b.requires_grad()) {
        auto g = b.node()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] += o.grad[i] * a.value()[i];
        }
      }
    });
  }

  Var<T> scale(const Var<T>& x, T factor) {
    Tensor<T> out = x.value();
    for (T& v : out.values()) {
      v *= factor;
    }
    return emit(std::move(out), {x}, [x, factor](const Node<T>& o) {
      auto g = x.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += factor * o.grad[i];
      }
    });
  }

  Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (T& v : out.values()) {
      v = v > T(0) ? v : T(0);
    }
    return emit(std::move(out), {x}, [x](const Node<T>& o) {
      auto g = x.node()->grad_buffer();
      const T* xv = x.value().data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > T(0)) {
          g[i] += o.grad[i];
        }
      }
    });
  }

  Var<T> exp(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (T& v : out.values()) {
      v = std::exp(v);
    }
    return emit(std::move(out), {x}, [x](const Node<T>& o) {
      auto g = x.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += o.grad[i] * o.value[i];
      }
    });
  }

  // ------------------------------------------------------------- reductions

  Var<T> sum(const Var<T>& x) {
    double total = 0.0;
    for (const T v : x.value().values()) {
      total += static_cast<double>(v);
    }
    return emit(Tensor<T>::scalar(static_cast<T>(total)), {x}, [x](const Node<T>& o) {
      auto g = x.node()->grad_buffer();
      for (T& v : g) {
        v += o.grad[0];
      }
    });
  }

  // Scalar sum(x * weights) against a constant weight tensor.
  Var<T> dot(const Var<T>& x, const Tensor<T>& weights) {
    if (x.shape() != weights.shape()) {
      throw UsageError("dot: shapes differ " + shape_string(x.shape()) + " vs " +
                       shape_string(weights.shape()));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      total += static_cast<double>(x.value()[i]) * static_cast<double>(weights[i]);
    }
    return emit(Tensor<T>::scalar(static_cast<T>(total)), {x}, [x, weights](const Node<T>& o) {
      auto g = x.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += o.grad[0] * weights[i];
      }
    });
  }

  // Softmax along an arbitrary axis, max-subtracted, f64 accumulation.
  Var<T> softmax(const Var<T>& x, std::size_t axis) {
    const Shape& shape = x.shape();
    if (axis >= shape.size()) {
      throw UsageError("softmax: axis " + std::to_string(axis) + " out of range for " +
                       shape_string(shape));
    }
    detail::require_finite(x.value().values(), "softmax");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t len = shape[axis];
    Tensor<T> out(shape);
    const T* xv = x.value().data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, static_cast<double>(xv[base + j * inner]));
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) z += std::exp(static_cast<double>(xv[base + j * inner]) - mx);
        for (std::size_t j = 0; j < len; ++j) {
          out[base + j * inner] = static_cast<T>(std::exp(static_cast<double>(xv[base + j * inner]) - mx) / z);
        }
      }
    }
    return emit(std::move(out), {x}, [x, outer, inner, len](const Node<T>& o) {
      auto g = x.node()->grad_buffer();
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = a * len * inner + in;
          double dotp = 0.0;
          for (std::size_t j = 0; j < len; ++j) {
            dotp += static_cast<double>(o.grad[base + j * inner]) * static_cast<double>(o.value[base + j * inner]);
          }
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            g[idx] += static_cast<T>(static_cast<double>(o.value[idx]) *
                                     (static_cast<double>(o.grad[idx]) - dotp));
          }
        }
      }
    });
  }

  // Log-softmax over the last axis.
  Var<T> log_softmax(const Var<T>& x) {
    detail::require_finite(x.value().values(), "log_softmax");
    const std::size_t cols = x.value().cols(), rows = x.value().rows();
    Tensor<T> out(x.shape());
    std::vector<T> shifted(cols);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto row = x.value().row(r);
      T mx = -std::numeric_limits<T>::infinity();
      for (const T v : row) mx = std::max(mx, v);
      for (std::size_t c = 0; c < cols; ++c) shifted[c] = row[c] - mx;
      kernels::exp_inplace(shifted.data(), cols);
      const double lz = static_cast<double>(mx) + std::log(kernels::sum_f64(shifted.data(), cols));
      for (std::size_t c = 0; c < cols; ++c) {
        out(r, c) = static_cast<T>(static_cast<double>(row[c]) - lz);
      }
    }
    return emit(std::move(out), {x}, [x, rows, cols](const Node<T>& o) {
      auto g = x.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double gsum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) gsum += static_cast<double>(o.grad[r * cols + c]);
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t idx = r * cols + c;
          g[idx] += static_cast<T>(static_cast<double>(o.grad[idx]) -
                                   std::exp(static_cast<double>(o.value[idx])) * gsum);
        }
      }
    });
  }

  // Normalizes each slice along the last axis to zero mean and unit variance,
  // then applies gain and bias. Population variance, f64 accumulation.
  Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps = 1e-5) {
    if (!(eps > 0.0)) {
      throw UsageError("layer_norm: eps must be positive");
    }
    const std::size_t d = x.value().cols(), rows = x.value().rows();
    if (gain.size() != d || bias.size() != d) {
      throw UsageError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
    }
    Tensor<T> out(x.shape());
    std::vector<T> normalized(record_ ? x.size() : 0);
    std::vector<double> inv_std(rows);
    const T* xv = x.value().data();
    const T* gv = gain.value().data();
    const T* bv = bias.value().data();
    T* ov = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = xv + r * d;
      const double mean = kernels::sum_f64(row, d) / static_cast<double>(d);
      const double var = kernels::sq_dev_f64(row, d, mean) / static_cast<double>(d);
      inv_std[r] = 1.0 / std::sqrt(var + eps);
      const double is = inv_std[r];
      T* orow = ov + r * d;
      for (std::size_t c = 0; c < d; ++c) {
        const double nrm = (static_cast<double>(row[c]) - mean) * is;
        orow[c] = static_cast<T>(nrm * static_cast<double>(gv[c]) + static_cast<double>(bv[c]));
      }
      if (!normalized.empty()) {
        for (std::size_t c = 0; c < d; ++c) {
          normalized[r * d + c] = static_cast<T>((static_cast<double>(row[c]) - mean) * is);
        }
      }
    }
    return emit(std::move(out), {x, gain, bias},
                [x, gain, bias, rows, d, normalized = std::move(normalized),
                 inv_std = std::move(inv_std)](const Node<T>& o) {
                  if (gain.requires_grad() || bias.requires_grad()) {
                    std::vector<double> dg(d, 0.0), db(d, 0.0);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < d; ++c) {
                        dg[c] += static_cast<double>(o.grad[r * d + c]) * static_cast<double>(normalized[r * d + c]);
                        db[c] += static_cast<double>(o.grad[r * d + c]);
                      }
                    }
                    if (gain.requires_grad()) {
                      auto g = gain.node()->grad_buffer();
                      for (std::size_t c = 0; c < d; ++c) g[c] += static_cast<T>(dg[c]);
                    }
                    if (bias.requires_grad()) {
                      auto g = bias.node()->grad_buffer();
                      for (std::size_t c = 0; c < d; ++c) g[c] += static_cast<T>(db[c]);
                    }
                  }
                  if (x.requires_grad()) {
                    auto g = x.node()->grad_buffer();
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                      for (std::size_t c = 0; c < d; ++c) {
                        const double dxhat = static_cast<double>(o.grad[r * d + c]) * static_cast<double>(gain.value()[c]);
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * static_cast<double>(normalized[r * d + c]);
                      }
                      mean_dxhat *= inv_d;
                      mean_dxhat_xhat *= inv_d;
                      for (std::size_t c = 0; c < d; ++c) {
                        const double dxhat = static_cast<double>(o.grad[r * d + c]) * static_cast<double>(gain.value()[c]);
                        g[r * d + c] += static_cast<T>(
                            inv_std[r] * (dxhat - mean_dxhat - static_cast<double>(normalized[r * d + c]) * mean_dxhat_xhat));
                      }
                    }
                  }
                });
  }

  // ----------------------------------------------------------- indexing

  // Rows of table[V x d] selected by ids, multiplied by factor.
  Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids, T factor = T(1)) {
    detail::require_matrix(table.shape(), "embedding");
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    if (ids.empty()) {
      throw UsageError("embedding: no ids");
    }
    std::vector<std::int32_t> idx(ids.begin(), ids.end());
    Tensor<T> out(Shape{idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
        throw UsageError("embedding: id " + std::to_string(idx[i]) + " outside vocabulary of " +
                         std::to_string(vocab));
      }
      const auto src = table.value().row(static_cast<std::size_t>(idx[i]));
      for (std::size_t c = 0; c < d; ++c) {
        out(i, c) = src[c] * factor;
      }
    }
    return emit(std::move(out), {table}, [table, idx = std::move(idx), d, factor](const Node<T>& o) {
      auto g = table.node()->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        T* dst = g.data() + static_cast<std::size_t>(idx[i]) * d;
        for (std::size_t c = 0; c < d; ++c) {
          dst[c] += factor * o.grad[i * d + c];
        }
      }
    });
  }

  // out[i] = x[i, ids[i]]
  Var<T> pick(const Var<T>& x, std::span<const std::int32_t> ids) {
    detail::require_matrix(x.shape(), "pick");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    if (ids.size() != rows) {
      throw UsageError("pick: " + std::to_string(ids.size()) + " ids for " + std::to_string(rows) + " rows");
    }
    std::vector<std::int32_t> idx(ids.begin(), ids.end());
    Tensor<T> out(Shape{rows});
    for (std::size_t i = 0; i < rows; ++i) {
      if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= cols) {
        throw UsageError("pick: index " + std::to_string(idx[i]) + " out of range " + std::to_string(cols));
      }
      out[i] = x.value()(i, static_cast<std::size_t>(idx[i]));
    }
    return emit(std::move(out), {x}, [x, idx = std::move(idx), cols](const Node<T>& o) {
      auto g = x.node()->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        g[i * cols + static_cast<std::size_t>(idx[i])] += o.grad[i];
      }
    });
  }

  // Negative log-likelihood of targets under per-row log-probabilities.
  // Rows whose target equals pad_id are excluded from both sum and count.
  Var<T> cross_entropy(const Var<T>& log_probs, std::span<const std::int32_t> targets, std::int32_t pad_id,
                       Reduction reduction = Reduction::kMean) {
    detail::require_matrix(log_probs.shape(), "cross_entropy");
    const std::size_t rows = log_probs.shape()[0], vocab = log_probs.shape()[1];
    if (targets.size() != rows) {
      throw UsageError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                       std::to_string(rows) + " positions");
    }
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t i = 0; i < rows; ++i) {
      if (tgt[i] == pad_id) continue;
      if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= vocab) {
        throw UsageError("cross_entropy: target id " + std::to_string(tgt[i]) + " >= vocabulary size " +
                         std::to_string(vocab));
      }
      total -= static_cast<double>(log_probs.value()(i, static_cast<std::size_t>(tgt[i])));
      ++counted;
    }
    const double norm = (reduction == Reduction::kMean && counted > 0) ? 1.0 / static_cast<double>(counted) : 1.0;
    return emit(Tensor<T>::scalar(static_cast<T>(total * norm)), {log_probs},
                [log_probs, tgt = std::move(tgt), pad_id, vocab, norm](const Node<T>& o) {
                  auto g = log_probs.node()->grad_buffer();
                  const T step = static_cast<T>(-norm) * o.grad[0];
                  for (std::size_t i = 0; i < tgt.size(); ++i) {
                    if (tgt[i] == pad_id) continue;
                    g[i * vocab + static_cast<std::size_t>(tgt[i])] += step;
                  }
                });
  }

  // ------------------------------------------------------------ attention

  // Scaled dot-product attention over packed blocks. q is [Nq x d], k and v
  // are [Nk x d]; the d columns split into `heads` contiguous slices. Each
  // block's query rows attend only to that block's key rows under its mask.
  // When probs_out is given, every block's per-head probability matrix is
  // appended to it, block-major then head-major.
  Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionLayout& layout,
                   std::size_t heads, double scale, std::vector<T>* probs_out = nullptr) {
    detail::require_matrix(q.shape(), "attention");
    detail::require_matrix(k.shape(), "attention");
    detail::require_matrix(v.shape(), "attention");
    const std::size_t d = q.shape()[1];
    if (k.shape()[1] != d || v.shape()[1] != d || k.shape()[0] != v.shape()[0]) {
      throw UsageError("attention: q/k/v shapes disagree");
    }
    if (heads == 0 || d % heads != 0) {
      throw UsageError("attention: " + std::to_string(d) + " columns not divisible into " +
                       std::to_string(heads) + " heads");
    }
    const std::size_t dh = d / heads;
    const std::size_t nq = q.shape()[0], nk = k.shape()[0];
    std::size_t prob_count = 0;
    for (const auto& blk : layout) {
      if (blk.q_offset + blk.mask.queries() > nq || blk.k_offset + blk.mask.keys() > nk) {
        throw UsageError("attention: block exceeds packed rows");
      }
      blk.mask.validate();
      prob_count += heads * blk.mask.queries() * blk.mask.keys();
    }
    detail::require_finite(q.value().values(), "attention");
    detail::require_finite(k.value().values(), "attention");
    auto probs = std::make_shared<std::vector<T>>(prob_count);
    Tensor<T> out(Shape{nq, d});
    const T* qv = q.value().data();
    const T* kv = k.value().data();
    const T* vv = v.value().data();
    std::size_t p_base = 0;
    std::vector<T> qh, kt, vh, oh, scores;
    const T sc = static_cast<T>(scale);
    for (const auto& blk : layout) {
      const std::size_t tq = blk.mask.queries(), tk = blk.mask.keys();
      qh.resize(tq * dh);
      kt.resize(dh * tk);
      vh.resize(tk * dh);
      oh.resize(tq * dh);
      scores.resize(tq * tk);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < tq; ++i) {
          std::copy_n(qv + (blk.q_offset + i) * d + c0, dh, qh.data() + i * dh);
        }
        for (std::size_t j = 0; j < tk; ++j) {
          const T* krow = kv + (blk.k_offset + j) * d + c0;
          for (std::size_t c = 0; c < dh; ++c) kt[c * tk + j] = krow[c];
          std::copy_n(vv + (blk.k_offset + j) * d + c0, dh, vh.data() + j * dh);
        }
        kernels::gemm_nn(qh.data(), kt.data(), scores.data(), tq, dh, tk);
        T* pblk = probs->data() + p_base;
        for (std::size_t i = 0; i < tq; ++i) {
          T* srow = scores.data() + i * tk;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < tk; ++j) {
            srow[j] *= sc;
            if (blk.mask.allowed(i, j)) mx = std::max(mx, srow[j]);
          }
          for (std::size_t j = 0; j < tk; ++j) {
            srow[j] = blk.mask.allowed(i, j) ? srow[j] - mx : -std::numeric_limits<T>::infinity();
          }
          kernels::exp_inplace(srow, tk);
          double z = 0.0;
          for (std::size_t j = 0; j < tk; ++j) z += static_cast<double>(srow[j]);
          const T inv = static_cast<T>(1.0 / z);
          T* prow = pblk + i * tk;
          for (std::size_t j = 0; j < tk; ++j) prow[j] = srow[j] * inv;
        }
        kernels::gemm_nn(pblk, vh.data(), oh.data(), tq, tk, dh);
        for (std::size_t i = 0; i < tq; ++i) {
          std::copy_n(oh.data() + i * dh, dh, out.data() + (blk.q_offset + i) * d + c0);
        }
        p_base += tq * tk;
      }
    }
    if (probs_out != nullptr) {
      probs_out->insert(probs_out->end(), probs->begin(), probs->end());
    }
    return emit(std::move(out), {q, k, v}, [q, k, v, layout, heads, dh, d, scale, probs](const Node<T>& o) {
      const T* qv = q.value().data();
      const T* kv = k.value().data();
      const T* vv = v.value().data();
      T* gq = q.requires_grad() ? q.node()->grad_buffer().data() : nullptr;
      T* gk = k.requires_grad() ? k.node()->grad_buffer().data() : nullptr;
      T* gv = v.requires_grad() ? v.node()->grad_buffer().data() : nullptr;
      std::size_t p_base = 0;
      std::vector<double> dp, ds;
      for (const auto& blk : layout) {
        const std::size_t tq = blk.mask.queries(), tk = blk.mask.keys();
        dp.resize(tk);
        ds.resize(tk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * dh;
          for (std::size_t i = 0; i < tq; ++i) {
            const T* prow = probs->data() + p_base + i * tk;
            const T* grow = o.grad.data() + (blk.q_offset + i) * d + c0;
            double pd = 0.0;
            for (std::size_t j = 0; j < tk; ++j) {
              const T* vrow = vv + (blk.k_offset + j) * d + c0;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += static_cast<double>(grow[c]) * static_cast<double>(vrow[c]);
              dp[j] = s;
              pd += s * static_cast<double>(prow[j]);
              if (gv != nullptr && prow[j] != T(0)) {
                T* gvrow = gv + (blk.k_offset + j) * d + c0;
                for (std::size_t c = 0; c < dh; ++c) gvrow[c] += prow[j] * grow[c];
              }
            }
            for (std::size_t j = 0; j < tk; ++j) {
              ds[j] = static_cast<double>(prow[j]) * (dp[j] - pd) * scale;
            }
            const T* qrow = qv + (blk.q_offset + i) * d + c0;
            for (std::size_t j = 0; j < tk; ++j) {
              if (ds[j] == 0.0) continue;
              const T* krow = kv + (blk.k_offset + j) * d + c0;
              if (gq != nullptr) {
                T* gqrow = gq + (blk.q_offset + i) * d + c0;
                for (std::size_t c = 0; c < dh; ++c) gqrow[c] += static_cast<T>(ds[j] * static_cast<double>(krow[c]));
              }
              if (gk != nullptr) {
                T* gkrow = gk + (blk.k_offset + j) * d + c0;
                for (std::size_t c = 0; c < dh; ++c) gkrow[c] += static_cast<T>(ds[j] * static_cast<double>(qrow[c]));
              }
            }
          }
          p_base += tq * tk;
        }
      }
    });
  }

  // ------------------------------------------------------------- backward

  // Propagates d(loss)/d(.) to every requires_grad leaf. Intermediate
  // gradients are reset on each call; leaf gradients accumulate, so running
  // backward twice without zeroing doubles them.
  void backward(const Var<T>& loss) {
    if (loss.size() != 1) {
      throw UsageError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
      return;
    }
    for (auto& rec : tape_) {
      rec.out->grad.clear();
    }
    bool on_tape = false;
    for (const auto& rec : tape_) {
      on_tape = on_tape || rec.out == loss.shared();
    }
    if (!on_tape) {
      throw UsageError("backward: loss was not produced by this graph");
    }
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      if (it->out->grad.empty()) continue;
      it->backward(*it->out);
    }
  }

 private:
  using BackwardFn = std::function<void(const Node<T>&)>;

  struct Record {
    std::shared_ptr<Node<T>> out;
    BackwardFn backward;
  };

  Var<T> emit(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    if (record_) {
      for (const auto& in : inputs) {
        needs = needs || in.requires_grad();
      }
    }
    Var<T> out = Var<T>::leaf(std::move(value), needs);
    if (needs) {
      tape_.push_back(Record{out.shared(), std::move(fn)});
    }
    return out;
  }

  bool record_;
  std::vector<Record> tape_;
};

}  // namespace natf

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "natf/autograd.hpp"
#include "natf/error.hpp"
#include "natf/mask.hpp"
#include "natf/rng.hpp"
#include "natf/tensor.hpp"
#include "natf/token.hpp"

namespace natf {

// How attention logits are scaled. kPerHead divides by sqrt(d_model / n_head)
// as in the base Transformer; kModelWidth divides by sqrt(d_model).
enum class AttentionScaling { kPerHead, kModelWidth };

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t d_hidden = 128;
  std::size_t n_layer = 2;
  std::size_t n_head = 2;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  std::size_t max_length = 256;
  AttentionScaling scaling = AttentionScaling::kPerHead;

  void validate() const {
    if (d_model == 0 || d_hidden == 0 || n_head == 0) {
      throw UsageError("ModelConfig: d_model, d_hidden and n_head must be positive");
    }
    if (d_model % n_head != 0) {
      throw UsageError("ModelConfig: d_model=" + std::to_string(d_model) + " is not divisible by n_head=" +
                       std::to_string(n_head));
    }
    if (src_vocab <= kNumReserved || tgt_vocab <= kNumReserved) {
      throw UsageError("ModelConfig: vocabularies must extend past the reserved ids");
    }
    if (max_length == 0) {
      throw UsageError("ModelConfig: max_length must be positive");
    }
  }

  double attention_scale() const {
    const double width = scaling == AttentionScaling::kPerHead
                             ? static_cast<double>(d_model / n_head)
                             : static_cast<double>(d_model);
    return 1.0 / std::sqrt(width);
  }

  bool same_encoder(const ModelConfig& o) const {
    return d_model == o.d_model && d_hidden == o.d_hidden && n_layer == o.n_layer && n_head == o.n_head &&
           src_vocab == o.src_vocab && max_length == o.max_length;
  }
};

// Sinusoid of timestep j and channel k: sin(j / 10000^(k/d)) on even
// channels, cos on odd ones.
inline double positional_encoding(std::size_t j, std::size_t k, std::size_t d) {
  if (k >= d) {
    throw UsageError("positional_encoding: channel " + std::to_string(k) + " >= dimension " + std::to_string(d));
  }
  const double angle =
      static_cast<double>(j) / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(d));
  return (k % 2 == 0) ? std::sin(angle) : std::cos(angle);
}

template <typename T>
Tensor<T> positional_table(std::size_t max_length, std::size_t d) {
  Tensor<T> table(Shape{max_length, d});
  for (std::size_t j = 0; j < max_length; ++j) {
    for (std::size_t k = 0; k < d; ++k) {
      table(j, k) = static_cast<T>(positional_encoding(j, k, d));
    }
  }
  return table;
}

// Positional encoding row j, served from the table when it is long enough.
template <typename T>
void positional_row(const Tensor<T>& table, std::size_t j, std::span<T> out) {
  if (j < table.rows()) {
    const auto src = table.row(j);
    std::copy(src.begin(), src.end(), out.begin());
    return;
  }
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<T>(positional_encoding(j, k, out.size()));
}

enum class LengthPolicy { kStrict, kExtend };

// Rows of the positional table matching each packed row's in-sequence index.
// Strict lookups reject sequences longer than the table.
template <typename T>
Tensor<T> positional_rows(const Tensor<T>& table, const SegmentLayout& layout,
                          LengthPolicy policy = LengthPolicy::kStrict) {
  const std::size_t d = table.cols();
  Tensor<T> out(Shape{layout.total(), d});
  std::size_t r = 0;
  for (std::size_t s = 0; s < layout.count(); ++s) {
    if (policy == LengthPolicy::kStrict && layout.lengths[s] > table.rows()) {
      throw UsageError("sequence of length " + std::to_string(layout.lengths[s]) + " exceeds max_length " +
                       std::to_string(table.rows()));
    }
    for (std::size_t j = 0; j < layout.lengths[s]; ++j, ++r) positional_row(table, j, out.row(r));
  }
  return out;
}

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

// Named, ordered parameter set of a model.
template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name) != 0) {
      throw UsageError("ParamStore: duplicate parameter " + name);
    }
    index_[name] = vars_.size();
    names_.push_back(name);
    vars_.push_back(Var<T>::leaf(std::move(init), true));
    return vars_.back();
  }

  Var<T> add_uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
    Tensor<T> init(std::move(shape));
    for (T& v : init.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, std::move(init));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Var<T>& get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) {
      throw UsageError("ParamStore: unknown parameter " + name);
    }
    return vars_[it->second];
  }

  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<Var<T>>& vars() const noexcept { return vars_; }
  std::size_t size() const noexcept { return vars_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v.size();
    return n;
  }

  std::vector<NamedTensor<T>> snapshot(const std::string& prefix = "") const {
    std::vector<NamedTensor<T>> out;
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      if (names_[i].rfind(prefix, 0) == 0) out.push_back({names_[i], vars_[i].value()});
    }
    return out;
  }

  // Copies values into existing parameters. Every name must exist with the
  // same shape; all offending keys are reported together.
  void assign(const std::vector<NamedTensor<T>>& values) {
    std::string problems;
    for (const auto& nt : values) {
      const auto it = index_.find(nt.name);
      if (it == index_.end()) {
        problems += " unknown:" + nt.name;
      } else if (vars_[it->second].shape() != nt.value.shape()) {
        problems += " shape:" + nt.name + shape_string(nt.value.shape()) + "!=" +
                    shape_string(vars_[it->second].shape());
      }
    }
    if (!problems.empty()) {
      throw DataError("parameter import rejected:" + problems);
    }
    for (const auto& nt : values) {
      vars_[index_.at(nt.name)].mutable_value() = nt.value;
    }
  }

  void set_trainable(bool trainable) {
    for (auto& v : vars_) {
      v.set_requires_grad(trainable);
      v.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& v : vars_) v.zero_grad();
  }

  // FNV-1a over names and raw values; equal iff bit-identical (modulo hash collisions).
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* p = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
      }
    };
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      mix(names_[i].data(), names_[i].size());
      mix(vars_[i].value().data(), vars_[i].size() * sizeof(T));
    }
    return h;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var<T>> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
struct LinearParams {
  Var<T> weight;  // [in x out]
  Var<T> bias;    // [out]

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const { return g.linear(x, weight, bias); }
};

template <typename T>
LinearParams<T> make_linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                            Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  LinearParams<T> p;
  p.weight = store.add_uniform(name + ".weight", Shape{in, out}, bound, rng);
  p.bias = store.add(name + ".bias", Tensor<T>(Shape{out}));
  return p;
}

template <typename T>
struct NormParams {
  Var<T> gain;
  Var<T> bias;

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const { return g.layer_norm(x, gain, bias, 1e-5); }
};

template <typename T>
NormParams<T> make_norm(ParamStore<T>& store, const std::string& name, std::size_t d) {
  return {store.add(name + ".gain", Tensor<T>(Shape{d}, T(1))), store.add(name + ".bias", Tensor<T>(Shape{d}))};
}

template <typename T>
struct AttentionParams {
  LinearParams<T> query, key, value, output;
};

template <typename T>
AttentionParams<T> make_attention(ParamStore<T>& store, const std::string& name, std::size_t d, Rng& rng) {
  return {make_linear(store, name + ".query", d, d, rng), make_linear(store, name + ".key", d, d, rng),
          make_linear(store, name + ".value", d, d, rng), make_linear(store, name + ".output", d, d, rng)};
}

template <typename T>
struct FeedForwardParams {
  LinearParams<T> inner;  // d_model -> d_hidden
  LinearParams<T> outer;  // d_hidden -> d_model
};

template <typename T>
FeedForwardParams<T> make_ffn(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t hidden,
                              Rng& rng) {
  return {make_linear(store, name + ".inner", d, hidden, rng), make_linear(store, name + ".outer", hidden, d, rng)};
}

// Projects query/key/value inputs, attends per head under the layout's masks,
// concatenates heads and applies the output projection.
template <typename T>
Var<T> multi_head_attention(Graph<T>& g, const AttentionParams<T>& p, const Var<T>& query_in, const Var<T>& key_in,
                            const Var<T>& value_in, const AttentionLayout& layout, const ModelConfig& cfg,
                            std::vector<T>* probs_out = nullptr) {
  const Var<T> q = p.query(g, query_in);
  const Var<T> k = p.key(g, key_in);
  const Var<T> v = p.value(g, value_in);
  const Var<T> heads = g.attention(q, k, v, layout, cfg.n_head, cfg.attention_scale(), probs_out);
  return p.output(g, heads);
}

// Position-wise two-layer MLP with ReLU.
template <typename T>
Var<T> ffn_block(Graph<T>& g, const FeedForwardParams<T>& p, const Var<T>& x) {
  return p.outer(g, g.relu(p.inner(g, x)));
}

// norm(embedding * sqrt(d) + positional encoding)
template <typename T>
Var<T> embed_inputs(Graph<T>& g, const Var<T>& table, const NormParams<T>& norm, std::span<const TokenId> ids,
                    const SegmentLayout& layout, const Tensor<T>& pos_table,
                    LengthPolicy policy = LengthPolicy::kStrict) {
  const T factor = static_cast<T>(std::sqrt(static_cast<double>(table.shape()[1])));
  const Var<T> emb = g.embedding(table, ids, factor);
  return norm(g, g.add(emb, g.constant(positional_rows(pos_table, layout, policy))));
}

template <typename T>
struct EncoderLayerParams {
  AttentionParams<T> self_attn;
  NormParams<T> norm1;
  FeedForwardParams<T> ffn;
  NormParams<T> norm2;
};

// Post-norm Transformer encoder stack shared by teacher and student.
template <typename T>
class Encoder {
 public:
  Encoder() = default;

  Encoder(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng, const std::string& prefix = "encoder")
      : cfg_(cfg) {
    embed_ = store.add_uniform(prefix + ".embed", Shape{cfg.src_vocab, cfg.d_model},
                               1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng);
    input_norm_ = make_norm(store, prefix + ".input_norm", cfg.d_model);
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
      const std::string base = prefix + ".layers." + std::to_string(l);
      layers_.push_back({make_attention(store, base + ".self_attn", cfg.d_model, rng),
                         make_norm(store, base + ".norm1", cfg.d_model),
                         make_ffn(store, base + ".ffn", cfg.d_model, cfg.d_hidden, rng),
                         make_norm(store, base + ".norm2", cfg.d_model)});
    }
  }

  // [total source rows x d_model] states of the last layer.
  Var<T> forward(Graph<T>& g, const PackedBatch& src, const Tensor<T>& pos_table) const {
    Var<T> x = embed_inputs(g, embed_, input_norm_, src.ids, src.layout, pos_table);
    const AttentionLayout layout = self_attention_layout(src.layout, MaskKind::kFull);
    for (const auto& layer : layers_) {
      x = layer.norm1(g, g.add(x, multi_head_attention(g, layer.self_attn, x, x, x, layout, cfg_)));
      x = layer.norm2(g, g.add(x, ffn_block(g, layer.ffn, x)));
    }
    return x;
  }

  const Var<T>& embedding() const noexcept { return embed_; }

 private:
  ModelConfig cfg_;
  Var<T> embed_;
  NormParams<T> input_norm_;
  std::vector<EncoderLayerParams<T>> layers_;
};

}  // namespace natf

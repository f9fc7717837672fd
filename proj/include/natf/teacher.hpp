#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "natf/autograd.hpp"
#include "natf/error.hpp"
#include "natf/optim.hpp"
#include "natf/search.hpp"
#include "natf/token.hpp"
#include "natf/transformer.hpp"

namespace natf {

template <typename T>
struct TeacherDecoderLayer {
  AttentionParams<T> self_attn;
  NormParams<T> norm1;
  AttentionParams<T> cross_attn;
  NormParams<T> norm2;
  FeedForwardParams<T> ffn;
  NormParams<T> norm3;
};

// Generous decode bound for toy tasks.
inline std::size_t default_max_length(std::size_t source_length) { return 2 * source_length + 5; }

// Autoregressive Transformer: encoder, causally self-masked decoder with
// encoder-decoder attention, and an output projection. y_0 is bos and the
// sentence is closed by eos.
template <typename T>
class TeacherModel {
 public:
  TeacherModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), passes_(std::make_unique<std::atomic<std::size_t>>(0)) {
    cfg_.validate();
    Rng rng(seed);
    encoder_ = Encoder<T>(params_, cfg_, rng);
    tgt_embed_ = params_.add_uniform("decoder.embed", Shape{cfg_.tgt_vocab, cfg_.d_model},
                                     1.0 / std::sqrt(static_cast<double>(cfg_.d_model)), rng);
    input_norm_ = make_norm(params_, "decoder.input_norm", cfg_.d_model);
    for (std::size_t l = 0; l < cfg_.n_layer; ++l) {
      const std::string base = "decoder.layers." + std::to_string(l);
      layers_.push_back({make_attention(params_, base + ".self_attn", cfg_.d_model, rng),
                         make_norm(params_, base + ".norm1", cfg_.d_model),
                         make_attention(params_, base + ".cross_attn", cfg_.d_model, rng),
                         make_norm(params_, base + ".norm2", cfg_.d_model),
                         make_ffn(params_, base + ".ffn", cfg_.d_model, cfg_.d_hidden, rng),
                         make_norm(params_, base + ".norm3", cfg_.d_model)});
    }
    output_ = make_linear(params_, "output.proj", cfg_.d_model, cfg_.tgt_vocab, rng);
    pos_table_ = positional_table<T>(cfg_.max_length + 1, cfg_.d_model);
  }

  TeacherModel(TeacherModel&&) noexcept = default;
  TeacherModel& operator=(TeacherModel&&) noexcept = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }
  const Tensor<T>& positional() const noexcept { return pos_table_; }

  Var<T> encode(Graph<T>& g, const PackedBatch& src) const { return encoder_.forward(g, src, pos_table_); }

  // Teacher-forced decoder over packed inputs; returns [rows x tgt_vocab]
  // log-probabilities. Counts as one decoder pass.
  Var<T> decode(Graph<T>& g, const Var<T>& memory, const SegmentLayout& memory_layout,
                const PackedBatch& dec_in) const {
    ++*passes_;
    Var<T> x = embed_inputs(g, tgt_embed_, input_norm_, dec_in.ids, dec_in.layout, pos_table_, LengthPolicy::kExtend);
    const AttentionLayout self_layout = self_attention_layout(dec_in.layout, MaskKind::kCausal);
    const AttentionLayout cross_layout = cross_attention_layout(dec_in.layout, memory_layout);
    for (const auto& layer : layers_) {
      x = layer.norm1(g, g.add(x, multi_head_attention(g, layer.self_attn, x, x, x, self_layout, cfg_)));
      x = layer.norm2(g, g.add(x, multi_head_attention(g, layer.cross_attn, x, memory, memory, cross_layout, cfg_)));
      x = layer.norm3(g, g.add(x, ffn_block(g, layer.ffn, x)));
    }
    return g.log_softmax(output_(g, x));
  }

  std::size_t decoder_passes() const noexcept { return passes_->load(); }
  void reset_pass_counter() const noexcept { passes_->store(0); }

  // Incremental decoding state: per-layer cached self-attention keys and
  // values of every position fed so far.
  struct Cache {
    std::size_t position = 0;
    std::vector<std::vector<T>> keys;
    std::vector<std::vector<T>> values;
  };

  // StepScorer over one source sentence. The encoder runs once at
  // construction; each advance() is one decoder pass over all given states.
  class Scorer {
   public:
    using State = Cache;

    Scorer(const TeacherModel& model, const TokenSeq& source) : model_(&model) {
      Graph<T> g(GradMode::kInference);
      PackedBatch src;
      src.push(source.tokens());
      const Var<T> memory = model.encode(g, src);
      memory_rows_ = source.size();
      for (const auto& layer : model.layers_) {
        cross_keys_.push_back(layer.cross_attn.key(g, memory));
        cross_values_.push_back(layer.cross_attn.value(g, memory));
      }
    }

    State start() const {
      State s;
      s.keys.resize(model_->layers_.size());
      s.values.resize(model_->layers_.size());
      return s;
    }

    std::vector<std::vector<double>> advance(std::vector<State>& states, std::span<const TokenId> prev) {
      const TeacherModel& m = *model_;
      const std::size_t b = states.size(), d = m.cfg_.d_model;
      if (prev.size() != b) {
        throw UsageError("Scorer::advance: one previous token per state required");
      }
      ++*m.passes_;
      Graph<T> g(GradMode::kInference);
      const T factor = static_cast<T>(std::sqrt(static_cast<double>(d)));
      Tensor<T> emb(Shape{b, d});
      for (std::size_t i = 0; i < b; ++i) {
        if (prev[i] < 0 || static_cast<std::size_t>(prev[i]) >= m.cfg_.tgt_vocab) {
          throw UsageError("Scorer::advance: token outside target vocabulary");
        }
        const auto e = m.tgt_embed_.value().row(static_cast<std::size_t>(prev[i]));
        positional_row(m.pos_table_, states[i].position, emb.row(i));
        for (std::size_t c = 0; c < d; ++c) emb(i, c) += e[c] * factor;
      }
      Var<T> x = m.input_norm_(g, g.constant(std::move(emb)));
      AttentionLayout cross_layout;
      for (std::size_t i = 0; i < b; ++i) {
        cross_layout.push_back({i, 0, AttentionMask::full(1, memory_rows_)});
      }
      for (std::size_t l = 0; l < m.layers_.size(); ++l) {
        const auto& layer = m.layers_[l];
        const Var<T> q = layer.self_attn.query(g, x);
        const Var<T> k = layer.self_attn.key(g, x);
        const Var<T> v = layer.self_attn.value(g, x);
        std::size_t total = 0;
        for (std::size_t i = 0; i < b; ++i) {
          auto& s = states[i];
          s.keys[l].insert(s.keys[l].end(), k.value().row(i).begin(), k.value().row(i).end());
          s.values[l].insert(s.values[l].end(), v.value().row(i).begin(), v.value().row(i).end());
          total += s.keys[l].size() / d;
        }
        Tensor<T> kp(Shape{total, d}), vp(Shape{total, d});
        AttentionLayout self_layout;
        std::size_t off = 0;
        for (std::size_t i = 0; i < b; ++i) {
          const auto& s = states[i];
          std::copy(s.keys[l].begin(), s.keys[l].end(), kp.data() + off * d);
          std::copy(s.values[l].begin(), s.values[l].end(), vp.data() + off * d);
          const std::size_t n = s.keys[l].size() / d;
          self_layout.push_back({i, off, AttentionMask::full(1, n)});
          off += n;
        }
        const Var<T> heads = g.attention(q, g.constant(std::move(kp)), g.constant(std::move(vp)), self_layout,
                                         m.cfg_.n_head, m.cfg_.attention_scale());
        x = layer.norm1(g, g.add(x, layer.self_attn.output(g, heads)));
        const Var<T> cq = layer.cross_attn.query(g, x);
        const Var<T> cross = g.attention(cq, cross_keys_[l], cross_values_[l], cross_layout, m.cfg_.n_head,
                                         m.cfg_.attention_scale());
        x = layer.norm2(g, g.add(x, layer.cross_attn.output(g, cross)));
        x = layer.norm3(g, g.add(x, ffn_block(g, layer.ffn, x)));
      }
      const Var<T> logp = g.log_softmax(m.output_(g, x));
      std::vector<std::vector<double>> rows(b);
      for (std::size_t i = 0; i < b; ++i) {
        const auto r = logp.value().row(i);
        rows[i].assign(r.begin(), r.end());
        ++states[i].position;
      }
      return rows;
    }

   private:
    const TeacherModel* model_;
    std::size_t memory_rows_ = 0;
    std::vector<Var<T>> cross_keys_;
    std::vector<Var<T>> cross_values_;
  };

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  Encoder<T> encoder_;
  Var<T> tgt_embed_;
  NormParams<T> input_norm_;
  std::vector<TeacherDecoderLayer<T>> layers_;
  LinearParams<T> output_;
  Tensor<T> pos_table_;
  std::unique_ptr<std::atomic<std::size_t>> passes_;
};

// Decoder inputs [bos, y_1..y_T] and targets [y_1..y_T, eos] of a target.
inline std::pair<std::vector<TokenId>, std::vector<TokenId>> teacher_forcing_io(const TokenSeq& target) {
  std::vector<TokenId> in{kBos};
  std::vector<TokenId> out;
  for (const TokenId t : target.tokens()) {
    in.push_back(t);
    out.push_back(t);
  }
  out.push_back(kEos);
  return {std::move(in), std::move(out)};
}

// Mean per-token negative log-likelihood (eos included) of a batch under
// teacher forcing.
template <typename T>
Var<T> teacher_loss(Graph<T>& g, const TeacherModel<T>& model, std::span<const SentencePair> batch) {
  if (batch.empty()) {
    throw UsageError("teacher_loss: empty batch");
  }
  PackedBatch src, dec_in;
  std::vector<TokenId> targets;
  for (const auto& pair : batch) {
    src.push(pair.source.tokens());
    auto [in, out] = teacher_forcing_io(pair.target);
    dec_in.push(in);
    targets.insert(targets.end(), out.begin(), out.end());
  }
  const Var<T> memory = model.encode(g, src);
  const Var<T> logp = model.decode(g, memory, src.layout, dec_in);
  return g.cross_entropy(logp, targets, kPad, Reduction::kMean);
}

// One maximum-likelihood step; returns the batch loss before the update.
template <typename T>
double ar_train_step(TeacherModel<T>& model, std::span<const SentencePair> batch, AdamWarmup<T>& optim) {
  Graph<T> g;
  const Var<T> loss = teacher_loss(g, model, batch);
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericError("ar_train_step: non-finite loss");
  }
  g.backward(loss);
  optim.step();
  return static_cast<double>(loss.item());
}

template <typename T>
TokenSeq greedy_decode(const TeacherModel<T>& model, const TokenSeq& source, std::size_t max_length) {
  typename TeacherModel<T>::Scorer scorer(model, source);
  return TokenSeq(greedy_search(scorer, SearchLimits::up_to(max_length)).tokens);
}

template <typename T>
Hypothesis greedy_decode_hypothesis(const TeacherModel<T>& model, const TokenSeq& source, const SearchLimits& limits) {
  typename TeacherModel<T>::Scorer scorer(model, source);
  return greedy_search(scorer, limits);
}

template <typename T>
TokenSeq beam_decode(const TeacherModel<T>& model, const TokenSeq& source, std::size_t beam, std::size_t max_length,
                     bool length_normalize = false) {
  if (beam == 0) {
    throw UsageError("beam_decode: beam width must be at least 1");
  }
  typename TeacherModel<T>::Scorer scorer(model, source);
  return TokenSeq(beam_search(scorer, beam, SearchLimits::up_to(max_length), length_normalize).tokens);
}

namespace detail {

inline std::vector<TokenId> candidate_tokens(const TokenSeq& candidate) {
  std::vector<TokenId> toks = candidate.to_vector();
  if (!toks.empty() && toks.front() == kBos) toks.erase(toks.begin());
  if (!toks.empty() && toks.back() == kEos) toks.pop_back();
  for (const TokenId t : toks) {
    if (t == kPad || t == kBos || t == kEos) {
      throw UsageError("score_parallel: candidate contains a pad/bos/eos token in its interior");
    }
  }
  return toks;
}

}  // namespace detail

// Teacher-forced [T+1 x vocab] log-probability table for a candidate
// (rows: y_1..y_T then eos), computed in one decoder pass.
template <typename T>
Tensor<T> teacher_forced_logprobs(const TeacherModel<T>& model, const TokenSeq& source, const TokenSeq& candidate) {
  const TokenSeq cand(detail::candidate_tokens(candidate));
  Graph<T> g(GradMode::kInference);
  PackedBatch src, dec_in;
  src.push(source.tokens());
  dec_in.push(teacher_forcing_io(cand).first);
  const Var<T> memory = model.encode(g, src);
  return model.decode(g, memory, src.layout, dec_in).value();
}

// Per-position log p(y_t | y_<t, x) for t = 1..T+1 (last entry is eos).
template <typename T>
std::vector<double> score_positions(const TeacherModel<T>& model, const TokenSeq& source, const TokenSeq& candidate) {
  const TokenSeq cand(detail::candidate_tokens(candidate));
  const Tensor<T> table = teacher_forced_logprobs(model, source, cand);
  const auto targets = teacher_forcing_io(cand).second;
  std::vector<double> out(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    out[t] = static_cast<double>(table(t, static_cast<std::size_t>(targets[t])));
  }
  return out;
}

// log p_AR(candidate | source) in a single teacher-forced pass.
template <typename T>
double score_parallel(const TeacherModel<T>& model, const TokenSeq& source, const TokenSeq& candidate) {
  double total = 0.0;
  for (const double lp : score_positions(model, source, candidate)) total += lp;
  return total;
}

// Same quantity accumulated step by step through the incremental decoder.
template <typename T>
double score_stepwise(const TeacherModel<T>& model, const TokenSeq& source, const TokenSeq& candidate) {
  const std::vector<TokenId> toks = detail::candidate_tokens(candidate);
  typename TeacherModel<T>::Scorer scorer(model, source);
  std::vector<typename TeacherModel<T>::Cache> states{scorer.start()};
  TokenId prev = kBos;
  double total = 0.0;
  for (std::size_t t = 0; t <= toks.size(); ++t) {
    const auto rows = scorer.advance(states, std::span<const TokenId>(&prev, 1));
    const TokenId y = t < toks.size() ? toks[t] : kEos;
    total += rows[0][static_cast<std::size_t>(y)];
    prev = y;
  }
  return total;
}

// Encoder-side parameters (source embeddings included) under canonical names.
template <typename T>
std::vector<NamedTensor<T>> export_encoder(const TeacherModel<T>& model) {
  return model.params().snapshot("encoder.");
}

}  // namespace natf

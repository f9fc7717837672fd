#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "natf/aligner.hpp"
#include "natf/teacher.hpp"

namespace natf {

// How decoder inputs are built from the source.
enum class CopyMode { kFertility, kUniform };

struct NatOptions {
  std::size_t fertility_classes = kDefaultFertilityClasses;
  bool positional_attention = true;
  CopyMode copy = CopyMode::kFertility;
};

// Per-source-position categorical distributions, [T' x classes].
using FertilityDist = Tensor<double>;

template <typename T>
struct NatDecoderLayer {
  AttentionParams<T> self_attn;
  NormParams<T> norm1;
  AttentionParams<T> pos_attn;
  NormParams<T> norm2;
  AttentionParams<T> cross_attn;
  NormParams<T> norm3;
  FeedForwardParams<T> ffn;
  NormParams<T> norm4;
};

// Uniform copy indices (0-based) for target length T.
inline std::vector<std::size_t> uniform_copy_indices(std::size_t source_length, std::size_t target_length) {
  if (target_length == 0) {
    throw UsageError("copy_uniform: target length must be at least 1");
  }
  if (source_length == 0) {
    throw UsageError("copy_uniform: empty source");
  }
  std::vector<std::size_t> idx(target_length);
  for (std::size_t t = 1; t <= target_length; ++t) {
    const long long r = round_half_away(static_cast<double>(source_length * t) / static_cast<double>(target_length));
    idx[t - 1] = static_cast<std::size_t>(std::clamp<long long>(r, 1, static_cast<long long>(source_length))) - 1;
  }
  return idx;
}

inline TokenSeq copy_uniform(const TokenSeq& source, std::size_t target_length) {
  std::vector<TokenId> out;
  for (const std::size_t i : uniform_copy_indices(source.size(), target_length)) out.push_back(source[i]);
  return TokenSeq(std::move(out));
}

inline std::size_t fertility_total(const FertilitySeq& f) {
  std::size_t total = 0;
  for (const std::size_t v : f) total += v;
  return total;
}

inline TokenSeq copy_fertility(const TokenSeq& source, const FertilitySeq& f) {
  if (f.size() != source.size()) {
    throw UsageError("copy_fertility: " + std::to_string(f.size()) + " fertilities for " +
                     std::to_string(source.size()) + " source tokens");
  }
  if (fertility_total(f) == 0) {
    throw UsageError("copy_fertility: fertilities sum to zero");
  }
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < f.size(); ++i) out.insert(out.end(), f[i], source[i]);
  return TokenSeq(std::move(out));
}

// Zero-total floor: one token at the position most likely to have fertility 1.
inline void apply_length_floor(FertilitySeq& f, const FertilityDist& dist) {
  if (fertility_total(f) != 0 || f.empty()) return;
  std::size_t best = 0;
  for (std::size_t i = 1; i < f.size(); ++i) {
    if (dist(i, 1) > dist(best, 1)) best = i;
  }
  f[best] = 1;
}

inline FertilitySeq argmax_fertilities(const FertilityDist& dist) {
  FertilitySeq f(dist.rows());
  for (std::size_t i = 0; i < dist.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < dist.cols(); ++c) {
      if (dist(i, c) > dist(i, best)) best = c;
    }
    f[i] = best;
  }
  apply_length_floor(f, dist);
  return f;
}

inline FertilitySeq average_fertilities(const FertilityDist& dist) {
  FertilitySeq f(dist.rows());
  for (std::size_t i = 0; i < dist.rows(); ++i) {
    double e = 0.0;
    for (std::size_t c = 0; c < dist.cols(); ++c) e += dist(i, c) * static_cast<double>(c);
    f[i] = static_cast<std::size_t>(std::max<long long>(0, round_half_away(e)));
  }
  apply_length_floor(f, dist);
  return f;
}

// Independent per-position draws; the floor rule is optional so that
// REINFORCE can score the raw sample's log-probability.
inline FertilitySeq sample_fertilities(const FertilityDist& dist, Rng& rng, bool floor = true) {
  FertilitySeq f(dist.rows());
  for (std::size_t i = 0; i < dist.rows(); ++i) f[i] = rng.categorical(dist.row(i));
  if (floor) apply_length_floor(f, dist);
  return f;
}

// Candidate fertility sequences for noisy parallel decoding: argmax, then the
// rounded expectation, then independent per-position samples.
inline std::vector<FertilitySeq> npd_candidates(const FertilityDist& dist, std::size_t samples, std::uint64_t seed) {
  if (samples == 0) {
    throw UsageError("noisy parallel decoding needs at least one sample");
  }
  std::vector<FertilitySeq> out{argmax_fertilities(dist)};
  if (samples >= 2) out.push_back(average_fertilities(dist));
  Rng rng(seed);
  while (out.size() < samples) out.push_back(sample_fertilities(dist, rng));
  return out;
}

inline double fertility_log_prob(const FertilityDist& dist, const FertilitySeq& f) {
  double lp = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) lp += std::log(dist(i, f[i]));
  return lp;
}

struct DecodeResult {
  TokenSeq output;
  FertilitySeq fertilities;
  double student_log_prob = 0.0;
  std::optional<double> teacher_score;
  double seconds = 0.0;
  std::size_t nat_passes = 0;
  std::size_t teacher_passes = 0;
  std::size_t candidates = 1;
};

template <typename T>
class NatModel {
 public:
  NatModel(const ModelConfig& cfg, std::uint64_t seed, NatOptions opts = {})
      : cfg_(cfg), opts_(opts), passes_(std::make_unique<std::atomic<std::size_t>>(0)) {
    cfg_.validate();
    if (opts_.fertility_classes < 2) {
      throw UsageError("NatModel: at least two fertility classes are required");
    }
    Rng rng(seed);
    encoder_ = Encoder<T>(params_, cfg_, rng);
    fertility_ = make_linear(params_, "fertility.proj", cfg_.d_model, opts_.fertility_classes, rng);
    input_norm_ = make_norm(params_, "decoder.input_norm", cfg_.d_model);
    for (std::size_t l = 0; l < cfg_.n_layer; ++l) {
      const std::string base = "decoder.layers." + std::to_string(l);
      NatDecoderLayer<T> layer;
      layer.self_attn = make_attention(params_, base + ".self_attn", cfg_.d_model, rng);
      layer.norm1 = make_norm(params_, base + ".norm1", cfg_.d_model);
      if (opts_.positional_attention) {
        layer.pos_attn = make_attention(params_, base + ".pos_attn", cfg_.d_model, rng);
        layer.norm2 = make_norm(params_, base + ".norm2", cfg_.d_model);
      }
      layer.cross_attn = make_attention(params_, base + ".cross_attn", cfg_.d_model, rng);
      layer.norm3 = make_norm(params_, base + ".norm3", cfg_.d_model);
      layer.ffn = make_ffn(params_, base + ".ffn", cfg_.d_model, cfg_.d_hidden, rng);
      layer.norm4 = make_norm(params_, base + ".norm4", cfg_.d_model);
      layers_.push_back(std::move(layer));
    }
    output_ = make_linear(params_, "output.proj", cfg_.d_model, cfg_.tgt_vocab, rng);
    pos_table_ = positional_table<T>(cfg_.max_length, cfg_.d_model);
  }

  NatModel(NatModel&&) noexcept = default;
  NatModel& operator=(NatModel&&) noexcept = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  const NatOptions& options() const noexcept { return opts_; }
  std::size_t fertility_classes() const noexcept { return opts_.fertility_classes; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

  Var<T> encode(Graph<T>& g, const PackedBatch& src) const { return encoder_.forward(g, src, pos_table_); }

  // [source rows x classes] fertility log-probabilities from the last encoder layer.
  Var<T> fertility_log_probs(Graph<T>& g, const Var<T>& memory) const {
    return g.log_softmax(fertility_(g, memory));
  }

  // Decoder over copied source tokens; [rows x tgt_vocab] log-probabilities.
  // One call is one decoder pass, whatever the output length.
  Var<T> decode(Graph<T>& g, const Var<T>& memory, const SegmentLayout& memory_layout, const PackedBatch& dec_in,
                std::vector<T>* pos_probs_out = nullptr) const {
    ++*passes_;
    Var<T> x = embed_inputs(g, encoder_.embedding(), input_norm_, dec_in.ids, dec_in.layout, pos_table_,
                                LengthPolicy::kExtend);
    const AttentionLayout self_layout = self_attention_layout(dec_in.layout, MaskKind::kSelfMasked);
    const AttentionLayout full_layout = self_attention_layout(dec_in.layout, MaskKind::kFull);
    const AttentionLayout cross_layout = cross_attention_layout(dec_in.layout, memory_layout);
    const Var<T> positions = g.constant(positional_rows(pos_table_, dec_in.layout, LengthPolicy::kExtend));
    for (const auto& layer : layers_) {
      x = layer.norm1(g, g.add(x, multi_head_attention(g, layer.self_attn, x, x, x, self_layout, cfg_)));
      if (opts_.positional_attention) {
        x = layer.norm2(g, g.add(x, multi_head_attention(g, layer.pos_attn, positions, positions, x, full_layout, cfg_,
                                                         pos_probs_out)));
      }
      x = layer.norm3(g, g.add(x, multi_head_attention(g, layer.cross_attn, x, memory, memory, cross_layout, cfg_)));
      x = layer.norm4(g, g.add(x, ffn_block(g, layer.ffn, x)));
    }
    return g.log_softmax(output_(g, x));
  }

  std::size_t decoder_passes() const noexcept { return passes_->load(); }
  void reset_pass_counter() const noexcept { passes_->store(0); }

  // Decoder inputs for one sentence under the model's copy mode. In uniform
  // mode the fertility vector is read only through its total.
  TokenSeq decoder_inputs(const TokenSeq& source, const FertilitySeq& f) const {
    if (opts_.copy == CopyMode::kUniform) return copy_uniform(source, fertility_total(f));
    return copy_fertility(source, f);
  }

 private:
  ModelConfig cfg_;
  NatOptions opts_;
  ParamStore<T> params_;
  Encoder<T> encoder_;
  LinearParams<T> fertility_;
  NormParams<T> input_norm_;
  std::vector<NatDecoderLayer<T>> layers_;
  LinearParams<T> output_;
  Tensor<T> pos_table_;
  std::unique_ptr<std::atomic<std::size_t>> passes_;
};

inline PackedBatch single(const TokenSeq& seq) {
  PackedBatch b;
  b.push(seq.tokens());
  return b;
}

// Fertility distributions; pad source tokens get a point mass on class 0.
template <typename T>
FertilityDist fertility_distribution(Graph<T>& g, const NatModel<T>& model, const TokenSeq& source,
                                     const Var<T>& memory) {
  const Tensor<T> lp = model.fertility_log_probs(g, memory).value();
  FertilityDist dist(Shape{source.size(), model.fertility_classes()});
  for (std::size_t i = 0; i < source.size(); ++i) {
    for (std::size_t c = 0; c < dist.cols(); ++c) {
      dist(i, c) = source[i] == kPad ? (c == 0 ? 1.0 : 0.0) : std::exp(static_cast<double>(lp(i, c)));
    }
  }
  return dist;
}

template <typename T>
FertilityDist predict_fertility(const NatModel<T>& model, const TokenSeq& source) {
  Graph<T> g(GradMode::kInference);
  const Var<T> memory = model.encode(g, single(source));
  return fertility_distribution(g, model, source, memory);
}

template <typename T>
Tensor<T> nat_forward(const NatModel<T>& model, const TokenSeq& source, const TokenSeq& decoder_inputs) {
  Graph<T> g(GradMode::kInference);
  const PackedBatch src = single(source);
  const Var<T> memory = model.encode(g, src);
  return model.decode(g, memory, src.layout, single(decoder_inputs)).value();
}

namespace detail {

// Per-row argmax over emittable tokens (pad, bos and eos excluded), lowest
// id on ties.
template <typename T>
std::pair<TokenSeq, double> argmax_rows(const Tensor<T>& logp) {
  std::vector<TokenId> out(logp.rows());
  double lp = 0.0;
  for (std::size_t r = 0; r < logp.rows(); ++r) {
    std::size_t best = static_cast<std::size_t>(kUnk);
    for (std::size_t c = best + 1; c < logp.cols(); ++c) {
      if (logp(r, c) > logp(r, best)) best = c;
    }
    out[r] = static_cast<TokenId>(best);
    lp += static_cast<double>(logp(r, best));
  }
  return {TokenSeq(std::move(out)), lp};
}

// Translations of one source under several fertility sequences, decoded
// as one packed batch after a single encoder run. Each candidate is still an
// independent decoder evaluation and is counted as one pass.
template <typename T>
std::vector<std::pair<TokenSeq, double>> translate_candidates(const NatModel<T>& model, Graph<T>& g,
                                                              const TokenSeq& source, const Var<T>& memory,
                                                              const std::vector<FertilitySeq>& cands) {
  std::vector<std::pair<TokenSeq, double>> out;
  const PackedBatch src = single(source);
  for (const auto& f : cands) {
    const Tensor<T> logp = model.decode(g, memory, src.layout, single(model.decoder_inputs(source, f))).value();
    out.push_back(argmax_rows(logp));
  }
  return out;
}

}  // namespace detail

// G(x, f): per-position argmax of the decoder given fertilities f.
template <typename T>
TokenSeq translate_given_fertility(const NatModel<T>& model, const TokenSeq& source, const FertilitySeq& f) {
  return detail::argmax_rows(nat_forward(model, source, model.decoder_inputs(source, f))).first;
}

enum class Strategy { kArgmax, kAverage, kNpd };

struct DecodeOptions {
  Strategy strategy = Strategy::kArgmax;
  std::size_t samples = 1;
  std::uint64_t seed = 0;
  // Uniform-copy models only: explicit output length, else max(1, Round(T' * ratio)).
  std::optional<std::size_t> target_length;
  double length_ratio = 1.0;

  static DecodeOptions of(Strategy strategy, std::size_t samples = 1, std::uint64_t seed = 0) {
    DecodeOptions o;
    o.strategy = strategy;
    o.samples = samples;
    o.seed = seed;
    return o;
  }
};

// Decodes one sentence. NPD needs a teacher; the other strategies ignore it.
template <typename T, typename U = T>
DecodeResult nat_decode(const NatModel<T>& model, const TokenSeq& source, const DecodeOptions& opts,
                        const TeacherModel<U>* teacher = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t nat_before = model.decoder_passes();
  const std::size_t teacher_before = teacher != nullptr ? teacher->decoder_passes() : 0;
  if (source.empty()) {
    throw UsageError("nat_decode: empty source");
  }
  if (opts.strategy == Strategy::kNpd && teacher == nullptr) {
    throw UsageError("nat_decode: noisy parallel decoding requires a teacher");
  }
  Graph<T> g(GradMode::kInference);
  const PackedBatch src = single(source);
  const Var<T> memory = model.encode(g, src);
  std::vector<FertilitySeq> cands;
  FertilityDist dist;
  if (model.options().copy == CopyMode::kUniform) {
    const std::size_t len = opts.target_length.value_or(static_cast<std::size_t>(
        std::max<long long>(1, round_half_away(static_cast<double>(source.size()) * opts.length_ratio))));
    FertilitySeq f(source.size(), 0);
    f[0] = len;
    cands.push_back(f);
  } else {
    dist = fertility_distribution(g, model, source, memory);
    switch (opts.strategy) {
      case Strategy::kArgmax:
        cands.push_back(argmax_fertilities(dist));
        break;
      case Strategy::kAverage:
        cands.push_back(average_fertilities(dist));
        break;
      case Strategy::kNpd:
        cands = npd_candidates(dist, opts.samples, opts.seed);
        break;
    }
  }
  const auto translations = detail::translate_candidates(model, g, source, memory, cands);
  std::size_t best = 0;
  std::optional<double> best_score;
  if (opts.strategy == Strategy::kNpd) {
    for (std::size_t c = 0; c < translations.size(); ++c) {
      const double s = score_parallel(*teacher, source, translations[c].first);
      if (!best_score || s > *best_score) {
        best_score = s;
        best = c;
      }
    }
  }
  DecodeResult r;
  r.output = translations[best].first;
  r.fertilities = cands[best];
  r.student_log_prob = translations[best].second;
  if (model.options().copy == CopyMode::kFertility) r.student_log_prob += fertility_log_prob(dist, cands[best]);
  r.teacher_score = best_score;
  r.candidates = cands.size();
  r.nat_passes = model.decoder_passes() - nat_before;
  r.teacher_passes = teacher != nullptr ? teacher->decoder_passes() - teacher_before : 0;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

template <typename T>
DecodeResult decode_argmax(const NatModel<T>& model, const TokenSeq& source) {
  return nat_decode<T>(model, source, DecodeOptions::of(Strategy::kArgmax));
}

template <typename T>
DecodeResult decode_average(const NatModel<T>& model, const TokenSeq& source) {
  return nat_decode<T>(model, source, DecodeOptions::of(Strategy::kAverage));
}

template <typename T, typename U>
DecodeResult decode_npd(const NatModel<T>& model, const TeacherModel<U>& teacher, const TokenSeq& source,
                        std::size_t samples, std::uint64_t seed) {
  return nat_decode(model, source, DecodeOptions::of(Strategy::kNpd, samples, seed), &teacher);
}

// Best teacher-scored translation over an explicit set of fertility
// sequences; ties go to the earliest candidate.
template <typename T, typename U>
DecodeResult decode_over_fertilities(const NatModel<T>& model, const TeacherModel<U>& teacher, const TokenSeq& source,
                                     const std::vector<FertilitySeq>& cands) {
  if (cands.empty()) {
    throw UsageError("decode_over_fertilities: no candidates");
  }
  Graph<T> g(GradMode::kInference);
  const Var<T> memory = model.encode(g, single(source));
  const auto translations = detail::translate_candidates(model, g, source, memory, cands);
  DecodeResult r;
  for (std::size_t c = 0; c < translations.size(); ++c) {
    const double s = score_parallel(teacher, source, translations[c].first);
    if (!r.teacher_score || s > *r.teacher_score) {
      r.teacher_score = s;
      r.output = translations[c].first;
      r.fertilities = cands[c];
      r.student_log_prob = translations[c].second;
    }
  }
  r.candidates = cands.size();
  return r;
}

}  // namespace natf

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "natf/aligner.hpp"
#include "natf/nat.hpp"
#include "natf/optim.hpp"
#include "natf/teacher.hpp"

namespace natf {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  // Stop early once a whole epoch's mean loss drops below this.
  double target_loss = 0.0;
  double max_seconds = 0.0;  // 0 = unbounded
  AdamConfig optim;
  std::uint64_t seed = 1;
  // Fine-tuning.
  double lambda = 0.25;
  bool use_rl = true;
  bool use_bp = true;
  bool use_kd = true;
  bool kd_fertility = true;
  std::size_t rl_samples = 1;

  void validate() const {
    if (batch_size == 0) throw UsageError("batch_size must be positive");
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
      throw UsageError("lambda must lie in [0, 1], got " + std::to_string(lambda));
    }
    if (rl_samples == 0) throw UsageError("rl_samples must be positive");
  }
};

// Append-only JSONL training records.
class TrainLog {
 public:
  TrainLog() = default;
  explicit TrainLog(std::ostream* out) : out_(out), start_(std::chrono::steady_clock::now()) {}

  void record(std::size_t step, const std::string& phase, const nlohmann::json& losses) {
    nlohmann::json rec{{"step", step}, {"phase", phase}, {"seconds", elapsed()}};
    for (const auto& [k, v] : losses.items()) rec[k] = v;
    records_.push_back(rec);
    if (out_ != nullptr) *out_ << rec.dump() << '\n';
  }

  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

  const std::vector<nlohmann::json>& records() const noexcept { return records_; }

 private:
  std::ostream* out_ = nullptr;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
  std::vector<nlohmann::json> records_;
};

// ------------------------------------------------------------ distillation

enum class DistillMode { kGreedy, kBeam };

struct DistilledCorpus {
  ParallelCorpus pairs;
  std::string provenance;
  std::size_t empty_replaced = 0;
};

template <typename T>
DistilledCorpus build_distill_corpus(const ParallelCorpus& corpus, const TeacherModel<T>& teacher,
                                     DistillMode mode = DistillMode::kGreedy, std::size_t beam = 4) {
  DistilledCorpus out;
  out.provenance = mode == DistillMode::kGreedy ? "greedy b=1" : "beam b=" + std::to_string(beam);
  out.pairs.reserve(corpus.size());
  for (const auto& pair : corpus) {
    const std::size_t max_len = std::min(default_max_length(pair.source.size()), teacher.config().max_length);
    TokenSeq y = mode == DistillMode::kGreedy ? greedy_decode(teacher, pair.source, max_len)
                                              : beam_decode(teacher, pair.source, beam, max_len);
    if (y.empty()) {
      y = TokenSeq{kEos};
      ++out.empty_replaced;
    }
    out.pairs.push_back({pair.source, std::move(y)});
  }
  if (out.empty_replaced > 0) {
    std::cerr << "warning: " << out.empty_replaced << " empty teacher decode(s) replaced by a single eos\n";
  }
  return out;
}

// Aligner-derived fertilities for every pair (the deterministic proposal).
struct FertilityTargets {
  std::vector<FertilitySeq> fertilities;
  EmTrace trace;
  AlignmentModel aligner;
};

inline FertilityTargets aligner_fertilities(const ParallelCorpus& corpus, std::size_t classes = kDefaultFertilityClasses,
                                            std::size_t iters_m1 = 5, std::size_t iters_m2 = 5) {
  FertilityTargets out;
  out.aligner = em_train(corpus, iters_m1, iters_m2, &out.trace);
  out.fertilities.reserve(corpus.size());
  for (const auto& pair : corpus) {
    if (pair.source.empty() || pair.target.empty()) {
      out.fertilities.emplace_back(pair.source.size(), 0);
      continue;
    }
    out.fertilities.push_back(extract_fertilities(viterbi_align(pair, out.aligner), pair.source.size(), classes));
  }
  return out;
}

// Pairs whose fertilities disagree with their target length are dropped and
// counted rather than truncated.
struct FertilityCorpus {
  ParallelCorpus pairs;
  std::vector<FertilitySeq> fertilities;
  std::size_t dropped = 0;
};

inline FertilityCorpus checked_fertility_corpus(const ParallelCorpus& corpus, const std::vector<FertilitySeq>& ferts) {
  if (corpus.size() != ferts.size()) {
    throw DataError("fertility file has " + std::to_string(ferts.size()) + " lines for " +
                    std::to_string(corpus.size()) + " sentence pairs");
  }
  FertilityCorpus out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& p = corpus[i];
    if (p.source.empty() || p.target.empty() || ferts[i].size() != p.source.size() ||
        fertility_total(ferts[i]) != p.target.size()) {
      ++out.dropped;
      continue;
    }
    out.pairs.push_back(p);
    out.fertilities.push_back(ferts[i]);
  }
  if (out.dropped > 0) {
    std::cerr << "warning: dropped " << out.dropped << " pair(s) whose fertilities do not sum to the target length\n";
  }
  return out;
}

// -------------------------------------------------------- supervised NAT

template <typename T>
struct NatLoss {
  Var<T> translation;
  Var<T> fertility;
  Var<T> total;
};

namespace detail {

template <typename T>
struct PackedNatBatch {
  PackedBatch src;
  PackedBatch dec_in;
  std::vector<TokenId> targets;
  std::vector<TokenId> fertility_targets;
};

template <typename T>
PackedNatBatch<T> pack_nat_batch(const NatModel<T>& model, std::span<const SentencePair> batch,
                                 std::span<const FertilitySeq> ferts) {
  if (batch.size() != ferts.size()) {
    throw UsageError("NAT batch: " + std::to_string(ferts.size()) + " fertility sequences for " +
                     std::to_string(batch.size()) + " pairs");
  }
  PackedNatBatch<T> b;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& p = batch[i];
    const auto& f = ferts[i];
    if (f.size() != p.source.size()) {
      throw DataError("NAT batch: pair " + std::to_string(i) + " has " + std::to_string(f.size()) +
                      " fertilities for " + std::to_string(p.source.size()) + " source tokens");
    }
    if (fertility_total(f) != p.target.size()) {
      throw DataError("NAT batch: pair " + std::to_string(i) + " fertilities sum to " +
                      std::to_string(fertility_total(f)) + " but the target has " +
                      std::to_string(p.target.size()) + " tokens");
    }
    b.src.push(p.source.tokens());
    b.dec_in.push(model.decoder_inputs(p.source, f).tokens());
    const auto t = p.target.tokens();
    b.targets.insert(b.targets.end(), t.begin(), t.end());
    for (const std::size_t v : f) {
      if (v >= model.fertility_classes()) {
        throw DataError("NAT batch: fertility " + std::to_string(v) + " outside the " +
                        std::to_string(model.fertility_classes()) + " classes");
      }
      b.fertility_targets.push_back(static_cast<TokenId>(v));
    }
  }
  return b;
}

}  // namespace detail

// The two bracketed terms of the variational bound with a deterministic
// proposal: translation NLL given the aligner fertilities (mean over target
// tokens) and fertility NLL (mean over source positions). Uniform-copy models
// have no fertility term. The total is exactly their sum.
template <typename T>
NatLoss<T> nat_ml_loss(Graph<T>& g, const NatModel<T>& model, std::span<const SentencePair> batch,
                       std::span<const FertilitySeq> ferts) {
  if (batch.empty()) {
    throw UsageError("nat_ml_loss: empty batch");
  }
  const auto b = detail::pack_nat_batch(model, batch, ferts);
  const Var<T> memory = model.encode(g, b.src);
  const Var<T> logp = model.decode(g, memory, b.src.layout, b.dec_in);
  NatLoss<T> loss;
  // Target ids are never pad here, so the pad id is set out of range.
  loss.translation = g.cross_entropy(logp, b.targets, -1, Reduction::kMean);
  if (model.options().copy == CopyMode::kFertility) {
    loss.fertility = g.cross_entropy(model.fertility_log_probs(g, memory), b.fertility_targets, -1, Reduction::kMean);
  } else {
    loss.fertility = g.constant(Tensor<T>::scalar(T(0)));
  }
  loss.total = g.add(loss.translation, loss.fertility);
  return loss;
}

struct NatStepLoss {
  double translation = 0.0;
  double fertility = 0.0;
  double total = 0.0;
};

template <typename T>
NatStepLoss nat_ml_step(NatModel<T>& model, std::span<const SentencePair> batch, std::span<const FertilitySeq> ferts,
                        AdamWarmup<T>& optim) {
  Graph<T> g;
  const NatLoss<T> loss = nat_ml_loss(g, model, batch, ferts);
  NatStepLoss out{loss.translation.item(), loss.fertility.item(), loss.total.item()};
  if (!std::isfinite(out.total)) {
    throw NumericError("nat_ml_step: non-finite loss");
  }
  g.backward(loss.total);
  optim.step();
  return out;
}

// Copies every encoder parameter (source embeddings included). Fails with the
// list of offending keys on any name or shape mismatch.
template <typename T>
void init_encoder_from_teacher(NatModel<T>& student, const std::vector<NamedTensor<T>>& exported) {
  const auto own = student.params().snapshot("encoder.");
  std::vector<std::string> missing;
  for (const auto& nt : own) {
    bool found = false;
    for (const auto& e : exported) found = found || e.name == nt.name;
    if (!found) missing.push_back(nt.name);
  }
  if (!missing.empty()) {
    std::string msg = "encoder import: missing";
    for (const auto& m : missing) msg += " " + m;
    throw DataError(msg);
  }
  for (const auto& e : exported) {
    if (e.name.rfind("encoder.", 0) != 0) {
      throw DataError("encoder import: non-encoder parameter " + e.name);
    }
  }
  student.params().assign(exported);
}

// ------------------------------------------------------------ fine-tuning

// Teacher log-probabilities [T+1 x V] along the candidate, with the candidate
// itself as decoder input (one teacher pass).
template <typename U>
Tensor<double> teacher_table(const TeacherModel<U>& teacher, const TokenSeq& source, const TokenSeq& candidate) {
  return teacher_forced_logprobs(teacher, source, candidate).template cast<double>();
}

// Expected teacher log-probability under the student's per-position
// distributions along y_hat, plus the eos step, which the student does not
// model and is treated as a point mass. Maximized by a good student; the loss
// is its negation.
inline double rkl_value(const Tensor<double>& student_probs, const Tensor<double>& teacher_lp) {
  double v = 0.0;
  for (std::size_t t = 0; t < student_probs.rows(); ++t) {
    for (std::size_t y = 0; y < student_probs.cols(); ++y) v += student_probs(t, y) * teacher_lp(t, y);
  }
  return v + teacher_lp(student_probs.rows(), static_cast<std::size_t>(kEos));
}

template <typename T>
void check_vocab(const NatModel<T>& student, const ModelConfig& teacher_cfg) {
  if (student.config().tgt_vocab != teacher_cfg.tgt_vocab) {
    throw UsageError("student and teacher target vocabularies differ (" + std::to_string(student.config().tgt_vocab) +
                     " vs " + std::to_string(teacher_cfg.tgt_vocab) + ")");
  }
}

struct RklResult {
  double loss = 0.0;  // negated expected teacher log-probability
  TokenSeq translation;
};

// rkl loss at fertilities f, inference only.
template <typename T, typename U>
RklResult rkl_loss(const NatModel<T>& student, const TeacherModel<U>& teacher, const TokenSeq& source,
                   const FertilitySeq& f) {
  check_vocab(student, teacher.config());
  const Tensor<T> logp = nat_forward(student, source, student.decoder_inputs(source, f));
  RklResult r;
  r.translation = detail::argmax_rows(logp).first;
  Tensor<double> probs(logp.shape());
  for (std::size_t i = 0; i < logp.size(); ++i) probs[i] = std::exp(static_cast<double>(logp[i]));
  r.loss = -rkl_value(probs, teacher_table(teacher, source, r.translation));
  return r;
}

// Differentiable rkl loss summed over the batch rows of a packed student
// forward. Rows of sentence s use the teacher table of that sentence's
// argmax translation.
template <typename T>
Var<T> rkl_batch_loss(Graph<T>& g, const Var<T>& student_logp, const std::vector<Tensor<double>>& tables,
                      const SegmentLayout& rows) {
  Tensor<T> weights(student_logp.shape());
  double constant = 0.0;
  for (std::size_t s = 0; s < rows.count(); ++s) {
    const auto& tab = tables[s];
    for (std::size_t t = 0; t < rows.lengths[s]; ++t) {
      for (std::size_t y = 0; y < weights.cols(); ++y) weights(rows.offsets[s] + t, y) = static_cast<T>(tab(t, y));
    }
    constant += tab(rows.lengths[s], static_cast<std::size_t>(kEos));
  }
  const Var<T> value = g.add(g.dot(g.exp(student_logp), weights), g.constant(Tensor<T>::scalar(static_cast<T>(constant))));
  return g.scale(value, T(-1));
}

// REINFORCE surrogate for one sampled fertility sequence: advantage times the
// log-probability of the raw (pre-floor) sample. Its gradient is the
// single-sample estimator.
template <typename T>
Var<T> reinforce_surrogate(Graph<T>& g, const Var<T>& fertility_logp, std::size_t row_offset, const FertilitySeq& f,
                           double advantage) {
  Tensor<T> w(fertility_logp.shape());
  for (std::size_t i = 0; i < f.size(); ++i) w(row_offset + i, f[i]) = static_cast<T>(advantage);
  return g.dot(fertility_logp, w);
}

struct FinetuneLoss {
  double rl = 0.0;
  double bp = 0.0;
  double kd = 0.0;
  double total = 0.0;
  double mean_reward = 0.0;     // mean rkl loss of the sampled fertilities
  double mean_baseline = 0.0;   // mean rkl loss of the average fertilities
  std::size_t rl_skipped = 0;   // samples longer than max_length
};

// Weighted objective lambda (L_RL + L_BP) + (1 - lambda) L_KD on one batch,
// followed by one optimizer step. Terms switched off in cfg, or with zero
// weight, are not evaluated.
template <typename T, typename U>
FinetuneLoss finetune_step(NatModel<T>& model, const TeacherModel<U>& teacher, std::span<const SentencePair> batch,
                           std::span<const FertilitySeq> ferts, const TrainConfig& cfg, AdamWarmup<T>& optim,
                           Rng& rng) {
  cfg.validate();
  check_vocab(model, teacher.config());
  const auto b = detail::pack_nat_batch(model, batch, ferts);
  const double lambda = cfg.lambda;
  const bool want_kd = cfg.use_kd && lambda < 1.0;
  const bool want_bp = cfg.use_bp && lambda > 0.0;
  const bool want_rl = cfg.use_rl && lambda > 0.0 && model.options().copy == CopyMode::kFertility;
  std::size_t target_tokens = 0;
  for (const auto& p : batch) target_tokens += p.target.size();
  const double norm = 1.0 / static_cast<double>(target_tokens);

  Graph<T> g;
  const Var<T> memory = model.encode(g, b.src);
  const Var<T> logp = model.decode(g, memory, b.src.layout, b.dec_in);
  const Var<T> fert_lp = model.fertility_log_probs(g, memory);
  FinetuneLoss out;
  std::vector<Var<T>> terms;

  if (want_kd) {
    Var<T> kd = g.cross_entropy(logp, b.targets, -1, Reduction::kMean);
    if (cfg.kd_fertility && model.options().copy == CopyMode::kFertility) {
      kd = g.add(kd, g.cross_entropy(fert_lp, b.fertility_targets, -1, Reduction::kMean));
    }
    out.kd = kd.item();
    terms.push_back(g.scale(kd, static_cast<T>(1.0 - lambda)));
  }
  if (want_bp) {
    std::vector<Tensor<double>> tables;
    for (std::size_t s = 0; s < batch.size(); ++s) {
      Tensor<T> rows(Shape{b.dec_in.layout.lengths[s], logp.shape()[1]});
      std::copy_n(logp.value().data() + b.dec_in.layout.offsets[s] * rows.cols(), rows.size(), rows.data());
      tables.push_back(teacher_table(teacher, batch[s].source, detail::argmax_rows(rows).first));
    }
    const Var<T> bp = g.scale(rkl_batch_loss(g, logp, tables, b.dec_in.layout), static_cast<T>(norm));
    out.bp = bp.item();
    terms.push_back(g.scale(bp, static_cast<T>(lambda)));
  }
  if (want_rl) {
    Tensor<double> all_probs(fert_lp.shape());
    for (std::size_t i = 0; i < all_probs.size(); ++i) all_probs[i] = std::exp(static_cast<double>(fert_lp.value()[i]));
    Var<T> rl;
    std::size_t used = 0;
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const std::size_t off = b.src.layout.offsets[s], len = b.src.layout.lengths[s];
      FertilityDist dist(Shape{len, all_probs.cols()});
      std::copy_n(all_probs.data() + off * dist.cols(), dist.size(), dist.data());
      const FertilitySeq avg = average_fertilities(dist);
      const double baseline = rkl_loss(model, teacher, batch[s].source, avg).loss;
      for (std::size_t k = 0; k < cfg.rl_samples; ++k) {
        const FertilitySeq raw = sample_fertilities(dist, rng, false);
        FertilitySeq floored = raw;
        apply_length_floor(floored, dist);
        if (fertility_total(floored) > model.config().max_length) {
          ++out.rl_skipped;
          continue;
        }
        const double reward = rkl_loss(model, teacher, batch[s].source, floored).loss;
        out.mean_reward += reward;
        out.mean_baseline += baseline;
        ++used;
        const Var<T> term = reinforce_surrogate(g, fert_lp, off, raw,
                                                (reward - baseline) * norm / static_cast<double>(cfg.rl_samples));
        rl = rl ? g.add(rl, term) : term;
      }
    }
    if (used > 0) {
      out.mean_reward /= static_cast<double>(used);
      out.mean_baseline /= static_cast<double>(used);
    }
    if (rl) {
      out.rl = rl.item();
      terms.push_back(g.scale(rl, static_cast<T>(lambda)));
    }
  }
  if (terms.empty()) {
    optim.zero_grad();
    return out;
  }
  Var<T> total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = g.add(total, terms[i]);
  out.total = total.item();
  if (!std::isfinite(out.total)) {
    throw NumericError("finetune_step: non-finite loss");
  }
  g.backward(total);
  optim.step();
  return out;
}

// ------------------------------------------------------------ loops

namespace detail {

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

template <typename X>
std::vector<X> gather(const std::vector<X>& items, const std::vector<std::size_t>& idx) {
  std::vector<X> out;
  out.reserve(idx.size());
  for (const std::size_t i : idx) out.push_back(items[i]);
  return out;
}

inline bool out_of_time(const TrainConfig& cfg, const TrainLog& log) {
  return cfg.max_seconds > 0.0 && log.elapsed() > cfg.max_seconds;
}

}  // namespace detail

// Called after every epoch with (epoch, mean loss); return false to stop.
using EpochHook = std::function<bool(std::size_t, double)>;

template <typename T>
std::size_t train_teacher(TeacherModel<T>& model, const ParallelCorpus& corpus, const TrainConfig& cfg, TrainLog& log,
                          const EpochHook& hook = {}) {
  cfg.validate();
  if (corpus.empty()) throw DataError("train_teacher: empty corpus");
  AdamWarmup<T> optim(model.params().vars(), cfg.optim);
  Rng rng(cfg.seed);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& idx : detail::epoch_batches(corpus.size(), cfg.batch_size, rng)) {
      const auto batch = detail::gather(corpus, idx);
      const double loss = ar_train_step(model, std::span<const SentencePair>(batch), optim);
      log.record(++step, "teacher", {{"loss", loss}});
      sum += loss;
      ++count;
      if (detail::out_of_time(cfg, log)) return step;
    }
    const double mean = sum / static_cast<double>(count);
    log.record(step, "teacher_epoch", {{"epoch", epoch + 1}, {"loss", mean}});
    if (hook && !hook(epoch + 1, mean)) break;
    if (mean < cfg.target_loss) break;
  }
  return step;
}

template <typename T>
std::size_t train_nat(NatModel<T>& model, const ParallelCorpus& corpus, const std::vector<FertilitySeq>& ferts,
                      const TrainConfig& cfg, TrainLog& log, const EpochHook& hook = {}) {
  cfg.validate();
  if (corpus.empty()) throw DataError("train_nat: empty corpus");
  AdamWarmup<T> optim(model.params().vars(), cfg.optim);
  Rng rng(cfg.seed);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& idx : detail::epoch_batches(corpus.size(), cfg.batch_size, rng)) {
      const auto batch = detail::gather(corpus, idx);
      const auto fb = detail::gather(ferts, idx);
      const NatStepLoss l = nat_ml_step(model, std::span<const SentencePair>(batch), std::span<const FertilitySeq>(fb), optim);
      log.record(++step, "nat", {{"translation", l.translation}, {"fertility", l.fertility}, {"loss", l.total}});
      sum += l.total;
      ++count;
      if (detail::out_of_time(cfg, log)) return step;
    }
    const double mean = sum / static_cast<double>(count);
    log.record(step, "nat_epoch", {{"epoch", epoch + 1}, {"loss", mean}});
    if (hook && !hook(epoch + 1, mean)) break;
    if (mean < cfg.target_loss) break;
  }
  return step;
}

template <typename T, typename U>
std::size_t finetune(NatModel<T>& model, const TeacherModel<U>& teacher, const ParallelCorpus& corpus,
                     const std::vector<FertilitySeq>& ferts, const TrainConfig& cfg, TrainLog& log,
                     const EpochHook& hook = {}) {
  cfg.validate();
  if (corpus.empty()) throw DataError("finetune: empty corpus");
  AdamWarmup<T> optim(model.params().vars(), cfg.optim);
  Rng rng(cfg.seed);
  Rng sampler = rng.split();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& idx : detail::epoch_batches(corpus.size(), cfg.batch_size, rng)) {
      const auto batch = detail::gather(corpus, idx);
      const auto fb = detail::gather(ferts, idx);
      FinetuneLoss l;
      try {
        l = finetune_step(model, teacher, std::span<const SentencePair>(batch), std::span<const FertilitySeq>(fb), cfg,
                          optim, sampler);
      } catch (const NumericError& e) {
        log.record(step, "finetune_diverged", {{"error", e.what()}});
        return step;
      }
      log.record(++step, "finetune",
                 {{"rl", l.rl}, {"bp", l.bp}, {"kd", l.kd}, {"loss", l.total}, {"reward", l.mean_reward},
                  {"baseline", l.mean_baseline}});
      sum += l.total;
      ++count;
      if (detail::out_of_time(cfg, log)) return step;
    }
    const double mean = sum / static_cast<double>(count);
    log.record(step, "finetune_epoch", {{"epoch", epoch + 1}, {"loss", mean}});
    if (hook && !hook(epoch + 1, mean)) break;
  }
  return step;
}

}  // namespace natf

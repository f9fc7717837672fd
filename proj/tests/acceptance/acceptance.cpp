// Acceptance checks. Usage: natf_acceptance <1..9|all> [--tsv PATH]
// Prints one "criterion N PASS|FAIL: ..." line per criterion run; exits 1 if any failed.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "fd_oracle.hpp"
#include "gradient_cases.hpp"
#include "model_gradient_cases.hpp"
#include "natf/natf.hpp"
#include "oracles.hpp"

using namespace natf;

namespace {

std::string g_tsv_path = "latency_sweep.tsv";

struct Verdict {
  bool pass = false;
  std::string detail;
};

template <typename... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

void note(const std::string& s) { std::cout << "  " << s << std::endl; }

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

ModelConfig desk_config(std::size_t src_vocab, std::size_t tgt_vocab) {
  ModelConfig cfg;
  cfg.d_model = 64;
  cfg.d_hidden = 128;
  cfg.n_layer = 2;
  cfg.n_head = 2;
  cfg.src_vocab = src_vocab;
  cfg.tgt_vocab = tgt_vocab;
  cfg.max_length = 32;
  return cfg;
}

TrainConfig base_train(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.optim.scale = 0.1;
  c.optim.warmup_steps = 200;
  return c;
}

// ---------------------------------------------------------------- 1

Verdict gradients() {
  Stopwatch sw;
  std::vector<testing::GradCase> cases = testing::primitive_gradient_cases();
  for (auto& c : testing::block_gradient_cases()) cases.push_back(std::move(c));
  for (auto& c : testing::model_gradient_cases()) cases.push_back(std::move(c));
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : cases) {
    double case_worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      case_worst = std::max(case_worst, c.run(seed).max_relative_error);
    }
    note(fmt("%-24s max rel err %.3e", c.name.c_str(), case_worst));
    if (case_worst > worst) {
      worst = case_worst;
      worst_name = c.name;
    }
  }
  const double secs = sw.seconds();
  return {worst < 1e-4 && secs < 60.0,
          fmt("%zu ops x 20 seeds, worst %.3e (%s), %.1f s", cases.size(), worst, worst_name.c_str(), secs)};
}

// ---------------------------------------------------------------- 2

double worst_row_sum_error(const std::vector<double>& probs, const AttentionLayout& layout, std::size_t heads) {
  double worst = 0.0;
  std::size_t base = 0;
  for (const auto& blk : layout) {
    const std::size_t tq = blk.mask.queries(), tk = blk.mask.keys();
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < tq; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < tk; ++j) s += probs[base + i * tk + j];
        worst = std::max(worst, std::abs(s - 1.0));
      }
      base += tq * tk;
    }
  }
  return worst;
}

Verdict invariants() {
  Rng rng(11);
  bool ok = true;
  std::vector<std::string> parts;

  // attention rows
  double attn_worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    SegmentLayout segs, keys;
    for (int s = 0; s < 3; ++s) {
      segs.push(2 + rng.below(6));
      keys.push(1 + rng.below(7));
    }
    std::vector<AttentionLayout> layouts{self_attention_layout(segs, MaskKind::kFull),
                                         self_attention_layout(segs, MaskKind::kCausal),
                                         self_attention_layout(segs, MaskKind::kSelfMasked),
                                         cross_attention_layout(segs, keys)};
    for (const auto& layout : layouts) {
      const bool cross = &layout == &layouts.back();
      const std::size_t nq = segs.total(), nk = cross ? keys.total() : segs.total();
      Graph<double> g(GradMode::kInference);
      auto q = testing::random_input(rng, {nq, 8}, -3.0, 3.0);
      auto k = testing::random_input(rng, {nk, 8}, -3.0, 3.0);
      auto v = testing::random_input(rng, {nk, 8});
      std::vector<double> probs;
      g.attention(q, k, v, layout, 2, 0.5, &probs);
      attn_worst = std::max(attn_worst, worst_row_sum_error(probs, layout, 2));
    }
  }
  {
    ModelConfig cfg = desk_config(20, 20);
    NatModel<float> nat(cfg, 4);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<TokenId> ids(2 + rng.below(8));
      for (auto& id : ids) id = static_cast<TokenId>(kNumReserved + rng.below(16));
      const TokenSeq src(ids);
      FertilitySeq f(ids.size());
      for (auto& x : f) x = rng.below(3);
      f[0] += 1;
      Graph<float> g(GradMode::kInference);
      const PackedBatch s = single(src);
      std::vector<float> probs;
      nat.decode(g, nat.encode(g, s), s.layout, single(copy_fertility(src, f)), &probs);
      const std::size_t t = fertility_total(f);
      for (std::size_t r = 0; r < probs.size() / t; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < t; ++c) sum += probs[r * t + c];
        attn_worst = std::max(attn_worst, std::abs(sum - 1.0));
      }
    }
  }
  ok = ok && attn_worst <= 1e-6;
  parts.push_back(fmt("attention rows |sum-1| <= %.1e", attn_worst));

  // fertility copy length
  std::size_t copy_bad = 0;
  {
    ModelConfig cfg = desk_config(20, 20);
    NatModel<float> nat(cfg, 5);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<TokenId> ids(1 + rng.below(10));
      for (auto& id : ids) id = static_cast<TokenId>(kNumReserved + rng.below(16));
      FertilitySeq f(ids.size());
      for (auto& x : f) x = rng.below(4);
      f[rng.below(f.size())] += 1;
      const TokenSeq src(ids);
      const TokenSeq copied = copy_fertility(src, f);
      if (copied.size() != fertility_total(f)) ++copy_bad;
      if (trial < 40 && translate_given_fertility(nat, src, f).size() != fertility_total(f)) {
        ++copy_bad;
      }
    }
  }
  ok = ok && copy_bad == 0;
  parts.push_back(fmt("copy length mismatches %zu", copy_bad));

  // aligner fertility sums
  std::size_t fert_bad = 0, fert_pairs = 0;
  {
    const PlantedCorpus planted = gen_synth_planted(PlantedSpec{});
    MultimodalSpec ms;
    ms.size = 1000;
    const MultimodalCorpus mm = gen_synth_multimodal(ms);
    for (const TextCorpus* tc : {&planted.corpus, &mm.corpus}) {
      const Vocab sv = Vocab::build(tc->source), tv = Vocab::build(tc->target);
      const ParallelCorpus pc = encode_corpus(*tc, sv, tv);
      const FertilityTargets ft = aligner_fertilities(pc);
      for (std::size_t i = 0; i < pc.size(); ++i) {
        ++fert_pairs;
        if (fertility_total(ft.fertilities[i]) != pc[i].target.size()) ++fert_bad;
      }
    }
  }
  ok = ok && fert_bad == 0;
  parts.push_back(fmt("fertility sums wrong %zu/%zu", fert_bad, fert_pairs));

  // loss decomposition
  std::size_t decomp_bad = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto batch = testing::tiny_batch();
    const auto ferts = testing::tiny_fertilities();
    NatOptions opts;
    opts.fertility_classes = 4;
    NatModel<float> mf(testing::tiny_config(), seed, opts);
    NatModel<double> md(testing::tiny_config(), seed, opts);
    Graph<float> gf;
    const auto lf = nat_ml_loss<float>(gf, mf, batch, ferts);
    Graph<double> gd;
    const auto ld = nat_ml_loss<double>(gd, md, batch, ferts);
    if (lf.total.item() != lf.translation.item() + lf.fertility.item()) ++decomp_bad;
    if (ld.total.item() != ld.translation.item() + ld.fertility.item()) ++decomp_bad;
  }
  ok = ok && decomp_bad == 0;
  parts.push_back(fmt("decomposition inexact %zu/20", decomp_bad));

  // pass counts
  std::size_t pass_bad = 0, ar_finished = 0;
  {
    ModelConfig cfg = desk_config(20, 20);
    cfg.max_length = 64;
    NatModel<float> nat(cfg, 6);
    TeacherModel<float> teacher(cfg, 7);
    for (std::size_t len = 1; len <= 30; ++len) {
      std::vector<TokenId> ids(len);
      for (auto& id : ids) id = static_cast<TokenId>(kNumReserved + rng.below(16));
      const TokenSeq src(ids);
      const DecodeResult r = decode_argmax(nat, src);
      if (r.nat_passes != 1) ++pass_bad;

      SearchLimits exact = SearchLimits::up_to(len + 1);
      exact.exact_length = len;
      teacher.reset_pass_counter();
      const Hypothesis h = greedy_decode_hypothesis(teacher, src, exact);
      if (!h.finished || teacher.decoder_passes() != h.tokens.size() + 1) ++pass_bad;

      teacher.reset_pass_counter();
      const Hypothesis free = greedy_decode_hypothesis(teacher, src, SearchLimits::up_to(default_max_length(len)));
      if (free.finished) {
        ++ar_finished;
        if (teacher.decoder_passes() != free.tokens.size() + 1) ++pass_bad;
      } else if (teacher.decoder_passes() != free.tokens.size()) {
        ++pass_bad;
      }
    }
  }
  ok = ok && pass_bad == 0;
  parts.push_back(fmt("pass-count violations %zu (%zu free greedy runs ended in eos)", pass_bad, ar_finished));

  std::string detail;
  for (const auto& p : parts) detail += (detail.empty() ? "" : "; ") + p;
  return {ok, detail};
}

// ---------------------------------------------------------------- 3

Verdict brute_force() {
  Stopwatch sw;
  ModelConfig cfg = testing::tiny_config();
  cfg.d_model = 8;
  cfg.src_vocab = 10;
  cfg.tgt_vocab = 10;
  NatOptions opts;
  opts.fertility_classes = 3;

  double npd_gap = 0.0;
  std::size_t npd_mismatch = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    NatModel<float> model(cfg, seed, opts);
    TeacherModel<float> teacher(cfg, seed + 50);
    const TokenSeq src{static_cast<TokenId>(4 + seed % 5), static_cast<TokenId>(5 + seed % 4)};
    auto space = testing::enumerate_fertilities(2, 3);
    const FertilityDist dist = predict_fertility(model, src);
    for (auto& f : space) apply_length_floor(f, dist);
    const DecodeResult r = decode_over_fertilities(model, teacher, src, space);
    const auto best = testing::brute_force_best(model, teacher, src, space);
    npd_gap = std::max(npd_gap, std::abs(*r.teacher_score - best.score));
    if (r.output != best.output) ++npd_mismatch;
  }

  double rf_diff = 0.0, rf_scale = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    NatModel<double> model(cfg, seed, opts);
    TeacherModel<double> teacher(cfg, seed + 50);
    const auto cmp = testing::reinforce_vs_exact(model, teacher, TokenSeq{4, static_cast<TokenId>(5 + seed % 4)});
    rf_diff = std::max(rf_diff, cmp.max_abs_diff);
    rf_scale = std::max(rf_scale, cmp.max_abs_exact);
  }

  double rkl_gap = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    NatModel<float> student(cfg, seed);
    TeacherModel<float> teacher(cfg, seed + 50);
    const TokenSeq src{4, static_cast<TokenId>(4 + seed % 6), 7};
    const TokenSeq y = translate_given_fertility(student, src, {1, 1 + seed % 3, 1});
    const Tensor<double> table = teacher_table(teacher, src, y);
    Tensor<double> onehot(Shape{y.size(), cfg.tgt_vocab});
    for (std::size_t t = 0; t < y.size(); ++t) onehot(t, static_cast<std::size_t>(y[t])) = 1.0;
    rkl_gap = std::max(rkl_gap, std::abs(rkl_value(onehot, table) - score_parallel(teacher, src, y)));
  }

  const double secs = sw.seconds();
  note(fmt("npd vs enumeration: max score gap %.2e, output mismatches %zu", npd_gap, npd_mismatch));
  note(fmt("reinforce expectation vs exact: max abs diff %.2e (gradient scale %.2e)", rf_diff, rf_scale));
  note(fmt("rkl one-hot vs teacher score: max gap %.2e", rkl_gap));
  const bool ok = npd_gap <= 1e-5 && npd_mismatch == 0 && rf_diff <= 1e-6 && rf_scale > 0.0 && rkl_gap <= 1e-5 &&
                  secs < 120.0;
  return {ok, fmt("npd gap %.1e, reinforce diff %.1e, rkl gap %.1e, %.1f s", npd_gap, rf_diff, rkl_gap, secs)};
}

// ---------------------------------------------------------------- 4

double token_accuracy(const std::vector<TokenSeq>& hyps, const ParallelCorpus& ref) {
  std::size_t ok = 0, total = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto& y = ref[i].target;
    total += std::max(y.size(), hyps[i].size());
    for (std::size_t j = 0; j < std::min(y.size(), hyps[i].size()); ++j) ok += y[j] == hyps[i][j];
  }
  return static_cast<double>(ok) / static_cast<double>(total);
}

Verdict copy_task() {
  CopySpec spec;
  const TextCorpus train = gen_synth_copy(spec);
  spec.size = 500;
  spec.seed = 2;
  const TextCorpus dev = gen_synth_copy(spec);
  const Vocab v = Vocab::build(train.source);
  const ParallelCorpus pc = encode_corpus(train, v, v);
  const ParallelCorpus dc = encode_corpus(dev, v, v);
  const ModelConfig cfg = desk_config(v.size(), v.size());

  TrainLog tlog;
  TeacherModel<float> teacher(cfg, 1);
  TrainConfig tc = base_train(30);
  double teacher_acc = 0.0;
  train_teacher(teacher, pc, tc, tlog, [&](std::size_t e, double loss) {
    std::vector<TokenSeq> hyps;
    for (const auto& p : dc) hyps.push_back(greedy_decode(teacher, p.source, default_max_length(p.source.size())));
    teacher_acc = token_accuracy(hyps, dc);
    note(fmt("teacher epoch %zu loss %.4f dev acc %.4f (%.1f s)", e, loss, teacher_acc, tlog.elapsed()));
    return teacher_acc < 0.999;
  });
  const double teacher_secs = tlog.elapsed();

  std::vector<FertilitySeq> ones;
  for (const auto& p : pc) ones.emplace_back(p.source.size(), 1);
  TrainLog nlog;
  NatModel<float> nat(cfg, 2);
  double nat_acc = 0.0;
  train_nat(nat, pc, ones, base_train(30), nlog, [&](std::size_t e, double loss) {
    std::vector<TokenSeq> hyps;
    for (const auto& p : dc) hyps.push_back(translate_given_fertility(nat, p.source, FertilitySeq(p.source.size(), 1)));
    nat_acc = token_accuracy(hyps, dc);
    note(fmt("nat epoch %zu loss %.4f dev acc %.4f (%.1f s)", e, loss, nat_acc, nlog.elapsed()));
    return nat_acc < 0.999;
  });
  const double nat_secs = nlog.elapsed();
  return {teacher_acc >= 0.99 && nat_acc >= 0.99 && teacher_secs < 300.0 && nat_secs < 300.0,
          fmt("teacher greedy acc %.4f in %.0f s; nat all-ones acc %.4f in %.0f s", teacher_acc, teacher_secs,
              nat_acc, nat_secs)};
}

// ------------------------------------------------------- multimodal setup

struct Multimodal {
  MultimodalCorpus train;
  MultimodalCorpus dev;
  Vocab sv, tv;
  ParallelCorpus pc;
  std::vector<TokenSeq> dev_src;
  std::vector<std::vector<TokenSeq>> dev_refs;
  ModelConfig cfg;
  std::unique_ptr<TeacherModel<float>> teacher;
  ParallelCorpus distilled;
  double distilled_purity = 0.0;
};

std::unique_ptr<Multimodal> multimodal_setup() {
  auto m = std::make_unique<Multimodal>();
  MultimodalSpec spec;
  spec.size = 2000;
  spec.seed = 1;
  m->train = gen_synth_multimodal(spec);
  spec.size = 600;
  spec.seed = 2;
  m->dev = gen_synth_multimodal(spec);
  m->sv = Vocab::build(m->train.corpus.source);
  m->tv = Vocab::build(m->train.corpus.target);
  m->pc = encode_corpus(m->train.corpus, m->sv, m->tv);
  for (const auto& s : m->dev.corpus.source) {
    m->dev_src.push_back(m->sv.encode(s));
    std::vector<TokenSeq> refs;
    for (const auto& r : m->train.oracle.references(s)) refs.push_back(m->tv.encode(r));
    m->dev_refs.push_back(std::move(refs));
  }
  m->cfg = desk_config(m->sv.size(), m->tv.size());
  m->teacher = std::make_unique<TeacherModel<float>>(m->cfg, 1);
  TrainLog log;
  train_teacher(*m->teacher, m->pc, base_train(15), log);
  m->distilled = build_distill_corpus(m->pc, *m->teacher).pairs;
  std::size_t pure = 0;
  for (std::size_t i = 0; i < m->pc.size(); ++i) {
    pure += m->train.oracle.classify(m->train.corpus.source[i], split_words(m->tv.decode(m->distilled[i].target))) ==
            Purity::kPure;
  }
  m->distilled_purity = static_cast<double>(pure) / static_cast<double>(m->pc.size());
  note(fmt("teacher trained in %.1f s; distilled corpus purity %.3f", log.elapsed(), m->distilled_purity));
  return m;
}

struct NatRun {
  std::unique_ptr<NatModel<float>> model;
  FertilityCorpus data;
};

NatRun train_multimodal_nat(const Multimodal& m, const ParallelCorpus& data, const std::string& label) {
  NatRun run;
  run.data = checked_fertility_corpus(data, aligner_fertilities(data).fertilities);
  run.model = std::make_unique<NatModel<float>>(m.cfg, 3);
  init_encoder_from_teacher(*run.model, export_encoder(*m.teacher));
  TrainLog log;
  train_nat(*run.model, run.data.pairs, run.data.fertilities, base_train(20), log);
  note(fmt("%s nat trained in %.1f s", label.c_str(), log.elapsed()));
  return run;
}

struct DevEval {
  std::vector<TokenSeq> outputs;
  double contamination = 0.0;
  double bleu = 0.0;
  double teacher_score = 0.0;  // mean over sentences
  std::vector<double> per_sentence;
};

DevEval evaluate(const Multimodal& m, const std::vector<TokenSeq>& hyps) {
  DevEval ev;
  ev.outputs = hyps;
  std::vector<Sentence> outs;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    outs.push_back(split_words(m.tv.decode(hyps[i])));
    ev.per_sentence.push_back(score_parallel(*m.teacher, m.dev_src[i], hyps[i]));
    ev.teacher_score += ev.per_sentence.back();
  }
  ev.teacher_score /= static_cast<double>(hyps.size());
  ev.contamination = m.train.oracle.contamination_rate(m.dev.corpus.source, outs);
  ev.bleu = bleu_multi(std::span<const TokenSeq>(hyps), std::span<const std::vector<TokenSeq>>(m.dev_refs));
  return ev;
}

DevEval evaluate_decode(const Multimodal& m, const NatModel<float>& nat, const DecodeOptions& opts) {
  std::vector<TokenSeq> hyps;
  for (const auto& src : m.dev_src) hyps.push_back(nat_decode(nat, src, opts, m.teacher.get()).output);
  return evaluate(m, hyps);
}

// ---------------------------------------------------------------- 5

Verdict multimodality() {
  Stopwatch sw;
  const auto m = multimodal_setup();
  const NatRun raw = train_multimodal_nat(*m, m->pc, "raw");
  const NatRun dist = train_multimodal_nat(*m, m->distilled, "distilled");
  const auto argmax = DecodeOptions::of(Strategy::kArgmax);
  const DevEval er = evaluate_decode(*m, *raw.model, argmax);
  const DevEval ed = evaluate_decode(*m, *dist.model, argmax);
  note(fmt("raw targets:       contamination %.3f  bleu %.2f", er.contamination, er.bleu));
  note(fmt("distilled targets: contamination %.3f  bleu %.2f", ed.contamination, ed.bleu));
  const double reduction = er.contamination > 0.0 ? 1.0 - ed.contamination / er.contamination : 0.0;
  const double secs = sw.seconds();
  return {er.contamination > 0.10 && reduction >= 0.5 && ed.bleu > er.bleu && secs < 900.0,
          fmt("contamination %.3f -> %.3f (%.0f%% relative reduction), bleu %.2f -> %.2f, %.0f s", er.contamination,
              ed.contamination, 100.0 * reduction, er.bleu, ed.bleu, secs)};
}

// ---------------------------------------------------------------- 6

Verdict decoding_order() {
  const auto m = multimodal_setup();
  const NatRun dist = train_multimodal_nat(*m, m->distilled, "distilled");
  const DevEval a = evaluate_decode(*m, *dist.model, DecodeOptions::of(Strategy::kArgmax));
  const DevEval n2 = evaluate_decode(*m, *dist.model, DecodeOptions::of(Strategy::kNpd, 2, 17));
  const DevEval n10 = evaluate_decode(*m, *dist.model, DecodeOptions::of(Strategy::kNpd, 10, 17));
  std::size_t violations = 0, changed = 0;
  for (std::size_t i = 0; i < a.per_sentence.size(); ++i) {
    if (!(n10.per_sentence[i] >= n2.per_sentence[i] && n2.per_sentence[i] >= a.per_sentence[i])) ++violations;
    changed += n10.outputs[i] != a.outputs[i];
  }
  note(fmt("argmax: bleu %.2f  mean teacher score %.4f", a.bleu, a.teacher_score));
  note(fmt("npd s=2: bleu %.2f  mean teacher score %.4f", n2.bleu, n2.teacher_score));
  note(fmt("npd s=10: bleu %.2f  mean teacher score %.4f", n10.bleu, n10.teacher_score));
  return {violations == 0 && n10.bleu >= a.bleu,
          fmt("ordering violations %zu/%zu, npd10 changed %zu outputs, bleu argmax %.2f npd10 %.2f", violations,
              a.per_sentence.size(), changed, a.bleu, n10.bleu)};
}

// ---------------------------------------------------------------- 7

Verdict latency() {
  ModelConfig cfg = desk_config(60, 60);
  cfg.max_length = 64;
  const TeacherModel<float> teacher(cfg, 1);
  const NatModel<float> nat(cfg, 2);
  const std::vector<std::size_t> lengths{5, 10, 15, 20, 25, 30, 40};
  const BenchReport report = length_sweep(teacher, nat, lengths, 9, 3);
  {
    std::ofstream out(g_tsv_path);
    report.write_tsv(out);
  }
  double ar20 = 0.0, nat20 = 0.0;
  for (const auto& r : report.records) {
    note(fmt("%-10s length %2zu  %.3f ms  passes %zu", r.strategy.c_str(), r.length, 1e3 * r.seconds,
             r.decoder_passes));
    if (r.length == 20) (r.strategy == "ar-greedy" ? ar20 : nat20) = r.seconds;
  }
  const double ar_slope = report.summary("ar-greedy").slope, nat_slope = report.summary("nat-argmax").slope;
  note("tsv written to " + g_tsv_path);
  const double ratio = nat20 / ar20, slope_ratio = nat_slope / ar_slope;
  return {ratio <= 1.0 / 3.0 && slope_ratio < 0.2,
          fmt("nat/ar at length 20 = %.3f (need <= 0.333); slope ratio %.3f (need < 0.2); single core", ratio,
              slope_ratio)};
}

// ---------------------------------------------------------------- 8

Verdict finetuning() {
  const auto m = multimodal_setup();
  const NatRun dist = train_multimodal_nat(*m, m->distilled, "distilled");
  const auto argmax = DecodeOptions::of(Strategy::kArgmax);
  const DevEval before = evaluate_decode(*m, *dist.model, argmax);
  note(fmt("before fine-tuning: bleu %.2f  teacher score %.4f", before.bleu, before.teacher_score));

  struct Variant {
    std::string name;
    double lambda;
    bool rl, bp, kd;
  };
  const std::vector<Variant> variants{{"full", 0.25, true, true, true},
                                      {"rl-only", 1.0, true, false, false},
                                      {"bp-only", 1.0, false, true, false}};
  DevEval full_after;
  for (const auto& v : variants) {
    NatModel<float> model(m->cfg, 3);
    model.params().assign(dist.model->params().snapshot());
    TrainConfig cfg = base_train(3);
    cfg.optim.scale = 0.005;
    cfg.optim.warmup_steps = 50;
    cfg.lambda = v.lambda;
    cfg.use_rl = v.rl;
    cfg.use_bp = v.bp;
    cfg.use_kd = v.kd;
    TrainLog log;
    try {
      finetune(model, *m->teacher, dist.data.pairs, dist.data.fertilities, cfg, log, [&](std::size_t e, double loss) {
        const DevEval ev = evaluate_decode(*m, model, argmax);
        note(fmt("%-8s epoch %zu loss %+.4f  bleu %.2f  teacher score %.4f", v.name.c_str(), e, loss, ev.bleu,
                 ev.teacher_score));
        return true;
      });
    } catch (const NumericError& e) {
      note(v.name + " diverged: " + e.what());
      continue;
    }
    const DevEval after = evaluate_decode(*m, model, argmax);
    if (v.name == "full") full_after = after;
  }
  const double gain = full_after.teacher_score - before.teacher_score;
  return {full_after.bleu >= before.bleu && gain > 0.0,
          fmt("full fine-tune bleu %.2f -> %.2f, teacher score %+.4f", before.bleu, full_after.bleu, gain)};
}

// ---------------------------------------------------------------- 9

Verdict aligner() {
  const PlantedCorpus planted = gen_synth_planted(PlantedSpec{});
  const Vocab sv = Vocab::build(planted.corpus.source), tv = Vocab::build(planted.corpus.target);
  const ParallelCorpus pc = encode_corpus(planted.corpus, sv, tv);
  EmTrace trace;
  const AlignmentModel model = em_train(pc, 5, 5, &trace);
  std::size_t hit = 0, links = 0;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Alignment a = viterbi_align(pc[i], model);
    for (std::size_t j = 0; j < a.size(); ++j) {
      if (planted.gold[i][j] == 0) continue;
      ++links;
      hit += a[j] == planted.gold[i][j];
    }
  }
  std::vector<double> ll = trace.model1_log_likelihood;
  ll.insert(ll.end(), trace.model2_log_likelihood.begin(), trace.model2_log_likelihood.end());
  ll.push_back(corpus_log_likelihood(model, pc));
  double worst_drop = 0.0;
  for (std::size_t k = 0; k + 1 < ll.size(); ++k) worst_drop = std::max(worst_drop, ll[k] - ll[k + 1]);
  for (std::size_t k = 0; k < ll.size(); ++k) note(fmt("iteration %zu log-likelihood %.6f", k, ll[k]));
  const double recovery = static_cast<double>(hit) / static_cast<double>(links);
  return {recovery >= 0.95 && worst_drop <= 1e-9,
          fmt("planted link recovery %.4f (%zu/%zu), largest log-likelihood drop %.2e", recovery, hit, links,
              worst_drop)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<std::string, std::function<Verdict()>> criteria{
      {"1", gradients},  {"2", invariants},     {"3", brute_force}, {"4", copy_task}, {"5", multimodality},
      {"6", decoding_order}, {"7", latency}, {"8", finetuning},  {"9", aligner}};
  std::vector<std::string> which;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--tsv" && i + 1 < argc) {
      g_tsv_path = argv[++i];
    } else if (a == "all") {
      for (const auto& [k, _] : criteria) which.push_back(k);
    } else if (criteria.count(a) != 0) {
      which.push_back(a);
    } else {
      std::cerr << "usage: natf_acceptance <1..9|all>... [--tsv PATH]\n";
      return 2;
    }
  }
  if (which.empty()) {
    std::cerr << "usage: natf_acceptance <1..9|all>... [--tsv PATH]\n";
    return 2;
  }
  bool all_pass = true;
  for (const auto& k : which) {
    Verdict v;
    try {
      v = criteria.at(k)();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "criterion " << k << (v.pass ? " PASS: " : " FAIL: ") << v.detail << std::endl;
    all_pass = all_pass && v.pass;
  }
  return all_pass ? 0 : 1;
}

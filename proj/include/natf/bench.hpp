#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "natf/nat.hpp"
#include "natf/teacher.hpp"

namespace natf {

struct BenchRecord {
  std::string strategy;
  std::size_t sentence = 0;
  std::size_t length = 0;  // output length
  double seconds = 0.0;    // median over repeats
  std::size_t decoder_passes = 0;
  std::size_t teacher_passes = 0;
};

struct StrategySummary {
  std::string strategy;
  std::size_t sentences = 0;
  double mean_seconds = 0.0;
  double median_seconds = 0.0;
  double speedup = 0.0;  // baseline mean / this mean
  double slope = 0.0;    // least-squares seconds per output token
  double mean_passes = 0.0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Ordinary least-squares slope of y on x; 0 when x is constant.
inline double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx == 0.0 ? 0.0 : sxy / sxx;
}

struct BenchReport {
  std::vector<BenchRecord> records;
  std::string baseline;

  std::vector<std::string> strategies() const {
    std::vector<std::string> out;
    for (const auto& r : records) {
      if (std::find(out.begin(), out.end(), r.strategy) == out.end()) out.push_back(r.strategy);
    }
    return out;
  }

  std::vector<BenchRecord> of(const std::string& strategy) const {
    std::vector<BenchRecord> out;
    for (const auto& r : records) {
      if (r.strategy == strategy) out.push_back(r);
    }
    return out;
  }

  StrategySummary summary(const std::string& strategy) const {
    StrategySummary s;
    s.strategy = strategy;
    std::vector<double> secs, lens, passes;
    for (const auto& r : of(strategy)) {
      secs.push_back(r.seconds);
      lens.push_back(static_cast<double>(r.length));
      passes.push_back(static_cast<double>(r.decoder_passes + r.teacher_passes));
    }
    s.sentences = secs.size();
    s.mean_seconds = mean(secs);
    s.median_seconds = median(secs);
    s.slope = fit_slope(lens, secs);
    s.mean_passes = mean(passes);
    const std::string base = baseline.empty() ? strategies().front() : baseline;
    std::vector<double> base_secs;
    for (const auto& r : of(base)) base_secs.push_back(r.seconds);
    s.speedup = s.mean_seconds > 0.0 ? mean(base_secs) / s.mean_seconds : 0.0;
    return s;
  }

  // Plot-ready: one row per (strategy, sentence).
  void write_tsv(std::ostream& out) const {
    out << "strategy\tsentence\tlength\tseconds\tdecoder_passes\tteacher_passes\n";
    for (const auto& r : records) {
      out << r.strategy << '\t' << r.sentence << '\t' << r.length << '\t' << r.seconds << '\t' << r.decoder_passes
          << '\t' << r.teacher_passes << '\n';
    }
  }

  void write_summary_tsv(std::ostream& out) const {
    out << "strategy\tsentences\tmean_seconds\tmedian_seconds\tspeedup\tslope\tmean_passes\n";
    for (const auto& name : strategies()) {
      const auto s = summary(name);
      out << s.strategy << '\t' << s.sentences << '\t' << s.mean_seconds << '\t' << s.median_seconds << '\t'
          << s.speedup << '\t' << s.slope << '\t' << s.mean_passes << '\n';
    }
  }

  void write_jsonl(std::ostream& out) const {
    for (const auto& r : records) {
      out << nlohmann::json{{"strategy", r.strategy},         {"sentence", r.sentence},
                            {"length", r.length},             {"seconds", r.seconds},
                            {"decoder_passes", r.decoder_passes}, {"teacher_passes", r.teacher_passes}}
                 .dump()
          << '\n';
    }
  }
};

struct TimedRun {
  std::size_t length = 0;
  std::size_t decoder_passes = 0;
  std::size_t teacher_passes = 0;
};

// Runs fn once untimed, then `repeats` timed runs; returns the median time.
inline double time_median(const std::function<TimedRun()>& fn, std::size_t repeats, TimedRun* last) {
  *last = fn();
  std::vector<double> secs;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    *last = fn();
    secs.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return median(secs);
}

// Strategy names: ar-greedy, ar-beam<k>, nat-argmax, nat-average, nat-npd<s>.
template <typename T>
std::function<TimedRun(const TokenSeq&)> make_strategy(const std::string& name, const TeacherModel<T>& teacher,
                                                      const NatModel<T>& nat, std::uint64_t seed = 0) {
  auto parse_k = [&](const std::string& prefix) -> std::size_t {
    const std::string rest = name.substr(prefix.size());
    std::size_t k = 0;
    try {
      k = rest.empty() ? 0 : std::stoul(rest);
    } catch (const std::exception&) {
    }
    if (k == 0) throw UsageError("bench: bad strategy " + name);
    return k;
  };
  if (name == "ar-greedy") {
    return [&teacher](const TokenSeq& src) {
      teacher.reset_pass_counter();
      const TokenSeq y = greedy_decode(teacher, src, std::min(default_max_length(src.size()), teacher.config().max_length));
      return TimedRun{y.size(), teacher.decoder_passes(), 0};
    };
  }
  if (name.rfind("ar-beam", 0) == 0) {
    const std::size_t k = parse_k("ar-beam");
    return [&teacher, k](const TokenSeq& src) {
      teacher.reset_pass_counter();
      const TokenSeq y =
          beam_decode(teacher, src, k, std::min(default_max_length(src.size()), teacher.config().max_length));
      return TimedRun{y.size(), teacher.decoder_passes(), 0};
    };
  }
  if (name == "nat-argmax" || name == "nat-average" || name.rfind("nat-npd", 0) == 0) {
    DecodeOptions opts = DecodeOptions::of(Strategy::kArgmax);
    if (name == "nat-average") opts.strategy = Strategy::kAverage;
    if (name.rfind("nat-npd", 0) == 0) opts = DecodeOptions::of(Strategy::kNpd, parse_k("nat-npd"), seed);
    return [&teacher, &nat, opts](const TokenSeq& src) {
      const DecodeResult r = nat_decode(nat, src, opts, &teacher);
      return TimedRun{r.output.size(), r.nat_passes, r.teacher_passes};
    };
  }
  throw UsageError("bench: unknown strategy " + name);
}

// Batch-size-one latency of each strategy on each sentence.
template <typename T>
BenchReport bench_latency(const std::vector<TokenSeq>& sources, const TeacherModel<T>& teacher, const NatModel<T>& nat,
                          const std::vector<std::string>& strategies, std::size_t repeats,
                          const std::string& baseline = "", std::uint64_t seed = 0) {
  BenchReport report;
  report.baseline = baseline.empty() && !strategies.empty() ? strategies.front() : baseline;
  for (const auto& name : strategies) {
    const auto run = make_strategy(name, teacher, nat, seed);
    for (std::size_t i = 0; i < sources.size(); ++i) {
      TimedRun last;
      const double secs = time_median([&] { return run(sources[i]); }, repeats, &last);
      report.records.push_back({name, i, last.length, secs, last.decoder_passes, last.teacher_passes});
    }
  }
  return report;
}

// Encoder, fertility head and one decoder pass with the fertilities fixed.
template <typename T>
TokenSeq nat_fixed_fertility(const NatModel<T>& model, const TokenSeq& source, const FertilitySeq& f) {
  Graph<T> g(GradMode::kInference);
  const PackedBatch src = single(source);
  const Var<T> memory = model.encode(g, src);
  (void)model.fertility_log_probs(g, memory);
  return detail::argmax_rows(model.decode(g, memory, src.layout, single(model.decoder_inputs(source, f))).value()).first;
}

// Latency against output length T: AR greedy is forced to emit exactly T
// tokens; the NAT decodes a length-T source with every fertility set to one.
template <typename T>
BenchReport length_sweep(const TeacherModel<T>& teacher, const NatModel<T>& nat, const std::vector<std::size_t>& lengths,
                         std::size_t repeats, std::uint64_t seed = 0) {
  BenchReport report;
  report.baseline = "ar-greedy";
  Rng rng(seed);
  const std::size_t vocab = std::min(teacher.config().src_vocab, nat.config().src_vocab);
  for (const std::size_t len : lengths) {
    std::vector<TokenId> ids(len);
    for (auto& id : ids) id = static_cast<TokenId>(kNumReserved + rng.below(vocab - kNumReserved));
    const TokenSeq src(ids);
    SearchLimits limits = SearchLimits::up_to(len + 1);
    limits.exact_length = len;
    TimedRun last;
    double secs = time_median(
        [&] {
          teacher.reset_pass_counter();
          const Hypothesis h = greedy_decode_hypothesis(teacher, src, limits);
          return TimedRun{h.tokens.size(), teacher.decoder_passes(), 0};
        },
        repeats, &last);
    report.records.push_back({"ar-greedy", len, last.length, secs, last.decoder_passes, 0});
    const FertilitySeq ones(len, 1);
    secs = time_median(
        [&] {
          nat.reset_pass_counter();
          const TokenSeq y = nat_fixed_fertility(nat, src, ones);
          return TimedRun{y.size(), nat.decoder_passes(), 0};
        },
        repeats, &last);
    report.records.push_back({"nat-argmax", len, last.length, secs, last.decoder_passes, 0});
  }
  return report;
}

}  // namespace natf

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "natf/error.hpp"
#include "natf/token.hpp"

namespace natf {

struct BleuStats {
  std::vector<double> matches;  // clipped n-gram matches, n = 1..max_n
  std::vector<double> totals;   // hypothesis n-gram counts
  double hyp_length = 0.0;
  double ref_length = 0.0;

  explicit BleuStats(std::size_t max_n = 4) : matches(max_n, 0.0), totals(max_n, 0.0) {}

  BleuStats& operator+=(const BleuStats& o) {
    for (std::size_t n = 0; n < matches.size(); ++n) {
      matches[n] += o.matches[n];
      totals[n] += o.totals[n];
    }
    hyp_length += o.hyp_length;
    ref_length += o.ref_length;
    return *this;
  }
};

namespace detail {

inline std::map<std::vector<TokenId>, std::size_t> ngram_counts(std::span<const TokenId> s, std::size_t n) {
  std::map<std::vector<TokenId>, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[std::vector<TokenId>(s.begin() + i, s.begin() + i + n)];
  return out;
}

}  // namespace detail

// Clipping uses the maximum count over the references; the reference length
// is the one closest to the hypothesis length (shorter on ties).
inline BleuStats sentence_stats(const TokenSeq& hyp, std::span<const TokenSeq> refs, std::size_t max_n = 4) {
  if (refs.empty()) throw UsageError("bleu: no reference for a hypothesis");
  for (const auto& r : refs) {
    if (r.empty()) throw DataError("bleu: empty reference");
  }
  BleuStats st(max_n);
  const auto h = hyp.tokens();
  st.hyp_length = static_cast<double>(h.size());
  std::size_t best = refs[0].size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t len) { return len > h.size() ? len - h.size() : h.size() - len; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  st.ref_length = static_cast<double>(best);
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto hc = detail::ngram_counts(h, n);
    std::map<std::vector<TokenId>, std::size_t> max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, c] : detail::ngram_counts(r.tokens(), n)) max_ref[g] = std::max(max_ref[g], c);
    }
    for (const auto& [g, c] : hc) {
      const auto it = max_ref.find(g);
      st.matches[n - 1] += static_cast<double>(std::min(c, it == max_ref.end() ? 0 : it->second));
      st.totals[n - 1] += static_cast<double>(c);
    }
  }
  return st;
}

// Geometric mean of the precisions times the brevity penalty, in [0, 100].
// `smooth` adds one to numerator and denominator for n > 1.
inline double bleu_from_stats(const BleuStats& st, bool smooth = false) {
  if (st.hyp_length == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < st.matches.size(); ++n) {
    double m = st.matches[n], t = st.totals[n];
    if (smooth && n > 0) {
      m += 1.0;
      t += 1.0;
    }
    if (m == 0.0 || t == 0.0) return 0.0;
    log_sum += std::log(m / t);
  }
  const double bp = st.hyp_length >= st.ref_length ? 1.0 : std::exp(1.0 - st.ref_length / st.hyp_length);
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(st.matches.size()));
}

inline double bleu_multi(std::span<const TokenSeq> hyps, std::span<const std::vector<TokenSeq>> refs,
                         std::size_t max_n = 4) {
  if (hyps.size() != refs.size()) {
    throw UsageError("bleu: " + std::to_string(hyps.size()) + " hypotheses but " + std::to_string(refs.size()) +
                     " references");
  }
  BleuStats total(max_n);
  for (std::size_t i = 0; i < hyps.size(); ++i) total += sentence_stats(hyps[i], refs[i], max_n);
  return bleu_from_stats(total);
}

// Corpus-level BLEU with one reference per hypothesis, no smoothing.
inline double bleu(std::span<const TokenSeq> hyps, std::span<const TokenSeq> refs, std::size_t max_n = 4) {
  if (hyps.size() != refs.size()) {
    throw UsageError("bleu: " + std::to_string(hyps.size()) + " hypotheses but " + std::to_string(refs.size()) +
                     " references");
  }
  BleuStats total(max_n);
  for (std::size_t i = 0; i < hyps.size(); ++i) total += sentence_stats(hyps[i], std::span(&refs[i], 1), max_n);
  return bleu_from_stats(total);
}

inline double sentence_bleu(const TokenSeq& hyp, const TokenSeq& ref, std::size_t max_n = 4) {
  return bleu_from_stats(sentence_stats(hyp, std::span(&ref, 1), max_n), true);
}

}  // namespace natf

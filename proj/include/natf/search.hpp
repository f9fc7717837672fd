#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "natf/error.hpp"
#include "natf/token.hpp"

namespace natf {

// A left-to-right scoring model. advance() feeds one previous token into each
// state (bos on the first call), updates the states in place and returns one
// row of next-token log-probabilities per state. One call is one decoder pass.
template <typename S>
concept StepScorer = requires(S& scorer, std::vector<typename S::State>& states, std::span<const TokenId> prev) {
  { scorer.start() } -> std::same_as<typename S::State>;
  { scorer.advance(states, prev) } -> std::same_as<std::vector<std::vector<double>>>;
};

struct SearchLimits {
  std::size_t max_length = 0;
  std::size_t min_length = 0;
  // When set, eos is suppressed until exactly this many tokens exist and is
  // then the only permitted token.
  std::optional<std::size_t> exact_length;

  static SearchLimits up_to(std::size_t max_length) { return {max_length, 0, std::nullopt}; }
};

struct Hypothesis {
  std::vector<TokenId> tokens;
  double score = 0.0;  // sum of log-probabilities, eos included when finished
  bool finished = false;
};

namespace detail {

// Tokens never emitted by a decoder, plus the length constraints on eos.
inline bool token_allowed(TokenId y, std::size_t produced, const SearchLimits& limits) {
  if (y == kPad || y == kBos) return false;
  if (limits.exact_length) {
    return produced < *limits.exact_length ? y != kEos : y == kEos;
  }
  return y != kEos || produced >= limits.min_length;
}

}  // namespace detail

// Repeatedly appends the highest-probability token (lowest id on ties) until
// eos or max_length tokens.
template <StepScorer S>
Hypothesis greedy_search(S& scorer, const SearchLimits& limits) {
  Hypothesis hyp;
  std::vector<typename S::State> states{scorer.start()};
  TokenId prev = kBos;
  while (hyp.tokens.size() < limits.max_length) {
    const std::vector<std::vector<double>> rows = scorer.advance(states, std::span<const TokenId>(&prev, 1));
    const std::vector<double>& logp = rows.front();
    TokenId best = -1;
    double best_lp = -std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < logp.size(); ++y) {
      const auto id = static_cast<TokenId>(y);
      if (!detail::token_allowed(id, hyp.tokens.size(), limits)) continue;
      if (best < 0 || logp[y] > best_lp) {
        best = id;
        best_lp = logp[y];
      }
    }
    if (best < 0) {
      throw NumericError("greedy_search: no admissible token");
    }
    hyp.score += best_lp;
    if (best == kEos) {
      hyp.finished = true;
      break;
    }
    hyp.tokens.push_back(best);
    prev = best;
  }
  return hyp;
}

// Length-terminated beam search on raw summed log-probabilities. Candidates
// ending in eos retire to the finished list and shrink the live beam; the
// search stops once `beam` hypotheses have finished or none remain live.
// Hypotheses reaching max_length retire unfinished.
template <StepScorer S>
Hypothesis beam_search(S& scorer, std::size_t beam, const SearchLimits& limits, bool length_normalize = false) {
  if (beam == 0) {
    throw UsageError("beam_search: beam width must be at least 1");
  }
  struct Live {
    typename S::State state;
    Hypothesis hyp;
    TokenId prev;
  };
  std::vector<Live> live;
  live.push_back({scorer.start(), {}, kBos});
  std::vector<Hypothesis> finished;

  while (!live.empty() && finished.size() < beam) {
    std::vector<Live> active;
    for (auto& l : live) {
      if (l.hyp.tokens.size() >= limits.max_length) {
        finished.push_back(std::move(l.hyp));
      } else {
        active.push_back(std::move(l));
      }
    }
    live.clear();
    if (active.empty() || finished.size() >= beam) break;

    std::vector<typename S::State> states;
    std::vector<TokenId> prevs;
    for (auto& a : active) {
      states.push_back(std::move(a.state));
      prevs.push_back(a.prev);
    }
    const std::vector<std::vector<double>> rows = scorer.advance(states, prevs);

    struct Candidate {
      double score;
      std::size_t from;
      TokenId token;
    };
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < active.size(); ++h) {
      for (std::size_t y = 0; y < rows[h].size(); ++y) {
        const auto id = static_cast<TokenId>(y);
        if (!detail::token_allowed(id, active[h].hyp.tokens.size(), limits)) continue;
        cands.push_back({active[h].hyp.score + rows[h][y], h, id});
      }
    }
    const std::size_t width = beam - finished.size();
    const std::size_t keep = std::min(width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.from != b.from) return a.from < b.from;
                        return a.token < b.token;
                      });
    for (std::size_t c = 0; c < keep; ++c) {
      const Candidate& cand = cands[c];
      Hypothesis next = active[cand.from].hyp;
      next.score = cand.score;
      if (cand.token == kEos) {
        next.finished = true;
        finished.push_back(std::move(next));
      } else {
        next.tokens.push_back(cand.token);
        live.push_back({states[cand.from], std::move(next), cand.token});
      }
    }
  }
  if (finished.empty()) {
    return {};
  }
  auto key = [length_normalize](const Hypothesis& h) {
    if (!length_normalize) return h.score;
    return h.score / static_cast<double>(std::max<std::size_t>(1, h.tokens.size() + (h.finished ? 1 : 0)));
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i) {
    if (key(finished[i]) > key(finished[best])) best = i;
  }
  return finished[best];
}

}  // namespace natf

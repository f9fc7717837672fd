#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "natf/error.hpp"
#include "natf/token.hpp"

namespace natf {

// Number of fertility classes predicted by the student; values span 0..L-1.
inline constexpr std::size_t kDefaultFertilityClasses = 50;

// One source index per target position: 0 is NULL, 1..T' are source words.
using Alignment = std::vector<std::size_t>;

// Per-source-word fertilities f_1..f_T'.
using FertilitySeq = std::vector<std::size_t>;

// IBM Model 2: lexical table t(y | x) over co-occurring pairs (x = 0 is the
// NULL word) and a positional table a(i | j, T, T') for each observed length
// pair. Model 1 is the special case of uniform positional tables.
class AlignmentModel {
 public:
  static constexpr double kFloor = 1e-9;

  // t(y | x); source ids are shifted by one so that 0 is NULL.
  double lexical(TokenId x_shifted, TokenId y) const {
    const auto it = lexical_.find(key(x_shifted, y));
    return it == lexical_.end() ? kFloor : it->second;
  }

  // a(i | j, T, T'), j and i are 1-indexed (i = 0 for NULL). Unseen length
  // pairs fall back to uniform.
  double positional(std::size_t i, std::size_t j, std::size_t tgt_len, std::size_t src_len) const {
    if (!uniform_positions_) {
      const auto it = positional_.find({tgt_len, src_len});
      if (it != positional_.end()) {
        return it->second[(j - 1) * (src_len + 1) + i];
      }
    }
    return 1.0 / static_cast<double>(src_len + 1);
  }

  bool uses_positional_table() const noexcept { return !uniform_positions_; }

  // Row sums of t(. | x) for every conditioning word.
  std::map<TokenId, double> lexical_row_sums() const {
    std::map<TokenId, double> sums;
    for (const auto& [k, p] : lexical_) sums[static_cast<TokenId>(k >> 32)] += p;
    return sums;
  }

  const std::map<std::pair<std::size_t, std::size_t>, std::vector<double>>& positional_tables() const noexcept {
    return positional_;
  }

  std::size_t lexical_entries() const noexcept { return lexical_.size(); }

  // Serialized as text: "L x y p" and "P T T' j i p" lines.
  void write(std::ostream& out) const {
    out.precision(17);
    out << "natf-align 1 " << (uniform_positions_ ? 1 : 0) << '\n';
    std::map<std::uint64_t, double> ordered(lexical_.begin(), lexical_.end());
    for (const auto& [k, p] : ordered) {
      out << "L " << static_cast<TokenId>(k >> 32) << ' ' << static_cast<TokenId>(k & 0xffffffffu) << ' ' << p << '\n';
    }
    for (const auto& [lens, table] : positional_) {
      const std::size_t src_len = lens.second;
      for (std::size_t idx = 0; idx < table.size(); ++idx) {
        out << "P " << lens.first << ' ' << src_len << ' ' << idx / (src_len + 1) + 1 << ' ' << idx % (src_len + 1)
            << ' ' << table[idx] << '\n';
      }
    }
  }

  static AlignmentModel read(std::istream& in) {
    AlignmentModel m;
    std::string magic;
    int version = 0, uniform = 0;
    if (!(in >> magic >> version >> uniform) || magic != "natf-align" || version != 1) {
      throw DataError("alignment model: bad header");
    }
    m.uniform_positions_ = uniform != 0;
    std::string tag;
    while (in >> tag) {
      if (tag == "L") {
        TokenId x = 0, y = 0;
        double p = 0;
        in >> x >> y >> p;
        m.lexical_[key(x, y)] = p;
      } else if (tag == "P") {
        std::size_t tl = 0, sl = 0, j = 0, i = 0;
        double p = 0;
        in >> tl >> sl >> j >> i >> p;
        auto& table = m.positional_[{tl, sl}];
        table.resize(tl * (sl + 1), 0.0);
        table.at((j - 1) * (sl + 1) + i) = p;
      } else {
        throw DataError("alignment model: unknown record " + tag);
      }
      if (!in) throw DataError("alignment model: truncated record");
    }
    return m;
  }

 private:
  friend struct AlignerTrainer;

  static std::uint64_t key(TokenId x_shifted, TokenId y) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(x_shifted)) << 32) |
           static_cast<std::uint32_t>(y);
  }

  std::unordered_map<std::uint64_t, double> lexical_;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> positional_;
  bool uniform_positions_ = true;
};

struct EmTrace {
  // Corpus log-likelihood evaluated at the start of each iteration, i.e. under
  // the parameters that iteration's E-step uses.
  std::vector<double> model1_log_likelihood;
  std::vector<double> model2_log_likelihood;
  std::size_t skipped_pairs = 0;
};

struct AlignerTrainer {
  static bool usable(const SentencePair& p) { return !p.source.empty() && !p.target.empty(); }

  static void initialize(AlignmentModel& m,
                         const std::unordered_map<TokenId, std::unordered_map<TokenId, bool>>& cooc) {
    m.lexical_.clear();
    for (const auto& [x, ys] : cooc) {
      for (const auto& [y, _] : ys) m.lexical_[AlignmentModel::key(x, y)] = 1.0 / static_cast<double>(ys.size());
    }
    m.positional_.clear();
    m.uniform_positions_ = true;
  }

  // One EM iteration; returns the log-likelihood under the incoming parameters.
  static double iterate(AlignmentModel& m, const ParallelCorpus& corpus, bool fit_positions) {
    std::unordered_map<std::uint64_t, double> lex_counts;
    std::unordered_map<TokenId, double> lex_totals;
    std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> pos_counts;
    double log_likelihood = 0.0;
    std::vector<double> post;
    for (const auto& pair : corpus) {
      if (!usable(pair)) continue;
      const auto src = pair.source.tokens();
      const auto tgt = pair.target.tokens();
      const std::size_t sl = src.size(), tl = tgt.size();
      auto& pc = pos_counts[{tl, sl}];
      if (fit_positions) pc.resize(tl * (sl + 1), 0.0);
      post.resize(sl + 1);
      for (std::size_t j = 1; j <= tl; ++j) {
        const TokenId y = tgt[j - 1];
        double denom = 0.0;
        for (std::size_t i = 0; i <= sl; ++i) {
          const TokenId xs = i == 0 ? 0 : src[i - 1] + 1;
          post[i] = m.lexical(xs, y) * m.positional(i, j, tl, sl);
          denom += post[i];
        }
        log_likelihood += std::log(denom);
        for (std::size_t i = 0; i <= sl; ++i) {
          const TokenId xs = i == 0 ? 0 : src[i - 1] + 1;
          const double c = post[i] / denom;
          lex_counts[AlignmentModel::key(xs, y)] += c;
          lex_totals[xs] += c;
          if (fit_positions) pc[(j - 1) * (sl + 1) + i] += c;
        }
      }
    }
    for (auto& [k, c] : lex_counts) {
      c /= lex_totals[static_cast<TokenId>(k >> 32)];
    }
    m.lexical_ = std::move(lex_counts);
    if (fit_positions) {
      for (auto& [lens, table] : pos_counts) {
        const std::size_t sl = lens.second;
        for (std::size_t j = 0; j < lens.first; ++j) {
          double z = 0.0;
          for (std::size_t i = 0; i <= sl; ++i) z += table[j * (sl + 1) + i];
          for (std::size_t i = 0; i <= sl; ++i) table[j * (sl + 1) + i] /= z;
        }
      }
      m.positional_ = std::move(pos_counts);
      m.uniform_positions_ = false;
    }
    return log_likelihood;
  }
};

// Model 1 EM for iters_m1 iterations (uniform positions) to initialize the
// lexical table, then Model 2 EM for iters_m2 iterations fitting both tables.
// Empty pairs are skipped with a warning.
inline AlignmentModel em_train(const ParallelCorpus& corpus, std::size_t iters_m1 = 5, std::size_t iters_m2 = 5,
                               EmTrace* trace = nullptr) {
  if (corpus.empty()) {
    throw DataError("em_train: empty corpus");
  }
  EmTrace local;
  EmTrace& tr = trace != nullptr ? *trace : local;
  tr = EmTrace{};
  AlignmentModel m;
  // Uniform lexical initialization over co-occurring targets.
  std::unordered_map<TokenId, std::unordered_map<TokenId, bool>> cooc;
  for (const auto& pair : corpus) {
    if (!AlignerTrainer::usable(pair)) {
      ++tr.skipped_pairs;
      continue;
    }
    for (const TokenId y : pair.target.tokens()) {
      cooc[0][y] = true;
      for (const TokenId x : pair.source.tokens()) cooc[x + 1][y] = true;
    }
  }
  if (tr.skipped_pairs > 0) {
    std::cerr << "warning: em_train skipped " << tr.skipped_pairs << " empty sentence pair(s)\n";
  }
  if (cooc.empty()) {
    throw DataError("em_train: corpus has no non-empty sentence pairs");
  }
  AlignerTrainer::initialize(m, cooc);
  for (std::size_t it = 0; it < iters_m1; ++it) {
    tr.model1_log_likelihood.push_back(AlignerTrainer::iterate(m, corpus, false));
  }
  for (std::size_t it = 0; it < iters_m2; ++it) {
    tr.model2_log_likelihood.push_back(AlignerTrainer::iterate(m, corpus, true));
  }
  return m;
}

// Corpus log-likelihood under a fixed model.
inline double corpus_log_likelihood(const AlignmentModel& m, const ParallelCorpus& corpus) {
  double ll = 0.0;
  for (const auto& pair : corpus) {
    if (!AlignerTrainer::usable(pair)) continue;
    const auto src = pair.source.tokens();
    const auto tgt = pair.target.tokens();
    for (std::size_t j = 1; j <= tgt.size(); ++j) {
      double denom = 0.0;
      for (std::size_t i = 0; i <= src.size(); ++i) {
        const TokenId xs = i == 0 ? 0 : src[i - 1] + 1;
        denom += m.lexical(xs, tgt[j - 1]) * m.positional(i, j, tgt.size(), src.size());
      }
      ll += std::log(denom);
    }
  }
  return ll;
}

// Round half away from zero.
inline long long round_half_away(double v) {
  return static_cast<long long>(v < 0 ? std::ceil(v - 0.5) : std::floor(v + 0.5));
}

// Independent argmax_i t(y_j | x_i) * a(i | j, T, T') per target position.
// Ties go to the source position nearest the diagonal Round(j*T'/T), then to
// the lower index; NULL only wins strictly.
inline Alignment viterbi_align(const SentencePair& pair, const AlignmentModel& m) {
  const auto src = pair.source.tokens();
  const auto tgt = pair.target.tokens();
  const std::size_t sl = src.size(), tl = tgt.size();
  Alignment out(tl, 0);
  for (std::size_t j = 1; j <= tl; ++j) {
    const long long diag = round_half_away(static_cast<double>(j * sl) / static_cast<double>(tl));
    double best = -1.0;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i <= sl; ++i) {
      const TokenId xs = i == 0 ? 0 : src[i - 1] + 1;
      const double score = m.lexical(xs, tgt[j - 1]) * m.positional(i, j, tl, sl);
      bool better = score > best;
      if (!better && score == best && i != 0) {
        if (best_i == 0) {
          better = true;
        } else {
          const long long di = std::llabs(static_cast<long long>(i) - diag);
          const long long db = std::llabs(static_cast<long long>(best_i) - diag);
          better = di < db;
        }
      }
      if (better) {
        best = score;
        best_i = i;
      }
    }
    out[j - 1] = best_i;
  }
  return out;
}

// Replaces NULL links by the source position of the nearest aligned target
// neighbour (left first, then right); position 1 when nothing is aligned.
inline Alignment reassign_null(const Alignment& alignment) {
  Alignment out = alignment;
  const std::size_t n = alignment.size();
  for (std::size_t j = 0; j < n; ++j) {
    if (alignment[j] != 0) continue;
    std::size_t chosen = 1;
    for (std::size_t dist = 1; dist < n; ++dist) {
      if (j >= dist && alignment[j - dist] != 0) {
        chosen = alignment[j - dist];
        break;
      }
      if (j + dist < n && alignment[j + dist] != 0) {
        chosen = alignment[j + dist];
        break;
      }
    }
    out[j] = chosen;
  }
  return out;
}

// Counts target words per source word after NULL reassignment, so the
// fertilities sum to the target length. Values above classes-1 are clamped
// and the excess moves to the nearest source neighbour with room.
inline FertilitySeq extract_fertilities(const Alignment& alignment, std::size_t source_length,
                                        std::size_t classes = kDefaultFertilityClasses) {
  if (source_length == 0) {
    throw UsageError("extract_fertilities: empty source");
  }
  const std::size_t cap = classes - 1;
  if (alignment.size() > cap * source_length) {
    throw DataError("extract_fertilities: target length " + std::to_string(alignment.size()) +
                    " cannot be covered by " + std::to_string(source_length) + " words with fertility <= " +
                    std::to_string(cap));
  }
  FertilitySeq f(source_length, 0);
  for (const std::size_t i : reassign_null(alignment)) {
    if (i == 0 || i > source_length) {
      throw UsageError("extract_fertilities: alignment index " + std::to_string(i) + " outside source");
    }
    ++f[i - 1];
  }
  for (std::size_t i = 0; i < source_length; ++i) {
    while (f[i] > cap) {
      std::size_t excess = f[i] - cap;
      f[i] = cap;
      for (std::size_t dist = 1; excess > 0 && dist < source_length; ++dist) {
        for (const long long nb : {static_cast<long long>(i) - static_cast<long long>(dist),
                                   static_cast<long long>(i + dist)}) {
          if (nb < 0 || nb >= static_cast<long long>(source_length) || excess == 0) continue;
          auto& slot = f[static_cast<std::size_t>(nb)];
          const std::size_t room = slot < cap ? cap - slot : 0;
          const std::size_t moved = std::min(room, excess);
          slot += moved;
          excess -= moved;
        }
      }
    }
  }
  return f;
}

// "j-i" pairs, 1-indexed target then source; NULL links print as "j-0".
inline std::string format_alignment(const Alignment& alignment) {
  std::string line;
  for (std::size_t j = 0; j < alignment.size(); ++j) {
    if (j) line += ' ';
    line += std::to_string(j + 1) + '-' + std::to_string(alignment[j]);
  }
  return line;
}

inline Alignment parse_alignment(const std::string& line) {
  std::istringstream in(line);
  std::string link;
  Alignment out;
  while (in >> link) {
    const auto dash = link.find('-');
    if (dash == std::string::npos) throw DataError("alignment: malformed link '" + link + "'");
    const std::size_t j = std::stoul(link.substr(0, dash));
    const std::size_t i = std::stoul(link.substr(dash + 1));
    if (j != out.size() + 1) throw DataError("alignment: links must list target positions in order");
    out.push_back(i);
  }
  return out;
}

}  // namespace natf

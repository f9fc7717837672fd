#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "natf/aligner.hpp"
#include "natf/corpus.hpp"
#include "natf/error.hpp"
#include "natf/rng.hpp"

namespace natf {

// One templated source phrase and its interchangeable target renderings.
struct Phrase {
  Sentence source;
  std::vector<Sentence> modes;
};

enum class Purity { kPure, kContaminated, kOther };

// Classifies outputs against the phrase table. An output is contaminated when,
// for some source phrase, the output words drawn from that phrase's renderings
// are not all found in any single rendering ("Vielen schön ."); it is pure
// when it is exactly one rendering per phrase followed by the shared suffix.
class ModeOracle {
 public:
  ModeOracle() = default;
  explicit ModeOracle(std::vector<Phrase> phrases, Sentence shared = {}) : phrases_(std::move(phrases)), shared_(std::move(shared)) {
    for (std::size_t p = 0; p < phrases_.size(); ++p) {
      if (phrases_[p].modes.size() < 2) {
        throw UsageError("mode oracle: phrase " + std::to_string(p) + " needs at least two modes");
      }
      if (phrases_[p].source.empty()) throw UsageError("mode oracle: empty source phrase");
      if (!by_head_.emplace(phrases_[p].source.front(), p).second) {
        throw UsageError("mode oracle: source phrases must start with distinct words");
      }
    }
  }

  const std::vector<Phrase>& phrases() const noexcept { return phrases_; }
  const Sentence& shared() const noexcept { return shared_; }

  // Phrase indices of a source sentence; unknown words are skipped.
  std::vector<std::size_t> parse(const Sentence& source) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < source.size();) {
      const auto it = by_head_.find(source[i]);
      if (it == by_head_.end()) {
        ++i;
        continue;
      }
      out.push_back(it->second);
      i += phrases_[it->second].source.size();
    }
    return out;
  }

  // Every pure rendering of the source, in mode-major lexicographic order.
  std::vector<Sentence> references(const Sentence& source) const {
    std::vector<Sentence> out{{}};
    for (const std::size_t p : parse(source)) {
      std::vector<Sentence> next;
      for (const auto& prefix : out) {
        for (const auto& mode : phrases_[p].modes) {
          Sentence s = prefix;
          s.insert(s.end(), mode.begin(), mode.end());
          next.push_back(std::move(s));
        }
      }
      out = std::move(next);
    }
    for (auto& s : out) s.insert(s.end(), shared_.begin(), shared_.end());
    return out;
  }

  Purity classify(const Sentence& source, const Sentence& output) const {
    for (const std::size_t p : parse(source)) {
      const auto& modes = phrases_[p].modes;
      auto in = [](const Sentence& s, const std::string& w) { return std::find(s.begin(), s.end(), w) != s.end(); };
      Sentence used;
      for (const auto& w : output) {
        for (const auto& m : modes) {
          if (in(m, w)) {
            used.push_back(w);
            break;
          }
        }
      }
      if (used.empty()) continue;
      const bool covered = std::any_of(modes.begin(), modes.end(), [&](const Sentence& m) {
        return std::all_of(used.begin(), used.end(), [&](const std::string& w) { return in(m, w); });
      });
      if (!covered) return Purity::kContaminated;
    }
    for (const auto& r : references(source)) {
      if (r == output) return Purity::kPure;
    }
    return Purity::kOther;
  }

  double contamination_rate(const std::vector<Sentence>& sources, const std::vector<Sentence>& outputs) const {
    if (sources.size() != outputs.size() || sources.empty()) {
      throw UsageError("contamination_rate: mismatched or empty lists");
    }
    std::size_t bad = 0;
    for (std::size_t i = 0; i < sources.size(); ++i) bad += classify(sources[i], outputs[i]) == Purity::kContaminated;
    return static_cast<double>(bad) / static_cast<double>(sources.size());
  }

 private:
  std::vector<Phrase> phrases_;
  Sentence shared_;
  std::map<std::string, std::size_t> by_head_;
};

struct MultimodalSpec {
  std::size_t phrases = 16;
  std::size_t modes = 4;
  std::size_t source_words = 2;  // per phrase
  std::size_t target_words = 2;  // per mode
  std::size_t min_phrases = 1;
  std::size_t max_phrases = 3;
  std::size_t size = 2000;
  std::uint64_t seed = 1;
};

struct MultimodalCorpus {
  TextCorpus corpus;
  ModeOracle oracle;
};

// Sentences are 1..max_phrases distinct phrases followed by ".". Each phrase
// occurrence draws its rendering uniformly from its modes. Renderings are
// crossed: the first half of the modes share their first word, the second
// half share their last word, and every other word is mode-specific, so the
// most frequent word at each position comes from a different mode.
inline MultimodalCorpus gen_synth_multimodal(const MultimodalSpec& spec) {
  if (spec.modes < 2) throw UsageError("gen-synth: at least two modes per phrase");
  if (spec.phrases == 0 || spec.min_phrases == 0 || spec.min_phrases > spec.max_phrases ||
      spec.max_phrases > spec.phrases || spec.source_words == 0 || spec.target_words < 2) {
    throw UsageError("gen-synth: inconsistent phrase counts");
  }
  const std::size_t half = spec.modes / 2;
  std::vector<Phrase> table;
  for (std::size_t p = 0; p < spec.phrases; ++p) {
    Phrase ph;
    const std::string tag = "t" + std::to_string(p);
    for (std::size_t w = 0; w < spec.source_words; ++w) ph.source.push_back("s" + std::to_string(p) + "_" + std::to_string(w));
    for (std::size_t m = 0; m < spec.modes; ++m) {
      Sentence mode;
      for (std::size_t w = 0; w < spec.target_words; ++w) {
        std::string word = tag + "m" + std::to_string(m) + "_" + std::to_string(w);
        if (w == 0 && m < half) word = tag + "_first";
        if (w + 1 == spec.target_words && m >= half) word = tag + "_last";
        mode.push_back(std::move(word));
      }
      ph.modes.push_back(std::move(mode));
    }
    table.push_back(std::move(ph));
  }
  MultimodalCorpus out{{}, ModeOracle(table, {"."})};
  Rng rng(spec.seed);
  std::vector<std::size_t> ids(spec.phrases);
  for (std::size_t i = 0; i < spec.phrases; ++i) ids[i] = i;
  for (std::size_t n = 0; n < spec.size; ++n) {
    const std::size_t k = spec.min_phrases + rng.below(spec.max_phrases - spec.min_phrases + 1);
    rng.shuffle(ids);
    Sentence src, tgt;
    for (std::size_t i = 0; i < k; ++i) {
      const Phrase& ph = table[ids[i]];
      src.insert(src.end(), ph.source.begin(), ph.source.end());
      const Sentence& mode = ph.modes[rng.below(ph.modes.size())];
      tgt.insert(tgt.end(), mode.begin(), mode.end());
    }
    src.push_back(".");
    tgt.push_back(".");
    out.corpus.source.push_back(std::move(src));
    out.corpus.target.push_back(std::move(tgt));
  }
  return out;
}

struct PlantedSpec {
  std::size_t words = 40;
  double two_word_rate = 0.15;  // share of source words rendered by two target words
  std::size_t silent_words = 2;  // source words with no rendering
  std::size_t min_length = 4;
  std::size_t max_length = 10;
  double swap_rate = 0.2;  // adjacent-word reordering probability
  std::size_t size = 1000;
  std::uint64_t seed = 1;
};

// Planted word-for-word dictionary corpus with its gold alignment (target
// position -> 1-based source position, 0 for none).
struct PlantedCorpus {
  TextCorpus corpus;
  std::vector<Alignment> gold;
};

inline PlantedCorpus gen_synth_planted(const PlantedSpec& spec) {
  if (spec.words <= spec.silent_words || spec.min_length == 0 || spec.min_length > spec.max_length) {
    throw UsageError("gen-synth planted: inconsistent spec");
  }
  Rng rng(spec.seed);
  std::vector<Sentence> dict(spec.words);
  for (std::size_t w = 0; w < spec.words; ++w) {
    if (w < spec.silent_words) continue;
    dict[w].push_back("v" + std::to_string(w));
    if (rng.uniform() < spec.two_word_rate) dict[w].push_back("v" + std::to_string(w) + "b");
  }
  PlantedCorpus out;
  while (out.gold.size() < spec.size) {
    const std::size_t len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
    std::vector<std::size_t> words(len);
    for (auto& w : words) w = rng.below(spec.words);
    std::vector<std::size_t> order(len);
    for (std::size_t i = 0; i < len; ++i) order[i] = i;
    for (std::size_t i = 0; i + 1 < len; ++i) {
      if (rng.uniform() < spec.swap_rate) {
        std::swap(order[i], order[i + 1]);
        ++i;
      }
    }
    Sentence src, tgt;
    Alignment gold;
    for (const std::size_t w : words) src.push_back("w" + std::to_string(w));
    for (const std::size_t i : order) {
      for (const auto& t : dict[words[i]]) {
        tgt.push_back(t);
        gold.push_back(i + 1);
      }
    }
    if (tgt.empty()) continue;
    out.corpus.source.push_back(std::move(src));
    out.corpus.target.push_back(std::move(tgt));
    out.gold.push_back(std::move(gold));
  }
  return out;
}

struct CopySpec {
  std::size_t vocab = 30;  // distinct content words
  std::size_t min_length = 3;
  std::size_t max_length = 8;
  std::size_t size = 2000;
  std::uint64_t seed = 1;
};

// Target equals source.
inline TextCorpus gen_synth_copy(const CopySpec& spec) {
  if (spec.vocab == 0 || spec.min_length == 0 || spec.min_length > spec.max_length) {
    throw UsageError("gen-synth copy: inconsistent spec");
  }
  Rng rng(spec.seed);
  TextCorpus out;
  for (std::size_t n = 0; n < spec.size; ++n) {
    const std::size_t len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
    Sentence s;
    for (std::size_t i = 0; i < len; ++i) s.push_back("c" + std::to_string(rng.below(spec.vocab)));
    out.source.push_back(s);
    out.target.push_back(std::move(s));
  }
  return out;
}

}  // namespace natf

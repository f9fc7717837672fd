// natf command-line driver. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "natf/natf.hpp"

namespace {

using natf::DataError;
using natf::UsageError;
using nlohmann::json;

// ------------------------------------------------------------ config files

// key=value lines; '#' starts a comment. Keys are long option names without
// the leading dashes.
std::vector<std::pair<std::string, std::string>> read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

// Splices config entries into argv right after the subcommand name, skipping
// keys already given on the command line so that flags win.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::string config;
  std::set<std::string> given;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0) continue;
    const auto eq = a.find('=');
    const std::string key = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
    if (key == "config") {
      if (eq != std::string::npos) {
        config = a.substr(eq + 1);
      } else if (i + 1 < args.size()) {
        config = args[i + 1];
      } else {
        throw UsageError("--config needs a file name");
      }
    }
    given.insert(key);
  }
  if (config.empty() || args.size() < 2) return args;
  std::vector<std::string> out(args.begin(), args.begin() + 2);
  for (const auto& [k, v] : read_config(config)) {
    if (given.count(k) == 0) out.push_back("--" + k + "=" + v);
  }
  out.insert(out.end(), args.begin() + 2, args.end());
  return out;
}

// ------------------------------------------------------------ file helpers

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::unique_ptr<std::ostream> open_out(const std::string& path) {
  if (path.empty() || path == "-") return nullptr;
  auto f = std::make_unique<std::ofstream>(path);
  if (!*f) throw DataError("cannot write " + path);
  return f;
}

std::vector<natf::FertilitySeq> read_fertilities(const std::string& path) {
  std::vector<natf::FertilitySeq> out;
  std::size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    std::istringstream in(line);
    natf::FertilitySeq f;
    std::string w;
    while (in >> w) {
      std::size_t used = 0;
      unsigned long v = 0;
      try {
        v = std::stoul(w, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != w.size() || w.empty() || w[0] == '-') {
        throw DataError(path + ":" + std::to_string(lineno) + ": bad fertility '" + w + "'");
      }
      f.push_back(v);
    }
    out.push_back(std::move(f));
  }
  return out;
}

void write_fertilities(std::ostream& out, const std::vector<natf::FertilitySeq>& ferts) {
  for (const auto& f : ferts) {
    for (std::size_t i = 0; i < f.size(); ++i) out << (i ? " " : "") << f[i];
    out << '\n';
  }
}

json vocab_json(const natf::Vocab& v) { return v.tokens(); }

natf::Vocab vocab_from(const json& extra, const char* key, const std::string& path) {
  if (!extra.contains(key)) throw DataError(path + ": checkpoint carries no " + std::string(key));
  return natf::Vocab::from_tokens(extra.at(key).get<std::vector<std::string>>());
}

struct Vocabs {
  natf::Vocab src;
  natf::Vocab tgt;
};

Vocabs vocabs_of(const json& extra, const std::string& path) {
  return {vocab_from(extra, "src_vocab", path), vocab_from(extra, "tgt_vocab", path)};
}

std::vector<natf::TokenSeq> encode_lines(const std::vector<std::string>& lines, const natf::Vocab& v) {
  std::vector<natf::TokenSeq> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(v.encode(natf::split_words(l)));
  return out;
}

// ------------------------------------------------------------ options

struct ModelFlags {
  natf::ModelConfig cfg;
  bool literal_scaling = false;

  void add(CLI::App* app) {
    app->add_option("--d-model", cfg.d_model, "model width")->capture_default_str();
    app->add_option("--d-hidden", cfg.d_hidden, "feed-forward width")->capture_default_str();
    app->add_option("--layers", cfg.n_layer, "layers per stack")->capture_default_str();
    app->add_option("--heads", cfg.n_head, "attention heads")->capture_default_str();
    app->add_option("--max-length", cfg.max_length, "longest sequence")->capture_default_str();
    app->add_flag("--literal-scaling", literal_scaling, "scale attention by sqrt(d_model)");
  }

  natf::ModelConfig resolve() const {
    natf::ModelConfig c = cfg;
    if (literal_scaling) c.scaling = natf::AttentionScaling::kModelWidth;
    return c;
  }
};

struct TrainFlags {
  natf::TrainConfig cfg;
  std::string log_path;

  void add(CLI::App* app) {
    app->add_option("--epochs", cfg.epochs)->capture_default_str();
    app->add_option("--batch-size", cfg.batch_size)->capture_default_str();
    app->add_option("--lr-scale", cfg.optim.scale, "peak-rate multiplier")->capture_default_str();
    app->add_option("--warmup", cfg.optim.warmup_steps)->capture_default_str();
    app->add_option("--target-loss", cfg.target_loss, "stop once an epoch's mean loss is below this");
    app->add_option("--max-seconds", cfg.max_seconds, "wall-clock budget, 0 = none");
    app->add_option("--seed", cfg.seed)->capture_default_str();
    app->add_option("--log", log_path, "JSONL training log");
  }
};

void set_defaults(natf::TrainConfig& c) {
  c.optim.scale = 0.1;
  c.optim.warmup_steps = 200;
}

// ------------------------------------------------------------ commands

int cmd_gen_synth(const std::string& kind, const std::string& out, std::size_t size, std::uint64_t seed,
                  std::size_t modes, std::size_t phrases) {
  if (kind == "multimodal") {
    natf::MultimodalSpec spec;
    spec.size = size;
    spec.seed = seed;
    spec.modes = modes;
    spec.phrases = phrases;
    natf::save_corpus(out, natf::gen_synth_multimodal(spec).corpus);
  } else if (kind == "planted") {
    natf::PlantedSpec spec;
    spec.size = size;
    spec.seed = seed;
    const natf::PlantedCorpus p = natf::gen_synth_planted(spec);
    natf::save_corpus(out, p.corpus);
    std::ofstream gold(out + ".gold");
    if (!gold) throw DataError("cannot write " + out + ".gold");
    for (const auto& a : p.gold) gold << natf::format_alignment(a) << '\n';
  } else if (kind == "copy") {
    natf::CopySpec spec;
    spec.size = size;
    spec.seed = seed;
    natf::save_corpus(out, natf::gen_synth_copy(spec));
  } else {
    throw UsageError("unknown corpus kind " + kind + " (multimodal, planted, copy)");
  }
  return 0;
}

int cmd_train_teacher(const std::string& train, const std::string& out, ModelFlags mf, TrainFlags tf,
                      std::size_t min_count) {
  const natf::TextCorpus text = natf::load_corpus(train);
  const natf::Vocab src = natf::Vocab::build(text.source, min_count);
  const natf::Vocab tgt = natf::Vocab::build(text.target, min_count);
  std::size_t dropped = 0;
  const natf::ParallelCorpus corpus = natf::encode_corpus(text, src, tgt, &dropped);
  if (dropped > 0) std::cerr << "warning: dropped " << dropped << " pair(s) with an empty side\n";
  natf::ModelConfig cfg = mf.resolve();
  cfg.src_vocab = src.size();
  cfg.tgt_vocab = tgt.size();
  natf::TeacherModel<float> model(cfg, tf.cfg.seed);
  auto log_file = open_out(tf.log_path);
  natf::TrainLog log(log_file.get());
  natf::train_teacher(model, corpus, tf.cfg, log, [](std::size_t epoch, double loss) {
    std::cerr << "epoch " << epoch << " loss " << loss << '\n';
    return true;
  });
  natf::save_teacher(out, model, json{{"src_vocab", vocab_json(src)}, {"tgt_vocab", vocab_json(tgt)}});
  return 0;
}

int cmd_distill(const std::string& teacher_path, const std::string& input, const std::string& out, std::size_t beam) {
  json extra;
  const auto teacher = natf::load_teacher<float>(teacher_path, &extra);
  const Vocabs v = vocabs_of(extra, teacher_path);
  const natf::TextCorpus text = natf::load_corpus(input);
  std::size_t dropped = 0;
  const natf::ParallelCorpus corpus = natf::encode_corpus(text, v.src, v.tgt, &dropped);
  const auto d = natf::build_distill_corpus(corpus, teacher, beam > 1 ? natf::DistillMode::kBeam : natf::DistillMode::kGreedy,
                                            beam);
  natf::TextCorpus result;
  for (const auto& p : d.pairs) {
    result.source.push_back(natf::split_words(v.src.decode(p.source)));
    result.target.push_back(natf::split_words(v.tgt.decode(p.target)));
  }
  natf::save_corpus(out, result);
  std::cerr << "distilled " << d.pairs.size() << " pairs (" << d.provenance << ")\n";
  return 0;
}

int cmd_align(const std::string& input, const std::string& out, const std::string& alignments, std::size_t iters1,
              std::size_t iters2, std::size_t classes) {
  const natf::TextCorpus text = natf::load_corpus(input);
  const natf::Vocab src = natf::Vocab::build(text.source);
  const natf::Vocab tgt = natf::Vocab::build(text.target);
  natf::ParallelCorpus corpus;
  for (std::size_t i = 0; i < text.size(); ++i) {
    corpus.push_back({src.encode(text.source[i]), tgt.encode(text.target[i])});
  }
  const natf::FertilityTargets ft = natf::aligner_fertilities(corpus, classes, iters1, iters2);
  for (std::size_t i = 0; i < ft.trace.model1_log_likelihood.size(); ++i) {
    std::cerr << "model1 iter " << i + 1 << " loglik " << ft.trace.model1_log_likelihood[i] << '\n';
  }
  for (std::size_t i = 0; i < ft.trace.model2_log_likelihood.size(); ++i) {
    std::cerr << "model2 iter " << i + 1 << " loglik " << ft.trace.model2_log_likelihood[i] << '\n';
  }
  auto f = open_out(out);
  write_fertilities(f ? *f : std::cout, ft.fertilities);
  if (!alignments.empty()) {
    auto a = open_out(alignments);
    for (const auto& pair : corpus) {
      *a << (pair.source.empty() || pair.target.empty() ? "" : natf::format_alignment(natf::viterbi_align(pair, ft.aligner)))
         << '\n';
    }
  }
  return 0;
}

// Fertilities come from a file, or from the aligner when none is given.
std::vector<natf::FertilitySeq> fertilities_for(const natf::ParallelCorpus& corpus, const std::string& path,
                                                std::size_t classes) {
  if (!path.empty()) return read_fertilities(path);
  return natf::aligner_fertilities(corpus, classes).fertilities;
}

int cmd_train_nat(const std::string& train, const std::string& ferts_path, const std::string& teacher_path,
                  const std::string& out, ModelFlags mf, TrainFlags tf, const std::string& copy, bool no_pos,
                  bool no_init) {
  json extra;
  const auto teacher = natf::load_teacher<float>(teacher_path, &extra);
  const Vocabs v = vocabs_of(extra, teacher_path);
  const natf::TextCorpus text = natf::load_corpus(train);
  std::size_t dropped = 0;
  const natf::ParallelCorpus corpus = natf::encode_corpus(text, v.src, v.tgt, &dropped);
  natf::NatOptions opts;
  opts.positional_attention = !no_pos;
  if (copy == "uniform") {
    opts.copy = natf::CopyMode::kUniform;
  } else if (copy != "fertility") {
    throw UsageError("--copy must be fertility or uniform");
  }
  const natf::FertilityCorpus fc =
      natf::checked_fertility_corpus(corpus, fertilities_for(corpus, ferts_path, opts.fertility_classes));
  natf::ModelConfig cfg = mf.resolve();
  cfg.src_vocab = v.src.size();
  cfg.tgt_vocab = v.tgt.size();
  natf::NatModel<float> model(cfg, tf.cfg.seed, opts);
  if (!no_init) natf::init_encoder_from_teacher(model, natf::export_encoder(teacher));
  auto log_file = open_out(tf.log_path);
  natf::TrainLog log(log_file.get());
  natf::train_nat(model, fc.pairs, fc.fertilities, tf.cfg, log, [](std::size_t epoch, double loss) {
    std::cerr << "epoch " << epoch << " loss " << loss << '\n';
    return true;
  });
  natf::save_nat(out, model, json{{"src_vocab", vocab_json(v.src)}, {"tgt_vocab", vocab_json(v.tgt)}});
  return 0;
}

int cmd_finetune(const std::string& nat_path, const std::string& teacher_path, const std::string& train,
                 const std::string& ferts_path, const std::string& out, TrainFlags tf) {
  json extra;
  auto model = natf::load_nat<float>(nat_path, &extra);
  const auto teacher = natf::load_teacher<float>(teacher_path);
  const Vocabs v = vocabs_of(extra, nat_path);
  const natf::TextCorpus text = natf::load_corpus(train);
  std::size_t dropped = 0;
  const natf::ParallelCorpus corpus = natf::encode_corpus(text, v.src, v.tgt, &dropped);
  const natf::FertilityCorpus fc =
      natf::checked_fertility_corpus(corpus, fertilities_for(corpus, ferts_path, model.fertility_classes()));
  auto log_file = open_out(tf.log_path);
  natf::TrainLog log(log_file.get());
  natf::finetune(model, teacher, fc.pairs, fc.fertilities, tf.cfg, log, [](std::size_t epoch, double loss) {
    std::cerr << "epoch " << epoch << " loss " << loss << '\n';
    return true;
  });
  natf::save_nat(out, model, extra);
  return 0;
}

int cmd_translate(const std::string& nat_path, const std::string& teacher_path, const std::string& input,
                  const std::string& out, const std::string& strategy, std::size_t samples, std::uint64_t seed,
                  std::size_t beam) {
  std::optional<natf::TeacherModel<float>> teacher;
  json extra;
  if (!teacher_path.empty()) teacher.emplace(natf::load_teacher<float>(teacher_path, nat_path.empty() ? &extra : nullptr));
  std::optional<natf::NatModel<float>> nat;
  if (!nat_path.empty()) nat.emplace(natf::load_nat<float>(nat_path, &extra));
  const Vocabs v = vocabs_of(extra, nat_path.empty() ? teacher_path : nat_path);
  auto f = open_out(out);
  std::ostream& os = f ? *f : std::cout;
  for (const auto& line : read_lines(input)) {
    const natf::TokenSeq src = v.src.encode(natf::split_words(line));
    natf::TokenSeq y;
    if (src.empty()) {
      os << '\n';
      continue;
    }
    if (strategy == "ar") {
      if (!teacher) throw UsageError("--strategy ar needs --teacher");
      const std::size_t max_len = std::min(natf::default_max_length(src.size()), teacher->config().max_length);
      y = beam > 1 ? natf::beam_decode(*teacher, src, beam, max_len) : natf::greedy_decode(*teacher, src, max_len);
    } else {
      if (!nat) throw UsageError("--strategy " + strategy + " needs --nat");
      natf::DecodeOptions o;
      if (strategy == "argmax") {
        o = natf::DecodeOptions::of(natf::Strategy::kArgmax);
      } else if (strategy == "average") {
        o = natf::DecodeOptions::of(natf::Strategy::kAverage);
      } else if (strategy == "npd") {
        if (!teacher) throw UsageError("--strategy npd needs --teacher");
        o = natf::DecodeOptions::of(natf::Strategy::kNpd, samples, seed);
      } else {
        throw UsageError("unknown strategy " + strategy + " (argmax, average, npd, ar)");
      }
      y = natf::nat_decode(*nat, src, o, teacher ? &*teacher : nullptr).output;
    }
    os << v.tgt.decode(y) << '\n';
  }
  return 0;
}

int cmd_score(const std::string& teacher_path, const std::string& source, const std::string& hyp) {
  json extra;
  const auto teacher = natf::load_teacher<float>(teacher_path, &extra);
  const Vocabs v = vocabs_of(extra, teacher_path);
  const auto src = read_lines(source);
  const auto hyps = read_lines(hyp);
  if (src.size() != hyps.size()) {
    throw DataError(source + " has " + std::to_string(src.size()) + " lines but " + hyp + " has " +
                    std::to_string(hyps.size()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double s = natf::score_parallel(teacher, v.src.encode(natf::split_words(src[i])),
                                          v.tgt.encode(natf::split_words(hyps[i])));
    std::printf("%.6f\n", s);
    total += s;
  }
  std::printf("mean %.6f\n", src.empty() ? 0.0 : total / static_cast<double>(src.size()));
  return 0;
}

int cmd_bleu(const std::string& hyp, const std::vector<std::string>& refs, std::size_t max_n) {
  std::vector<natf::Sentence> hyps;
  for (const auto& l : read_lines(hyp)) hyps.push_back(natf::split_words(l));
  std::vector<std::vector<natf::Sentence>> ref_sets;
  for (const auto& r : refs) {
    std::vector<natf::Sentence> s;
    for (const auto& l : read_lines(r)) s.push_back(natf::split_words(l));
    if (s.size() != hyps.size()) {
      throw DataError(r + " has " + std::to_string(s.size()) + " lines but " + hyp + " has " +
                      std::to_string(hyps.size()));
    }
    ref_sets.push_back(std::move(s));
  }
  // A joint vocabulary maps every word to its own id.
  std::vector<natf::Sentence> all = hyps;
  for (const auto& set : ref_sets) all.insert(all.end(), set.begin(), set.end());
  const natf::Vocab v = natf::Vocab::build(all);
  natf::BleuStats st;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    std::vector<natf::TokenSeq> r;
    for (const auto& set : ref_sets) r.push_back(v.encode(set[i]));
    st += natf::sentence_stats(v.encode(hyps[i]), r, max_n);
  }
  std::printf("%.2f\n", natf::bleu_from_stats(st, false));
  return 0;
}

std::vector<std::size_t> parse_lengths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw UsageError("bad length list " + s);
    }
  }
  return out;
}

int cmd_bench(const std::string& teacher_path, const std::string& nat_path, const std::string& input,
              const std::vector<std::string>& strategies, std::size_t repeats, const std::string& sweep,
              const std::string& tsv, const std::string& summary, const std::string& jsonl, std::uint64_t seed) {
  json extra;
  const auto teacher = natf::load_teacher<float>(teacher_path);
  const auto nat = natf::load_nat<float>(nat_path, &extra);
  natf::BenchReport r;
  if (!sweep.empty()) {
    r = natf::length_sweep(teacher, nat, parse_lengths(sweep), repeats, seed);
  } else {
    if (input.empty()) throw UsageError("bench needs --input or --sweep");
    const Vocabs v = vocabs_of(extra, nat_path);
    std::vector<natf::TokenSeq> sources;
    for (auto& s : encode_lines(read_lines(input), v.src)) {
      if (!s.empty()) sources.push_back(std::move(s));
    }
    r = natf::bench_latency(sources, teacher, nat, strategies, repeats, strategies.front(), seed);
  }
  if (auto f = open_out(tsv)) r.write_tsv(*f);
  if (auto f = open_out(jsonl)) r.write_jsonl(*f);
  auto f = open_out(summary);
  r.write_summary_tsv(f ? *f : std::cout);
  return 0;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  args = expand_config(args);

  CLI::App app{"Non-autoregressive translation with fertilities"};
  app.require_subcommand(1);
  std::string config;
  auto add_config = [&config](CLI::App* sub) { sub->add_option("--config", config, "key=value defaults file"); };

  // gen-synth
  std::string kind = "multimodal", synth_out;
  std::size_t synth_size = 2000, modes = 4, phrases = 16;
  std::uint64_t synth_seed = 1;
  auto* gen = app.add_subcommand("gen-synth", "write a synthetic parallel corpus");
  gen->add_option("--kind", kind, "multimodal | planted | copy")->capture_default_str();
  gen->add_option("--out", synth_out, "output prefix (.src/.tgt)")->required();
  gen->add_option("--size", synth_size)->capture_default_str();
  gen->add_option("--seed", synth_seed)->capture_default_str();
  gen->add_option("--modes", modes, "renderings per phrase (multimodal)")->capture_default_str();
  gen->add_option("--phrases", phrases, "phrase inventory (multimodal)")->capture_default_str();
  add_config(gen);

  // train-teacher
  std::string train, out;
  std::size_t min_count = 1;
  ModelFlags teacher_model;
  TrainFlags teacher_train;
  set_defaults(teacher_train.cfg);
  auto* tt = app.add_subcommand("train-teacher", "train the autoregressive teacher");
  tt->add_option("--train", train, "corpus prefix")->required();
  tt->add_option("--out", out, "checkpoint")->required();
  tt->add_option("--min-count", min_count, "vocabulary frequency cutoff")->capture_default_str();
  teacher_model.add(tt);
  teacher_train.add(tt);
  add_config(tt);

  // distill
  std::string teacher_path, input;
  std::size_t beam = 1;
  auto* dist = app.add_subcommand("distill", "replace targets by teacher decodes");
  dist->add_option("--teacher", teacher_path)->required();
  dist->add_option("--input", input, "corpus prefix")->required();
  dist->add_option("--out", out, "output prefix")->required();
  dist->add_option("--beam", beam, "1 = greedy")->capture_default_str();
  add_config(dist);

  // align
  std::string alignments;
  std::size_t iters1 = 5, iters2 = 5, classes = natf::kDefaultFertilityClasses;
  auto* al = app.add_subcommand("align", "EM word alignment and fertility extraction");
  al->add_option("--input", input, "corpus prefix")->required();
  al->add_option("--out", out, "fertility file, one line per pair (default stdout)");
  al->add_option("--alignments", alignments, "also write Viterbi alignments here");
  al->add_option("--iters-model1", iters1)->capture_default_str();
  al->add_option("--iters-model2", iters2)->capture_default_str();
  al->add_option("--classes", classes, "fertility classes")->capture_default_str();
  add_config(al);

  // train-nat
  std::string ferts_path, copy = "fertility";
  bool no_pos = false, no_init = false;
  ModelFlags nat_model;
  TrainFlags nat_train;
  set_defaults(nat_train.cfg);
  auto* tn = app.add_subcommand("train-nat", "train the non-autoregressive student");
  tn->add_option("--train", train, "corpus prefix (usually distilled)")->required();
  tn->add_option("--teacher", teacher_path, "teacher checkpoint (vocabularies, encoder init)")->required();
  tn->add_option("--fertilities", ferts_path, "fertility file; runs the aligner when omitted");
  tn->add_option("--out", out, "checkpoint")->required();
  tn->add_option("--copy", copy, "fertility | uniform")->capture_default_str();
  tn->add_flag("--no-positional-attention", no_pos);
  tn->add_flag("--no-encoder-init", no_init);
  nat_model.add(tn);
  nat_train.add(tn);
  add_config(tn);

  // finetune
  std::string nat_path;
  TrainFlags ft_train;
  ft_train.cfg.optim.scale = 0.02;
  ft_train.cfg.optim.warmup_steps = 50;
  ft_train.cfg.epochs = 2;
  bool no_rl = false, no_bp = false, no_kd = false, no_kd_fert = false;
  auto* ft = app.add_subcommand("finetune", "fine-tune the student against the teacher");
  ft->add_option("--nat", nat_path)->required();
  ft->add_option("--teacher", teacher_path)->required();
  ft->add_option("--train", train, "corpus prefix")->required();
  ft->add_option("--fertilities", ferts_path, "fertility file; runs the aligner when omitted");
  ft->add_option("--out", out, "checkpoint")->required();
  ft->add_option("--lambda", ft_train.cfg.lambda)->capture_default_str();
  ft->add_option("--rl-samples", ft_train.cfg.rl_samples)->capture_default_str();
  ft->add_flag("--no-rl", no_rl);
  ft->add_flag("--no-bp", no_bp);
  ft->add_flag("--no-kd", no_kd);
  ft->add_flag("--no-kd-fertility", no_kd_fert);
  ft_train.add(ft);
  add_config(ft);

  // translate
  std::string strategy = "argmax";
  std::size_t samples = 10;
  std::uint64_t decode_seed = 0;
  auto* tr = app.add_subcommand("translate", "decode one sentence per input line");
  tr->add_option("--nat", nat_path);
  tr->add_option("--teacher", teacher_path, "needed for npd and ar");
  tr->add_option("--input", input, "source sentences")->required();
  tr->add_option("--out", out, "default stdout");
  tr->add_option("--strategy", strategy, "argmax | average | npd | ar")->capture_default_str();
  tr->add_option("--samples", samples, "npd candidates")->capture_default_str();
  tr->add_option("--seed", decode_seed)->capture_default_str();
  tr->add_option("--beam", beam, "ar beam width")->capture_default_str();
  add_config(tr);

  // score
  std::string hyp;
  auto* sc = app.add_subcommand("score", "teacher log-probability of each hypothesis");
  sc->add_option("--teacher", teacher_path)->required();
  sc->add_option("--source", input)->required();
  sc->add_option("--hyp", hyp)->required();
  add_config(sc);

  // bleu
  std::vector<std::string> refs;
  std::size_t max_n = 4;
  auto* bl = app.add_subcommand("bleu", "corpus BLEU of HYP against one or more line-aligned references");
  bl->add_option("hyp", hyp)->required();
  bl->add_option("refs", refs)->required();
  bl->add_option("--max-n", max_n)->capture_default_str();
  add_config(bl);

  // bench
  std::vector<std::string> strategies{"ar-greedy", "nat-argmax"};
  std::size_t repeats = 5;
  std::string sweep, tsv, summary, jsonl;
  std::uint64_t bench_seed = 0;
  auto* bn = app.add_subcommand("bench", "batch-size-one latency");
  bn->add_option("--teacher", teacher_path)->required();
  bn->add_option("--nat", nat_path)->required();
  bn->add_option("--input", input, "source sentences");
  bn->add_option("--strategies", strategies, "first one is the speedup baseline")->delimiter(',')->capture_default_str();
  bn->add_option("--repeats", repeats)->capture_default_str();
  bn->add_option("--sweep", sweep, "comma-separated output lengths instead of --input");
  bn->add_option("--tsv", tsv, "per-sentence records");
  bn->add_option("--jsonl", jsonl, "per-sentence records");
  bn->add_option("--summary", summary, "summary TSV (default stdout)");
  bn->add_option("--seed", bench_seed)->capture_default_str();
  add_config(bn);

  std::vector<const char*> cargs;
  for (const auto& a : args) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (*gen) return cmd_gen_synth(kind, synth_out, synth_size, synth_seed, modes, phrases);
  if (*tt) return cmd_train_teacher(train, out, teacher_model, teacher_train, min_count);
  if (*dist) return cmd_distill(teacher_path, input, out, beam);
  if (*al) return cmd_align(input, out, alignments, iters1, iters2, classes);
  if (*tn) return cmd_train_nat(train, ferts_path, teacher_path, out, nat_model, nat_train, copy, no_pos, no_init);
  if (*ft) {
    ft_train.cfg.use_rl = !no_rl;
    ft_train.cfg.use_bp = !no_bp;
    ft_train.cfg.use_kd = !no_kd;
    ft_train.cfg.kd_fertility = !no_kd_fert;
    return cmd_finetune(nat_path, teacher_path, train, ferts_path, out, ft_train);
  }
  if (*tr) return cmd_translate(nat_path, teacher_path, input, out, strategy, samples, decode_seed, beam);
  if (*sc) return cmd_score(teacher_path, input, hyp);
  if (*bl) return cmd_bleu(hyp, refs, max_n);
  if (*bn) return cmd_bench(teacher_path, nat_path, input, strategies, repeats, sweep, tsv, summary, jsonl, bench_seed);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const natf::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const natf::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const natf::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

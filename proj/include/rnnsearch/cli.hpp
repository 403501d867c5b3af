// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rnnsearch/checkpoint.hpp"
#include "rnnsearch/config.hpp"
#include "rnnsearch/error.hpp"
#include "rnnsearch/eval.hpp"
#include "rnnsearch/gradcheck.hpp"
#include "rnnsearch/inference.hpp"
#include "rnnsearch/model.hpp"
#include "rnnsearch/text_data.hpp"
#include "rnnsearch/trainer.hpp"

namespace rnnsearch::cli {

enum ExitCode : int { ok = 0, usage = 1, data = 2, numeric = 3 };

struct GenDataArgs {
  std::string task = "copy";
  std::size_t vocab = 20;
  std::size_t min_len = 3;
  std::size_t max_len = 8;
  std::size_t count = 200;
  std::uint64_t seed = 42;
  std::string out_src, out_tgt;
};

struct TrainArgs {
  std::string config;
  std::string train_src, train_tgt;
  std::string dev_src, dev_tgt;
  std::string out;
};

struct TranslateArgs {
  std::string checkpoint, input, output;
  std::optional<std::size_t> beam;
  bool no_unk = false;
  std::size_t max_len = 0;
};

struct AlignArgs {
  std::string checkpoint, source, target, out_prefix;
  std::size_t beam = 12;
};

struct EvaluateArgs {
  std::string checkpoint, test_src, test_tgt, hyp, curve_out;
  std::vector<std::size_t> bins{10, 20, 30, 40, 50};
  std::string metric = "bleu";
  std::size_t beam = 12;
  bool no_unk = false;
};

struct GradcheckArgs {
  ModelDims dims = gradcheck_dims();
  std::size_t vocab = 11;
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
  std::string inject_fault;
};

namespace detail {

using rnnsearch::detail::concat;

/// Calls body.template operator()<Real>() for the checkpoint's stored precision.
template <typename Body>
decltype(auto) with_checkpoint_precision(const std::string& path, Body&& body) {
  const int precision = checkpoint_precision(path);
  if (precision == 4) return body.template operator()<float>();
  if (precision == 8) return body.template operator()<double>();
  throw DataError(concat("checkpoint ", path, ": unsupported precision byte ", precision));
}

inline std::vector<Sentence> read_lines_allow_empty(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(concat("cannot open ", path));
  std::vector<Sentence> out;
  for (std::string line; std::getline(in, line);) {
    std::istringstream ss(line);
    Sentence s;
    for (std::string tok; ss >> tok;) s.push_back(std::move(tok));
    out.push_back(std::move(s));
  }
  return out;
}

inline Sentence split_words(const std::string& text) {
  std::istringstream ss(text);
  Sentence s;
  for (std::string tok; ss >> tok;) s.push_back(std::move(tok));
  return s;
}

inline std::string join(const Sentence& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ' ';
    out += s[i];
  }
  return out;
}

}  // namespace detail

inline int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  SyntheticTask task;
  if (a.task == "copy") task = SyntheticTask::copy;
  else if (a.task == "reverse") task = SyntheticTask::reverse;
  else throw UsageError(detail::concat("gen-data: unknown task '", a.task, "' (copy or reverse)"));
  if (a.count == 0 || a.vocab < 2 || a.min_len == 0 || a.min_len > a.max_len) {
    throw UsageError("gen-data: need count >= 1, vocab >= 2 and 1 <= min-len <= max-len");
  }
  const auto c = gen_synthetic(task, a.vocab, a.min_len, a.max_len, a.count, a.seed);
  write_lines(c.source, a.out_src);
  write_lines(c.target, a.out_tgt);
  out << "wrote " << c.size() << " pairs to " << a.out_src << " and " << a.out_tgt << '\n';
  return ok;
}

template <typename Real>
int run_training(const RunConfig& rc, const EncodedCorpus& train_set, const EncodedCorpus* dev_set,
                 const Vocabulary& sv, const Vocabulary& tv, const std::string& out_path, std::ostream& out) {
  auto cfg = rc.train_config();
  cfg.dims.src_vocab = sv.size();
  cfg.dims.tgt_vocab = tv.size();
  auto init = init_params<Real>(cfg.dims, Rng(rc.seed));

  Checkpoint<Real> ck;
  ck.mode = rc.context;
  ck.source_vocab = sv;
  ck.target_vocab = tv;

  bool saved = false;
  TrainCallbacks<Real> cb;
  cb.on_record = [&](const TrainRecord& r) {
    write_log_row(out, r);
    out.flush();
  };
  cb.on_best = [&](const ModelParams<Real>& best, const OptimizerState<Real>& opt) {
    ck.params = best;
    ck.optimizer = opt;
    save_checkpoint(ck, out_path);
    saved = true;
  };
  write_log_header(out);
  auto res = train(cfg, train_set, dev_set, std::move(init), cb);
  if (!saved) {
    // no update happened; still leave a loadable checkpoint behind
    ck.params = res.best;
    ck.optimizer = res.optimizer;
    save_checkpoint(ck, out_path);
  }
  return ok;
}

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const auto rc = load_config(a.config);
  if (a.dev_src.empty() != a.dev_tgt.empty()) throw UsageError("train: give both --dev-src and --dev-tgt or neither");

  auto corpus = load_parallel(a.train_src, a.train_tgt);
  const auto before = corpus.size();
  if (rc.max_length > 0) corpus = filter_by_length(corpus, rc.max_length);
  err << "train: kept " << corpus.size() << " of " << before << " pairs (max_length " << rc.max_length << ")\n";
  if (corpus.size() == 0) throw DataError("train: no training pairs left after the length filter");

  const auto sv = build_vocab(corpus.source, rc.vocab_size);
  const auto tv = build_vocab(corpus.target, rc.vocab_size);
  const auto enc = encode_corpus(corpus, sv, tv);
  std::optional<EncodedCorpus> dev;
  if (!a.dev_src.empty()) {
    dev = encode_corpus(load_parallel(a.dev_src, a.dev_tgt), sv, tv);
    if (dev->size() == 0) throw DataError("train: empty dev corpus");
  }
  const EncodedCorpus* dev_ptr = dev ? &*dev : nullptr;
  if (rc.precision == 64) return run_training<double>(rc, enc, dev_ptr, sv, tv, a.out, out);
  return run_training<float>(rc, enc, dev_ptr, sv, tv, a.out, out);
}

inline int cmd_translate(const TranslateArgs& a, std::ostream& err) {
  return detail::with_checkpoint_precision(a.checkpoint, [&]<typename Real>() {
    const auto ck = load_checkpoint<Real>(a.checkpoint);
    const auto lines = detail::read_lines_allow_empty(a.input);
    const std::size_t beam = a.beam.value_or(12);
    if (beam == 0) throw UsageError("translate: --beam must be positive");
    std::ostringstream text;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (lines[i].empty()) {
        text << '\n';
        continue;
      }
      const auto src = encode_sentence(ck.source_vocab, lines[i]);
      const std::size_t max_len = a.max_len ? a.max_len : 2 * lines[i].size() + 10;
      try {
        const auto hyp = beam_search(ck.params, ck.mode, src, beam, max_len, a.no_unk).best;
        text << detail::join(decode_sentence(ck.target_vocab, hyp.tokens)) << '\n';
      } catch (const Error&) {
        throw;
      } catch (const std::exception& e) {
        throw DataError(detail::concat("translate: line ", i + 1, ": ", e.what()));
      }
    }
    std::ofstream os(a.output, std::ios::binary);
    if (!os) throw DataError(detail::concat("cannot write ", a.output));
    os << text.str();
    if (!os) throw DataError(detail::concat("failed writing ", a.output));
    err << "translate: " << lines.size() << " lines\n";
    return int(ok);
  });
}

inline int cmd_align(const AlignArgs& a, std::ostream& out) {
  return detail::with_checkpoint_precision(a.checkpoint, [&]<typename Real>() {
    const auto ck = load_checkpoint<Real>(a.checkpoint);
    if (ck.mode != ContextMode::attention) {
      throw UsageError(
          "align: checkpoint was trained in fixed-context mode; it reads one summary vector and has no "
          "per-word alignment to export");
    }
    const auto src_words = detail::split_words(a.source);
    const auto src = encode_sentence(ck.source_vocab, src_words);
    AlignmentMatrix m;
    if (!a.target.empty()) {
      m = forced_alignment(ck.params, src, encode_sentence(ck.target_vocab, detail::split_words(a.target)));
    } else {
      const auto hyp = beam_search(ck.params, ck.mode, src, a.beam, 2 * src_words.size() + 10).best;
      out << detail::join(decode_sentence(ck.target_vocab, hyp.tokens)) << '\n';
      m = extract_alignment(hyp);
    }
    save_alignment(m, a.out_prefix);
    out << "alignment " << m.target_len << "x" << m.source_len << " written to " << a.out_prefix
        << ".tsv and " << a.out_prefix << ".pgm\n";
    return int(ok);
  });
}

inline int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  LengthMetric metric;
  if (a.metric == "bleu") metric = LengthMetric::bleu;
  else if (a.metric == "token-accuracy") metric = LengthMetric::token_accuracy;
  else throw UsageError(detail::concat("evaluate: unknown metric '", a.metric, "' (bleu or token-accuracy)"));
  if (a.hyp.empty() == a.checkpoint.empty()) throw UsageError("evaluate: give exactly one of --checkpoint or --hyp");
  if (a.bins.empty()) throw UsageError("evaluate: no bins");

  const auto test = load_parallel(a.test_src, a.test_tgt);
  std::vector<Sentence> candidates;
  if (!a.hyp.empty()) {
    candidates = detail::read_lines_allow_empty(a.hyp);
    if (candidates.size() != test.size()) {
      throw DataError(detail::concat("evaluate: ", a.hyp, " has ", candidates.size(), " lines, test set has ",
                                     test.size()));
    }
  } else {
    candidates = detail::with_checkpoint_precision(a.checkpoint, [&]<typename Real>() {
      const auto ck = load_checkpoint<Real>(a.checkpoint);
      std::vector<IdSequence> sources;
      for (const auto& s : test.source) sources.push_back(encode_sentence(ck.source_vocab, s));
      DecodeOptions opts;
      opts.beam = a.beam;
      opts.forbid_unk = a.no_unk;
      std::vector<Sentence> words;
      for (const auto& ids : decode_corpus(ck.params, ck.mode, sources, opts))
        words.push_back(decode_sentence(ck.target_vocab, ids));
      return words;
    });
  }

  write_bleu_report(bleu(candidates, test.target), out);
  std::vector<std::size_t> lengths;
  for (const auto& s : test.source) lengths.push_back(s.size());
  const auto curve = length_curve(lengths, candidates, test.target, a.bins, metric);
  if (!a.curve_out.empty()) {
    std::ofstream os(a.curve_out, std::ios::binary);
    if (!os) throw DataError(detail::concat("cannot write ", a.curve_out));
    write_curve_tsv(curve, os);
    if (!os) throw DataError(detail::concat("failed writing ", a.curve_out));
  } else {
    write_curve_tsv(curve, out);
  }
  return ok;
}

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  auto dims = a.dims;
  dims.src_vocab = dims.tgt_vocab = a.vocab;
  dims.validate();
  if (a.vocab < 2) throw UsageError("gradcheck: --vocab must be at least 2");
  auto& fault = ag::corrupted_backward();
  fault.reset();
  if (!a.inject_fault.empty()) {
    fault = ag::op_from_name(a.inject_fault);
    if (!fault) throw UsageError(detail::concat("gradcheck: unknown op kind '", a.inject_fault, "'"));
  }
  struct Reset {
    ~Reset() { ag::corrupted_backward().reset(); }
  } reset_fault;

  const auto att = gradient_check(dims, ContextMode::attention, a.seed);
  const auto fix = gradient_check(dims, ContextMode::fixed, a.seed);
  out << "param\tattention\tfixed\n" << std::scientific << std::setprecision(3);
  double worst = 0;
  for (std::size_t i = 0; i < att.entries.size(); ++i) {
    out << att.entries[i].name << '\t' << att.entries[i].worst << '\t' << fix.entries[i].worst << '\n';
    worst = std::max({worst, att.entries[i].worst, fix.entries[i].worst});
  }
  const bool pass = worst <= a.tolerance;
  out << "worst\t" << worst << '\n' << (pass ? "PASS" : "FAIL") << '\n' << std::defaultfloat;
  return pass ? ok : numeric;
}

/// Parses argv and runs one subcommand. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-based neural machine translation toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Write a synthetic copy or reverse parallel corpus");
  g->add_option("--task", gen.task, "copy or reverse")->capture_default_str();
  g->add_option("--vocab", gen.vocab, "Number of distinct tokens")->capture_default_str();
  g->add_option("--min-len", gen.min_len)->capture_default_str();
  g->add_option("--max-len", gen.max_len)->capture_default_str();
  g->add_option("--count", gen.count, "Number of sentence pairs")->capture_default_str();
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("--out-src", gen.out_src)->required();
  g->add_option("--out-tgt", gen.out_tgt)->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model; TSV log on stdout");
  t->add_option("--config", tr.config, "key = value configuration file")->required();
  t->add_option("--train-src", tr.train_src)->required();
  t->add_option("--train-tgt", tr.train_tgt)->required();
  t->add_option("--dev-src", tr.dev_src);
  t->add_option("--dev-tgt", tr.dev_tgt);
  t->add_option("--out", tr.out, "Checkpoint path (rewritten whenever the selection score improves)")->required();

  TranslateArgs tl;
  auto* l = app.add_subcommand("translate", "Beam-search translation, one output line per input line");
  l->add_option("--checkpoint", tl.checkpoint)->required();
  l->add_option("--input", tl.input)->required();
  l->add_option("--output", tl.output)->required();
  l->add_option("--beam", tl.beam, "Beam width (default 12)");
  l->add_flag("--no-unk", tl.no_unk, "Never emit the unknown-word token");
  l->add_option("--max-len", tl.max_len, "Output length cap (default 2 * source length + 10)");

  AlignArgs al;
  auto* n = app.add_subcommand("align", "Export attention weights as TSV and PGM");
  n->add_option("--checkpoint", al.checkpoint)->required();
  n->add_option("--source", al.source, "Source sentence")->required();
  n->add_option("--target", al.target, "Reference target; omit to align the decoded output");
  n->add_option("--out-prefix", al.out_prefix)->required();
  n->add_option("--beam", al.beam)->capture_default_str();

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Corpus BLEU and score-by-length curve");
  e->add_option("--checkpoint", ev.checkpoint);
  e->add_option("--hyp", ev.hyp, "Score this file instead of decoding");
  e->add_option("--test-src", ev.test_src)->required();
  e->add_option("--test-tgt", ev.test_tgt)->required();
  e->add_option("--bins", ev.bins, "Inclusive upper edges of the source-length bins")->delimiter(',');
  e->add_option("--metric", ev.metric, "bleu or token-accuracy")->capture_default_str();
  e->add_option("--curve-out", ev.curve_out);
  e->add_option("--beam", ev.beam)->capture_default_str();
  e->add_flag("--no-unk", ev.no_unk);

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  c->add_option("--hidden", gc.dims.hidden)->capture_default_str();
  c->add_option("--embed", gc.dims.embed)->capture_default_str();
  c->add_option("--maxout", gc.dims.maxout)->capture_default_str();
  c->add_option("--align", gc.dims.align)->capture_default_str();
  c->add_option("--vocab", gc.vocab)->capture_default_str();
  c->add_option("--seed", gc.seed)->capture_default_str();
  c->add_option("--inject-fault", gc.inject_fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& pe) {
    err << "error: " << pe.what() << '\n';
    return usage;
  }

  try {
    if (*g) return cmd_gen_data(gen, out);
    if (*t) return cmd_train(tr, out, err);
    if (*l) return cmd_translate(tl, err);
    if (*n) return cmd_align(al, out);
    if (*e) return cmd_evaluate(ev, out);
    if (*c) return cmd_gradcheck(gc, out);
  } catch (const Error& ex) {
    err << "error: " << ex.what() << '\n';
    return static_cast<int>(ex.kind());
  } catch (const std::invalid_argument& ex) {
    err << "error: " << ex.what() << '\n';
    return usage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return data;
  }
  return usage;
}

}  // namespace rnnsearch::cli

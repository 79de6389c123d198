#pragma once

// Command-line front end. Every subcommand reads and writes artifacts in the
// configured output directory, so stages can be run one at a time or all at
// once with run-all.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kaft/config.hpp"
#include "kaft/pipeline.hpp"
#include "kaft/remote_backend.hpp"
#include "kaft/synthetic.hpp"

namespace kaft::cli {

// Process exit codes, one per error family.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kConfig = 3,
  kDataset = 4,
  kTemplate = 5,
  kBackend = 6,
  kConstruction = 7,
  kTraining = 8,
};

struct Overrides {
  std::string config = "demo";
  std::optional<std::string> out, input, eval_input, templates, backend, endpoint, model, cache_dir;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha, beta_del, gamma, dpo_beta;
  std::optional<std::size_t> workers;
};

inline CliConfig effective_config(const Overrides& o) {
  CliConfig c = load_config(o.config);
  if (o.out) c.output_dir = *o.out;
  if (o.input) c.input = *o.input;
  if (o.eval_input) c.eval_input = *o.eval_input;
  if (o.templates) c.templates_dir = *o.templates;
  if (o.seed) c.pipeline.seed = *o.seed;
  if (o.alpha) c.pipeline.filter_fraction = *o.alpha;
  if (o.beta_del) c.pipeline.delete_fraction = *o.beta_del;
  if (o.gamma) c.pipeline.loss.sft_weight = *o.gamma;
  if (o.dpo_beta) c.pipeline.loss.dpo_beta = *o.dpo_beta;
  if (o.workers) c.pipeline.workers = *o.workers;
  if (o.backend) c.backend.mode = *o.backend == "remote" ? BackendMode::remote : BackendMode::mock;
  if (o.endpoint) c.backend.endpoint = *o.endpoint;
  if (o.model) c.backend.model_name = *o.model;
  if (o.cache_dir) c.backend.cache_dir = *o.cache_dir;
  validate(c);
  return c;
}

namespace detail {

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, int code, const std::string& what)
      : std::runtime_error(what), stage_(std::move(stage)), code_(code) {}
  const std::string& stage() const { return stage_; }
  int code() const { return code_; }

 private:
  std::string stage_;
  int code_;
};

inline int code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfig;
  if (dynamic_cast<const DatasetError*>(&e)) return kDataset;
  if (dynamic_cast<const TemplateError*>(&e)) return kTemplate;
  if (dynamic_cast<const BackendError*>(&e)) return kBackend;
  if (dynamic_cast<const ConstructionError*>(&e)) return kConstruction;
  if (dynamic_cast<const TrainingError*>(&e)) return kTraining;
  return kFailure;
}

template <typename F>
auto tagged(const std::string& stage, F&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, code_for(e), e.what());
  }
}

inline Dataset load_base(const CliConfig& c) {
  if (c.input) return load_dataset(*c.input, DatasetKind::sft);
  return synthetic::generate(*c.synthetic);
}

inline std::unique_ptr<RewriteBackend> open_backend(const CliConfig& c) {
  auto b = make_backend(c.backend);
  if (c.templates_dir) b->set_templates(TemplateSet::load_dir(*c.templates_dir));
  return b;
}

inline void report_backend(const RewriteBackend& b, std::ostream& out) {
  const auto s = b.stats();
  out << "backend: " << s.calls << " calls, " << s.network_requests << " requests, " << s.cache_hits
      << " cache hits\n";
}

inline void report_skips(const std::vector<ConstructionSkip>& skips, std::ostream& out) {
  for (const auto& s : skips) out << "skipped " << s.source_id << ": " << s.reason << "\n";
}

inline LMParameters load_checkpoint(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw DatasetError("missing checkpoint " + p.string());
  return checkpoint::load(p);
}

inline std::string losses_line(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + format_fixed(x, 4);
  return s;
}

}  // namespace detail

// Stage runners. Each takes the effective config and writes into output_dir.

inline void cmd_extract(const CliConfig& c, std::ostream& out) {
  const auto base = detail::tagged("extract", [&] { return detail::load_base(c); });
  auto backend = detail::tagged("extract", [&] { return detail::open_backend(c); });
  const auto r = detail::tagged("extract", [&] { return extract_all(*backend, base, c.pipeline.workers); });
  std::filesystem::create_directories(c.output_dir);
  save_fact_sets(r.facts, c.output_dir / artifacts::kFacts);
  detail::report_skips(r.skipped, out);
  out << "extracted facts for " << r.facts.size() << " of " << base.size() << " records -> "
      << (c.output_dir / artifacts::kFacts).string() << "\n";
  detail::report_backend(*backend, out);
}

inline void cmd_score(const CliConfig& c, std::ostream& out) {
  const auto base = detail::tagged("score", [&] { return detail::load_base(c); });
  const auto facts = detail::tagged("score", [&] { return load_fact_sets(c.output_dir / artifacts::kFacts); });
  const auto scorer = detail::tagged(
      "score", [&] { return train_scoring_model(initial_model(c.pipeline), base, c.pipeline); });
  const auto scored = detail::tagged("score", [&] { return score_all(scorer.params, base, facts); });
  checkpoint::save(scorer.params, c.output_dir / artifacts::kScoringModel);
  save_scored_fact_sets(scored, c.output_dir / artifacts::kScores);
  out << "scoring model losses: " << detail::losses_line(scorer.epoch_losses) << "\n";
  out << "scored " << scored.size() << " fact sets -> " << (c.output_dir / artifacts::kScores).string() << "\n";
}

inline void cmd_augment(const CliConfig& c, std::ostream& out) {
  const auto base = detail::tagged("augment", [&] { return detail::load_base(c); });
  const auto scored =
      detail::tagged("augment", [&] { return load_scored_fact_sets(c.output_dir / artifacts::kScores); });
  auto backend = detail::tagged("augment", [&] { return detail::open_backend(c); });
  const auto r = detail::tagged("augment", [&] {
    return build_augmentation_dataset(*backend, base, scored, c.pipeline.filter_fraction, c.pipeline.workers);
  });
  save_dataset(r.d_ka, c.output_dir / artifacts::kAugmented);
  detail::report_skips(r.skipped, out);
  out << "D_ka: " << r.d_ka.size() << " pairs (" << r.fine_grained << " fine-grained) -> "
      << (c.output_dir / artifacts::kAugmented).string() << "\n";
  detail::report_backend(*backend, out);
}

inline void cmd_compare(const CliConfig& c, std::ostream& out) {
  const auto base = detail::tagged("compare", [&] { return detail::load_base(c); });
  const auto facts = detail::tagged("compare", [&] { return load_fact_sets(c.output_dir / artifacts::kFacts); });
  auto backend = detail::tagged("compare", [&] { return detail::open_backend(c); });
  const auto sets = detail::tagged("compare", [&] {
    return build_comparison_sets(*backend, comparison_sources(base, facts), c.pipeline.knowledge(),
                                 c.pipeline.workers);
  });
  Json info{{"config", to_json(c)}, {"seed", c.pipeline.seed}, {"delete_fraction", c.pipeline.delete_fraction}};
  write_comparison_sets(sets, c.output_dir, info);
  detail::report_skips(sets.skipped, out);
  out << "D_kcc " << sets.completeness.size() << ", D_kfc " << sets.factuality.size() << ", D_klc "
      << sets.logicality.size() << " -> " << (c.output_dir / artifacts::kComparison).string() << "\n";
  detail::report_backend(*backend, out);
}

inline void cmd_train_sft(const CliConfig& c, std::ostream& out) {
  const auto d_ka = detail::tagged(
      "train-sft", [&] { return load_dataset(c.output_dir / artifacts::kAugmented, DatasetKind::sft); });
  const auto r = detail::tagged("train-sft", [&] { return train_stage1(initial_model(c.pipeline), d_ka, c.pipeline); });
  checkpoint::save(r.params, c.output_dir / artifacts::kStage1Model);
  out << "stage 1 losses: " << detail::losses_line(r.epoch_losses) << "\n";
  out << "pi_ka -> " << (c.output_dir / artifacts::kStage1Model).string() << " sha256 " << checkpoint::digest(r.params)
      << "\n";
}

inline void cmd_train_dpo(const CliConfig& c, std::ostream& out) {
  const auto pi_ka = detail::tagged("train-dpo", [&] { return detail::load_checkpoint(c.output_dir / artifacts::kStage1Model); });
  const auto d_kc = detail::tagged(
      "train-dpo", [&] { return load_dataset(c.output_dir / artifacts::kComparison, DatasetKind::comparison); });
  const auto r = detail::tagged("train-dpo", [&] { return train_stage2(pi_ka, d_kc, c.pipeline); });
  checkpoint::save(r.params, c.output_dir / artifacts::kStage2Model);
  out << "stage 2 losses: " << detail::losses_line(r.epoch_losses) << "\n";
  out << "dpo loss " << format_fixed(r.initial_dpo_loss, 6) << " -> " << format_fixed(r.final_dpo_loss, 6)
      << ", mean margin " << format_fixed(r.initial_mean_margin, 6) << " -> " << format_fixed(r.final_mean_margin, 6)
      << "\n";
  out << "pi_kc -> " << (c.output_dir / artifacts::kStage2Model).string() << "\n";
}

inline void print_eval(const ModelComparison& mc, std::ostream& out) {
  out << format_wtl_header() << "\n";
  for (const auto& r : mc.wtl) out << format_wtl_row(r) << "\n";
  out << "\n" << format_facts_header() << "\n";
  out << format_facts_row("pi_ka", mc.baseline_facts) << "\n";
  out << format_facts_row("pi_kc", mc.system_facts) << "\n";
}

inline void cmd_evaluate(const CliConfig& c, const std::vector<Aspect>& aspects, std::ostream& out) {
  const auto eval_set = detail::tagged("evaluate", [&] {
    return c.eval_input ? load_dataset(*c.eval_input, DatasetKind::sft) : detail::load_base(c);
  });
  const auto pi_ka = detail::tagged("evaluate", [&] { return detail::load_checkpoint(c.output_dir / artifacts::kStage1Model); });
  const auto pi_kc = detail::tagged("evaluate", [&] { return detail::load_checkpoint(c.output_dir / artifacts::kStage2Model); });
  auto backend = detail::tagged("evaluate", [&] { return detail::open_backend(c); });
  const auto mc = detail::tagged("evaluate", [&] {
    return evaluate_models(*backend, eval_set, pi_kc, pi_ka, aspects, c.pipeline.max_answer_tokens,
                           c.pipeline.workers);
  });
  Json j = to_json(mc);
  j["system"] = "pi_kc";
  j["baseline"] = "pi_ka";
  kaft::detail::write_json(c.output_dir / artifacts::kEval, j);
  print_eval(mc, out);
  detail::report_backend(*backend, out);
}

inline void cmd_run_all(const CliConfig& c, const std::vector<Aspect>& aspects, std::ostream& out) {
  const auto base = detail::tagged("run-all", [&] { return detail::load_base(c); });
  auto backend = detail::tagged("run-all", [&] { return detail::open_backend(c); });
  RunManifest m;
  try {
    m = run_full(c.pipeline, base, c.output_dir, *backend, to_json(c), aspects);
  } catch (const std::exception& e) {
    // run_full prefixes "stage <name>: "; recover the name for the tag.
    std::string what = e.what(), stage = "run-all";
    if (what.rfind("stage ", 0) == 0) stage = what.substr(6, what.find(':') - 6);
    throw detail::StageError(stage, detail::code_for(e), what);
  }
  const auto& t = m.json["training"];
  out << "stage 1 losses: " << detail::losses_line(t["stage1"]["epoch_losses"].get<std::vector<double>>()) << "\n";
  out << "stage 2 losses: " << detail::losses_line(t["stage2"]["epoch_losses"].get<std::vector<double>>()) << "\n";
  out << "skipped records: " << m.json["skipped"].size() << "\n";
  out << "manifest -> " << (c.output_dir / artifacts::kManifest).string() << "\n";
  detail::report_backend(*backend, out);
}

inline void cmd_generate_corpus(const synthetic::GeneratorOptions& g, const std::filesystem::path& path,
                                std::ostream& out) {
  const auto ds = detail::tagged("generate-corpus", [&] { return synthetic::generate(g); });
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_dataset(ds, path);
  out << "wrote " << ds.size() << " records -> " << path.string() << "\n";
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"knowledge-aware fine-tuning pipeline"};
  app.fallthrough();
  app.require_subcommand(1);
  Overrides o;
  app.add_option("--config", o.config, "config JSON file, or 'demo' for the bundled synthetic preset");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--input", o.input, "SFT dataset (JSONL)");
  app.add_option("--eval-input", o.eval_input, "evaluation questions (JSONL), defaults to --input");
  app.add_option("--templates", o.templates, "directory of prompt template files");
  app.add_option("--seed", o.seed, "run seed");
  app.add_option("--alpha", o.alpha, "fraction of facts kept as difficult");
  app.add_option("--beta-del", o.beta_del, "fraction of facts deleted for completeness pairs");
  app.add_option("--gamma", o.gamma, "SFT weight in the stage 2 loss");
  app.add_option("--dpo-beta", o.dpo_beta, "DPO temperature");
  app.add_option("--workers", o.workers, "parallel backend workers");
  app.add_option("--backend", o.backend, "rewrite backend")->check(CLI::IsMember({"mock", "remote"}));
  app.add_option("--endpoint", o.endpoint, "remote chat-completions endpoint");
  app.add_option("--model", o.model, "remote model name");
  app.add_option("--cache-dir", o.cache_dir, "remote response cache directory");

  auto* extract = app.add_subcommand("extract", "split answers into atomic facts");
  auto* score = app.add_subcommand("score", "train the scoring model and score every fact");
  auto* augment = app.add_subcommand("augment", "build the knowledge-augmented dataset D_ka");
  auto* compare = app.add_subcommand("compare", "build the knowledge comparison sets");
  auto* train_sft = app.add_subcommand("train-sft", "stage 1: SFT on D_ka");
  auto* train_dpo = app.add_subcommand("train-dpo", "stage 2: DPO on D_kc");
  auto* evaluate = app.add_subcommand("evaluate", "compare pi_kc against pi_ka");
  auto* run_all = app.add_subcommand("run-all", "run every stage and write a manifest");
  auto* gen = app.add_subcommand("generate-corpus", "write a synthetic QA corpus");

  std::vector<std::string> aspect_names;
  for (auto* sc : {evaluate, run_all}) {
    sc->add_option("--aspect", aspect_names, "aspect(s) to judge")
        ->check(CLI::IsMember({"completeness", "factuality", "logicality"}));
  }
  synthetic::GeneratorOptions gopt;
  std::string gen_path = "corpus.jsonl";
  gen->add_option("--count", gopt.count, "number of records");
  gen->add_option("--corpus-seed", gopt.seed, "generator seed");
  gen->add_option("--prefix", gopt.id_prefix, "record id prefix");
  gen->add_option("--output", gen_path, "output JSONL path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kOk : kUsage;
  }

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (gen->parsed()) {
      cmd_generate_corpus(gopt, gen_path, out);
      return kOk;
    }
    const CliConfig c = detail::tagged("config", [&] { return effective_config(o); });
    std::vector<Aspect> aspects;
    for (const auto& n : aspect_names) aspects.push_back(*parse_aspect(n));
    if (aspects.empty()) aspects.assign(std::begin(kAllAspects), std::end(kAllAspects));

    if (extract->parsed()) cmd_extract(c, out);
    if (score->parsed()) cmd_score(c, out);
    if (augment->parsed()) cmd_augment(c, out);
    if (compare->parsed()) cmd_compare(c, out);
    if (train_sft->parsed()) cmd_train_sft(c, out);
    if (train_dpo->parsed()) cmd_train_dpo(c, out);
    if (evaluate->parsed()) cmd_evaluate(c, aspects, out);
    if (run_all->parsed()) cmd_run_all(c, aspects, out);
  } catch (const detail::StageError& e) {
    err << "error [" << e.stage() << "]: " << e.what() << "\n";
    return e.code();
  } catch (const std::exception& e) {
    err << "error [" << stage << "]: " << e.what() << "\n";
    return detail::code_for(e);
  }
  return kOk;
}

}  // namespace kaft::cli

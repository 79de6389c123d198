#pragma once

// The two-stage procedure: fact extraction, perplexity scoring with a vanilla
// SFT model, difficult-fact filtering, fine-grained augmentation, stage-1 SFT
// on the augmented set, comparison-set construction, and stage-2 preference
// training against the frozen stage-1 model.

#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "kaft/corpus.hpp"
#include "kaft/eval.hpp"
#include "kaft/knowledge_ops.hpp"
#include "kaft/lm_core.hpp"
#include "kaft/losses.hpp"

namespace kaft {

struct TrainStageConfig {
  double learning_rate = 5e-5;
  int epochs = 3;
  std::size_t batch_size = 32;
};

struct PipelineConfig {
  double filter_fraction = 0.5;  // alpha
  double delete_fraction = 0.5;
  LossConfig loss;
  TrainStageConfig stage1{5e-5, 3, 32};
  TrainStageConfig stage2{1e-5, 1, 16};
  // Multiplier on both learning rates. The defaults above are the LLM values;
  // plain SGD on the tabular model needs larger steps to move in few epochs.
  double lr_scale = 100.0;
  std::size_t context_order = 1;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t max_answer_tokens = 200;  // greedy decoding cap for evaluation

  KnowledgeOpConfig knowledge() const { return KnowledgeOpConfig{delete_fraction, seed}; }

  // Every violation, not just the first.
  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (!(filter_fraction > 0.0 && filter_fraction <= 1.0)) v.push_back("filter_fraction must be in (0, 1]");
    if (!(delete_fraction > 0.0 && delete_fraction < 1.0)) v.push_back("delete_fraction must be in (0, 1)");
    if (!(loss.dpo_beta > 0.0)) v.push_back("dpo_beta must be > 0");
    if (!(loss.sft_weight >= 0.0)) v.push_back("sft_weight must be >= 0");
    for (const auto& [name, s] : {std::pair{"stage1", stage1}, std::pair{"stage2", stage2}}) {
      if (!(s.learning_rate > 0.0)) v.push_back(std::string(name) + ".learning_rate must be > 0");
      if (s.epochs < 0) v.push_back(std::string(name) + ".epochs must be >= 0");
      if (s.batch_size == 0) v.push_back(std::string(name) + ".batch_size must be > 0");
    }
    if (!(lr_scale > 0.0)) v.push_back("lr_scale must be > 0");
    if (context_order < 1 || context_order > 7) v.push_back("context_order must be in [1, 7]");
    if (workers == 0) v.push_back("workers must be > 0");
    if (max_answer_tokens == 0) v.push_back("max_answer_tokens must be > 0");
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (!v.empty()) throw ConfigError(detail::join(v, "; "));
  }
};

inline Json to_json(const TrainStageConfig& s) {
  return Json{{"learning_rate", s.learning_rate}, {"epochs", s.epochs}, {"batch_size", s.batch_size}};
}

inline Json to_json(const PipelineConfig& c) {
  return Json{{"filter_fraction", c.filter_fraction},
              {"delete_fraction", c.delete_fraction},
              {"dpo_beta", c.loss.dpo_beta},
              {"sft_weight", c.loss.sft_weight},
              {"stage1", to_json(c.stage1)},
              {"stage2", to_json(c.stage2)},
              {"lr_scale", c.lr_scale},
              {"context_order", c.context_order},
              {"seed", c.seed},
              {"workers", c.workers},
              {"max_answer_tokens", c.max_answer_tokens}};
}

// ---------------------------------------------------------------------------
// Extraction and difficulty scoring

struct ExtractionResult {
  std::vector<FactSet> facts;  // in dataset order, failures omitted
  std::vector<ConstructionSkip> skipped;
};

inline ExtractionResult extract_all(RewriteBackend& backend, const Dataset& base, std::size_t workers = 1) {
  std::vector<std::optional<FactSet>> slots(base.pairs.size());
  std::vector<std::string> errors(base.pairs.size());
  detail::parallel_for(base.pairs.size(), workers, [&](std::size_t i) {
    try {
      slots[i] = extract_facts(backend, base.pairs[i]);
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  ExtractionResult r;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i]) {
      r.facts.push_back(std::move(*slots[i]));
    } else {
      r.skipped.push_back({base.pairs[i].id, "extract: " + errors[i]});
    }
  }
  return r;
}

inline SftExample make_sft_example(const Vocabulary& vocab, const QAPair& p) {
  return SftExample{tokenize(vocab, p.question), tokenize(vocab, p.answer)};
}

inline PreferenceExample make_preference_example(const Vocabulary& vocab, const ComparisonPair& c) {
  return PreferenceExample{tokenize(vocab, c.question), tokenize(vocab, c.preferred),
                           tokenize(vocab, c.dispreferred)};
}

// Perplexity of every fact conditioned on the question.
inline ScoredFactSet score_facts(const LMParameters& params, const QAPair& pair, const FactSet& fs) {
  const TokenSequence prompt = tokenize(params.vocab, pair.question);
  ScoredFactSet out{fs.source_id, {}};
  for (const auto& f : fs.facts) {
    out.entries.push_back({f, perplexity(params, prompt, tokenize(params.vocab, f))});
  }
  return out;
}

inline std::size_t difficult_count(std::size_t n, double fraction) {
  if (n == 0) return 0;
  // The epsilon keeps products like 0.3 * 10 = 3.0000000000000004 from rounding up.
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

// The ceil(fraction * n) highest-perplexity facts; ties go to the lower index.
// The result keeps the original fact order.
inline FactSet select_difficult(const ScoredFactSet& scored, double fraction) {
  const std::size_t n = scored.entries.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scored.entries[a].ppl > scored.entries[b].ppl; });
  order.resize(difficult_count(n, fraction));
  std::sort(order.begin(), order.end());
  FactSet out{scored.source_id, {}};
  for (std::size_t i : order) out.facts.push_back(scored.entries[i].fact);
  return out;
}

inline FactSet score_and_filter(const LMParameters& params, const QAPair& pair, const FactSet& fs, double fraction) {
  return select_difficult(score_facts(params, pair, fs), fraction);
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  LMParameters params;
  // Full-dataset loss before training (index 0) and after each epoch.
  std::vector<double> epoch_losses;
};

struct Stage2Result {
  LMParameters params;
  std::vector<double> epoch_losses;  // combined loss, index 0 = initial
  double initial_dpo_loss = 0.0;
  double final_dpo_loss = 0.0;
  double initial_mean_margin = 0.0;
  double final_mean_margin = 0.0;
  double initial_mean_preference = 0.5;  // mean sigmoid(beta * margin)
  double final_mean_preference = 0.5;
};

namespace detail {

inline void sgd_step(LMParameters& p, const LogitTable& grad, double lr) {
  for (std::size_t v = 0; v < grad.fallback.size(); ++v) p.table.fallback[v] -= lr * grad.fallback[v];
  for (const auto& [key, g] : grad.rows) {
    auto& row = p.table.rows.at(key);
    for (std::size_t v = 0; v < g.size(); ++v) row[v] -= lr * g[v];
  }
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed, "epoch:" + std::to_string(epoch));
  rng.shuffle(idx);
  return idx;
}

template <typename T>
std::vector<T> gather(const std::vector<T>& all, const std::vector<std::size_t>& idx, std::size_t begin,
                      std::size_t end) {
  std::vector<T> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) out.push_back(all[idx[i]]);
  return out;
}

inline void check_finite(double loss, const LMParameters& p, const std::string& where) {
  if (!std::isfinite(loss)) throw TrainingError(where + ": loss became non-finite (" + std::to_string(loss) + ")");
  if (!p.table.all_finite()) throw TrainingError(where + ": parameters became non-finite");
}

inline double mean_preference(const std::vector<double>& margins, double beta) {
  double s = 0.0;
  for (double m : margins) s += sigmoid(beta * m);
  return margins.empty() ? 0.5 : s / static_cast<double>(margins.size());
}

}  // namespace detail

// Minibatch SGD on the SFT loss. Batch order is reshuffled every epoch from
// (seed, epoch).
inline TrainResult train_sft(LMParameters init, const std::vector<SftExample>& data, const TrainStageConfig& cfg,
                             double lr_scale, std::uint64_t seed) {
  TrainResult r{std::move(init), {}};
  if (data.empty() || cfg.epochs == 0) {
    if (!data.empty()) r.epoch_losses.push_back(sft_loss(r.params, data).value);
    return r;
  }
  for (const auto& ex : data) materialize_contexts(r.params, ex.prompt, ex.target);
  r.epoch_losses.push_back(sft_loss(r.params, data).value);
  const double lr = cfg.learning_rate * lr_scale;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto idx = detail::epoch_order(data.size(), seed, epoch);
    for (std::size_t b = 0; b < data.size(); b += cfg.batch_size) {
      const auto batch = detail::gather(data, idx, b, std::min(data.size(), b + cfg.batch_size));
      const LossResult loss = sft_loss(r.params, batch);
      detail::check_finite(loss.value, r.params, "sft epoch " + std::to_string(epoch + 1));
      detail::sgd_step(r.params, loss.gradient, lr);
    }
    const double epoch_loss = sft_loss(r.params, data).value;
    detail::check_finite(epoch_loss, r.params, "sft epoch " + std::to_string(epoch + 1));
    r.epoch_losses.push_back(epoch_loss);
  }
  return r;
}

inline std::vector<SftExample> sft_examples(const Vocabulary& vocab, const Dataset& ds) {
  if (ds.kind != DatasetKind::sft) throw Error("expected an sft dataset");
  std::vector<SftExample> out;
  out.reserve(ds.pairs.size());
  for (const auto& p : ds.pairs) out.push_back(make_sft_example(vocab, p));
  return out;
}

inline std::vector<PreferenceExample> preference_examples(const Vocabulary& vocab, const Dataset& ds) {
  if (ds.kind != DatasetKind::comparison) throw Error("expected a comparison dataset");
  std::vector<PreferenceExample> out;
  out.reserve(ds.comparisons.size());
  for (const auto& c : ds.comparisons) out.push_back(make_preference_example(vocab, c));
  return out;
}

inline LMParameters initial_model(const PipelineConfig& cfg) {
  return LMParameters::uniform(Vocabulary::byte_level(), cfg.context_order);
}

// Vanilla SFT on the original data; used only to score fact difficulty.
inline TrainResult train_scoring_model(const LMParameters& init, const Dataset& base, const PipelineConfig& cfg) {
  return train_sft(init, sft_examples(init.vocab, base), cfg.stage1, cfg.lr_scale, cfg.seed ^ 0x5f5fULL);
}

inline TrainResult train_stage1(const LMParameters& init, const Dataset& d_ka, const PipelineConfig& cfg) {
  return train_sft(init, sft_examples(init.vocab, d_ka), cfg.stage1, cfg.lr_scale, cfg.seed);
}

// Preference training from pi_ka against a frozen snapshot of pi_ka.
inline Stage2Result train_stage2(const LMParameters& pi_ka, const Dataset& d_kc, const PipelineConfig& cfg) {
  const FrozenModel reference = snapshot(pi_ka);
  const auto data = preference_examples(pi_ka.vocab, d_kc);
  Stage2Result r{pi_ka, {}};
  if (data.empty()) return r;
  for (const auto& ex : data) {
    materialize_contexts(r.params, ex.prompt, ex.chosen);
    materialize_contexts(r.params, ex.prompt, ex.rejected);
  }
  auto measure = [&](double& dpo, double& margin, double& pref) {
    const DpoResult d = dpo_loss(r.params, reference, data, cfg.loss);
    dpo = d.value;
    margin = d.mean_margin();
    pref = detail::mean_preference(d.margins, cfg.loss.dpo_beta);
    return combined_kc_loss(r.params, reference, data, cfg.loss).value;
  };
  r.epoch_losses.push_back(measure(r.initial_dpo_loss, r.initial_mean_margin, r.initial_mean_preference));
  r.final_dpo_loss = r.initial_dpo_loss;
  r.final_mean_margin = r.initial_mean_margin;
  r.final_mean_preference = r.initial_mean_preference;
  const double lr = cfg.stage2.learning_rate * cfg.lr_scale;
  for (int epoch = 0; epoch < cfg.stage2.epochs; ++epoch) {
    const auto idx = detail::epoch_order(data.size(), cfg.seed ^ 0xd90ULL, epoch);
    for (std::size_t b = 0; b < data.size(); b += cfg.stage2.batch_size) {
      const auto batch = detail::gather(data, idx, b, std::min(data.size(), b + cfg.stage2.batch_size));
      const DpoResult loss = combined_kc_loss(r.params, reference, batch, cfg.loss);
      detail::check_finite(loss.value, r.params, "dpo epoch " + std::to_string(epoch + 1));
      detail::sgd_step(r.params, loss.gradient, lr);
    }
    const double epoch_loss = measure(r.final_dpo_loss, r.final_mean_margin, r.final_mean_preference);
    detail::check_finite(epoch_loss, r.params, "dpo epoch " + std::to_string(epoch + 1));
    r.epoch_losses.push_back(epoch_loss);
  }
  return r;
}

// Per-pair log P(preferred) - log P(dispreferred) under `params`.
inline std::vector<double> preference_gaps(const LMParameters& params, const Dataset& d_kc) {
  std::vector<double> out;
  for (const auto& ex : preference_examples(params.vocab, d_kc)) {
    out.push_back(cond_logprob(params, ex.prompt, ex.chosen) - cond_logprob(params, ex.prompt, ex.rejected));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentationResult {
  Dataset d_ka = Dataset::sft();
  std::size_t fine_grained = 0;
  std::vector<ConstructionSkip> skipped;
};

// D_ka = base followed by one fine-grained pair per source whose rewrite
// succeeded. Failed rewrites are recorded and skipped.
inline AugmentationResult build_augmentation_dataset(RewriteBackend& backend, const Dataset& base,
                                                     const std::vector<ScoredFactSet>& scored, double fraction,
                                                     std::size_t workers = 1) {
  if (base.kind != DatasetKind::sft) throw Error("augmentation needs an sft dataset");
  std::map<std::string, const ScoredFactSet*> by_id;
  for (const auto& s : scored) by_id[s.source_id] = &s;
  std::vector<std::optional<QAPair>> rewritten(base.pairs.size());
  std::vector<std::string> errors(base.pairs.size());
  detail::parallel_for(base.pairs.size(), workers, [&](std::size_t i) {
    const auto& pair = base.pairs[i];
    auto it = by_id.find(pair.id);
    if (it == by_id.end()) {
      errors[i] = "no scored facts";
      return;
    }
    try {
      rewritten[i] = rewrite_fine_grained(backend, pair, select_difficult(*it->second, fraction));
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  AugmentationResult r;
  Dataset fine = Dataset::sft();
  for (std::size_t i = 0; i < rewritten.size(); ++i) {
    if (rewritten[i]) {
      fine.pairs.push_back(std::move(*rewritten[i]));
    } else {
      r.skipped.push_back({base.pairs[i].id, "augment: " + errors[i]});
    }
  }
  r.fine_grained = fine.pairs.size();
  r.d_ka = union_datasets({&base, &fine});
  return r;
}

inline std::vector<ScoredFactSet> score_all(const LMParameters& params, const Dataset& base,
                                            const std::vector<FactSet>& facts) {
  std::map<std::string, const QAPair*> by_id;
  for (const auto& p : base.pairs) by_id[p.id] = &p;
  std::vector<ScoredFactSet> out;
  for (const auto& fs : facts) {
    auto it = by_id.find(fs.source_id);
    if (it == by_id.end()) throw ConstructionError(fs.source_id, "fact set has no matching record");
    out.push_back(score_facts(params, *it->second, fs));
  }
  return out;
}

// Convenience form: extracts and scores with `params`, then augments.
inline AugmentationResult build_augmentation_dataset(RewriteBackend& backend, const Dataset& base,
                                                     const LMParameters& params, double fraction,
                                                     std::size_t workers = 1) {
  ExtractionResult ex = extract_all(backend, base, workers);
  AugmentationResult r =
      build_augmentation_dataset(backend, base, score_all(params, base, ex.facts), fraction, workers);
  r.skipped.insert(r.skipped.begin(), ex.skipped.begin(), ex.skipped.end());
  return r;
}

inline std::vector<ComparisonSource> comparison_sources(const Dataset& base, const std::vector<FactSet>& facts) {
  std::map<std::string, const QAPair*> by_id;
  for (const auto& p : base.pairs) by_id[p.id] = &p;
  std::vector<ComparisonSource> out;
  for (const auto& fs : facts) {
    auto it = by_id.find(fs.source_id);
    if (it == by_id.end()) throw ConstructionError(fs.source_id, "fact set has no matching record");
    out.push_back({*it->second, fs});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation of a system model against a baseline model

struct ModelComparison {
  std::vector<WTLReport> wtl;  // one per aspect, system vs baseline
  FactsSummary system_facts;
  FactsSummary baseline_facts;
  std::size_t questions = 0;
};

inline ModelComparison evaluate_models(RewriteBackend& judge, const Dataset& eval_set, const LMParameters& system,
                                       const LMParameters& baseline, const std::vector<Aspect>& aspects,
                                       std::size_t max_tokens, std::size_t workers = 1) {
  struct Item {
    std::string question, reference, sys, base;
  };
  std::vector<Item> items;
  for (const auto& p : eval_set.pairs) {
    const auto prompt = tokenize(system.vocab, p.question);
    items.push_back({p.question, p.reference.value_or(p.answer), generate_greedy(system, prompt, max_tokens),
                     generate_greedy(baseline, prompt, max_tokens)});
  }
  ModelComparison mc;
  mc.questions = items.size();
  std::vector<FineGrainedReport> sys_reports(items.size()), base_reports(items.size());
  std::vector<std::vector<Outcome>> outcomes(items.size(), std::vector<Outcome>(aspects.size(), Outcome::Tie));
  detail::parallel_for(items.size(), workers, [&](std::size_t i) {
    const auto& it = items[i];
    sys_reports[i] = fine_grained_facts_eval(judge, it.sys, it.reference);
    base_reports[i] = fine_grained_facts_eval(judge, it.base, it.reference);
    for (std::size_t a = 0; a < aspects.size(); ++a) {
      // An empty generation loses to a non-empty one; two empties tie.
      const bool se = detail::trim(it.sys).empty(), be = detail::trim(it.base).empty();
      if (se || be) {
        outcomes[i][a] = se && be ? Outcome::Tie : (se ? Outcome::Lose : Outcome::Win);
        continue;
      }
      outcomes[i][a] = aggregate_wtl(pairwise_judge(judge, it.question, it.reference, it.sys, it.base, aspects[a]));
    }
  });
  for (std::size_t a = 0; a < aspects.size(); ++a) {
    std::vector<Outcome> col;
    for (const auto& row : outcomes) col.push_back(row[a]);
    mc.wtl.push_back(tally_outcomes(aspects[a], col));
  }
  mc.system_facts = summarize(sys_reports);
  mc.baseline_facts = summarize(base_reports);
  return mc;
}

inline Json to_json(const ModelComparison& mc) {
  Json wtl = Json::array();
  for (const auto& r : mc.wtl) wtl.push_back(to_json(r));
  return Json{{"questions", mc.questions},
              {"wtl", wtl},
              {"facts", Json{{"system", to_json(mc.system_facts)}, {"baseline", to_json(mc.baseline_facts)}}}};
}

// ---------------------------------------------------------------------------
// End-to-end run

struct RunManifest {
  Json json;
};

namespace detail {

inline Json skips_json(const std::vector<ConstructionSkip>& skips) {
  Json out = Json::array();
  for (const auto& s : skips) out.push_back(Json{{"source_id", s.source_id}, {"reason", s.reason}});
  return out;
}

inline Json artifact(const std::string& file, std::size_t count) {
  return Json{{"path", file}, {"count", count}};
}

inline void write_json(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace detail

// File names written into the output directory. Manifest paths are relative to
// that directory.
namespace artifacts {
inline constexpr const char* kFacts = "facts.jsonl";
inline constexpr const char* kScores = "scores.jsonl";
inline constexpr const char* kAugmented = "d_ka.jsonl";
inline constexpr const char* kCompleteness = "d_kcc.jsonl";
inline constexpr const char* kFactuality = "d_kfc.jsonl";
inline constexpr const char* kLogicality = "d_klc.jsonl";
inline constexpr const char* kComparison = "d_kc.jsonl";
inline constexpr const char* kConstruction = "construction_manifest.json";
inline constexpr const char* kScoringModel = "pi_sft.ckpt";
inline constexpr const char* kStage1Model = "pi_ka.ckpt";
inline constexpr const char* kStage2Model = "pi_kc.ckpt";
inline constexpr const char* kEval = "eval.json";
inline constexpr const char* kManifest = "manifest.json";
}  // namespace artifacts

inline Json checkpoint_entry(const std::string& file, const LMParameters& p) {
  return Json{{"path", file}, {"sha256", checkpoint::digest(p)}};
}

// Writes the comparison sets, their union, and the construction manifest.
inline Json write_comparison_sets(const ComparisonSets& sets, const std::filesystem::path& out_dir,
                                  const Json& construction_info) {
  const Dataset combined = sets.combined();
  save_dataset(sets.completeness, out_dir / artifacts::kCompleteness);
  save_dataset(sets.factuality, out_dir / artifacts::kFactuality);
  save_dataset(sets.logicality, out_dir / artifacts::kLogicality);
  save_dataset(combined, out_dir / artifacts::kComparison);
  Json m = construction_info;
  m["counts"] = Json{{"completeness", sets.completeness.size()},
                     {"factuality", sets.factuality.size()},
                     {"logicality", sets.logicality.size()},
                     {"combined", combined.size()}};
  m["skipped"] = detail::skips_json(sets.skipped);
  detail::write_json(out_dir / artifacts::kConstruction, m);
  return Json{{"d_kcc", detail::artifact(artifacts::kCompleteness, sets.completeness.size())},
              {"d_kfc", detail::artifact(artifacts::kFactuality, sets.factuality.size())},
              {"d_klc", detail::artifact(artifacts::kLogicality, sets.logicality.size())},
              {"d_kc", detail::artifact(artifacts::kComparison, combined.size())}};
}

// extract -> score/filter -> augment -> stage 1 -> comparison sets -> stage 2
// -> evaluate. A stage failure throws with the stage name; per-record
// construction failures are skipped and listed in the manifest.
inline RunManifest run_full(const PipelineConfig& cfg, const Dataset& base, const std::filesystem::path& out_dir,
                            RewriteBackend& backend, const Json& echoed_config = Json(),
                            const std::vector<Aspect>& aspects = {std::begin(kAllAspects), std::end(kAllAspects)}) {
  cfg.validate();
  if (base.kind != DatasetKind::sft) throw Error("run_full needs an sft dataset");
  std::filesystem::create_directories(out_dir);
  auto stage = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const ConstructionError& e) {
      throw ConstructionError(e.source_id(), std::string("stage ") + name + ": " + e.what());
    } catch (const std::exception& e) {
      throw Error(std::string("stage ") + name + ": " + e.what());
    }
  };

  Json m;
  m["config"] = echoed_config.is_null() ? to_json(cfg) : echoed_config;
  m["datasets"]["base"] = Json{{"count", base.size()}};
  std::vector<ConstructionSkip> skipped;

  const ExtractionResult extracted = stage("extract", [&] { return extract_all(backend, base, cfg.workers); });
  save_fact_sets(extracted.facts, out_dir / artifacts::kFacts);
  skipped.insert(skipped.end(), extracted.skipped.begin(), extracted.skipped.end());
  m["datasets"]["facts"] = detail::artifact(artifacts::kFacts, extracted.facts.size());

  const LMParameters init = initial_model(cfg);
  const TrainResult scorer = stage("score", [&] { return train_scoring_model(init, base, cfg); });
  checkpoint::save(scorer.params, out_dir / artifacts::kScoringModel);
  const auto scored = stage("score", [&] { return score_all(scorer.params, base, extracted.facts); });
  save_scored_fact_sets(scored, out_dir / artifacts::kScores);
  m["datasets"]["scores"] = detail::artifact(artifacts::kScores, scored.size());

  const AugmentationResult aug = stage("augment", [&] {
    return build_augmentation_dataset(backend, base, scored, cfg.filter_fraction, cfg.workers);
  });
  save_dataset(aug.d_ka, out_dir / artifacts::kAugmented);
  skipped.insert(skipped.end(), aug.skipped.begin(), aug.skipped.end());
  m["datasets"]["d_ka"] = detail::artifact(artifacts::kAugmented, aug.d_ka.size());
  m["datasets"]["d_ka"]["fine_grained"] = aug.fine_grained;

  const TrainResult stage1 = stage("train-sft", [&] { return train_stage1(init, aug.d_ka, cfg); });
  checkpoint::save(stage1.params, out_dir / artifacts::kStage1Model);
  const std::string pi_ka_digest = checkpoint::digest(stage1.params);

  const ComparisonSets sets = stage("compare", [&] {
    return build_comparison_sets(backend, comparison_sources(base, extracted.facts), cfg.knowledge(), cfg.workers);
  });
  const Json construction{{"seed", cfg.seed}, {"delete_fraction", cfg.delete_fraction}};
  m["datasets"].update(write_comparison_sets(sets, out_dir, construction));
  m["datasets"]["construction_manifest"] = artifacts::kConstruction;
  skipped.insert(skipped.end(), sets.skipped.begin(), sets.skipped.end());
  const Dataset d_kc = sets.combined();

  const Stage2Result stage2 = stage("train-dpo", [&] { return train_stage2(stage1.params, d_kc, cfg); });
  checkpoint::save(stage2.params, out_dir / artifacts::kStage2Model);
  if (checkpoint::digest(stage1.params) != pi_ka_digest) throw Error("stage train-dpo: reference model was modified");

  const ModelComparison eval = stage("evaluate", [&] {
    return evaluate_models(backend, base, stage2.params, stage1.params, aspects, cfg.max_answer_tokens, cfg.workers);
  });
  Json eval_json = to_json(eval);
  eval_json["system"] = "pi_kc";
  eval_json["baseline"] = "pi_ka";
  detail::write_json(out_dir / artifacts::kEval, eval_json);

  m["checkpoints"] = Json{{"pi_sft", checkpoint_entry(artifacts::kScoringModel, scorer.params)},
                          {"pi_ka", checkpoint_entry(artifacts::kStage1Model, stage1.params)},
                          {"pi_kc", checkpoint_entry(artifacts::kStage2Model, stage2.params)}};
  m["training"] = Json{{"scoring_sft", Json{{"epoch_losses", scorer.epoch_losses}}},
                       {"stage1", Json{{"epoch_losses", stage1.epoch_losses}}},
                       {"stage2", Json{{"epoch_losses", stage2.epoch_losses},
                                       {"initial_dpo_loss", stage2.initial_dpo_loss},
                                       {"final_dpo_loss", stage2.final_dpo_loss},
                                       {"initial_mean_margin", stage2.initial_mean_margin},
                                       {"final_mean_margin", stage2.final_mean_margin},
                                       {"initial_mean_preference", stage2.initial_mean_preference},
                                       {"final_mean_preference", stage2.final_mean_preference}}}};
  m["evaluation"] = Json{{"path", artifacts::kEval}};
  m["skipped"] = detail::skips_json(skipped);
  detail::write_json(out_dir / artifacts::kManifest, m);
  return RunManifest{m};
}

}  // namespace kaft

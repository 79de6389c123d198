#pragma once

// Answer-level knowledge transformations: extraction into atomic facts, the
// delete / revise / shuffle / concatenate / rephrase operators, fine-grained
// question-answer rewriting, and the three comparison-set builders.

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "kaft/corpus.hpp"
#include "kaft/detail/parallel.hpp"
#include "kaft/detail/rng.hpp"
#include "kaft/llm_client.hpp"

namespace kaft {

struct KnowledgeOpConfig {
  double delete_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(delete_fraction > 0.0 && delete_fraction < 1.0)) {
      throw ConfigError("delete_fraction must be in (0, 1)");
    }
  }
};

// Thrown when extraction yields no facts; lets evaluation tell this apart from
// transport failures.
class EmptyExtraction : public BackendError {
 public:
  using BackendError::BackendError;
};

inline FactSet extract_facts(RewriteBackend& backend, const QAPair& pair) {
  if (detail::trim(pair.answer).empty()) throw EmptyExtraction(pair.id + ": answer is empty");
  const auto& tmpl = backend.templates().get(templates::kExtract);
  FactSet fs{pair.id, parse_fact_list(backend.complete(tmpl, {{"answer", pair.answer}}))};
  if (fs.facts.empty()) throw EmptyExtraction(pair.id + ": extraction produced no facts");
  return fs;
}

// Number of facts removed for a set of size n: floor(fraction * n), clamped
// so that at least one fact survives.
inline std::size_t delete_count(std::size_t n, double fraction) {
  if (n == 0) return 0;
  auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  return std::min(k, n - 1);
}

// Removes delete_count(...) facts chosen uniformly without replacement; the
// survivors keep their relative order. Randomness is a function of
// (seed, source_id) only.
inline FactSet delete_facts(const FactSet& fs, const KnowledgeOpConfig& cfg) {
  const std::size_t n = fs.facts.size();
  const std::size_t k = delete_count(n, cfg.delete_fraction);
  detail::Rng rng(cfg.seed, "delete:" + fs.source_id);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first k slots become the deleted indices.
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  std::vector<bool> drop(n, false);
  for (std::size_t i = 0; i < k; ++i) drop[idx[i]] = true;
  FactSet out{fs.source_id, {}};
  for (std::size_t i = 0; i < n; ++i) {
    if (!drop[i]) out.facts.push_back(fs.facts[i]);
  }
  return out;
}

// Uniform non-identity permutation for two or more facts (rejection sampling).
inline std::vector<std::size_t> shuffle_permutation(std::size_t n, detail::Rng& rng) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  if (n < 2) return perm;
  auto identity = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      if (perm[i] != i) return false;
    }
    return true;
  };
  do {
    rng.shuffle(perm);
  } while (identity());
  return perm;
}

inline FactSet shuffle_facts(const FactSet& fs, const KnowledgeOpConfig& cfg) {
  detail::Rng rng(cfg.seed, "shuffle:" + fs.source_id);
  const auto perm = shuffle_permutation(fs.facts.size(), rng);
  FactSet out{fs.source_id, {}};
  out.facts.reserve(perm.size());
  for (std::size_t p : perm) out.facts.push_back(fs.facts[p]);
  return out;
}

// Each output fact must differ from its input; one re-ask, then failure.
inline FactSet revise_facts(RewriteBackend& backend, const FactSet& fs) {
  const auto& tmpl = backend.templates().get(templates::kRevise);
  FactSet out{fs.source_id, {}};
  out.facts.reserve(fs.facts.size());
  for (const auto& fact : fs.facts) {
    std::string revised;
    bool ok = false;
    for (unsigned attempt = 0; attempt < 2 && !ok; ++attempt) {
      revised = detail::trim(backend.complete(tmpl, {{"fact", fact}}, attempt));
      ok = !revised.empty() && revised != detail::trim(fact);
    }
    if (!ok) throw ConstructionError(fs.source_id, "revision left fact unchanged: '" + fact + "'");
    out.facts.push_back(std::move(revised));
  }
  return out;
}

// Facts in list order, each sentence-terminated, separated by one space.
inline std::string concat_facts(const FactSet& fs) {
  std::vector<std::string> parts;
  parts.reserve(fs.facts.size());
  for (const auto& f : fs.facts) parts.push_back(terminate_fact(f));
  return detail::join(parts, " ");
}

inline std::string rephrase_answer(RewriteBackend& backend, const FactSet& fs) {
  if (fs.facts.empty()) throw ConstructionError(fs.source_id, "cannot rephrase an empty fact set");
  const auto& tmpl = backend.templates().get(templates::kRewriteAnswer);
  return backend.complete(tmpl, {{"facts", render_fact_list(fs.facts)}});
}

// (q*, a*): a question about the difficult facts, and an answer built from them.
inline QAPair rewrite_fine_grained(RewriteBackend& backend, const QAPair& pair, const FactSet& difficult) {
  if (difficult.facts.empty()) throw ConstructionError(pair.id, "difficult fact set is empty");
  const std::string facts = render_fact_list(difficult.facts);
  QAPair out;
  out.id = pair.id + std::string(kFineGrainedSuffix);
  out.question = backend.complete(backend.templates().get(templates::kRewriteQuestion),
                                  {{"question", pair.question}, {"facts", facts}});
  out.answer = backend.complete(backend.templates().get(templates::kRewriteAnswer), {{"facts", facts}});
  return out;
}

struct ConstructionSkip {
  std::string source_id;
  std::string reason;
};

struct ComparisonSets {
  Dataset completeness = Dataset::comparison();
  Dataset factuality = Dataset::comparison();
  Dataset logicality = Dataset::comparison();
  std::vector<ConstructionSkip> skipped;

  const Dataset& for_aspect(Aspect a) const {
    switch (a) {
      case Aspect::completeness: return completeness;
      case Aspect::factuality: return factuality;
      case Aspect::logicality: return logicality;
    }
    return completeness;
  }

  // Union of the three sets, in completeness / factuality / logicality order.
  Dataset combined() const { return union_datasets({&completeness, &factuality, &logicality}); }
};

struct ComparisonSource {
  QAPair pair;
  FactSet facts;
};

// The three dispreferred answers for one source pair plus its shared
// rephrased preferred answer.
struct ComparisonBundle {
  std::string preferred;
  std::string incomplete;
  std::string nonfactual;
  std::string illogical;
};

inline ComparisonBundle build_comparison_bundle(RewriteBackend& backend, const FactSet& fs,
                                                const KnowledgeOpConfig& cfg) {
  ComparisonBundle b;
  b.preferred = rephrase_answer(backend, fs);
  b.incomplete = concat_facts(delete_facts(fs, cfg));
  b.nonfactual = concat_facts(revise_facts(backend, fs));
  b.illogical = concat_facts(shuffle_facts(fs, cfg));
  return b;
}

// One pair per source and aspect. A pair whose dispreferred answer equals the
// preferred one carries no signal (e.g. a single-fact answer under deletion or
// shuffling when the rephrasing is verbatim); it is skipped and recorded.
// Backend failures abort with the offending source id.
inline ComparisonSets build_comparison_sets(RewriteBackend& backend,
                                            const std::vector<ComparisonSource>& sources,
                                            const KnowledgeOpConfig& cfg, std::size_t workers = 1) {
  cfg.validate();
  std::vector<ComparisonBundle> bundles(sources.size());
  detail::parallel_for(sources.size(), workers, [&](std::size_t i) {
    const auto& src = sources[i];
    if (src.facts.source_id != src.pair.id) {
      throw ConstructionError(src.pair.id, "fact set belongs to '" + src.facts.source_id + "'");
    }
    if (src.facts.facts.empty()) throw ConstructionError(src.pair.id, "fact set is empty");
    try {
      bundles[i] = build_comparison_bundle(backend, src.facts, cfg);
    } catch (const ConstructionError&) {
      throw;
    } catch (const Error& e) {
      throw ConstructionError(src.pair.id, e.what());
    }
  });

  ComparisonSets sets;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& q = sources[i].pair;
    const auto& b = bundles[i];
    auto emit = [&](Dataset& target, Aspect aspect, const std::string& dispreferred) {
      if (dispreferred == b.preferred) {
        sets.skipped.push_back({q.id, std::string(to_string(aspect)) + ": dispreferred equals preferred"});
        return;
      }
      target.comparisons.push_back(
          ComparisonPair{q.id + std::string(aspect_suffix(aspect)), q.question, b.preferred, dispreferred, aspect});
    };
    emit(sets.completeness, Aspect::completeness, b.incomplete);
    emit(sets.factuality, Aspect::factuality, b.nonfactual);
    emit(sets.logicality, Aspect::logicality, b.illogical);
  }
  return sets;
}

}  // namespace kaft

#include <gtest/gtest.h>

#include <algorithm>

#include "kaft/detail/rng.hpp"
#include "kaft/knowledge_ops.hpp"

using namespace kaft;

namespace {

FactSet make_facts(std::size_t n, const std::string& id = "s") {
  FactSet fs{id, {}};
  for (std::size_t i = 0; i < n; ++i) fs.facts.push_back("Fact number " + std::to_string(i) + " holds.");
  return fs;
}

bool is_subsequence(const std::vector<std::string>& sub, const std::vector<std::string>& full) {
  std::size_t j = 0;
  for (const auto& x : full) {
    if (j < sub.size() && sub[j] == x) ++j;
  }
  return j == sub.size();
}

// Backend whose completions come from a test-supplied function.
class FlakyBackend final : public RewriteBackend {
 public:
  explicit FlakyBackend(std::function<std::string(const PromptTemplate&, const Bindings&, unsigned)> fn)
      : fn_(std::move(fn)) {}

 protected:
  std::string do_complete(const PromptTemplate& t, const Bindings& b, const std::string&, unsigned v) override {
    return fn_(t, b, v);
  }

 private:
  std::function<std::string(const PromptTemplate&, const Bindings&, unsigned)> fn_;
};

}  // namespace

TEST(Extract, MockSplitsIntoFacts) {
  MockBackend m;
  const auto fs = extract_facts(m, {"p", "Q?", "Paris is in France. It hosts the Eiffel Tower.", std::nullopt});
  EXPECT_EQ(fs.source_id, "p");
  EXPECT_EQ(fs.facts, (std::vector<std::string>{"Paris is in France.", "It hosts the Eiffel Tower."}));
  EXPECT_EQ(extract_facts(m, {"p", "Q?", "One sentence only", std::nullopt}).facts.size(), 1u);
}

TEST(Extract, EmptyResultIsAnError) {
  FlakyBackend b([](const PromptTemplate&, const Bindings&, unsigned) { return std::string("-"); });
  EXPECT_THROW(extract_facts(b, {"p", "Q?", "A.", std::nullopt}), EmptyExtraction);
}

TEST(Delete, CountRule) {
  KnowledgeOpConfig cfg;
  EXPECT_EQ(delete_facts(make_facts(4), cfg).facts.size(), 2u);
  EXPECT_EQ(delete_facts(make_facts(1), cfg).facts.size(), 1u);
  EXPECT_EQ(delete_facts(make_facts(3), cfg).facts.size(), 2u);
  cfg.delete_fraction = 0.99;
  EXPECT_EQ(delete_facts(make_facts(2), cfg).facts.size(), 1u);
}

TEST(Delete, PropertyOrderPreservingSubsequence) {
  detail::Rng rng(2024);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng.index(15);
    const int m = 1 + static_cast<int>(rng.index(99));  // fraction m/100 in (0, 1)
    KnowledgeOpConfig cfg{m / 100.0, rng.next()};
    const FactSet fs = make_facts(n, "id" + std::to_string(trial));
    const FactSet out = delete_facts(fs, cfg);
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(m) * n / 100, n - 1);
    ASSERT_EQ(out.facts.size(), n - k) << "n=" << n << " m=" << m;
    ASSERT_GE(out.facts.size(), 1u);
    ASSERT_TRUE(is_subsequence(out.facts, fs.facts));
    ASSERT_EQ(out, delete_facts(fs, cfg));
  }
}

TEST(Delete, RemovalIsSpreadOverPositions) {
  // Uniform without replacement: each of 4 positions is removed about half the time.
  std::vector<int> removed(4, 0);
  const FactSet fs = make_facts(4);
  for (std::uint64_t seed = 0; seed < 4000; ++seed) {
    const auto out = delete_facts(fs, {0.5, seed});
    for (std::size_t i = 0; i < 4; ++i) {
      removed[i] += std::find(out.facts.begin(), out.facts.end(), fs.facts[i]) == out.facts.end();
    }
  }
  for (int r : removed) EXPECT_NEAR(r / 4000.0, 0.5, 0.04);
}

TEST(Shuffle, Examples) {
  KnowledgeOpConfig cfg;
  EXPECT_EQ(shuffle_facts({"s", {"k1", "k2"}}, cfg).facts, (std::vector<std::string>{"k2", "k1"}));
  EXPECT_EQ(shuffle_facts({"s", {"k1"}}, cfg).facts, (std::vector<std::string>{"k1"}));
  const FactSet five = make_facts(5);
  cfg.seed = 17;
  EXPECT_EQ(shuffle_facts(five, cfg), shuffle_facts(five, cfg));
}

TEST(Shuffle, PropertyPermutationNonIdentity) {
  detail::Rng rng(77);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng.index(12);
    const FactSet fs = make_facts(n, "id" + std::to_string(trial));
    const FactSet out = shuffle_facts(fs, {0.5, rng.next()});
    auto a = fs.facts, b = out.facts;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    ASSERT_EQ(a, b);
    if (n >= 2) {
      ASSERT_NE(out.facts, fs.facts);
    }
  }
}

TEST(Revise, MockNegatesEachFact) {
  MockBackend m;
  EXPECT_EQ(revise_facts(m, {"s", {"Paris is in France."}}).facts,
            (std::vector<std::string>{"It is not the case that Paris is in France."}));
  const auto out = revise_facts(m, make_facts(3));
  ASSERT_EQ(out.facts.size(), 3u);
  EXPECT_EQ(out.facts[2], "It is not the case that Fact number 2 holds.");
}

TEST(Revise, PropertyLengthAndPointwiseDifference) {
  MockBackend m;
  detail::Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const FactSet fs = make_facts(1 + rng.index(10));
    const FactSet out = revise_facts(m, fs);
    ASSERT_EQ(out.facts.size(), fs.facts.size());
    for (std::size_t i = 0; i < fs.facts.size(); ++i) ASSERT_NE(out.facts[i], fs.facts[i]);
  }
}

TEST(Revise, IdenticalOutputReaskedOnceThenError) {
  int calls = 0;
  FlakyBackend once([&](const PromptTemplate&, const Bindings& b, unsigned v) {
    ++calls;
    return v == 0 ? b.at("fact") : "changed";
  });
  EXPECT_EQ(revise_facts(once, {"s", {"A."}}).facts, (std::vector<std::string>{"changed"}));
  EXPECT_EQ(calls, 2);

  FlakyBackend stubborn([](const PromptTemplate&, const Bindings& b, unsigned) { return b.at("fact"); });
  EXPECT_THROW(revise_facts(stubborn, {"s", {"A."}}), Error);
}

TEST(Concat, JoinAndTerminate) {
  EXPECT_EQ(concat_facts({"s", {"A.", "B."}}), "A. B.");
  EXPECT_EQ(concat_facts({"s", {"A"}}), "A.");
  const FactSet three{"s", {"One.", "Two.", "Three."}};
  const std::string text = concat_facts(shuffle_facts(three, {}));
  for (const auto& f : three.facts) EXPECT_NE(text.find(f), std::string::npos);
}

TEST(Rephrase, MockUsesDifferentConnective) {
  MockBackend m;
  EXPECT_EQ(rephrase_answer(m, {"s", {"A.", "B."}}), "A.\nB.");
  const FactSet fs = make_facts(3);
  EXPECT_NE(rephrase_answer(m, fs), concat_facts(fs));
  EXPECT_THROW(rephrase_answer(m, {"s", {}}), ConstructionError);
}

TEST(RewriteFineGrained, MockShape) {
  MockBackend m;
  const QAPair p{"x1", "Who is X?", "f1. f2.", std::nullopt};
  const QAPair out = rewrite_fine_grained(m, p, {"x1", {"f1."}});
  EXPECT_EQ(out.id, "x1.fg");
  EXPECT_EQ(out.question, "Regarding: f1?");
  EXPECT_EQ(out.answer, "f1.");
  const QAPair all = rewrite_fine_grained(m, p, {"x1", {"f1.", "f2."}});
  EXPECT_EQ(all.answer, "f1.\nf2.");
  EXPECT_THROW(rewrite_fine_grained(m, p, {"x1", {}}), ConstructionError);
}

TEST(ComparisonSets, FiveSources) {
  MockBackend m;
  std::vector<ComparisonSource> src;
  for (int i = 0; i < 5; ++i) {
    const std::string id = "q" + std::to_string(i);
    src.push_back({{id, "Q" + id + "?", "x", std::nullopt}, make_facts(4, id)});
  }
  const auto sets = build_comparison_sets(m, src, {});
  EXPECT_EQ(sets.completeness.size(), 5u);
  EXPECT_EQ(sets.factuality.size(), 5u);
  EXPECT_EQ(sets.logicality.size(), 5u);
  EXPECT_EQ(sets.combined().size(), 15u);
  EXPECT_TRUE(sets.skipped.empty());
  for (const auto& c : sets.combined().comparisons) EXPECT_NE(c.preferred, c.dispreferred);
  for (const auto& c : sets.completeness.comparisons) {
    int hits = 0;
    for (const auto& f : make_facts(4).facts) hits += c.dispreferred.find(f) != std::string::npos;
    EXPECT_EQ(hits, 2) << c.dispreferred;
    EXPECT_EQ(c.aspect, Aspect::completeness);
  }
  EXPECT_EQ(sets.factuality.comparisons[0].id, "q0.kfc");
  EXPECT_EQ(sets.logicality.comparisons[0].aspect, Aspect::logicality);
  // The rephrased answer is shared by all three aspects.
  EXPECT_EQ(sets.completeness.comparisons[3].preferred, sets.logicality.comparisons[3].preferred);
}

TEST(ComparisonSets, PropertyCardinalities) {
  MockBackend m;
  detail::Rng rng(31337);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(6);
    std::vector<ComparisonSource> src;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string id = "t" + std::to_string(trial) + "-" + std::to_string(i);
      src.push_back({{id, "Q?", "x", std::nullopt}, make_facts(2 + rng.index(6), id)});
    }
    const auto sets = build_comparison_sets(m, src, {0.5, rng.next()});
    ASSERT_EQ(sets.completeness.size(), n);
    ASSERT_EQ(sets.factuality.size(), n);
    ASSERT_EQ(sets.logicality.size(), n);
    ASSERT_EQ(sets.combined().size(), 3 * n);
  }
}

TEST(ComparisonSets, DegenerateSingleFactPairsAreSkippedAndRecorded) {
  MockBackend m;
  const auto sets = build_comparison_sets(m, {{{"solo", "Q?", "A.", std::nullopt}, {"solo", {"A."}}}}, {});
  EXPECT_EQ(sets.completeness.size(), 0u);
  EXPECT_EQ(sets.factuality.size(), 1u);
  EXPECT_EQ(sets.logicality.size(), 0u);
  ASSERT_EQ(sets.skipped.size(), 2u);
  EXPECT_EQ(sets.skipped[0].source_id, "solo");
}

TEST(ComparisonSets, BackendFailureNamesSource) {
  FlakyBackend b([](const PromptTemplate& t, const Bindings&, unsigned) -> std::string {
    if (t.name == templates::kRevise) throw BackendError("boom");
    return "ok";
  });
  std::vector<ComparisonSource> src = {{{"good", "Q?", "x", std::nullopt}, make_facts(2, "good")}};
  try {
    build_comparison_sets(b, src, {});
    FAIL();
  } catch (const ConstructionError& e) {
    EXPECT_EQ(e.source_id(), "good");
  }
  src[0].facts.source_id = "other";
  EXPECT_THROW(build_comparison_sets(b, src, {}), ConstructionError);
}

TEST(ComparisonSets, ParallelMatchesSerial) {
  MockBackend m;
  std::vector<ComparisonSource> src;
  for (int i = 0; i < 20; ++i) {
    const std::string id = "p" + std::to_string(i);
    src.push_back({{id, "Q?", "x", std::nullopt}, make_facts(2 + i % 5, id)});
  }
  const auto a = build_comparison_sets(m, src, {0.5, 3}, 1);
  const auto b = build_comparison_sets(m, src, {0.5, 3}, 4);
  EXPECT_EQ(a.combined(), b.combined());
}

TEST(KnowledgeOpConfig, Validation) {
  EXPECT_THROW((KnowledgeOpConfig{0.0, 0}.validate()), ConfigError);
  EXPECT_THROW((KnowledgeOpConfig{1.0, 0}.validate()), ConfigError);
  EXPECT_NO_THROW((KnowledgeOpConfig{0.5, 0}.validate()));
}

#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_int.hpp>
#include <boost/multiprecision/cpp_dec_float.hpp>

#include "kaft/detail/rng.hpp"
#include "kaft/eval.hpp"

using namespace kaft;
using R = RunResult;

namespace {

// Exact 2 * sum_{i<=k} C(n, i) / 2^n, capped at 1, with big integers.
double exact_sign_p(unsigned w, unsigned l) {
  using boost::multiprecision::cpp_int;
  using Dec = boost::multiprecision::cpp_dec_float_50;
  const unsigned n = w + l, k = std::min(w, l);
  cpp_int tail = 0, c = 1;
  for (unsigned i = 0; i <= k; ++i) {
    tail += c;
    c = c * (n - i) / (i + 1);
  }
  const Dec p = Dec(cpp_int(2) * tail) / Dec(cpp_int(1) << n);
  return std::min(1.0, p.convert_to<double>());
}

Outcome flip(Outcome o) {
  return o == Outcome::Win ? Outcome::Lose : o == Outcome::Lose ? Outcome::Win : Outcome::Tie;
}
R flip(R r) { return r == R::win ? R::lose : r == R::lose ? R::win : R::tie; }

}  // namespace

TEST(Aggregate, AllNineCases) {
  EXPECT_EQ(aggregate_wtl(R::win, R::win), Outcome::Win);
  EXPECT_EQ(aggregate_wtl(R::win, R::tie), Outcome::Win);
  EXPECT_EQ(aggregate_wtl(R::tie, R::win), Outcome::Win);
  EXPECT_EQ(aggregate_wtl(R::lose, R::lose), Outcome::Lose);
  EXPECT_EQ(aggregate_wtl(R::lose, R::tie), Outcome::Lose);
  EXPECT_EQ(aggregate_wtl(R::tie, R::lose), Outcome::Lose);
  EXPECT_EQ(aggregate_wtl(R::tie, R::tie), Outcome::Tie);
  EXPECT_EQ(aggregate_wtl(R::win, R::lose), Outcome::Tie);
  EXPECT_EQ(aggregate_wtl(R::lose, R::win), Outcome::Tie);
}

TEST(Aggregate, SwappingSystemsMirrorsOutcome) {
  for (R a : {R::win, R::tie, R::lose}) {
    for (R b : {R::win, R::tie, R::lose}) {
      EXPECT_EQ(aggregate_wtl(flip(a), flip(b)), flip(aggregate_wtl(a, b)));
    }
  }
}

TEST(PairwiseJudge, MockPolicies) {
  MockBackend longer(MockJudge::prefer_longer);
  const auto r = pairwise_judge(longer, "Q?", "ref", "a much longer answer", "short", Aspect::completeness);
  EXPECT_EQ(r.a_first, R::win);
  EXPECT_EQ(r.a_second, R::win);

  MockBackend overlap;
  const auto same = pairwise_judge(overlap, "Q?", "Paris is in France.", "Paris.", "Paris.", Aspect::factuality);
  EXPECT_EQ(same.a_first, R::tie);
  EXPECT_EQ(same.a_second, R::tie);

  MockBackend first(MockJudge::prefer_first);
  const auto biased = pairwise_judge(first, "Q?", "ref", "one", "two", Aspect::logicality);
  EXPECT_EQ(biased.a_first, R::win);
  EXPECT_EQ(biased.a_second, R::lose);
  EXPECT_EQ(aggregate_wtl(biased), Outcome::Tie);
  EXPECT_THROW(pairwise_judge(first, "Q?", "ref", " ", "two", Aspect::logicality), Error);
}

TEST(PairwiseJudge, PositionOneBiasIsFullyNeutralised) {
  MockBackend first(MockJudge::prefer_first);
  detail::Rng rng(5);
  std::vector<Outcome> outcomes;
  for (int i = 0; i < 40; ++i) {
    const std::string a(1 + rng.index(30), 'a'), b(1 + rng.index(30), 'b');
    outcomes.push_back(aggregate_wtl(pairwise_judge(first, "Q?", "r", a, b, kAllAspects[i % 3])));
  }
  const auto rep = tally_outcomes(Aspect::completeness, outcomes);
  EXPECT_EQ(rep.ties, 40u);
  EXPECT_EQ(rep.tie_pct(), 100.0);
}

TEST(SignTest, Examples) {
  EXPECT_NEAR(sign_test(9, 1).p_value, 22.0 / 1024.0, 1e-15);
  EXPECT_NEAR(sign_test(9, 1).p_value, 0.02148, 1e-5);
  EXPECT_EQ(sign_test(1, 9).p_value, sign_test(9, 1).p_value);
  for (std::size_t w : {1u, 5u, 17u}) EXPECT_EQ(sign_test(w, w).p_value, 1.0);
  EXPECT_EQ(sign_test(1, 0).p_value, 1.0);
  const auto e = sign_test(0, 0);
  EXPECT_TRUE(e.empty);
  EXPECT_EQ(e.p_value, 1.0);
  EXPECT_FALSE(sign_test(3, 0).empty);
}

TEST(SignTest, MatchesExactOracleUpTo64) {
  for (unsigned n = 1; n <= 64; ++n) {
    for (unsigned w = 0; w <= n; ++w) {
      const double p = sign_test(w, n - w).p_value;
      ASSERT_NEAR(p, exact_sign_p(w, n - w), 1e-12) << w << "/" << n - w;
      ASSERT_GT(p, 0.0);
      ASSERT_LE(p, 1.0);
    }
  }
}

TEST(FactsEval, TallyExample) {
  MockBackend judge;
  const auto rep = fine_grained_facts_eval(judge, "Paris is in France. The Seine flows through Paris. Paris has no river.",
                                           "Paris is in France. The Seine flows through Paris.");
  ASSERT_EQ(rep.verdicts.size(), 3u);
  EXPECT_TRUE(rep.verdicts[0].correct);
  EXPECT_TRUE(rep.verdicts[1].correct);
  EXPECT_FALSE(rep.verdicts[2].correct);
  EXPECT_EQ(rep.n_correct, 2u);
  EXPECT_EQ(rep.n_incorrect, 1u);
  EXPECT_EQ(rep.n_total, 3u);
  EXPECT_EQ(round_half_up(rep.pct_correct), 66.67);
  EXPECT_FALSE(rep.empty);
}

TEST(FactsEval, DegenerateInputs) {
  MockBackend judge;
  EXPECT_TRUE(fine_grained_facts_eval(judge, "   ", "ref").empty);
  EXPECT_THROW(fine_grained_facts_eval(judge, "A.", " "), Error);
  const auto empty = tally_verdicts({});
  EXPECT_TRUE(empty.empty);
  EXPECT_EQ(empty.n_total, 0u);
}

TEST(FactsEval, TallyIdentityProperty) {
  detail::Rng rng(6);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<FactVerdict> v(rng.index(30));
    for (auto& x : v) x.correct = rng.index(2) == 1;
    const auto r = tally_verdicts(v);
    ASSERT_EQ(r.n_total, r.n_correct + r.n_incorrect);
    ASSERT_EQ(r.n_total, v.size());
    ASSERT_GE(r.pct_correct, 0.0);
    ASSERT_LE(r.pct_correct, 100.0);
  }
}

TEST(FactsTable, RowFormatsAndParsesInColumnOrder) {
  const auto row = format_facts_row("system", 14.40, 2.36, 16.76, 85.92);
  EXPECT_NE(row.find("14.40"), std::string::npos);
  EXPECT_LT(row.find("14.40"), row.find("2.36"));
  EXPECT_LT(row.find("2.36"), row.find("16.76"));
  EXPECT_LT(row.find("16.76"), row.find("85.92"));
  const auto parsed = parse_facts_row(row);
  EXPECT_EQ(parsed, (std::array<double, 4>{14.40, 2.36, 16.76, 85.92}));
  const auto header = format_facts_header();
  EXPECT_LT(header.find("#Correct"), header.find("#Incorrect"));
  EXPECT_LT(header.find("#Total"), header.find("%Correct"));
  EXPECT_THROW(parse_facts_row("label only"), Error);
}

TEST(Rounding, HalfUp) {
  EXPECT_EQ(format_fixed(2.345), "2.35");
  EXPECT_EQ(format_fixed(0.125), "0.13");
  EXPECT_EQ(format_fixed(66.666666), "66.67");
  EXPECT_EQ(format_fixed(1.0), "1.00");
}

TEST(WtlReport, PercentagesSumToHundred) {
  detail::Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Outcome> o(1 + rng.index(200));
    for (auto& x : o) x = static_cast<Outcome>(rng.index(3));
    const auto r = tally_outcomes(Aspect::logicality, o);
    ASSERT_EQ(r.total(), o.size());
    ASSERT_NEAR(r.win_pct() + r.tie_pct() + r.lose_pct(), 100.0, 0.015 + 1e-9);
    ASSERT_GT(r.p_value, 0.0);
    ASSERT_LE(r.p_value, 1.0);
  }
}

TEST(WtlReport, RowMarksSignificance) {
  std::vector<Outcome> o(9, Outcome::Win);
  o.push_back(Outcome::Lose);
  o.push_back(Outcome::Tie);
  const auto r = tally_outcomes(Aspect::factuality, o);
  EXPECT_TRUE(r.significant());
  const auto row = format_wtl_row(r);
  EXPECT_NE(row.find("81.82*"), std::string::npos) << row;
  EXPECT_NE(row.find("factuality"), std::string::npos);
  const auto j = to_json(r);
  EXPECT_EQ(j["wins"], 9);
  EXPECT_EQ(j["ties"], 1);
}

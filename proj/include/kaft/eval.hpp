#pragma once

// Evaluation: fact-level scoring against a gold reference, position-swapped
// pairwise judging with win/tie/lose aggregation, and the exact sign test.

#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "kaft/corpus.hpp"
#include "kaft/knowledge_ops.hpp"
#include "kaft/llm_client.hpp"

namespace kaft {

inline double round_half_up(double x, int decimals = 2) {
  const double scale = std::pow(10.0, decimals);
  return std::floor(x * scale + 0.5) / scale;
}

inline std::string format_fixed(double x, int decimals = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, round_half_up(x, decimals));
  return buf;
}

struct FactVerdict {
  std::string fact;
  bool correct = false;
  std::optional<std::string> judge_rationale;
};

struct FineGrainedReport {
  std::size_t n_correct = 0;
  std::size_t n_incorrect = 0;
  std::size_t n_total = 0;
  double pct_correct = 0.0;  // meaningless when empty
  bool empty = true;
  std::vector<FactVerdict> verdicts;
};

inline FineGrainedReport tally_verdicts(std::vector<FactVerdict> verdicts) {
  FineGrainedReport r;
  for (const auto& v : verdicts) (v.correct ? r.n_correct : r.n_incorrect) += 1;
  r.n_total = r.n_correct + r.n_incorrect;
  r.empty = r.n_total == 0;
  r.pct_correct = r.empty ? 0.0 : 100.0 * static_cast<double>(r.n_correct) / static_cast<double>(r.n_total);
  r.verdicts = std::move(verdicts);
  return r;
}

inline FactVerdict judge_fact(RewriteBackend& judge, const std::string& fact, std::string_view reference) {
  const auto& tmpl = judge.templates().get(templates::kFactJudge);
  const Bindings b{{"fact", fact}, {"reference", std::string(reference)}};
  for (unsigned attempt = 0; attempt < 2; ++attempt) {
    const std::string out = judge.complete(tmpl, b, attempt);
    if (auto v = parse_verdict(out)) return FactVerdict{fact, *v, out};
  }
  throw BackendError("unparseable fact verdict for '" + fact + "'");
}

// Breaks `answer` into facts and judges each against `reference`. An answer
// with no extractable facts yields an empty-flagged report.
inline FineGrainedReport fine_grained_facts_eval(RewriteBackend& judge, std::string_view answer,
                                                 std::string_view reference) {
  if (detail::trim(reference).empty()) throw Error("fine-grained evaluation needs a non-empty reference");
  if (detail::trim(answer).empty()) return tally_verdicts({});
  FactSet facts;
  try {
    facts = extract_facts(judge, QAPair{"eval", "eval", std::string(answer), std::nullopt});
  } catch (const EmptyExtraction&) {
    return tally_verdicts({});
  }
  std::vector<FactVerdict> verdicts;
  for (const auto& f : facts.facts) verdicts.push_back(judge_fact(judge, f, reference));
  return tally_verdicts(std::move(verdicts));
}

// Mean fact counts per answer, as reported in fact-count tables. The percentage
// is the ratio of summed correct facts to summed facts.
struct FactsSummary {
  std::size_t answers = 0;
  double mean_correct = 0.0;
  double mean_incorrect = 0.0;
  double mean_total = 0.0;
  double pct_correct = 0.0;
};

inline FactsSummary summarize(const std::vector<FineGrainedReport>& reports) {
  FactsSummary s;
  s.answers = reports.size();
  if (reports.empty()) return s;
  double c = 0, i = 0;
  for (const auto& r : reports) {
    c += static_cast<double>(r.n_correct);
    i += static_cast<double>(r.n_incorrect);
  }
  const double n = static_cast<double>(reports.size());
  s.mean_correct = c / n;
  s.mean_incorrect = i / n;
  s.mean_total = (c + i) / n;
  s.pct_correct = (c + i) > 0 ? 100.0 * c / (c + i) : 0.0;
  return s;
}

inline constexpr std::array<std::string_view, 4> kFactColumns = {"#Correct", "#Incorrect", "#Total", "%Correct"};

// Columns: #Correct #Incorrect #Total %Correct, two decimals each.
inline std::string format_facts_row(std::string_view label, double correct, double incorrect, double total,
                                    double pct) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-24.24s %10s %10s %10s %10s", std::string(label).c_str(),
                format_fixed(correct).c_str(), format_fixed(incorrect).c_str(), format_fixed(total).c_str(),
                format_fixed(pct).c_str());
  return buf;
}

inline std::string format_facts_row(std::string_view label, const FactsSummary& s) {
  return format_facts_row(label, s.mean_correct, s.mean_incorrect, s.mean_total, s.pct_correct);
}

inline std::string format_facts_header() {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-24s %10s %10s %10s %10s", "Method", kFactColumns[0].data(),
                kFactColumns[1].data(), kFactColumns[2].data(), kFactColumns[3].data());
  return buf;
}

// Parses the four numeric columns back out of a formatted row.
inline std::array<double, 4> parse_facts_row(std::string_view row) {
  std::istringstream in{std::string(row.size() > 24 ? row.substr(24) : row)};
  std::array<double, 4> out{};
  for (auto& x : out) {
    if (!(in >> x)) throw Error("malformed fact-count row");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pairwise judging

enum class RunResult { win, tie, lose };
enum class Outcome { Win, Tie, Lose };

inline std::string_view to_string(RunResult r) {
  switch (r) {
    case RunResult::win: return "win";
    case RunResult::tie: return "tie";
    case RunResult::lose: return "lose";
  }
  return "?";
}

inline std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::Win: return "Win";
    case Outcome::Tie: return "Tie";
    case Outcome::Lose: return "Lose";
  }
  return "?";
}

// Both runs are from the perspective of answer A (the system under test).
struct PairRuns {
  RunResult a_first;   // A shown in position 1
  RunResult a_second;  // A shown in position 2
};

inline RunResult compare_scores(double mine, double theirs) {
  if (mine > theirs) return RunResult::win;
  if (mine < theirs) return RunResult::lose;
  return RunResult::tie;
}

inline std::pair<double, double> judge_once(RewriteBackend& judge, const Bindings& b) {
  const auto& tmpl = judge.templates().get(templates::kPairwiseJudge);
  for (unsigned attempt = 0; attempt < 2; ++attempt) {
    if (auto s = parse_pair_scores(judge.complete(tmpl, b, attempt))) return *s;
  }
  throw BackendError("unparseable pairwise judgement");
}

// Two judge runs with the answers' positions swapped.
inline PairRuns pairwise_judge(RewriteBackend& judge, std::string_view question, std::string_view reference,
                               std::string_view answer_a, std::string_view answer_b, Aspect aspect) {
  if (detail::trim(answer_a).empty() || detail::trim(answer_b).empty()) {
    throw Error("pairwise judging needs two non-empty answers");
  }
  Bindings b{{"question", std::string(question)},
             {"reference", std::string(reference)},
             {"aspect", std::string(to_string(aspect))},
             {"aspect_definition", std::string(aspect_definition(aspect))},
             {"answer_1", std::string(answer_a)},
             {"answer_2", std::string(answer_b)}};
  const auto [a1, b2] = judge_once(judge, b);
  std::swap(b["answer_1"], b["answer_2"]);
  const auto [b1, a2] = judge_once(judge, b);
  return PairRuns{compare_scores(a1, b2), compare_scores(a2, b1)};
}

// Win: two wins, or a win and a tie. Lose: two losses, or a loss and a tie.
// Tie: two ties, or one win and one loss.
inline Outcome aggregate_wtl(RunResult first, RunResult second) {
  const int wins = (first == RunResult::win) + (second == RunResult::win);
  const int losses = (first == RunResult::lose) + (second == RunResult::lose);
  if (wins > losses) return Outcome::Win;
  if (losses > wins) return Outcome::Lose;
  return Outcome::Tie;
}

inline Outcome aggregate_wtl(const PairRuns& runs) { return aggregate_wtl(runs.a_first, runs.a_second); }

struct SignTestResult {
  double p_value = 1.0;
  bool empty = false;  // no untied observations
};

// Exact two-sided binomial test at p = 1/2 over n = wins + losses (ties
// already excluded): p = min(1, 2 * P(X <= min(wins, losses))).
inline SignTestResult sign_test(std::size_t wins, std::size_t losses) {
  const std::size_t n = wins + losses;
  if (n == 0) return SignTestResult{1.0, true};
  const std::size_t k = std::min(wins, losses);
  // term_i = C(n, i) / 2^n, built in log space for the first term.
  long double term = std::exp(-static_cast<long double>(n) * std::log(2.0L));
  long double tail = 0.0L;
  for (std::size_t i = 0; i <= k; ++i) {
    tail += term;
    term = term * static_cast<long double>(n - i) / static_cast<long double>(i + 1);
  }
  return SignTestResult{static_cast<double>(std::min(1.0L, 2.0L * tail)), false};
}

struct WTLReport {
  Aspect aspect = Aspect::completeness;
  std::size_t wins = 0;
  std::size_t ties = 0;
  std::size_t losses = 0;
  double p_value = 1.0;

  std::size_t total() const { return wins + ties + losses; }
  double pct(std::size_t c) const {
    return total() ? round_half_up(100.0 * static_cast<double>(c) / static_cast<double>(total())) : 0.0;
  }
  double win_pct() const { return pct(wins); }
  double tie_pct() const { return pct(ties); }
  double lose_pct() const { return pct(losses); }
  bool significant(double alpha = 0.05) const { return p_value < alpha; }
};

inline WTLReport tally_outcomes(Aspect aspect, const std::vector<Outcome>& outcomes) {
  WTLReport r;
  r.aspect = aspect;
  for (Outcome o : outcomes) {
    switch (o) {
      case Outcome::Win: ++r.wins; break;
      case Outcome::Tie: ++r.ties; break;
      case Outcome::Lose: ++r.losses; break;
    }
  }
  r.p_value = sign_test(r.wins, r.losses).p_value;
  return r;
}

inline std::string format_wtl_header() {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-14s %8s %8s %8s %10s", "Aspect", "Win", "Tie", "Lose", "p-value");
  return buf;
}

// One Win/Tie/Lose row; a '*' marks p < 0.05.
inline std::string format_wtl_row(const WTLReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-14s %7s%s %8s %8s %10.4g", std::string(to_string(r.aspect)).c_str(),
                format_fixed(r.win_pct()).c_str(), r.significant() ? "*" : " ", format_fixed(r.tie_pct()).c_str(),
                format_fixed(r.lose_pct()).c_str(), r.p_value);
  return buf;
}

inline Json to_json(const FineGrainedReport& r) {
  Json verdicts = Json::array();
  for (const auto& v : r.verdicts) verdicts.push_back(Json{{"fact", v.fact}, {"correct", v.correct}});
  return Json{{"n_correct", r.n_correct}, {"n_incorrect", r.n_incorrect}, {"n_total", r.n_total},
              {"pct_correct", round_half_up(r.pct_correct)}, {"empty", r.empty}, {"verdicts", verdicts}};
}

inline Json to_json(const FactsSummary& s) {
  return Json{{"answers", s.answers},
              {"mean_correct", round_half_up(s.mean_correct)},
              {"mean_incorrect", round_half_up(s.mean_incorrect)},
              {"mean_total", round_half_up(s.mean_total)},
              {"pct_correct", round_half_up(s.pct_correct)}};
}

inline Json to_json(const WTLReport& r) {
  return Json{{"aspect", std::string(to_string(r.aspect))},
              {"wins", r.wins},
              {"ties", r.ties},
              {"losses", r.losses},
              {"win_pct", r.win_pct()},
              {"tie_pct", r.tie_pct()},
              {"lose_pct", r.lose_pct()},
              {"p_value", r.p_value}};
}

}  // namespace kaft

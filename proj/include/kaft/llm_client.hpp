#pragma once

// Prompt templates and the backend interface behind every prompted operator:
// extraction, question/answer rewriting, fact revision and judging.
// The remote OpenAI-compatible backend lives in remote_backend.hpp so that
// code which only needs the interface does not pull in the HTTP client.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "kaft/corpus.hpp"
#include "kaft/detail/text.hpp"
#include "kaft/error.hpp"

namespace kaft {

using Bindings = std::map<std::string, std::string>;

struct Decoding {
  double temperature = 0.0;
  int max_tokens = 512;

  bool operator==(const Decoding&) const = default;
};

struct PromptTemplate {
  std::string name;
  std::string body;  // placeholders are written {name}
  Decoding decoding;

  // Placeholder names in order of first appearance.
  std::vector<std::string> placeholders() const {
    static const std::regex re(R"(\{([a-z_][a-z0-9_]*)\})");
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (auto it = std::sregex_iterator(body.begin(), body.end(), re); it != std::sregex_iterator(); ++it) {
      std::string n = (*it)[1].str();
      if (seen.insert(n).second) out.push_back(std::move(n));
    }
    return out;
  }

  // Throws TemplateError listing every unbound placeholder.
  std::string render(const Bindings& bindings) const {
    static const std::regex re(R"(\{([a-z_][a-z0-9_]*)\})");
    std::vector<std::string> missing;
    std::string out;
    auto last = body.cbegin();
    for (auto it = std::sregex_iterator(body.begin(), body.end(), re); it != std::sregex_iterator(); ++it) {
      const auto& m = *it;
      out.append(last, m[0].first);
      auto found = bindings.find(m[1].str());
      if (found == bindings.end()) {
        missing.push_back(m[1].str());
      } else {
        out.append(found->second);
      }
      last = m[0].second;
    }
    out.append(last, body.cend());
    if (!missing.empty()) {
      throw TemplateError("template '" + name + "': unbound placeholder(s) " +
                          detail::join(missing, ", "));
    }
    return out;
  }
};

namespace templates {

inline constexpr std::string_view kExtract = "extract";
inline constexpr std::string_view kRewriteQuestion = "rewrite_question";
inline constexpr std::string_view kRewriteAnswer = "rewrite_answer";
inline constexpr std::string_view kRevise = "revise";
inline constexpr std::string_view kFactJudge = "fact_judge";
inline constexpr std::string_view kPairwiseJudge = "pairwise_judge";

// Template files: optional "key: value" header lines (temperature, max_tokens,
// name) closed by a line holding only "---", then the body verbatim.
inline PromptTemplate parse(std::string_view text, std::string default_name) {
  PromptTemplate t;
  t.name = std::move(default_name);
  std::string_view body = text;
  const auto marker = text.find("\n---\n");
  const bool header_first = detail::starts_with(text, "---\n");
  if (header_first) {
    body = text.substr(4);
  } else if (marker != std::string_view::npos) {
    for (const auto& raw : detail::split_lines(text.substr(0, marker))) {
      const std::string line = detail::trim(raw);
      if (line.empty() || line[0] == '#') continue;
      const auto colon = line.find(':');
      if (colon == std::string::npos) throw TemplateError("template header line without ':' in " + t.name);
      const std::string key = detail::trim(line.substr(0, colon));
      const std::string value = detail::trim(line.substr(colon + 1));
      try {
        if (key == "temperature") {
          t.decoding.temperature = std::stod(value);
        } else if (key == "max_tokens") {
          t.decoding.max_tokens = std::stoi(value);
        } else if (key == "name") {
          t.name = value;
        } else {
          throw TemplateError("unknown template header key '" + key + "' in " + t.name);
        }
      } catch (const std::invalid_argument&) {
        throw TemplateError("bad value for '" + key + "' in " + t.name);
      }
    }
    body = text.substr(marker + 5);
  }
  t.body = std::string(body);
  if (t.decoding.temperature < 0.0 || t.decoding.max_tokens <= 0) {
    throw TemplateError("invalid decoding parameters in " + t.name);
  }
  return t;
}

inline PromptTemplate builtin(std::string_view name);

}  // namespace templates

// Named collection of templates: built-ins, optionally overridden by the files
// of a templates directory (file stem = template name).
class TemplateSet {
 public:
  static TemplateSet builtin() {
    TemplateSet s;
    for (auto n : {templates::kExtract, templates::kRewriteQuestion, templates::kRewriteAnswer,
                   templates::kRevise, templates::kFactJudge, templates::kPairwiseJudge}) {
      s.put(templates::builtin(n));
    }
    return s;
  }

  static TemplateSet load_dir(const std::filesystem::path& dir) {
    TemplateSet s = builtin();
    if (!std::filesystem::is_directory(dir)) throw TemplateError("templates directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      s.put(templates::parse(ss.str(), f.stem().string()));
    }
    return s;
  }

  void put(PromptTemplate t) { by_name_[t.name] = std::move(t); }

  const PromptTemplate& get(std::string_view name) const {
    auto it = by_name_.find(std::string(name));
    if (it == by_name_.end()) throw TemplateError("no template named '" + std::string(name) + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : by_name_) out.push_back(n);
    return out;
  }

 private:
  std::map<std::string, PromptTemplate> by_name_;
};

struct BackendStats {
  std::uint64_t calls = 0;          // complete() invocations
  std::uint64_t network_requests = 0;  // HTTP attempts actually sent
  std::uint64_t cache_hits = 0;
};

// Text-rewriting service. complete() validates bindings before any backend
// work, so an unbound placeholder never reaches the network.
class RewriteBackend {
 public:
  virtual ~RewriteBackend() = default;

  // `variant` distinguishes deliberate re-asks (e.g. a retry after a rejected
  // output) from identical calls; it is part of the remote cache key.
  std::string complete(const PromptTemplate& tmpl, const Bindings& bindings, unsigned variant = 0) {
    std::string rendered = tmpl.render(bindings);
    ++calls_;
    std::string out = detail::trim(do_complete(tmpl, bindings, rendered, variant));
    if (out.empty()) throw BackendError("empty completion for template '" + tmpl.name + "'");
    return out;
  }

  virtual BackendStats stats() const { return BackendStats{calls_.load(), 0, 0}; }

  const TemplateSet& templates() const { return templates_; }
  void set_templates(TemplateSet t) { templates_ = std::move(t); }

 protected:
  RewriteBackend() : templates_(TemplateSet::builtin()) {}

  virtual std::string do_complete(const PromptTemplate& tmpl, const Bindings& bindings,
                                  const std::string& rendered, unsigned variant) = 0;

  std::atomic<std::uint64_t> calls_{0};

 private:
  TemplateSet templates_;
};

// Bullet-list rendering used for every {facts} binding, and its inverse.
inline std::string render_fact_list(const std::vector<std::string>& facts) {
  std::string out;
  for (std::size_t i = 0; i < facts.size(); ++i) {
    if (i) out.push_back('\n');
    out += "- " + detail::trim(facts[i]);
  }
  return out;
}

// Parses model output listing one item per line. Leading bullets ("-", "*",
// "1.", "1)") are stripped; blank lines are dropped.
inline std::vector<std::string> parse_fact_list(std::string_view text) {
  static const std::regex bullet(R"(^\s*(?:[-*•]|\d+[.)])(?:\s+|$))");
  std::vector<std::string> out;
  for (const auto& raw : detail::split_lines(text)) {
    std::string line = std::regex_replace(raw, bullet, "", std::regex_constants::format_first_only);
    line = detail::trim(line);
    if (!line.empty()) out.push_back(std::move(line));
  }
  return out;
}

// Ensures a fact ends with a sentence terminator.
inline std::string terminate_fact(std::string_view fact) {
  std::string f = detail::trim(fact);
  if (!f.empty() && !detail::ends_with_terminator(f)) f.push_back('.');
  return f;
}

// Pairwise scores on the 1..10 scale, parsed from the first line of judge
// output ("7 5", "7, 5", "7.5 6").
inline std::optional<std::pair<double, double>> parse_pair_scores(std::string_view text) {
  static const std::regex re(R"(^\s*\[*\s*(\d+(?:\.\d+)?)\s*[, ]\s*(\d+(?:\.\d+)?)\s*\]*\s*$)");
  const auto lines = detail::split_lines(text);
  for (const auto& line : lines) {
    if (detail::trim(line).empty()) continue;
    std::smatch m;
    if (!std::regex_match(line, m, re)) return std::nullopt;
    const double a = std::stod(m[1].str());
    const double b = std::stod(m[2].str());
    if (a < 1 || a > 10 || b < 1 || b > 10) return std::nullopt;
    return std::make_pair(a, b);
  }
  return std::nullopt;
}

// True/False verdict from fact-judge output; nullopt if neither word leads.
inline std::optional<bool> parse_verdict(std::string_view text) {
  const std::string t = detail::to_lower(detail::trim(text));
  if (detail::starts_with(t, "true") || detail::starts_with(t, "yes")) return true;
  if (detail::starts_with(t, "false") || detail::starts_with(t, "no")) return false;
  return std::nullopt;
}

inline const std::string& binding(const Bindings& b, const std::string& key) {
  auto it = b.find(key);
  if (it == b.end()) throw BackendError("missing binding '" + key + "'");
  return it->second;
}

inline constexpr std::string_view kMockRevisionPrefix = "It is not the case that ";

enum class MockJudge {
  reference_overlap,  // scores from fact overlap with the reference
  prefer_longer,      // higher score for the longer answer
  prefer_first,       // always prefers position 1
};

// Deterministic offline backend: a pure function of (template name, bindings).
//   extract          -> sentence split, one "- " bullet per sentence
//   rewrite_question -> "Regarding: f1; f2?"
//   rewrite_answer   -> facts joined by a newline
//   revise           -> "It is not the case that " + fact
//   fact_judge       -> normalized substring containment in the reference
//   pairwise_judge   -> per MockJudge policy
class MockBackend final : public RewriteBackend {
 public:
  explicit MockBackend(MockJudge judge = MockJudge::reference_overlap) : judge_(judge) {}

  static std::string rewrite_answer(const std::vector<std::string>& facts) {
    std::vector<std::string> terminated;
    for (const auto& f : facts) terminated.push_back(terminate_fact(f));
    return detail::join(terminated, "\n");
  }

  static std::string rewrite_question(const std::vector<std::string>& facts) {
    std::vector<std::string> stripped;
    for (const auto& f : facts) stripped.push_back(detail::strip_terminators(f));
    return "Regarding: " + detail::join(stripped, "; ") + "?";
  }

  static bool fact_supported(std::string_view fact, std::string_view reference) {
    const std::string f = detail::normalize_for_match(fact);
    return !f.empty() && detail::normalize_for_match(reference).find(f) != std::string::npos;
  }

  // 1..10 score of `answer` against `reference` for one aspect.
  static int overlap_score(Aspect aspect, std::string_view answer, std::string_view reference) {
    const auto ref_facts = detail::split_sentences(reference);
    const auto ans_facts = detail::split_sentences(answer);
    double frac = 0.0;
    switch (aspect) {
      case Aspect::completeness: {
        if (ref_facts.empty()) break;
        int hit = 0;
        for (const auto& r : ref_facts) hit += fact_supported(r, answer) ? 1 : 0;
        frac = static_cast<double>(hit) / static_cast<double>(ref_facts.size());
        break;
      }
      case Aspect::factuality: {
        if (ans_facts.empty()) break;
        int hit = 0;
        for (const auto& a : ans_facts) hit += fact_supported(a, reference) ? 1 : 0;
        frac = static_cast<double>(hit) / static_cast<double>(ans_facts.size());
        break;
      }
      case Aspect::logicality: {
        // Fraction of supported answer sentences that appear in reference order.
        std::vector<std::size_t> positions;
        const std::string ref = detail::normalize_for_match(reference);
        for (const auto& a : ans_facts) {
          const std::string n = detail::normalize_for_match(a);
          const auto p = n.empty() ? std::string::npos : ref.find(n);
          if (p != std::string::npos) positions.push_back(p);
        }
        if (positions.size() < 2) {
          frac = positions.empty() ? 0.0 : 1.0;
          break;
        }
        int ordered = 0;
        for (std::size_t i = 1; i < positions.size(); ++i) ordered += positions[i] > positions[i - 1] ? 1 : 0;
        frac = static_cast<double>(ordered) / static_cast<double>(positions.size() - 1);
        break;
      }
    }
    return 1 + static_cast<int>(std::floor(9.0 * frac + 0.5));
  }

 protected:
  std::string do_complete(const PromptTemplate& tmpl, const Bindings& b, const std::string&,
                          unsigned) override {
    const std::string& name = tmpl.name;
    if (name == templates::kExtract) {
      std::vector<std::string> facts;
      for (auto& s : detail::split_sentences(binding(b, "answer"))) facts.push_back(std::move(s));
      return render_fact_list(facts);
    }
    if (name == templates::kRewriteQuestion) return rewrite_question(parse_fact_list(binding(b, "facts")));
    if (name == templates::kRewriteAnswer) return rewrite_answer(parse_fact_list(binding(b, "facts")));
    if (name == templates::kRevise) return std::string(kMockRevisionPrefix) + detail::trim(binding(b, "fact"));
    if (name == templates::kFactJudge) return fact_supported(binding(b, "fact"), binding(b, "reference")) ? "True" : "False";
    if (name == templates::kPairwiseJudge) return judge_pair(b);
    throw BackendError("mock backend has no behaviour for template '" + name + "'");
  }

 private:
  std::string judge_pair(const Bindings& b) const {
    const std::string& a1 = binding(b, "answer_1");
    const std::string& a2 = binding(b, "answer_2");
    int s1 = 5;
    int s2 = 5;
    switch (judge_) {
      case MockJudge::prefer_first:
        s1 = 8;
        s2 = 4;
        break;
      case MockJudge::prefer_longer:
        if (a1.size() != a2.size()) {
          s1 = a1.size() > a2.size() ? 8 : 4;
          s2 = a1.size() > a2.size() ? 4 : 8;
        }
        break;
      case MockJudge::reference_overlap: {
        const auto aspect = parse_aspect(binding(b, "aspect")).value_or(Aspect::factuality);
        s1 = overlap_score(aspect, a1, binding(b, "reference"));
        s2 = overlap_score(aspect, a2, binding(b, "reference"));
        break;
      }
    }
    return std::to_string(s1) + " " + std::to_string(s2) + "\nMock judgement.";
  }

  MockJudge judge_;
};

// Built-in template bodies. The files under templates/ carry the same text and
// may be edited; TemplateSet::load_dir picks them up.
inline PromptTemplate templates::builtin(std::string_view name) {
  PromptTemplate t;
  t.name = std::string(name);
  if (name == kExtract) {
    t.body =
        "Please break down the following answer into independent atomic facts. An atomic fact is a "
        "short statement that conveys exactly one piece of knowledge and is finer-grained than a "
        "sentence.\n"
        "Output one fact per line, each line starting with \"- \". Keep the order in which the facts "
        "appear in the answer. Do not add knowledge that the answer does not state.\n"
        "\n"
        "Example answer: Marie Curie was a Polish-born physicist who won two Nobel Prizes.\n"
        "Example facts:\n"
        "- Marie Curie was a physicist.\n"
        "- Marie Curie was born in Poland.\n"
        "- Marie Curie won two Nobel Prizes.\n"
        "\n"
        "Answer: {answer}\n"
        "Facts:\n";
  } else if (name == kRewriteQuestion) {
    t.body =
        "You are given a question and a list of knowledge statements taken from its answer.\n"
        "Rewrite the question into a fine-grained question whose answer is exactly the listed "
        "knowledge. Keep the subject of the original question. Output only the rewritten question.\n"
        "\n"
        "Question: {question}\n"
        "Knowledge:\n"
        "{facts}\n"
        "Fine-grained question:\n";
  } else if (name == kRewriteAnswer) {
    t.body =
        "Rewrite the following knowledge statements into a fluent, well-organized answer.\n"
        "Use every statement, keep each one factually unchanged, and do not add new knowledge. "
        "Output only the answer.\n"
        "\n"
        "Knowledge:\n"
        "{facts}\n"
        "Answer:\n";
  } else if (name == kRevise) {
    t.body =
        "Revise the following fact into an incorrect fact. Change its key information (an entity, a "
        "number, a date, a place or a relation) so that the statement becomes false, while keeping "
        "its wording and length similar. Output only the revised fact.\n"
        "\n"
        "Fact: {fact}\n"
        "Incorrect fact:\n";
  } else if (name == kFactJudge) {
    t.body =
        "Answer the question about the fact based on the given reference answer.\n"
        "\n"
        "Reference: {reference}\n"
        "\n"
        "Input: {fact} True or False?\n"
        "Output:\n";
  } else if (name == kPairwiseJudge) {
    t.body =
        "[System]\n"
        "Please act as an impartial judge and evaluate the {aspect} of the answers provided by two "
        "AI assistants to the user question displayed below. {aspect_definition} You will be given a "
        "reference answer, assistant 1's answer, and assistant 2's answer. Compare both answers with "
        "the reference answer and rate each of them on a scale of 1 to 10, where a higher score "
        "indicates better {aspect}. Do not let the order in which the answers are presented or their "
        "length influence your judgement. Be as objective as possible.\n"
        "Output a single line containing only two values indicating the scores for Assistant 1 and 2, "
        "respectively, separated by a space. On the next line, give a short explanation.\n"
        "\n"
        "[Question]\n"
        "{question}\n"
        "\n"
        "[The Start of Reference Answer]\n"
        "{reference}\n"
        "[The End of Reference Answer]\n"
        "\n"
        "[The Start of Assistant 1's Answer]\n"
        "{answer_1}\n"
        "[The End of Assistant 1's Answer]\n"
        "\n"
        "[The Start of Assistant 2's Answer]\n"
        "{answer_2}\n"
        "[The End of Assistant 2's Answer]\n";
  } else {
    throw TemplateError("no built-in template named '" + t.name + "'");
  }
  return t;
}

inline std::string_view aspect_definition(Aspect a) {
  switch (a) {
    case Aspect::completeness:
      return "Completeness: does the answer give all of the knowledge the question calls for?";
    case Aspect::factuality:
      return "Factuality: is every piece of knowledge in the answer correct?";
    case Aspect::logicality:
      return "Logicality: is the knowledge in the answer presented in a coherent, well-structured order?";
  }
  return "";
}

}  // namespace kaft

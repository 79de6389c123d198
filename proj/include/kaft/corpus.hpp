#pragma once

// Data model and line-delimited JSON IO for every dataset the pipeline reads
// or writes. One object per line, explicit field names, UTF-8.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kaft/detail/text.hpp"
#include "kaft/error.hpp"

namespace kaft {

using Json = nlohmann::ordered_json;

struct QAPair {
  std::string id;
  std::string question;
  std::string answer;
  std::optional<std::string> reference;

  bool operator==(const QAPair&) const = default;
};

// Atomic facts extracted from one answer, in answer order.
struct FactSet {
  std::string source_id;
  std::vector<std::string> facts;

  bool operator==(const FactSet&) const = default;
};

struct ScoredFact {
  std::string fact;
  double ppl = 1.0;

  bool operator==(const ScoredFact&) const = default;
};

struct ScoredFactSet {
  std::string source_id;
  std::vector<ScoredFact> entries;

  bool operator==(const ScoredFactSet&) const = default;
};

enum class Aspect { completeness, factuality, logicality };

inline constexpr Aspect kAllAspects[] = {Aspect::completeness, Aspect::factuality,
                                         Aspect::logicality};

inline std::string_view to_string(Aspect a) {
  switch (a) {
    case Aspect::completeness: return "completeness";
    case Aspect::factuality: return "factuality";
    case Aspect::logicality: return "logicality";
  }
  return "?";
}

inline std::optional<Aspect> parse_aspect(std::string_view s) {
  for (Aspect a : kAllAspects) {
    if (to_string(a) == s) return a;
  }
  return std::nullopt;
}

// Id suffix for comparison records derived from a source pair.
inline std::string_view aspect_suffix(Aspect a) {
  switch (a) {
    case Aspect::completeness: return ".kcc";
    case Aspect::factuality: return ".kfc";
    case Aspect::logicality: return ".klc";
  }
  return ".k?";
}

inline constexpr std::string_view kFineGrainedSuffix = ".fg";

struct ComparisonPair {
  std::string id;
  std::string question;
  std::string preferred;
  std::string dispreferred;
  Aspect aspect = Aspect::completeness;

  bool operator==(const ComparisonPair&) const = default;
};

enum class DatasetKind { sft, comparison };

inline std::string_view to_string(DatasetKind k) {
  return k == DatasetKind::sft ? "sft" : "comparison";
}

// Homogeneous collection: `pairs` is used for sft datasets, `comparisons` for
// comparison datasets; the other vector stays empty.
struct Dataset {
  DatasetKind kind = DatasetKind::sft;
  std::vector<QAPair> pairs;
  std::vector<ComparisonPair> comparisons;

  static Dataset sft(std::vector<QAPair> records = {}) {
    return Dataset{DatasetKind::sft, std::move(records), {}};
  }
  static Dataset comparison(std::vector<ComparisonPair> records = {}) {
    return Dataset{DatasetKind::comparison, {}, std::move(records)};
  }

  std::size_t size() const {
    return kind == DatasetKind::sft ? pairs.size() : comparisons.size();
  }
  bool empty() const { return size() == 0; }

  bool operator==(const Dataset&) const = default;
};

namespace detail {

inline bool blank(std::string_view s) { return trim(s).empty(); }

inline std::string require_string(const Json& j, const char* field, bool non_empty) {
  if (!j.contains(field)) throw DatasetError(std::string("missing field '") + field + "'");
  if (!j.at(field).is_string()) throw DatasetError(std::string("field '") + field + "' is not a string");
  std::string v = j.at(field).get<std::string>();
  if (non_empty && blank(v)) throw DatasetError(std::string("field '") + field + "' is empty");
  return v;
}

inline void reject_unknown_fields(const Json& j, std::initializer_list<std::string_view> known) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || key == k;
    if (!ok) throw DatasetError("unknown field '" + key + "'");
  }
}

template <typename Fn>
void for_each_record_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> problems;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    try {
      fn(Json::parse(line), line_no);
    } catch (const Json::exception& e) {
      problems.push_back("line " + std::to_string(line_no) + ": malformed record (" + e.what() + ")");
    } catch (const DatasetError& e) {
      problems.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    throw DatasetError(path.string() + ": " + join(problems, "; "));
  }
}

inline void write_lines(const std::filesystem::path& path, const std::vector<Json>& records) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write " + path.string());
  for (const auto& r : records) out << r.dump() << '\n';
  if (!out) throw DatasetError("write failed for " + path.string());
}

}  // namespace detail

inline Json to_json(const QAPair& p) {
  Json j{{"id", p.id}, {"question", p.question}, {"answer", p.answer}};
  if (p.reference) j["reference"] = *p.reference;
  return j;
}

inline QAPair qa_pair_from_json(const Json& j) {
  if (!j.is_object()) throw DatasetError("record is not an object");
  detail::reject_unknown_fields(j, {"id", "question", "answer", "reference"});
  QAPair p;
  p.id = detail::require_string(j, "id", true);
  p.question = detail::require_string(j, "question", true);
  p.answer = detail::require_string(j, "answer", true);
  if (j.contains("reference") && !j.at("reference").is_null()) {
    p.reference = detail::require_string(j, "reference", false);
  }
  return p;
}

inline Json to_json(const ComparisonPair& c) {
  return Json{{"id", c.id},
              {"question", c.question},
              {"preferred", c.preferred},
              {"dispreferred", c.dispreferred},
              {"aspect", std::string(to_string(c.aspect))}};
}

inline ComparisonPair comparison_pair_from_json(const Json& j) {
  if (!j.is_object()) throw DatasetError("record is not an object");
  detail::reject_unknown_fields(j, {"id", "question", "preferred", "dispreferred", "aspect"});
  ComparisonPair c;
  c.id = detail::require_string(j, "id", true);
  c.question = detail::require_string(j, "question", true);
  c.preferred = detail::require_string(j, "preferred", true);
  c.dispreferred = detail::require_string(j, "dispreferred", true);
  const std::string aspect = detail::require_string(j, "aspect", true);
  auto a = parse_aspect(aspect);
  if (!a) throw DatasetError("unknown aspect '" + aspect + "'");
  c.aspect = *a;
  if (c.preferred == c.dispreferred) throw DatasetError("preferred equals dispreferred");
  return c;
}

// Throws DatasetError naming every duplicated id.
inline void check_unique_ids(const Dataset& ds) {
  std::set<std::string> seen;
  std::vector<std::string> dups;
  auto visit = [&](const std::string& id) {
    if (!seen.insert(id).second) dups.push_back(id);
  };
  for (const auto& p : ds.pairs) visit(p.id);
  for (const auto& c : ds.comparisons) visit(c.id);
  if (!dups.empty()) throw DatasetError("duplicate id(s): " + detail::join(dups, ", "));
}

inline Dataset load_dataset(const std::filesystem::path& path, DatasetKind kind) {
  if (!std::filesystem::exists(path)) throw DatasetError("missing file " + path.string());
  Dataset ds{kind, {}, {}};
  std::set<std::string> seen;
  detail::for_each_record_line(path, [&](const Json& j, std::size_t) {
    std::string id;
    if (kind == DatasetKind::sft) {
      ds.pairs.push_back(qa_pair_from_json(j));
      id = ds.pairs.back().id;
    } else {
      ds.comparisons.push_back(comparison_pair_from_json(j));
      id = ds.comparisons.back().id;
    }
    if (!seen.insert(id).second) throw DatasetError("duplicate id '" + id + "'");
  });
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::vector<Json> lines;
  lines.reserve(ds.size());
  if (ds.kind == DatasetKind::sft) {
    for (const auto& p : ds.pairs) lines.push_back(to_json(p));
  } else {
    for (const auto& c : ds.comparisons) lines.push_back(to_json(c));
  }
  detail::write_lines(path, lines);
}

// Set union as concatenation. Colliding ids are an error, never merged.
inline Dataset union_datasets(const std::vector<const Dataset*>& parts) {
  if (parts.empty()) return Dataset::sft();
  Dataset out{parts.front()->kind, {}, {}};
  for (const Dataset* d : parts) {
    if (d->kind != out.kind) throw DatasetError("cannot union datasets of different kinds");
    out.pairs.insert(out.pairs.end(), d->pairs.begin(), d->pairs.end());
    out.comparisons.insert(out.comparisons.end(), d->comparisons.begin(), d->comparisons.end());
  }
  check_unique_ids(out);
  return out;
}

inline Json to_json(const FactSet& fs) {
  return Json{{"source_id", fs.source_id}, {"facts", fs.facts}};
}

inline FactSet fact_set_from_json(const Json& j) {
  if (!j.is_object()) throw DatasetError("record is not an object");
  detail::reject_unknown_fields(j, {"source_id", "facts"});
  FactSet fs;
  fs.source_id = detail::require_string(j, "source_id", true);
  if (!j.contains("facts") || !j.at("facts").is_array()) throw DatasetError("missing array 'facts'");
  for (const auto& f : j.at("facts")) {
    if (!f.is_string() || detail::blank(f.get<std::string>())) throw DatasetError("empty fact");
    fs.facts.push_back(f.get<std::string>());
  }
  if (fs.facts.empty()) throw DatasetError("fact set is empty");
  return fs;
}

inline void save_fact_sets(const std::vector<FactSet>& sets, const std::filesystem::path& path) {
  std::vector<Json> lines;
  for (const auto& fs : sets) lines.push_back(to_json(fs));
  detail::write_lines(path, lines);
}

inline std::vector<FactSet> load_fact_sets(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DatasetError("missing fact-set file " + path.string());
  std::vector<FactSet> out;
  detail::for_each_record_line(path, [&](const Json& j, std::size_t) {
    out.push_back(fact_set_from_json(j));
  });
  return out;
}

inline Json to_json(const ScoredFactSet& s) {
  Json entries = Json::array();
  for (const auto& e : s.entries) entries.push_back(Json{{"fact", e.fact}, {"ppl", e.ppl}});
  return Json{{"source_id", s.source_id}, {"entries", entries}};
}

inline ScoredFactSet scored_fact_set_from_json(const Json& j) {
  if (!j.is_object()) throw DatasetError("record is not an object");
  detail::reject_unknown_fields(j, {"source_id", "entries"});
  ScoredFactSet s;
  s.source_id = detail::require_string(j, "source_id", true);
  if (!j.contains("entries") || !j.at("entries").is_array()) throw DatasetError("missing array 'entries'");
  for (const auto& e : j.at("entries")) {
    ScoredFact f;
    f.fact = detail::require_string(e, "fact", true);
    if (!e.contains("ppl") || !e.at("ppl").is_number()) throw DatasetError("missing number 'ppl'");
    f.ppl = e.at("ppl").get<double>();
    if (!(f.ppl > 0.0)) throw DatasetError("ppl must be positive");
    s.entries.push_back(std::move(f));
  }
  return s;
}

inline void save_scored_fact_sets(const std::vector<ScoredFactSet>& sets,
                                  const std::filesystem::path& path) {
  std::vector<Json> lines;
  for (const auto& s : sets) lines.push_back(to_json(s));
  detail::write_lines(path, lines);
}

inline std::vector<ScoredFactSet> load_scored_fact_sets(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DatasetError("missing score file " + path.string());
  std::vector<ScoredFactSet> out;
  detail::for_each_record_line(path, [&](const Json& j, std::size_t) {
    out.push_back(scored_fact_set_from_json(j));
  });
  return out;
}

}  // namespace kaft

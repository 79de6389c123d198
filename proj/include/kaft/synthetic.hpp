#pragma once

// Templated entity-attribute QA generator. Every answer is a sequence of
// single-fact sentences about one fictional entity, so the gold facts of each
// record are known exactly. The reference equals the answer.

#include <set>
#include <string>
#include <vector>

#include "kaft/corpus.hpp"
#include "kaft/detail/rng.hpp"

namespace kaft::synthetic {

namespace detail {

inline const std::vector<std::string> kOnsets = {"Bar", "Cel", "Dor", "Fen", "Gal", "Hal", "Ith", "Jor", "Kel",
                                                 "Lum", "Mar", "Nor", "Orm", "Pel", "Quen", "Ros", "Sel", "Tam",
                                                 "Ul", "Vor", "Wen", "Yar", "Zel", "Ast"};
inline const std::vector<std::string> kCodas = {"adan", "enor", "iric", "ovan", "usta", "emir", "alis", "oden",
                                                "arth", "ella", "inor", "uvia", "ekai", "osso"};
inline const std::vector<std::string> kCities = {"Pelmora", "Avendale", "Kestrel Bay", "Norhaven", "Tilbury Cross",
                                                 "Marrowdeep", "Ostvik", "Quillon", "Rensby", "Sablecourt"};
inline const std::vector<std::string> kProfessions = {"cartographer", "botanist", "glassblower", "astronomer",
                                                      "violinist", "shipwright", "archivist", "engineer",
                                                      "beekeeper", "historian"};
inline const std::vector<std::string> kOrgs = {"Lantern Guild", "River Society", "Northern Atlas Office",
                                               "Copper Press", "Meridian Academy", "Harbor Trust",
                                               "Silent Choir", "Granite Observatory"};
inline const std::vector<std::string> kKnownFor = {"mapping the eastern marshes", "a treatise on tidal clocks",
                                                   "restoring the old lighthouse", "breeding frost-resistant pears",
                                                   "the first folding telescope", "a catalogue of moth species",
                                                   "reforming the postal routes", "a long poem about salt"};
inline const std::vector<std::string> kLanguages = {"Old Verin", "Tessan", "Maruvic", "Lowland Cant",
                                                    "High Orlish", "Sennic"};
inline const std::vector<std::string> kCountries = {"Arvenia", "Dalmorra", "Estrelle", "Kovany", "Lisreth",
                                                    "Tolvar"};
inline const std::vector<std::string> kQuestions = {"Who is {name}?", "What do you know about {name}?",
                                                    "Tell me about {name}.", "Can you describe {name}?"};

inline const std::string& pick(const std::vector<std::string>& v, kaft::detail::Rng& rng) {
  return v[rng.index(v.size())];
}

inline std::string replace_name(std::string tmpl, const std::string& name) {
  const auto p = tmpl.find("{name}");
  if (p != std::string::npos) tmpl.replace(p, 6, name);
  return tmpl;
}

}  // namespace detail

struct GeneratorOptions {
  std::size_t count = 50;
  std::uint64_t seed = 7;
  std::string id_prefix = "syn";
  std::size_t min_facts = 2;
  std::size_t max_facts = 5;
};

inline Dataset generate(const GeneratorOptions& opt) {
  using detail::pick;
  kaft::detail::Rng rng(opt.seed, "synthetic:" + opt.id_prefix);
  std::set<std::string> names;
  Dataset ds = Dataset::sft();
  const std::size_t capacity = detail::kOnsets.size() * detail::kCodas.size() * detail::kOnsets.size();
  if (opt.count > capacity) throw Error("synthetic generator cannot produce that many distinct entities");
  if (opt.min_facts < 1 || opt.max_facts < opt.min_facts || opt.max_facts > 6) {
    throw Error("synthetic fact count range must satisfy 1 <= min <= max <= 6");
  }
  for (std::size_t i = 0; i < opt.count; ++i) {
    std::string name;
    do {
      name = pick(detail::kOnsets, rng) + pick(detail::kCodas, rng) + " " + pick(detail::kOnsets, rng) +
             pick(detail::kCodas, rng);
    } while (!names.insert(name).second);

    std::vector<std::string> pool = {
        name + " was born in " + pick(detail::kCities, rng) + ".",
        name + " works as a " + pick(detail::kProfessions, rng) + ".",
        name + " founded the " + pick(detail::kOrgs, rng) + " in " + std::to_string(1700 + rng.index(250)) + ".",
        name + " is known for " + pick(detail::kKnownFor, rng) + ".",
        name + " speaks " + pick(detail::kLanguages, rng) + ".",
        name + " lives in " + pick(detail::kCountries, rng) + ".",
    };
    const std::size_t n_facts = opt.min_facts + rng.index(opt.max_facts - opt.min_facts + 1);
    // Keep the birth fact first so answers read in a natural order.
    std::vector<std::string> rest(pool.begin() + 1, pool.end());
    rng.shuffle(rest);
    std::vector<std::string> facts = {pool.front()};
    for (std::size_t k = 0; facts.size() < n_facts; ++k) facts.push_back(rest[k]);

    char id[64];
    std::snprintf(id, sizeof id, "%s-%04zu", opt.id_prefix.c_str(), i + 1);
    std::string answer = kaft::detail::join(facts, " ");
    ds.pairs.push_back(QAPair{id, detail::replace_name(pick(detail::kQuestions, rng), name), answer, answer});
  }
  return ds;
}

}  // namespace kaft::synthetic

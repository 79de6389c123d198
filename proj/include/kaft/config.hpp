#pragma once

// Run configuration: one JSON file with a section per module. Unknown keys
// and out-of-range values are collected and reported together.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kaft/pipeline.hpp"
#include "kaft/remote_backend.hpp"
#include "kaft/synthetic.hpp"

namespace kaft {

struct CliConfig {
  std::optional<std::filesystem::path> input;       // sft dataset
  std::optional<std::filesystem::path> eval_input;  // defaults to input
  std::filesystem::path output_dir = "kaft_out";
  std::optional<std::filesystem::path> templates_dir;
  std::optional<synthetic::GeneratorOptions> synthetic;  // used when input is absent
  PipelineConfig pipeline;
  BackendConfig backend;
};

inline std::string_view to_string(BackendMode m) { return m == BackendMode::mock ? "mock" : "remote"; }

inline std::string_view to_string(MockJudge j) {
  switch (j) {
    case MockJudge::reference_overlap: return "reference_overlap";
    case MockJudge::prefer_longer: return "prefer_longer";
    case MockJudge::prefer_first: return "prefer_first";
  }
  return "?";
}

namespace detail {

// Typed field reader that records problems instead of throwing.
class Section {
 public:
  Section(const Json& j, std::string name, std::vector<std::string>& errors)
      : j_(j), name_(std::move(name)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(name_ + ": expected an object");
  }

  ~Section() {
    if (!j_.is_object()) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) errors_.push_back(name_ + ": unknown key '" + key + "'");
    }
  }

  template <typename T>
  void read(const char* key, T& into) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      into = j_.at(key).get<T>();
    } catch (const Json::exception&) {
      errors_.push_back(name_ + "." + key + ": wrong type");
    }
  }

  template <typename T>
  void read(const char* key, std::optional<T>& into) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key) || j_.at(key).is_null()) return;
    try {
      into = j_.at(key).get<T>();
    } catch (const Json::exception&) {
      errors_.push_back(name_ + "." + key + ": wrong type");
    }
  }

  void read_path(const char* key, std::optional<std::filesystem::path>& into) {
    std::optional<std::string> s;
    read(key, s);
    if (s) into = *s;
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  const std::string& name() const { return name_; }

 private:
  const Json& j_;
  std::string name_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

inline void read_stage(Section& parent, const char* key, TrainStageConfig& s, std::vector<std::string>& errors) {
  if (const Json* j = parent.child(key)) {
    Section sec(*j, parent.name() + "." + key, errors);
    sec.read("learning_rate", s.learning_rate);
    sec.read("epochs", s.epochs);
    sec.read("batch_size", s.batch_size);
  }
}

}  // namespace detail

inline CliConfig config_from_json(const Json& root) {
  CliConfig c;
  std::vector<std::string> errors;
  {
    detail::Section top(root, "config", errors);
    top.read("seed", c.pipeline.seed);
    if (const Json* j = top.child("paths")) {
      detail::Section s(*j, "paths", errors);
      s.read_path("input", c.input);
      s.read_path("eval_input", c.eval_input);
      std::optional<std::filesystem::path> out;
      s.read_path("output_dir", out);
      if (out) c.output_dir = *out;
      s.read_path("templates_dir", c.templates_dir);
    }
    if (const Json* j = top.child("synthetic")) {
      detail::Section s(*j, "synthetic", errors);
      synthetic::GeneratorOptions g;
      s.read("count", g.count);
      s.read("seed", g.seed);
      s.read("id_prefix", g.id_prefix);
      s.read("min_facts", g.min_facts);
      s.read("max_facts", g.max_facts);
      c.synthetic = g;
    }
    if (const Json* j = top.child("knowledge_ops")) {
      detail::Section s(*j, "knowledge_ops", errors);
      s.read("delete_fraction", c.pipeline.delete_fraction);
    }
    if (const Json* j = top.child("losses")) {
      detail::Section s(*j, "losses", errors);
      s.read("dpo_beta", c.pipeline.loss.dpo_beta);
      s.read("sft_weight", c.pipeline.loss.sft_weight);
    }
    if (const Json* j = top.child("pipeline")) {
      detail::Section s(*j, "pipeline", errors);
      s.read("filter_fraction", c.pipeline.filter_fraction);
      detail::read_stage(s, "stage1", c.pipeline.stage1, errors);
      detail::read_stage(s, "stage2", c.pipeline.stage2, errors);
      s.read("lr_scale", c.pipeline.lr_scale);
      s.read("context_order", c.pipeline.context_order);
      s.read("workers", c.pipeline.workers);
      s.read("max_answer_tokens", c.pipeline.max_answer_tokens);
    }
    if (const Json* j = top.child("backend")) {
      detail::Section s(*j, "backend", errors);
      std::string mode = "mock";
      s.read("mode", mode);
      if (mode == "mock") {
        c.backend.mode = BackendMode::mock;
      } else if (mode == "remote") {
        c.backend.mode = BackendMode::remote;
      } else {
        errors.push_back("backend.mode: must be 'mock' or 'remote'");
      }
      s.read("endpoint", c.backend.endpoint);
      s.read("model", c.backend.model_name);
      std::optional<std::filesystem::path> cache;
      s.read_path("cache_dir", cache);
      if (cache) c.backend.cache_dir = *cache;
      s.read("api_key_env", c.backend.api_key_env);
      s.read("max_attempts", c.backend.max_attempts);
      s.read("backoff_ms", c.backend.backoff_ms);
      s.read("max_in_flight", c.backend.max_in_flight);
      s.read("timeout_s", c.backend.timeout_s);
      std::string judge = std::string(to_string(c.backend.mock_judge));
      s.read("mock_judge", judge);
      if (judge == "reference_overlap") {
        c.backend.mock_judge = MockJudge::reference_overlap;
      } else if (judge == "prefer_longer") {
        c.backend.mock_judge = MockJudge::prefer_longer;
      } else if (judge == "prefer_first") {
        c.backend.mock_judge = MockJudge::prefer_first;
      } else {
        errors.push_back("backend.mock_judge: unknown judge '" + judge + "'");
      }
    }
  }
  if (!errors.empty()) throw ConfigError(detail::join(errors, "\n"));
  return c;
}

// Every violation of the effective configuration.
inline std::vector<std::string> config_violations(const CliConfig& c) {
  std::vector<std::string> v = c.pipeline.violations();
  if (!c.input && !c.synthetic) v.push_back("paths.input is required unless a synthetic section is given");
  if (c.backend.mode == BackendMode::remote) {
    if (!c.backend.endpoint || c.backend.endpoint->empty()) v.push_back("backend.endpoint is required in remote mode");
    if (!c.backend.model_name || c.backend.model_name->empty()) v.push_back("backend.model is required in remote mode");
  }
  if (c.backend.max_attempts < 1) v.push_back("backend.max_attempts must be >= 1");
  if (c.backend.backoff_ms < 0) v.push_back("backend.backoff_ms must be >= 0");
  if (c.backend.max_in_flight < 1) v.push_back("backend.max_in_flight must be >= 1");
  if (c.synthetic) {
    if (c.synthetic->count == 0) v.push_back("synthetic.count must be > 0");
    if (c.synthetic->min_facts < 1 || c.synthetic->max_facts < c.synthetic->min_facts || c.synthetic->max_facts > 6) {
      v.push_back("synthetic fact range must satisfy 1 <= min_facts <= max_facts <= 6");
    }
  }
  return v;
}

inline void validate(const CliConfig& c) {
  const auto v = config_violations(c);
  if (!v.empty()) throw ConfigError(detail::join(v, "\n"));
}

inline Json to_json(const CliConfig& c) {
  Json paths{{"output_dir", c.output_dir.string()}};
  if (c.input) paths["input"] = c.input->string();
  if (c.eval_input) paths["eval_input"] = c.eval_input->string();
  if (c.templates_dir) paths["templates_dir"] = c.templates_dir->string();
  Json j{{"seed", c.pipeline.seed}, {"paths", paths}};
  if (c.synthetic) {
    j["synthetic"] = Json{{"count", c.synthetic->count},
                          {"seed", c.synthetic->seed},
                          {"id_prefix", c.synthetic->id_prefix},
                          {"min_facts", c.synthetic->min_facts},
                          {"max_facts", c.synthetic->max_facts}};
  }
  const auto& p = c.pipeline;
  j["knowledge_ops"] = Json{{"delete_fraction", p.delete_fraction}};
  j["losses"] = Json{{"dpo_beta", p.loss.dpo_beta}, {"sft_weight", p.loss.sft_weight}};
  j["pipeline"] = Json{{"filter_fraction", p.filter_fraction},
                       {"stage1", to_json(p.stage1)},
                       {"stage2", to_json(p.stage2)},
                       {"lr_scale", p.lr_scale},
                       {"context_order", p.context_order},
                       {"workers", p.workers},
                       {"max_answer_tokens", p.max_answer_tokens}};
  Json b{{"mode", std::string(to_string(c.backend.mode))},
         {"cache_dir", c.backend.cache_dir.string()},
         {"api_key_env", c.backend.api_key_env},
         {"max_attempts", c.backend.max_attempts},
         {"backoff_ms", c.backend.backoff_ms},
         {"max_in_flight", c.backend.max_in_flight},
         {"timeout_s", c.backend.timeout_s},
         {"mock_judge", std::string(to_string(c.backend.mock_judge))}};
  if (c.backend.endpoint) b["endpoint"] = *c.backend.endpoint;
  if (c.backend.model_name) b["model"] = *c.backend.model_name;
  j["backend"] = b;
  return j;
}

// The bundled demo: 50 synthetic pairs, mock backend, default hyperparameters.
inline Json demo_config_json() {
  return Json{{"seed", 0},
              {"paths", Json{{"output_dir", "kaft_demo"}}},
              {"synthetic", Json{{"count", 50}, {"seed", 7}, {"id_prefix", "syn"}}},
              {"backend", Json{{"mode", "mock"}}}};
}

inline CliConfig load_config(const std::string& path_or_preset) {
  if (path_or_preset == "demo") return config_from_json(demo_config_json());
  std::ifstream in(path_or_preset, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path_or_preset);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("config " + path_or_preset + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace kaft

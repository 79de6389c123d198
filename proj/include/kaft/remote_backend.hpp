#pragma once

// OpenAI-compatible chat-completions backend with an on-disk,
// content-addressed response cache, bounded retries and an in-flight limit.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <semaphore>
#include <sstream>
#include <string>
#include <thread>

#include "kaft/detail/hash.hpp"
#include "kaft/llm_client.hpp"

namespace kaft {

enum class BackendMode { mock, remote };

struct BackendConfig {
  BackendMode mode = BackendMode::mock;
  std::optional<std::string> endpoint;    // base URL or full .../chat/completions URL
  std::optional<std::string> model_name;
  std::filesystem::path cache_dir = ".kaft_cache";
  std::string api_key_env = "KAFT_API_KEY";
  int max_attempts = 3;
  int backoff_ms = 500;  // doubled after each failed attempt
  int max_in_flight = 4;
  int timeout_s = 120;
  MockJudge mock_judge = MockJudge::reference_overlap;
};

namespace detail {

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline ParsedUrl parse_chat_url(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw ConfigError("invalid endpoint URL '" + url + "'");
  ParsedUrl out{m[1].str(), m[2].matched ? m[2].str() : std::string()};
  while (!out.path.empty() && out.path.back() == '/') out.path.pop_back();
  const std::string suffix = "/chat/completions";
  if (out.path.size() < suffix.size() ||
      out.path.compare(out.path.size() - suffix.size(), suffix.size(), suffix) != 0) {
    out.path += out.path.empty() ? "/v1" + suffix : suffix;
  }
  return out;
}

}  // namespace detail

class RemoteBackend final : public RewriteBackend {
 public:
  explicit RemoteBackend(BackendConfig cfg)
      : cfg_(std::move(cfg)), in_flight_(std::max(1, cfg_.max_in_flight)) {
    if (!cfg_.endpoint || cfg_.endpoint->empty()) throw ConfigError("remote backend requires an endpoint");
    if (!cfg_.model_name || cfg_.model_name->empty()) throw ConfigError("remote backend requires a model name");
    if (cfg_.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
    url_ = detail::parse_chat_url(*cfg_.endpoint);
    std::error_code ec;
    std::filesystem::create_directories(cfg_.cache_dir, ec);
    if (ec) throw ConfigError("cannot create cache dir " + cfg_.cache_dir.string() + ": " + ec.message());
  }

  BackendStats stats() const override {
    return BackendStats{calls_.load(), requests_.load(), hits_.load()};
  }

  std::uint64_t total_tokens() const { return tokens_.load(); }

  std::string cache_key(const PromptTemplate& tmpl, const std::string& rendered, unsigned variant) const {
    const Json key = Json::array({*cfg_.endpoint, *cfg_.model_name, rendered, tmpl.decoding.temperature,
                                  tmpl.decoding.max_tokens, variant});
    return detail::sha256_hex(key.dump());
  }

  std::filesystem::path cache_path(const std::string& key) const { return cfg_.cache_dir / (key + ".json"); }

 protected:
  std::string do_complete(const PromptTemplate& tmpl, const Bindings&, const std::string& rendered,
                          unsigned variant) override {
    const std::string key = cache_key(tmpl, rendered, variant);
    // One writer per key; concurrent identical calls wait and then hit the cache.
    std::shared_ptr<std::mutex> key_mu;
    {
      std::lock_guard lock(keys_mu_);
      auto& slot = key_locks_[key];
      if (!slot) slot = std::make_shared<std::mutex>();
      key_mu = slot;
    }
    std::lock_guard key_lock(*key_mu);
    if (auto cached = read_cache(key)) {
      ++hits_;
      return *cached;
    }
    std::string completion = request_with_retries(tmpl, rendered);
    write_cache(key, completion);
    return completion;
  }

 private:
  std::optional<std::string> read_cache(const std::string& key) const {
    std::ifstream in(cache_path(key), std::ios::binary);
    if (!in) return std::nullopt;
    try {
      Json j = Json::parse(in);
      return j.at("completion").get<std::string>();
    } catch (const Json::exception&) {
      return std::nullopt;  // unreadable entry is treated as a miss and rewritten
    }
  }

  void write_cache(const std::string& key, const std::string& completion) const {
    const auto final_path = cache_path(key);
    auto tmp = final_path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw BackendError("cannot write cache entry " + tmp.string());
      out << Json{{"completion", completion}}.dump() << '\n';
    }
    std::error_code ec;
    std::filesystem::rename(tmp, final_path, ec);
    if (ec) throw BackendError("cannot finalize cache entry: " + ec.message());
  }

  std::string request_with_retries(const PromptTemplate& tmpl, const std::string& rendered) {
    const Json body{{"model", *cfg_.model_name},
                    {"messages", Json::array({Json{{"role", "user"}, {"content", rendered}}})},
                    {"temperature", tmpl.decoding.temperature},
                    {"max_tokens", tmpl.decoding.max_tokens}};
    const std::string payload = body.dump();
    httplib::Headers headers;
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    std::string last_error;
    int delay_ms = cfg_.backoff_ms;
    for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
      {
        in_flight_.acquire();
        struct Release {
          std::counting_semaphore<>& s;
          ~Release() { s.release(); }
        } release{in_flight_};
        ++requests_;
        httplib::Client client(url_.origin);
        client.set_connection_timeout(cfg_.timeout_s, 0);
        client.set_read_timeout(cfg_.timeout_s, 0);
        auto res = client.Post(url_.path, headers, payload, "application/json");
        if (!res) {
          last_error = "transport error: " + httplib::to_string(res.error());
        } else if (res->status != 200) {
          last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
        } else {
          try {
            Json j = Json::parse(res->body);
            if (j.contains("usage") && j["usage"].contains("total_tokens")) {
              tokens_ += j["usage"]["total_tokens"].get<std::uint64_t>();
            }
            std::string content = j.at("choices").at(0).at("message").at("content").get<std::string>();
            if (detail::trim(content).empty()) {
              last_error = "empty completion";
            } else {
              return content;
            }
          } catch (const Json::exception& e) {
            last_error = std::string("malformed response: ") + e.what();
          }
        }
      }
      if (attempt < cfg_.max_attempts) {
        std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
        delay_ms *= 2;
      }
    }
    throw BackendError("request for template '" + tmpl.name + "' failed after " +
                       std::to_string(cfg_.max_attempts) + " attempt(s): " + last_error);
  }

  BackendConfig cfg_;
  detail::ParsedUrl url_;
  std::counting_semaphore<> in_flight_;
  std::mutex keys_mu_;
  std::map<std::string, std::shared_ptr<std::mutex>> key_locks_;
  std::atomic<std::uint64_t> requests_{0};
  std::atomic<std::uint64_t> hits_{0};
  std::atomic<std::uint64_t> tokens_{0};
};

inline std::unique_ptr<RewriteBackend> make_backend(const BackendConfig& cfg) {
  if (cfg.mode == BackendMode::mock) return std::make_unique<MockBackend>(cfg.mock_judge);
  return std::make_unique<RemoteBackend>(cfg);
}

}  // namespace kaft

#pragma once

// Shared test fixtures: scratch directories and a local chat-completions stub
// that answers the built-in prompts the way the mock backend would.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <random>
#include <string>
#include <thread>

#include "kaft/remote_backend.hpp"

namespace kt_test {

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "kt") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(rd()) + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

namespace detail {

inline std::string between(const std::string& s, const std::string& open, const std::string& close) {
  const auto a = s.find(open);
  if (a == std::string::npos) return {};
  const auto start = a + open.size();
  const auto b = s.rfind(close);
  if (b == std::string::npos || b < start) return {};
  return s.substr(start, b - start);
}

inline std::string after_last(const std::string& s, const std::string& open, const std::string& close) {
  const auto a = s.rfind(open);
  if (a == std::string::npos) return {};
  const auto start = a + open.size();
  const auto b = s.find(close, start);
  return b == std::string::npos ? std::string() : s.substr(start, b - start);
}

}  // namespace detail

// Recovers the template and bindings from a prompt rendered with the built-in
// templates and answers with the mock backend's completion.
inline std::string mock_reply_for_prompt(const std::string& prompt) {
  namespace kt = kaft;
  using detail::after_last;
  using detail::between;
  static kt::MockBackend mock;
  const auto& ts = mock.templates();
  kt::Bindings b;
  std::string_view name;
  if (prompt.find("independent atomic facts") != std::string::npos) {
    name = kt::templates::kExtract;
    b["answer"] = after_last(prompt, "\nAnswer: ", "\nFacts:\n");
  } else if (prompt.find("Fine-grained question:") != std::string::npos) {
    name = kt::templates::kRewriteQuestion;
    b["question"] = after_last(prompt, "\nQuestion: ", "\nKnowledge:\n");
    b["facts"] = between(prompt, "\nKnowledge:\n", "\nFine-grained question:");
  } else if (prompt.find("fluent, well-organized answer") != std::string::npos) {
    name = kt::templates::kRewriteAnswer;
    b["facts"] = between(prompt, "\nKnowledge:\n", "\nAnswer:\n");
  } else if (prompt.find("into an incorrect fact") != std::string::npos) {
    name = kt::templates::kRevise;
    b["fact"] = after_last(prompt, "\nFact: ", "\nIncorrect fact:");
  } else if (prompt.find("True or False?") != std::string::npos) {
    name = kt::templates::kFactJudge;
    b["reference"] = between(prompt, "Reference: ", "\n\nInput: ");
    b["fact"] = after_last(prompt, "\n\nInput: ", " True or False?");
  } else if (prompt.find("[System]") != std::string::npos) {
    name = kt::templates::kPairwiseJudge;
    const std::string aspect = after_last(prompt, "evaluate the ", " of the answers");
    b["aspect"] = aspect;
    b["aspect_definition"] = std::string(kt::aspect_definition(kt::parse_aspect(aspect).value()));
    b["question"] = after_last(prompt, "[Question]\n", "\n\n[The Start of Reference Answer]");
    b["reference"] = after_last(prompt, "[The Start of Reference Answer]\n", "\n[The End of Reference Answer]");
    b["answer_1"] = after_last(prompt, "[The Start of Assistant 1's Answer]\n", "\n[The End of Assistant 1's Answer]");
    b["answer_2"] = after_last(prompt, "[The Start of Assistant 2's Answer]\n", "\n[The End of Assistant 2's Answer]");
  } else {
    return "unrecognised prompt";
  }
  return mock.complete(ts.get(name), b);
}

// In-process OpenAI-style endpoint on 127.0.0.1.
class StubChatServer {
 public:
  using Responder = std::function<std::string(const std::string& prompt)>;

  explicit StubChatServer(Responder responder = mock_reply_for_prompt) : responder_(std::move(responder)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests_;
      if (failures_left_ > 0) {
        --failures_left_;
        res.status = 500;
        res.set_content("injected failure", "text/plain");
        return;
      }
      std::string prompt;
      try {
        const auto j = kaft::Json::parse(req.body);
        std::lock_guard lock(mu_);
        last_body_ = req.body;
        last_auth_ = req.get_header_value("Authorization");
        prompt = j.at("messages").at(0).at("content").get<std::string>();
      } catch (...) {
        res.status = 400;
        return;
      }
      std::string reply;
      try {
        reply = responder_(prompt);
      } catch (const std::exception& e) {
        res.status = 500;
        res.set_content(e.what(), "text/plain");
        return;
      }
      const kaft::Json out{
          {"choices", kaft::Json::array({kaft::Json{
                          {"message", kaft::Json{{"role", "assistant"}, {"content", reply}}}}})},
          {"usage", kaft::Json{{"total_tokens", 1}}}};
      res.set_content(out.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~StubChatServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::uint64_t requests() const { return requests_.load(); }
  void fail_next(int n) { failures_left_ = n; }
  std::string last_body() const {
    std::lock_guard lock(mu_);
    return last_body_;
  }
  std::string last_auth() const {
    std::lock_guard lock(mu_);
    return last_auth_;
  }

 private:
  Responder responder_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<std::uint64_t> requests_{0};
  std::atomic<int> failures_left_{0};
  mutable std::mutex mu_;
  std::string last_body_, last_auth_;
};

inline kaft::BackendConfig remote_config(const StubChatServer& s, const std::filesystem::path& cache) {
  kaft::BackendConfig c;
  c.mode = kaft::BackendMode::remote;
  c.endpoint = s.endpoint();
  c.model_name = "stub-model";
  c.cache_dir = cache;
  c.backoff_ms = 1;
  return c;
}

}  // namespace kt_test

#pragma once

// Tabular conditional-logit language model: each context (the previous
// `order` token ids) owns a row of V logits, and the next-token distribution
// is softmax(row). Log-probabilities and their gradients are exact, which is
// what the loss and perplexity tests rely on.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "kaft/detail/hash.hpp"
#include "kaft/detail/rng.hpp"
#include "kaft/error.hpp"

namespace kaft {

using TokenId = std::uint32_t;

// Single-byte symbols followed by BOS, EOS and PAD. Ids are dense in [0, V).
class Vocabulary {
 public:
  static Vocabulary byte_level() {
    std::string all(256, '\0');
    for (int i = 0; i < 256; ++i) all[i] = static_cast<char>(i);
    return from_symbols(all);
  }

  // `symbols` must be distinct bytes.
  static Vocabulary from_symbols(std::string_view symbols) {
    Vocabulary v;
    v.byte_to_id_.fill(-1);
    for (char c : symbols) {
      const auto b = static_cast<unsigned char>(c);
      if (v.byte_to_id_[b] != -1) throw Error("vocabulary symbols must be distinct");
      v.byte_to_id_[b] = static_cast<int>(v.symbols_.size());
      v.symbols_.push_back(c);
    }
    return v;
  }

  std::size_t size() const { return symbols_.size() + 3; }
  std::size_t content_size() const { return symbols_.size(); }
  TokenId bos() const { return static_cast<TokenId>(symbols_.size()); }
  TokenId eos() const { return bos() + 1; }
  TokenId pad() const { return bos() + 2; }
  bool is_special(TokenId id) const { return id >= bos(); }

  const std::string& symbols() const { return symbols_; }

  std::optional<TokenId> id_of(char c) const {
    const int id = byte_to_id_[static_cast<unsigned char>(c)];
    if (id < 0) return std::nullopt;
    return static_cast<TokenId>(id);
  }

  char symbol(TokenId id) const { return symbols_.at(id); }

  bool operator==(const Vocabulary& o) const { return symbols_ == o.symbols_; }

 private:
  std::string symbols_;
  std::array<int, 256> byte_to_id_{};
};

// BOS, content tokens, EOS.
struct TokenSequence {
  std::vector<TokenId> ids;

  std::span<const TokenId> content() const {
    if (ids.size() < 2) return {};
    return std::span<const TokenId>(ids).subspan(1, ids.size() - 2);
  }

  bool operator==(const TokenSequence&) const = default;
};

inline TokenSequence tokenize(const Vocabulary& vocab, std::string_view text) {
  TokenSequence seq;
  seq.ids.reserve(text.size() + 2);
  seq.ids.push_back(vocab.bos());
  for (char c : text) {
    auto id = vocab.id_of(c);
    if (!id) throw Error("byte " + std::to_string(static_cast<unsigned char>(c)) + " is not in the vocabulary");
    seq.ids.push_back(*id);
  }
  seq.ids.push_back(vocab.eos());
  return seq;
}

inline std::string detokenize(const Vocabulary& vocab, const TokenSequence& seq) {
  std::string out;
  for (TokenId id : seq.content()) {
    if (!vocab.is_special(id)) out.push_back(vocab.symbol(id));
  }
  return out;
}

using ContextKey = std::uint64_t;

// Logit rows keyed by context. Contexts with no row of their own read the
// shared fallback row. The same shape doubles as a gradient accumulator.
struct LogitTable {
  std::size_t vocab_size = 0;
  std::size_t order = 1;
  std::map<ContextKey, std::vector<double>> rows;
  std::vector<double> fallback;

  static LogitTable zeros_like(const LogitTable& t) {
    LogitTable g;
    g.vocab_size = t.vocab_size;
    g.order = t.order;
    g.fallback.assign(t.vocab_size, 0.0);
    return g;
  }

  const std::vector<double>& row(ContextKey key) const {
    auto it = rows.find(key);
    return it == rows.end() ? fallback : it->second;
  }

  bool has_row(ContextKey key) const { return rows.count(key) != 0; }

  std::vector<double>& mutable_row(ContextKey key) {
    auto it = rows.find(key);
    if (it == rows.end()) it = rows.emplace(key, std::vector<double>(vocab_size, 0.0)).first;
    return it->second;
  }

  bool all_finite() const {
    auto finite = [](const std::vector<double>& r) {
      return std::all_of(r.begin(), r.end(), [](double x) { return std::isfinite(x); });
    };
    if (!finite(fallback)) return false;
    for (const auto& [_, r] : rows) {
      if (!finite(r)) return false;
    }
    return true;
  }

  bool operator==(const LogitTable&) const = default;
};

// Row of the gradient matching where `params` reads context `key` from.
inline std::vector<double>& gradient_row(LogitTable& grad, const LogitTable& params, ContextKey key) {
  return params.has_row(key) ? grad.mutable_row(key) : grad.fallback;
}

struct LMParameters {
  Vocabulary vocab;
  LogitTable table;

  std::size_t vocab_size() const { return table.vocab_size; }
  std::size_t order() const { return table.order; }

  // All-zero logits: the uniform model. Order-1 models get one row per
  // possible context; higher orders start with only the fallback row.
  static LMParameters uniform(Vocabulary vocab, std::size_t order = 1) {
    if (order < 1) throw Error("context order must be >= 1");
    const std::size_t v = vocab.size();
    double capacity = 1.0;
    for (std::size_t i = 0; i < order; ++i) capacity *= static_cast<double>(v);
    if (capacity >= 9.0e18) throw Error("vocabulary^order does not fit a 64-bit context key");
    LMParameters p{std::move(vocab), {}};
    p.table.vocab_size = v;
    p.table.order = order;
    p.table.fallback.assign(v, 0.0);
    if (order == 1) {
      for (std::size_t c = 0; c < v; ++c) p.table.rows.emplace(c, std::vector<double>(v, 0.0));
    }
    return p;
  }

  // Gaussian logits on every existing row and on the fallback.
  void randomize(std::uint64_t seed, double stddev) {
    detail::Rng rng(seed);
    for (auto& x : table.fallback) x = rng.normal(0.0, stddev);
    for (auto& [_, r] : table.rows) {
      for (auto& x : r) x = rng.normal(0.0, stddev);
    }
  }

  bool operator==(const LMParameters&) const = default;
};

// Packs the `order` tokens preceding position `pos` of `stream` into a key;
// positions before the stream start read as PAD.
inline ContextKey context_key(const LMParameters& p, std::span<const TokenId> stream, std::size_t pos) {
  ContextKey key = 0;
  const std::size_t v = p.vocab_size();
  for (std::size_t k = 0; k < p.order(); ++k) {
    const std::size_t back = k + 1;
    const TokenId id = pos >= back ? stream[pos - back] : p.vocab.pad();
    key = key * v + id;
  }
  return key;
}

// Prompt tokens (BOS..EOS) followed by the target's content tokens. Only the
// target content is scored.
inline std::vector<TokenId> conditioning_stream(const TokenSequence& prompt, const TokenSequence& target) {
  std::vector<TokenId> stream(prompt.ids);
  const auto content = target.content();
  stream.insert(stream.end(), content.begin(), content.end());
  return stream;
}

// Gives every context that (prompt, target) visits its own row, initialised
// from the fallback. No-op for order-1 models, whose rows all exist.
inline void materialize_contexts(LMParameters& p, const TokenSequence& prompt, const TokenSequence& target) {
  const auto stream = conditioning_stream(prompt, target);
  for (std::size_t pos = prompt.ids.size(); pos < stream.size(); ++pos) {
    const ContextKey key = context_key(p, stream, pos);
    if (!p.table.has_row(key)) p.table.rows.emplace(key, p.table.fallback);
  }
}

namespace detail {

// log1p keeps full relative precision when one entry dominates.
inline double log_sum_exp(std::span<const double> row) {
  const auto top = std::max_element(row.begin(), row.end());
  const double m = *top;
  double rest = 0.0;
  for (auto it = row.begin(); it != row.end(); ++it) {
    if (it != top) rest += std::exp(*it - m);
  }
  return m + std::log1p(rest);
}

}  // namespace detail

inline std::vector<double> softmax(std::span<const double> row) {
  const double lse = detail::log_sum_exp(row);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = std::exp(row[i] - lse);
  return out;
}

// log P(target content | prompt), and optionally accumulates
// scale * d/dlogits of it into `grad`.
inline double accumulate_cond_logprob(const LMParameters& p, const TokenSequence& prompt,
                                      const TokenSequence& target, double scale, LogitTable* grad) {
  const auto stream = conditioning_stream(prompt, target);
  double total = 0.0;
  for (std::size_t pos = prompt.ids.size(); pos < stream.size(); ++pos) {
    const ContextKey key = context_key(p, stream, pos);
    const auto& row = p.table.row(key);
    const double lse = detail::log_sum_exp(row);
    const TokenId tok = stream[pos];
    total += row[tok] - lse;
    if (grad) {
      auto& g = gradient_row(*grad, p.table, key);
      for (std::size_t v = 0; v < row.size(); ++v) g[v] -= scale * std::exp(row[v] - lse);
      g[tok] += scale;
    }
  }
  return total;
}

inline double cond_logprob(const LMParameters& p, const TokenSequence& prompt, const TokenSequence& target) {
  return accumulate_cond_logprob(p, prompt, target, 0.0, nullptr);
}

// exp(-(1/n) * log P(target | prompt)) over the n target content tokens.
inline double perplexity(const LMParameters& p, const TokenSequence& prompt, const TokenSequence& target) {
  const std::size_t n = target.content().size();
  if (n == 0) throw Error("perplexity of an empty target is undefined");
  return std::exp(-cond_logprob(p, prompt, target) / static_cast<double>(n));
}

// Greedy continuation of `prompt`, stopping at EOS or after max_tokens.
inline std::string generate_greedy(const LMParameters& p, const TokenSequence& prompt, std::size_t max_tokens) {
  std::vector<TokenId> stream(prompt.ids);
  std::string out;
  for (std::size_t i = 0; i < max_tokens; ++i) {
    const auto& row = p.table.row(context_key(p, stream, stream.size()));
    TokenId best = p.vocab.eos();
    double best_logit = -std::numeric_limits<double>::infinity();
    for (TokenId v = 0; v < row.size(); ++v) {
      if (v == p.vocab.bos() || v == p.vocab.pad()) continue;
      if (row[v] > best_logit) {
        best_logit = row[v];
        best = v;
      }
    }
    if (best == p.vocab.eos()) break;
    stream.push_back(best);
    out.push_back(p.vocab.symbol(best));
  }
  return out;
}

// Read-only copy used as the DPO reference. Later training of the source
// parameters cannot reach it.
class FrozenModel {
 public:
  explicit FrozenModel(LMParameters params) : params_(std::make_shared<const LMParameters>(std::move(params))) {}
  const LMParameters& params() const { return *params_; }

 private:
  std::shared_ptr<const LMParameters> params_;
};

inline FrozenModel snapshot(const LMParameters& p) { return FrozenModel(p); }

// Checkpoint layout (little-endian):
//   "KTLM" u32 version=1
//   u32 n_symbols, symbol bytes
//   u64 order, u64 vocab_size, u64 n_rows
//   fallback row (vocab_size f64)
//   n_rows x { u64 context key, vocab_size f64 }   in ascending key order
namespace checkpoint {

inline constexpr std::uint32_t kVersion = 1;
static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(std::string_view& in) {
  if (in.size() < sizeof(T)) throw Error("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data(), sizeof(T));
  in.remove_prefix(sizeof(T));
  return v;
}

inline void put_row(std::string& out, const std::vector<double>& row) {
  out.append(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(double));
}

inline std::vector<double> take_row(std::string_view& in, std::size_t n) {
  if (in.size() < n * sizeof(double)) throw Error("checkpoint truncated");
  std::vector<double> row(n);
  std::memcpy(row.data(), in.data(), n * sizeof(double));
  in.remove_prefix(n * sizeof(double));
  return row;
}

}  // namespace detail

inline std::string serialize(const LMParameters& p) {
  std::string out = "KTLM";
  detail::put<std::uint32_t>(out, kVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.vocab.content_size()));
  out += p.vocab.symbols();
  detail::put<std::uint64_t>(out, p.order());
  detail::put<std::uint64_t>(out, p.vocab_size());
  detail::put<std::uint64_t>(out, p.table.rows.size());
  detail::put_row(out, p.table.fallback);
  for (const auto& [key, row] : p.table.rows) {
    detail::put<std::uint64_t>(out, key);
    detail::put_row(out, row);
  }
  return out;
}

inline LMParameters deserialize(std::string_view in) {
  if (in.substr(0, 4) != "KTLM") throw Error("not a checkpoint (bad magic)");
  in.remove_prefix(4);
  const auto version = detail::take<std::uint32_t>(in);
  if (version != kVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto n_symbols = detail::take<std::uint32_t>(in);
  if (in.size() < n_symbols) throw Error("checkpoint truncated");
  Vocabulary vocab = Vocabulary::from_symbols(in.substr(0, n_symbols));
  in.remove_prefix(n_symbols);
  const auto order = detail::take<std::uint64_t>(in);
  const auto v = detail::take<std::uint64_t>(in);
  const auto n_rows = detail::take<std::uint64_t>(in);
  if (v != vocab.size()) throw Error("checkpoint vocab size mismatch");
  LMParameters p{std::move(vocab), {}};
  p.table.order = order;
  p.table.vocab_size = v;
  p.table.fallback = detail::take_row(in, v);
  for (std::uint64_t i = 0; i < n_rows; ++i) {
    const auto key = detail::take<std::uint64_t>(in);
    p.table.rows.emplace(key, detail::take_row(in, v));
  }
  if (!in.empty()) throw Error("trailing bytes after checkpoint");
  return p;
}

inline void save(const LMParameters& p, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  const std::string bytes = serialize(p);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline LMParameters load(const std::filesystem::path& path) { return deserialize(read_bytes(path)); }

inline std::string digest(const LMParameters& p) { return kaft::detail::sha256_hex(serialize(p)); }

}  // namespace checkpoint

}  // namespace kaft

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "kaft/detail/rng.hpp"
#include "kaft/lm_core.hpp"
#include "kaft/losses.hpp"
#include "support.hpp"

using namespace kaft;

namespace {

Vocabulary vocab_of_size(std::size_t v) {
  std::string symbols;
  for (std::size_t i = 0; i + 3 < v; ++i) symbols.push_back(static_cast<char>('!' + i));
  return Vocabulary::from_symbols(symbols);
}

// Row of log-probabilities putting `p` on `tok` and spreading the rest evenly.
std::vector<double> peaked_logprob_row(std::size_t v, TokenId tok, double p) {
  std::vector<double> row(v, std::log((1.0 - p) / static_cast<double>(v - 1)));
  row[tok] = std::log(p);
  return row;
}

}  // namespace

TEST(Vocabulary, ByteLevelLayout) {
  const auto v = Vocabulary::byte_level();
  EXPECT_EQ(v.size(), 259u);
  EXPECT_EQ(v.bos(), 256u);
  EXPECT_NE(v.bos(), v.eos());
  EXPECT_NE(v.eos(), v.pad());
  EXPECT_FALSE(v.is_special(255));
  EXPECT_TRUE(v.is_special(v.pad()));
}

TEST(Tokenize, Examples) {
  const auto v = Vocabulary::byte_level();
  const auto ab = tokenize(v, "ab");
  EXPECT_EQ(ab.ids, (std::vector<TokenId>{v.bos(), 'a', 'b', v.eos()}));
  EXPECT_EQ(tokenize(v, "").ids, (std::vector<TokenId>{v.bos(), v.eos()}));
  EXPECT_EQ(detokenize(v, ab), "ab");
}

TEST(Tokenize, RoundTripRandomStrings) {
  const auto v = Vocabulary::byte_level();
  detail::Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    std::string s(rng.index(40), '\0');
    for (auto& c : s) c = static_cast<char>(rng.index(256));
    const auto seq = tokenize(v, s);
    for (auto id : seq.ids) ASSERT_LT(id, v.size());
    ASSERT_EQ(detokenize(v, seq), s);
  }
}

TEST(Tokenize, SmallVocabularyRejectsUnknownSymbols) {
  const auto v = Vocabulary::from_symbols("ab");
  EXPECT_EQ(v.size(), 5u);
  EXPECT_THROW(tokenize(v, "abc"), Error);
}

TEST(CondLogprob, UniformModel) {
  const auto p = LMParameters::uniform(vocab_of_size(4));
  const auto target = tokenize(p.vocab, "!!!");
  EXPECT_NEAR(cond_logprob(p, tokenize(p.vocab, "!"), target), 3.0 * std::log(0.25), 1e-12);
  EXPECT_EQ(cond_logprob(p, tokenize(p.vocab, "!"), tokenize(p.vocab, "")), 0.0);
}

TEST(CondLogprob, PeakedRow) {
  auto p = LMParameters::uniform(Vocabulary::from_symbols("ab"));
  auto& row = p.table.mutable_row(p.vocab.eos());
  row[0] = 20.0;  // 'a' after the prompt's EOS
  const double lp = cond_logprob(p, tokenize(p.vocab, ""), tokenize(p.vocab, "a"));
  // Direct softmax: e^20 / (e^20 + 4).
  EXPECT_NEAR(lp, -std::log1p(4.0 * std::exp(-20.0)), 1e-13);
  EXPECT_GT(lp, -1e-8);
}

TEST(Perplexity, Anchors) {
  for (std::size_t v : {4u, 16u, 256u}) {
    const auto p = LMParameters::uniform(vocab_of_size(v));
    const auto t = tokenize(p.vocab, "!!!!");
    EXPECT_NEAR(perplexity(p, tokenize(p.vocab, "!"), t), static_cast<double>(v), 1e-9 * v);
  }
  auto p = LMParameters::uniform(Vocabulary::from_symbols("ab"));
  p.table.mutable_row(p.vocab.eos()) = peaked_logprob_row(5, 0, 0.5);
  p.table.mutable_row(0) = peaked_logprob_row(5, 1, 0.5);
  EXPECT_NEAR(perplexity(p, tokenize(p.vocab, ""), tokenize(p.vocab, "ab")), 2.0, 1e-12);
  p.table.mutable_row(p.vocab.eos()) = peaked_logprob_row(5, 0, 0.9);
  p.table.mutable_row(0) = peaked_logprob_row(5, 1, 0.1);
  EXPECT_NEAR(perplexity(p, tokenize(p.vocab, ""), tokenize(p.vocab, "ab")), 1.0 / std::sqrt(0.09), 1e-9);
  EXPECT_THROW(perplexity(p, tokenize(p.vocab, ""), tokenize(p.vocab, "")), Error);
}

TEST(Perplexity, AtLeastOneForRandomModels) {
  detail::Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = LMParameters::uniform(Vocabulary::from_symbols("abcd"), 1 + trial % 2);
    p.randomize(rng.next(), 3.0);
    std::string s(1 + rng.index(10), 'a');
    for (auto& c : s) c = "abcd"[rng.index(4)];
    const double ppl = perplexity(p, tokenize(p.vocab, "ab"), tokenize(p.vocab, s));
    ASSERT_GE(ppl, 1.0);
    ASSERT_TRUE(std::isfinite(ppl));
  }
}

TEST(Softmax, RowsNormalise) {
  detail::Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> row(2 + rng.index(300));
    for (auto& x : row) x = rng.normal(0.0, 10.0);
    const auto p = softmax(row);
    const double sum = std::accumulate(p.begin(), p.end(), 0.0);
    ASSERT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Context, HigherOrderBacksOffAndMaterialises) {
  auto p = LMParameters::uniform(Vocabulary::from_symbols("ab"), 3);
  EXPECT_TRUE(p.table.rows.empty());
  const auto prompt = tokenize(p.vocab, "a"), target = tokenize(p.vocab, "ba");
  p.table.fallback[0] = 1.0;
  const double before = cond_logprob(p, prompt, target);
  materialize_contexts(p, prompt, target);
  EXPECT_EQ(p.table.rows.size(), 2u);
  EXPECT_DOUBLE_EQ(cond_logprob(p, prompt, target), before);
  // Left padding: the first position of a stream sees PAD in every slot.
  const std::vector<TokenId> stream = {p.vocab.bos()};
  const auto v = p.vocab_size();
  EXPECT_EQ(context_key(p, stream, 0), (p.vocab.pad() * v + p.vocab.pad()) * v + p.vocab.pad());
}

TEST(Snapshot, IsolatedFromLaterTraining) {
  auto p = LMParameters::uniform(Vocabulary::from_symbols("ab"));
  p.randomize(1, 0.5);
  const auto frozen = snapshot(p);
  const auto prompt = tokenize(p.vocab, "a"), target = tokenize(p.vocab, "bab");
  const double at_snapshot = cond_logprob(p, prompt, target);
  const std::vector<SftExample> ex = {{prompt, target}};
  for (int i = 0; i < 100; ++i) {
    const auto g = sft_loss(p, ex).gradient;
    for (auto& [k, row] : p.table.rows) {
      for (std::size_t j = 0; j < row.size(); ++j) row[j] -= 0.1 * g.row(k)[j];
    }
  }
  EXPECT_EQ(cond_logprob(frozen.params(), prompt, target), at_snapshot);
  EXPECT_GT(cond_logprob(p, prompt, target), at_snapshot);
}

TEST(Training, MemorisationStrictlyDecreasesNll) {
  auto p = LMParameters::uniform(Vocabulary::byte_level());
  const std::vector<SftExample> ex = {{tokenize(p.vocab, "Who?"), tokenize(p.vocab, "Ada Lovelace.")}};
  double prev = sft_loss(p, ex).value;
  for (int step = 0; step < 200; ++step) {
    const auto r = sft_loss(p, ex);
    for (auto& [k, row] : p.table.rows) {
      const auto& g = r.gradient.row(k);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] -= 0.5 * g[j];
    }
    const double now = sft_loss(p, ex).value;
    ASSERT_LT(now, prev) << "step " << step;
    prev = now;
  }
}

TEST(Generate, GreedyFollowsArgmax) {
  auto p = LMParameters::uniform(Vocabulary::from_symbols("ab"));
  p.table.mutable_row(p.vocab.eos())[0] = 5.0;  // after prompt: 'a'
  p.table.mutable_row(0)[1] = 5.0;              // after 'a': 'b'
  p.table.mutable_row(1)[p.vocab.eos()] = 5.0;  // after 'b': stop
  EXPECT_EQ(generate_greedy(p, tokenize(p.vocab, ""), 10), "ab");
  EXPECT_EQ(generate_greedy(p, tokenize(p.vocab, ""), 1), "a");
}

TEST(Checkpoint, RoundTripExactAndDigestStable) {
  kt_test::TempDir dir;
  for (std::size_t order : {1u, 2u}) {
    auto p = LMParameters::uniform(Vocabulary::from_symbols("xyz"), order);
    materialize_contexts(p, tokenize(p.vocab, "xy"), tokenize(p.vocab, "zzx"));
    p.randomize(42, 1.0);
    const auto path = dir / ("m" + std::to_string(order) + ".ckpt");
    checkpoint::save(p, path);
    const auto q = checkpoint::load(path);
    EXPECT_EQ(p, q);
    EXPECT_EQ(checkpoint::digest(p), checkpoint::digest(q));
    EXPECT_EQ(checkpoint::read_bytes(path), checkpoint::serialize(p));
  }
  const auto bytes = checkpoint::serialize(LMParameters::uniform(Vocabulary::from_symbols("ab")));
  EXPECT_THROW(checkpoint::deserialize(bytes.substr(0, bytes.size() - 1)), Error);
  EXPECT_THROW(checkpoint::deserialize("XXXX" + bytes.substr(4)), Error);
  EXPECT_THROW(checkpoint::deserialize(bytes + "!"), Error);
}

#include <algorithm>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "hmt/error.hpp"
#include "hmt/text.hpp"
#include "hmt/world.hpp"

using namespace hmt;

TEST_CASE("first merge of 'aaab' joins a and a") {
  // (a, a) occurs twice, (a, b</w>) once.
  BpeMerges m = learn_bpe({"aaab"}, 1);
  REQUIRE(m.rules.size() == 1);
  CHECK(m.rules[0] == std::pair<std::string, std::string>{"a", "a"});
}

TEST_CASE("zero merges tokenizes per character") {
  std::vector<std::string> corpus{"red circle"};
  BpeMerges m = learn_bpe(corpus, 0);
  CHECK(m.rules.empty());
  Tokenizer tok(m, Vocabulary::build(corpus, m));
  auto ids = tok.encode("red");
  CHECK(ids.size() == 5);  // BOS r e d</w> EOS
  CHECK(tok.vocab().token(ids[3]) == "d</w>");
}

TEST_CASE("single-character corpus has no applicable merges") {
  CHECK(learn_bpe({"a", "a a"}, 50).rules.empty());
  CHECK_THROWS_AS(learn_bpe({}, 3), ConfigError);
}

TEST_CASE("learn_bpe breaks frequency ties lexicographically") {
  // (a, b</w>) and (c, d</w>) both occur once; (a, b</w>) sorts first.
  BpeMerges m = learn_bpe({"cd ab"}, 1);
  CHECK(m.rules[0] == std::pair<std::string, std::string>{"a", "b</w>"});
}

TEST_CASE("encode and decode") {
  Corpus c = generate_corpus(300, 4);
  std::vector<std::string> lines;
  for (const auto& s : c.train) {
    lines.push_back(join_words(s.source));
    lines.push_back(join_words(s.target));
  }
  BpeMerges m = learn_bpe(lines, 200);
  Tokenizer tok(m, Vocabulary::build(lines, m));

  SUBCASE("empty string") {
    CHECK(tok.encode("") == std::vector<int>{kBos, kEos});
  }
  SUBCASE("round trip over the corpus") {
    for (const auto& l : lines) CHECK(tok.decode(tok.encode(l)) == l);
  }
  SUBCASE("mask word is one reserved id") {
    auto ids = tok.encode("a <v> circle");
    CHECK(std::count(ids.begin(), ids.end(), kMask) == 1);
    CHECK(tok.decode(ids) == "a <v> circle");
  }
  SUBCASE("unknown characters map to UNK") {
    auto ids = tok.encode("Q");
    CHECK(ids[1] == kUnk);
  }
  SUBCASE("vocabulary size is reserved plus distinct subwords and is stable") {
    std::set<std::string> subwords(tok.vocab().tokens().begin() + kNumReserved, tok.vocab().tokens().end());
    CHECK(tok.vocab().size() == kNumReserved + subwords.size());
    Vocabulary again = Vocabulary::build(lines, learn_bpe(lines, 200));
    CHECK(again.tokens() == tok.vocab().tokens());
  }
}

TEST_CASE("merges file round trip") {
  BpeMerges m = learn_bpe({"red green blue", "left-of above"}, 20);
  auto path = std::filesystem::temp_directory_path() / "hmt_merges_test.txt";
  save_merges(path, m);
  CHECK(load_merges(path).rules == m.rules);
  std::filesystem::remove(path);
}

namespace {

std::vector<EncodedSample> make_samples(std::size_t n) {
  std::vector<EncodedSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    EncodedSample s;
    s.id = i;
    s.src = std::vector<int>(3 + i % 5, 7);
    s.tgt = std::vector<int>(2 + (i * 7) % 6, 8);
    s.src.back() = kEos;
    s.tgt.back() = kEos;
    s.image = static_cast<int>(i);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("batch_iterator covers every sample once") {
  auto samples = make_samples(97);
  BatchPlan plan = batch_iterator(samples, 24, 5);
  std::multiset<std::size_t> seen;
  for (const auto& b : plan.batches) {
    std::size_t total = 0;
    for (std::size_t r = 0; r < b.rows; ++r) {
      seen.insert(b.sample_ids[r]);
      total += b.tgt_len[r];
      // Rows end with EOS and are PAD-filled afterwards.
      CHECK(b.tgt[r * b.tgt_max + b.tgt_len[r] - 1] == kEos);
      for (std::size_t c = b.tgt_len[r]; c < b.tgt_max; ++c) CHECK(b.tgt[r * b.tgt_max + c] == kPad);
      for (std::size_t c = b.src_len[r]; c < b.src_max; ++c) CHECK(b.src[r * b.src_max + c] == kPad);
    }
    CHECK(total <= 24);
  }
  std::multiset<std::size_t> expect;
  for (const auto& s : samples) expect.insert(s.id);
  CHECK(seen == expect);
  CHECK(plan.skipped == 0);
}

TEST_CASE("batch_iterator determinism, singleton batches and skips") {
  auto samples = make_samples(40);
  auto a = batch_iterator(samples, 30, 9);
  auto b = batch_iterator(samples, 30, 9);
  REQUIRE(a.batches.size() == b.batches.size());
  for (std::size_t i = 0; i < a.batches.size(); ++i) CHECK(a.batches[i].sample_ids == b.batches[i].sample_ids);

  std::vector<EncodedSample> same;
  for (std::size_t i = 0; i < 6; ++i) {
    EncodedSample s;
    s.id = i;
    s.src = {kBos, 9, kEos};
    s.tgt = {kBos, 9, 9, kEos};
    same.push_back(s);
  }
  auto single = batch_iterator(same, 4, 1);
  CHECK(single.batches.size() == 6);
  for (const auto& bt : single.batches) CHECK(bt.rows == 1);

  auto skipped = batch_iterator(samples, 4, 1);
  std::size_t too_long = 0;
  for (const auto& s : samples) too_long += s.tgt.size() > 4;
  CHECK(skipped.skipped == too_long);
}

#include <cmath>
#include <limits>

#include "doctest.h"
#include "hmt/bleu.hpp"
#include "hmt/decode.hpp"
#include "hmt/error.hpp"
#include "hmt/rng.hpp"

using namespace hmt;

namespace {

// Fixed random next-token distribution per prefix.
StepScorer table_scorer(std::uint64_t salt, std::size_t vocab, double spread = 2.0) {
  return [=](const std::vector<std::vector<int>>& prefixes) {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) {
      std::uint64_t h = salt;
      for (int t : p) h = splitmix64(h ^ static_cast<std::uint64_t>(t + 17));
      Rng r(h);
      std::vector<double> row(vocab);
      double z = 0.0;
      for (auto& x : row) {
        x = spread * r.normal();
        z += std::exp(x);
      }
      for (auto& x : row) x -= std::log(z);
      out.push_back(row);
    }
    return out;
  };
}

struct Best {
  std::vector<int> tokens;
  double score = -std::numeric_limits<double>::infinity();
};

// Every sequence over the vocabulary that ends with its first EOS within max_len.
void enumerate(const StepScorer& s, int bos, int eos, std::size_t vocab, std::size_t max_len, double alpha,
               std::vector<int>& seq, double lp, Best& best) {
  if (seq.size() == max_len) return;
  std::vector<int> prefix{bos};
  prefix.insert(prefix.end(), seq.begin(), seq.end());
  const auto row = s({prefix})[0];
  for (std::size_t t = 0; t < vocab; ++t) {
    if (static_cast<int>(t) == bos) continue;
    seq.push_back(static_cast<int>(t));
    const double next = lp + row[t];
    if (static_cast<int>(t) == eos) {
      const double score = next / std::pow(static_cast<double>(seq.size()), alpha);
      if (score > best.score || (score == best.score && seq < best.tokens)) best = {seq, score};
    } else {
      enumerate(s, bos, eos, vocab, max_len, alpha, seq, next, best);
    }
    seq.pop_back();
  }
}

}  // namespace

TEST_CASE("beam of one is greedy decoding") {
  for (std::uint64_t salt = 0; salt < 200; ++salt) {
    const StepScorer s = table_scorer(salt, 7);
    for (double alpha : {0.0, 0.6, 1.0}) {
      const BeamConfig cfg{1, alpha, 12};
      const Hypothesis b = beam_search(s, 1, 2, cfg, {0, 1});
      const Hypothesis g = greedy_search(s, 1, 2, cfg, {0, 1});
      CHECK(b.tokens == g.tokens);
      CHECK(b.logprob == g.logprob);
      CHECK(b.truncated == g.truncated);
    }
  }
}

TEST_CASE("wide beam matches exhaustive enumeration") {
  for (std::uint64_t salt = 0; salt < 300; ++salt) {
    const StepScorer s = table_scorer(1000 + salt, 4);
    for (double alpha : {0.0, 1.0}) {
      Best best;
      std::vector<int> seq;
      enumerate(s, 0, 1, 4, 3, alpha, seq, 0.0, best);
      const Hypothesis h = beam_search(s, 0, 1, {64, alpha, 3}, {0});
      REQUIRE_FALSE(h.truncated);
      CHECK(h.tokens == best.tokens);
      CHECK(h.score == best.score);
    }
  }
}

TEST_CASE("exhaustive beam scores at least as well as any narrower beam") {
  for (std::uint64_t salt = 0; salt < 100; ++salt) {
    const StepScorer s = table_scorer(5000 + salt, 4);
    const Hypothesis wide = beam_search(s, 0, 1, {64, 1.0, 3}, {0});
    for (std::size_t b = 1; b < 8; ++b) {
      const Hypothesis h = beam_search(s, 0, 1, {b, 1.0, 3}, {0});
      if (!h.truncated) CHECK(wide.score >= h.score);
    }
  }
}

TEST_CASE("alpha zero scores by raw log-probability") {
  const StepScorer s = table_scorer(42, 6);
  const Hypothesis h = beam_search(s, 1, 2, {4, 0.0, 10}, {0, 1});
  CHECK(h.score == h.logprob);
  const Hypothesis n = beam_search(s, 1, 2, {4, 1.0, 10}, {0, 1});
  CHECK(n.score == doctest::Approx(n.logprob / static_cast<double>(n.tokens.size())).epsilon(1e-15));
}

TEST_CASE("hand example: length penalty changes the winner") {
  // After BOS: EOS or token 3, each 0.5; after 3: EOS with 0.8.
  const StepScorer s = [](const std::vector<std::vector<int>>& ps) {
    std::vector<std::vector<double>> out;
    for (const auto& p : ps) {
      std::vector<double> row(4, -INFINITY);
      if (p.size() == 1) {
        row[2] = std::log(0.5);
        row[3] = std::log(0.5);
      } else {
        row[2] = std::log(0.8);
        row[3] = std::log(0.2);
      }
      out.push_back(row);
    }
    return out;
  };
  // Raw: [EOS] log 0.5 beats [3, EOS] log 0.4. Per token: log 0.4 / 2 wins.
  CHECK(beam_search(s, 1, 2, {2, 0.0, 5}, {0, 1}).tokens == std::vector<int>{2});
  CHECK(beam_search(s, 1, 2, {2, 1.0, 5}, {0, 1}).tokens == std::vector<int>{3, 2});
  // Beam 1: the first step ties and goes to the lower id, EOS.
  CHECK(beam_search(s, 1, 2, {1, 1.0, 5}, {0, 1}).tokens == std::vector<int>{2});
}

TEST_CASE("ties go to the lower token sequence") {
  const StepScorer flat = [](const std::vector<std::vector<int>>& ps) {
    return std::vector<std::vector<double>>(ps.size(), std::vector<double>(5, -std::log(5.0)));
  };
  const Hypothesis h = beam_search(flat, 1, 4, {3, 0.0, 6}, {0, 1});
  CHECK(h.tokens == std::vector<int>{4});
  const Hypothesis g = greedy_search(flat, 1, 4, {1, 0.0, 3}, {0, 1});
  CHECK(g.tokens == std::vector<int>{2, 2, 2});
  CHECK(g.truncated);
}

TEST_CASE("no EOS within max_len returns the best unfinished hypothesis") {
  const StepScorer never_eos = [](const std::vector<std::vector<int>>& ps) {
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < ps.size(); ++i) out.push_back({-INFINITY, -INFINITY, -INFINITY, std::log(0.7), std::log(0.3)});
    return out;
  };
  const Hypothesis h = beam_search(never_eos, 1, 2, {3, 1.0, 4}, {0, 1});
  CHECK(h.truncated);
  CHECK(h.tokens == std::vector<int>{3, 3, 3, 3});
  CHECK(h.logprob == doctest::Approx(4 * std::log(0.7)));
}

TEST_CASE("beam configuration contracts") {
  const StepScorer s = table_scorer(1, 4);
  CHECK_THROWS_AS(beam_search(s, 1, 2, {0, 1.0, 5}), ConfigError);
  CHECK_THROWS_AS(beam_search(s, 1, 2, {2, -0.5, 5}), ConfigError);
  CHECK_THROWS_AS(beam_search(s, 1, 2, {2, 1.0, 0}), ConfigError);
  CHECK_THROWS_AS(beam_search(s, 1, 2, {2, 1.0, 5}, {0, 1, 2, 3}), ContractViolation);
}

TEST_CASE("beam search is deterministic") {
  const StepScorer s = table_scorer(9, 8);
  const Hypothesis a = beam_search(s, 1, 2, {5, 1.0, 15}, {0, 1});
  const Hypothesis b = beam_search(s, 1, 2, {5, 1.0, 15}, {0, 1});
  CHECK(a.tokens == b.tokens);
  CHECK(a.score == b.score);
}

// ---- BLEU ----

TEST_CASE("identical corpus scores 100") {
  const std::vector<Words> c{{"el", "kadrul", "ruba"}, {"a", "b", "c", "d", "e"}, {"x", "y", "z", "w"}};
  CHECK(corpus_bleu(c, c) == 100.0);
}

TEST_CASE("hand-computed BLEU examples") {
  CHECK(corpus_bleu({{"a", "a", "a", "a"}}, {{"a", "b", "c", "d"}}) == 0.0);
  const BleuStats s = sentence_stats({"a", "a", "a", "a"}, {"a", "b", "c", "d"});
  CHECK(s.matches[0] == 1);
  CHECK(s.totals[0] == 4);
  CHECK(s.matches[1] == 0);

  const double b = corpus_bleu({{"a", "b", "c", "d"}}, {{"a", "b", "c", "d", "e"}});
  CHECK(b == doctest::Approx(100.0 * std::exp(-0.25)).epsilon(1e-12));
  CHECK(std::round(b * 1e4) / 1e4 == doctest::Approx(77.8801).epsilon(1e-9));
}

TEST_CASE("BLEU aggregates counts over the corpus") {
  // Sentence 1 alone has no 4-gram; the corpus does.
  const std::vector<Words> hyp{{"a", "b", "c"}, {"p", "q", "r", "s"}};
  const std::vector<Words> ref{{"a", "b", "c"}, {"p", "q", "r", "s"}};
  CHECK(corpus_bleu({hyp[0]}, {ref[0]}) == 0.0);
  CHECK(corpus_bleu(hyp, ref) == 100.0);
}

TEST_CASE("BLEU is invariant to sentence order") {
  Rng rng(3);
  const std::vector<std::string> words{"a", "b", "c", "d", "e", "f"};
  std::vector<Words> hyp, ref;
  for (int i = 0; i < 40; ++i) {
    Words h, r;
    const std::size_t n = 3 + rng.below(6);
    for (std::size_t j = 0; j < n; ++j) {
      r.push_back(words[rng.below(words.size())]);
      h.push_back(rng.bernoulli(0.8) ? r.back() : words[rng.below(words.size())]);
    }
    hyp.push_back(h);
    ref.push_back(r);
  }
  const double base = corpus_bleu(hyp, ref);
  CHECK(base > 0.0);
  std::vector<std::size_t> order(hyp.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span(order));
  std::vector<Words> h2, r2;
  for (std::size_t i : order) {
    h2.push_back(hyp[i]);
    r2.push_back(ref[i]);
  }
  CHECK(corpus_bleu(h2, r2) == base);
}

TEST_CASE("BLEU contracts and buckets") {
  CHECK_THROWS_AS(corpus_bleu({{"a"}}, {{"a"}, {"b"}}), ContractViolation);
  CHECK(corpus_bleu({{}}, {{"a", "b"}}) == 0.0);
  const std::vector<Words> refs{{"a", "b"}, {"a", "b", "c", "d", "e"}, {"a", "b", "c", "d", "e", "f", "g", "h", "i"}};
  const auto buckets = bucket_bleu(refs, refs, 4);
  REQUIRE(buckets.size() == 3);
  CHECK(buckets[0].min_len == 1);
  CHECK(buckets[0].max_len == 4);
  CHECK(buckets[1].min_len == 5);
  CHECK(buckets[2].min_len == 9);
  CHECK(buckets[2].bleu == 100.0);
  CHECK(buckets[0].bleu == 0.0);  // two words cannot hold a 4-gram
}

#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

namespace hmt {

using Words = std::vector<std::string>;

struct BleuStats {
  std::array<std::size_t, 4> matches{};  // clipped n-gram matches, n = 1..4
  std::array<std::size_t, 4> totals{};   // hypothesis n-grams
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o);
};

BleuStats sentence_stats(const Words& hyp, const Words& ref);

// Corpus BLEU-4 in [0, 100] from aggregated counts: geometric mean of the
// clipped precisions times exp(1 - r/c) when c < r. No smoothing: any zero
// precision gives 0.
double bleu_from_stats(const BleuStats& s);
double corpus_bleu(const std::vector<Words>& hyps, const std::vector<Words>& refs);

struct BucketBleu {
  std::size_t min_len = 0;
  std::size_t max_len = 0;  // inclusive
  std::size_t sentences = 0;
  double bleu = 0.0;
};

// Sentences grouped by reference length into buckets of the given width.
std::vector<BucketBleu> bucket_bleu(const std::vector<Words>& hyps, const std::vector<Words>& refs,
                                    std::size_t width = 4);

}  // namespace hmt

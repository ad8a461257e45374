#include "hmt/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "hmt/error.hpp"

namespace hmt {

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (std::size_t n = 0; n < 4; ++n) {
    matches[n] += o.matches[n];
    totals[n] += o.totals[n];
  }
  hyp_len += o.hyp_len;
  ref_len += o.ref_len;
  return *this;
}

BleuStats sentence_stats(const Words& hyp, const Words& ref) {
  BleuStats s;
  s.hyp_len = hyp.size();
  s.ref_len = ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<Words, std::size_t> ref_counts, hyp_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ref_counts[Words(ref.begin() + i, ref.begin() + i + n)]++;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) hyp_counts[Words(hyp.begin() + i, hyp.begin() + i + n)]++;
    for (const auto& [gram, c] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) s.matches[n - 1] += std::min(c, it->second);
      s.totals[n - 1] += c;
    }
  }
  return s;
}

double bleu_from_stats(const BleuStats& s) {
  if (s.hyp_len == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (s.matches[n] == 0 || s.totals[n] == 0) return 0.0;
    log_p += std::log(static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]));
  }
  const double c = static_cast<double>(s.hyp_len), r = static_cast<double>(s.ref_len);
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return 100.0 * bp * std::exp(log_p / 4.0);
}

double corpus_bleu(const std::vector<Words>& hyps, const std::vector<Words>& refs) {
  HMT_CHECK(hyps.size() == refs.size(), "corpus_bleu: " + std::to_string(hyps.size()) +
                                            " hypotheses for " + std::to_string(refs.size()) + " references");
  HMT_CHECK(!refs.empty(), "corpus_bleu: empty corpus");
  BleuStats total;
  for (std::size_t i = 0; i < hyps.size(); ++i) total += sentence_stats(hyps[i], refs[i]);
  return bleu_from_stats(total);
}

std::vector<BucketBleu> bucket_bleu(const std::vector<Words>& hyps, const std::vector<Words>& refs,
                                    std::size_t width) {
  HMT_CHECK(hyps.size() == refs.size(), "bucket_bleu: size mismatch");
  HMT_CHECK(width > 0, "bucket_bleu: width must be positive");
  std::map<std::size_t, std::pair<BleuStats, std::size_t>> buckets;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const std::size_t b = refs[i].empty() ? 0 : (refs[i].size() - 1) / width;
    auto& [stats, n] = buckets[b];
    stats += sentence_stats(hyps[i], refs[i]);
    ++n;
  }
  std::vector<BucketBleu> out;
  for (const auto& [b, entry] : buckets) {
    out.push_back({b * width + 1, (b + 1) * width, entry.second, bleu_from_stats(entry.first)});
  }
  return out;
}

}  // namespace hmt

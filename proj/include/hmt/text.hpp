#pragma once

// Byte-pair encoding, vocabulary and token-budgeted batching.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace hmt {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kMask = 4;
inline constexpr int kNumReserved = 5;
inline constexpr std::string_view kMaskWord = "<v>";
inline constexpr std::string_view kEndOfWord = "</w>";

std::vector<std::string> split_words(std::string_view sentence);
std::string join_words(const std::vector<std::string>& words);

struct BpeMerges {
  std::vector<std::pair<std::string, std::string>> rules;  // priority order
};

// Greedy most-frequent-pair merging; ties go to the lexicographically
// smallest pair. The mask word is never split or merged.
BpeMerges learn_bpe(const std::vector<std::string>& corpus, std::size_t num_merges);

// Segments one word into subword symbols using the merge rules.
std::vector<std::string> apply_bpe(std::string_view word, const BpeMerges& merges);

class Vocabulary {
 public:
  // Reserved ids first, then base symbols seen in the corpus (sorted), then
  // merge products in rule order.
  static Vocabulary build(const std::vector<std::string>& corpus, const BpeMerges& merges);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;  // kUnk when absent
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

class Tokenizer {
 public:
  Tokenizer(BpeMerges merges, Vocabulary vocab);

  // BOS + subword ids + EOS.
  std::vector<int> encode(std::string_view sentence) const;
  // Inverse of encode on in-vocabulary text; special ids other than the
  // mask are dropped.
  std::string decode(const std::vector<int>& ids) const;

  const BpeMerges& merges() const { return merges_; }
  const Vocabulary& vocab() const { return vocab_; }

 private:
  BpeMerges merges_;
  Vocabulary vocab_;
  // Word segmentation memo; guarded so a tokenizer can be shared across threads.
  mutable std::unordered_map<std::string, std::vector<int>> cache_;
  mutable std::unique_ptr<std::mutex> cache_mutex_ = std::make_unique<std::mutex>();
};

// ---- files ----
std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);
void save_merges(const std::filesystem::path& path, const BpeMerges& merges);
BpeMerges load_merges(const std::filesystem::path& path);

// ---- batching ----
struct EncodedSample {
  std::size_t id = 0;
  std::vector<int> src;
  std::vector<int> tgt;
  int image = -1;  // index into the split's image/token table
};

struct TokenBatch {
  std::size_t rows = 0;
  std::size_t src_max = 0;
  std::size_t tgt_max = 0;
  std::vector<int> src;  // rows x src_max, PAD-filled
  std::vector<int> tgt;  // rows x tgt_max, PAD-filled
  std::vector<std::size_t> src_len;
  std::vector<std::size_t> tgt_len;
  std::vector<std::size_t> sample_ids;
  std::vector<int> images;

  std::vector<int> src_row(std::size_t r) const;
  std::vector<int> tgt_row(std::size_t r) const;
};

struct BatchPlan {
  std::vector<TokenBatch> batches;
  std::size_t skipped = 0;  // samples whose target exceeds the budget
};

// Length-bucketed, seed-shuffled batches whose summed target lengths stay
// within token_budget. Every admissible sample appears exactly once.
BatchPlan batch_iterator(const std::vector<EncodedSample>& samples, std::size_t token_budget,
                         std::uint64_t seed);

}  // namespace hmt

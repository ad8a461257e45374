#include "hmt/text.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "hmt/error.hpp"
#include "hmt/rng.hpp"

namespace hmt {

namespace {

std::vector<std::string> initial_symbols(std::string_view word) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < word.size(); ++i) out.emplace_back(1, word[i]);
  if (!out.empty()) out.back() += kEndOfWord;
  return out;
}

void merge_pair(std::vector<std::string>& syms, const std::string& left, const std::string& right) {
  std::vector<std::string> out;
  out.reserve(syms.size());
  for (std::size_t i = 0; i < syms.size(); ++i) {
    if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
      out.push_back(left + right);
      ++i;
    } else {
      out.push_back(syms[i]);
    }
  }
  syms = std::move(out);
}

}  // namespace

std::vector<std::string> split_words(std::string_view sentence) {
  std::vector<std::string> words;
  std::istringstream is{std::string(sentence)};
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

BpeMerges learn_bpe(const std::vector<std::string>& corpus, std::size_t num_merges) {
  if (corpus.empty()) throw ConfigError("learn_bpe: empty corpus");
  std::map<std::string, std::size_t> freq;
  for (const auto& line : corpus) {
    for (const auto& w : split_words(line)) {
      if (w != kMaskWord) ++freq[w];
    }
  }
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  for (const auto& [w, n] : freq) words.emplace_back(initial_symbols(w), n);

  BpeMerges merges;
  while (merges.rules.size() < num_merges) {
    std::map<std::pair<std::string, std::string>, std::size_t> pairs;
    for (const auto& [syms, n] : words) {
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pairs[{syms[i], syms[i + 1]}] += n;
    }
    if (pairs.empty()) break;
    // std::map iterates in lexicographic order, so the first maximum wins ties.
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    merges.rules.push_back(best->first);
    for (auto& [syms, n] : words) merge_pair(syms, best->first.first, best->first.second);
  }
  return merges;
}

std::vector<std::string> apply_bpe(std::string_view word, const BpeMerges& merges) {
  std::vector<std::string> syms = initial_symbols(word);
  for (const auto& [l, r] : merges.rules) {
    if (syms.size() < 2) break;
    merge_pair(syms, l, r);
  }
  return syms;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, const BpeMerges& merges) {
  std::set<std::string> base;
  for (const auto& line : corpus) {
    for (const auto& w : split_words(line)) {
      if (w == kMaskWord) continue;
      for (auto& s : initial_symbols(w)) base.insert(std::move(s));
    }
  }
  std::vector<std::string> tokens{"<pad>", "<s>", "</s>", "<unk>", std::string(kMaskWord)};
  std::set<std::string> seen(tokens.begin(), tokens.end());
  for (const auto& s : base) {
    if (seen.insert(s).second) tokens.push_back(s);
  }
  for (const auto& [l, r] : merges.rules) {
    std::string m = l + r;
    if (seen.insert(m).second) tokens.push_back(std::move(m));
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kNumReserved || tokens[kMask] != kMaskWord) {
    throw ConfigError("vocabulary must begin with the reserved tokens");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.ids_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
      throw ConfigError("duplicate vocabulary token '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  HMT_CHECK(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(),
            "token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

Tokenizer::Tokenizer(BpeMerges merges, Vocabulary vocab)
    : merges_(std::move(merges)), vocab_(std::move(vocab)) {}

std::vector<int> Tokenizer::encode(std::string_view sentence) const {
  std::vector<int> ids{kBos};
  for (const auto& w : split_words(sentence)) {
    if (w == kMaskWord) {
      ids.push_back(kMask);
      continue;
    }
    std::lock_guard lock(*cache_mutex_);
    auto it = cache_.find(w);
    if (it == cache_.end()) {
      std::vector<int> pieces;
      for (const auto& s : apply_bpe(w, merges_)) pieces.push_back(vocab_.id(s));
      it = cache_.emplace(w, std::move(pieces)).first;
    }
    ids.insert(ids.end(), it->second.begin(), it->second.end());
  }
  ids.push_back(kEos);
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  auto sep = [&] {
    if (!out.empty() && out.back() != ' ') out += ' ';
  };
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (id == kMask) {
      sep();
      out += kMaskWord;
      out += ' ';
      continue;
    }
    if (id == kUnk) {
      out += "<unk>";
      continue;
    }
    std::string_view t = vocab_.token(id);
    if (t.ends_with(kEndOfWord)) {
      out += t.substr(0, t.size() - kEndOfWord.size());
      out += ' ';
    } else {
      out += t;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

void save_merges(const std::filesystem::path& path, const BpeMerges& merges) {
  std::vector<std::string> lines;
  for (const auto& [l, r] : merges.rules) lines.push_back(l + " " + r);
  write_lines(path, lines);
}

BpeMerges load_merges(const std::filesystem::path& path) {
  BpeMerges m;
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    auto parts = split_words(line);
    if (parts.size() != 2) throw ConfigError("malformed merge rule '" + line + "' in " + path.string());
    m.rules.emplace_back(parts[0], parts[1]);
  }
  return m;
}

std::vector<int> TokenBatch::src_row(std::size_t r) const {
  return {src.begin() + r * src_max, src.begin() + r * src_max + src_len[r]};
}

std::vector<int> TokenBatch::tgt_row(std::size_t r) const {
  return {tgt.begin() + r * tgt_max, tgt.begin() + r * tgt_max + tgt_len[r]};
}

BatchPlan batch_iterator(const std::vector<EncodedSample>& samples, std::size_t token_budget,
                         std::uint64_t seed) {
  HMT_CHECK(token_budget > 0, "batch_iterator: token budget must be positive");
  BatchPlan plan;
  Rng rng = Rng::stream(seed, "batches");
  std::vector<std::pair<std::uint64_t, std::size_t>> order;  // (shuffle key, index)
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::uint64_t key = rng.next_u64();
    if (samples[i].tgt.size() > token_budget) {
      ++plan.skipped;
      continue;
    }
    order.emplace_back(key, i);
  }
  std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    const auto la = samples[a.second].tgt.size(), lb = samples[b.second].tgt.size();
    return la != lb ? la < lb : a < b;
  });

  std::vector<std::vector<std::size_t>> groups;
  std::size_t used = 0;
  for (const auto& [key, idx] : order) {
    const std::size_t len = samples[idx].tgt.size();
    if (groups.empty() || used + len > token_budget) {
      groups.emplace_back();
      used = 0;
    }
    groups.back().push_back(idx);
    used += len;
  }
  rng.shuffle(std::span(groups));

  for (const auto& g : groups) {
    TokenBatch b;
    b.rows = g.size();
    for (std::size_t idx : g) {
      b.src_max = std::max(b.src_max, samples[idx].src.size());
      b.tgt_max = std::max(b.tgt_max, samples[idx].tgt.size());
    }
    b.src.assign(b.rows * b.src_max, kPad);
    b.tgt.assign(b.rows * b.tgt_max, kPad);
    for (std::size_t r = 0; r < g.size(); ++r) {
      const auto& s = samples[g[r]];
      std::copy(s.src.begin(), s.src.end(), b.src.begin() + r * b.src_max);
      std::copy(s.tgt.begin(), s.tgt.end(), b.tgt.begin() + r * b.tgt_max);
      b.src_len.push_back(s.src.size());
      b.tgt_len.push_back(s.tgt.size());
      b.sample_ids.push_back(s.id);
      b.images.push_back(s.image);
    }
    plan.batches.push_back(std::move(b));
  }
  return plan;
}

}  // namespace hmt

#include "hmt/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "hmt/error.hpp"

namespace hmt {

namespace {

struct Candidate {
  std::vector<int> tokens;
  double logprob;
};

bool better(double a, const std::vector<int>& ta, double b, const std::vector<int>& tb) {
  if (a != b) return a > b;
  return ta < tb;
}

double normalise(double logprob, std::size_t len, double alpha) {
  return logprob / std::pow(static_cast<double>(len), alpha);
}

std::vector<std::vector<double>> score(const StepScorer& scorer, const std::vector<Candidate>& alive, int bos) {
  std::vector<std::vector<int>> prefixes;
  prefixes.reserve(alive.size());
  for (const auto& h : alive) {
    std::vector<int> p{bos};
    p.insert(p.end(), h.tokens.begin(), h.tokens.end());
    prefixes.push_back(std::move(p));
  }
  auto rows = scorer(prefixes);
  HMT_CHECK(rows.size() == alive.size(), "decode: scorer returned " + std::to_string(rows.size()) +
                                             " rows for " + std::to_string(alive.size()) + " prefixes");
  return rows;
}

}  // namespace

void validate(const BeamConfig& cfg) {
  if (cfg.beam == 0) throw ConfigError("beam must be at least 1");
  if (cfg.max_len == 0) throw ConfigError("max_len must be at least 1");
  if (!std::isfinite(cfg.alpha) || cfg.alpha < 0.0) throw ConfigError("alpha must be finite and non-negative");
}

Hypothesis beam_search(const StepScorer& scorer, int bos, int eos, const BeamConfig& cfg,
                       const std::vector<int>& banned) {
  validate(cfg);
  std::vector<Candidate> alive{{{}, 0.0}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < cfg.max_len && !alive.empty() && finished.size() < cfg.beam; ++step) {
    const auto rows = score(scorer, alive, bos);
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < alive.size(); ++h) {
      for (std::size_t t = 0; t < rows[h].size(); ++t) {
        const int tok = static_cast<int>(t);
        if (std::find(banned.begin(), banned.end(), tok) != banned.end()) continue;
        HMT_CHECK(!std::isnan(rows[h][t]), "beam_search: scorer returned NaN");
        if (rows[h][t] == -std::numeric_limits<double>::infinity()) continue;
        std::vector<int> seq = alive[h].tokens;
        seq.push_back(tok);
        cands.push_back({std::move(seq), alive[h].logprob + rows[h][t]});
      }
    }
    const std::size_t keep = std::min(cfg.beam, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) { return better(a.logprob, a.tokens, b.logprob, b.tokens); });
    std::vector<Candidate> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Candidate& c = cands[i];
      if (c.tokens.back() == eos) {
        const double s = normalise(c.logprob, c.tokens.size(), cfg.alpha);
        finished.push_back({std::move(c.tokens), c.logprob, s, false});
      } else {
        next.push_back(std::move(c));
      }
    }
    alive = std::move(next);
  }
  if (!finished.empty()) {
    return *std::min_element(finished.begin(), finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
      return better(a.score, a.tokens, b.score, b.tokens);
    });
  }
  HMT_CHECK(!alive.empty(), "beam_search: no token has non-zero probability");
  const Candidate& best = alive.front();
  return {best.tokens, best.logprob, normalise(best.logprob, best.tokens.size(), cfg.alpha), true};
}

Hypothesis greedy_search(const StepScorer& scorer, int bos, int eos, const BeamConfig& cfg,
                         const std::vector<int>& banned) {
  validate(cfg);
  std::vector<Candidate> cur{{{}, 0.0}};
  for (std::size_t step = 0; step < cfg.max_len; ++step) {
    const auto rows = score(scorer, cur, bos);
    int arg = -1;
    for (std::size_t t = 0; t < rows[0].size(); ++t) {
      const int tok = static_cast<int>(t);
      if (std::find(banned.begin(), banned.end(), tok) != banned.end()) continue;
      if (arg < 0 || rows[0][t] > rows[0][static_cast<std::size_t>(arg)]) arg = tok;
    }
    HMT_CHECK(arg >= 0, "greedy_search: every token is banned");
    cur[0].tokens.push_back(arg);
    cur[0].logprob += rows[0][static_cast<std::size_t>(arg)];
    if (arg == eos) {
      return {cur[0].tokens, cur[0].logprob, normalise(cur[0].logprob, cur[0].tokens.size(), cfg.alpha), false};
    }
  }
  return {cur[0].tokens, cur[0].logprob, normalise(cur[0].logprob, cur[0].tokens.size(), cfg.alpha), true};
}

}  // namespace hmt

#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace hmt {

struct BeamConfig {
  std::size_t beam = 5;
  double alpha = 1.0;
  std::size_t max_len = 40;  // generated tokens, EOS included
};

void validate(const BeamConfig& cfg);

// Log-probabilities of the next token for each prefix (BOS first).
using StepScorer = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<int>>&)>;

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens without BOS; ends with EOS unless truncated
  double logprob = 0.0;
  double score = 0.0;       // logprob / |tokens|^alpha
  bool truncated = false;
};

// Candidates are ranked by cumulative log-probability; finished ones by the
// length-normalised score. Equal scores go to the lexicographically smaller
// token sequence. Stops once `beam` hypotheses have finished or max_len is
// reached; with none finished the best unfinished one is returned with
// truncated set. Tokens with zero probability are never expanded.
Hypothesis beam_search(const StepScorer& scorer, int bos, int eos, const BeamConfig& cfg,
                       const std::vector<int>& banned = {});

// Argmax token at each step until EOS or max_len.
Hypothesis greedy_search(const StepScorer& scorer, int bos, int eos, const BeamConfig& cfg,
                         const std::vector<int>& banned = {});

}  // namespace hmt

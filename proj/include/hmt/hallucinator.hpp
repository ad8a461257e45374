#pragma once

// Autoregressive model over the concatenated stream of source-text ids and
// visual code ids. Visual code k is stream id text_vocab + k.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "hmt/nn.hpp"

namespace hmt {

struct GumbelConfig {
  double tau0 = 5.0;
  double tau_min = 0.1;
  double rate = 1e-3;
};

// Throws ConfigError unless tau0 >= tau_min > 0 and rate > 0.
void validate(const GumbelConfig& cfg);

// max(tau_min, tau0 * exp(-rate * step)).
double anneal_tau(std::int64_t step, const GumbelConfig& cfg);

class Hallucinator {
 public:
  static Hallucinator init(const ModelConfig& cfg, std::size_t text_vocab, std::size_t codebook_size,
                           std::size_t grid_side, std::uint64_t seed);

  std::size_t text_vocab() const { return text_vocab_; }
  std::size_t codebook_size() const { return codes_; }
  std::size_t num_visual() const { return side_ * side_; }
  std::size_t span() const { return text_vocab_ + codes_; }

  // Logits over the full id span for the stream x ++ z_prefix; row i scores
  // the element following stream position i.
  Tensor logits(std::span<const int> x, std::span<const int> z_prefix, const Dropout& drop) const;

  ParamList params() const;

 private:
  ModelConfig cfg_;
  std::size_t text_vocab_ = 0, codes_ = 0, side_ = 0;
  Tensor embed_, row_, col_;
  std::vector<DecoderBlock> blocks_;
  Norm final_;
  Linear out_;
};

struct HallucinatorPass {
  Tensor joint_logprob;  // scalar: text positions plus visual positions
  Tensor visual_logpi;   // [V, K] log pi over the visual block, floored at 1e-12
};

// Teacher-forced pass on gold z; |x| >= 2 and |z| == V.
HallucinatorPass hallucinate(const Hallucinator& h, std::span<const int> x, std::span<const int> z,
                             const Dropout& drop = {});

Tensor joint_logprob(const Hallucinator& h, std::span<const int> x, std::span<const int> z);

// Mean over samples of -joint_logprob.
Tensor hallucination_loss(const Hallucinator& h, const std::vector<std::vector<int>>& xs,
                          const std::vector<std::vector<int>>& zs, const Dropout& drop = {});

// Greedy decode: at each visual position the argmax over the K codes given
// the previously decoded codes; ties to the smallest index.
std::vector<int> greedy_visual_decode(
    const std::function<std::vector<double>(std::span<const int>)>& next_scores, std::size_t length);
std::vector<int> decode_hallucination(const Hallucinator& h, std::span<const int> x);

// log(max(p, floor)) applied to log-probabilities; the gradient is zero
// where the floor is active.
Tensor floor_log_probs(const Tensor& logp, double floor = 1e-12);

// Standard Gumbel noise -log(-log u), u ~ U(0, 1).
Tensor gumbel_noise(const Shape& shape, Rng& rng);
// softmax((log pi + g) / tau) per row.
Tensor gumbel_softmax_sample(const Tensor& log_pi, double tau, const Tensor& noise);
Tensor gumbel_softmax_sample(const Tensor& log_pi, double tau, Rng& rng);

// soft [V, K] times the frozen codebook [K, d]; no gradient reaches the codebook.
Tensor soft_embed(const Tensor& soft, const Tensor& codebook);

}  // namespace hmt

#pragma once

// Batch objectives for the hallucination and translation stages.

#include <span>
#include <vector>

#include "hmt/hallucinator.hpp"
#include "hmt/translator.hpp"

namespace hmt {

struct Example {
  std::vector<int> src;    // BOS ... EOS
  std::vector<int> tgt;    // BOS ... EOS
  std::vector<int> codes;  // gold visual tokens, one per grid cell
};

struct JointWeights {
  double gamma_h = 0.5;
  double lambda_c = 0.5;
};

struct JointLoss {
  Tensor total;
  Tensor trans_gold;   // translation loss with gold visual tokens
  Tensor trans_hall;   // translation loss with Gumbel-sampled tokens
  Tensor halluc;       // hallucinator negative log-likelihood
  Tensor consistency;  // KL from the gold stream to the sampled stream
};

// total = trans_gold + trans_hall + gamma_h * halluc + lambda_c * consistency.
// noise[i] is the [V, K] Gumbel noise for example i. Each stream draws its
// own dropout masks from drop.
JointLoss joint_loss(const Hallucinator& h, const Translator& t, const Tensor& codebook,
                     std::span<const Example> batch, const JointWeights& w, double tau,
                     const std::vector<Tensor>& noise, const Dropout& drop = {});

// Translation loss of the model without visual input.
Tensor text_only_loss(const Translator& t, std::span<const Example> batch, const Dropout& drop = {});

// Hallucinator negative log-likelihood of (src, codes).
Tensor halluc_loss(const Hallucinator& h, std::span<const Example> batch, const Dropout& drop = {});

}  // namespace hmt

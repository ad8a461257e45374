#pragma once

// Encoder-decoder translation model over source text optionally followed by
// visual rows (one per grid cell).

#include <cstdint>
#include <span>
#include <vector>

#include "hmt/nn.hpp"

namespace hmt {

class Translator {
 public:
  static Translator init(const ModelConfig& cfg, std::size_t vocab, std::size_t code_dim,
                         std::size_t grid_side, std::uint64_t seed);

  std::size_t vocab() const { return vocab_; }
  std::size_t num_visual() const { return side_ * side_; }
  const ModelConfig& config() const { return cfg_; }

  // Code vectors [V, d] (hard or soft) -> encoder rows [V, dim] with the
  // projection and the row + column position tables applied.
  Tensor visual_rows(const Tensor& codes) const;

  // Encoder memory for x, followed by the visual rows when defined.
  Tensor encode(std::span<const int> x, const Tensor& visual, const Dropout& drop) const;
  // Log-softmax rows [|y_in|, vocab] for teacher-forced decoder inputs.
  Tensor decode(const Tensor& memory, std::span<const int> y_in, const Dropout& drop) const;

  ParamList params() const;
  // Parameters that only the visual input reaches.
  ParamList visual_params() const;
  ParamList text_params() const;

 private:
  ModelConfig cfg_;
  std::size_t vocab_ = 0, code_dim_ = 0, side_ = 0;
  Tensor src_embed_, tgt_embed_;
  Linear visual_proj_;
  Tensor row_, col_;
  std::vector<EncoderBlock> enc_;
  Norm enc_final_;
  std::vector<DecoderBlock> dec_;
  Norm dec_final_;
  Linear out_;
};

// Rows [|y| - 1, vocab]: row i is log p(y[i+1] | y[..i], x, visual).
// An undefined visual tensor gives the text-only model.
Tensor sequence_logprob(const Translator& t, std::span<const int> x, const Tensor& visual,
                        std::span<const int> y, const Dropout& drop = {});

// Negative mean gold log-probability over all target positions of a batch;
// rows[i] pairs with targets[i] (the full y, BOS first).
Tensor translation_loss(const std::vector<Tensor>& rows, const std::vector<std::vector<int>>& targets);

// Mean over target positions of KL[m || h]; m is a constant reference.
Tensor consistency_loss(const std::vector<Tensor>& rows_m, const std::vector<Tensor>& rows_h);

}  // namespace hmt

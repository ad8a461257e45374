#pragma once

// Transformer building blocks shared by the hallucinator and the translator.

#include <span>
#include <string>
#include <vector>

#include "hmt/params.hpp"
#include "hmt/tensor.hpp"

namespace hmt {

class Rng;

struct ModelConfig {
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t hall_layers = 2;
  std::size_t dim = 64;
  std::size_t ffn = 128;
  std::size_t heads = 4;
  double dropout = 0.1;
  // Output projections start at zero, so an untrained model is uniform.
  bool zero_init_output = true;
};

// Throws ConfigError when dim is odd or not divisible by heads.
void validate(const ModelConfig& cfg);

// Training-mode dropout when rng is set and p > 0, identity otherwise.
struct Dropout {
  Rng* rng = nullptr;
  double p = 0.0;
  Tensor operator()(const Tensor& x) const;
};

struct Linear {
  Tensor w, b;  // [in, out], [out]
  static Linear init(std::size_t in, std::size_t out, Rng& rng, bool zero = false);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct Norm {
  Tensor gamma, beta;
  static Norm init(std::size_t dim);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;
  static MultiHeadAttention init(std::size_t dim, std::size_t heads, Rng& rng);
  // query [Tq, D] attends over kv [Tk, D]; causal requires Tq == Tk.
  Tensor operator()(const Tensor& query, const Tensor& kv, bool causal) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct FeedForward {
  Linear up, down;
  static FeedForward init(std::size_t dim, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Pre-norm residual blocks.
struct EncoderBlock {
  Norm n1, n2;
  MultiHeadAttention attn;
  FeedForward ff;
  static EncoderBlock init(const ModelConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& x, const Dropout& drop) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Causal self-attention, then cross-attention when memory is defined.
struct DecoderBlock {
  Norm n1, n2, n3;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ff;
  bool has_cross = true;
  static DecoderBlock init(const ModelConfig& cfg, bool cross, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& memory, const Dropout& drop) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Rows of sin/cos pairs: PE[p, 2i] = sin(p / 10000^(2i/D)), PE[p, 2i+1] = cos(.).
// Throws ConfigError for odd dim.
Tensor sinusoidal_encoding(std::size_t length, std::size_t dim, std::size_t offset = 0);
// Cell (r, c) of a side x side grid in raster order: row_table[r] + col_table[c].
Tensor grid_encoding(const Tensor& row_table, const Tensor& col_table, std::size_t side);

// Sum of logp[i, targets[i]] over rows.
Tensor pick(const Tensor& logp, std::span<const int> targets);

}  // namespace hmt

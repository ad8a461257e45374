#include "hmt/nn.hpp"

#include <cmath>

#include "hmt/error.hpp"
#include "hmt/rng.hpp"

namespace hmt {

namespace {

constexpr double kMasked = -1e30;

Tensor causal_mask(std::size_t n) {
  std::vector<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = kMasked;
  }
  return Tensor::from_data({n, n}, std::move(m));
}

}  // namespace

void validate(const ModelConfig& cfg) {
  if (cfg.dim == 0 || cfg.dim % 2 != 0) throw ConfigError("model dim must be positive and even");
  if (cfg.heads == 0 || cfg.dim % cfg.heads != 0) {
    throw ConfigError("model dim " + std::to_string(cfg.dim) + " is not divisible by " +
                      std::to_string(cfg.heads) + " heads");
  }
  if (cfg.ffn == 0) throw ConfigError("ffn width must be positive");
  if (cfg.enc_layers == 0 || cfg.dec_layers == 0 || cfg.hall_layers == 0) {
    throw ConfigError("layer counts must be positive");
  }
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
}

Tensor Dropout::operator()(const Tensor& x) const {
  if (rng == nullptr || p <= 0.0) return x;
  return dropout(x, dropout_mask(x.shape(), p, *rng));
}

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng, bool zero) {
  Linear l;
  l.w = zero ? zero_param({in, out}) : normal_param({in, out}, 1.0 / std::sqrt(double(in)), rng);
  l.b = zero_param({out});
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, w), b); }

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".w", w});
  out.push_back({prefix + ".b", b});
}

Norm Norm::init(std::size_t dim) { return {const_param({dim}, 1.0), zero_param({dim})}; }

Tensor Norm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void Norm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

MultiHeadAttention MultiHeadAttention::init(std::size_t dim, std::size_t heads, Rng& rng) {
  MultiHeadAttention a;
  a.q = Linear::init(dim, dim, rng);
  a.k = Linear::init(dim, dim, rng);
  a.v = Linear::init(dim, dim, rng);
  a.o = Linear::init(dim, dim, rng);
  a.heads = heads;
  return a;
}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& kv, bool causal) const {
  const std::size_t dim = q.w.dim(1);
  const std::size_t dh = dim / heads;
  HMT_CHECK(!causal || query.dim(0) == kv.dim(0), "causal attention needs equal lengths");
  Tensor qs = q(query), ks = k(kv), vs = v(kv);
  Tensor mask;
  if (causal && query.dim(0) > 1) mask = causal_mask(query.dim(0));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? qs : slice_cols(qs, h * dh, (h + 1) * dh);
    Tensor kh = heads == 1 ? ks : slice_cols(ks, h * dh, (h + 1) * dh);
    Tensor vh = heads == 1 ? vs : slice_cols(vs, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul_nt(qh, kh), inv);
    if (mask.defined()) scores = add(scores, mask);
    outs.push_back(matmul(softmax(scores), vh));
  }
  Tensor joined = heads == 1 ? outs[0] : concat(outs, 1);
  return o(joined);
}

void MultiHeadAttention::collect(ParamList& out, const std::string& prefix) const {
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  o.collect(out, prefix + ".o");
}

FeedForward FeedForward::init(std::size_t dim, std::size_t hidden, Rng& rng) {
  return {Linear::init(dim, hidden, rng), Linear::init(hidden, dim, rng)};
}

Tensor FeedForward::operator()(const Tensor& x) const { return down(gelu(up(x))); }

void FeedForward::collect(ParamList& out, const std::string& prefix) const {
  up.collect(out, prefix + ".up");
  down.collect(out, prefix + ".down");
}

EncoderBlock EncoderBlock::init(const ModelConfig& cfg, Rng& rng) {
  EncoderBlock b;
  b.n1 = Norm::init(cfg.dim);
  b.n2 = Norm::init(cfg.dim);
  b.attn = MultiHeadAttention::init(cfg.dim, cfg.heads, rng);
  b.ff = FeedForward::init(cfg.dim, cfg.ffn, rng);
  return b;
}

Tensor EncoderBlock::operator()(const Tensor& x, const Dropout& drop) const {
  Tensor h = n1(x);
  Tensor y = add(x, drop(attn(h, h, false)));
  return add(y, drop(ff(n2(y))));
}

void EncoderBlock::collect(ParamList& out, const std::string& prefix) const {
  n1.collect(out, prefix + ".n1");
  n2.collect(out, prefix + ".n2");
  attn.collect(out, prefix + ".attn");
  ff.collect(out, prefix + ".ff");
}

DecoderBlock DecoderBlock::init(const ModelConfig& cfg, bool cross, Rng& rng) {
  DecoderBlock b;
  b.has_cross = cross;
  b.n1 = Norm::init(cfg.dim);
  b.n2 = Norm::init(cfg.dim);
  b.self_attn = MultiHeadAttention::init(cfg.dim, cfg.heads, rng);
  if (cross) {
    b.n3 = Norm::init(cfg.dim);
    b.cross_attn = MultiHeadAttention::init(cfg.dim, cfg.heads, rng);
  }
  b.ff = FeedForward::init(cfg.dim, cfg.ffn, rng);
  return b;
}

Tensor DecoderBlock::operator()(const Tensor& x, const Tensor& memory, const Dropout& drop) const {
  Tensor h = n1(x);
  Tensor y = add(x, drop(self_attn(h, h, true)));
  if (has_cross) {
    HMT_CHECK(memory.defined(), "decoder block with cross-attention needs encoder memory");
    y = add(y, drop(cross_attn(n3(y), memory, false)));
  }
  return add(y, drop(ff(n2(y))));
}

void DecoderBlock::collect(ParamList& out, const std::string& prefix) const {
  n1.collect(out, prefix + ".n1");
  n2.collect(out, prefix + ".n2");
  self_attn.collect(out, prefix + ".self");
  if (has_cross) {
    n3.collect(out, prefix + ".n3");
    cross_attn.collect(out, prefix + ".cross");
  }
  ff.collect(out, prefix + ".ff");
}

Tensor sinusoidal_encoding(std::size_t length, std::size_t dim, std::size_t offset) {
  if (dim % 2 != 0) throw ConfigError("sinusoidal encoding needs an even dim, got " + std::to_string(dim));
  std::vector<double> pe(length * dim);
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double angle = static_cast<double>(p + offset) /
                           std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(dim));
      pe[p * dim + 2 * i] = std::sin(angle);
      pe[p * dim + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from_data({length, dim}, std::move(pe));
}

Tensor grid_encoding(const Tensor& row_table, const Tensor& col_table, std::size_t side) {
  std::vector<int> rows, cols;
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      rows.push_back(static_cast<int>(r));
      cols.push_back(static_cast<int>(c));
    }
  }
  return add(embedding_gather(row_table, rows), embedding_gather(col_table, cols));
}

Tensor pick(const Tensor& logp, std::span<const int> targets) {
  HMT_CHECK(logp.rank() == 2 && logp.dim(0) == targets.size(),
            "pick: " + std::to_string(targets.size()) + " targets for rows " + shape_str(logp.shape()));
  const std::size_t cols = logp.dim(1);
  std::vector<double> onehot(logp.numel(), 0.0);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    HMT_CHECK(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < cols,
              "pick: target id " + std::to_string(targets[i]) + " out of range");
    onehot[i * cols + targets[i]] = 1.0;
  }
  return reduce_sum(mul(logp, Tensor::from_data(logp.shape(), std::move(onehot))));
}

}  // namespace hmt

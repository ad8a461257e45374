#include "hmt/hallucinator.hpp"

#include <cmath>

#include "hmt/error.hpp"
#include "hmt/rng.hpp"

namespace hmt {

void validate(const GumbelConfig& cfg) {
  if (!(cfg.tau_min > 0.0) || cfg.tau0 < cfg.tau_min) {
    throw ConfigError("gumbel: need tau0 >= tau_min > 0");
  }
  if (!(cfg.rate > 0.0)) throw ConfigError("gumbel: anneal rate must be positive");
}

double anneal_tau(std::int64_t step, const GumbelConfig& cfg) {
  HMT_CHECK(step >= 0, "anneal_tau: negative step");
  return std::max(cfg.tau_min, cfg.tau0 * std::exp(-cfg.rate * static_cast<double>(step)));
}

Hallucinator Hallucinator::init(const ModelConfig& cfg, std::size_t text_vocab,
                                std::size_t codebook_size, std::size_t grid_side,
                                std::uint64_t seed) {
  validate(cfg);
  HMT_CHECK(text_vocab > 0 && codebook_size >= 2 && grid_side > 0, "hallucinator: bad sizes");
  Rng rng = Rng::stream(seed, "hallucinator-init");
  Hallucinator h;
  h.cfg_ = cfg;
  h.text_vocab_ = text_vocab;
  h.codes_ = codebook_size;
  h.side_ = grid_side;
  h.embed_ = normal_param({text_vocab + codebook_size, cfg.dim}, 1.0, rng);
  h.row_ = normal_param({grid_side, cfg.dim}, 0.1, rng);
  h.col_ = normal_param({grid_side, cfg.dim}, 0.1, rng);
  for (std::size_t l = 0; l < cfg.hall_layers; ++l) h.blocks_.push_back(DecoderBlock::init(cfg, false, rng));
  h.final_ = Norm::init(cfg.dim);
  h.out_ = Linear::init(cfg.dim, text_vocab + codebook_size, rng, cfg.zero_init_output);
  return h;
}

Tensor Hallucinator::logits(std::span<const int> x, std::span<const int> z_prefix,
                            const Dropout& drop) const {
  HMT_CHECK(!x.empty(), "hallucinator: empty text");
  HMT_CHECK(z_prefix.size() < num_visual(), "hallucinator: visual prefix longer than V - 1");
  std::vector<int> ids(x.begin(), x.end());
  for (int t : x) {
    HMT_CHECK(t >= 0 && static_cast<std::size_t>(t) < text_vocab_,
              "hallucinator: text id " + std::to_string(t) + " out of range");
  }
  for (int k : z_prefix) {
    HMT_CHECK(k >= 0 && static_cast<std::size_t>(k) < codes_,
              "hallucinator: visual code " + std::to_string(k) + " out of range");
    ids.push_back(static_cast<int>(text_vocab_) + k);
  }
  Tensor h = embedding_gather(embed_, ids);
  Tensor pos = sinusoidal_encoding(x.size(), cfg_.dim);
  if (!z_prefix.empty()) {
    Tensor grid = slice_rows(grid_encoding(row_, col_, side_), 0, z_prefix.size());
    const Tensor parts[] = {pos, grid};
    pos = concat(parts, 0);
  }
  h = drop(add(h, pos));
  Tensor none;
  for (const auto& b : blocks_) h = b(h, none, drop);
  return out_(final_(h));
}

ParamList Hallucinator::params() const {
  ParamList out{{"embed", embed_}, {"row", row_}, {"col", col_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(out, "block" + std::to_string(l));
  final_.collect(out, "final");
  out_.collect(out, "out");
  return out;
}

Tensor floor_log_probs(const Tensor& logp, double floor) {
  const double lf = std::log(floor);
  std::vector<double> keep(logp.numel()), fill(logp.numel());
  bool any = false;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const bool low = logp.data()[i] < lf;
    any = any || low;
    keep[i] = low ? 0.0 : 1.0;
    fill[i] = low ? lf : 0.0;
  }
  if (!any) return logp;
  return add(mul(logp, Tensor::from_data(logp.shape(), std::move(keep))),
             Tensor::from_data(logp.shape(), std::move(fill)));
}

HallucinatorPass hallucinate(const Hallucinator& h, std::span<const int> x, std::span<const int> z,
                             const Dropout& drop) {
  HMT_CHECK(x.size() >= 2, "hallucinate: text needs at least BOS and EOS");
  HMT_CHECK(z.size() == h.num_visual(), "hallucinate: expected " + std::to_string(h.num_visual()) +
                                            " visual tokens, got " + std::to_string(z.size()));
  Tensor lg = h.logits(x, z.first(z.size() - 1), drop);
  Tensor logp = log_softmax(lg);
  std::vector<int> targets(x.begin() + 1, x.end());
  for (int k : z) targets.push_back(static_cast<int>(h.text_vocab()) + k);
  HallucinatorPass out;
  out.joint_logprob = pick(logp, targets);
  Tensor visual = slice_rows(lg, x.size() - 1, lg.dim(0));
  out.visual_logpi = floor_log_probs(log_softmax(slice_cols(visual, h.text_vocab(), h.span())));
  return out;
}

Tensor joint_logprob(const Hallucinator& h, std::span<const int> x, std::span<const int> z) {
  return hallucinate(h, x, z).joint_logprob;
}

Tensor hallucination_loss(const Hallucinator& h, const std::vector<std::vector<int>>& xs,
                          const std::vector<std::vector<int>>& zs, const Dropout& drop) {
  HMT_CHECK(!xs.empty() && xs.size() == zs.size(), "hallucination_loss: batch size mismatch");
  Tensor total;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Tensor term = hallucinate(h, xs[i], zs[i], drop).joint_logprob;
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, -1.0 / static_cast<double>(xs.size()));
}

std::vector<int> greedy_visual_decode(
    const std::function<std::vector<double>(std::span<const int>)>& next_scores, std::size_t length) {
  std::vector<int> z;
  for (std::size_t i = 0; i < length; ++i) {
    const std::vector<double> s = next_scores(z);
    HMT_CHECK(!s.empty(), "greedy_visual_decode: empty score vector");
    std::size_t best = 0;
    for (std::size_t k = 1; k < s.size(); ++k) {
      if (s[k] > s[best]) best = k;
    }
    z.push_back(static_cast<int>(best));
  }
  return z;
}

std::vector<int> decode_hallucination(const Hallucinator& h, std::span<const int> x) {
  NoTapeScope no_tape;
  std::vector<int> xs(x.begin(), x.end());
  return greedy_visual_decode(
      [&](std::span<const int> prefix) {
        Tensor lg = h.logits(xs, prefix, {});
        const std::size_t last = lg.dim(0) - 1;
        std::vector<double> s(h.codebook_size());
        for (std::size_t k = 0; k < s.size(); ++k) s[k] = lg.at(last, h.text_vocab() + k);
        return s;
      },
      h.num_visual());
}

Tensor gumbel_noise(const Shape& shape, Rng& rng) {
  std::vector<double> g(shape_numel(shape));
  for (double& v : g) v = -std::log(-std::log(rng.uniform_open()));
  return Tensor::from_data(shape, std::move(g));
}

Tensor gumbel_softmax_sample(const Tensor& log_pi, double tau, const Tensor& noise) {
  HMT_CHECK(tau > 0.0, "gumbel_softmax_sample: tau must be positive");
  return softmax(scale(add(log_pi, noise), 1.0 / tau));
}

Tensor gumbel_softmax_sample(const Tensor& log_pi, double tau, Rng& rng) {
  return gumbel_softmax_sample(log_pi, tau, gumbel_noise(log_pi.shape(), rng));
}

Tensor soft_embed(const Tensor& soft, const Tensor& codebook) {
  return matmul(soft, codebook.detach());
}

}  // namespace hmt

#include "hmt/translator.hpp"

#include <cmath>

#include "hmt/error.hpp"
#include "hmt/rng.hpp"

namespace hmt {

namespace {

void check_ids(std::span<const int> ids, std::size_t vocab, const char* what) {
  for (int t : ids) {
    HMT_CHECK(t >= 0 && static_cast<std::size_t>(t) < vocab,
              std::string(what) + " id " + std::to_string(t) + " out of range");
  }
}

}  // namespace

Translator Translator::init(const ModelConfig& cfg, std::size_t vocab, std::size_t code_dim,
                            std::size_t grid_side, std::uint64_t seed) {
  validate(cfg);
  HMT_CHECK(vocab > 0 && code_dim > 0 && grid_side > 0, "translator: bad sizes");
  Rng rng = Rng::stream(seed, "translator-init");
  Translator t;
  t.cfg_ = cfg;
  t.vocab_ = vocab;
  t.code_dim_ = code_dim;
  t.side_ = grid_side;
  t.src_embed_ = normal_param({vocab, cfg.dim}, 1.0, rng);
  t.tgt_embed_ = normal_param({vocab, cfg.dim}, 1.0, rng);
  t.visual_proj_ = Linear::init(code_dim, cfg.dim, rng);
  t.row_ = normal_param({grid_side, cfg.dim}, 0.1, rng);
  t.col_ = normal_param({grid_side, cfg.dim}, 0.1, rng);
  for (std::size_t l = 0; l < cfg.enc_layers; ++l) t.enc_.push_back(EncoderBlock::init(cfg, rng));
  t.enc_final_ = Norm::init(cfg.dim);
  for (std::size_t l = 0; l < cfg.dec_layers; ++l) t.dec_.push_back(DecoderBlock::init(cfg, true, rng));
  t.dec_final_ = Norm::init(cfg.dim);
  t.out_ = Linear::init(cfg.dim, vocab, rng, cfg.zero_init_output);
  return t;
}

Tensor Translator::visual_rows(const Tensor& codes) const {
  HMT_CHECK(codes.rank() == 2 && codes.dim(0) == num_visual() && codes.dim(1) == code_dim_,
            "translator: visual input " + shape_str(codes.shape()) + " does not match [" +
                std::to_string(num_visual()) + ", " + std::to_string(code_dim_) + "]");
  return add(visual_proj_(codes), grid_encoding(row_, col_, side_));
}

Tensor Translator::encode(std::span<const int> x, const Tensor& visual, const Dropout& drop) const {
  HMT_CHECK(!x.empty(), "translator: empty source");
  check_ids(x, vocab_, "source");
  Tensor h = add(embedding_gather(src_embed_, x), sinusoidal_encoding(x.size(), cfg_.dim));
  if (visual.defined()) {
    const Tensor parts[] = {h, visual};
    h = concat(parts, 0);
  }
  h = drop(h);
  for (const auto& b : enc_) h = b(h, drop);
  return enc_final_(h);
}

Tensor Translator::decode(const Tensor& memory, std::span<const int> y_in, const Dropout& drop) const {
  HMT_CHECK(!y_in.empty(), "translator: empty decoder input");
  check_ids(y_in, vocab_, "target");
  Tensor h = drop(add(embedding_gather(tgt_embed_, y_in), sinusoidal_encoding(y_in.size(), cfg_.dim)));
  for (const auto& b : dec_) h = b(h, memory, drop);
  return log_softmax(out_(dec_final_(h)));
}

ParamList Translator::visual_params() const {
  ParamList out;
  visual_proj_.collect(out, "visual_proj");
  out.push_back({"row", row_});
  out.push_back({"col", col_});
  return out;
}

ParamList Translator::text_params() const {
  ParamList out{{"src_embed", src_embed_}, {"tgt_embed", tgt_embed_}};
  for (std::size_t l = 0; l < enc_.size(); ++l) enc_[l].collect(out, "enc" + std::to_string(l));
  enc_final_.collect(out, "enc_final");
  for (std::size_t l = 0; l < dec_.size(); ++l) dec_[l].collect(out, "dec" + std::to_string(l));
  dec_final_.collect(out, "dec_final");
  out_.collect(out, "out");
  return out;
}

ParamList Translator::params() const {
  ParamList out = text_params();
  for (auto& p : visual_params()) out.push_back(std::move(p));
  return out;
}

Tensor sequence_logprob(const Translator& t, std::span<const int> x, const Tensor& visual,
                        std::span<const int> y, const Dropout& drop) {
  HMT_CHECK(y.size() >= 2, "sequence_logprob: target needs at least BOS and EOS");
  check_ids(y, t.vocab(), "target");
  return t.decode(t.encode(x, visual, drop), y.first(y.size() - 1), drop);
}

Tensor translation_loss(const std::vector<Tensor>& rows, const std::vector<std::vector<int>>& targets) {
  HMT_CHECK(!rows.empty() && rows.size() == targets.size(), "translation_loss: batch size mismatch");
  Tensor total;
  std::size_t count = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::span<const int> gold(targets[i]);
    Tensor term = pick(rows[i], gold.subspan(1));
    total = total.defined() ? add(total, term) : term;
    count += gold.size() - 1;
  }
  return scale(total, -1.0 / static_cast<double>(count));
}

Tensor consistency_loss(const std::vector<Tensor>& rows_m, const std::vector<Tensor>& rows_h) {
  HMT_CHECK(!rows_m.empty() && rows_m.size() == rows_h.size(), "consistency_loss: batch size mismatch");
  Tensor total;
  std::size_t count = 0;
  for (std::size_t i = 0; i < rows_m.size(); ++i) {
    HMT_CHECK(rows_m[i].shape() == rows_h[i].shape(), "consistency_loss: stream shapes differ");
    const auto lm = rows_m[i].data();
    std::vector<double> p(lm.size());
    double ref = 0.0;  // sum p log p, constant
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] = std::exp(lm[j]);
      if (p[j] > 0.0) ref += p[j] * lm[j];
    }
    // KL = sum p (log p - log h) = ref - sum p log h
    Tensor cross = reduce_sum(mul(rows_h[i], Tensor::from_data(rows_h[i].shape(), std::move(p))));
    Tensor term = sub(Tensor::scalar(ref), cross);
    total = total.defined() ? add(total, term) : term;
    count += rows_m[i].dim(0);
  }
  return scale(total, 1.0 / static_cast<double>(count));
}

}  // namespace hmt

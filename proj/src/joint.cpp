#include "hmt/joint.hpp"

#include <string>

#include "hmt/error.hpp"
#include "hmt/vq.hpp"

namespace hmt {

JointLoss joint_loss(const Hallucinator& h, const Translator& t, const Tensor& codebook,
                     std::span<const Example> batch, const JointWeights& w, double tau,
                     const std::vector<Tensor>& noise, const Dropout& drop) {
  HMT_CHECK(!batch.empty(), "joint_loss: empty batch");
  HMT_CHECK(noise.size() == batch.size(), "joint_loss: " + std::to_string(noise.size()) +
                                              " noise tensors for " + std::to_string(batch.size()) + " examples");
  std::vector<Tensor> rows_m, rows_h;
  std::vector<std::vector<int>> targets;
  Tensor nll;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Example& ex = batch[i];
    HallucinatorPass pass = hallucinate(h, ex.src, ex.codes, drop);
    nll = nll.defined() ? sub(nll, pass.joint_logprob) : scale(pass.joint_logprob, -1.0);

    Tensor soft = gumbel_softmax_sample(pass.visual_logpi, tau, noise[i]);
    rows_h.push_back(sequence_logprob(t, ex.src, t.visual_rows(soft_embed(soft, codebook)), ex.tgt, drop));
    rows_m.push_back(sequence_logprob(t, ex.src, t.visual_rows(embed_tokens(ex.codes, codebook)), ex.tgt, drop));
    targets.push_back(ex.tgt);
  }
  JointLoss out;
  out.halluc = scale(nll, 1.0 / static_cast<double>(batch.size()));
  out.trans_gold = translation_loss(rows_m, targets);
  out.trans_hall = translation_loss(rows_h, targets);
  out.consistency = consistency_loss(rows_m, rows_h);
  out.total = add(add(out.trans_gold, out.trans_hall),
                  add(scale(out.halluc, w.gamma_h), scale(out.consistency, w.lambda_c)));
  return out;
}

Tensor text_only_loss(const Translator& t, std::span<const Example> batch, const Dropout& drop) {
  HMT_CHECK(!batch.empty(), "text_only_loss: empty batch");
  std::vector<Tensor> rows;
  std::vector<std::vector<int>> targets;
  for (const Example& ex : batch) {
    rows.push_back(sequence_logprob(t, ex.src, Tensor{}, ex.tgt, drop));
    targets.push_back(ex.tgt);
  }
  return translation_loss(rows, targets);
}

Tensor halluc_loss(const Hallucinator& h, std::span<const Example> batch, const Dropout& drop) {
  std::vector<std::vector<int>> xs, zs;
  for (const Example& ex : batch) {
    xs.push_back(ex.src);
    zs.push_back(ex.codes);
  }
  return hallucination_loss(h, xs, zs, drop);
}

}  // namespace hmt

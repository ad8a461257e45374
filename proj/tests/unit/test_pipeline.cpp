#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "hmt/error.hpp"
#include "hmt/pipeline.hpp"

using namespace hmt;
namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path p = [] {
    fs::path d = fs::temp_directory_path() / "hmt_pipeline_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

Config small_config(const std::string& run) {
  Config c;
  c.set("data_dir", (root() / "data").string());
  c.set("vae_dir", (root() / "vae").string());
  c.set("work_dir", (root() / run).string());
  c.set("n_samples", "120");
  c.set("bpe_merges", "40");
  c.set("vae_steps", "20");
  c.set("vae_batch", "4");
  c.set("dim", "8");
  c.set("ffn", "16");
  c.set("heads", "2");
  c.set("enc_layers", "1");
  c.set("dec_layers", "1");
  c.set("hall_layers", "1");
  c.set("halluc_steps", "4");
  c.set("steps", "6");
  c.set("warmup", "3");
  c.set("token_budget", "64");
  c.set("ckpt_interval", "3");
  c.set("log_every", "1000");
  c.set("beam", "2");
  c.set("max_len", "12");
  return c;
}

// Corpus and visual encoder shared by every test.
void prepare() {
  static bool done = false;
  if (done) return;
  spdlog::set_level(spdlog::level::err);
  const Config c = small_config("vae_run");
  export_corpus(c.get("data_dir"), generate_corpus(c.count("n_samples"), 0));
  train_vae_stage(c);
  done = true;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("dataset loading, masking and token caches") {
  prepare();
  Config c = small_config("data_check");
  const Dataset plain = load_dataset(c);
  CHECK(plain.train.source.size() == 96);
  CHECK(plain.test.source.size() == 12);
  CHECK(plain.train.source == plain.train.raw_source);
  REQUIRE(plain.train.codes.size() == 96);
  CHECK(plain.train.codes[0].size() == 16);

  c.set("mask_p", "1");
  const Dataset masked = load_dataset(c);
  CHECK(masked.tokenizer.vocab().tokens() == plain.tokenizer.vocab().tokens());
  for (std::size_t i = 0; i < masked.train.source.size(); ++i) {
    const auto words = split_words(masked.train.source[i]);
    for (const auto& [b, e] : masked.train.spans[i]) {
      for (std::size_t w = b; w < e; ++w) CHECK(words[w] == kMaskWord);
    }
  }
  const auto ex = masked.examples(masked.train);
  CHECK(std::count(ex[0].src.begin(), ex[0].src.end(), kMask) > 0);
  c.set("mask_p", "1.5");
  CHECK_THROWS_AS(load_dataset(c), ConfigError);
}

TEST_CASE("joint loss at initialisation has the uniform-model value") {
  prepare();
  Config c = small_config("init_value");
  c.set("zero_init_output", "1");
  const Dataset ds = load_dataset(c);
  const std::size_t vocab = ds.tokenizer.vocab().size();
  const Hallucinator h = make_hallucinator(c, vocab);
  const Translator t = make_translator(c, vocab);
  const Tensor codebook = load_vq(c).codebook.detach();
  const auto all = ds.examples(ds.train);
  const std::vector<Example> batch(all.begin(), all.begin() + 5);
  Rng rng(1);
  std::vector<Tensor> noise;
  for (std::size_t i = 0; i < batch.size(); ++i) noise.push_back(gumbel_noise({16, 64}, rng));
  const JointWeights w{0.5, 0.5};
  const JointLoss l = joint_loss(h, t, codebook, batch, w, 5.0, noise, Dropout{&rng, 0.1});

  const double span = static_cast<double>(vocab + 64);
  double joint_uniform = 0.0;
  for (const auto& ex : batch) joint_uniform += static_cast<double>(ex.src.size() - 1 + 16) * std::log(span);
  joint_uniform /= static_cast<double>(batch.size());
  const double expected = 2.0 * std::log(static_cast<double>(vocab)) + w.gamma_h * joint_uniform;
  CHECK(l.trans_gold.item() == doctest::Approx(std::log(static_cast<double>(vocab))).epsilon(1e-12));
  CHECK(l.trans_hall.item() == doctest::Approx(std::log(static_cast<double>(vocab))).epsilon(1e-12));
  CHECK(l.halluc.item() == doctest::Approx(joint_uniform).epsilon(1e-12));
  CHECK(l.consistency.item() == 0.0);
  CHECK(l.total.item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("stage dependencies are checked") {
  prepare();
  Config c = small_config("deps");
  CHECK_THROWS_AS(train_joint_stage(c), ConfigError);
  c.set("vae_dir", (root() / "no_vae").string());
  CHECK_THROWS_AS(train_halluc_stage(c), ConfigError);
  Config d = small_config("deps");
  d.set("data_dir", (root() / "no_data").string());
  CHECK_THROWS_AS(train_vae_stage(d), ConfigError);
}

TEST_CASE("joint stage logs an exact loss decomposition and is deterministic") {
  prepare();
  std::vector<std::vector<StepRecord>> runs;
  for (const char* name : {"joint_a", "joint_b"}) {
    Config c = small_config(name);
    train_halluc_stage(c);
    const StageResult r = train_joint_stage(c);
    REQUIRE(r.records.size() == 6);
    for (const auto& rec : r.records) {
      const double recomputed = (rec.trans_gold + rec.trans_hall) + (0.5 * rec.halluc + 0.5 * rec.consistency);
      CHECK(rec.total == recomputed);
      CHECK(rec.consistency >= 0.0);
    }
    CHECK(r.records[0].tau == 5.0);
    CHECK(r.records[1].tau < 5.0);
    CHECK(fs::exists(r.last_checkpoint));
    runs.push_back(r.records);
  }
  for (std::size_t i = 0; i < runs[0].size(); ++i) CHECK(runs[0][i].total == runs[1][i].total);
  CHECK(slurp(root() / "joint_a" / "joint" / "loss.csv") == slurp(root() / "joint_b" / "joint" / "loss.csv"));
}

TEST_CASE("zero loss weights leave the two translation terms") {
  prepare();
  Config c = small_config("joint_zero");
  c.set("gamma_h", "0");
  c.set("lambda_c", "0");
  train_halluc_stage(c);
  const StageResult r = train_joint_stage(c);
  for (const auto& rec : r.records) CHECK(rec.total == rec.trans_gold + rec.trans_hall);
}

TEST_CASE("resuming reproduces an uninterrupted run") {
  prepare();
  Config full = small_config("resume_full");
  full.set("steps", "8");
  train_textonly_stage(full);

  Config part = small_config("resume_part");
  part.set("steps", "4");
  train_textonly_stage(part);
  part.set("steps", "8");
  const StageResult rest = train_textonly_stage(part);
  CHECK(rest.records.size() == 4);
  CHECK(rest.records.front().step == 5);
  CHECK(slurp(root() / "resume_full" / "textonly" / "loss.csv") ==
        slurp(root() / "resume_part" / "textonly" / "loss.csv"));
  CHECK(slurp(root() / "resume_full" / "textonly" / "step_00000008.ckpt") ==
        slurp(root() / "resume_part" / "textonly" / "step_00000008.ckpt"));

  part.set("steps", "9");
  part.set("dropout", "0.2");
  CHECK_THROWS_AS(train_textonly_stage(part), ConfigError);
  StageOptions force;
  force.force = true;
  CHECK(train_textonly_stage(part, force).records.size() == 1);
}

TEST_CASE("translation modes and reports") {
  prepare();
  Config c = small_config("translate");
  train_halluc_stage(c);
  train_joint_stage(c);
  const Dataset ds = load_dataset(c);
  const fs::path ckpt = latest_checkpoint(c, "joint");
  const LoadedModels m = load_models(c, ds.tokenizer, ckpt, VisualMode::kHallucinated);
  const std::vector<std::string> src(ds.test.source.begin(), ds.test.source.begin() + 4);
  const std::vector<std::vector<int>> gold(ds.test.codes.begin(), ds.test.codes.begin() + 4);

  const auto h = translate_all(m, ds.tokenizer, src, VisualMode::kHallucinated, beam_config(c));
  const auto g = translate_all(m, ds.tokenizer, src, VisualMode::kGold, beam_config(c), &gold);
  REQUIRE(h.size() == 4);
  CHECK(h[0].visual.size() == 16);
  CHECK(g[0].visual == gold[0]);
  CHECK_THROWS_AS(translate_all(m, ds.tokenizer, src, VisualMode::kGold, beam_config(c)), ConfigError);
  CHECK(token_agreement(gold, gold) == 1.0);

  // Feeding the hallucinated tokens as gold gives the hallucinated output.
  std::vector<std::vector<int>> as_gold;
  for (const auto& t : h) as_gold.push_back(t.visual);
  const auto again = translate_all(m, ds.tokenizer, src, VisualMode::kGold, beam_config(c), &as_gold);
  for (std::size_t i = 0; i < h.size(); ++i) CHECK(again[i].tokens == h[i].tokens);

  const BleuReport perfect = score_corpus(ds.test.target, ds.test.target);
  CHECK(perfect.bleu == 100.0);
  write_bleu_report(root() / "rep1", perfect, {"x"});
  write_bleu_report(root() / "rep2", perfect, {"x"});
  CHECK(slurp(root() / "rep1" / "bleu.csv") == slurp(root() / "rep2" / "bleu.csv"));
  CHECK(slurp(root() / "rep1" / "summary.txt") == slurp(root() / "rep2" / "summary.txt"));

  CHECK_THROWS_AS(load_models(c, ds.tokenizer, latest_checkpoint(c, "halluc"), VisualMode::kHallucinated),
                  ConfigError);
}

TEST_CASE("masking suite bookkeeping") {
  prepare();
  Config c = small_config("suite");
  train_halluc_stage(c);
  train_joint_stage(c);
  train_textonly_stage(c);
  c.set("mask_k_list", "2,100");
  c.set("mask_p_list", "0,0.5");
  c.set("mask_seeds", "0,1");
  MaskSuiteOptions opt{latest_checkpoint(c, "textonly"), latest_checkpoint(c, "joint"), "test", 5};
  const auto rows = run_masking_suite(c, opt);
  CHECK(rows.size() == (2 + 2) * 2 * 2);

  const Dataset ds = load_dataset(c);
  const std::vector<std::string> src(ds.test.raw_source.begin(), ds.test.raw_source.begin() + 5);
  const std::vector<std::string> ref(ds.test.target.begin(), ds.test.target.begin() + 5);
  const auto text = load_models(c, ds.tokenizer, opt.textonly_ckpt, VisualMode::kNone);
  std::vector<std::string> hyps;
  for (const auto& t : translate_all(text, ds.tokenizer, src, VisualMode::kNone, beam_config(c))) hyps.push_back(t.text);
  const double unmasked = score_corpus(hyps, ref).bleu;
  for (const auto& r : rows) {
    if (r.model != "textonly") {
      CHECK(r.agreement >= 0.0);
      continue;
    }
    if ((r.sweep == "k" && r.value == 100) || (r.sweep == "p" && r.value == 0)) CHECK(r.bleu == unmasked);
  }
  write_mask_report(root() / "suite_a", rows, {"h"});
  write_mask_report(root() / "suite_b", run_masking_suite(c, opt), {"h"});
  for (const char* f : {"rows.csv", "deltas.csv", "summary.txt"}) {
    CHECK(slurp(root() / "suite_a" / f) == slurp(root() / "suite_b" / f));
  }
}

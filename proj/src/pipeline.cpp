#include "hmt/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "hmt/error.hpp"
#include "hmt/optim.hpp"
#include "hmt/rng.hpp"

namespace hmt {

namespace fs = std::filesystem;

namespace {

std::uint64_t sub_seed(const Config& cfg, std::string_view name) {
  return Rng::stream(static_cast<std::uint64_t>(cfg.integer("seed")), name).next_u64();
}

std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string hex_digest(std::uint64_t d) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
  return buf;
}

std::vector<std::string> mask_split(const SplitFiles& files, double p, Rng& rng) {
  std::vector<std::string> out;
  out.reserve(files.source.size());
  if (p > 0.0 && files.spans.size() != files.source.size()) {
    throw ConfigError("entity masking needs span annotations for every sentence");
  }
  for (std::size_t i = 0; i < files.source.size(); ++i) {
    if (p <= 0.0) {
      out.push_back(files.source[i]);
    } else {
      out.push_back(join_words(mask_entities(split_words(files.source[i]), files.spans[i], p, rng)));
    }
  }
  return out;
}

// ---- optimizer and RNG state in checkpoints ----

void add_train_state(Checkpoint& c, const AdamState& adam, const Rng& rng) {
  c.tensors.push_back({std::string(kOptimizerPrefix) + "step", {1}, {static_cast<double>(adam.step)}});
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    char idx[16];
    std::snprintf(idx, sizeof idx, "%04zu", i);
    c.tensors.push_back({std::string(kOptimizerPrefix) + "m." + idx, {adam.m[i].size()}, adam.m[i]});
    c.tensors.push_back({std::string(kOptimizerPrefix) + "u." + idx, {adam.u[i].size()}, adam.u[i]});
  }
  c.rng_state = rng.state();
}

void load_train_state(const Checkpoint& c, const std::vector<Tensor>& trainable, AdamState& adam, Rng& rng) {
  const CheckpointTensor* step = c.find(std::string(kOptimizerPrefix) + "step");
  if (step == nullptr) throw ConfigError("checkpoint holds no optimizer state");
  adam = AdamState{};
  adam.step = static_cast<std::int64_t>(step->values.at(0));
  if (adam.step > 0) {
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      char idx[16];
      std::snprintf(idx, sizeof idx, "%04zu", i);
      const CheckpointTensor* m = c.find(std::string(kOptimizerPrefix) + "m." + idx);
      const CheckpointTensor* u = c.find(std::string(kOptimizerPrefix) + "u." + idx);
      if (m == nullptr || u == nullptr || m->values.size() != trainable[i].numel()) {
        throw ConfigError("checkpoint optimizer state does not match the model");
      }
      adam.m.push_back(m->values);
      adam.u.push_back(u->values);
    }
  }
  rng.set_state(c.rng_state);
}

using ParamGroups = std::vector<std::pair<std::string, ParamList>>;

// Length-bucketed batches over repeated epochs, each epoch reshuffled.
class BatchStream {
 public:
  BatchStream(const std::vector<Example>& examples, std::size_t budget, std::uint64_t seed)
      : examples_(examples), budget_(budget), seed_(seed) {
    for (std::size_t i = 0; i < examples.size(); ++i) {
      samples_.push_back({i, examples[i].src, examples[i].tgt, static_cast<int>(i)});
    }
  }

  std::vector<Example> next() {
    if (pos_ == plan_.batches.size()) {
      plan_ = batch_iterator(samples_, budget_, Rng::stream(seed_, "epoch-" + std::to_string(epoch_++)).next_u64());
      if (plan_.batches.empty()) throw ConfigError("token_budget admits no training sentence");
      pos_ = 0;
    }
    std::vector<Example> out;
    for (std::size_t id : plan_.batches[pos_].sample_ids) out.push_back(examples_[id]);
    ++pos_;
    return out;
  }

  void skip(std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) {
      if (pos_ == plan_.batches.size()) next();
      else ++pos_;
    }
  }

 private:
  const std::vector<Example>& examples_;
  std::size_t budget_;
  std::uint64_t seed_;
  std::vector<EncodedSample> samples_;
  BatchPlan plan_;
  std::size_t pos_ = 0;
  std::size_t epoch_ = 0;
};

struct StepOutput {
  Tensor total;
  StepRecord record;
};

using StepFn = std::function<StepOutput(std::span<const Example>, std::int64_t step, Rng& rng)>;

StageResult run_stage(const Config& cfg, const std::string& stage, const ParamGroups& groups,
                      const std::vector<Example>& data, std::size_t steps, const StageOptions& opt,
                      const StepFn& step_fn, const std::function<void()>& on_fresh = {}) {
  const fs::path dir = stage_dir(cfg, stage);
  std::vector<Tensor> trainable;
  for (const auto& [prefix, params] : groups) {
    for (const auto& p : params) trainable.push_back(p.value);
  }
  AdamState adam;
  Rng rng = Rng::stream(static_cast<std::uint64_t>(cfg.integer("seed")), stage + "-train");
  std::int64_t step = 0;

  const auto existing = list_checkpoints(dir);
  if (!existing.empty()) {
    const Checkpoint c = load_checkpoint(existing.back());
    if (c.digest != cfg.digest()) {
      if (!opt.force) {
        throw ConfigError(existing.back().string() + " was written with recipe digest " + hex_digest(c.digest) +
                          " but the current configuration has " + hex_digest(cfg.digest()) +
                          "; pass --force to resume anyway");
      }
      spdlog::warn("{}: resuming across a recipe digest change", stage);
    }
    for (const auto& [prefix, params] : groups) c.load_params(prefix, params);
    load_train_state(c, trainable, adam, rng);
    step = c.step;
    spdlog::info("{}: resuming from step {}", stage, step);
  } else if (on_fresh) {
    on_fresh();
  }

  StageResult result;
  if (!existing.empty()) result.last_checkpoint = existing.back();
  fs::create_directories(dir);
  const fs::path csv = dir / "loss.csv";
  std::ofstream log(csv, existing.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw ConfigError("cannot write " + csv.string());
  if (existing.empty()) log << "step,lr,tau,total,trans_gold,trans_hall,halluc,consistency\n";

  BatchStream batches(data, cfg.count("token_budget"), sub_seed(cfg, stage + "-batches"));
  batches.skip(step);
  const LrSchedule sched = lr_schedule(cfg);
  const std::size_t interval = std::max<std::size_t>(cfg.count("ckpt_interval"), 1);
  const std::size_t log_every = std::max<std::size_t>(cfg.count("log_every"), 1);
  std::vector<double> recent;
  while (step < static_cast<std::int64_t>(steps)) {
    ++step;
    const std::vector<Example> batch = batches.next();
    Tape tape;
    StepOutput out;
    {
      TapeScope scope(tape);
      out = step_fn(batch, step, rng);
    }
    const double value = out.total.item();
    recent.push_back(value);
    if (recent.size() > 5) recent.erase(recent.begin());
    if (!std::isfinite(value)) {
      std::string trace;
      for (double r : recent) trace += " " + fmt_real(r);
      throw NumericError(stage + ": non-finite loss at step " + std::to_string(step) + "; recent losses:" + trace);
    }
    const GradientMap grads = backward(out.total, tape);
    const double lr = lr_at(step, sched);
    adam_step(trainable, grads, adam, lr);

    StepRecord& r = out.record;
    r.step = step;
    r.lr = lr;
    r.total = value;
    log << r.step << ',' << fmt_real(r.lr) << ',' << fmt_real(r.tau) << ',' << fmt_real(r.total) << ','
        << fmt_real(r.trans_gold) << ',' << fmt_real(r.trans_hall) << ',' << fmt_real(r.halluc) << ','
        << fmt_real(r.consistency) << '\n';
    result.records.push_back(r);
    if (opt.on_step) opt.on_step(r);
    if (step % static_cast<std::int64_t>(log_every) == 0) {
      spdlog::info("{} step {}: loss {:.4f} lr {:.2e}", stage, step, value, lr);
    }
    if (step % static_cast<std::int64_t>(interval) == 0 || step == static_cast<std::int64_t>(steps)) {
      Checkpoint c;
      c.digest = cfg.digest();
      c.step = step;
      for (const auto& [prefix, params] : groups) c.add_params(prefix, params);
      add_train_state(c, adam, rng);
      result.last_checkpoint = checkpoint_path(dir, step);
      save_checkpoint(result.last_checkpoint, c);
      log.flush();
    }
  }
  return result;
}

std::vector<Example> training_examples(const Dataset& ds, bool need_codes) {
  if (need_codes && ds.train.codes.empty()) {
    throw ConfigError("no visual token cache found; run train-vae first");
  }
  return ds.examples(ds.train);
}

}  // namespace

// ---- data ----

const SplitData& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "' (expected train, valid or test)");
}

std::vector<Example> Dataset::examples(const SplitData& s) const {
  std::vector<Example> out;
  out.reserve(s.source.size());
  for (std::size_t i = 0; i < s.source.size(); ++i) {
    out.push_back({tokenizer.encode(s.source[i]), tokenizer.encode(s.target[i]),
                   s.codes.empty() ? std::vector<int>{} : s.codes[i]});
  }
  return out;
}

Tokenizer build_tokenizer(const SplitFiles& train, std::size_t merges) {
  std::vector<std::string> corpus = train.source;
  corpus.insert(corpus.end(), train.target.begin(), train.target.end());
  BpeMerges rules = learn_bpe(corpus, merges);
  Vocabulary vocab = Vocabulary::build(corpus, rules);
  return Tokenizer(std::move(rules), std::move(vocab));
}

fs::path vae_dir(const Config& cfg) {
  const std::string& d = cfg.get("vae_dir");
  return d.empty() ? fs::path(cfg.get("work_dir")) / "vae" : fs::path(d);
}

fs::path stage_dir(const Config& cfg, const std::string& stage) { return fs::path(cfg.get("work_dir")) / stage; }

fs::path token_cache_path(const Config& cfg, const std::string& split) {
  return vae_dir(cfg) / "tokens" / (split + ".tok");
}

Dataset load_dataset(const Config& cfg) {
  const fs::path dir = cfg.get("data_dir");
  if (!fs::exists(dir / "train.src")) throw ConfigError("no corpus in " + dir.string() + "; run gen-data first");
  const double p = cfg.real("mask_p");
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("mask_p must lie in [0, 1]");
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  const VqConfig vq = vq_config(cfg);

  std::map<std::string, SplitFiles> files;
  for (const char* name : {"train", "valid", "test"}) files[name] = load_split(dir, name, false);
  Dataset ds{build_tokenizer(files["train"], cfg.count("bpe_merges")), {}, {}, {}};
  for (const char* name : {"train", "valid", "test"}) {
    SplitFiles& f = files[name];
    SplitData& s = std::string(name) == "train" ? ds.train : std::string(name) == "valid" ? ds.valid : ds.test;
    Rng rng = Rng::stream(seed, std::string("mask-") + name);
    s.source = mask_split(f, p, rng);
    s.raw_source = std::move(f.source);
    s.target = std::move(f.target);
    s.spans = std::move(f.spans);
    const fs::path cache = token_cache_path(cfg, name);
    if (fs::exists(cache)) {
      TokenCache tc = read_token_cache(cache);
      if (tc.num_tokens != vq.num_tokens() || tc.codebook_size != vq.codebook_size) {
        throw ConfigError(cache.string() + " holds " + std::to_string(tc.num_tokens) + " tokens over " +
                          std::to_string(tc.codebook_size) + " codes; configuration expects " +
                          std::to_string(vq.num_tokens()) + " over " + std::to_string(vq.codebook_size));
      }
      if (tc.rows.size() != s.target.size()) {
        throw ConfigError(cache.string() + " does not match the " + name + " split of " + dir.string());
      }
      s.codes = std::move(tc.rows);
    }
  }
  return ds;
}

// ---- models ----

Hallucinator make_hallucinator(const Config& cfg, std::size_t vocab) {
  const VqConfig vq = vq_config(cfg);
  return Hallucinator::init(model_config(cfg), vocab, vq.codebook_size, vq.grid_side(), sub_seed(cfg, "init-halluc"));
}

Translator make_translator(const Config& cfg, std::size_t vocab) {
  const VqConfig vq = vq_config(cfg);
  return Translator::init(model_config(cfg), vocab, vq.code_dim, vq.grid_side(), sub_seed(cfg, "init-translator"));
}

VqModel load_vq(const Config& cfg) {
  const fs::path path = vae_dir(cfg) / "vae.ckpt";
  if (!fs::exists(path)) throw ConfigError("no visual encoder at " + path.string() + "; run train-vae first");
  VqModel m = VqModel::init(vq_config(cfg), 0);
  load_checkpoint(path).load_params("vq", m.params());
  return m;
}

fs::path latest_checkpoint(const Config& cfg, const std::string& stage) {
  const auto all = list_checkpoints(stage_dir(cfg, stage));
  if (all.empty()) throw ConfigError("no " + stage + " checkpoint in " + stage_dir(cfg, stage).string());
  return all.back();
}

// ---- stages ----

StageResult train_vae_stage(const Config& cfg, const StageOptions& opt) {
  const fs::path data = cfg.get("data_dir");
  if (!fs::exists(data / "train.src")) throw ConfigError("no corpus in " + data.string() + "; run gen-data first");
  const SplitFiles train = load_split(data, "train", true);
  VqModel m = VqModel::init(vq_config(cfg), sub_seed(cfg, "init-vq"));
  VaeTrainConfig tc = vae_train_config(cfg);
  tc.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  StageResult result;
  const VaeTrainResult tr = train_vae(m, train.images, tc, [&](const VaeLogEntry& e) {
    spdlog::info("vae step {}: loss {:.5f} recon {:.5f} codebook usage {:.1f}%", e.step, e.loss, e.recon,
                 100.0 * e.usage);
  });
  for (std::size_t i = 0; i < tr.loss_trace.size(); ++i) {
    StepRecord r;
    r.step = static_cast<std::int64_t>(i + 1);
    r.lr = lr_at(r.step, {tc.lr, tc.warmup});
    r.total = tr.loss_trace[i];
    result.records.push_back(r);
    if (opt.on_step) opt.on_step(r);
  }

  const fs::path dir = vae_dir(cfg);
  Checkpoint c;
  c.digest = cfg.digest();
  c.step = static_cast<std::int64_t>(tc.steps);
  c.add_params("vq", m.params());
  result.last_checkpoint = dir / "vae.ckpt";
  save_checkpoint(result.last_checkpoint, c);
  {
    std::ofstream log(dir / "loss.csv", std::ios::trunc);
    log << "step,total\n";
    for (std::size_t i = 0; i < tr.loss_trace.size(); ++i) log << i + 1 << ',' << fmt_real(tr.loss_trace[i]) << '\n';
  }

  fs::create_directories(token_cache_path(cfg, "train").parent_path());
  for (const char* name : {"train", "valid", "test"}) {
    const SplitFiles split = std::string(name) == "train" ? train : load_split(data, name, true);
    write_token_cache(token_cache_path(cfg, name), m.cfg.num_tokens(), m.cfg.codebook_size,
                      encode_tokens(m, split.images));
    if (std::string(name) == "valid") result.heldout_mse = reconstruction_mse(m, split.images);
  }
  spdlog::info("vae: held-out reconstruction MSE {:.5f}", result.heldout_mse);
  return result;
}

StageResult train_halluc_stage(const Config& cfg, const StageOptions& opt) {
  const Dataset ds = load_dataset(cfg);
  const std::vector<Example> data = training_examples(ds, true);
  Hallucinator h = make_hallucinator(cfg, ds.tokenizer.vocab().size());
  const double p = cfg.real("dropout");
  return run_stage(cfg, "halluc", {{"halluc", h.params()}}, data, cfg.count("halluc_steps"), opt,
                   [&](std::span<const Example> batch, std::int64_t, Rng& rng) {
                     StepOutput out;
                     out.total = halluc_loss(h, batch, Dropout{&rng, p});
                     out.record.halluc = out.total.item();
                     return out;
                   });
}

StageResult train_joint_stage(const Config& cfg, const StageOptions& opt) {
  const Dataset ds = load_dataset(cfg);
  const std::vector<Example> data = training_examples(ds, true);
  const VqModel vq = load_vq(cfg);
  const Tensor codebook = vq.codebook.detach();
  Hallucinator h = make_hallucinator(cfg, ds.tokenizer.vocab().size());
  Translator t = make_translator(cfg, ds.tokenizer.vocab().size());
  const fs::path halluc_dir = stage_dir(cfg, "halluc");
  if (list_checkpoints(halluc_dir).empty() && list_checkpoints(stage_dir(cfg, "joint")).empty()) {
    throw ConfigError("no hallucinator checkpoint in " + halluc_dir.string() + "; run train-halluc first");
  }
  const JointWeights w{cfg.real("gamma_h"), cfg.real("lambda_c")};
  if (!(w.gamma_h >= 0.0) || !(w.lambda_c >= 0.0)) throw ConfigError("gamma_h and lambda_c must be non-negative");
  const GumbelConfig gumbel = gumbel_config(cfg);
  const double p = cfg.real("dropout");
  const std::size_t v = h.num_visual(), k = h.codebook_size();
  return run_stage(
      cfg, "joint", {{"halluc", h.params()}, {"trans", t.params()}}, data, cfg.count("steps"), opt,
      [&](std::span<const Example> batch, std::int64_t step, Rng& rng) {
        const double tau = anneal_tau(step - 1, gumbel);
        std::vector<Tensor> noise;
        for (std::size_t i = 0; i < batch.size(); ++i) noise.push_back(gumbel_noise({v, k}, rng));
        JointLoss l = joint_loss(h, t, codebook, batch, w, tau, noise, Dropout{&rng, p});
        StepOutput out;
        out.total = l.total;
        out.record.tau = tau;
        out.record.trans_gold = l.trans_gold.item();
        out.record.trans_hall = l.trans_hall.item();
        out.record.halluc = l.halluc.item();
        out.record.consistency = l.consistency.item();
        return out;
      },
      [&] {
        const fs::path src = latest_checkpoint(cfg, "halluc");
        load_checkpoint(src).load_params("halluc", h.params());
        spdlog::info("joint: hallucinator initialised from {}", src.string());
      });
}

StageResult train_textonly_stage(const Config& cfg, const StageOptions& opt) {
  const Dataset ds = load_dataset(cfg);
  const std::vector<Example> data = training_examples(ds, false);
  Translator t = make_translator(cfg, ds.tokenizer.vocab().size());
  const double p = cfg.real("dropout");
  return run_stage(cfg, "textonly", {{"trans", t.text_params()}}, data, cfg.count("steps"), opt,
                   [&](std::span<const Example> batch, std::int64_t, Rng& rng) {
                     StepOutput out;
                     out.total = text_only_loss(t, batch, Dropout{&rng, p});
                     return out;
                   });
}

// ---- inference ----

VisualMode parse_mode(const std::string& name) {
  if (name == "text") return VisualMode::kNone;
  if (name == "halluc") return VisualMode::kHallucinated;
  if (name == "gold") return VisualMode::kGold;
  throw ConfigError("unknown mode '" + name + "' (expected text, halluc or gold)");
}

std::string mode_name(VisualMode mode) {
  switch (mode) {
    case VisualMode::kNone: return "text";
    case VisualMode::kHallucinated: return "halluc";
    case VisualMode::kGold: return "gold";
  }
  return "?";
}

BeamConfig beam_config(const Config& cfg) {
  BeamConfig b{cfg.count("beam"), cfg.real("alpha"), cfg.count("max_len")};
  validate(b);
  return b;
}

LoadedModels load_models(const Config& cfg, const Tokenizer& tok, const fs::path& ckpt, VisualMode mode) {
  const Checkpoint c = load_checkpoint(ckpt);
  LoadedModels m{make_translator(cfg, tok.vocab().size()), std::nullopt, Tensor{}};
  c.load_params("trans", mode == VisualMode::kNone ? m.translator.text_params() : m.translator.params());
  if (c.has_prefix("halluc")) {
    m.hallucinator = make_hallucinator(cfg, tok.vocab().size());
    c.load_params("halluc", m.hallucinator->params());
  }
  if (mode != VisualMode::kNone) {
    if (mode == VisualMode::kHallucinated && !m.hallucinator) {
      throw ConfigError(ckpt.string() + " holds no hallucinator; hallucinated mode needs a joint checkpoint");
    }
    m.codebook = load_vq(cfg).codebook.detach();
  }
  return m;
}

Translation translate_one(const LoadedModels& m, const Tokenizer& tok, const std::string& source, VisualMode mode,
                          const BeamConfig& beam, const std::vector<int>* gold_codes) {
  NoTapeScope no_tape;
  const std::vector<int> x = tok.encode(source);
  Translation out;
  Tensor visual;
  if (mode == VisualMode::kHallucinated) {
    HMT_CHECK(m.hallucinator.has_value(), "translate: hallucinated mode without a hallucinator");
    out.visual = decode_hallucination(*m.hallucinator, x);
  } else if (mode == VisualMode::kGold) {
    if (gold_codes == nullptr) throw ConfigError("gold visual mode needs visual tokens for every sentence");
    out.visual = *gold_codes;
  }
  if (mode != VisualMode::kNone) visual = m.translator.visual_rows(embed_tokens(out.visual, m.codebook));
  const Tensor memory = m.translator.encode(x, visual, {});
  const std::size_t vocab = m.translator.vocab();
  const StepScorer scorer = [&](const std::vector<std::vector<int>>& prefixes) {
    std::vector<std::vector<double>> rows;
    for (const auto& prefix : prefixes) {
      const Tensor lp = m.translator.decode(memory, prefix, {});
      const auto d = lp.data();
      rows.emplace_back(d.end() - static_cast<std::ptrdiff_t>(vocab), d.end());
    }
    return rows;
  };
  const Hypothesis hyp = beam_search(scorer, kBos, kEos, beam, {kPad, kBos});
  out.tokens = hyp.tokens;
  out.score = hyp.score;
  out.truncated = hyp.truncated;
  out.text = tok.decode(hyp.tokens);
  return out;
}

std::vector<Translation> translate_all(const LoadedModels& m, const Tokenizer& tok,
                                       const std::vector<std::string>& sources, VisualMode mode,
                                       const BeamConfig& beam, const std::vector<std::vector<int>>* gold_codes) {
  if (mode == VisualMode::kGold && (gold_codes == nullptr || gold_codes->size() != sources.size())) {
    throw ConfigError("gold visual mode needs visual tokens for every sentence; run train-vae first");
  }
  std::vector<Translation> out;
  out.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    out.push_back(translate_one(m, tok, sources[i], mode, beam, gold_codes ? &(*gold_codes)[i] : nullptr));
  }
  return out;
}

// ---- reports ----

BleuReport score_corpus(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  std::vector<Words> h, r;
  for (const auto& s : hyps) h.push_back(split_words(s));
  for (const auto& s : refs) r.push_back(split_words(s));
  BleuReport rep;
  rep.bleu = corpus_bleu(h, r);
  rep.sentences = refs.size();
  rep.buckets = bucket_bleu(h, r);
  return rep;
}

void write_bleu_report(const fs::path& dir, const BleuReport& report, const std::vector<std::string>& header) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "bleu.csv", std::ios::trunc);
  csv << "bucket,min_len,max_len,sentences,bleu\n";
  csv << "corpus,,," << report.sentences << ',' << fmt_fixed(report.bleu) << '\n';
  for (const auto& b : report.buckets) {
    csv << b.min_len << '-' << b.max_len << ',' << b.min_len << ',' << b.max_len << ',' << b.sentences << ','
        << fmt_fixed(b.bleu) << '\n';
  }
  std::ofstream sum(dir / "summary.txt", std::ios::trunc);
  for (const auto& h : header) sum << h << '\n';
  sum << "sentences " << report.sentences << '\n' << "BLEU " << fmt_fixed(report.bleu, 2) << '\n';
  for (const auto& b : report.buckets) {
    sum << "  reference length " << b.min_len << '-' << b.max_len << ": " << b.sentences << " sentences, BLEU "
        << fmt_fixed(b.bleu, 2) << '\n';
  }
  if (!csv || !sum) throw ConfigError("failed writing report to " + dir.string());
}

double token_agreement(const std::vector<std::vector<int>>& a, const std::vector<std::vector<int>>& b) {
  HMT_CHECK(a.size() == b.size(), "token_agreement: row count mismatch");
  std::size_t same = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    HMT_CHECK(a[i].size() == b[i].size(), "token_agreement: row length mismatch");
    for (std::size_t j = 0; j < a[i].size(); ++j) same += a[i][j] == b[i][j];
    total += a[i].size();
  }
  return total == 0 ? 0.0 : static_cast<double>(same) / static_cast<double>(total);
}

std::vector<MaskRow> run_masking_suite(const Config& cfg, const MaskSuiteOptions& opt) {
  const Dataset ds = load_dataset(cfg);
  const SplitData& split = ds.split(opt.split);
  const std::size_t n = opt.limit == 0 ? split.raw_source.size() : std::min(opt.limit, split.raw_source.size());
  const std::vector<double> ps = cfg.reals("mask_p_list");
  if (!ps.empty() && split.spans.size() != split.raw_source.size()) {
    throw ConfigError("the p sweep needs entity span annotations for the " + opt.split + " split");
  }
  if (split.codes.empty()) throw ConfigError("no visual token cache for the " + opt.split + " split");
  const std::vector<std::string> refs(split.target.begin(), split.target.begin() + static_cast<std::ptrdiff_t>(n));
  const std::vector<std::vector<int>> gold(split.codes.begin(), split.codes.begin() + static_cast<std::ptrdiff_t>(n));
  const BeamConfig beam = beam_config(cfg);
  const LoadedModels text = load_models(cfg, ds.tokenizer, opt.textonly_ckpt, VisualMode::kNone);
  const LoadedModels joint = load_models(cfg, ds.tokenizer, opt.joint_ckpt, VisualMode::kHallucinated);

  std::vector<MaskRow> rows;
  auto evaluate_point = [&](std::int64_t seed, const std::string& sweep, double value,
                            const std::vector<std::string>& sources) {
    for (const bool halluc : {false, true}) {
      const auto out = translate_all(halluc ? joint : text, ds.tokenizer, sources,
                                     halluc ? VisualMode::kHallucinated : VisualMode::kNone, beam);
      std::vector<std::string> hyps;
      std::vector<std::vector<int>> visual;
      for (const auto& t : out) {
        hyps.push_back(t.text);
        visual.push_back(t.visual);
      }
      MaskRow r{halluc ? "halluc" : "textonly", seed, sweep, value, n, score_corpus(hyps, refs).bleu, -1.0};
      if (halluc) r.agreement = token_agreement(visual, gold);
      spdlog::info("mask-suite seed {} {}={}: {} BLEU {:.2f}", seed, sweep, value, r.model, r.bleu);
      rows.push_back(r);
    }
  };
  for (const std::int64_t seed : cfg.integers("mask_seeds")) {
    for (const std::int64_t k : cfg.integers("mask_k_list")) {
      if (k < 0) throw ConfigError("mask_k_list entries must be non-negative");
      std::vector<std::string> sources;
      for (std::size_t i = 0; i < n; ++i) {
        sources.push_back(join_words(mask_progressive(split_words(split.raw_source[i]), static_cast<std::size_t>(k))));
      }
      evaluate_point(seed, "k", static_cast<double>(k), sources);
    }
    for (const double p : ps) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("mask_p_list entries must lie in [0, 1]");
      Rng rng = Rng::stream(static_cast<std::uint64_t>(seed), "mask-suite-p" + fmt_real(p));
      std::vector<std::string> sources;
      for (std::size_t i = 0; i < n; ++i) {
        sources.push_back(join_words(mask_entities(split_words(split.raw_source[i]), split.spans[i], p, rng)));
      }
      evaluate_point(seed, "p", p, sources);
    }
  }
  return rows;
}

void write_mask_report(const fs::path& dir, const std::vector<MaskRow>& rows, const std::vector<std::string>& header) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "rows.csv", std::ios::trunc);
  csv << "model,seed,sweep,value,sentences,bleu,agreement\n";
  for (const auto& r : rows) {
    csv << r.model << ',' << r.seed << ',' << r.sweep << ',' << fmt_real(r.value) << ',' << r.sentences << ','
        << fmt_fixed(r.bleu) << ',' << (r.agreement < 0.0 ? "" : fmt_fixed(r.agreement)) << '\n';
  }
  // Paired rows: (seed, sweep, value) -> text-only and hallucinated BLEU.
  struct Pair {
    double text = 0.0, halluc = 0.0;
  };
  std::map<std::tuple<std::string, double, std::int64_t>, Pair> pairs;
  for (const auto& r : rows) {
    Pair& p = pairs[{r.sweep, r.value, r.seed}];
    (r.model == "halluc" ? p.halluc : p.text) = r.bleu;
  }
  std::ofstream deltas(dir / "deltas.csv", std::ios::trunc);
  deltas << "sweep,value,seed,bleu_textonly,bleu_halluc,delta\n";
  std::map<std::pair<std::string, double>, std::vector<Pair>> by_point;
  for (const auto& [key, p] : pairs) {
    const auto& [sweep, value, seed] = key;
    deltas << sweep << ',' << fmt_real(value) << ',' << seed << ',' << fmt_fixed(p.text) << ','
           << fmt_fixed(p.halluc) << ',' << fmt_fixed(p.halluc - p.text) << '\n';
    by_point[{sweep, value}].push_back(p);
  }
  std::ofstream sum(dir / "summary.txt", std::ios::trunc);
  for (const auto& h : header) sum << h << '\n';
  sum << "mean over seeds (unweighted)\n";
  for (const auto& [point, ps] : by_point) {
    double t = 0.0, h = 0.0;
    for (const auto& p : ps) {
      t += p.text;
      h += p.halluc;
    }
    t /= static_cast<double>(ps.size());
    h /= static_cast<double>(ps.size());
    sum << "  " << point.first << " = " << fmt_real(point.second) << ": text-only " << fmt_fixed(t, 2)
        << ", hallucinated " << fmt_fixed(h, 2) << ", delta " << fmt_fixed(h - t, 2) << '\n';
  }
  if (!csv || !deltas || !sum) throw ConfigError("failed writing report to " + dir.string());
}

}  // namespace hmt

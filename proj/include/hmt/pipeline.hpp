#pragma once

// Stage training, inference and reports on top of a run configuration.
//
// Layout under work_dir: <stage>/step_NNNNNNNN.ckpt and <stage>/loss.csv for
// the halluc, joint and textonly stages. The visual encoder lives in vae_dir
// (default <work_dir>/vae): vae.ckpt plus tokens/<split>.tok.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hmt/bleu.hpp"
#include "hmt/checkpoint.hpp"
#include "hmt/config.hpp"
#include "hmt/decode.hpp"
#include "hmt/hallucinator.hpp"
#include "hmt/joint.hpp"
#include "hmt/text.hpp"
#include "hmt/translator.hpp"
#include "hmt/vq.hpp"
#include "hmt/world.hpp"

namespace hmt {

// ---- data ----
struct SplitData {
  std::vector<std::string> raw_source;  // as generated
  std::vector<std::string> source;      // after entity masking with mask_p
  std::vector<std::string> target;
  std::vector<std::vector<EntitySpan>> spans;
  std::vector<std::vector<int>> codes;  // gold visual tokens; empty without a token cache
};

struct Dataset {
  Tokenizer tokenizer;
  SplitData train, valid, test;

  const SplitData& split(const std::string& name) const;
  std::vector<Example> examples(const SplitData& s) const;
};

// BPE learned on the unmasked training source and target text.
Tokenizer build_tokenizer(const SplitFiles& train, std::size_t merges);
// Reads data_dir and masks every split with mask_p; codes come from the
// token cache when it exists.
Dataset load_dataset(const Config& cfg);

std::filesystem::path vae_dir(const Config& cfg);
std::filesystem::path stage_dir(const Config& cfg, const std::string& stage);
std::filesystem::path token_cache_path(const Config& cfg, const std::string& split);

// ---- models ----
Hallucinator make_hallucinator(const Config& cfg, std::size_t vocab);
Translator make_translator(const Config& cfg, std::size_t vocab);
// The trained visual encoder; ConfigError when stage 1 has not run.
VqModel load_vq(const Config& cfg);

// Latest step checkpoint of a stage; ConfigError when there is none.
std::filesystem::path latest_checkpoint(const Config& cfg, const std::string& stage);

// ---- training ----
struct StepRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  double tau = 0.0;
  double total = 0.0;
  double trans_gold = 0.0;
  double trans_hall = 0.0;
  double halluc = 0.0;
  double consistency = 0.0;
};

struct StageOptions {
  bool force = false;  // resume even when the recipe digest differs
  std::function<void(const StepRecord&)> on_step;
};

struct StageResult {
  std::vector<StepRecord> records;  // steps run by this call
  std::filesystem::path last_checkpoint;
  double heldout_mse = 0.0;         // vae stage only
};

StageResult train_vae_stage(const Config& cfg, const StageOptions& opt = {});
StageResult train_halluc_stage(const Config& cfg, const StageOptions& opt = {});
StageResult train_joint_stage(const Config& cfg, const StageOptions& opt = {});
StageResult train_textonly_stage(const Config& cfg, const StageOptions& opt = {});

// ---- inference ----
enum class VisualMode { kNone, kHallucinated, kGold };

VisualMode parse_mode(const std::string& name);
std::string mode_name(VisualMode mode);

BeamConfig beam_config(const Config& cfg);

struct LoadedModels {
  Translator translator;
  std::optional<Hallucinator> hallucinator;
  Tensor codebook;
};

// Translator (and hallucinator when present) from a checkpoint; visual
// modes also load the codebook.
LoadedModels load_models(const Config& cfg, const Tokenizer& tok, const std::filesystem::path& ckpt,
                         VisualMode mode);

struct Translation {
  std::string text;
  std::vector<int> tokens;
  double score = 0.0;
  bool truncated = false;
  std::vector<int> visual;  // codes fed to the translator, empty in text mode
};

Translation translate_one(const LoadedModels& m, const Tokenizer& tok, const std::string& source,
                          VisualMode mode, const BeamConfig& beam, const std::vector<int>* gold_codes = nullptr);

std::vector<Translation> translate_all(const LoadedModels& m, const Tokenizer& tok,
                                       const std::vector<std::string>& sources, VisualMode mode,
                                       const BeamConfig& beam,
                                       const std::vector<std::vector<int>>* gold_codes = nullptr);

// ---- reports ----
struct BleuReport {
  double bleu = 0.0;
  std::size_t sentences = 0;
  std::vector<BucketBleu> buckets;
};

BleuReport score_corpus(const std::vector<std::string>& hyps, const std::vector<std::string>& refs);
// bleu.csv plus summary.txt; header lines are copied into the summary.
void write_bleu_report(const std::filesystem::path& dir, const BleuReport& report,
                       const std::vector<std::string>& header);

struct MaskRow {
  std::string model;  // "textonly" or "halluc"
  std::int64_t seed = 0;
  std::string sweep;  // "k" or "p"
  double value = 0.0;
  std::size_t sentences = 0;
  double bleu = 0.0;
  double agreement = -1.0;  // hallucinated vs gold visual tokens; -1 when not applicable
};

struct MaskSuiteOptions {
  std::filesystem::path textonly_ckpt;
  std::filesystem::path joint_ckpt;
  std::string split = "test";
  std::size_t limit = 0;  // first n sentences; 0 for all
};

// Masks the unmasked split sources for every sweep point and seed, decodes
// with both models and scores them.
std::vector<MaskRow> run_masking_suite(const Config& cfg, const MaskSuiteOptions& opt);
// rows.csv, deltas.csv and summary.txt.
void write_mask_report(const std::filesystem::path& dir, const std::vector<MaskRow>& rows,
                       const std::vector<std::string>& header);

// Fraction of equal positions.
double token_agreement(const std::vector<std::vector<int>>& a, const std::vector<std::vector<int>>& b);

}  // namespace hmt

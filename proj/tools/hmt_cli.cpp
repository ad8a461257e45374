// hmt: data generation, staged training, decoding and evaluation.
//
// Exit status: 0 on success, 1 on a contract violation or numeric failure,
// 2 on a configuration error (including bad command lines).

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "hmt/checkpoint.hpp"
#include "hmt/config.hpp"
#include "hmt/error.hpp"
#include "hmt/pipeline.hpp"
#include "hmt/text.hpp"
#include "hmt/world.hpp"

namespace fs = std::filesystem;
using namespace hmt;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::int64_t> seed;
  std::optional<std::string> data_dir, work_dir;
  std::optional<std::size_t> steps, beam, max_len;
  std::optional<double> alpha, mask_p;
  bool force = false;
};

void add_common(CLI::App* sub, Common& c, bool needs_config = true) {
  auto* opt = sub->add_option("--config", c.config, "run configuration (key = value lines)");
  if (!needs_config) opt->description("run configuration (optional here)");
  sub->add_option("--set", c.sets, "override one key, e.g. --set dim=32 (repeatable)");
  sub->add_option("--seed", c.seed, "master seed");
  sub->add_option("--data-dir", c.data_dir, "corpus directory");
  sub->add_option("--work-dir", c.work_dir, "run directory");
}

Config load_config(const Common& c, CLI::App* sub) {
  if (c.config.empty()) {
    throw ConfigError("--config is required\n" + sub->help());
  }
  Config cfg = Config::load(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  if (c.data_dir) cfg.set("data_dir", *c.data_dir);
  if (c.work_dir) cfg.set("work_dir", *c.work_dir);
  if (c.steps) cfg.set("steps", std::to_string(*c.steps));
  if (c.beam) cfg.set("beam", std::to_string(*c.beam));
  if (c.max_len) cfg.set("max_len", std::to_string(*c.max_len));
  if (c.alpha) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", *c.alpha);
    cfg.set("alpha", buf);
  }
  if (c.mask_p) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", *c.mask_p);
    cfg.set("mask_p", buf);
  }
  return cfg;
}

// The averaged checkpoint of a stage when present, else its latest one.
fs::path default_checkpoint(const Config& cfg, const std::string& stage) {
  const fs::path avg = stage_dir(cfg, stage) / "averaged.ckpt";
  if (fs::exists(avg)) return avg;
  return latest_checkpoint(cfg, stage);
}

std::vector<std::string> report_header(const Config& cfg, const std::vector<std::string>& extra) {
  char digest[17];
  std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(cfg.digest()));
  std::vector<std::string> h{"data_dir " + cfg.get("data_dir"), "config_digest " + std::string(digest)};
  h.insert(h.end(), extra.begin(), extra.end());
  return h;
}

void print_stage(const std::string& stage, const StageResult& r) {
  if (!r.records.empty()) {
    const StepRecord& last = r.records.back();
    std::printf("%s: %zu steps, final loss %.6f\n", stage.c_str(), r.records.size(), last.total);
  } else {
    std::printf("%s: nothing to do\n", stage.c_str());
  }
  if (!r.last_checkpoint.empty()) std::printf("checkpoint %s\n", r.last_checkpoint.string().c_str());
}

int run(int argc, char** argv) {
  CLI::App app{"Machine translation helped by hallucinated visual tokens"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "only warnings and errors on stderr");

  Common c;
  std::string mode = "halluc", ckpt, split = "test", input, out, hyp, ref, report, textonly_ckpt, joint_ckpt;
  std::string stage = "joint";
  std::vector<std::string> inputs;
  std::optional<std::size_t> last;
  std::size_t limit = 0;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus into data_dir");
  add_common(gen, c);

  std::map<std::string, CLI::App*> trainers;
  for (const char* name : {"train-vae", "train-halluc", "train-joint", "train-textonly"}) {
    auto* sub = app.add_subcommand(name, std::string("run the ") + (name + 6) + " training stage");
    add_common(sub, c);
    if (std::string(name) != "train-vae") {
      sub->add_option("--steps", c.steps, "total steps for this stage (joint and text-only)");
      sub->add_flag("--force", c.force, "resume even if the recipe digest changed");
    }
    trainers[name] = sub;
  }

  auto* tr = app.add_subcommand("translate", "decode sources with beam search");
  add_common(tr, c);
  tr->add_option("--mode", mode, "text, halluc or gold")->check(CLI::IsMember({"text", "halluc", "gold"}));
  tr->add_option("--ckpt", ckpt, "checkpoint (default: averaged or latest of the matching stage)");
  tr->add_option("--split", split, "corpus split to translate")->check(CLI::IsMember({"train", "valid", "test"}));
  tr->add_option("--input", input, "file of source sentences instead of a split");
  tr->add_option("--out", out, "hypothesis file (default stdout)");
  tr->add_option("--beam", c.beam, "beam size");
  tr->add_option("--alpha", c.alpha, "length penalty exponent");
  tr->add_option("--max-len", c.max_len, "maximum output tokens");
  tr->add_option("--mask-p", c.mask_p, "entity masking probability for split sources");

  auto* ev = app.add_subcommand("evaluate", "corpus BLEU of a hypothesis file");
  add_common(ev, c, false);
  ev->add_option("--hyp", hyp, "hypotheses, one per line")->required();
  ev->add_option("--ref", ref, "references, one per line")->required();
  ev->add_option("--report", report, "directory for bleu.csv and summary.txt");

  auto* ms = app.add_subcommand("mask-suite", "progressive and entity masking sweeps");
  add_common(ms, c);
  ms->add_option("--textonly", textonly_ckpt, "text-only checkpoint");
  ms->add_option("--joint", joint_ckpt, "jointly trained checkpoint");
  ms->add_option("--split", split, "corpus split")->check(CLI::IsMember({"train", "valid", "test"}));
  ms->add_option("--limit", limit, "first n sentences only");
  ms->add_option("--report", report, "report directory (default <work_dir>/mask_suite)");
  ms->add_option("--beam", c.beam, "beam size");

  auto* avg = app.add_subcommand("average-ckpt", "average the last checkpoints of a stage");
  add_common(avg, c, false);
  avg->add_option("--stage", stage, "stage directory under work_dir")
      ->check(CLI::IsMember({"halluc", "joint", "textonly"}));
  avg->add_option("--inputs", inputs, "explicit checkpoint files instead of a stage");
  avg->add_option("--last", last, "number of checkpoints (default ckpt_average)");
  avg->add_option("--out", out, "output file (default <stage dir>/averaged.ckpt)");

  auto* insp = app.add_subcommand("inspect-ckpt", "print a checkpoint's header and tensor table");
  insp->add_option("path", ckpt, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  auto logger = spdlog::stderr_color_st("hmt");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  if (quiet) spdlog::set_level(spdlog::level::warn);

  if (*gen) {
    const Config cfg = load_config(c, gen);
    const Corpus corpus = generate_corpus(cfg.count("n_samples"), static_cast<std::uint64_t>(cfg.integer("seed")),
                                          cfg.count("image_size"));
    export_corpus(cfg.get("data_dir"), corpus);
    std::printf("wrote %zu/%zu/%zu samples to %s\n", corpus.train.size(), corpus.valid.size(), corpus.test.size(),
                cfg.get("data_dir").c_str());
    return 0;
  }
  for (const auto& [name, sub] : trainers) {
    if (!*sub) continue;
    const Config cfg = load_config(c, sub);
    StageOptions opt;
    opt.force = c.force;
    if (name == "train-vae") {
      const StageResult r = train_vae_stage(cfg, opt);
      print_stage("vae", r);
      std::printf("held-out reconstruction MSE %.6f\n", r.heldout_mse);
    } else if (name == "train-halluc") {
      print_stage("halluc", train_halluc_stage(cfg, opt));
    } else if (name == "train-joint") {
      print_stage("joint", train_joint_stage(cfg, opt));
    } else {
      print_stage("textonly", train_textonly_stage(cfg, opt));
    }
    return 0;
  }
  if (*tr) {
    const Config cfg = load_config(c, tr);
    const VisualMode vm = parse_mode(mode);
    const Dataset ds = load_dataset(cfg);
    const fs::path path = ckpt.empty() ? default_checkpoint(cfg, vm == VisualMode::kNone ? "textonly" : "joint") : fs::path(ckpt);
    spdlog::info("translate: {} mode with {}", mode, path.string());
    const LoadedModels models = load_models(cfg, ds.tokenizer, path, vm);
    std::vector<std::string> sources;
    const std::vector<std::vector<int>>* gold = nullptr;
    if (!input.empty()) {
      if (vm == VisualMode::kGold) throw ConfigError("gold mode needs --split; files carry no visual tokens");
      sources = read_lines(input);
    } else {
      const SplitData& s = ds.split(split);
      sources = s.source;
      gold = &s.codes;
    }
    const auto result = translate_all(models, ds.tokenizer, sources, vm, beam_config(cfg), gold);
    std::vector<std::string> lines;
    std::size_t truncated = 0;
    for (const auto& t : result) {
      lines.push_back(t.text);
      truncated += t.truncated;
    }
    if (truncated > 0) spdlog::warn("translate: {} outputs hit max_len without EOS", truncated);
    if (out.empty()) {
      for (const auto& l : lines) std::printf("%s\n", l.c_str());
    } else {
      write_lines(out, lines);
    }
    return 0;
  }
  if (*ev) {
    const BleuReport r = score_corpus(read_lines(hyp), read_lines(ref));
    std::printf("BLEU %.2f (%zu sentences)\n", r.bleu, r.sentences);
    if (!report.empty()) write_bleu_report(report, r, {"hypotheses " + hyp, "references " + ref});
    return 0;
  }
  if (*ms) {
    const Config cfg = load_config(c, ms);
    MaskSuiteOptions opt;
    opt.textonly_ckpt = textonly_ckpt.empty() ? default_checkpoint(cfg, "textonly") : fs::path(textonly_ckpt);
    opt.joint_ckpt = joint_ckpt.empty() ? default_checkpoint(cfg, "joint") : fs::path(joint_ckpt);
    opt.split = split;
    opt.limit = limit;
    const auto rows = run_masking_suite(cfg, opt);
    const fs::path dir = report.empty() ? fs::path(cfg.get("work_dir")) / "mask_suite" : fs::path(report);
    write_mask_report(dir, rows,
                      report_header(cfg, {"split " + split, "textonly_checkpoint " + opt.textonly_ckpt.string(),
                                          "joint_checkpoint " + opt.joint_ckpt.string()}));
    std::printf("%zu rows written to %s\n", rows.size(), dir.string().c_str());
    return 0;
  }
  if (*avg) {
    std::vector<fs::path> files(inputs.begin(), inputs.end());
    fs::path dest = out;
    if (files.empty()) {
      const Config cfg = load_config(c, avg);
      auto all = list_checkpoints(stage_dir(cfg, stage));
      const std::size_t n = last.value_or(cfg.count("ckpt_average"));
      if (all.empty()) throw ConfigError("no checkpoints in " + stage_dir(cfg, stage).string());
      if (n == 0) throw ConfigError("--last must be at least 1");
      files.assign(all.end() - static_cast<std::ptrdiff_t>(std::min(n, all.size())), all.end());
      if (dest.empty()) dest = stage_dir(cfg, stage) / "averaged.ckpt";
    } else if (dest.empty()) {
      throw ConfigError("--out is required with --inputs");
    }
    std::vector<Checkpoint> ckpts;
    for (const auto& f : files) ckpts.push_back(load_checkpoint(f));
    save_checkpoint(dest, average_checkpoints(ckpts));
    std::printf("averaged %zu checkpoints into %s\n", files.size(), dest.string().c_str());
    return 0;
  }
  if (*insp) {
    std::printf("%s", describe_checkpoint(load_checkpoint(ckpt)).c_str());
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const ContractViolation& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

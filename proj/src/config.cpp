#include "hmt/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "hmt/error.hpp"
#include "hmt/rng.hpp"

namespace hmt {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string valid_keys() {
  std::string out;
  for (const auto& k : config_keys()) out += (out.empty() ? "" : ", ") + k.name;
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  return out;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  return out;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"seed", "0", true, "master seed"},
      {"data_dir", "data", false, "corpus directory written by gen-data"},
      {"work_dir", "run", false, "stage checkpoints and loss logs"},
      {"vae_dir", "", false, "visual encoder checkpoint and token caches; empty for <work_dir>/vae"},
      {"n_samples", "10000", true, "corpus size before the 80/10/10 split"},
      {"image_size", "32", true, "rendered image side in pixels"},
      {"bpe_merges", "200", true, "number of BPE merge rules"},
      {"vq_stages", "3", true, "strided conv stages; grid side is image_size / 2^stages"},
      {"vq_channels", "32", true, "hidden channels of the visual encoder"},
      {"code_dim", "16", true, "codebook vector dimension d"},
      {"codebook_size", "64", true, "number of codes K"},
      {"vq_beta", "0.25", true, "commitment weight"},
      {"vae_steps", "3000", false, "visual encoder training steps"},
      {"vae_batch", "16", true, "images per visual encoder step"},
      {"vae_lr", "0.002", true, "visual encoder peak learning rate"},
      {"vae_warmup", "100", true, "visual encoder warmup steps"},
      {"enc_layers", "2", true, "translator encoder layers"},
      {"dec_layers", "2", true, "translator decoder layers"},
      {"hall_layers", "2", true, "hallucinator layers"},
      {"dim", "64", true, "model width"},
      {"ffn", "128", true, "feed-forward width"},
      {"heads", "4", true, "attention heads"},
      {"dropout", "0.1", true, "dropout probability"},
      {"zero_init_output", "1", true, "start output projections at zero"},
      {"gamma_h", "0.5", true, "hallucination loss weight"},
      {"lambda_c", "0.5", true, "consistency loss weight"},
      {"tau0", "5", true, "initial Gumbel temperature"},
      {"tau_min", "0.1", true, "temperature floor"},
      {"tau_rate", "0.001", true, "exponential temperature decay per step"},
      {"base_lr", "0.001", true, "peak learning rate"},
      {"warmup", "500", true, "learning-rate warmup steps"},
      {"token_budget", "256", true, "target tokens per batch"},
      {"halluc_steps", "2000", false, "hallucinator pretraining steps"},
      {"steps", "6000", false, "joint and text-only training steps"},
      {"mask_p", "0", true, "entity masking probability applied to training and test sources"},
      {"ckpt_interval", "500", false, "steps between checkpoints"},
      {"ckpt_average", "10", false, "checkpoints averaged by average-ckpt by default"},
      {"log_every", "100", false, "steps between progress lines"},
      {"beam", "5", false, "beam size"},
      {"alpha", "1", false, "length penalty exponent"},
      {"max_len", "40", false, "maximum output length in tokens"},
      {"mask_k_list", "1,2,3,4,5,7,9,11", false, "progressive masking sweep"},
      {"mask_p_list", "0,0.25,0.5,0.75,1", false, "entity masking sweep"},
      {"mask_seeds", "0,1,2", false, "masking draws per sweep point"},
  };
  return keys;
}

Config::Config() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  Config c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

void Config::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid_keys());
  it->second = value;
}

const std::string& Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid_keys());
  return it->second;
}

double Config::real(const std::string& key) const { return parse_real(key, get(key)); }

std::int64_t Config::integer(const std::string& key) const { return parse_int(key, get(key)); }

std::size_t Config::count(const std::string& key) const {
  const std::int64_t v = integer(key);
  if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

bool Config::flag(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<double> Config::reals(const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : split_list(get(key))) out.push_back(parse_real(key, s));
  return out;
}

std::vector<std::int64_t> Config::integers(const std::string& key) const {
  std::vector<std::int64_t> out;
  for (const auto& s : split_list(get(key))) out.push_back(parse_int(key, s));
  return out;
}

std::uint64_t Config::digest() const {
  std::string canon;
  for (const auto& k : config_keys()) {
    if (k.in_digest) canon += k.name + "=" + values_.at(k.name) + "\n";
  }
  return fnv1a64(canon);
}

std::string Config::dump() const {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + values_.at(k.name) + "\n";
  return out;
}

VqConfig vq_config(const Config& c) {
  VqConfig v;
  v.image_size = c.count("image_size");
  v.stages = c.count("vq_stages");
  v.channels = c.count("vq_channels");
  v.code_dim = c.count("code_dim");
  v.codebook_size = c.count("codebook_size");
  v.beta = c.real("vq_beta");
  validate(v);
  return v;
}

VaeTrainConfig vae_train_config(const Config& c) {
  VaeTrainConfig t;
  t.steps = c.count("vae_steps");
  t.batch_size = c.count("vae_batch");
  t.lr = c.real("vae_lr");
  t.warmup = static_cast<std::int64_t>(std::max<std::size_t>(1, c.count("vae_warmup")));
  t.seed = static_cast<std::uint64_t>(c.integer("seed"));
  t.log_every = std::max<std::size_t>(1, c.count("log_every"));
  if (t.batch_size == 0) throw ConfigError("vae_batch must be positive");
  if (!(t.lr > 0.0)) throw ConfigError("vae_lr must be positive");
  return t;
}

ModelConfig model_config(const Config& c) {
  ModelConfig m;
  m.enc_layers = c.count("enc_layers");
  m.dec_layers = c.count("dec_layers");
  m.hall_layers = c.count("hall_layers");
  m.dim = c.count("dim");
  m.ffn = c.count("ffn");
  m.heads = c.count("heads");
  m.dropout = c.real("dropout");
  m.zero_init_output = c.flag("zero_init_output");
  validate(m);
  return m;
}

GumbelConfig gumbel_config(const Config& c) {
  GumbelConfig g;
  g.tau0 = c.real("tau0");
  g.tau_min = c.real("tau_min");
  g.rate = c.real("tau_rate");
  validate(g);
  return g;
}

LrSchedule lr_schedule(const Config& c) {
  LrSchedule s;
  s.base_lr = c.real("base_lr");
  s.warmup = c.integer("warmup");
  if (!(s.base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (s.warmup < 1) throw ConfigError("warmup must be at least 1");
  return s;
}

}  // namespace hmt

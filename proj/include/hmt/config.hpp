#pragma once

// Flat `key = value` run configuration. Every key has a default; files and
// command-line overrides may only set known keys.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hmt/hallucinator.hpp"
#include "hmt/nn.hpp"
#include "hmt/optim.hpp"
#include "hmt/vq.hpp"

namespace hmt {

struct ConfigKey {
  std::string name;
  std::string default_value;
  bool in_digest;  // part of the recipe digest stored in checkpoints
  std::string help;
};

const std::vector<ConfigKey>& config_keys();

class Config {
 public:
  Config();

  // Parses a file over the defaults; '#' starts a comment.
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;

  double real(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  std::size_t count(const std::string& key) const;  // non-negative integer
  bool flag(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;  // comma separated
  std::vector<std::int64_t> integers(const std::string& key) const;

  std::uint64_t digest() const;
  // Canonical text of every key, in registry order.
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
};

// Typed views.
VqConfig vq_config(const Config& c);
VaeTrainConfig vae_train_config(const Config& c);
ModelConfig model_config(const Config& c);
GumbelConfig gumbel_config(const Config& c);
LrSchedule lr_schedule(const Config& c);

}  // namespace hmt

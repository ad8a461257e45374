#include "hmt/checkpoint.hpp"

#include <boost/multiprecision/cpp_bin_float.hpp>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hmt/error.hpp"

namespace hmt {

namespace {

constexpr char kMagic[8] = {'H', 'M', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

// Wide enough to hold any sum of a few thousand doubles exactly, so the mean
// is rounded once.
using Wide = boost::multiprecision::number<
    boost::multiprecision::cpp_bin_float<2200, boost::multiprecision::digit_base_2, void, std::int32_t,
                                         -20000, 20000>,
    boost::multiprecision::et_off>;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ConfigError(path.string() + ": truncated checkpoint");
  return v;
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void Checkpoint::add_params(const std::string& prefix, const ParamList& params) {
  for (const auto& p : params) {
    tensors.push_back({prefix + "." + p.name, p.value.shape(), {p.value.data().begin(), p.value.data().end()}});
  }
}

void Checkpoint::load_params(const std::string& prefix, const ParamList& params) const {
  for (const auto& p : params) {
    const std::string name = prefix + "." + p.name;
    const CheckpointTensor* t = find(name);
    if (t == nullptr) throw ConfigError("checkpoint has no tensor '" + name + "'");
    if (t->shape != p.value.shape()) {
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_str(t->shape) +
                        ", model expects " + shape_str(p.value.shape()));
    }
    std::copy(t->values.begin(), t->values.end(), p.value.node()->data.begin());
  }
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
  return std::any_of(tensors.begin(), tensors.end(),
                     [&](const auto& t) { return t.name.rfind(prefix + ".", 0) == 0; });
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(kMagic, 8);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, ckpt.digest);
    put<std::int64_t>(out, ckpt.step);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
      HMT_CHECK(shape_numel(t.shape) == t.values.size(), "checkpoint tensor '" + t.name + "' size mismatch");
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
      out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
      for (std::size_t d : t.shape) put<std::uint64_t>(out, d);
      out.write(reinterpret_cast<const char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.rng_state.size()));
    out.write(ckpt.rng_state.data(), static_cast<std::streamsize>(ckpt.rng_state.size()));
    out.flush();
    if (!out) throw ConfigError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw ConfigError(path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw ConfigError(path.string() + ": checkpoint version " + std::to_string(version) + " is not supported");
  }
  Checkpoint c;
  c.digest = get<std::uint64_t>(in, path);
  c.step = get<std::int64_t>(in, path);
  const auto n = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < n; ++i) {
    CheckpointTensor t;
    t.name.resize(get<std::uint32_t>(in, path));
    in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    const auto rank = get<std::uint32_t>(in, path);
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(get<std::uint64_t>(in, path));
    t.values.resize(shape_numel(t.shape));
    in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    if (!in) throw ConfigError(path.string() + ": truncated tensor '" + t.name + "'");
    c.tensors.push_back(std::move(t));
  }
  c.rng_state.resize(get<std::uint32_t>(in, path));
  in.read(c.rng_state.data(), static_cast<std::streamsize>(c.rng_state.size()));
  if (!in) throw ConfigError(path.string() + ": truncated RNG state");
  return c;
}

Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts) {
  HMT_CHECK(!ckpts.empty(), "average_checkpoints: no checkpoints");
  const Checkpoint& first = ckpts.front();
  Checkpoint out;
  out.digest = first.digest;
  out.rng_state = first.rng_state;
  for (const auto& c : ckpts) {
    HMT_CHECK(c.digest == first.digest, "average_checkpoints: recipe digests differ");
    out.step = std::max(out.step, c.step);
  }
  for (const auto& t : first.tensors) {
    if (t.name.rfind(kOptimizerPrefix, 0) == 0) continue;
    std::vector<const CheckpointTensor*> inputs;
    for (const auto& c : ckpts) {
      const CheckpointTensor* other = c.find(t.name);
      HMT_CHECK(other != nullptr, "average_checkpoints: tensor '" + t.name + "' missing from an input");
      HMT_CHECK(other->shape == t.shape, "average_checkpoints: shape mismatch for '" + t.name + "': " +
                                             shape_str(other->shape) + " vs " + shape_str(t.shape));
      inputs.push_back(other);
    }
    CheckpointTensor avg{t.name, t.shape, std::vector<double>(t.values.size(), 0.0)};
    for (std::size_t i = 0; i < avg.values.size(); ++i) {
      Wide sum = 0;
      for (const auto* in : inputs) sum += Wide(in->values[i]);
      sum /= static_cast<int>(inputs.size());
      avg.values[i] = sum.convert_to<double>();
    }
    out.tensors.push_back(std::move(avg));
  }
  for (const auto& c : ckpts) {
    std::size_t own = 0;
    for (const auto& t : c.tensors) own += t.name.rfind(kOptimizerPrefix, 0) != 0;
    HMT_CHECK(own == out.tensors.size(), "average_checkpoints: inputs hold different tensor sets");
  }
  return out;
}

std::string describe_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream os;
  char digest[17];
  std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(ckpt.digest));
  std::size_t total = 0;
  for (const auto& t : ckpt.tensors) total += t.values.size();
  os << "step " << ckpt.step << "\ndigest " << digest << "\ntensors " << ckpt.tensors.size()
     << "\nvalues " << total << "\n";
  for (const auto& t : ckpt.tensors) os << t.name << " " << shape_str(t.shape) << "\n";
  return os.str();
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step_%08lld.ckpt", static_cast<long long>(step));
  return dir / name;
}

std::vector<std::filesystem::path> list_checkpoints(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::exists(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("step_", 0) == 0 && e.path().extension() == ".ckpt") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace hmt

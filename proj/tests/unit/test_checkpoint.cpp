#include <boost/multiprecision/cpp_int.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hmt/checkpoint.hpp"
#include "hmt/config.hpp"
#include "hmt/error.hpp"
#include "hmt/optim.hpp"
#include "hmt/rng.hpp"

using namespace hmt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hmt_ckpt_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Checkpoint random_checkpoint(Rng& rng, std::int64_t step) {
  Checkpoint c;
  c.digest = 0xfeedULL;
  c.step = step;
  for (const auto& [name, shape] : std::vector<std::pair<std::string, Shape>>{
           {"trans.w", {3, 4}}, {"trans.b", {4}}, {"halluc.embed", {5, 2}}}) {
    CheckpointTensor t{name, shape, std::vector<double>(shape_numel(shape))};
    for (auto& v : t.values) {
      // Mixed magnitudes so naive summation would round.
      v = rng.normal() * std::ldexp(1.0, static_cast<int>(rng.below(40)) - 20);
    }
    c.tensors.push_back(std::move(t));
  }
  c.tensors.push_back({"opt.step", {1}, {static_cast<double>(step)}});
  c.rng_state = "state-" + std::to_string(step);
  return c;
}

// Exact rational mean, rounded once to double.
double oracle_mean(const std::vector<double>& xs) {
  boost::multiprecision::cpp_rational sum = 0;
  for (double x : xs) sum += boost::multiprecision::cpp_rational(x);
  sum /= static_cast<int>(xs.size());
  return sum.convert_to<double>();
}

}  // namespace

TEST_CASE("save and load round trip bit-exactly") {
  Rng rng(1);
  const Checkpoint c = random_checkpoint(rng, 1500);
  const fs::path dir = scratch("roundtrip");
  save_checkpoint(dir / "a.ckpt", c);
  CHECK_FALSE(fs::exists(dir / "a.ckpt.tmp"));
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.digest == c.digest);
  CHECK(back.step == c.step);
  CHECK(back.rng_state == c.rng_state);
  CHECK(back.tensors == c.tensors);
}

TEST_CASE("malformed checkpoint files are configuration errors") {
  const fs::path dir = scratch("bad");
  {
    std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), ConfigError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), ConfigError);
  Rng rng(2);
  save_checkpoint(dir / "ok.ckpt", random_checkpoint(rng, 1));
  const auto size = fs::file_size(dir / "ok.ckpt");
  fs::resize_file(dir / "ok.ckpt", size - 20);
  CHECK_THROWS_AS(load_checkpoint(dir / "ok.ckpt"), ConfigError);
}

TEST_CASE("averaging identical checkpoints is the identity") {
  Rng rng(3);
  const Checkpoint c = random_checkpoint(rng, 10);
  for (std::size_t n : {1u, 2u, 3u, 7u, 10u}) {
    const Checkpoint avg = average_checkpoints(std::vector<Checkpoint>(n, c));
    REQUIRE(avg.tensors.size() == 3);
    for (const auto& t : avg.tensors) CHECK(t.values == c.find(t.name)->values);
  }
}

TEST_CASE("mean of two checkpoints is (a + b) / 2 exactly") {
  Rng rng(4);
  const Checkpoint a = random_checkpoint(rng, 1), b = random_checkpoint(rng, 2);
  const Checkpoint avg = average_checkpoints({a, b});
  for (const auto& t : avg.tensors) {
    const auto& va = a.find(t.name)->values;
    const auto& vb = b.find(t.name)->values;
    for (std::size_t i = 0; i < va.size(); ++i) CHECK(t.values[i] == oracle_mean({va[i], vb[i]}));
  }
  CHECK(average_checkpoints({a, a}).tensors[0].values == a.tensors[0].values);
}

TEST_CASE("mean of ten checkpoints matches the exact rational oracle") {
  Rng rng(5);
  std::vector<Checkpoint> cs;
  for (int i = 0; i < 10; ++i) cs.push_back(random_checkpoint(rng, 500 * (i + 1)));
  const Checkpoint avg = average_checkpoints(cs);
  CHECK(avg.step == 5000);
  CHECK(avg.find("opt.step") == nullptr);
  for (const auto& t : avg.tensors) {
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      std::vector<double> xs;
      for (const auto& c : cs) xs.push_back(c.find(t.name)->values[i]);
      CHECK(t.values[i] == oracle_mean(xs));
    }
  }
}

TEST_CASE("averaging commutes with save and load") {
  Rng rng(6);
  std::vector<Checkpoint> cs;
  const fs::path dir = scratch("commute");
  std::vector<Checkpoint> reloaded;
  for (int i = 0; i < 4; ++i) {
    cs.push_back(random_checkpoint(rng, i + 1));
    save_checkpoint(checkpoint_path(dir, i + 1), cs.back());
  }
  for (const auto& p : list_checkpoints(dir)) reloaded.push_back(load_checkpoint(p));
  save_checkpoint(dir / "avg.ckpt", average_checkpoints(cs));
  const Checkpoint a = load_checkpoint(dir / "avg.ckpt");
  const Checkpoint b = average_checkpoints(reloaded);
  CHECK(a.tensors == b.tensors);
  CHECK(a.step == b.step);
}

TEST_CASE("averaging rejects mismatched inputs") {
  Rng rng(7);
  const Checkpoint a = random_checkpoint(rng, 1);
  Checkpoint b = random_checkpoint(rng, 2);
  b.tensors[0].shape = {4, 3};
  CHECK_THROWS_AS(average_checkpoints({a, b}), ContractViolation);
  Checkpoint c = random_checkpoint(rng, 3);
  c.digest = 1;
  CHECK_THROWS_AS(average_checkpoints({a, c}), ContractViolation);
  Checkpoint d = random_checkpoint(rng, 4);
  d.tensors.push_back({"extra", {1}, {0.0}});
  CHECK_THROWS_AS(average_checkpoints({a, d}), ContractViolation);
  CHECK_THROWS_AS(average_checkpoints({}), ContractViolation);
}

TEST_CASE("checkpoint listing and parameter transfer") {
  const fs::path dir = scratch("list");
  Rng rng(8);
  for (std::int64_t s : {1000, 500, 1500}) save_checkpoint(checkpoint_path(dir, s), random_checkpoint(rng, s));
  const auto all = list_checkpoints(dir);
  REQUIRE(all.size() == 3);
  CHECK(all[0].filename() == "step_00000500.ckpt");
  CHECK(all[2].filename() == "step_00001500.ckpt");

  ParamList params{{"w", Tensor::parameter({2, 2}, {1, 2, 3, 4})}};
  Checkpoint c;
  c.add_params("m", params);
  CHECK(c.has_prefix("m"));
  CHECK_FALSE(c.has_prefix("x"));
  ParamList other{{"w", Tensor::parameter({2, 2}, {0, 0, 0, 0})}};
  c.load_params("m", other);
  CHECK(other[0].value.data()[3] == 4.0);
  ParamList wrong{{"w", Tensor::parameter({4}, {0, 0, 0, 0})}};
  CHECK_THROWS_AS(c.load_params("m", wrong), ConfigError);
  CHECK_THROWS_AS(c.load_params("n", other), ConfigError);
  CHECK(describe_checkpoint(c).find("m.w [2, 2]") != std::string::npos);
}

// ---- configuration ----

TEST_CASE("config defaults, files and overrides") {
  Config c;
  CHECK(c.real("gamma_h") == 0.5);
  CHECK(c.real("lambda_c") == 0.5);
  CHECK(c.count("beam") == 5);
  CHECK(c.real("alpha") == 1.0);
  CHECK(c.count("ckpt_interval") == 500);
  CHECK(c.count("ckpt_average") == 10);

  const fs::path dir = scratch("config");
  {
    std::ofstream f(dir / "run.conf");
    f << "# comment line\n  dim = 32   # trailing comment\n\nbeam=3\nmask_p_list = 0, 0.5 ,1\n";
  }
  Config f = Config::load(dir / "run.conf");
  CHECK(f.count("dim") == 32);
  CHECK(f.count("beam") == 3);
  CHECK(f.reals("mask_p_list") == std::vector<double>{0.0, 0.5, 1.0});
  f.set("beam", "7");
  CHECK(f.count("beam") == 7);
  CHECK(model_config(f).dim == 32);
}

TEST_CASE("config errors") {
  Config c;
  try {
    c.set("gama_h", "1");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("gama_h") != std::string::npos);
    CHECK(msg.find("gamma_h") != std::string::npos);
    CHECK(msg.find("token_budget") != std::string::npos);
  }
  c.set("dim", "sixty");
  CHECK_THROWS_AS(c.count("dim"), ConfigError);
  c.set("dim", "-4");
  CHECK_THROWS_AS(c.count("dim"), ConfigError);
  Config h;
  h.set("heads", "5");
  CHECK_THROWS_AS(model_config(h), ConfigError);
  const fs::path dir = scratch("config_bad");
  {
    std::ofstream(dir / "bad.conf") << "dim 32\n";
  }
  CHECK_THROWS_AS(Config::load(dir / "bad.conf"), ConfigError);
  CHECK_THROWS_AS(Config::load(dir / "none.conf"), ConfigError);
}

TEST_CASE("recipe digest covers model and data keys only") {
  Config a, b;
  CHECK(a.digest() == b.digest());
  b.set("beam", "2");
  b.set("steps", "100");
  b.set("work_dir", "elsewhere");
  CHECK(a.digest() == b.digest());
  b.set("gamma_h", "0.25");
  CHECK(a.digest() != b.digest());
  Config s;
  s.set("seed", "1");
  CHECK(a.digest() != s.digest());
}

TEST_CASE("learning-rate schedule points") {
  for (std::int64_t w : {2, 500, 4000}) {
    const LrSchedule s{1e-3, w};
    CHECK(lr_at(w, s) == 1e-3);
    CHECK(lr_at(w / 2, s) == 1e-3 / 2);
    CHECK(lr_at(4 * w, s) == 1e-3 / 2);
  }
}

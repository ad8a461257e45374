#include <cmath>
#include <filesystem>

#include <spdlog/spdlog.h>

#include "doctest.h"
#include "hmt/error.hpp"
#include "hmt/gradcheck.hpp"
#include "hmt/vq.hpp"

using namespace hmt;

namespace {

std::vector<int> brute_nearest(const std::vector<double>& c, const std::vector<double>& e,
                               std::size_t d) {
  std::vector<int> out;
  const std::size_t n = c.size() / d, k = e.size() / d;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> dist(k);
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t t = 0; t < d; ++t) dist[j] += std::pow(c[i * d + t] - e[j * d + t], 2);
    }
    out.push_back(static_cast<int>(std::min_element(dist.begin(), dist.end()) - dist.begin()));
  }
  return out;
}

VqConfig micro_cfg() {
  VqConfig c;
  c.image_size = 8;
  c.stages = 2;
  c.channels = 3;
  c.code_dim = 2;
  c.codebook_size = 4;
  return c;
}

}  // namespace

TEST_CASE("grid size follows the number of stages") {
  VqConfig c;
  CHECK(c.num_tokens() == 16);
  c.stages = 2;
  CHECK(c.num_tokens() == 64);

  for (std::size_t stages : {2u, 3u}) {
    c.stages = stages;
    VqModel m = VqModel::init(c, 0);
    RenderedImage img = render({{{ObjShape::kSquare, Color::kBlue, 0, 0}}, {}});
    Tensor f = encode_features(img, m);
    CHECK(f.dim(0) == c.num_tokens());
    CHECK(f.dim(1) == c.code_dim);
  }
  c.image_size = 30;
  CHECK_THROWS_AS(validate(c), ConfigError);
}

TEST_CASE("zero image through zero bias-free weights gives zero features") {
  VqModel m = VqModel::init(VqConfig{}, 1);
  for (auto& w : m.enc_w) std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
  RenderedImage img{32, 32, std::vector<double>(32 * 32 * 3, 0.0)};
  for (double v : encode_features(img, m).data()) CHECK(v == 0.0);
}

TEST_CASE("quantize examples") {
  Tensor e = Tensor::from_data({2, 2}, {0, 0, 2, 2});
  CHECK(quantize(Tensor::from_data({1, 2}, {0.4, 0.3}), e) == std::vector<int>{0});
  CHECK(quantize(Tensor::from_data({1, 2}, {2, 2}), e) == std::vector<int>{1});
  // Equidistant: smallest index.
  CHECK(quantize(Tensor::from_data({1, 2}, {1, 1}), e) == std::vector<int>{0});
  Tensor dup = Tensor::from_data({3, 1}, {5, 1, 1});
  CHECK(quantize(Tensor::from_data({1, 1}, {1}), dup) == std::vector<int>{1});
}

TEST_CASE("quantize matches a brute-force scan on random inputs") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> c(16 * 8), e(64 * 8);
    for (double& v : c) v = rng.normal();
    for (double& v : e) v = rng.normal();
    CHECK(quantize(Tensor::from_data({16, 8}, c), Tensor::from_data({64, 8}, e)) ==
          brute_nearest(c, e, 8));
  }
}

TEST_CASE("embed and quantize round trips") {
  Rng rng(2);
  std::vector<double> e(64 * 16);
  for (double& v : e) v = rng.normal();
  Tensor cb = Tensor::from_data({64, 16}, e);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> z(16);
    for (int& t : z) t = static_cast<int>(rng.below(64));
    Tensor rows = embed_tokens(z, cb);
    CHECK(quantize(rows, cb) == z);
  }
  std::vector<int> constant(16, 7);
  Tensor rows = embed_tokens(constant, cb);
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t t = 0; t < 16; ++t) CHECK(rows.at(r, t) == cb.at(7, t));
  }
}

TEST_CASE("decode shape and determinism") {
  VqModel m = VqModel::init(VqConfig{}, 3);
  std::vector<int> z(16, 5);
  RenderedImage a = decode_tokens(z, m), b = decode_tokens(z, m);
  CHECK(a.height == 32);
  CHECK(a.width == 32);
  CHECK(a.pixels == b.pixels);
  for (double p : a.pixels) CHECK((p >= 0.0 && p <= 1.0));
}

TEST_CASE("vq losses") {
  VqModel m = VqModel::init(VqConfig{}, 4);
  Rng rng(1);
  std::vector<RenderedImage> imgs;
  for (int i = 0; i < 3; ++i) imgs.push_back(render(sample_scene(rng)));
  Tensor batch = image_batch({&imgs[0], &imgs[1], &imgs[2]});

  VqLoss l = vq_losses(batch, m);
  CHECK(l.total.item() >= 0.0);
  CHECK(l.tokens.size() == 48);

  // Codebook rows equal to the features: VQ terms vanish.
  VqConfig one = VqConfig{};
  one.codebook_size = 48;
  VqModel exact = VqModel::init(one, 4);
  Tensor f = encode_features(batch, exact);
  std::copy(f.data().begin(), f.data().end(), exact.codebook.mutable_data().begin());
  VqLoss z = vq_losses(batch, exact);
  CHECK(z.codebook.item() == 0.0);
  CHECK(z.commit.item() == 0.0);
}

TEST_CASE("straight-through copies the decoder gradient to the encoder output") {
  VqConfig cfg = micro_cfg();
  VqModel m = VqModel::init(cfg, 9);
  Rng rng(3);
  Tensor c = normal_param({cfg.num_tokens(), cfg.code_dim}, 1.0, rng);
  std::vector<int> z = quantize(c, m.codebook);
  Tensor e = embed_tokens(z, m.codebook).detach();

  Tape t1;
  GradientMap g_st;
  Tensor zq;
  {
    TapeScope s(t1);
    std::vector<double> shift(c.numel());
    for (std::size_t i = 0; i < shift.size(); ++i) shift[i] = e.data()[i] - c.data()[i];
    zq = add(c, Tensor::from_data(c.shape(), shift));
    Tensor out = reduce_sum(mul(decode_image(zq, m), decode_image(zq, m)));
    g_st = backward(out, t1);
  }
  // Same decoder loss evaluated directly at a leaf holding the quantized value.
  Tensor leaf = Tensor::parameter(zq.shape(), {zq.data().begin(), zq.data().end()});
  Tape t2;
  GradientMap g_direct;
  {
    TapeScope s(t2);
    Tensor out = reduce_sum(mul(decode_image(leaf, m), decode_image(leaf, m)));
    g_direct = backward(out, t2);
  }
  const auto a = g_st.at(c.id()).data();
  const auto b = g_direct.at(leaf.id()).data();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("vq loss gradcheck on a micro model") {
  VqConfig cfg = micro_cfg();
  VqModel m = VqModel::init(cfg, 11);
  Rng rng(8);
  std::vector<double> px(8 * 8 * 3);
  for (double& v : px) v = rng.uniform();
  Tensor img = Tensor::from_data({1, 8, 8, 3}, px);
  ParamList params = m.params();
  std::vector<Tensor> ts = tensors_of(params);
  const VqLoss base = vq_losses(img, m);
  double err = gradcheck_params([&] { return vq_losses(img, m, &base).total; }, ts, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("code usage histogram") {
  CodeUsage u = code_usage({0, 0, 3, 1}, 8);
  CHECK(u.histogram[0] == 2);
  CHECK(u.fraction == doctest::Approx(3.0 / 8.0));
  std::size_t total = 0;
  for (auto n : u.histogram) total += n;
  CHECK(total == 4);
}

TEST_CASE("single-image training lowers the reconstruction error") {
  std::vector<RenderedImage> imgs{
      render({{{ObjShape::kTriangle, Color::kGreen, 1, 1}, {ObjShape::kSquare, Color::kRed, 2, 3}},
              {Relation::kLeftOf}})};
  VqModel m = VqModel::init(VqConfig{}, 0);
  VaeTrainConfig tc;
  tc.steps = 50;
  tc.batch_size = 1;
  tc.warmup = 10;
  tc.log_every = 1;
  spdlog::set_level(spdlog::level::err);  // one image cannot use 10% of the codes
  const double before = reconstruction_mse(m, imgs);
  VaeTrainResult r = train_vae(m, imgs, tc);
  CHECK(r.log.back().recon < r.log.front().recon);
  CHECK(reconstruction_mse(m, imgs) < before);

  VqModel again = VqModel::init(VqConfig{}, 0);
  train_vae(again, imgs, tc);
  CHECK(std::vector<double>(again.codebook.data().begin(), again.codebook.data().end()) ==
        std::vector<double>(m.codebook.data().begin(), m.codebook.data().end()));
  CHECK_THROWS_AS(train_vae(m, {}, tc), ConfigError);
}

TEST_CASE("token cache round trip") {
  auto path = std::filesystem::temp_directory_path() / "hmt_tokens.bin";
  std::vector<std::vector<int>> rows{{0, 1, 2, 3}, {63, 62, 0, 5}};
  write_token_cache(path, 4, 64, rows);
  TokenCache c = read_token_cache(path);
  CHECK(c.num_tokens == 4);
  CHECK(c.codebook_size == 64);
  CHECK(c.rows == rows);
  std::filesystem::remove(path);
}

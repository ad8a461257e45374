#include "hmt/vq.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "hmt/error.hpp"
#include "hmt/optim.hpp"

namespace hmt {

namespace {

Tensor square(const Tensor& x) { return mul(x, x); }

std::size_t enc_in(const VqConfig& c, std::size_t s) { return s == 0 ? 3 : c.channels; }
std::size_t enc_out(const VqConfig& c, std::size_t s) {
  return s + 1 == c.stages ? c.code_dim : c.channels;
}
std::size_t dec_in(const VqConfig& c, std::size_t s) { return s == 0 ? c.code_dim : c.channels; }
std::size_t dec_out(const VqConfig& c, std::size_t s) { return s + 1 == c.stages ? 3 : c.channels; }

constexpr char kTokenMagic[8] = {'H', 'M', 'T', 'T', 'O', 'K', '0', '1'};
constexpr std::uint32_t kTokenVersion = 1;

}  // namespace

std::size_t VqConfig::grid_side() const { return image_size >> stages; }

void validate(const VqConfig& cfg) {
  if (cfg.stages == 0 || cfg.stages > 8) throw ConfigError("vq: stages must be in 1..8");
  if (cfg.image_size == 0 || cfg.image_size % (std::size_t{1} << cfg.stages) != 0) {
    throw ConfigError("vq: image size " + std::to_string(cfg.image_size) +
                      " is not divisible by 2^" + std::to_string(cfg.stages));
  }
  if (cfg.codebook_size < 2) throw ConfigError("vq: codebook size must be at least 2");
  if (cfg.codebook_size > 65535) throw ConfigError("vq: codebook size must fit in 16 bits");
  if (cfg.code_dim == 0 || cfg.channels == 0) throw ConfigError("vq: dimensions must be positive");
  if (cfg.beta < 0.0) throw ConfigError("vq: beta must be non-negative");
}

VqModel VqModel::init(const VqConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng = Rng::stream(seed, "vq-init");
  VqModel m;
  m.cfg = cfg;
  for (std::size_t s = 0; s < cfg.stages; ++s) {
    const std::size_t fan_in = 4 * enc_in(cfg, s);
    m.enc_w.push_back(normal_param({fan_in, enc_out(cfg, s)}, std::sqrt(2.0 / fan_in), rng));
    m.enc_b.push_back(zero_param({enc_out(cfg, s)}));
  }
  for (std::size_t s = 0; s < cfg.stages; ++s) {
    const std::size_t fan_in = dec_in(cfg, s);
    m.dec_w.push_back(normal_param({fan_in, 4 * dec_out(cfg, s)}, std::sqrt(2.0 / fan_in), rng));
    m.dec_b.push_back(zero_param({4 * dec_out(cfg, s)}));
  }
  m.codebook = normal_param({cfg.codebook_size, cfg.code_dim}, 1.0, rng);
  return m;
}

ParamList VqModel::network_params() const {
  ParamList out;
  for (std::size_t s = 0; s < enc_w.size(); ++s) {
    out.push_back({"enc" + std::to_string(s) + ".w", enc_w[s]});
    out.push_back({"enc" + std::to_string(s) + ".b", enc_b[s]});
  }
  for (std::size_t s = 0; s < dec_w.size(); ++s) {
    out.push_back({"dec" + std::to_string(s) + ".w", dec_w[s]});
    out.push_back({"dec" + std::to_string(s) + ".b", dec_b[s]});
  }
  return out;
}

ParamList VqModel::params() const {
  ParamList out = network_params();
  out.push_back({"codebook", codebook});
  return out;
}

Tensor image_batch(const std::vector<const RenderedImage*>& images) {
  HMT_CHECK(!images.empty(), "image_batch: no images");
  const std::size_t h = images[0]->height, w = images[0]->width;
  std::vector<double> data;
  data.reserve(images.size() * h * w * 3);
  for (const auto* im : images) {
    HMT_CHECK(im->height == h && im->width == w, "image_batch: images differ in size");
    data.insert(data.end(), im->pixels.begin(), im->pixels.end());
  }
  return Tensor::from_data({images.size(), h, w, 3}, std::move(data));
}

Tensor encode_features(const Tensor& images, const VqModel& m) {
  const VqConfig& c = m.cfg;
  HMT_CHECK(images.rank() == 4 && images.dim(3) == 3, "encode_features: expected [B, H, W, 3]");
  if (images.dim(1) != c.image_size || images.dim(2) != c.image_size) {
    throw ConfigError("encode_features: image is " + std::to_string(images.dim(1)) + "x" +
                      std::to_string(images.dim(2)) + ", model expects " +
                      std::to_string(c.image_size));
  }
  const std::size_t b = images.dim(0);
  Tensor x = images;
  Tensor flat;
  std::size_t side = c.image_size;
  for (std::size_t s = 0; s < c.stages; ++s) {
    side /= 2;
    Tensor blocks = space_to_depth(x, 2);
    flat = add(matmul(reshape(blocks, {b * side * side, 4 * enc_in(c, s)}), m.enc_w[s]), m.enc_b[s]);
    if (s + 1 < c.stages) {
      flat = relu(flat);
      x = reshape(flat, {b, side, side, enc_out(c, s)});
    }
  }
  return flat;
}

Tensor encode_features(const RenderedImage& image, const VqModel& m) {
  return encode_features(image_batch({&image}), m);
}

std::vector<int> quantize(const Tensor& features, const Tensor& codebook) {
  HMT_CHECK(features.rank() == 2 && codebook.rank() == 2 && features.dim(1) == codebook.dim(1),
            "quantize: feature dim " + shape_str(features.shape()) + " vs codebook " +
                shape_str(codebook.shape()));
  const std::size_t n = features.dim(0), k = codebook.dim(0), d = codebook.dim(1);
  const auto f = features.data();
  const auto e = codebook.data();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t j = 0; j < k; ++j) {
      double dist = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = f[i * d + t] - e[j * d + t];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        arg = static_cast<int>(j);
      }
    }
    out[i] = arg;
  }
  return out;
}

Tensor embed_tokens(std::span<const int> tokens, const Tensor& codebook) {
  return embedding_gather(codebook, tokens);
}

Tensor decode_image(const Tensor& features, const VqModel& m) {
  const VqConfig& c = m.cfg;
  const std::size_t v = c.num_tokens();
  HMT_CHECK(features.rank() == 2 && features.dim(1) == c.code_dim && features.dim(0) % v == 0,
            "decode_image: features " + shape_str(features.shape()) + " do not match V=" +
                std::to_string(v) + ", d=" + std::to_string(c.code_dim));
  const std::size_t b = features.dim(0) / v;
  Tensor x = features;
  std::size_t side = c.grid_side();
  for (std::size_t s = 0; s < c.stages; ++s) {
    Tensor y = add(matmul(x, m.dec_w[s]), m.dec_b[s]);
    y = depth_to_space(reshape(y, {b, side, side, 4 * dec_out(c, s)}), 2);
    side *= 2;
    x = reshape(y, {b * side * side, dec_out(c, s)});
    if (s + 1 < c.stages) x = relu(x);
  }
  return reshape(x, {b, side, side, 3});
}

RenderedImage decode_tokens(std::span<const int> tokens, const VqModel& m) {
  NoTapeScope no_tape;
  HMT_CHECK(tokens.size() == m.cfg.num_tokens(), "decode_tokens: expected " +
                                                     std::to_string(m.cfg.num_tokens()) + " tokens");
  Tensor img = decode_image(embed_tokens(tokens, m.codebook), m);
  RenderedImage out;
  out.height = out.width = m.cfg.image_size;
  out.pixels.assign(img.data().begin(), img.data().end());
  for (double& p : out.pixels) p = std::clamp(p, 0.0, 1.0);
  return out;
}

VqLoss vq_losses(const Tensor& images, const VqModel& m, const VqLoss* frozen) {
  VqLoss out;
  Tensor c = encode_features(images, m);
  out.tokens = frozen ? frozen->tokens : quantize(c, m.codebook);
  Tensor e = embed_tokens(out.tokens, m.codebook);
  out.sg_features = frozen ? frozen->sg_features : c.detach();
  out.sg_codes = frozen ? frozen->sg_codes : e.detach();
  // Straight-through: forward value e_z, gradient copied to c unchanged.
  std::vector<double> shift(c.numel());
  for (std::size_t i = 0; i < shift.size(); ++i) {
    shift[i] = out.sg_codes.data()[i] - out.sg_features.data()[i];
  }
  Tensor zq = add(c, Tensor::from_data(c.shape(), std::move(shift)));
  out.recon = reduce_mean(square(sub(decode_image(zq, m), images)));
  out.codebook = reduce_mean(square(sub(out.sg_features, e)));
  out.commit = scale(reduce_mean(square(sub(c, out.sg_codes))), m.cfg.beta);
  out.total = add(add(out.recon, out.codebook), out.commit);
  return out;
}

CodeUsage code_usage(const std::vector<int>& tokens, std::size_t codebook_size) {
  CodeUsage u;
  u.histogram.assign(codebook_size, 0);
  for (int t : tokens) {
    HMT_CHECK(t >= 0 && static_cast<std::size_t>(t) < codebook_size, "code_usage: code out of range");
    u.histogram[t]++;
  }
  const auto used = std::count_if(u.histogram.begin(), u.histogram.end(), [](auto n) { return n > 0; });
  u.fraction = static_cast<double>(used) / static_cast<double>(codebook_size);
  return u;
}

VaeTrainResult train_vae(VqModel& m, const std::vector<RenderedImage>& images,
                         const VaeTrainConfig& tc,
                         const std::function<void(const VaeLogEntry&)>& on_log) {
  if (images.empty()) throw ConfigError("train_vae: no training images");
  HMT_CHECK(tc.batch_size > 0, "train_vae: batch size must be positive");
  Rng rng = Rng::stream(tc.seed, "vq-train");
  std::vector<std::size_t> order(images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  auto next_batch = [&] {
    std::vector<const RenderedImage*> batch;
    for (std::size_t i = 0; i < tc.batch_size; ++i) {
      if (cursor == order.size()) {
        rng.shuffle(std::span(order));
        cursor = 0;
      }
      batch.push_back(&images[order[cursor++]]);
    }
    return image_batch(batch);
  };

  // Seed the codebook with encoder outputs so every code starts near data.
  {
    NoTapeScope no_tape;
    Tensor feats = encode_features(next_batch(), m);
    auto cb = m.codebook.mutable_data();
    const std::size_t d = m.cfg.code_dim;
    for (std::size_t k = 0; k < m.cfg.codebook_size; ++k) {
      const std::size_t row = rng.below(feats.dim(0));
      for (std::size_t t = 0; t < d; ++t) cb[k * d + t] = feats.data()[row * d + t] + 0.01 * rng.normal();
    }
  }

  std::vector<Tensor> params = tensors_of(m.params());
  AdamState adam;
  VaeTrainResult result;
  std::vector<int> window_tokens;
  std::vector<std::size_t> last_used(m.cfg.codebook_size, 0);
  double window_loss = 0.0, window_recon = 0.0;
  std::size_t window = 0;
  for (std::size_t step = 1; step <= tc.steps; ++step) {
    Tape tape;
    VqLoss loss;
    {
      TapeScope scope(tape);
      loss = vq_losses(next_batch(), m);
    }
    const double value = loss.total.item();
    result.loss_trace.push_back(value);
    if (!std::isfinite(value)) {
      std::string trace;
      const std::size_t from = result.loss_trace.size() > 5 ? result.loss_trace.size() - 5 : 0;
      for (std::size_t i = from; i < result.loss_trace.size(); ++i) {
        trace += " " + std::to_string(result.loss_trace[i]);
      }
      throw NumericError("train_vae: non-finite loss at step " + std::to_string(step) +
                         "; recent losses:" + trace);
    }
    GradientMap grads = backward(loss.total, tape);
    adam_step(params, grads, adam, lr_at(static_cast<std::int64_t>(step), {tc.lr, tc.warmup}));

    for (int t : loss.tokens) last_used[t] = step;
    if (tc.reseed_every > 0 && step % tc.reseed_every == 0 && step < tc.steps) {
      auto cb = m.codebook.mutable_data();
      const auto feats = loss.sg_features.data();
      const std::size_t d = m.cfg.code_dim, rows = loss.sg_features.dim(0);
      for (std::size_t k = 0; k < m.cfg.codebook_size; ++k) {
        if (step - last_used[k] < tc.reseed_every) continue;
        const std::size_t row = rng.below(rows);
        for (std::size_t t = 0; t < d; ++t) cb[k * d + t] = feats[row * d + t] + 0.01 * rng.normal();
        last_used[k] = step;
      }
    }

    window_loss += value;
    window_recon += loss.recon.item();
    window_tokens.insert(window_tokens.end(), loss.tokens.begin(), loss.tokens.end());
    ++window;
    if (step % std::max<std::size_t>(tc.log_every, 1) == 0 || step == tc.steps) {
      VaeLogEntry e{step, window_loss / window, window_recon / window,
                    code_usage(window_tokens, m.cfg.codebook_size).fraction};
      if (e.usage < 0.1) {
        spdlog::warn("vq step {}: codebook usage {:.1f}% is below 10%", step, 100.0 * e.usage);
      }
      result.log.push_back(e);
      if (on_log) on_log(e);
      window_loss = window_recon = 0.0;
      window = 0;
      window_tokens.clear();
    }
  }
  return result;
}

std::vector<std::vector<int>> encode_tokens(const VqModel& m,
                                            const std::vector<RenderedImage>& images) {
  NoTapeScope no_tape;
  std::vector<std::vector<int>> out;
  const std::size_t v = m.cfg.num_tokens();
  for (std::size_t i = 0; i < images.size(); i += 64) {
    std::vector<const RenderedImage*> batch;
    for (std::size_t j = i; j < std::min(images.size(), i + 64); ++j) batch.push_back(&images[j]);
    std::vector<int> codes = quantize(encode_features(image_batch(batch), m), m.codebook);
    for (std::size_t j = 0; j < batch.size(); ++j) {
      out.emplace_back(codes.begin() + j * v, codes.begin() + (j + 1) * v);
    }
  }
  return out;
}

double reconstruction_mse(const VqModel& m, const std::vector<RenderedImage>& images) {
  HMT_CHECK(!images.empty(), "reconstruction_mse: no images");
  double total = 0.0;
  std::size_t count = 0;
  const auto tokens = encode_tokens(m, images);
  for (std::size_t i = 0; i < images.size(); ++i) {
    RenderedImage rec = decode_tokens(tokens[i], m);
    for (std::size_t j = 0; j < rec.pixels.size(); ++j) {
      const double d = rec.pixels[j] - images[i].pixels[j];
      total += d * d;
    }
    count += rec.pixels.size();
  }
  return total / static_cast<double>(count);
}

void write_token_cache(const std::filesystem::path& path, std::size_t num_tokens,
                       std::size_t codebook_size, const std::vector<std::vector<int>>& rows) {
  HMT_CHECK(codebook_size <= 65535, "token cache: codebook too large");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  auto put32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  out.write(kTokenMagic, 8);
  put32(kTokenVersion);
  put32(static_cast<std::uint32_t>(num_tokens));
  put32(static_cast<std::uint32_t>(codebook_size));
  const std::uint64_t count = rows.size();
  out.write(reinterpret_cast<const char*>(&count), 8);
  for (const auto& r : rows) {
    HMT_CHECK(r.size() == num_tokens, "token cache: row length differs from V");
    for (int t : r) {
      HMT_CHECK(t >= 0 && static_cast<std::size_t>(t) < codebook_size, "token cache: code out of range");
      const std::uint16_t v = static_cast<std::uint16_t>(t);
      out.write(reinterpret_cast<const char*>(&v), 2);
    }
  }
}

TokenCache read_token_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kTokenMagic, 8) != 0) throw ConfigError(path.string() + " is not a token cache");
  auto get32 = [&] {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  const std::uint32_t version = get32();
  if (version != kTokenVersion) {
    throw ConfigError("token cache version " + std::to_string(version) + " is not supported");
  }
  TokenCache c;
  c.num_tokens = get32();
  c.codebook_size = get32();
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 8);
  if (!in) throw ConfigError(path.string() + ": truncated header");
  c.rows.assign(count, std::vector<int>(c.num_tokens));
  for (auto& r : c.rows) {
    for (int& t : r) {
      std::uint16_t v = 0;
      in.read(reinterpret_cast<char*>(&v), 2);
      t = v;
    }
  }
  if (!in) throw ConfigError(path.string() + ": truncated token data");
  return c;
}

}  // namespace hmt

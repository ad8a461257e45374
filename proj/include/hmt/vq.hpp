#pragma once

// Discrete visual encoder: a strided convolutional stack, nearest-code
// quantization against a learned codebook, and a mirrored image decoder used
// for the reconstruction objective.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "hmt/params.hpp"
#include "hmt/tensor.hpp"
#include "hmt/world.hpp"

namespace hmt {

struct VqConfig {
  std::size_t image_size = 32;
  std::size_t stages = 3;     // each halves the grid side
  std::size_t channels = 32;  // hidden width of the conv stack
  std::size_t code_dim = 16;  // d
  std::size_t codebook_size = 64;  // K
  double beta = 0.25;

  std::size_t grid_side() const;
  std::size_t num_tokens() const { return grid_side() * grid_side(); }  // V
};

// Throws ConfigError when the image size is not divisible by 2^stages or the
// codebook is degenerate.
void validate(const VqConfig& cfg);

struct VqModel {
  VqConfig cfg;
  std::vector<Tensor> enc_w, enc_b;  // stage s: [4 * c_in, c_out], [c_out]
  std::vector<Tensor> dec_w, dec_b;  // stage s: [c_in, 4 * c_out], [4 * c_out]
  Tensor codebook;                   // [K, d]

  static VqModel init(const VqConfig& cfg, std::uint64_t seed);
  ParamList params() const;
  // Encoder and decoder weights only; the codebook is listed separately.
  ParamList network_params() const;
};

// Packs images into a [B, H, W, 3] tensor.
Tensor image_batch(const std::vector<const RenderedImage*>& images);

// [B, H, W, 3] -> [B * V, d]; rows are raster order within each image.
Tensor encode_features(const Tensor& images, const VqModel& m);
Tensor encode_features(const RenderedImage& image, const VqModel& m);

// Index of the nearest codebook row for every feature row; ties go to the
// smallest index. Codes are 0-based.
std::vector<int> quantize(const Tensor& features, const Tensor& codebook);

Tensor embed_tokens(std::span<const int> tokens, const Tensor& codebook);

// [B * V, d] -> [B, H, W, 3], unclamped.
Tensor decode_image(const Tensor& features, const VqModel& m);
// Clamped to [0, 1] for evaluation.
RenderedImage decode_tokens(std::span<const int> tokens, const VqModel& m);

struct VqLoss {
  Tensor total;
  Tensor recon;     // mean squared reconstruction error
  Tensor codebook;  // mean ||sg(c) - e_z||^2
  Tensor commit;    // beta * mean ||c - sg(e_z)||^2
  std::vector<int> tokens;
  Tensor sg_features;  // detached encoder output
  Tensor sg_codes;     // detached e_z
};

// With `frozen`, its tokens and stop-gradient values are reused instead of
// recomputed, which turns the loss into a smooth function for gradcheck.
VqLoss vq_losses(const Tensor& images, const VqModel& m, const VqLoss* frozen = nullptr);

// Fraction of the K codes used by a token set, and the per-code histogram.
struct CodeUsage {
  std::vector<std::size_t> histogram;
  double fraction = 0.0;
};
CodeUsage code_usage(const std::vector<int>& tokens, std::size_t codebook_size);

struct VaeTrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 16;
  double lr = 2e-3;
  std::int64_t warmup = 100;
  std::uint64_t seed = 0;
  std::size_t log_every = 100;
  // Codes unused for this many steps are moved onto random current encoder
  // outputs; 0 disables.
  std::size_t reseed_every = 100;
};

struct VaeLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double recon = 0.0;
  double usage = 0.0;
};

struct VaeTrainResult {
  std::vector<VaeLogEntry> log;
  std::vector<double> loss_trace;  // total loss at every step
};

// Adam over vq_losses. Throws NumericError naming the step on a non-finite
// loss. The optional callback sees every logged entry.
VaeTrainResult train_vae(VqModel& m, const std::vector<RenderedImage>& images,
                         const VaeTrainConfig& tc,
                         const std::function<void(const VaeLogEntry&)>& on_log = {});

// Mean per-element squared error of the clamped hard-token reconstruction.
double reconstruction_mse(const VqModel& m, const std::vector<RenderedImage>& images);

std::vector<std::vector<int>> encode_tokens(const VqModel& m,
                                            const std::vector<RenderedImage>& images);

// Token cache: "HMTTOK01", u32 version, u32 V, u32 K, u64 count, then count
// rows of V u16 codes.
void write_token_cache(const std::filesystem::path& path, std::size_t num_tokens,
                       std::size_t codebook_size, const std::vector<std::vector<int>>& rows);
struct TokenCache {
  std::size_t num_tokens = 0;
  std::size_t codebook_size = 0;
  std::vector<std::vector<int>> rows;
};
TokenCache read_token_cache(const std::filesystem::path& path);

}  // namespace hmt

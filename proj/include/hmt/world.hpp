#pragma once

// Synthetic grounded translation world: scenes of coloured shapes on a 4x4
// grid, rendered to RGB images, described in an English-like source
// language and translated into a deterministic target language.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hmt/rng.hpp"

namespace hmt {

enum class ObjShape { kCircle, kSquare, kTriangle };
enum class Color { kRed, kGreen, kBlue };
enum class Relation { kLeftOf, kAbove };

inline constexpr int kGridSide = 4;
inline constexpr int kMaxObjects = 3;

struct SceneObject {
  ObjShape shape = ObjShape::kCircle;
  Color color = Color::kRed;
  int row = 0;
  int col = 0;

  bool operator==(const SceneObject&) const = default;
};

// Objects are listed in raster order of their cells; relations[i] links
// objects[i] and objects[i + 1].
struct SceneSpec {
  std::vector<SceneObject> objects;
  std::vector<Relation> relations;

  bool operator==(const SceneSpec&) const = default;
};

// Empty string when valid, otherwise the first violated constraint.
std::string validate_scene(const SceneSpec& scene);

struct RenderedImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // H x W x 3, row-major, values in [0, 1]

  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

// Word index range [begin, end) covering one object's colour and shape words.
using EntitySpan = std::pair<std::size_t, std::size_t>;

struct Sentence {
  std::vector<std::string> words;
  std::vector<EntitySpan> spans;
};

struct GroundedSample {
  SceneSpec scene;
  std::vector<std::string> source;
  std::vector<std::string> target;
  std::vector<EntitySpan> spans;
  RenderedImage image;
};

// Uniform over all valid scenes (every layout and attribute assignment
// equally likely).
SceneSpec sample_scene(Rng& rng);

// image_size must be a multiple of the grid side.
RenderedImage render(const SceneSpec& scene, std::size_t image_size = 32);

Sentence describe_source(const SceneSpec& scene);
std::vector<std::string> translate_gold(const SceneSpec& scene);

std::string_view color_word(Color c);
std::string_view shape_word(ObjShape s);
std::string_view relation_word(Relation r);

struct Corpus {
  std::vector<GroundedSample> train;
  std::vector<GroundedSample> valid;
  std::vector<GroundedSample> test;
};

// n >= 10 samples split 80/10/10; samples sharing a source sentence always
// land in the same split.
Corpus generate_corpus(std::size_t n, std::uint64_t seed, std::size_t image_size = 32);

// Words after the first k become the mask word; length is preserved.
std::vector<std::string> mask_progressive(const std::vector<std::string>& words, std::size_t k);
// Each span is masked independently with probability p.
std::vector<std::string> mask_entities(const std::vector<std::string>& words,
                                       const std::vector<EntitySpan>& spans, double p, Rng& rng);

// ---- corpus files ----
// Image file: "HMTIMG01", u32 height, u32 width, u32 channels, then float32
// pixels, little-endian.
void write_image(const std::filesystem::path& path, const RenderedImage& image);
RenderedImage read_image(const std::filesystem::path& path);

std::string format_spans(const std::vector<EntitySpan>& spans);
std::vector<EntitySpan> parse_spans(const std::string& line);

// <dir>/<split>.{src,tgt,spans,manifest} and <dir>/images/<split>_NNNNNN.img
void export_corpus(const std::filesystem::path& dir, const Corpus& corpus);

struct SplitFiles {
  std::vector<std::string> source;
  std::vector<std::string> target;
  std::vector<std::vector<EntitySpan>> spans;  // empty when no spans file
  std::vector<RenderedImage> images;           // manifest order
};
SplitFiles load_split(const std::filesystem::path& dir, const std::string& split, bool with_images);

}  // namespace hmt

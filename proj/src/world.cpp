#include "hmt/world.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "hmt/error.hpp"
#include "hmt/text.hpp"

namespace hmt {

namespace {

struct Layout {
  std::vector<std::pair<int, int>> cells;
  std::vector<Relation> relations;
};

bool relation_holds(Relation r, const std::pair<int, int>& a, const std::pair<int, int>& b) {
  return r == Relation::kLeftOf ? a.second < b.second : a.first < b.first;
}

// All valid layouts grouped by object count, in a fixed enumeration order.
const std::array<std::vector<Layout>, kMaxObjects + 1>& layouts() {
  static const auto table = [] {
    std::array<std::vector<Layout>, kMaxObjects + 1> t;
    const int cells = kGridSide * kGridSide;
    auto cell = [](int i) { return std::pair<int, int>{i / kGridSide, i % kGridSide}; };
    std::vector<int> chosen;
    auto rec = [&](auto&& self, int start, std::size_t n) -> void {
      if (chosen.size() == n) {
        std::vector<Layout> partial{Layout{}};
        for (int i : chosen) partial[0].cells.push_back(cell(i));
        for (std::size_t k = 0; k + 1 < n; ++k) {
          std::vector<Layout> next;
          for (const auto& l : partial) {
            for (Relation r : {Relation::kLeftOf, Relation::kAbove}) {
              if (relation_holds(r, l.cells[k], l.cells[k + 1])) {
                Layout m = l;
                m.relations.push_back(r);
                next.push_back(std::move(m));
              }
            }
          }
          partial = std::move(next);
        }
        for (auto& l : partial) t[n].push_back(std::move(l));
        return;
      }
      for (int i = start; i < cells; ++i) {
        chosen.push_back(i);
        self(self, i + 1, n);
        chosen.pop_back();
      }
    };
    for (std::size_t n = 1; n <= kMaxObjects; ++n) rec(rec, 0, n);
    return t;
  }();
  return table;
}

constexpr std::array<std::string_view, 3> kShapeNounStem{"rond", "kadr", "trig"};
constexpr std::array<std::string_view, 3> kColorNounInfix{"ir", "ov", "ul"};
constexpr std::array<std::string_view, 3> kColorAdjStem{"rub", "verd", "blau"};
constexpr std::array<std::string_view, 3> kShapeGender{"a", "o", "e"};

std::array<double, 3> rgb(Color c) {
  switch (c) {
    case Color::kRed: return {1.0, 0.0, 0.0};
    case Color::kGreen: return {0.0, 1.0, 0.0};
    case Color::kBlue: return {0.0, 0.0, 1.0};
  }
  return {0.0, 0.0, 0.0};
}

bool inside(ObjShape s, double u, double v) {
  switch (s) {
    case ObjShape::kCircle:
      return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.375 * 0.375;
    case ObjShape::kSquare:
      return u >= 0.125 && u <= 0.875 && v >= 0.125 && v <= 0.875;
    case ObjShape::kTriangle:
      return v >= 0.125 && v <= 0.875 && std::abs(u - 0.5) <= (v - 0.125) / 0.75 * 0.375;
  }
  return false;
}

}  // namespace

std::string_view color_word(Color c) {
  static constexpr std::array<std::string_view, 3> w{"red", "green", "blue"};
  return w[static_cast<int>(c)];
}

std::string_view shape_word(ObjShape s) {
  static constexpr std::array<std::string_view, 3> w{"circle", "square", "triangle"};
  return w[static_cast<int>(s)];
}

std::string_view relation_word(Relation r) {
  return r == Relation::kLeftOf ? "left-of" : "above";
}

std::string validate_scene(const SceneSpec& s) {
  const std::size_t n = s.objects.size();
  if (n < 1 || n > kMaxObjects) return "scene must hold 1 to 3 objects";
  if (s.relations.size() != n - 1) return "scene needs one relation per consecutive pair";
  for (std::size_t i = 0; i < n; ++i) {
    const auto& o = s.objects[i];
    if (o.row < 0 || o.row >= kGridSide || o.col < 0 || o.col >= kGridSide) return "cell off grid";
    if (i > 0) {
      const auto& p = s.objects[i - 1];
      if (p.row * kGridSide + p.col >= o.row * kGridSide + o.col) {
        return "objects must occupy distinct cells in raster order";
      }
      if (!relation_holds(s.relations[i - 1], {p.row, p.col}, {o.row, o.col})) {
        return "relation inconsistent with cell coordinates";
      }
    }
  }
  return {};
}

SceneSpec sample_scene(Rng& rng) {
  const auto& table = layouts();
  std::array<std::uint64_t, kMaxObjects + 1> weight{};
  std::uint64_t total = 0;
  for (std::size_t n = 1; n <= kMaxObjects; ++n) {
    std::uint64_t attrs = 1;
    for (std::size_t i = 0; i < n; ++i) attrs *= 9;
    weight[n] = table[n].size() * attrs;
    total += weight[n];
  }
  std::uint64_t pick = rng.below(total);
  std::size_t n = 1;
  while (pick >= weight[n]) pick -= weight[n++];
  const std::uint64_t layouts_n = table[n].size();
  const Layout& layout = table[n][pick % layouts_n];
  std::uint64_t attrs = pick / layouts_n;

  SceneSpec scene;
  for (std::size_t i = 0; i < n; ++i) {
    const int a = static_cast<int>(attrs % 9);
    attrs /= 9;
    scene.objects.push_back({static_cast<ObjShape>(a / 3), static_cast<Color>(a % 3),
                             layout.cells[i].first, layout.cells[i].second});
  }
  scene.relations = layout.relations;
  return scene;
}

RenderedImage render(const SceneSpec& scene, std::size_t image_size) {
  HMT_CHECK(validate_scene(scene).empty(), "render: " + validate_scene(scene));
  HMT_CHECK(image_size >= kGridSide && image_size % kGridSide == 0,
            "render: image size must be a positive multiple of the grid side");
  RenderedImage img{image_size, image_size, std::vector<double>(image_size * image_size * 3, 1.0)};
  const std::size_t cell = image_size / kGridSide;
  for (const auto& o : scene.objects) {
    const auto color = rgb(o.color);
    for (std::size_t dy = 0; dy < cell; ++dy) {
      for (std::size_t dx = 0; dx < cell; ++dx) {
        const double u = (static_cast<double>(dx) + 0.5) / static_cast<double>(cell);
        const double v = (static_cast<double>(dy) + 0.5) / static_cast<double>(cell);
        if (!inside(o.shape, u, v)) continue;
        const std::size_t y = o.row * cell + dy, x = o.col * cell + dx;
        for (int c = 0; c < 3; ++c) img.pixels[(y * image_size + x) * 3 + c] = color[c];
      }
    }
  }
  return img;
}

Sentence describe_source(const SceneSpec& scene) {
  Sentence s;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (i > 0) s.words.emplace_back(relation_word(scene.relations[i - 1]));
    const auto& o = scene.objects[i];
    s.words.emplace_back("a");
    s.spans.emplace_back(s.words.size(), s.words.size() + 2);
    s.words.emplace_back(color_word(o.color));
    s.words.emplace_back(shape_word(o.shape));
  }
  return s;
}

std::vector<std::string> translate_gold(const SceneSpec& scene) {
  // Objects are listed last-to-first, so each relation is inverted.
  std::vector<std::string> out;
  const std::size_t n = scene.objects.size();
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = n - 1 - k;
    if (k > 0) out.emplace_back(scene.relations[i] == Relation::kLeftOf ? "dex" : "sub");
    const auto& o = scene.objects[i];
    const int sh = static_cast<int>(o.shape), co = static_cast<int>(o.color);
    out.emplace_back("el");
    out.push_back(std::string(kShapeNounStem[sh]) + std::string(kColorNounInfix[co]));
    out.push_back(std::string(kColorAdjStem[co]) + std::string(kShapeGender[sh]));
  }
  return out;
}

Corpus generate_corpus(std::size_t n, std::uint64_t seed, std::size_t image_size) {
  if (n < 10) throw ConfigError("generate_corpus: need at least 10 samples");
  Rng rng = Rng::stream(seed, "scenes");
  std::vector<GroundedSample> all;
  all.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    GroundedSample g;
    g.scene = sample_scene(rng);
    Sentence src = describe_source(g.scene);
    g.source = std::move(src.words);
    g.spans = std::move(src.spans);
    g.target = translate_gold(g.scene);
    g.image = render(g.scene, image_size);
    all.push_back(std::move(g));
  }

  // Group by source sentence, visit groups in hash order and fill the test
  // and validation splits up to their quotas.
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[join_words(all[i].source)].push_back(i);
  std::vector<std::pair<std::uint64_t, const std::vector<std::size_t>*>> order;
  for (const auto& [sentence, members] : groups) {
    order.emplace_back(splitmix64(fnv1a64(sentence) ^ seed), &members);
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  const std::size_t quota = (n + 5) / 10;
  Corpus c;
  std::vector<char> split(n, 0);
  std::size_t n_test = 0, n_valid = 0;
  for (const auto& [h, members] : order) {
    char target = 0;
    if (n_test + members->size() <= quota) {
      target = 2;
      n_test += members->size();
    } else if (n_valid + members->size() <= quota) {
      target = 1;
      n_valid += members->size();
    }
    for (std::size_t i : *members) split[i] = target;
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = split[i] == 2 ? c.test : split[i] == 1 ? c.valid : c.train;
    dst.push_back(std::move(all[i]));
  }
  return c;
}

std::vector<std::string> mask_progressive(const std::vector<std::string>& words, std::size_t k) {
  std::vector<std::string> out = words;
  for (std::size_t i = k; i < out.size(); ++i) out[i] = kMaskWord;
  return out;
}

std::vector<std::string> mask_entities(const std::vector<std::string>& words,
                                       const std::vector<EntitySpan>& spans, double p, Rng& rng) {
  HMT_CHECK(p >= 0.0 && p <= 1.0, "mask_entities: p must lie in [0, 1]");
  std::vector<std::string> out = words;
  for (const auto& [b, e] : spans) {
    HMT_CHECK(b < e && e <= words.size(), "mask_entities: span outside sentence");
    // Draw for every span so the stream position does not depend on p.
    const bool hit = rng.uniform() < p;
    if (!hit) continue;
    for (std::size_t i = b; i < e; ++i) out[i] = kMaskWord;
  }
  return out;
}

// ---- files ------------------------------------------------------------------

namespace {

constexpr char kImageMagic[8] = {'H', 'M', 'T', 'I', 'M', 'G', '0', '1'};

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void write_image(const std::filesystem::path& path, const RenderedImage& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  os.write(kImageMagic, sizeof kImageMagic);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(image.height));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(image.width));
  put_le<std::uint32_t>(os, 3);
  for (double v : image.pixels) put_le<float>(os, static_cast<float>(v));
}

RenderedImage read_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kImageMagic, sizeof magic) != 0) {
    throw ConfigError("not an image file: " + path.string());
  }
  RenderedImage img;
  img.height = get_le<std::uint32_t>(is);
  img.width = get_le<std::uint32_t>(is);
  const auto channels = get_le<std::uint32_t>(is);
  if (channels != 3) throw ConfigError("expected 3 channels in " + path.string());
  img.pixels.resize(img.height * img.width * 3);
  for (double& v : img.pixels) v = get_le<float>(is);
  if (!is) throw ConfigError("truncated image file " + path.string());
  return img;
}

std::string format_spans(const std::vector<EntitySpan>& spans) {
  std::string out;
  for (const auto& [b, e] : spans) {
    if (!out.empty()) out += ' ';
    out += std::to_string(b) + "-" + std::to_string(e);
  }
  return out;
}

std::vector<EntitySpan> parse_spans(const std::string& line) {
  std::vector<EntitySpan> spans;
  for (const auto& tok : split_words(line)) {
    const auto dash = tok.find('-');
    if (dash == std::string::npos) throw ConfigError("malformed span '" + tok + "'");
    spans.emplace_back(std::stoul(tok.substr(0, dash)), std::stoul(tok.substr(dash + 1)));
  }
  return spans;
}

void export_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir / "images");
  auto dump = [&](const std::string& name, const std::vector<GroundedSample>& samples) {
    std::vector<std::string> src, tgt, spans, manifest;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      src.push_back(join_words(s.source));
      tgt.push_back(join_words(s.target));
      spans.push_back(format_spans(s.spans));
      char file[64];
      std::snprintf(file, sizeof file, "%s_%06zu.img", name.c_str(), i);
      manifest.push_back(std::to_string(i) + " images/" + file);
      write_image(dir / "images" / file, s.image);
    }
    write_lines(dir / (name + ".src"), src);
    write_lines(dir / (name + ".tgt"), tgt);
    write_lines(dir / (name + ".spans"), spans);
    write_lines(dir / (name + ".manifest"), manifest);
  };
  dump("train", corpus.train);
  dump("valid", corpus.valid);
  dump("test", corpus.test);
}

SplitFiles load_split(const std::filesystem::path& dir, const std::string& split, bool with_images) {
  SplitFiles f;
  f.source = read_lines(dir / (split + ".src"));
  f.target = read_lines(dir / (split + ".tgt"));
  if (f.source.size() != f.target.size()) {
    throw ConfigError("source/target line counts differ for split " + split);
  }
  if (std::filesystem::exists(dir / (split + ".spans"))) {
    for (const auto& l : read_lines(dir / (split + ".spans"))) f.spans.push_back(parse_spans(l));
  }
  if (with_images) {
    const auto manifest = read_lines(dir / (split + ".manifest"));
    if (manifest.size() != f.source.size()) throw ConfigError("manifest does not cover split " + split);
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      std::istringstream is(manifest[i]);
      std::size_t line = 0;
      std::string file;
      is >> line >> file;
      if (!is || line != i) throw ConfigError("malformed manifest line " + std::to_string(i));
      f.images.push_back(read_image(dir / file));
    }
  }
  return f;
}

}  // namespace hmt

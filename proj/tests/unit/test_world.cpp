#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "hmt/error.hpp"
#include "hmt/text.hpp"
#include "hmt/world.hpp"

using namespace hmt;

namespace {

// Attribute/relation signature of a scene, ignoring cells.
std::string signature(const SceneSpec& s) {
  std::string out;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    out += std::to_string(static_cast<int>(s.objects[i].color)) +
           std::to_string(static_cast<int>(s.objects[i].shape));
    if (i + 1 < s.objects.size()) out += s.relations[i] == Relation::kLeftOf ? "L" : "A";
  }
  return out;
}

// Image-reading oracle: recovers (colour, shape) per occupied cell in raster
// order from pixels alone.
std::vector<std::pair<Color, ObjShape>> read_cells(const RenderedImage& img) {
  std::vector<std::pair<Color, ObjShape>> out;
  const std::size_t cell = img.width / kGridSide;
  for (int r = 0; r < kGridSide; ++r) {
    for (int c = 0; c < kGridSide; ++c) {
      std::size_t count = 0;
      int channel = -1;
      bool top_corner = false, top_mid = false;
      for (std::size_t dy = 0; dy < cell; ++dy) {
        for (std::size_t dx = 0; dx < cell; ++dx) {
          const std::size_t y = r * cell + dy, x = c * cell + dx;
          const double R = img.at(y, x, 0), G = img.at(y, x, 1), B = img.at(y, x, 2);
          if (R + G + B < 2.5) {
            ++count;
            channel = R > 0.5 ? 0 : G > 0.5 ? 1 : 2;
            if (dy == 1 && dx == 1) top_corner = true;
            if (dy == 1 && dx == cell / 2) top_mid = true;
          }
        }
      }
      if (count == 0) continue;
      ObjShape s = top_corner ? ObjShape::kSquare : top_mid ? ObjShape::kCircle : ObjShape::kTriangle;
      out.emplace_back(static_cast<Color>(channel), s);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("sample_scene is deterministic and valid") {
  Rng a(42), b(42);
  for (int i = 0; i < 50; ++i) CHECK(sample_scene(a) == sample_scene(b));
}

TEST_CASE("10k scenes: full attribute coverage and zero relation violations") {
  Rng rng(1);
  std::set<std::pair<int, int>> combos;
  std::size_t violations = 0;
  std::map<std::size_t, std::size_t> by_count;
  for (int i = 0; i < 10000; ++i) {
    SceneSpec s = sample_scene(rng);
    by_count[s.objects.size()]++;
    for (const auto& o : s.objects) combos.emplace(static_cast<int>(o.color), static_cast<int>(o.shape));
    // Independent checker: recompute every relation from coordinates.
    for (std::size_t k = 0; k + 1 < s.objects.size(); ++k) {
      const auto& p = s.objects[k];
      const auto& q = s.objects[k + 1];
      const bool ok = s.relations[k] == Relation::kLeftOf ? p.col < q.col : p.row < q.row;
      violations += !ok;
      violations += (p.row == q.row && p.col == q.col);
    }
  }
  CHECK(combos.size() == 9);
  CHECK(violations == 0);
  // Uniform over scenes: three-object scenes dominate.
  CHECK(by_count[3] > by_count[2]);
}

TEST_CASE("validate_scene rejects bad scenes") {
  SceneSpec s{{{ObjShape::kCircle, Color::kRed, 0, 2}, {ObjShape::kSquare, Color::kBlue, 0, 1}},
              {Relation::kLeftOf}};
  CHECK_FALSE(validate_scene(s).empty());
  s.objects[1].col = 3;
  CHECK(validate_scene(s).empty());
  s.relations[0] = Relation::kAbove;
  CHECK_FALSE(validate_scene(s).empty());
  CHECK_THROWS_AS(render(s), ContractViolation);
}

TEST_CASE("render") {
  SceneSpec one{{{ObjShape::kCircle, Color::kRed, 1, 2}}, {}};
  RenderedImage img = render(one);
  CHECK(img.height == 32);
  CHECK(img.width == 32);
  bool red = false;
  for (std::size_t y = 0; y < 32; ++y) {
    for (std::size_t x = 0; x < 32; ++x) {
      const bool in_cell = y / 8 == 1 && x / 8 == 2;
      if (!in_cell) {
        CHECK(img.at(y, x, 0) == 1.0);
        CHECK(img.at(y, x, 1) == 1.0);
        CHECK(img.at(y, x, 2) == 1.0);
      }
      if (img.at(y, x, 0) > 0.9 && img.at(y, x, 1) < 0.1 && img.at(y, x, 2) < 0.1) red = true;
    }
  }
  CHECK(red);
  CHECK(render(one).pixels == img.pixels);
  for (double v : img.pixels) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("describe_source") {
  SceneSpec one{{{ObjShape::kTriangle, Color::kGreen, 0, 0}}, {}};
  Sentence s = describe_source(one);
  CHECK(join_words(s.words) == "a green triangle");
  CHECK(s.spans == std::vector<EntitySpan>{{1, 3}});

  SceneSpec two{{{ObjShape::kCircle, Color::kRed, 0, 0}, {ObjShape::kSquare, Color::kBlue, 0, 3}},
                {Relation::kLeftOf}};
  Sentence t = describe_source(two);
  CHECK(join_words(t.words) == "a red circle left-of a blue square");
  CHECK(std::count(t.words.begin(), t.words.end(), "left-of") +
            std::count(t.words.begin(), t.words.end(), "above") ==
        1);
}

TEST_CASE("describe is injective up to cell layout") {
  Rng rng(8);
  std::map<std::string, std::string> seen;
  for (int i = 0; i < 10000; ++i) {
    SceneSpec s = sample_scene(rng);
    const std::string sent = join_words(describe_source(s).words);
    auto [it, fresh] = seen.emplace(sent, signature(s));
    if (!fresh) CHECK(it->second == signature(s));
  }
}

TEST_CASE("entity spans cover every colour and shape word exactly once") {
  Rng rng(12);
  for (int i = 0; i < 500; ++i) {
    Sentence s = describe_source(sample_scene(rng));
    std::vector<int> cover(s.words.size(), 0);
    for (auto [b, e] : s.spans) {
      for (std::size_t k = b; k < e; ++k) cover[k]++;
    }
    for (std::size_t k = 0; k < s.words.size(); ++k) {
      const auto& w = s.words[k];
      const bool entity = w == "red" || w == "green" || w == "blue" || w == "circle" ||
                          w == "square" || w == "triangle";
      CHECK(cover[k] == (entity ? 1 : 0));
    }
  }
}

TEST_CASE("translate_gold properties over the template space") {
  SceneSpec base{{{ObjShape::kCircle, Color::kRed, 0, 0}, {ObjShape::kSquare, Color::kBlue, 1, 0}},
                 {Relation::kAbove}};
  CHECK(translate_gold(base) == translate_gold(base));
  CHECK(join_words(translate_gold(base)) == "el kadrul blauo sub el rondir ruba");

  // Exhaustive over attribute assignments and relations of the fixed layouts.
  std::set<std::string> nouns;
  for (int n = 1; n <= 3; ++n) {
    SceneSpec s;
    const int cells[3][2] = {{0, 0}, {1, 1}, {2, 2}};  // both relations hold
    for (int i = 0; i < n; ++i) s.objects.push_back({ObjShape::kCircle, Color::kRed, cells[i][0], cells[i][1]});
    int attr_combos = 1;
    for (int i = 0; i < n; ++i) attr_combos *= 9;
    for (int rel = 0; rel < (1 << (n - 1)); ++rel) {
      s.relations.clear();
      for (int i = 0; i + 1 < n; ++i) s.relations.push_back((rel >> i) & 1 ? Relation::kAbove : Relation::kLeftOf);
      for (int a = 0; a < attr_combos; ++a) {
        int code = a;
        for (int i = 0; i < n; ++i) {
          s.objects[i].shape = static_cast<ObjShape>(code % 9 / 3);
          s.objects[i].color = static_cast<Color>(code % 9 % 3);
          code /= 9;
        }
        REQUIRE(validate_scene(s).empty());
        const auto src = describe_source(s).words;
        const auto tgt = translate_gold(s);
        CHECK(tgt.size() + 1 >= src.size());
        CHECK(tgt.size() <= src.size() + 2);
        if (n == 1) nouns.insert(tgt[1]);
        // Changing one colour changes the target.
        SceneSpec other = s;
        other.objects[0].color = static_cast<Color>((static_cast<int>(s.objects[0].color) + 1) % 3);
        CHECK(translate_gold(other) != tgt);
      }
    }
  }
  CHECK(nouns.size() == 9);
}

TEST_CASE("image plus fully masked source determines the target") {
  // Every scene of the template space: mask all entity words, then rebuild
  // the scene from the image (cells in raster order) and the remaining words.
  Rng rng(3);
  for (int i = 0; i < 3000; ++i) {
    SceneSpec s = sample_scene(rng);
    Sentence src = describe_source(s);
    Rng mask_rng(i);
    auto masked = mask_entities(src.words, src.spans, 1.0, mask_rng);
    auto cells = read_cells(render(s));
    REQUIRE(cells.size() == s.objects.size());
    SceneSpec rebuilt;
    for (std::size_t k = 0; k < cells.size(); ++k) {
      rebuilt.objects.push_back({cells[k].second, cells[k].first, 0, static_cast<int>(k)});
    }
    for (const auto& w : masked) {
      if (w == "left-of") rebuilt.relations.push_back(Relation::kLeftOf);
      if (w == "above") rebuilt.relations.push_back(Relation::kAbove);
    }
    CHECK(translate_gold(rebuilt) == translate_gold(s));
  }
}

TEST_CASE("generate_corpus splits and determinism") {
  Corpus c = generate_corpus(1000, 7);
  CHECK(c.train.size() == 800);
  CHECK(c.valid.size() == 100);
  CHECK(c.test.size() == 100);
  std::set<std::string> train_src;
  for (const auto& s : c.train) train_src.insert(join_words(s.source));
  for (const auto& s : c.test) CHECK_FALSE(train_src.contains(join_words(s.source)));
  for (const auto& s : c.valid) CHECK_FALSE(train_src.contains(join_words(s.source)));
  Corpus d = generate_corpus(1000, 7);
  for (std::size_t i = 0; i < c.test.size(); ++i) {
    CHECK(c.test[i].source == d.test[i].source);
    CHECK(c.test[i].image.pixels == d.test[i].image.pixels);
  }
  CHECK_THROWS_AS(generate_corpus(5, 1), ConfigError);
}

TEST_CASE("progressive masking") {
  std::vector<std::string> w{"a", "red", "circle", "above", "a"};
  CHECK(mask_progressive(w, 5) == w);
  CHECK(mask_progressive(w, 9) == w);
  auto all = mask_progressive(w, 0);
  CHECK(std::all_of(all.begin(), all.end(), [](const auto& x) { return x == kMaskWord; }));
  auto two = mask_progressive(w, 2);
  CHECK(std::count(two.begin(), two.end(), std::string(kMaskWord)) == 3);
  CHECK(two.size() == w.size());
}

TEST_CASE("entity masking") {
  Sentence s = describe_source(
      {{{ObjShape::kCircle, Color::kRed, 0, 0}, {ObjShape::kSquare, Color::kBlue, 0, 3}}, {Relation::kLeftOf}});
  Rng rng(1);
  CHECK(mask_entities(s.words, s.spans, 0.0, rng) == s.words);
  auto full = mask_entities(s.words, s.spans, 1.0, rng);
  CHECK(join_words(full) == "a <v> <v> left-of a <v> <v>");

  // Monte-Carlo frequency at p = 0.5.
  std::size_t masked = 0, total = 0;
  for (int t = 0; t < 10000; ++t) {
    auto m = mask_entities(s.words, s.spans, 0.5, rng);
    for (auto [b, e] : s.spans) {
      masked += m[b] == kMaskWord;
      ++total;
    }
    CHECK(m[0] == "a");
    CHECK(m[3] == "left-of");
  }
  CHECK(std::abs(static_cast<double>(masked) / total - 0.5) < 0.02);
}

TEST_CASE("corpus export and reload") {
  Corpus c = generate_corpus(40, 2);
  auto dir = std::filesystem::temp_directory_path() / "hmt_world_export";
  std::filesystem::remove_all(dir);
  export_corpus(dir, c);
  SplitFiles f = load_split(dir, "train", true);
  REQUIRE(f.source.size() == c.train.size());
  CHECK(f.source[0] == join_words(c.train[0].source));
  CHECK(f.spans[0] == c.train[0].spans);
  CHECK(f.images[3].pixels == c.train[3].image.pixels);
  CHECK_THROWS_AS(load_split(dir, "nope", false), ConfigError);
  std::filesystem::remove_all(dir);
}

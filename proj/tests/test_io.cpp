#include <filesystem>

#include "doctest.h"
#include "metabias/data_io.hpp"
#include "metabias/gradcheck.hpp"

using namespace metabias;

namespace fs = std::filesystem;

TEST_CASE("png round trip for grayscale and rgb") {
  Rng rng(81);
  // grayscale
  {
    Tensor img = random_tensor(rng, {1, 32, 32}, 0, 1);
    auto bytes = encode_png(img.data().data(), 1, 32, 32);
    GrayImage back = decode_png_gray(bytes);
    REQUIRE(back.width == 32);
    REQUIRE(back.height == 32);
    for (int i = 0; i < 32 * 32; ++i)
      CHECK(back.pixels[static_cast<size_t>(i)] ==
            doctest::Approx(img.value(i)).epsilon(0.01));  // 8-bit rounding
  }
  // rgb collapses to luminance
  {
    std::vector<double> planes(3 * 4 * 4, 0.0);
    for (int i = 0; i < 16; ++i) planes[static_cast<size_t>(i)] = 1.0;  // red
    auto bytes = encode_png(planes.data(), 3, 4, 4);
    GrayImage back = decode_png_gray(bytes);
    CHECK(back.pixels[0] == doctest::Approx(0.299).epsilon(0.02));
  }
}

TEST_CASE("png decoder rejects garbage") {
  std::vector<uint8_t> junk{1, 2, 3, 4, 5, 6, 7, 8, 9};
  CHECK_THROWS_AS(decode_png_gray(junk), DataError);
}

TEST_CASE("area resize preserves constant images and averages blocks") {
  GrayImage img;
  img.width = img.height = 105;
  img.pixels.assign(105 * 105, 0.25);
  GrayImage small = resize_area(img, 32, 32);
  REQUIRE(small.width == 32);
  for (double v : small.pixels) CHECK(v == doctest::Approx(0.25));

  GrayImage half;
  half.width = half.height = 4;
  half.pixels = {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  GrayImage two = resize_area(half, 2, 2);
  CHECK(two.at(0, 0) == doctest::Approx(1.0));
  CHECK(two.at(0, 1) == doctest::Approx(0.0));
  CHECK(two.at(1, 0) == doctest::Approx(0.0));
}

TEST_CASE("omniglot directory ingestion via written pngs") {
  fs::path root = fs::temp_directory_path() / "metabias_omniglot_test";
  fs::remove_all(root);
  // two alphabets, two characters each, 7 exemplars per character
  Rng rng(82);
  for (const char* alphabet : {"Alpha_A", "Alpha_B"})
    for (const char* ch : {"character01", "character02"}) {
      fs::path dir = root / alphabet / ch;
      fs::create_directories(dir);
      for (int e = 0; e < 7; ++e) {
        // white background with a dark blob, like scanned handwriting
        std::vector<double> img(105 * 105, 1.0);
        int cx = 30 + static_cast<int>(uniform_int(rng, 0, 40));
        int cy = 30 + static_cast<int>(uniform_int(rng, 0, 40));
        for (int y = cy - 8; y < cy + 8; ++y)
          for (int x = cx - 8; x < cx + 8; ++x)
            img[static_cast<size_t>(y) * 105 + x] = 0.0;
        write_png((dir / ("ex" + std::to_string(e) + ".png")).string(),
                  img.data(), 1, 105, 105);
      }
    }

  OmniglotData data = load_omniglot(root.string(),
                                    "Alpha_A\tancient\nAlpha_B\tasian\n");
  CHECK(data.background.characters.size() == 4);
  CHECK(data.background.characters[0].exemplars.size() == 7);
  // ink maps to 1, background to 0
  const Tensor& glyph = data.background.characters[0].exemplars[0];
  CHECK(glyph.shape() == Shape{1, 32, 32});
  double mx = 0, mn = 1;
  for (int64_t i = 0; i < glyph.numel(); ++i) {
    mx = std::max(mx, glyph.value(i));
    mn = std::min(mn, glyph.value(i));
  }
  CHECK(mx > 0.8);
  CHECK(mn < 0.1);

  auto ancient = data.background.pool(OmniglotSubset::Ancient);
  CHECK(ancient.size() == 2);

  fs::remove_all(root);
  CHECK_THROWS_AS(load_omniglot((root / "nope").string(), ""), DataError);
}

TEST_CASE("episode file round trip") {
  Rng rng(83);
  std::vector<Episode> episodes;
  ConceptFormula f = sample_concept(rng);
  episodes.push_back(concept_episode(f, 7, rng, Representation::Image));
  episodes.push_back(concept_episode(f, 5, rng, Representation::Image));

  fs::path path = fs::temp_directory_path() / "metabias_episodes.bin";
  write_episodes(path.string(), episodes);
  auto back = read_episodes(path.string());
  fs::remove(path);

  REQUIRE(back.size() == 2);
  CHECK(back[0].task == TaskKind::Concept);
  CHECK(back[0].repr == Representation::Image);
  CHECK(back[0].formula == episodes[0].formula);
  CHECK(back[0].support_y == episodes[0].support_y);
  CHECK(back[0].query_y == episodes[0].query_y);
  REQUIRE(back[0].support_x.shape() == episodes[0].support_x.shape());
  for (int64_t i = 0; i < back[0].support_x.numel(); ++i)
    REQUIRE(back[0].support_x.value(i) == episodes[0].support_x.value(i));

  // modular episodes carry the modulus through
  std::vector<Episode> mods{mod_episode(9, 20, rng, Representation::Bits)};
  write_episodes(path.string(), mods);
  auto mback = read_episodes(path.string());
  fs::remove(path);
  CHECK(mback[0].modulus == 9);
  CHECK(mback[0].label_kind == LabelKind::Regression);

  CHECK_THROWS_AS(read_episodes("/nonexistent/file.bin"), DataError);
}

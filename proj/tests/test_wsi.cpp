#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cmsk/rng.hpp"
#include "cmsk/wsi.hpp"

using namespace cmsk;
namespace fs = std::filesystem;

static SlideImage solid(const std::string& id, int64_t w, int64_t h, uint8_t r,
                        uint8_t g, uint8_t b) {
  SlideImage img;
  img.slide_id = id;
  img.width = w;
  img.height = h;
  img.pixels.resize(size_t(3 * w * h));
  for (int64_t i = 0; i < w * h; ++i) {
    img.pixels[size_t(3 * i)] = r;
    img.pixels[size_t(3 * i + 1)] = g;
    img.pixels[size_t(3 * i + 2)] = b;
  }
  return img;
}

static std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(bool(is));
  return {std::istreambuf_iterator<char>(is), {}};
}

TEST_CASE("tile counts for the documented slide sizes") {
  CHECK(tile_origins(5120, 5120, 512, 512).size() == 100);
  auto one = tile_origins(1023, 512, 512, 512);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == std::pair<int64_t, int64_t>{0, 0});
  CHECK(tile_origins(300, 300, 512, 512).empty());
  CHECK_THROWS_AS(tile_origins(100, 100, 0, 512), std::invalid_argument);
}

TEST_CASE("tile count matches the closed-form formula on random inputs") {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    int64_t w = rng.uniform_int(1, 400), h = rng.uniform_int(1, 400);
    int64_t window = rng.uniform_int(1, 120), stride = rng.uniform_int(1, 120);
    auto origins = tile_origins(w, h, window, stride);
    auto fit = [&](int64_t extent) {
      return extent >= window ? (extent - window) / stride + 1 : 0;
    };
    CHECK(int64_t(origins.size()) == fit(w) * fit(h));
    // row-major order and stride alignment
    for (size_t i = 0; i < origins.size(); ++i) {
      CHECK(origins[i].first % stride == 0);
      CHECK(origins[i].second % stride == 0);
      if (i > 0)
        CHECK(std::pair(origins[i - 1].second, origins[i - 1].first) <
              std::pair(origins[i].second, origins[i].first));
    }
  }
}

TEST_CASE("filter: all-white, mixed, and blood-red tiles") {
  int64_t win = 32;
  FilterParams fp;
  auto tile = solid("t", win, win, 255, 255, 255).pixels;
  CHECK(filter_tile(tile, win, fp) ==
        std::pair<bool, std::string>{false, "white"});

  // 49% white, 49% red, 2% other -> kept
  auto mixed = solid("t", 100, 100, 0, 0, 0).pixels;  // 100x100 = 10000 px
  for (int64_t i = 0; i < 4900; ++i)
    mixed[size_t(3 * i)] = mixed[size_t(3 * i + 1)] = mixed[size_t(3 * i + 2)] =
        250;
  for (int64_t i = 4900; i < 9800; ++i) {
    mixed[size_t(3 * i)] = 200;
    mixed[size_t(3 * i + 1)] = 30;
    mixed[size_t(3 * i + 2)] = 30;
  }
  CHECK(filter_tile(mixed, 100, fp) ==
        std::pair<bool, std::string>{true, "none"});

  auto blood = solid("t", win, win, 200, 30, 30).pixels;
  CHECK(filter_tile(blood, win, fp) ==
        std::pair<bool, std::string>{false, "red"});

  CHECK_THROWS_AS(filter_tile(tile, win + 1, fp), std::invalid_argument);
}

TEST_CASE("white threshold uses the minimum channel") {
  FilterParams fp;
  // one channel below 245 -> not white
  auto tile = solid("t", 8, 8, 255, 244, 255).pixels;
  CHECK(filter_tile(tile, 8, fp).first);
  auto tile2 = solid("t", 8, 8, 245, 245, 245).pixels;
  CHECK_FALSE(filter_tile(tile2, 8, fp).first);
}

TEST_CASE("ppm round trip is lossless; malformed files are rejected") {
  Rng rng(2);
  SlideImage img;
  img.slide_id = "rt";
  img.width = 37;
  img.height = 21;
  img.pixels.resize(size_t(3 * 37 * 21));
  for (auto& p : img.pixels) p = uint8_t(rng.uniform_int(0, 255));
  fs::create_directories("wsi_tmp");
  write_ppm(img, "wsi_tmp/rt.ppm");
  SlideImage back = read_ppm("wsi_tmp/rt.ppm", "rt");
  CHECK(back.width == 37);
  CHECK(back.height == 21);
  CHECK(back.pixels == img.pixels);

  std::ofstream("wsi_tmp/bad.ppm", std::ios::binary) << "P5\n4 4\n255\n";
  CHECK_THROWS_WITH_AS(read_ppm("wsi_tmp/bad.ppm"),
                       doctest::Contains("not a binary PPM"),
                       std::invalid_argument);
  std::ofstream("wsi_tmp/trunc.ppm", std::ios::binary) << "P6\n10 10\n255\nab";
  CHECK_THROWS_WITH_AS(read_ppm("wsi_tmp/trunc.ppm"),
                       doctest::Contains("truncated"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(read_ppm("wsi_tmp/missing.ppm"),
                       doctest::Contains("missing.ppm"), std::invalid_argument);
  fs::remove_all("wsi_tmp");
}

TEST_CASE("pipeline: planted blank quadrant tiles are rejected as white") {
  // 4x4 grid of 512 tiles; tiles on the main diagonal painted white
  SlideImage slide = solid("s1", 2048, 2048, 120, 80, 160);
  for (int q = 0; q < 4; ++q)
    for (int64_t y = 0; y < 512; ++y)
      for (int64_t x = 0; x < 512; ++x)
        for (int c = 0; c < 3; ++c)
          slide.pixels[size_t((((q * 512 + y) * 2048) + q * 512 + x) * 3 + c)] =
              255;

  fs::create_directories("wsi_run");
  auto records = run_pipeline(slide, "wsi_run");
  REQUIRE(records.size() == 16);
  int kept = 0, white = 0;
  for (auto& r : records) {
    if (r.kept) ++kept;
    if (r.reason == "white") {
      ++white;
      CHECK(r.x == r.y);  // the planted diagonal
    }
  }
  CHECK(kept == 12);
  CHECK(white == 4);

  // kept tiles exist on disk and reload losslessly
  SlideImage t = read_ppm("wsi_run/s1_512_0.ppm");
  CHECK(t.width == 512);
  CHECK(t.pixels == extract_tile(slide, 512, 0, 512));
  CHECK_FALSE(fs::exists("wsi_run/s1_0_0.ppm"));  // rejected tile not written

  // deterministic re-runs, serial or parallel
  std::string manifest = slurp("wsi_run/manifest.txt");
  run_pipeline(slide, "wsi_run");
  CHECK(slurp("wsi_run/manifest.txt") == manifest);
  run_pipeline(slide, "wsi_run", 512, 512, FilterParams{}, 4);
  CHECK(slurp("wsi_run/manifest.txt") == manifest);
  CHECK(manifest.substr(0, 10) == "s1 0 0 0 w");
  fs::remove_all("wsi_run");
}

TEST_CASE("pipeline: fully white slide keeps nothing, manifest complete") {
  SlideImage slide = solid("blank", 1024, 1024, 255, 255, 255);
  fs::create_directories("wsi_blank");
  auto records = run_pipeline(slide, "wsi_blank");
  CHECK(records.size() == 4);
  for (auto& r : records) {
    CHECK_FALSE(r.kept);
    CHECK(r.reason == "white");
  }
  int lines = 0;
  for (char c : slurp("wsi_blank/manifest.txt"))
    if (c == '\n') ++lines;
  CHECK(lines == 4);
  fs::remove_all("wsi_blank");
}

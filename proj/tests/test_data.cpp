#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <algorithm>
#include <filesystem>

#include "cmsk/data.hpp"
#include "cmsk/vote.hpp"

using namespace cmsk;

TEST_CASE("corpus split arithmetic and balance") {
  CorpusSpec spec;
  spec.per_class = 50;  // scaled-down: 4 x 50 = 200 images
  auto [train, test] = gen_patch_corpus(spec, 1);
  CHECK(train.images.size() == 160);
  CHECK(test.images.size() == 40);
  for (int c = 0; c < 4; ++c) {
    CHECK(std::count(train.labels.begin(), train.labels.end(), c) == 40);
    CHECK(std::count(test.labels.begin(), test.labels.end(), c) == 10);
  }
  CHECK(train.images[0].shape() == Shape{3, 64, 64});
  for (double v : train.images[0].data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("corpus generation is deterministic in the seed") {
  CorpusSpec spec;
  spec.per_class = 10;
  auto [tr1, te1] = gen_patch_corpus(spec, 42);
  auto [tr2, te2] = gen_patch_corpus(spec, 42);
  REQUIRE(tr1.images.size() == tr2.images.size());
  CHECK(tr1.labels == tr2.labels);
  for (size_t i = 0; i < tr1.images.size(); ++i)
    CHECK(tr1.images[i].data() == tr2.images[i].data());
  auto [tr3, te3] = gen_patch_corpus(spec, 43);
  bool same = true;
  for (size_t i = 0; i < tr1.images.size() && same; ++i)
    same = tr1.images[i].data() == tr3.images[i].data();
  CHECK_FALSE(same);
}

TEST_CASE("raw pixels are weak but texture statistics separate the classes") {
  CorpusSpec spec;
  spec.per_class = 100;
  auto [train, test] = gen_patch_corpus(spec, 7);
  double raw = nearest_centroid_accuracy(train, test, 4);
  double probe = texture_probe_accuracy(train, test, 4);
  MESSAGE("raw-pixel baseline: ", raw, ", texture probe: ", probe);
  CHECK(raw < 0.60);
  CHECK(probe >= 0.95);
}

TEST_CASE("texture-to-tissue mapping") {
  CHECK(texture_to_tissue(0) == kTissueNeuropil);
  CHECK(texture_to_tissue(1) == kTissueStroma);
  CHECK(texture_to_tissue(2) == kTissueOther);
  CHECK(texture_to_tissue(3) == kTissueOther);
  CHECK_THROWS_AS(texture_to_tissue(4), std::invalid_argument);
}

TEST_CASE("synthetic slide: composition, filters, determinism") {
  SlideSpec spec;
  spec.slide_id = "syn";
  spec.tiles_x = spec.tiles_y = 4;
  spec.texture_fracs = {0.25, 0.25, 0.25, 0.0};
  spec.blank_frac = 0.25;  // 4 of 16 tiles blank
  SyntheticSlide slide = gen_synthetic_slide(spec, 3);
  CHECK(slide.image.width == 2048);
  CHECK(slide.image.height == 2048);
  CHECK(std::count(slide.tile_classes.begin(), slide.tile_classes.end(),
                   kTileBlank) == 4);

  // pipeline rejects exactly the blank tiles as white
  std::filesystem::create_directories("data_slide_tmp");
  auto records = run_pipeline(slide.image, "data_slide_tmp");
  int white = 0, red = 0;
  for (size_t i = 0; i < records.size(); ++i) {
    if (records[i].reason == "white") {
      ++white;
      CHECK(slide.tile_classes[i] == kTileBlank);
    }
    red += records[i].reason == "red";
  }
  CHECK(white == 4);
  CHECK(red == 0);  // zero blood fraction -> zero red rejections
  std::filesystem::remove_all("data_slide_tmp");

  // planted blood tiles are rejected as red
  spec.blank_frac = 0.0;
  spec.blood_frac = 0.25;
  SyntheticSlide bloody = gen_synthetic_slide(spec, 4);
  std::filesystem::create_directories("data_slide_tmp2");
  auto rec2 = run_pipeline(bloody.image, "data_slide_tmp2");
  int red2 = 0;
  for (size_t i = 0; i < rec2.size(); ++i)
    if (rec2[i].reason == "red") {
      ++red2;
      CHECK(bloody.tile_classes[i] == kTileBlood);
    }
  CHECK(red2 == 4);
  std::filesystem::remove_all("data_slide_tmp2");

  SyntheticSlide again = gen_synthetic_slide(spec, 4);
  CHECK(again.image.pixels == bloody.image.pixels);
  CHECK(again.tile_classes == bloody.tile_classes);
}

TEST_CASE("area downsampling inverts the replication upscale") {
  SlideSpec spec;
  spec.tiles_x = spec.tiles_y = 1;
  spec.texture_fracs = {0.0, 1.0, 0.0, 0.0};
  SyntheticSlide slide = gen_synthetic_slide(spec, 9);
  auto tile = extract_tile(slide.image, 0, 0, 512);
  Tensor small = tile_to_input(tile, 512, 64);
  CHECK(small.shape() == Shape{3, 64, 64});
  // every 8x8 block was constant, so area averaging is exact up to the
  // 8-bit quantization of the slide pixels
  for (int64_t y = 0; y < 64; ++y)
    for (int64_t x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c) {
        double got = small.data()[(c * 64 + y) * 64 + x];
        double stored =
            slide.image.at(x * 8, y * 8, c) / 255.0;
        CHECK(got == doctest::Approx(stored).epsilon(1e-12));
      }
}

TEST_CASE("slide spec validation") {
  SlideSpec bad;
  bad.texture_fracs = {0.8, 0.8, 0.0, 0.0};
  CHECK_THROWS_AS(gen_synthetic_slide(bad, 0), std::invalid_argument);
  SlideSpec tiny;
  tiny.tile_px = 100;  // not a multiple of 8
  CHECK_THROWS_AS(gen_synthetic_slide(tiny, 0), std::invalid_argument);
}

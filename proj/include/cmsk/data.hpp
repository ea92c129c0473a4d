#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmsk/tensor.hpp"
#include "cmsk/rng.hpp"
#include "cmsk/wsi.hpp"

namespace cmsk {

// Procedural texture classes:
//   0: dark nucleus-like dots   1: horizontal stripes
//   2: vertical stripes         3: fine checkerboard
// Every image draws a random base color and stripe phase so raw-pixel
// statistics overlap across classes while local texture separates them.
constexpr int kNumTextureClasses = 4;

// Tissue-component mapping used for the patch-level component classifier:
// texture 0 -> neuropil, texture 1 -> stroma, textures 2 and 3 -> other.
int texture_to_tissue(int texture_class);

struct CorpusSpec {
  int num_classes = 4;     // <= kNumTextureClasses
  int per_class = 500;
  int64_t size = 64;
  double train_frac = 0.8;
};

struct Dataset {
  std::vector<Tensor> images;  // [3, size, size], values in [0, 1]
  std::vector<int> labels;
};

// [3, size, size] image of the given texture class, values in [0, 1].
Tensor gen_texture(int texture_class, int64_t size, Rng& rng);

// Deterministic class-balanced corpus with a fixed train/test split.
std::pair<Dataset, Dataset> gen_patch_corpus(const CorpusSpec& spec,
                                             uint64_t seed);

// Per-tile content of a synthetic slide.
constexpr int kTileBlank = -1, kTileBlood = -2;

struct SlideSpec {
  std::string slide_id = "slide";
  int tiles_x = 4, tiles_y = 4;
  int64_t tile_px = 512;
  // Fractions of tiles per texture class (padded with zeros), plus planted
  // blank (white) and blood-like (red) regions; must sum to <= 1, remainder
  // goes to texture 0.
  std::vector<double> texture_fracs = {0.25, 0.25, 0.25, 0.25};
  double blank_frac = 0.0, blood_frac = 0.0;
  int label = 0;  // ground-truth slide class
};

struct SyntheticSlide {
  SlideImage image;
  std::vector<int> tile_classes;  // row-major; texture class or kTileBlank/Blood
  int label = 0;
};

// Tile-aligned slide: each tile is a texture rendered at tile_px/8 resolution
// and upscaled by pixel replication, so area-downsampling recovers it.
SyntheticSlide gen_synthetic_slide(const SlideSpec& spec, uint64_t seed);

// Area-average a 512-class tile down to the model input resolution and
// rescale to [0, 1]: inverse of the replication upscale.
Tensor tile_to_input(const std::vector<uint8_t>& tile, int64_t tile_px,
                     int64_t out_px);

// Baseline probes for corpus difficulty. Nearest-centroid on raw pixels
// should stay weak (the task is not linearly trivial); nearest-centroid on
// hand-crafted texture statistics should be strong (the task is learnable).
double nearest_centroid_accuracy(const Dataset& train, const Dataset& test,
                                 int num_classes);
double texture_probe_accuracy(const Dataset& train, const Dataset& test,
                              int num_classes);

}  // namespace cmsk

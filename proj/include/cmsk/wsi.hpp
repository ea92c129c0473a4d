#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cmsk {

// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct SlideImage {
  std::string slide_id;
  int64_t width = 0, height = 0;
  std::vector<uint8_t> pixels;

  uint8_t at(int64_t x, int64_t y, int c) const {
    return pixels[size_t((y * width + x) * 3 + c)];
  }
};

// Lossless binary PPM (P6, maxval 255) image I/O.
SlideImage read_ppm(const std::string& path, const std::string& slide_id = "");
void write_ppm(const SlideImage& img, const std::string& path);

struct FilterParams {
  int white_thresh = 245;      // pixel is white when min(R,G,B) >= this
  double white_frac = 0.5;     // reject when white fraction exceeds this
  double red_frac = 0.5;       // reject when red fraction exceeds this
  int red_r = 170, red_diff = 60;  // red: R >= red_r, R-G and R-B >= red_diff
};

struct TileRecord {
  std::string slide_id;
  int64_t x = 0, y = 0;  // top-left pixel coordinates
  bool kept = false;
  std::string reason;  // none | white | red
};

// Top-left corners of every fully contained window, row-major over (y, x).
std::vector<std::pair<int64_t, int64_t>> tile_origins(int64_t width,
                                                      int64_t height,
                                                      int64_t window,
                                                      int64_t stride);

// Copy the window at (x, y) out of the slide (must fit entirely).
std::vector<uint8_t> extract_tile(const SlideImage& slide, int64_t x,
                                  int64_t y, int64_t window);

// (kept, reason); the white test runs before the red test.
std::pair<bool, std::string> filter_tile(const std::vector<uint8_t>& tile,
                                         int64_t window,
                                         const FilterParams& params);

// Tile, filter, write kept tiles as {slide_id}_{x}_{y}.ppm plus a manifest
// ("slide_id x y kept reason" per line, sorted by (y, x)) into out_dir.
// threads > 1 filters tiles concurrently; output is identical either way.
std::vector<TileRecord> run_pipeline(const SlideImage& slide,
                                     const std::string& out_dir,
                                     int64_t window = 512, int64_t stride = 512,
                                     const FilterParams& params = {},
                                     int threads = 1);

void write_manifest(const std::vector<TileRecord>& records,
                    const std::string& path);

}  // namespace cmsk

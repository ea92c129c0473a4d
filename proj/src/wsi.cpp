#include "cmsk/wsi.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <thread>

#include "cmsk/tensor.hpp"  // for check()

namespace cmsk {

namespace {

// Read one whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
    } else if (!std::isspace(c)) {
      tok.push_back(char(c));
      while ((c = is.peek()) != EOF && !std::isspace(c) && c != '#')
        tok.push_back(char(is.get()));
      return tok;
    }
  }
  return tok;
}

}  // namespace

SlideImage read_ppm(const std::string& path, const std::string& slide_id) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "cannot open image file: " + path);
  check(ppm_token(is) == "P6", "not a binary PPM (P6) file: " + path);
  SlideImage img;
  img.slide_id = slide_id;
  try {
    img.width = std::stoll(ppm_token(is));
    img.height = std::stoll(ppm_token(is));
    long maxval = std::stol(ppm_token(is));
    check(maxval == 255, "unsupported PPM maxval in " + path);
  } catch (const std::logic_error&) {
    check(false, "malformed PPM header in " + path);
  }
  check(img.width >= 1 && img.height >= 1, "empty PPM image: " + path);
  is.get();  // single whitespace byte after the header
  img.pixels.resize(size_t(3 * img.width * img.height));
  is.read(reinterpret_cast<char*>(img.pixels.data()),
          std::streamsize(img.pixels.size()));
  check(bool(is), "truncated PPM pixel data in " + path);
  return img;
}

void write_ppm(const SlideImage& img, const std::string& path) {
  check(img.pixels.size() == size_t(3 * img.width * img.height),
        "image buffer size does not match dimensions");
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "cannot open image path for writing: " + path);
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           std::streamsize(img.pixels.size()));
  check(bool(os), "failed writing image: " + path);
}

std::vector<std::pair<int64_t, int64_t>> tile_origins(int64_t width,
                                                      int64_t height,
                                                      int64_t window,
                                                      int64_t stride) {
  check(window >= 1 && stride >= 1, "tile: window and stride must be positive");
  std::vector<std::pair<int64_t, int64_t>> out;
  for (int64_t y = 0; y + window <= height; y += stride)
    for (int64_t x = 0; x + window <= width; x += stride)
      out.push_back({x, y});
  return out;
}

std::vector<uint8_t> extract_tile(const SlideImage& slide, int64_t x,
                                  int64_t y, int64_t window) {
  check(x >= 0 && y >= 0 && x + window <= slide.width &&
            y + window <= slide.height,
        "tile at (" + std::to_string(x) + "," + std::to_string(y) +
            ") does not fit inside the slide");
  std::vector<uint8_t> tile(size_t(3 * window * window));
  for (int64_t r = 0; r < window; ++r)
    std::copy_n(slide.pixels.begin() + ((y + r) * slide.width + x) * 3,
                window * 3, tile.begin() + r * window * 3);
  return tile;
}

std::pair<bool, std::string> filter_tile(const std::vector<uint8_t>& tile,
                                         int64_t window,
                                         const FilterParams& params) {
  check(int64_t(tile.size()) == 3 * window * window,
        "filter: tile buffer is " + std::to_string(tile.size()) +
            " bytes, expected " + std::to_string(3 * window * window));
  int64_t n = window * window, white = 0, red = 0;
  for (int64_t i = 0; i < n; ++i) {
    int r = tile[size_t(3 * i)], g = tile[size_t(3 * i + 1)],
        b = tile[size_t(3 * i + 2)];
    if (std::min({r, g, b}) >= params.white_thresh) ++white;
    if (r >= params.red_r && r - g >= params.red_diff &&
        r - b >= params.red_diff)
      ++red;
  }
  if (double(white) / double(n) > params.white_frac) return {false, "white"};
  if (double(red) / double(n) > params.red_frac) return {false, "red"};
  return {true, "none"};
}

void write_manifest(const std::vector<TileRecord>& records,
                    const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "cannot open manifest path for writing: " + path);
  for (const TileRecord& r : records)
    os << r.slide_id << " " << r.x << " " << r.y << " "
       << (r.kept ? "1" : "0") << " " << r.reason << "\n";
  check(bool(os), "failed writing manifest: " + path);
}

std::vector<TileRecord> run_pipeline(const SlideImage& slide,
                                     const std::string& out_dir,
                                     int64_t window, int64_t stride,
                                     const FilterParams& params, int threads) {
  auto origins = tile_origins(slide.width, slide.height, window, stride);
  std::vector<TileRecord> records(origins.size());

  auto process = [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      auto [x, y] = origins[i];
      auto [kept, reason] = filter_tile(extract_tile(slide, x, y, window),
                                        window, params);
      records[i] = {slide.slide_id, x, y, kept, reason};
    }
  };
  if (threads <= 1 || origins.size() < 2) {
    process(0, origins.size());
  } else {
    size_t nt = std::min<size_t>(size_t(threads), origins.size());
    std::vector<std::thread> pool;
    size_t chunk = (origins.size() + nt - 1) / nt;
    for (size_t t = 0; t < nt; ++t)
      pool.emplace_back(process, t * chunk,
                        std::min(origins.size(), (t + 1) * chunk));
    for (auto& th : pool) th.join();
  }

  // records are already sorted by (y, x): tile_origins emits row-major order
  for (const TileRecord& r : records) {
    if (!r.kept) continue;
    SlideImage tile;
    tile.slide_id = r.slide_id;
    tile.width = tile.height = window;
    tile.pixels = extract_tile(slide, r.x, r.y, window);
    std::ostringstream name;
    name << out_dir << "/" << r.slide_id << "_" << r.x << "_" << r.y << ".ppm";
    write_ppm(tile, name.str());
  }
  write_manifest(records, out_dir + "/manifest.txt");
  return records;
}

}  // namespace cmsk

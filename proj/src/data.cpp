#include "cmsk/data.hpp"

#include <algorithm>
#include <cmath>

namespace cmsk {

int texture_to_tissue(int texture_class) {
  check(texture_class >= 0 && texture_class < kNumTextureClasses,
        "unknown texture class " + std::to_string(texture_class));
  return texture_class <= 1 ? texture_class : 2;
}

Tensor gen_texture(int cls, int64_t size, Rng& rng) {
  check(cls >= 0 && cls < kNumTextureClasses,
        "unknown texture class " + std::to_string(cls));
  check(size >= 8, "texture size too small");
  // shared random base color so raw-pixel centroids overlap across classes
  double base[3];
  for (double& b : base) b = rng.uniform(0.55, 0.65);
  double amp = 0.22;
  int64_t phase = rng.uniform_int(0, 7);
  std::vector<double> img(size_t(3 * size * size));
  auto px = [&](int c, int64_t y, int64_t x) -> double& {
    return img[size_t((c * size + y) * size + x)];
  };
  for (int c = 0; c < 3; ++c)
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        double v = base[c];
        if (cls == 1) {  // horizontal stripes, period 8
          v += ((y + phase) / 4 % 2 ? amp : -amp) * 0.5;
        } else if (cls == 2) {  // vertical stripes
          v += ((x + phase) / 4 % 2 ? amp : -amp) * 0.5;
        } else if (cls == 3) {  // 2x2 checkerboard
          v += (((x + phase) / 2 + (y + phase) / 2) % 2 ? amp : -amp) * 0.5;
        }
        px(c, y, x) = v;
      }
  if (cls == 0) {  // dark dots: ~2% of the area as 2x2 nuclei
    int64_t dots = size * size / 200;
    for (int64_t d = 0; d < dots; ++d) {
      int64_t cy = rng.uniform_int(0, size - 2);
      int64_t cx = rng.uniform_int(0, size - 2);
      for (int64_t dy = 0; dy < 2; ++dy)
        for (int64_t dx = 0; dx < 2; ++dx)
          for (int c = 0; c < 3; ++c) px(c, cy + dy, cx + dx) = base[c] - 2 * amp;
    }
  }
  for (double& v : img)
    v = std::clamp(v + rng.normal(0.0, 0.02), 0.0, 1.0);
  return Tensor::from_data({3, size, size}, std::move(img));
}

std::pair<Dataset, Dataset> gen_patch_corpus(const CorpusSpec& spec,
                                             uint64_t seed) {
  check(spec.num_classes >= 2 && spec.num_classes <= kNumTextureClasses,
        "corpus: num_classes must be in [2," +
            std::to_string(kNumTextureClasses) + "]");
  check(spec.per_class >= 2, "corpus: need at least 2 images per class");
  check(spec.train_frac > 0 && spec.train_frac < 1,
        "corpus: train fraction must be in (0,1)");
  Rng rng(seed);
  Dataset train, test;
  int per_train = int(std::lround(spec.per_class * spec.train_frac));
  for (int cls = 0; cls < spec.num_classes; ++cls)
    for (int i = 0; i < spec.per_class; ++i) {
      Tensor img = gen_texture(cls, spec.size, rng);
      Dataset& d = i < per_train ? train : test;
      d.images.push_back(img);
      d.labels.push_back(cls);
    }
  // deterministic interleaving of classes
  Rng shuf(seed ^ 0x9e3779b97f4a7c15ULL);
  for (Dataset* d : {&train, &test}) {
    std::vector<int64_t> order(d->images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int64_t(i);
    shuf.shuffle(order);
    Dataset mixed;
    for (int64_t i : order) {
      mixed.images.push_back(d->images[size_t(i)]);
      mixed.labels.push_back(d->labels[size_t(i)]);
    }
    *d = std::move(mixed);
  }
  return {train, test};
}

SyntheticSlide gen_synthetic_slide(const SlideSpec& spec, uint64_t seed) {
  check(spec.tiles_x >= 1 && spec.tiles_y >= 1, "slide: empty tile grid");
  check(spec.tile_px % 8 == 0 && spec.tile_px >= 64,
        "slide: tile size must be a multiple of 8 and >= 64");
  double frac_sum = spec.blank_frac + spec.blood_frac;
  for (double f : spec.texture_fracs) {
    check(f >= 0, "slide: negative composition fraction");
    frac_sum += f;
  }
  check(frac_sum <= 1.0 + 1e-9, "slide: composition fractions exceed 1");

  Rng rng(seed);
  int n = spec.tiles_x * spec.tiles_y;
  std::vector<int> classes;
  for (size_t c = 0; c < spec.texture_fracs.size(); ++c) {
    check(c < size_t(kNumTextureClasses), "slide: too many texture fractions");
    int count = int(std::lround(spec.texture_fracs[c] * n));
    classes.insert(classes.end(), size_t(count), int(c));
  }
  classes.insert(classes.end(),
                 size_t(std::lround(spec.blank_frac * n)), kTileBlank);
  classes.insert(classes.end(),
                 size_t(std::lround(spec.blood_frac * n)), kTileBlood);
  check(int(classes.size()) <= n, "slide: rounded composition exceeds grid");
  classes.insert(classes.end(), size_t(n) - classes.size(), 0);
  size_t n_sz = size_t(n);
  std::vector<int64_t> order(n_sz);
  for (size_t i = 0; i < order.size(); ++i) order[i] = int64_t(i);
  rng.shuffle(order);
  std::vector<int> tile_classes(n_sz);
  for (int i = 0; i < n; ++i) tile_classes[size_t(order[size_t(i)])] = classes[size_t(i)];

  SyntheticSlide out;
  out.label = spec.label;
  out.tile_classes = tile_classes;
  out.image.slide_id = spec.slide_id;
  out.image.width = spec.tiles_x * spec.tile_px;
  out.image.height = spec.tiles_y * spec.tile_px;
  out.image.pixels.assign(size_t(3 * out.image.width * out.image.height), 255);

  int64_t small = spec.tile_px / 8;
  for (int ty = 0; ty < spec.tiles_y; ++ty)
    for (int tx = 0; tx < spec.tiles_x; ++tx) {
      int cls = tile_classes[size_t(ty * spec.tiles_x + tx)];
      if (cls == kTileBlank) continue;  // stays white
      std::vector<uint8_t> rgb(3);
      Tensor tex;
      if (cls == kTileBlood) {
        rgb = {200, 30, 30};
      } else {
        tex = gen_texture(cls, small, rng);
      }
      for (int64_t y = 0; y < spec.tile_px; ++y)
        for (int64_t x = 0; x < spec.tile_px; ++x) {
          int64_t gy = int64_t(ty) * spec.tile_px + y;
          int64_t gx = int64_t(tx) * spec.tile_px + x;
          size_t off = size_t((gy * out.image.width + gx) * 3);
          for (int c = 0; c < 3; ++c) {
            uint8_t v;
            if (cls == kTileBlood) {
              v = rgb[size_t(c)];
            } else {
              // pixel replication: every 8x8 block is one texture pixel
              double t = tex.data()[(c * small + y / 8) * small + x / 8];
              v = uint8_t(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
            }
            out.image.pixels[off + size_t(c)] = v;
          }
        }
    }
  return out;
}

Tensor tile_to_input(const std::vector<uint8_t>& tile, int64_t tile_px,
                     int64_t out_px) {
  check(int64_t(tile.size()) == 3 * tile_px * tile_px,
        "tile buffer does not match tile size");
  check(tile_px % out_px == 0, "tile size must be a multiple of the model input");
  int64_t k = tile_px / out_px;
  std::vector<double> img(size_t(3 * out_px * out_px), 0.0);
  for (int64_t y = 0; y < tile_px; ++y)
    for (int64_t x = 0; x < tile_px; ++x)
      for (int c = 0; c < 3; ++c)
        img[size_t((c * out_px + y / k) * out_px + x / k)] +=
            tile[size_t((y * tile_px + x) * 3 + c)];
  for (double& v : img) v /= double(k * k) * 255.0;
  return Tensor::from_data({3, out_px, out_px}, std::move(img));
}

namespace {

// nearest-centroid classification in an arbitrary feature space
double centroid_accuracy(const std::vector<std::vector<double>>& train_f,
                         const std::vector<int>& train_l,
                         const std::vector<std::vector<double>>& test_f,
                         const std::vector<int>& test_l, int num_classes) {
  size_t dim = train_f[0].size();
  std::vector<std::vector<double>> centroid(size_t(num_classes),
                                            std::vector<double>(dim, 0.0));
  std::vector<int64_t> count(size_t(num_classes), 0);
  for (size_t i = 0; i < train_f.size(); ++i) {
    ++count[size_t(train_l[i])];
    for (size_t d = 0; d < dim; ++d)
      centroid[size_t(train_l[i])][d] += train_f[i][d];
  }
  for (int c = 0; c < num_classes; ++c) {
    check(count[size_t(c)] > 0, "baseline: class missing from training data");
    for (double& v : centroid[size_t(c)]) v /= double(count[size_t(c)]);
  }
  double hits = 0;
  for (size_t i = 0; i < test_f.size(); ++i) {
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < num_classes; ++c) {
      double d2 = 0;
      for (size_t d = 0; d < dim; ++d) {
        double delta = test_f[i][d] - centroid[size_t(c)][d];
        d2 += delta * delta;
      }
      if (d2 < best_d) {
        best_d = d2;
        best = c;
      }
    }
    hits += best == test_l[i];
  }
  return hits / double(test_f.size());
}

// mean absolute vertical/horizontal gradient plus dark-pixel fraction
std::vector<double> texture_stats(const Tensor& img) {
  int64_t size = img.dim(1);
  auto px = [&](int64_t y, int64_t x) {
    double s = 0;
    for (int c = 0; c < 3; ++c)
      s += img.data()[(c * size + y) * size + x];
    return s / 3.0;
  };
  double dy = 0, dx = 0, mean = 0;
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) {
      mean += px(y, x);
      if (y + 1 < size) dy += std::fabs(px(y + 1, x) - px(y, x));
      if (x + 1 < size) dx += std::fabs(px(y, x + 1) - px(y, x));
    }
  mean /= double(size * size);
  double dark = 0;
  for (int64_t y = 0; y < size; ++y)
    for (int64_t x = 0; x < size; ++x) dark += px(y, x) < mean - 0.15;
  double n = double(size * (size - 1));
  return {dy / n, dx / n, dark / double(size * size)};
}

}  // namespace

double nearest_centroid_accuracy(const Dataset& train, const Dataset& test,
                                 int num_classes) {
  std::vector<std::vector<double>> tf, sf;
  for (const Tensor& t : train.images) tf.push_back(t.data());
  for (const Tensor& t : test.images) sf.push_back(t.data());
  return centroid_accuracy(tf, train.labels, sf, test.labels, num_classes);
}

double texture_probe_accuracy(const Dataset& train, const Dataset& test,
                              int num_classes) {
  std::vector<std::vector<double>> tf, sf;
  for (const Tensor& t : train.images) tf.push_back(texture_stats(t));
  for (const Tensor& t : test.images) sf.push_back(texture_stats(t));
  return centroid_accuracy(tf, train.labels, sf, test.labels, num_classes);
}

}  // namespace cmsk

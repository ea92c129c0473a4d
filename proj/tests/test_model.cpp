#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "cmsk/gradcheck.hpp"
#include "cmsk/model.hpp"

using namespace cmsk;

static Tensor random_image(int64_t h, int64_t w, Rng& rng, bool rg = false) {
  std::vector<double> d(3 * h * w);
  for (double& v : d) v = rng.uniform();
  return Tensor::from_data({3, h, w}, std::move(d), rg);
}

TEST_CASE("variant presets") {
  ModelConfig mini = ModelConfig::preset("mini");
  CHECK(mini.backbone.embed_dim == 24);
  CHECK(mini.backbone.num_heads == std::array<int, 4>{2, 4, 8, 16});
  ModelConfig micro = ModelConfig::preset("micro");
  CHECK(micro.backbone.embed_dim == 24);
  CHECK(micro.backbone.num_heads == std::array<int, 4>{4, 8, 16, 32});
  ModelConfig tiny = ModelConfig::preset("tiny");
  CHECK(tiny.backbone.embed_dim == 56);
  CHECK(tiny.backbone.num_heads == std::array<int, 4>{4, 8, 16, 32});
  CHECK(tiny.backbone.depths == std::array<int, 4>{2, 2, 8, 2});
  CHECK_THROWS_AS(ModelConfig::preset("giant"), std::invalid_argument);
}

TEST_CASE("micro forward: logits, softmax normalization, determinism") {
  Rng rng(1);
  ModelConfig cfg = ModelConfig::preset("micro");
  cfg.num_classes = 5;
  Model m(cfg, rng);
  Tensor img = random_image(224, 224, rng);
  Tensor logits = m.forward(img, false);
  CHECK(logits.shape() == Shape{5});
  Tensor p = softmax(logits, 0);
  double s = 0;
  for (double v : p.data()) {
    CHECK(v >= 0.0);
    s += v;
  }
  CHECK(std::fabs(s - 1.0) < 1e-12);
  Tensor logits2 = m.forward(img, false);
  CHECK(logits.data() == logits2.data());  // bit-identical in eval mode
}

TEST_CASE("feature extraction dimensions and non-degeneracy") {
  Rng rng(2);
  ModelConfig cfg = ModelConfig::preset("micro");
  Model m(cfg, rng);
  CHECK(cfg.feature_dim() == 240);  // 2C + 8C with C=24
  Tensor blank = Tensor::full({3, 224, 224}, 0.5);
  Tensor f_blank = m.features(blank, false);
  CHECK(f_blank.shape() == Shape{240});
  Tensor f_blank2 = m.features(blank, false);
  CHECK(f_blank.data() == f_blank2.data());
  Tensor f_tex = m.features(random_image(224, 224, rng), false);
  double dist = 0;
  for (int64_t i = 0; i < 240; ++i) {
    double d = f_tex.data()[i] - f_blank.data()[i];
    dist += d * d;
  }
  CHECK(dist > 0.0);
}

TEST_CASE("ablated model classifies from stage-4 features only") {
  Rng rng(3);
  ModelConfig cfg = ModelConfig::preset("toy");
  cfg.num_classes = 3;
  cfg.use_cmsa = false;
  CHECK(cfg.feature_dim() == 64);  // 8C with C=8
  Model m(cfg, rng);
  Tensor logits = m.forward(random_image(64, 64, rng), false);
  CHECK(logits.shape() == Shape{3});
}

TEST_CASE("full-model gradient check on the toy config") {
  Rng rng(4);
  ModelConfig cfg = ModelConfig::preset("toy");
  cfg.num_classes = 3;
  Model m(cfg, rng);
  Tensor img = random_image(64, 64, rng, true);
  NamedParams np;
  m.named_params(np);
  std::vector<Tensor> params = {img};
  for (auto& [name, t] : np) params.push_back(t);
  auto loss = [&] { return cross_entropy(m.forward(img, true), 1); };
  auto res = finite_diff_check(loss, params, rng, 80);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("parameter counts sit near the documented budgets") {
  Rng rng(5);
  Model micro(ModelConfig::preset("micro"), rng);
  double n_micro = double(micro.param_count());
  CHECK(n_micro > 1.32e6 * 0.75);
  CHECK(n_micro < 1.32e6 * 1.25);
  Model tiny(ModelConfig::preset("tiny"), rng);
  double n_tiny = double(tiny.param_count());
  CHECK(n_tiny > 5.52e6 * 0.75);
  CHECK(n_tiny < 5.52e6 * 1.25);
  MESSAGE("micro params: ", n_micro, ", tiny params: ", n_tiny);
}

TEST_CASE("checkpoint round trip preserves eval logits") {
  Rng rng(6);
  ModelConfig cfg = ModelConfig::preset("toy");
  cfg.num_classes = 4;
  Model m(cfg, rng);
  Tensor img = random_image(64, 64, rng);
  // run one training pass so the batchnorm running averages are nontrivial
  m.forward(img, true);
  Tensor before = m.forward(img, false);
  std::string path = "ckpt_roundtrip.cmsk";
  save_checkpoint(m, path);
  Model loaded = load_checkpoint(path);
  CHECK(loaded.cfg.variant == "toy");
  CHECK(loaded.cfg.num_classes == 4);
  Tensor after = loaded.forward(img, false);
  for (int64_t i = 0; i < 4; ++i)
    CHECK(std::fabs(before.data()[i] - after.data()[i]) < 1e-6);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint load failures are distinct and descriptive") {
  Rng rng(7);
  ModelConfig cfg = ModelConfig::preset("toy");
  Model m(cfg, rng);
  std::string path = "ckpt_corrupt.cmsk";
  save_checkpoint(m, path);

  auto expect_error = [](const std::string& p, const std::string& needle) {
    try {
      load_checkpoint(p);
      FAIL("expected load_checkpoint to throw for ", needle);
    } catch (const std::invalid_argument& e) {
      CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos,
                    e.what());
    }
  };

  std::vector<char> bytes;
  {
    std::ifstream is(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  {
    auto bad = bytes;
    bad[0] = 'X';
    std::ofstream(path + ".magic", std::ios::binary)
        .write(bad.data(), std::streamsize(bad.size()));
    expect_error(path + ".magic", "not a checkpoint");
  }
  {
    auto bad = bytes;
    bad[4] = 99;  // version field
    std::ofstream(path + ".ver", std::ios::binary)
        .write(bad.data(), std::streamsize(bad.size()));
    expect_error(path + ".ver", "version");
  }
  {
    std::ofstream(path + ".trunc", std::ios::binary)
        .write(bytes.data(), std::streamsize(bytes.size() / 2));
    expect_error(path + ".trunc", "truncated");
  }
  expect_error("no_such_file.cmsk", "cannot open");
  for (const char* suffix : {"", ".magic", ".ver", ".trunc"})
    std::remove((path + suffix).c_str());
}

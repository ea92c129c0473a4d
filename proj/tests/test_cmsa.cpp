#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cmsk/cmsa.hpp"
#include "cmsk/gradcheck.hpp"

using namespace cmsk;

static Tensor random_chw(int64_t c, int64_t h, int64_t w, Rng& rng,
                         bool rg = false) {
  std::vector<double> d(c * h * w);
  for (double& v : d) v = rng.normal();
  return Tensor::from_data({c, h, w}, std::move(d), rg);
}

static BackboneConfig toy_bb() {
  BackboneConfig bb;
  bb.embed_dim = 4;
  bb.img_h = bb.img_w = 32;
  bb.window = 4;
  return bb;
}

static StageFeatures toy_features(Rng& rng, bool rg = false) {
  StageFeatures sf;
  sf.f1 = random_chw(8, 4, 4, rng, rg);
  sf.f2 = random_chw(16, 2, 2, rng, rg);
  sf.f3 = random_chw(32, 1, 1, rng, rg);
  return sf;
}

TEST_CASE("config validation") {
  CmsaConfig c;
  c.K = 2;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.K = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.K = 3;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("batchnorm: normalizes per channel, tracks running averages") {
  Rng rng(1);
  BatchNorm bn(3);
  Tensor x = random_chw(3, 4, 5, rng);
  Tensor y = bn.forward(x, true);
  for (int64_t c = 0; c < 3; ++c) {
    double m = 0, var = 0;
    for (int64_t i = 0; i < 20; ++i) m += y.data()[c * 20 + i];
    m /= 20;
    for (int64_t i = 0; i < 20; ++i) {
      double dd = y.data()[c * 20 + i] - m;
      var += dd * dd;
    }
    CHECK(m == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(var / 20 == doctest::Approx(1.0).epsilon(1e-3));
  }
  // eval normalizes with the same current-map statistics as training
  BatchNorm bn2(3);
  Tensor z = bn2.forward(x, false);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(z.data()[i] == doctest::Approx(y.data()[i]).epsilon(1e-12));
  // eval leaves the running averages untouched; training updates them
  CHECK(bn2.running_mean[0] == 0.0);
  CHECK(bn2.running_var[0] == 1.0);
  bn2.forward(x, true);
  CHECK(bn2.running_mean[0] != 0.0);
}

TEST_CASE("prepare: micro-sized features unify to [48,28,28]") {
  Rng rng(2);
  BackboneConfig bb;  // micro: C=24, 224x224
  CmsaModule cmsa(bb, CmsaConfig{}, rng);
  StageFeatures sf;
  sf.f1 = random_chw(48, 28, 28, rng);
  sf.f2 = random_chw(96, 14, 14, rng);
  sf.f3 = random_chw(192, 7, 7, rng);
  Tensor f1, f2, f3;
  cmsa.prepare(sf, f1, f2, f3);
  CHECK(f1.shape() == Shape{48, 28, 28});
  CHECK(f2.shape() == Shape{48, 28, 28});
  CHECK(f3.shape() == Shape{48, 28, 28});
  CHECK(cmsa.w1.shape() == Shape{48, 81});  // K^4 attention channels
}

TEST_CASE("prepare: scale weights (1,0,0) zero the upper-stage branches") {
  Rng rng(3);
  CmsaModule cmsa(toy_bb(), CmsaConfig{}, rng);
  cmsa.scale_w.mutable_data()[1] = 0.0;
  cmsa.scale_w.mutable_data()[2] = 0.0;
  StageFeatures sf = toy_features(rng);
  Tensor f1, f2, f3;
  cmsa.prepare(sf, f1, f2, f3);
  for (double v : f2.data()) CHECK(v == 0.0);
  for (double v : f3.data()) CHECK(v == 0.0);
  for (int64_t i = 0; i < f1.numel(); ++i)
    CHECK(f1.data()[i] == sf.f1.data()[i]);
}

TEST_CASE("prepare rejects mismatched feature shapes") {
  Rng rng(4);
  CmsaModule cmsa(toy_bb(), CmsaConfig{}, rng);
  StageFeatures sf = toy_features(rng);
  sf.f1 = random_chw(8, 5, 4, rng);
  Tensor f1, f2, f3;
  CHECK_THROWS_AS(cmsa.prepare(sf, f1, f2, f3), std::invalid_argument);
}

TEST_CASE("cdfa K=1 degenerates to the value pathway") {
  Rng rng(5);
  CmsaConfig cc;
  cc.K = 1;
  CmsaModule cmsa(toy_bb(), cc, rng);
  Tensor f1 = random_chw(8, 4, 4, rng);
  Tensor f2 = random_chw(8, 4, 4, rng);
  Tensor f3 = random_chw(8, 4, 4, rng);
  Tensor out = cmsa.cdfa(f1, f2, f3, false);
  Tensor v = cmsa.cbr2.forward(cmsa.cbr1.forward(f3, false), false);
  Tensor vt = add(matmul(chw_to_tokens(v), cmsa.wv), cmsa.bv);
  Tensor expect = tokens_to_chw(vt, 4, 4);
  REQUIRE(out.shape() == expect.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
}

TEST_CASE("vectorized cdfa matches a scalar per-location reference") {
  Rng rng(6);
  CmsaModule cmsa(toy_bb(), CmsaConfig{}, rng);  // K=3, d=8, 4x4 grid
  int64_t d = 8, h = 4, w = 4, n = h * w, K = 3, k2 = K * K;
  Tensor f1 = random_chw(d, h, w, rng);
  Tensor f2 = random_chw(d, h, w, rng);
  Tensor f3 = random_chw(d, h, w, rng);
  Tensor out = cmsa.cdfa(f1, f2, f3, false);

  // value tokens from the module's own value path (the oracle targets the
  // attention mechanics, not the convolutions)
  Tensor v = cmsa.cbr2.forward(cmsa.cbr1.forward(f3, false), false);
  Tensor vt = add(matmul(chw_to_tokens(v), cmsa.wv), cmsa.bv);

  auto att = [&](const Tensor& f, const Tensor& wm, const Tensor& bm,
                 int64_t p, std::vector<double>& s) {
    // per-location map (Eq. 1 shape), reshaped K^2 x K^2, rows softmaxed
    s.assign(k2 * k2, 0.0);
    int64_t y = p / w, x = p % w;
    for (int64_t r = 0; r < k2; ++r) {
      double mx = -1e300;
      for (int64_t c = 0; c < k2; ++c) {
        double a = bm.data()[r * k2 + c];
        for (int64_t ch = 0; ch < d; ++ch)
          a += f.data()[(ch * h + y) * w + x] * wm.data()[ch * k2 * k2 + r * k2 + c];
        s[r * k2 + c] = a;
        mx = std::max(mx, a);
      }
      double z = 0;
      for (int64_t c = 0; c < k2; ++c) z += std::exp(s[r * k2 + c] - mx);
      double rowsum = 0;
      for (int64_t c = 0; c < k2; ++c) {
        s[r * k2 + c] = std::exp(s[r * k2 + c] - mx) / z;
        rowsum += s[r * k2 + c];
      }
      CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-12));
    }
  };

  std::vector<double> ref(d * h * w, 0.0);
  for (int64_t p = 0; p < n; ++p) {
    std::vector<double> s1, s2;
    att(f1, cmsa.w1, cmsa.b1, p, s1);
    att(f2, cmsa.w2, cmsa.b2, p, s2);
    int64_t py = p / w, px = p % w;
    // U: the K^2 neighbor value vectors, zero-padded at borders
    std::vector<double> U(k2 * d, 0.0);
    for (int64_t q = 0; q < k2; ++q) {
      int64_t ny = py + q / K - K / 2, nx = px + q % K - K / 2;
      if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
      for (int64_t ch = 0; ch < d; ++ch)
        U[q * d + ch] = vt.data()[(ny * w + nx) * d + ch];
    }
    // two-step aggregation, then additive fold back to neighbor positions
    std::vector<double> t(k2 * d, 0.0), agg(k2 * d, 0.0);
    for (int64_t r = 0; r < k2; ++r)
      for (int64_t c = 0; c < k2; ++c)
        for (int64_t ch = 0; ch < d; ++ch)
          t[r * d + ch] += s2[r * k2 + c] * U[c * d + ch];
    for (int64_t r = 0; r < k2; ++r)
      for (int64_t c = 0; c < k2; ++c)
        for (int64_t ch = 0; ch < d; ++ch)
          agg[r * d + ch] += s1[r * k2 + c] * t[c * d + ch];
    for (int64_t q = 0; q < k2; ++q) {
      int64_t ny = py + q / K - K / 2, nx = px + q % K - K / 2;
      if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
      for (int64_t ch = 0; ch < d; ++ch)
        ref[(ch * h + ny) * w + nx] += agg[q * d + ch];
    }
  }
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(std::fabs(out.data()[i] - ref[i]) < 1e-10);
}

TEST_CASE("K=1 output is equivariant under shared spatial permutation") {
  Rng rng(7);
  CmsaConfig cc;
  cc.K = 1;
  CmsaModule cmsa(toy_bb(), cc, rng);
  // restrict the value-path convolutions to their center tap so every
  // remaining op is per-location; only then can K=1 be fully equivariant
  for (Tensor* cw : {&cmsa.cbr1.w, &cmsa.cbr2.w})
    for (int64_t o = 0; o < 8; ++o)
      for (int64_t i = 0; i < 8; ++i)
        for (int64_t p = 0; p < 9; ++p)
          if (p != 4) cw->mutable_data()[(o * 8 + i) * 9 + p] = 0.0;
  Tensor f1 = random_chw(8, 4, 4, rng);
  Tensor f2 = random_chw(8, 4, 4, rng);
  Tensor f3 = random_chw(8, 4, 4, rng);
  std::vector<int64_t> perm(16);
  for (int64_t i = 0; i < 16; ++i) perm[i] = i;
  rng.shuffle(perm);
  auto permute_chw = [&](const Tensor& t) {
    std::vector<double> d(t.numel());
    for (int64_t ch = 0; ch < 8; ++ch)
      for (int64_t p = 0; p < 16; ++p)
        d[ch * 16 + p] = t.data()[ch * 16 + perm[p]];
    return Tensor::from_data({8, 4, 4}, std::move(d));
  };
  Tensor out = cmsa.cdfa(f1, f2, f3, false);
  Tensor outp = cmsa.cdfa(permute_chw(f1), permute_chw(f2), permute_chw(f3),
                          false);
  Tensor expect = permute_chw(out);
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(outp.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-9));
}

TEST_CASE("zero scale weights reduce forward to the bias-only pathway") {
  Rng rng(8);
  CmsaModule cmsa(toy_bb(), CmsaConfig{}, rng);
  for (double& v : cmsa.scale_w.mutable_data()) v = 0.0;
  StageFeatures sf = toy_features(rng);
  Tensor out = cmsa.forward(sf, false);
  Tensor z = Tensor::zeros({8, 4, 4});
  Tensor expect = cmsa.cdfa(z, z, z, false);
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
  CHECK(out.shape() == Shape{8, 4, 4});
}

TEST_CASE("end-to-end gradient check, including the scale weights") {
  Rng rng(9);
  CmsaModule cmsa(toy_bb(), CmsaConfig{}, rng);
  StageFeatures sf = toy_features(rng, true);
  NamedParams np;
  cmsa.named_params("cmsa", np);
  std::vector<Tensor> params = {sf.f1, sf.f2, sf.f3};
  for (auto& [name, t] : np) params.push_back(t);
  auto loss = [&] {
    Tensor out = cmsa.forward(sf, true);
    return mean(mul(out, out));
  };
  auto res = finite_diff_check(loss, params, rng, 150);
  CHECK(res.max_rel_err < 1e-4);

  // every scale weight influences the loss
  for (auto& t : params) t.zero_grad();
  loss().backward();
  for (int i = 0; i < 3; ++i) CHECK(std::fabs(cmsa.scale_w.grad()[i]) > 1e-12);
  // and every parameter tensor receives some gradient signal
  for (auto& [name, t] : np) {
    double mx = 0;
    for (double g : t.grad()) mx = std::max(mx, std::fabs(g));
    CHECK_MESSAGE(mx > 1e-14, name);
  }
}

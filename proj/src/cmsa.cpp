#include "cmsk/cmsa.hpp"

#include <cmath>

namespace cmsk {

void CmsaConfig::validate() const {
  check(K >= 1 && K % 2 == 1, "cmsa config: K must be odd and >= 1, got " +
                                  std::to_string(K));
  check(s >= 0, "cmsa config: s must be >= 0");
}

BatchNorm::BatchNorm(int64_t c)
    : gamma(Tensor::full({c}, 1.0, true)),
      beta(Tensor::zeros({c}, true)),
      running_mean(c, 0.0),
      running_var(c, 1.0),
      channels(c) {}

Tensor BatchNorm::forward(const Tensor& chw, bool training) {
  check(chw.rank() == 3 && chw.dim(0) == channels,
        "batchnorm: expected [" + std::to_string(channels) +
            ",h,w], got " + shape_str(chw.shape()));
  Tensor m = mean(chw, {1, 2}, true);                 // [C,1,1]
  Tensor v = mean(mul(sub(chw, m), sub(chw, m)), {1, 2}, true);
  if (training) {
    for (int64_t c = 0; c < channels; ++c) {
      running_mean[c] = (1 - momentum) * running_mean[c] + momentum * m.data()[c];
      running_var[c] = (1 - momentum) * running_var[c] + momentum * v.data()[c];
    }
  }
  Tensor norm = div(sub(chw, m), sqrt_t(add_scalar(v, eps)));
  return add(mul(norm, reshape(gamma, {channels, 1, 1})),
             reshape(beta, {channels, 1, 1}));
}

void BatchNorm::named_params(const std::string& prefix, NamedParams& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

ConvBnRelu::ConvBnRelu(int64_t in_ch, int64_t out_ch, Rng& rng)
    : w(Tensor::zeros({out_ch, in_ch, 3, 3}, true)), bn(out_ch) {
  double std = std::sqrt(2.0 / (in_ch * 9));
  for (double& v : w.mutable_data()) v = rng.normal(0.0, std);
}

Tensor ConvBnRelu::forward(const Tensor& chw, bool training) {
  return relu(bn.forward(conv2d(chw, w, Tensor(), 1, 1), training));
}

void ConvBnRelu::named_params(const std::string& prefix, NamedParams& out) const {
  out.push_back({prefix + ".w", w});
  bn.named_params(prefix + ".bn", out);
}

CmsaModule::CmsaModule(const BackboneConfig& bb, const CmsaConfig& c, Rng& rng)
    : cfg(c) {
  cfg.validate();
  bb.validate();
  int64_t base = bb.embed_dim;
  d = (int64_t(1) << cfg.s) * base;
  out_h = bb.img_h / 8;
  out_w = bb.img_w / 8;
  check(d == 2 * base, "cmsa: stage-1 features already have 2C channels, "
                       "only s=1 is supported");

  auto he = [&](Tensor& t, int64_t fan_in) {
    double std = std::sqrt(2.0 / fan_in);
    for (double& v : t.mutable_data()) v = rng.normal(0.0, std);
  };
  scale_w = Tensor::full({3}, 1.0, true);
  unify2_w = Tensor::zeros({d, 4 * base, 1, 1}, true);
  unify2_b = Tensor::zeros({d}, true);
  unify3_w = Tensor::zeros({d, 8 * base, 1, 1}, true);
  unify3_b = Tensor::zeros({d}, true);
  he(unify2_w, 4 * base);
  he(unify3_w, 8 * base);

  int64_t k4 = int64_t(cfg.K) * cfg.K * cfg.K * cfg.K;
  w1 = Tensor::zeros({d, k4}, true);
  b1 = Tensor::zeros({k4}, true);
  w2 = Tensor::zeros({d, k4}, true);
  b2 = Tensor::zeros({k4}, true);
  wv = Tensor::zeros({d, d}, true);
  bv = Tensor::zeros({d}, true);
  he(w1, d);
  he(w2, d);
  he(wv, d);
  cbr1 = ConvBnRelu(d, d, rng);
  cbr2 = ConvBnRelu(d, d, rng);
}

static Tensor scale_by(const Tensor& chw, const Tensor& weights, int64_t idx) {
  auto iv = std::make_shared<std::vector<int64_t>>(1, idx);
  return mul(chw, reshape(take(weights, iv, {1}), {1, 1, 1}));
}

void CmsaModule::prepare(const StageFeatures& sf, Tensor& f1, Tensor& f2,
                         Tensor& f3) const {
  check(sf.f1.rank() == 3 && sf.f1.dim(0) == d &&
            sf.f1.dim(1) == out_h && sf.f1.dim(2) == out_w,
        "cmsa: stage-1 features have shape " + shape_str(sf.f1.shape()) +
            ", expected [" + std::to_string(d) + "," + std::to_string(out_h) +
            "," + std::to_string(out_w) + "]");
  f1 = scale_by(sf.f1, scale_w, 0);
  Tensor up2 = bilinear_upsample(sf.f2, out_h, out_w);
  f2 = scale_by(conv2d(up2, unify2_w, unify2_b, 1, 0), scale_w, 1);
  Tensor up3 = bilinear_upsample(sf.f3, out_h, out_w);
  f3 = scale_by(conv2d(up3, unify3_w, unify3_b, 1, 0), scale_w, 2);
}

Tensor CmsaModule::cdfa(const Tensor& f1, const Tensor& f2, const Tensor& f3,
                        bool training) {
  for (const Tensor* f : {&f1, &f2, &f3})
    check(f->rank() == 3 && f->dim(0) == d && f->dim(1) == out_h &&
              f->dim(2) == out_w,
          "cdfa: input shape " + shape_str(f->shape()) + " does not match [" +
              std::to_string(d) + "," + std::to_string(out_h) + "," +
              std::to_string(out_w) + "]");
  int64_t n = out_h * out_w;
  int64_t k2 = int64_t(cfg.K) * cfg.K;

  // per-location attention maps, row-softmaxed over source positions
  Tensor s1 = softmax(
      reshape(add(matmul(chw_to_tokens(f1), w1), b1), {n, k2, k2}), 2);
  Tensor s2 = softmax(
      reshape(add(matmul(chw_to_tokens(f2), w2), b2), {n, k2, k2}), 2);

  // value path: two conv+bn+relu fusion blocks, then a linear projection
  Tensor v = cbr2.forward(cbr1.forward(f3, training), training);
  Tensor vt = add(matmul(chw_to_tokens(v), wv), bv);  // [n, d]

  // two-step aggregation over each K*K neighborhood, folded back additively
  Tensor u = unfold_kxk(vt, out_h, out_w, cfg.K);     // [n, K^2, d]
  Tensor agg = matmul(s1, matmul(s2, u));             // [n, K^2, d]
  return tokens_to_chw(fold_kxk(agg, out_h, out_w, cfg.K), out_h, out_w);
}

Tensor CmsaModule::forward(const StageFeatures& sf, bool training) {
  Tensor f1, f2, f3;
  prepare(sf, f1, f2, f3);
  return cdfa(f1, f2, f3, training);
}

void CmsaModule::named_params(const std::string& prefix,
                              NamedParams& out) const {
  out.push_back({prefix + ".scale_w", scale_w});
  out.push_back({prefix + ".unify2_w", unify2_w});
  out.push_back({prefix + ".unify2_b", unify2_b});
  out.push_back({prefix + ".unify3_w", unify3_w});
  out.push_back({prefix + ".unify3_b", unify3_b});
  out.push_back({prefix + ".w1", w1});
  out.push_back({prefix + ".b1", b1});
  out.push_back({prefix + ".w2", w2});
  out.push_back({prefix + ".b2", b2});
  out.push_back({prefix + ".wv", wv});
  out.push_back({prefix + ".bv", bv});
  cbr1.named_params(prefix + ".cbr1", out);
  cbr2.named_params(prefix + ".cbr2", out);
}

}  // namespace cmsk

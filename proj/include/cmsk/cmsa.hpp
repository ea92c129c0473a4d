#pragma once

#include <string>

#include "cmsk/swin.hpp"

namespace cmsk {

struct CmsaConfig {
  int K = 3;  // odd cross-scale attention window
  int s = 1;  // unified channel width is 2^s * C

  void validate() const;
};

// Per-channel normalization over the spatial grid of a [C,h,w] map. Both
// modes normalize with the current map's statistics: the module sees one
// image at a time, so classical batch statistics degenerate to per-image
// statistics anyway, and evaluating against cross-image running averages
// instead would shift every feature by a class-dependent offset. Training
// mode still maintains running averages; they travel with checkpoints as a
// diagnostic record of the feature distribution.
struct BatchNorm {
  Tensor gamma, beta;  // [C]
  std::vector<double> running_mean, running_var;
  int64_t channels = 0;
  double eps = 1e-5, momentum = 0.1;

  BatchNorm() = default;
  explicit BatchNorm(int64_t channels);
  Tensor forward(const Tensor& chw, bool training);
  void named_params(const std::string& prefix, NamedParams& out) const;
};

// conv 3x3 (stride 1, padding 1, no bias — batchnorm absorbs it) + bn + relu
struct ConvBnRelu {
  Tensor w;  // [Cout, Cin, 3, 3]
  BatchNorm bn;

  ConvBnRelu() = default;
  ConvBnRelu(int64_t in_ch, int64_t out_ch, Rng& rng);
  Tensor forward(const Tensor& chw, bool training);
  void named_params(const std::string& prefix, NamedParams& out) const;
};

// Cross-scale windowed attention plus the surrounding scale/unification
// plumbing. Channel width D = 2^s * C everywhere below.
struct CmsaModule {
  CmsaConfig cfg;
  int64_t d = 0;          // unified channel width
  int64_t out_h = 0, out_w = 0;
  Tensor scale_w;         // [3] learnable per-stage scale weights, init 1
  Tensor unify2_w, unify2_b;  // 1x1 conv 4C -> D
  Tensor unify3_w, unify3_b;  // 1x1 conv 8C -> D
  Tensor w1, b1, w2, b2;  // per-location attention maps, D -> K^4
  Tensor wv, bv;          // value projection, D -> D
  ConvBnRelu cbr1, cbr2;

  CmsaModule(const BackboneConfig& bb, const CmsaConfig& cfg, Rng& rng);

  // Scale, upsample and channel-unify the stage features to [D, H/8, W/8].
  void prepare(const StageFeatures& sf, Tensor& f1, Tensor& f2,
               Tensor& f3) const;
  // Windowed cross-scale attention over prepared maps (all [D, h, w]).
  Tensor cdfa(const Tensor& f1, const Tensor& f2, const Tensor& f3,
              bool training);
  Tensor forward(const StageFeatures& sf, bool training);
  void named_params(const std::string& prefix, NamedParams& out) const;
};

}  // namespace cmsk

#pragma once

#include <array>
#include <string>
#include <vector>

#include "cmsk/kan.hpp"
#include "cmsk/rng.hpp"
#include "cmsk/tensor.hpp"

namespace cmsk {

struct KanSpec {
  int order = 3;
  int intervals = 5;
  double lo = -1.0, hi = 1.0;
  SplineGrid make() const {
    return SplineGrid::uniform(order, intervals, lo, hi);
  }
};

struct BackboneConfig {
  int64_t embed_dim = 24;                 // C
  std::array<int, 4> depths = {2, 2, 8, 2};
  std::array<int, 4> num_heads = {4, 8, 16, 32};
  int window = 7;                         // M
  int64_t img_h = 224, img_w = 224;
  double kan_expansion = 0.125;           // hidden width ratio inside blocks
  bool rel_pos_bias = true;
  KanSpec kan;

  void validate() const;
};

// The three retained multi-scale maps plus the final-stage output, all in
// [C, h, w] layout.
struct StageFeatures {
  Tensor f1;  // [2C, H/8,  W/8 ]
  Tensor f2;  // [4C, H/16, W/16]
  Tensor f3;  // [8C, H/32, W/32]
  Tensor f4;  // [8C, H/32, W/32]
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct LayerNorm {
  Tensor gamma, beta;
  int64_t dim = 0;
  double eps = 1e-5;
  LayerNorm() = default;
  explicit LayerNorm(int64_t dim);
  Tensor forward(const Tensor& x) const;  // [N, dim] -> [N, dim]
  void named_params(const std::string& prefix, NamedParams& out) const;
};

// Multi-head self-attention inside M x M windows at a fixed resolution,
// optionally cyclically shifted with cross-boundary masking.
struct WindowAttention {
  int64_t dim = 0, h = 0, w = 0;
  int heads = 1, window = 7, win_eff = 7, shift = 0;
  bool shifted = false;
  Tensor wq, wk, wv, bq, bk, bv, proj_w, proj_b;
  Tensor rel_bias_table;  // [(2M-1)^2, heads]; undefined when disabled
  IndexVec rel_index, win_perm, win_unperm;
  Tensor mask;  // [nw, 1, M^2, M^2] additive constants; defined when shifted

  WindowAttention(int64_t dim, int64_t h, int64_t w, int heads, int window,
                  bool shifted, bool rel_bias, Rng& rng);
  // attn_probs, when non-null, receives the post-softmax attention
  // [nw, heads, M^2, M^2] for inspection.
  Tensor forward(const Tensor& x, std::vector<double>* attn_probs = nullptr) const;
  void named_params(const std::string& prefix, NamedParams& out) const;
};

// Pre-norm residual block: x + attn(LN(x)), then y + KAN(LN(y)).
struct SwinKanBlock {
  LayerNorm ln1, ln2;
  WindowAttention attn;
  KanLayer kan_in, kan_out;  // C -> hidden -> C

  SwinKanBlock(int64_t dim, int64_t h, int64_t w, int heads, int window,
               bool shifted, const BackboneConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void named_params(const std::string& prefix, NamedParams& out) const;
};

struct PatchEmbed {
  Tensor w, b;  // [48, C], [C]
  LayerNorm ln;
  IndexVec patch_idx;
  int64_t img_h = 0, img_w = 0, embed_dim = 0;

  PatchEmbed(int64_t img_h, int64_t img_w, int64_t embed_dim, Rng& rng);
  Tensor forward(const Tensor& image) const;  // [3,H,W] -> [H/4*W/4, C]
  void named_params(const std::string& prefix, NamedParams& out) const;
};

// 2x2 neighborhood concat (4c) -> layernorm -> linear 4c -> 2c.
struct PatchMerge {
  LayerNorm ln;
  Tensor w;  // [4c, 2c]
  IndexVec group_idx;
  int64_t in_dim = 0, h = 0, wgrid = 0;

  PatchMerge(int64_t c, int64_t h, int64_t w, Rng& rng);
  Tensor forward(const Tensor& tokens) const;  // [h*w, c] -> [h/2*w/2, 2c]
  void named_params(const std::string& prefix, NamedParams& out) const;
};

struct Backbone {
  BackboneConfig cfg;
  PatchEmbed embed;
  std::vector<std::vector<SwinKanBlock>> stages;  // 4 stages
  std::vector<PatchMerge> merges;                 // after stages 0..2

  Backbone(const BackboneConfig& cfg, Rng& rng);
  StageFeatures forward(const Tensor& image) const;
  void named_params(const std::string& prefix, NamedParams& out) const;
};

}  // namespace cmsk

#include "cmsk/swin.hpp"

#include <cmath>

namespace cmsk {

void BackboneConfig::validate() const {
  check(embed_dim > 0, "backbone: embed_dim must be positive");
  check(img_h % 32 == 0 && img_w % 32 == 0,
        "backbone: input resolution must be divisible by 32, got " +
            std::to_string(img_h) + "x" + std::to_string(img_w));
  for (int s = 0; s < 4; ++s) {
    check(depths[s] >= 1, "backbone: stage depths must be >= 1");
    int64_t width = embed_dim << s;
    check(width % num_heads[s] == 0,
          "backbone: heads must divide stage width (stage " +
              std::to_string(s) + ": " + std::to_string(width) + " / " +
              std::to_string(num_heads[s]) + ")");
    int64_t res_h = img_h / (4LL << s), res_w = img_w / (4LL << s);
    int64_t m = std::min<int64_t>(window, std::min(res_h, res_w));
    check(res_h % m == 0 && res_w % m == 0,
          "backbone: window " + std::to_string(m) +
              " does not tile stage resolution " + std::to_string(res_h) +
              "x" + std::to_string(res_w));
  }
}

static Tensor he_normal(Shape shape, int64_t fan_in, Rng& rng) {
  std::vector<double> d(shape_numel(shape));
  double std = std::sqrt(2.0 / fan_in);
  for (double& v : d) v = rng.normal(0.0, std);
  return Tensor::from_data(std::move(shape), std::move(d), true);
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

LayerNorm::LayerNorm(int64_t d) : dim(d) {
  gamma = Tensor::full({dim}, 1.0, true);
  beta = Tensor::zeros({dim}, true);
}

Tensor LayerNorm::forward(const Tensor& x) const {
  check(x.rank() == 2 && x.dim(1) == dim,
        "layernorm: expected [N," + std::to_string(dim) + "], got " +
            shape_str(x.shape()));
  Tensor m = mean(x, {1}, true);
  Tensor centered = sub(x, m);
  Tensor var = mean(mul(centered, centered), {1}, true);
  Tensor norm = div(centered, sqrt_t(add_scalar(var, eps)));
  return add(mul(norm, gamma), beta);
}

void LayerNorm::named_params(const std::string& p, NamedParams& out) const {
  out.push_back({p + ".gamma", gamma});
  out.push_back({p + ".beta", beta});
}

// ---------------------------------------------------------------------------
// WindowAttention
// ---------------------------------------------------------------------------

WindowAttention::WindowAttention(int64_t dim_, int64_t h_, int64_t w_,
                                 int heads_, int window_, bool shifted_,
                                 bool rel_bias, Rng& rng)
    : dim(dim_), h(h_), w(w_), heads(heads_), window(window_),
      shifted(shifted_) {
  check(dim % heads == 0, "window attention: heads must divide channels");
  win_eff = static_cast<int>(std::min<int64_t>(window, std::min(h, w)));
  check(h % win_eff == 0 && w % win_eff == 0,
        "window attention: window does not tile " + std::to_string(h) + "x" +
            std::to_string(w));
  // shifting is meaningful only when there is more than one window
  shift = (shifted && (h > win_eff || w > win_eff)) ? win_eff / 2 : 0;

  wq = he_normal({dim, dim}, dim, rng);
  wk = he_normal({dim, dim}, dim, rng);
  wv = he_normal({dim, dim}, dim, rng);
  bq = Tensor::zeros({dim}, true);
  bk = Tensor::zeros({dim}, true);
  bv = Tensor::zeros({dim}, true);
  proj_w = he_normal({dim, dim}, dim, rng);
  proj_b = Tensor::zeros({dim}, true);

  int M = win_eff;
  int64_t nwh = h / M, nww = w / M;
  auto perm = std::make_shared<std::vector<int64_t>>();
  perm->reserve(h * w);
  for (int64_t wr = 0; wr < nwh; ++wr)
    for (int64_t wc = 0; wc < nww; ++wc)
      for (int r = 0; r < M; ++r)
        for (int c = 0; c < M; ++c)
          perm->push_back((wr * M + r) * w + wc * M + c);
  win_perm = perm;
  auto unperm = std::make_shared<std::vector<int64_t>>(h * w);
  for (int64_t i = 0; i < h * w; ++i) (*unperm)[(*perm)[i]] = i;
  win_unperm = unperm;

  if (rel_bias) {
    int64_t table = (2 * M - 1) * (2 * M - 1);
    std::vector<double> t(table * heads);
    for (double& v : t) v = rng.normal(0.0, 0.02);
    rel_bias_table = Tensor::from_data({table, heads}, std::move(t), true);
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(static_cast<int64_t>(M) * M * M * M);
    for (int i = 0; i < M * M; ++i)
      for (int j = 0; j < M * M; ++j) {
        int dy = i / M - j / M + M - 1;
        int dx = i % M - j % M + M - 1;
        idx->push_back(dy * (2 * M - 1) + dx);
      }
    rel_index = idx;
  }

  if (shift > 0) {
    // region ids of the shifted grid; cross-region pairs get -1e9
    auto region = [&](int64_t y, int64_t n) {
      if (y < n - M) return 0;
      if (y < n - shift) return 1;
      return 2;
    };
    std::vector<int> id(h * w);
    for (int64_t r = 0; r < h; ++r)
      for (int64_t c = 0; c < w; ++c) {
        int64_t sr = (r + shift) % h, sc = (c + shift) % w;
        id[r * w + c] = region(sr, h) * 3 + region(sc, w);
      }
    int64_t nw = nwh * nww, m2 = static_cast<int64_t>(M) * M;
    std::vector<double> md(nw * m2 * m2, 0.0);
    for (int64_t win = 0; win < nw; ++win)
      for (int64_t i = 0; i < m2; ++i)
        for (int64_t j = 0; j < m2; ++j) {
          int ri = id[(*perm)[win * m2 + i]];
          int rj = id[(*perm)[win * m2 + j]];
          if (ri != rj) md[(win * m2 + i) * m2 + j] = -1e9;
        }
    mask = Tensor::from_data({nw, 1, m2, m2}, std::move(md), false);
  }
}

Tensor WindowAttention::forward(const Tensor& x,
                                std::vector<double>* attn_probs) const {
  check(x.rank() == 2 && x.dim(0) == h * w && x.dim(1) == dim,
        "window attention: expected [" + std::to_string(h * w) + "," +
            std::to_string(dim) + "], got " + shape_str(x.shape()));
  int M = win_eff;
  int64_t m2 = static_cast<int64_t>(M) * M;
  int64_t nw = (h / M) * (w / M);
  int64_t d = dim / heads;

  Tensor x0 = shift > 0 ? cyclic_shift(x, h, w, -shift, -shift) : x;
  Tensor xw = take_rows(x0, win_perm);  // [nw*m2, C] in window order

  auto split_heads = [&](const Tensor& t) {
    return permute(reshape(t, {nw, m2, heads, d}), {0, 2, 1, 3});
  };
  Tensor q = split_heads(add(matmul(xw, wq), bq));
  Tensor k = split_heads(add(matmul(xw, wk), bk));
  Tensor v = split_heads(add(matmul(xw, wv), bv));

  Tensor logits = scale(matmul(q, permute(k, {0, 1, 3, 2})), 1.0 / std::sqrt(d));
  if (rel_bias_table.defined()) {
    Tensor bias = permute(
        reshape(take_rows(rel_bias_table, rel_index), {m2, m2, heads}),
        {2, 0, 1});
    logits = add(logits, reshape(bias, {1, heads, m2, m2}));
  }
  if (mask.defined()) logits = add(logits, mask);
  Tensor attn = softmax(logits, 3);
  if (attn_probs) *attn_probs = attn.data();

  Tensor out = permute(matmul(attn, v), {0, 2, 1, 3});  // [nw, m2, heads, d]
  out = take_rows(reshape(out, {nw * m2, dim}), win_unperm);
  out = add(matmul(out, proj_w), proj_b);
  if (shift > 0) out = cyclic_shift(out, h, w, shift, shift);
  return out;
}

void WindowAttention::named_params(const std::string& p,
                                   NamedParams& out) const {
  out.push_back({p + ".wq", wq});
  out.push_back({p + ".wk", wk});
  out.push_back({p + ".wv", wv});
  out.push_back({p + ".bq", bq});
  out.push_back({p + ".bk", bk});
  out.push_back({p + ".bv", bv});
  out.push_back({p + ".proj_w", proj_w});
  out.push_back({p + ".proj_b", proj_b});
  if (rel_bias_table.defined())
    out.push_back({p + ".rel_bias_table", rel_bias_table});
}

// ---------------------------------------------------------------------------
// SwinKanBlock
// ---------------------------------------------------------------------------

static int64_t kan_hidden(int64_t dim, double ratio) {
  return std::max<int64_t>(1, std::llround(dim * ratio));
}

SwinKanBlock::SwinKanBlock(int64_t dim, int64_t h, int64_t w, int heads,
                           int window, bool shifted, const BackboneConfig& cfg,
                           Rng& rng)
    : ln1(dim), ln2(dim),
      attn(dim, h, w, heads, window, shifted, cfg.rel_pos_bias, rng),
      kan_in(KanLayer::init(dim, kan_hidden(dim, cfg.kan_expansion),
                            cfg.kan.make(), rng)),
      kan_out(KanLayer::init(kan_hidden(dim, cfg.kan_expansion), dim,
                             cfg.kan.make(), rng)) {}

Tensor SwinKanBlock::forward(const Tensor& x) const {
  Tensor y = add(x, attn.forward(ln1.forward(x)));
  return add(y, kan_out.forward(kan_in.forward(ln2.forward(y))));
}

void SwinKanBlock::named_params(const std::string& p, NamedParams& out) const {
  ln1.named_params(p + ".ln1", out);
  attn.named_params(p + ".attn", out);
  ln2.named_params(p + ".ln2", out);
  kan_in.named_params(p + ".kan_in", out);
  kan_out.named_params(p + ".kan_out", out);
}

// ---------------------------------------------------------------------------
// PatchEmbed
// ---------------------------------------------------------------------------

PatchEmbed::PatchEmbed(int64_t H, int64_t W, int64_t C, Rng& rng)
    : ln(C), img_h(H), img_w(W), embed_dim(C) {
  check(H % 4 == 0 && W % 4 == 0,
        "patch embed: resolution must be divisible by 4, got " +
            std::to_string(H) + "x" + std::to_string(W));
  w = he_normal({48, C}, 48, rng);
  b = Tensor::zeros({C}, true);
  auto idx = std::make_shared<std::vector<int64_t>>();
  idx->reserve((H / 4) * (W / 4) * 48);
  for (int64_t pr = 0; pr < H / 4; ++pr)
    for (int64_t pc = 0; pc < W / 4; ++pc)
      for (int dy = 0; dy < 4; ++dy)
        for (int dx = 0; dx < 4; ++dx)
          for (int ch = 0; ch < 3; ++ch)
            idx->push_back(ch * H * W + (pr * 4 + dy) * W + pc * 4 + dx);
  patch_idx = idx;
}

Tensor PatchEmbed::forward(const Tensor& image) const {
  check(image.rank() == 3 && image.dim(0) == 3 && image.dim(1) == img_h &&
            image.dim(2) == img_w,
        "patch embed: expected [3," + std::to_string(img_h) + "," +
            std::to_string(img_w) + "], got " + shape_str(image.shape()));
  int64_t n = (img_h / 4) * (img_w / 4);
  Tensor patches = take(image, patch_idx, {n, 48});
  return ln.forward(add(matmul(patches, w), b));
}

void PatchEmbed::named_params(const std::string& p, NamedParams& out) const {
  out.push_back({p + ".w", w});
  out.push_back({p + ".b", b});
  ln.named_params(p + ".ln", out);
}

// ---------------------------------------------------------------------------
// PatchMerge
// ---------------------------------------------------------------------------

PatchMerge::PatchMerge(int64_t c, int64_t h_, int64_t w_, Rng& rng)
    : ln(4 * c), in_dim(c), h(h_), wgrid(w_) {
  check(h % 2 == 0 && wgrid % 2 == 0,
        "patch merge: resolution must be even, got " + std::to_string(h) +
            "x" + std::to_string(wgrid));
  w = he_normal({4 * c, 2 * c}, 4 * c, rng);
  auto idx = std::make_shared<std::vector<int64_t>>();
  idx->reserve(h * wgrid);
  for (int64_t r = 0; r < h / 2; ++r)
    for (int64_t col = 0; col < wgrid / 2; ++col) {
      idx->push_back((2 * r) * wgrid + 2 * col);
      idx->push_back((2 * r + 1) * wgrid + 2 * col);
      idx->push_back((2 * r) * wgrid + 2 * col + 1);
      idx->push_back((2 * r + 1) * wgrid + 2 * col + 1);
    }
  group_idx = idx;
}

Tensor PatchMerge::forward(const Tensor& tokens) const {
  check(tokens.rank() == 2 && tokens.dim(0) == h * wgrid &&
            tokens.dim(1) == in_dim,
        "patch merge: expected [" + std::to_string(h * wgrid) + "," +
            std::to_string(in_dim) + "], got " + shape_str(tokens.shape()));
  Tensor grouped =
      reshape(take_rows(tokens, group_idx), {h / 2 * (wgrid / 2), 4 * in_dim});
  return matmul(ln.forward(grouped), w);
}

void PatchMerge::named_params(const std::string& p, NamedParams& out) const {
  ln.named_params(p + ".ln", out);
  out.push_back({p + ".w", w});
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

Backbone::Backbone(const BackboneConfig& c, Rng& rng)
    : cfg(c), embed(c.img_h, c.img_w, c.embed_dim, rng) {
  cfg.validate();
  int64_t width = cfg.embed_dim;
  int64_t h = cfg.img_h / 4, w = cfg.img_w / 4;
  for (int s = 0; s < 4; ++s) {
    std::vector<SwinKanBlock> blocks;
    for (int bidx = 0; bidx < cfg.depths[s]; ++bidx)
      blocks.emplace_back(width, h, w, cfg.num_heads[s], cfg.window,
                          bidx % 2 == 1, cfg, rng);
    stages.push_back(std::move(blocks));
    if (s < 3) {
      merges.emplace_back(width, h, w, rng);
      width *= 2;
      h /= 2;
      w /= 2;
    }
  }
}

StageFeatures Backbone::forward(const Tensor& image) const {
  StageFeatures sf;
  Tensor x = embed.forward(image);
  int64_t h = cfg.img_h / 4, w = cfg.img_w / 4;
  for (int s = 0; s < 4; ++s) {
    for (const SwinKanBlock& b : stages[s]) x = b.forward(x);
    if (s < 3) {
      x = merges[s].forward(x);
      h /= 2;
      w /= 2;
      Tensor chw = tokens_to_chw(x, h, w);
      if (s == 0) sf.f1 = chw;
      if (s == 1) sf.f2 = chw;
      if (s == 2) sf.f3 = chw;
    } else {
      sf.f4 = tokens_to_chw(x, h, w);
    }
  }
  return sf;
}

void Backbone::named_params(const std::string& p, NamedParams& out) const {
  embed.named_params(p + ".embed", out);
  for (int s = 0; s < 4; ++s) {
    for (size_t bidx = 0; bidx < stages[s].size(); ++bidx)
      stages[s][bidx].named_params(
          p + ".stage" + std::to_string(s) + ".block" + std::to_string(bidx),
          out);
    if (s < 3)
      merges[s].named_params(p + ".merge" + std::to_string(s), out);
  }
}

}  // namespace cmsk

#include "cmsk/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace cmsk {

AdamW::AdamW(std::vector<Tensor> p, double lr_, double wd)
    : params(std::move(p)), lr(lr_), weight_decay(wd) {
  check(lr > 0, "adamw: learning rate must be positive");
  check(weight_decay >= 0, "adamw: weight decay must be nonnegative");
  for (const Tensor& t : params) {
    check(t.requires_grad(), "adamw: parameter without gradient tracking");
    m.push_back(std::vector<double>(size_t(t.numel()), 0.0));
    v.push_back(std::vector<double>(size_t(t.numel()), 0.0));
  }
}

void AdamW::zero_grad() {
  for (Tensor& t : params) t.zero_grad();
}

void AdamW::step() {
  ++t;
  double bc1 = 1.0 - std::pow(beta1, double(t));
  double bc2 = 1.0 - std::pow(beta2, double(t));
  for (size_t p = 0; p < params.size(); ++p) {
    auto& theta = params[p].mutable_data();
    const auto& g = params[p].grad();
    for (size_t i = 0; i < theta.size(); ++i) {
      m[p][i] = beta1 * m[p][i] + (1.0 - beta1) * g[i];
      v[p][i] = beta2 * v[p][i] + (1.0 - beta2) * g[i] * g[i];
      double mhat = m[p][i] / bc1, vhat = v[p][i] / bc2;
      // decoupled decay: applied directly to the parameter, not the gradient
      theta[i] -= lr * weight_decay * theta[i];
      theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

double cosine_lr(double base, int64_t t, int64_t horizon) {
  check(horizon >= 1, "cosine schedule: horizon must be positive");
  double frac = std::clamp(double(t) / double(horizon), 0.0, 1.0);
  return 0.5 * base * (1.0 + std::cos(M_PI * frac));
}

void TrainConfig::validate() const {
  check(epochs >= 1 && batch_size >= 1, "train config: epochs and batch size must be >= 1");
  check(lr > 0, "train config: learning rate must be positive");
  check(warmup_frac >= 0 && warmup_frac < 1, "train config: warmup fraction must be in [0,1)");
  check(aug_shift >= 0, "train config: augmentation shift must be >= 0");
}

namespace {

// cyclic translation of a [C,h,w] image (augmentation; no gradient needed)
Tensor roll_image(const Tensor& img, int64_t dy, int64_t dx) {
  int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<double> out(size_t(c * h * w));
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        out[size_t((ch * h + y) * w + x)] =
            img.data()[size_t((ch * h + (y + dy) % h) * w + (x + dx) % w)];
  return Tensor::from_data({c, h, w}, std::move(out));
}

}  // namespace

MetricsReport evaluate(Model& model, const Dataset& data) {
  check(!data.images.empty(), "evaluate: empty dataset");
  std::vector<int> preds;
  std::vector<std::vector<double>> scores;
  for (const Tensor& img : data.images) {
    Tensor p = softmax(model.forward(img, false), 0);
    scores.push_back(p.data());
    preds.push_back(int(std::max_element(p.data().begin(), p.data().end()) -
                        p.data().begin()));
  }
  return compute_metrics(data.labels, preds, scores,
                         int(model.cfg.num_classes));
}

TrainResult train(Model& model, const Dataset& train_set,
                  const Dataset& test_set, const TrainConfig& cfg,
                  double stop_acc,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  check(!train_set.images.empty(), "train: empty training set");
  for (int l : train_set.labels)
    check(l >= 0 && l < model.cfg.num_classes,
          "train: label out of range for the model's class count");

  NamedParams np;
  model.named_params(np);
  std::vector<Tensor> params;
  for (auto& [name, t] : np) params.push_back(t);
  AdamW opt(params, cfg.lr, cfg.weight_decay);

  int64_t n = int64_t(train_set.images.size());
  int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  int64_t total_steps = steps_per_epoch * cfg.epochs;
  int64_t warmup = int64_t(std::floor(cfg.warmup_frac * double(total_steps)));

  Rng rng(cfg.seed);
  size_t n_sz = size_t(n);
  std::vector<int64_t> order(n_sz);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0;
    double last_lr = cfg.lr;
    for (int64_t b = 0; b < n; b += cfg.batch_size) {
      double lr = step < warmup
                      ? cfg.lr * double(step + 1) / double(warmup)
                      : cosine_lr(cfg.lr, step - warmup, total_steps - warmup);
      opt.lr = lr;
      last_lr = lr;
      opt.zero_grad();
      int64_t bs = std::min<int64_t>(cfg.batch_size, n - b);
      double batch_loss = 0;
      for (int64_t i = 0; i < bs; ++i) {
        int64_t idx = order[size_t(b + i)];
        Tensor img = train_set.images[size_t(idx)];
        if (cfg.aug_shift > 0)
          img = roll_image(img, rng.uniform_int(0, cfg.aug_shift - 1),
                           rng.uniform_int(0, cfg.aug_shift - 1));
        Tensor loss =
            cross_entropy(model.forward(img, true), train_set.labels[size_t(idx)]);
        batch_loss += loss.item();
        loss.backward(1.0 / double(bs));  // mean over the batch
      }
      batch_loss /= double(bs);
      check(std::isfinite(batch_loss),
            "train: loss diverged (NaN/inf) at epoch " +
                std::to_string(epoch) + ", step " + std::to_string(step));
      epoch_loss += batch_loss * double(bs);
      opt.step();
      ++step;
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_loss / double(n);
    log.lr = last_lr;
    if (!test_set.images.empty()) log.test = evaluate(model, test_set);
    if (cfg.verbose)
      std::printf("epoch %d loss %.4f lr %.5f test_acc %.4f\n", epoch,
                  log.train_loss, log.lr, log.test.acc);
    if (on_epoch) on_epoch(log);
    result.history.push_back(log);
    if (stop_acc > 0 && !test_set.images.empty() && log.test.acc >= stop_acc)
      break;
  }
  return result;
}

}  // namespace cmsk

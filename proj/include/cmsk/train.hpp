#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cmsk/data.hpp"
#include "cmsk/metrics.hpp"
#include "cmsk/model.hpp"

namespace cmsk {

// Decoupled-weight-decay Adam over a fixed parameter list.
struct AdamW {
  std::vector<Tensor> params;
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
  int64_t t = 0;
  std::vector<std::vector<double>> m, v;

  AdamW(std::vector<Tensor> params, double lr, double weight_decay);
  void zero_grad();
  void step();
};

// 0.5 * base * (1 + cos(pi * t / horizon)); monotone from base to 0.
double cosine_lr(double base, int64_t t, int64_t horizon);

struct TrainConfig {
  int epochs = 15;
  int batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double warmup_frac = 0.05;  // linear warmup over this share of all steps
  // Cyclic-translation augmentation: every training image is rolled by a
  // random offset in [0, aug_shift) per axis. 0 disables augmentation.
  int aug_shift = 8;
  uint64_t seed = 0;
  bool verbose = false;
  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double lr = 0;
  MetricsReport test;
};

struct TrainResult {
  std::vector<EpochLog> history;
  bool diverged = false;
};

MetricsReport evaluate(Model& model, const Dataset& data);

// Cross-entropy training with AdamW and warmup+cosine learning rate.
// Throws on NaN loss (divergence). stop_acc, when > 0, stops early once the
// test accuracy reaches it.
TrainResult train(Model& model, const Dataset& train_set,
                  const Dataset& test_set, const TrainConfig& cfg,
                  double stop_acc = 0.0,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace cmsk

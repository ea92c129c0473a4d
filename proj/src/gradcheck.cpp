#include "cmsk/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace cmsk {

GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Tensor>& params, Rng& rng,
                                  int64_t sample_count, double eps) {
  for (const Tensor& p : params) {
    Tensor q = p;
    q.zero_grad();
  }
  Tensor loss = loss_fn();
  loss.backward();

  std::vector<std::pair<int, int64_t>> entries;
  int64_t total = 0;
  for (const Tensor& p : params) total += p.numel();
  if (sample_count > 0 && sample_count < total) {
    for (int64_t s = 0; s < sample_count; ++s) {
      int64_t flat = rng.uniform_int(0, total - 1);
      for (size_t pi = 0; pi < params.size(); ++pi) {
        if (flat < params[pi].numel()) {
          entries.push_back({static_cast<int>(pi), flat});
          break;
        }
        flat -= params[pi].numel();
      }
    }
  } else {
    for (size_t pi = 0; pi < params.size(); ++pi)
      for (int64_t i = 0; i < params[pi].numel(); ++i)
        entries.push_back({static_cast<int>(pi), i});
  }

  GradCheckResult res;
  for (auto [pi, i] : entries) {
    Tensor p = params[pi];
    double saved = p.data()[i];
    p.mutable_data()[i] = saved + eps;
    double lp = loss_fn().item();
    p.mutable_data()[i] = saved - eps;
    double lm = loss_fn().item();
    p.mutable_data()[i] = saved;
    double fd = (lp - lm) / (2.0 * eps);
    double ad = p.has_grad() ? p.grad()[i] : 0.0;
    double denom = std::max({std::fabs(fd), std::fabs(ad), 1e-3});
    res.max_rel_err = std::max(res.max_rel_err, std::fabs(fd - ad) / denom);
    ++res.entries_checked;
  }
  return res;
}

}  // namespace cmsk

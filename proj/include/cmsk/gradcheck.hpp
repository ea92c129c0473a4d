#pragma once

#include <functional>
#include <vector>

#include "cmsk/rng.hpp"
#include "cmsk/tensor.hpp"

namespace cmsk {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t entries_checked = 0;
};

// Central finite differences vs reverse-mode gradients. loss_fn must build a
// fresh graph on every call and depend on the current parameter values.
// When sample_count > 0, checks a random subsample of parameter entries,
// otherwise every entry.
GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Tensor>& params,
                                  Rng& rng, int64_t sample_count = 0,
                                  double eps = 1e-5);

}  // namespace cmsk

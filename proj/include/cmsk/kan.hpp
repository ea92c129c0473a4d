#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cmsk/rng.hpp"
#include "cmsk/tensor.hpp"

namespace cmsk {

// B-spline knot grid. Inputs outside [lo, hi] are clamped at evaluation time;
// all validation happens at construction.
struct SplineGrid {
  std::vector<double> knots;  // t_0 < t_1 < ... < t_n
  int order = 3;              // k
  double lo = -1.0, hi = 1.0;

  SplineGrid(std::vector<double> knots, int order, double lo, double hi);
  static SplineGrid uniform(int order, int intervals, double lo, double hi);

  int64_t num_basis() const {
    return static_cast<int64_t>(knots.size()) - 1 - order;  // n - k
  }
  // Writes num_basis() values N_{i,k}(clamp(x)); deriv (optional) gets
  // dN/dx, zero outside [lo, hi].
  void eval(double x, double* values, double* deriv = nullptr) const;
};

// Basis values of every element of x: shape(x) + [num_basis].
// Differentiable with respect to x.
Tensor bspline_basis(const Tensor& x, const SplineGrid& grid);
std::vector<double> bspline_basis(double x, const SplineGrid& grid);

// Learnable spline activation layer: out = w_b.silu(x) + w_s.spline(x) summed
// over input edges.
struct KanLayer {
  int64_t in_dim = 0, out_dim = 0;
  SplineGrid grid;
  Tensor w_b;    // [out, in]
  Tensor w_s;    // [out, in]
  Tensor coeff;  // [out, in, num_basis]

  KanLayer(int64_t in_dim, int64_t out_dim, SplineGrid grid);

  // He-normal base weights (fan_in = in_dim), small-scale He-normal spline
  // weights, coefficient noise of scale 0.1.
  static KanLayer init(int64_t in_dim, int64_t out_dim, const SplineGrid& grid,
                       Rng& rng);

  Tensor forward(const Tensor& x) const;  // [N, in] -> [N, out]
  void named_params(const std::string& prefix,
                    std::vector<std::pair<std::string, Tensor>>& out) const;
};

}  // namespace cmsk

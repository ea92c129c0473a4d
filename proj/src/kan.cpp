#include "cmsk/kan.hpp"

#include <algorithm>
#include <cmath>

namespace cmsk {

SplineGrid::SplineGrid(std::vector<double> k, int ord, double l, double h)
    : knots(std::move(k)), order(ord), lo(l), hi(h) {
  check(order >= 0, "spline grid: order must be >= 0");
  int64_t n = static_cast<int64_t>(knots.size()) - 1;
  check(n >= 2 * order + 1, "spline grid: need at least " +
                                std::to_string(2 * order + 2) + " knots, got " +
                                std::to_string(knots.size()));
  for (size_t i = 1; i < knots.size(); ++i)
    check(knots[i] > knots[i - 1], "spline grid: knots must strictly increase");
  check(lo < hi, "spline grid: empty input range");
  check(lo >= knots[order] && hi <= knots[n - order],
        "spline grid: [lo,hi] must lie within [t_k, t_{n-k}]");
}

SplineGrid SplineGrid::uniform(int order, int intervals, double lo, double hi) {
  check(intervals >= 1, "spline grid: need at least one interval");
  check(lo < hi, "spline grid: empty input range");
  double step = (hi - lo) / intervals;
  std::vector<double> knots;
  for (int i = -order; i <= intervals + order; ++i)
    knots.push_back(lo + i * step);
  return SplineGrid(std::move(knots), order, lo, hi);
}

void SplineGrid::eval(double x, double* values, double* deriv) const {
  bool outside = x < lo || x > hi;
  double xc = std::clamp(x, lo, hi);
  int64_t n = static_cast<int64_t>(knots.size()) - 1;
  int64_t nb = num_basis();
  int k = order;

  // order-0 indicators over the half-open spans [t_j, t_{j+1}); the right
  // boundary of the range belongs to the last covered span
  int64_t span =
      std::upper_bound(knots.begin(), knots.end(), xc) - knots.begin() - 1;
  span = std::clamp<int64_t>(span, k, n - k - 1);
  std::vector<double> cur(n, 0.0), prev;
  cur[span] = 1.0;

  auto ratio = [&](int64_t i, int d) {
    double den = knots[i + d] - knots[i];
    return den == 0.0 ? 0.0 : (xc - knots[i]) / den;  // 0/0 := 0
  };
  for (int d = 1; d <= k; ++d) {
    prev = cur;
    for (int64_t i = 0; i + d <= n - 1; ++i)
      cur[i] = ratio(i, d) * prev[i] + (1.0 - ratio(i + 1, d)) * prev[i + 1];
  }
  std::copy(cur.begin(), cur.begin() + nb, values);

  if (deriv) {
    std::fill(deriv, deriv + nb, 0.0);
    if (!outside && k >= 1) {
      // prev holds the order k-1 values here
      for (int64_t i = 0; i < nb; ++i) {
        double d1 = knots[i + k] - knots[i];
        double d2 = knots[i + k + 1] - knots[i + 1];
        double a = d1 == 0.0 ? 0.0 : prev[i] / d1;
        double b = d2 == 0.0 ? 0.0 : prev[i + 1] / d2;
        deriv[i] = k * (a - b);
      }
    }
  }
}

std::vector<double> bspline_basis(double x, const SplineGrid& grid) {
  std::vector<double> v(grid.num_basis());
  grid.eval(x, v.data());
  return v;
}

Tensor bspline_basis(const Tensor& x, const SplineGrid& grid) {
  int64_t n = x.numel();
  int64_t nb = grid.num_basis();
  std::vector<double> vals(n * nb), derivs(n * nb);
  for (int64_t i = 0; i < n; ++i)
    grid.eval(x.data()[i], vals.data() + i * nb, derivs.data() + i * nb);
  Shape out = x.shape();
  out.push_back(nb);
  auto node = std::make_shared<AutogradNode>();
  node->shape = std::move(out);
  node->data = std::move(vals);
  node->op_name = "bspline_basis";
  if (x.requires_grad()) {
    auto dv = std::make_shared<std::vector<double>>(std::move(derivs));
    node->requires_grad = true;
    node->inputs = {x};
    node->backward_fn = [dv, nb](AutogradNode& self) {
      auto& g = self.inputs[0].node()->grad_buffer();
      for (int64_t i = 0; i < static_cast<int64_t>(g.size()); ++i) {
        double acc = 0.0;
        for (int64_t m = 0; m < nb; ++m)
          acc += self.grad[i * nb + m] * (*dv)[i * nb + m];
        g[i] += acc;
      }
    };
  }
  return Tensor(node);
}

KanLayer::KanLayer(int64_t in, int64_t out, SplineGrid g)
    : in_dim(in), out_dim(out), grid(std::move(g)) {
  check(in_dim > 0 && out_dim > 0, "kan layer: dims must be positive");
  int64_t nb = grid.num_basis();
  w_b = Tensor::zeros({out_dim, in_dim}, true);
  w_s = Tensor::zeros({out_dim, in_dim}, true);
  coeff = Tensor::zeros({out_dim, in_dim, nb}, true);
}

KanLayer KanLayer::init(int64_t in, int64_t out, const SplineGrid& grid,
                        Rng& rng) {
  KanLayer layer(in, out, grid);
  double he = std::sqrt(2.0 / in);
  for (double& v : layer.w_b.mutable_data()) v = rng.normal(0.0, he);
  for (double& v : layer.w_s.mutable_data()) v = rng.normal(0.0, 0.5 * he);
  for (double& v : layer.coeff.mutable_data()) v = rng.normal(0.0, 0.1);
  return layer;
}

Tensor KanLayer::forward(const Tensor& x) const {
  check(x.rank() == 2 && x.dim(1) == in_dim,
        "kan layer: expected input [N," + std::to_string(in_dim) + "], got " +
            shape_str(x.shape()));
  int64_t nb = grid.num_basis();
  Tensor base = matmul(silu(x), permute(w_b, {1, 0}));
  // fold w_s into the coefficients so the spline path is one matmul
  Tensor eff = mul(coeff, reshape(w_s, {out_dim, in_dim, 1}));
  Tensor basis = reshape(bspline_basis(x, grid), {x.dim(0), in_dim * nb});
  Tensor spline = matmul(basis, permute(reshape(eff, {out_dim, in_dim * nb}),
                                        {1, 0}));
  return add(base, spline);
}

void KanLayer::named_params(
    const std::string& prefix,
    std::vector<std::pair<std::string, Tensor>>& out) const {
  out.push_back({prefix + ".w_b", w_b});
  out.push_back({prefix + ".w_s", w_s});
  out.push_back({prefix + ".coeff", coeff});
}

}  // namespace cmsk

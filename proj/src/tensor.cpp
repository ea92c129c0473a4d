#include "cmsk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace cmsk {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::vector<double>& AutogradNode::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

static std::shared_ptr<AutogradNode> new_leaf(Shape shape,
                                              std::vector<double> data,
                                              bool requires_grad) {
  check(shape_numel(shape) == static_cast<int64_t>(data.size()),
        "tensor data length " + std::to_string(data.size()) +
            " does not match shape " + shape_str(shape));
  for (int64_t d : shape)
    check(d > 0, "tensor dims must be positive, got " + shape_str(shape));
  auto n = std::make_shared<AutogradNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), 0.0);
  return Tensor(new_leaf(std::move(shape), std::move(d), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), value);
  return Tensor(new_leaf(std::move(shape), std::move(d), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  return Tensor(new_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }
int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  check(i >= 0 && i < r, "dim index out of range");
  return node_->shape[i];
}
int64_t Tensor::numel() const { return static_cast<int64_t>(node_->data.size()); }
bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return !node_->backward_fn; }
const std::vector<double>& Tensor::data() const { return node_->data; }
std::vector<double>& Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  check(numel() == 1, "item() requires a scalar tensor, got " +
                          shape_str(node_->shape));
  return node_->data[0];
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }
const std::vector<double>& Tensor::grad() const {
  check(has_grad(), "tensor has no gradient");
  return node_->grad;
}
std::vector<double>& Tensor::mutable_grad() { return node_->grad_buffer(); }
void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

void Tensor::backward(double seed) const {
  check(numel() == 1, "backward() requires a scalar loss, got " +
                          shape_str(node_->shape));
  check(node_->requires_grad, "backward() on a tensor with no grad path");

  // Reverse topological order via iterative DFS.
  std::vector<AutogradNode*> order;
  std::unordered_set<AutogradNode*> seen;
  std::vector<std::pair<AutogradNode*, size_t>> stack;
  stack.push_back({node_.get(), 0});
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->inputs.size()) {
      AutogradNode* in = n->inputs[i].node().get();
      ++i;
      if (in->requires_grad && !seen.count(in)) {
        seen.insert(in);
        stack.push_back({in, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    AutogradNode* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

static Tensor make_op(const char* name, Shape shape, std::vector<double> data,
                      std::vector<Tensor> inputs,
                      std::function<void(AutogradNode&)> bwd) {
  auto n = std::make_shared<AutogradNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op_name = name;
  for (const Tensor& t : inputs)
    if (t.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(bwd);
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Broadcasting machinery
// ---------------------------------------------------------------------------

static Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    check(da == db || da == 1 || db == 1,
          "shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides, with stride 0 on broadcast dims, aligned to out rank.
static std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  int64_t stride = 1;
  for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
    size_t oi = out.size() - in.size() + i;
    st[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : stride;
    stride *= in[i];
  }
  return st;
}

namespace {
// Iterates a broadcast output shape, tracking input offsets.
struct BcastIter {
  const Shape& out;
  std::vector<int64_t> idx, sa, sb;
  int64_t oa = 0, ob = 0;
  explicit BcastIter(const Shape& o, std::vector<int64_t> a,
                     std::vector<int64_t> b)
      : out(o), idx(o.size(), 0), sa(std::move(a)), sb(std::move(b)) {}
  void advance() {
    for (int i = static_cast<int>(out.size()) - 1; i >= 0; --i) {
      ++idx[i];
      oa += sa[i];
      ob += sb[i];
      if (idx[i] < out[i]) return;
      idx[i] = 0;
      oa -= sa[i] * out[i];
      ob -= sb[i] * out[i];
    }
  }
};
}  // namespace

using Fn2 = double (*)(double, double);

static Tensor binary_op(const char* name, const Tensor& a, const Tensor& b,
                        Fn2 fwd, Fn2 dda, Fn2 ddb) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const auto& da = a.data();
  const auto& db = b.data();
  Shape out = broadcast_shape(sa, sb);
  int64_t n = shape_numel(out);
  std::vector<double> od(n);
  bool same = sa == sb;
  if (same) {
    for (int64_t i = 0; i < n; ++i) od[i] = fwd(da[i], db[i]);
  } else {
    BcastIter it(out, bcast_strides(sa, out), bcast_strides(sb, out));
    for (int64_t i = 0; i < n; ++i, it.advance())
      od[i] = fwd(da[it.oa], db[it.ob]);
  }
  return make_op(name, out, std::move(od), {a, b},
                 [fwd, dda, ddb, same](AutogradNode& self) {
                   (void)fwd;
                   const Tensor& ta = self.inputs[0];
                   const Tensor& tb = self.inputs[1];
                   const auto& xa = ta.data();
                   const auto& xb = tb.data();
                   const auto& og = self.grad;
                   int64_t n = static_cast<int64_t>(og.size());
                   if (same) {
                     if (ta.requires_grad()) {
                       auto& g = ta.node()->grad_buffer();
                       for (int64_t i = 0; i < n; ++i)
                         g[i] += dda(xa[i], xb[i]) * og[i];
                     }
                     if (tb.requires_grad()) {
                       auto& g = tb.node()->grad_buffer();
                       for (int64_t i = 0; i < n; ++i)
                         g[i] += ddb(xa[i], xb[i]) * og[i];
                     }
                     return;
                   }
                   BcastIter it(self.shape, bcast_strides(ta.shape(), self.shape),
                                bcast_strides(tb.shape(), self.shape));
                   std::vector<double>* ga =
                       ta.requires_grad() ? &ta.node()->grad_buffer() : nullptr;
                   std::vector<double>* gb =
                       tb.requires_grad() ? &tb.node()->grad_buffer() : nullptr;
                   for (int64_t i = 0; i < n; ++i, it.advance()) {
                     if (ga) (*ga)[it.oa] += dda(xa[it.oa], xb[it.ob]) * og[i];
                     if (gb) (*gb)[it.ob] += ddb(xa[it.oa], xb[it.ob]) * og[i];
                   }
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}
Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

using Fn1 = double (*)(double);

static Tensor unary_op(const char* name, const Tensor& a, Fn1 fwd, Fn1 dfn) {
  const auto& da = a.data();
  std::vector<double> od(da.size());
  for (size_t i = 0; i < da.size(); ++i) od[i] = fwd(da[i]);
  return make_op(name, a.shape(), std::move(od), {a},
                 [dfn](AutogradNode& self) {
                   const Tensor& ta = self.inputs[0];
                   if (!ta.requires_grad()) return;
                   const auto& x = ta.data();
                   auto& g = ta.node()->grad_buffer();
                   for (size_t i = 0; i < x.size(); ++i)
                     g[i] += dfn(x[i]) * self.grad[i];
                 });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; }, [](double) { return -1.0; });
}
Tensor exp_t(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double x) { return std::exp(x); });
}
Tensor log_t(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x) { return 1.0 / x; });
}
Tensor sqrt_t(const Tensor& a) {
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double x) { return 0.5 / std::sqrt(x); });
}
Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x) { return x > 0 ? 1.0 : 0.0; });
}
Tensor silu(const Tensor& a) {
  return unary_op(
      "silu", a,
      [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x) {
        double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor scale(const Tensor& a, double s) {
  const auto& da = a.data();
  std::vector<double> od(da.size());
  for (size_t i = 0; i < da.size(); ++i) od[i] = da[i] * s;
  return make_op("scale", a.shape(), std::move(od), {a},
                 [s](AutogradNode& self) {
                   const Tensor& ta = self.inputs[0];
                   auto& g = ta.node()->grad_buffer();
                   for (size_t i = 0; i < g.size(); ++i)
                     g[i] += s * self.grad[i];
                 });
}

Tensor add_scalar(const Tensor& a, double s) {
  const auto& da = a.data();
  std::vector<double> od(da.size());
  for (size_t i = 0; i < da.size(); ++i) od[i] = da[i] + s;
  return make_op("add_scalar", a.shape(), std::move(od), {a},
                 [](AutogradNode& self) {
                   auto& g = self.inputs[0].node()->grad_buffer();
                   for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                 });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      check(infer == -1, "reshape: at most one -1 dim");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[infer] = a.numel() / known;
  check(shape_numel(shape) == a.numel(),
        "reshape: cannot view " + shape_str(a.shape()) + " as " +
            shape_str(shape));
  return make_op("reshape", std::move(shape), a.data(), {a},
                 [](AutogradNode& self) {
                   auto& g = self.inputs[0].node()->grad_buffer();
                   for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                 });
}

static std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  int r = a.rank();
  check(static_cast<int>(perm.size()) == r, "permute: rank mismatch");
  Shape out(r);
  for (int i = 0; i < r; ++i) out[i] = a.shape()[perm[i]];
  auto in_st = row_major_strides(a.shape());
  // stride of output dim i in the input buffer
  std::vector<int64_t> st(r);
  for (int i = 0; i < r; ++i) st[i] = in_st[perm[i]];
  int64_t n = a.numel();
  const auto& da = a.data();
  std::vector<double> od(n);
  std::vector<int64_t> idx(r, 0);
  int64_t off = 0;
  for (int64_t i = 0; i < n; ++i) {
    od[i] = da[off];
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      off += st[d];
      if (idx[d] < out[d]) break;
      idx[d] = 0;
      off -= st[d] * out[d];
    }
  }
  return make_op("permute", out, std::move(od), {a},
                 [st, out](AutogradNode& self) {
                   auto& g = self.inputs[0].node()->grad_buffer();
                   int r = static_cast<int>(out.size());
                   std::vector<int64_t> idx(r, 0);
                   int64_t off = 0;
                   int64_t n = static_cast<int64_t>(self.grad.size());
                   for (int64_t i = 0; i < n; ++i) {
                     g[off] += self.grad[i];
                     for (int d = r - 1; d >= 0; --d) {
                       ++idx[d];
                       off += st[d];
                       if (idx[d] < out[d]) break;
                       idx[d] = 0;
                       off -= st[d] * out[d];
                     }
                   }
                 });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat: empty input list");
  int r = parts[0].rank();
  if (axis < 0) axis += r;
  Shape out = parts[0].shape();
  int64_t total = 0;
  for (const Tensor& p : parts) {
    check(p.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      check(i == axis || p.shape()[i] == out[i],
            "concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                shape_str(out));
    total += p.shape()[axis];
  }
  out[axis] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out[i];
  for (int i = axis + 1; i < r; ++i) inner *= out[i];
  std::vector<double> od(shape_numel(out));
  int64_t row = total * inner;
  int64_t col = 0;
  std::vector<int64_t> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(col);
    int64_t pk = p.shape()[axis] * inner;
    const auto& pd = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(pd.begin() + o * pk, pd.begin() + (o + 1) * pk,
                od.begin() + o * row + col);
    col += pk;
  }
  return make_op("concat", out, std::move(od), parts,
                 [outer, inner, row, offsets](AutogradNode& self) {
                   for (size_t p = 0; p < self.inputs.size(); ++p) {
                     const Tensor& t = self.inputs[p];
                     if (!t.requires_grad()) continue;
                     auto& g = t.node()->grad_buffer();
                     int64_t pk = t.numel() / outer;
                     (void)inner;
                     for (int64_t o = 0; o < outer; ++o)
                       for (int64_t i = 0; i < pk; ++i)
                         g[o * pk + i] +=
                             self.grad[o * row + offsets[p] + i];
                   }
                 });
}

Tensor take(const Tensor& a, IndexVec idx, Shape out_shape) {
  int64_t n = shape_numel(out_shape);
  check(static_cast<int64_t>(idx->size()) == n,
        "take: index count does not match output shape");
  const auto& da = a.data();
  std::vector<double> od(n);
  for (int64_t i = 0; i < n; ++i) od[i] = da[(*idx)[i]];
  return make_op("take", std::move(out_shape), std::move(od), {a},
                 [idx](AutogradNode& self) {
                   auto& g = self.inputs[0].node()->grad_buffer();
                   for (size_t i = 0; i < idx->size(); ++i)
                     g[(*idx)[i]] += self.grad[i];
                 });
}

Tensor take_rows(const Tensor& a, IndexVec rows) {
  check(a.rank() >= 1, "take_rows: need rank >= 1");
  int64_t rowsize = a.numel() / a.shape()[0];
  Shape out = a.shape();
  out[0] = static_cast<int64_t>(rows->size());
  const auto& da = a.data();
  std::vector<double> od(out[0] * rowsize);
  for (int64_t i = 0; i < out[0]; ++i) {
    int64_t src = (*rows)[i];
    std::copy(da.begin() + src * rowsize, da.begin() + (src + 1) * rowsize,
              od.begin() + i * rowsize);
  }
  return make_op("take_rows", std::move(out), std::move(od), {a},
                 [rows, rowsize](AutogradNode& self) {
                   auto& g = self.inputs[0].node()->grad_buffer();
                   for (size_t i = 0; i < rows->size(); ++i) {
                     int64_t dst = (*rows)[i] * rowsize;
                     for (int64_t j = 0; j < rowsize; ++j)
                       g[dst + j] += self.grad[i * rowsize + j];
                   }
                 });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op("sum", {1}, {s}, {a}, [](AutogradNode& self) {
    auto& g = self.inputs[0].node()->grad_buffer();
    double og = self.grad[0];
    for (double& v : g) v += og;
  });
}

Tensor sum(const Tensor& a, const std::vector<int>& axes, bool keepdims) {
  int r = a.rank();
  std::vector<bool> reduced(r, false);
  for (int ax : axes) {
    if (ax < 0) ax += r;
    check(ax >= 0 && ax < r, "sum: axis out of range");
    reduced[ax] = true;
  }
  Shape out;
  for (int i = 0; i < r; ++i) {
    if (reduced[i]) {
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(a.shape()[i]);
    }
  }
  if (out.empty()) out.push_back(1);
  // output stride per input dim (0 where reduced)
  std::vector<int64_t> ost(r, 0);
  {
    int64_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
      if (!reduced[i]) {
        ost[i] = acc;
        acc *= a.shape()[i];
      }
    }
  }
  const auto& da = a.data();
  std::vector<double> od(shape_numel(out), 0.0);
  std::vector<int64_t> idx(r, 0);
  int64_t off = 0;
  int64_t n = a.numel();
  const Shape& in = a.shape();
  for (int64_t i = 0; i < n; ++i) {
    od[off] += da[i];
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      off += ost[d];
      if (idx[d] < in[d]) break;
      idx[d] = 0;
      off -= ost[d] * in[d];
    }
  }
  return make_op("sum_axes", std::move(out), std::move(od), {a},
                 [ost, in](AutogradNode& self) {
                   auto& g = self.inputs[0].node()->grad_buffer();
                   int r = static_cast<int>(in.size());
                   std::vector<int64_t> idx(r, 0);
                   int64_t off = 0;
                   int64_t n = static_cast<int64_t>(g.size());
                   for (int64_t i = 0; i < n; ++i) {
                     g[i] += self.grad[off];
                     for (int d = r - 1; d >= 0; --d) {
                       ++idx[d];
                       off += ost[d];
                       if (idx[d] < in[d]) break;
                       idx[d] = 0;
                       off -= ost[d] * in[d];
                     }
                   }
                 });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / a.numel()); }

Tensor mean(const Tensor& a, const std::vector<int>& axes, bool keepdims) {
  Tensor s = sum(a, axes, keepdims);
  return scale(s, static_cast<double>(s.numel()) / a.numel());
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

static void gemm(const double* a, const double* b, double* c, int64_t m,
                 int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[k,m]^T b[k,n]
static void gemm_tn(const double* a, const double* b, double* c, int64_t m,
                    int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] b[k,n]^T
static void gemm_nt(const double* a, const double* b, double* c, int64_t m,
                    int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[p] += s;
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() >= 2 && b.rank() >= 2,
        "matmul: need rank >= 2, got " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  int64_t M = a.dim(-2), K = a.dim(-1);
  int64_t Kb = b.dim(-2), N = b.dim(-1);
  check(K == Kb, "matmul: inner dims disagree: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  bool shared_b = b.rank() == 2 && a.rank() > 2;
  if (!shared_b && a.rank() != b.rank()) {
    check(false, "matmul: batch ranks disagree: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  Shape out(a.shape().begin(), a.shape().end() - 2);
  if (!shared_b) {
    for (size_t i = 0; i + 2 < b.shape().size(); ++i)
      check(b.shape()[i] == out[i],
            "matmul: batch dims disagree: " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
  int64_t batch = shape_numel(out);
  out.push_back(M);
  out.push_back(N);
  std::vector<double> od(batch * M * N);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t bi = 0; bi < batch; ++bi)
    gemm(pa + bi * M * K, shared_b ? pb : pb + bi * K * N, od.data() + bi * M * N,
         M, K, N, false);
  return make_op(
      "matmul", std::move(out), std::move(od), {a, b},
      [M, K, N, batch, shared_b](AutogradNode& self) {
        const Tensor& ta = self.inputs[0];
        const Tensor& tb = self.inputs[1];
        const double* pa = ta.data().data();
        const double* pb = tb.data().data();
        const double* og = self.grad.data();
        if (ta.requires_grad()) {
          double* ga = ta.node()->grad_buffer().data();
          for (int64_t bi = 0; bi < batch; ++bi)
            gemm_nt(og + bi * M * N, shared_b ? pb : pb + bi * K * N,
                    ga + bi * M * K, M, N, K);
        }
        if (tb.requires_grad()) {
          double* gb = tb.node()->grad_buffer().data();
          for (int64_t bi = 0; bi < batch; ++bi)
            gemm_tn(pa + bi * M * K, og + bi * M * N,
                    shared_b ? gb : gb + bi * K * N, K, M, N);
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax / cross entropy
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  int r = x.rank();
  if (axis < 0) axis += r;
  check(axis >= 0 && axis < r, "softmax: axis out of range for " +
                                   shape_str(x.shape()));
  int64_t outer = 1, n = x.shape()[axis], inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  const auto& dx = x.data();
  std::vector<double> od(dx.size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * n * inner + in;
      double mx = dx[base];
      for (int64_t i = 1; i < n; ++i)
        mx = std::max(mx, dx[base + i * inner]);
      double z = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        double e = std::exp(dx[base + i * inner] - mx);
        od[base + i * inner] = e;
        z += e;
      }
      for (int64_t i = 0; i < n; ++i) od[base + i * inner] /= z;
    }
  }
  return make_op("softmax", x.shape(), std::move(od), {x},
                 [outer, n, inner](AutogradNode& self) {
                   auto& g = self.inputs[0].node()->grad_buffer();
                   const auto& y = self.data;
                   const auto& og = self.grad;
                   for (int64_t o = 0; o < outer; ++o) {
                     for (int64_t in = 0; in < inner; ++in) {
                       int64_t base = o * n * inner + in;
                       double dot = 0.0;
                       for (int64_t i = 0; i < n; ++i)
                         dot += og[base + i * inner] * y[base + i * inner];
                       for (int64_t i = 0; i < n; ++i)
                         g[base + i * inner] +=
                             y[base + i * inner] * (og[base + i * inner] - dot);
                     }
                   }
                 });
}

Tensor cross_entropy(const Tensor& logits, int target) {
  check(logits.rank() == 1, "cross_entropy: expected rank-1 logits, got " +
                                shape_str(logits.shape()));
  int64_t c = logits.numel();
  check(target >= 0 && target < c, "cross_entropy: target out of range");
  const auto& z = logits.data();
  double mx = *std::max_element(z.begin(), z.end());
  double lse = 0.0;
  for (double v : z) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  double loss = lse - z[target];
  return make_op("cross_entropy", {1}, {loss}, {logits},
                 [target, lse](AutogradNode& self) {
                   const Tensor& tl = self.inputs[0];
                   const auto& z = tl.data();
                   auto& g = tl.node()->grad_buffer();
                   double og = self.grad[0];
                   for (size_t i = 0; i < z.size(); ++i) {
                     double p = std::exp(z[i] - lse);
                     g[i] += og * (p - (static_cast<int>(i) == target ? 1.0 : 0.0));
                   }
                 });
}

// ---------------------------------------------------------------------------
// Conv / resampling
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding) {
  check(x.rank() == 3, "conv2d: input must be [Cin,H,W], got " +
                           shape_str(x.shape()));
  check(w.rank() == 4, "conv2d: kernel must be [Cout,Cin,k,k], got " +
                           shape_str(w.shape()));
  int64_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  int64_t Cout = w.dim(0), k = w.dim(2);
  check(w.dim(1) == Cin, "conv2d: channel mismatch: input " +
                             shape_str(x.shape()) + " kernel " +
                             shape_str(w.shape()));
  check(w.dim(3) == k && k % 2 == 1, "conv2d: kernel must be odd square");
  check((H + 2 * padding - k) % stride == 0 &&
            (W + 2 * padding - k) % stride == 0,
        "conv2d: non-integral output size for input " + shape_str(x.shape()));
  int64_t Ho = (H + 2 * padding - k) / stride + 1;
  int64_t Wo = (W + 2 * padding - k) / stride + 1;
  if (bias.defined())
    check(bias.numel() == Cout, "conv2d: bias length mismatch");
  const auto& dx = x.data();
  const auto& dw = w.data();
  std::vector<double> od(Cout * Ho * Wo, 0.0);
  for (int64_t co = 0; co < Cout; ++co) {
    double b0 = bias.defined() ? bias.data()[co] : 0.0;
    for (int64_t oy = 0; oy < Ho; ++oy) {
      for (int64_t ox = 0; ox < Wo; ++ox) {
        double acc = b0;
        for (int64_t ci = 0; ci < Cin; ++ci) {
          for (int64_t ky = 0; ky < k; ++ky) {
            int64_t iy = oy * stride + ky - padding;
            if (iy < 0 || iy >= H) continue;
            for (int64_t kx = 0; kx < k; ++kx) {
              int64_t ix = ox * stride + kx - padding;
              if (ix < 0 || ix >= W) continue;
              acc += dx[(ci * H + iy) * W + ix] *
                     dw[((co * Cin + ci) * k + ky) * k + kx];
            }
          }
        }
        od[(co * Ho + oy) * Wo + ox] = acc;
      }
    }
  }
  std::vector<Tensor> ins = {x, w};
  if (bias.defined()) ins.push_back(bias);
  return make_op(
      "conv2d", {Cout, Ho, Wo}, std::move(od), std::move(ins),
      [Cin, H, W, Cout, k, Ho, Wo, stride, padding](AutogradNode& self) {
        const Tensor& tx = self.inputs[0];
        const Tensor& tw = self.inputs[1];
        const auto& dx = tx.data();
        const auto& dw = tw.data();
        const auto& og = self.grad;
        double* gx = tx.requires_grad() ? tx.node()->grad_buffer().data()
                                        : nullptr;
        double* gw = tw.requires_grad() ? tw.node()->grad_buffer().data()
                                        : nullptr;
        double* gb = nullptr;
        if (self.inputs.size() > 2 && self.inputs[2].requires_grad())
          gb = self.inputs[2].node()->grad_buffer().data();
        for (int64_t co = 0; co < Cout; ++co) {
          for (int64_t oy = 0; oy < Ho; ++oy) {
            for (int64_t ox = 0; ox < Wo; ++ox) {
              double g = og[(co * Ho + oy) * Wo + ox];
              if (g == 0.0) continue;
              if (gb) gb[co] += g;
              for (int64_t ci = 0; ci < Cin; ++ci) {
                for (int64_t ky = 0; ky < k; ++ky) {
                  int64_t iy = oy * stride + ky - padding;
                  if (iy < 0 || iy >= H) continue;
                  for (int64_t kx = 0; kx < k; ++kx) {
                    int64_t ix = ox * stride + kx - padding;
                    if (ix < 0 || ix >= W) continue;
                    int64_t xi = (ci * H + iy) * W + ix;
                    int64_t wi = ((co * Cin + ci) * k + ky) * k + kx;
                    if (gx) gx[xi] += g * dw[wi];
                    if (gw) gw[wi] += g * dx[xi];
                  }
                }
              }
            }
          }
        }
      });
}

Tensor bilinear_upsample(const Tensor& x, int64_t out_h, int64_t out_w) {
  check(x.rank() == 3, "bilinear_upsample: input must be [C,h,w], got " +
                           shape_str(x.shape()));
  check(out_h >= 1 && out_w >= 1, "bilinear_upsample: zero-sized target");
  int64_t C = x.dim(0), h = x.dim(1), w = x.dim(2);
  check(out_h >= h && out_w >= w,
        "bilinear_upsample: target smaller than source");
  // align_corners = false convention
  double sy = static_cast<double>(h) / out_h;
  double sx = static_cast<double>(w) / out_w;
  struct Samp {
    int64_t lo, hi;
    double wlo, whi;
  };
  auto make_axis = [](int64_t out_n, int64_t in_n, double s) {
    std::vector<Samp> v(out_n);
    for (int64_t i = 0; i < out_n; ++i) {
      double src = (i + 0.5) * s - 0.5;
      if (src < 0) src = 0;
      int64_t lo = static_cast<int64_t>(src);
      if (lo > in_n - 1) lo = in_n - 1;
      int64_t hi = std::min(lo + 1, in_n - 1);
      double f = src - lo;
      v[i] = {lo, hi, 1.0 - f, f};
    }
    return v;
  };
  auto ay = make_axis(out_h, h, sy);
  auto ax = make_axis(out_w, w, sx);
  const auto& dx = x.data();
  std::vector<double> od(C * out_h * out_w);
  for (int64_t c = 0; c < C; ++c) {
    const double* plane = dx.data() + c * h * w;
    double* out = od.data() + c * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const Samp& Y = ay[oy];
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const Samp& X = ax[ox];
        out[oy * out_w + ox] =
            Y.wlo * (X.wlo * plane[Y.lo * w + X.lo] +
                     X.whi * plane[Y.lo * w + X.hi]) +
            Y.whi * (X.wlo * plane[Y.hi * w + X.lo] +
                     X.whi * plane[Y.hi * w + X.hi]);
      }
    }
  }
  return make_op("bilinear_upsample", {C, out_h, out_w}, std::move(od), {x},
                 [C, h, w, out_h, out_w, ay, ax](AutogradNode& self) {
                   auto& g = self.inputs[0].node()->grad_buffer();
                   for (int64_t c = 0; c < C; ++c) {
                     double* gp = g.data() + c * h * w;
                     const double* og = self.grad.data() + c * out_h * out_w;
                     for (int64_t oy = 0; oy < out_h; ++oy) {
                       const auto& Y = ay[oy];
                       for (int64_t ox = 0; ox < out_w; ++ox) {
                         const auto& X = ax[ox];
                         double v = og[oy * out_w + ox];
                         gp[Y.lo * w + X.lo] += v * Y.wlo * X.wlo;
                         gp[Y.lo * w + X.hi] += v * Y.wlo * X.whi;
                         gp[Y.hi * w + X.lo] += v * Y.whi * X.wlo;
                         gp[Y.hi * w + X.hi] += v * Y.whi * X.whi;
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Window extraction (unfold / fold are exact adjoints)
// ---------------------------------------------------------------------------

static void unfold_accum(const double* src, double* dst, int64_t h, int64_t w,
                         int64_t C, int K) {
  // dst[(loc, slot, c)] += src[(neighbor(loc, slot), c)], zero padding
  int pad = K / 2;
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t c = 0; c < w; ++c) {
      int64_t loc = r * w + c;
      for (int p = 0; p < K; ++p) {
        int64_t nr = r + p - pad;
        if (nr < 0 || nr >= h) continue;
        for (int q = 0; q < K; ++q) {
          int64_t nc = c + q - pad;
          if (nc < 0 || nc >= w) continue;
          const double* s = src + (nr * w + nc) * C;
          double* d = dst + (loc * K * K + p * K + q) * C;
          for (int64_t ch = 0; ch < C; ++ch) d[ch] += s[ch];
        }
      }
    }
  }
}

static void fold_accum(const double* src, double* dst, int64_t h, int64_t w,
                       int64_t C, int K) {
  // dst[(neighbor(loc, slot), c)] += src[(loc, slot, c)]
  int pad = K / 2;
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t c = 0; c < w; ++c) {
      int64_t loc = r * w + c;
      for (int p = 0; p < K; ++p) {
        int64_t nr = r + p - pad;
        if (nr < 0 || nr >= h) continue;
        for (int q = 0; q < K; ++q) {
          int64_t nc = c + q - pad;
          if (nc < 0 || nc >= w) continue;
          const double* s = src + (loc * K * K + p * K + q) * C;
          double* d = dst + (nr * w + nc) * C;
          for (int64_t ch = 0; ch < C; ++ch) d[ch] += s[ch];
        }
      }
    }
  }
}

Tensor unfold_kxk(const Tensor& tokens, int64_t h, int64_t w, int K) {
  check(tokens.rank() == 2 && tokens.dim(0) == h * w,
        "unfold_kxk: tokens must be [h*w, C], got " +
            shape_str(tokens.shape()));
  check(K >= 1 && K % 2 == 1, "unfold_kxk: K must be odd and positive");
  int64_t C = tokens.dim(1);
  std::vector<double> od(h * w * K * K * C, 0.0);
  unfold_accum(tokens.data().data(), od.data(), h, w, C, K);
  return make_op("unfold_kxk", {h * w, static_cast<int64_t>(K) * K, C},
                 std::move(od), {tokens}, [h, w, C, K](AutogradNode& self) {
                   auto& g = self.inputs[0].node()->grad_buffer();
                   fold_accum(self.grad.data(), g.data(), h, w, C, K);
                 });
}

Tensor fold_kxk(const Tensor& windows, int64_t h, int64_t w, int K) {
  check(windows.rank() == 3 && windows.dim(0) == h * w &&
            windows.dim(1) == static_cast<int64_t>(K) * K,
        "fold_kxk: input must be [h*w, K*K, C], got " +
            shape_str(windows.shape()));
  int64_t C = windows.dim(2);
  std::vector<double> od(h * w * C, 0.0);
  fold_accum(windows.data().data(), od.data(), h, w, C, K);
  return make_op("fold_kxk", {h * w, C}, std::move(od), {windows},
                 [h, w, C, K](AutogradNode& self) {
                   auto& g = self.inputs[0].node()->grad_buffer();
                   unfold_accum(self.grad.data(), g.data(), h, w, C, K);
                 });
}

Tensor cyclic_shift(const Tensor& tokens, int64_t h, int64_t w, int64_t dy,
                    int64_t dx) {
  check(tokens.rank() == 2 && tokens.dim(0) == h * w,
        "cyclic_shift: tokens must be [h*w, C]");
  auto mod = [](int64_t a, int64_t m) { return ((a % m) + m) % m; };
  auto rows = std::make_shared<std::vector<int64_t>>();
  rows->reserve(h * w);
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c)
      rows->push_back(mod(r - dy, h) * w + mod(c - dx, w));
  return take_rows(tokens, rows);
}

Tensor global_avg_pool(const Tensor& chw) {
  check(chw.rank() == 3, "global_avg_pool: input must be [C,h,w]");
  return reshape(mean(chw, {1, 2}, false), {chw.dim(0)});
}

Tensor tokens_to_chw(const Tensor& tokens, int64_t h, int64_t w) {
  check(tokens.rank() == 2 && tokens.dim(0) == h * w,
        "tokens_to_chw: tokens must be [h*w, C]");
  return permute(reshape(tokens, {h, w, tokens.dim(1)}), {2, 0, 1});
}

Tensor chw_to_tokens(const Tensor& chw) {
  check(chw.rank() == 3, "chw_to_tokens: input must be [C,h,w]");
  return reshape(permute(chw, {1, 2, 0}), {chw.dim(1) * chw.dim(2), chw.dim(0)});
}

}  // namespace cmsk

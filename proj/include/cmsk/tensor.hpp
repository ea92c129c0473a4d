#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmsk {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Throws std::invalid_argument when cond is false.
void check(bool cond, const std::string& msg);

struct AutogradNode;

// Dense row-major tensor of doubles with a reverse-mode autodiff handle.
// Copying a Tensor copies the handle, not the buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int64_t dim(int i) const;  // negative i counts from the back
  int64_t numel() const;
  bool requires_grad() const;
  bool is_leaf() const;

  const std::vector<double>& data() const;
  std::vector<double>& mutable_data();  // for leaves: init / optimizer updates
  double item() const;                  // scalar tensors only

  bool has_grad() const;
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad();  // allocates zeros when absent
  void zero_grad();

  // Reverse-mode backprop from a scalar. Gradients accumulate additively
  // into every reachable requires_grad tensor.
  void backward(double seed = 1.0) const;

  std::shared_ptr<AutogradNode> node() const { return node_; }
  explicit Tensor(std::shared_ptr<AutogradNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<AutogradNode> node_;
};

struct AutogradNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until needed
  std::vector<Tensor> inputs;
  std::function<void(AutogradNode&)> backward_fn;  // null for leaves
  const char* op_name = "leaf";

  std::vector<double>& grad_buffer();
};

using IndexVec = std::shared_ptr<const std::vector<int64_t>>;

// ---- elementwise / broadcasting ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor sqrt_t(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);

// ---- structural ----
Tensor reshape(const Tensor& a, Shape shape);  // one dim may be -1
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Gather arbitrary elements: out.data[i] = a.data[(*idx)[i]].
Tensor take(const Tensor& a, IndexVec idx, Shape out_shape);
// Gather rows of a viewed as [R, S]: out row i = a row (*rows)[i].
Tensor take_rows(const Tensor& a, IndexVec rows);

// ---- reductions ----
Tensor sum(const Tensor& a);  // scalar
Tensor sum(const Tensor& a, const std::vector<int>& axes, bool keepdims);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, const std::vector<int>& axes, bool keepdims);

// ---- linear algebra ----
// a: [..., M, K], b: [..., K, N] with identical leading dims, or b rank-2
// (a shared weight applied to every batch slice).
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- neural-net primitives ----
Tensor softmax(const Tensor& x, int axis);
// x: [Cin, H, W], w: [Cout, Cin, k, k]; bias optional (undefined Tensor = none).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding);
Tensor bilinear_upsample(const Tensor& x, int64_t out_h, int64_t out_w);
// tokens: [h*w, C] row-major over (row, col).
Tensor unfold_kxk(const Tensor& tokens, int64_t h, int64_t w, int K);
Tensor fold_kxk(const Tensor& windows, int64_t h, int64_t w, int K);
Tensor cyclic_shift(const Tensor& tokens, int64_t h, int64_t w, int64_t dy,
                    int64_t dx);
Tensor global_avg_pool(const Tensor& chw);       // [C,h,w] -> [C]
Tensor cross_entropy(const Tensor& logits, int target);  // [C] -> scalar

// Token layout helpers: [h*w, C] <-> [C, h, w].
Tensor tokens_to_chw(const Tensor& tokens, int64_t h, int64_t w);
Tensor chw_to_tokens(const Tensor& chw);

}  // namespace cmsk

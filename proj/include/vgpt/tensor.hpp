#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vgpt/rng.hpp"

namespace vgpt {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until backward touches it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // accumulates into parents' grad
  const char* op = "leaf";
};

}  // namespace detail

// Dense float32 tensor, row-major, value-semantic handle over a shared node.
// Results of ops are immutable; mutable_data() is reserved for parameter
// updates between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, float v, bool requires_grad = false);
  static Tensor from_data(const Shape& s, std::vector<float> data, bool requires_grad = false);
  static Tensor gaussian(Rng& rng, const Shape& s, float stddev, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(n_->data.size()); }
  const std::vector<float>& data() const { return n_->data; }
  std::vector<float>& mutable_data() { return n_->data; }
  float item() const;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }
  const std::vector<float>& grad() const { return n_->grad; }
  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return n_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> n_;
};

// Gradient recording is on by default; NoGradGuard disables it for a scope.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  bool prev;
};

// Ordered record of the reverse pass: every node's parents precede it.
struct Tape {
  std::vector<detail::Node*> nodes;
};

Tape build_tape(const Tensor& root);
void backward(const Tensor& root);

// ---- elementwise / broadcast ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor add_bias(const Tensor& x, const Tensor& bias);   // [n x w] + [w]
Tensor mul_rows(const Tensor& x, const Tensor& v);      // [n x w] * [w]
Tensor gelu(const Tensor& x);

// ---- linear algebra / structure ----
Tensor matmul(const Tensor& a, const Tensor& b);
// Forward accumulates each output element in double before rounding once to
// f32, which makes the result insensitive to f32-visible reorderings of the
// inner dimension (used where row-permutation equivariance must be bit-exact).
Tensor matmul_stable(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& s);
Tensor slice_rows(const Tensor& a, int off, int len);
Tensor slice_cols(const Tensor& a, int off, int len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor overwrite_rows(const Tensor& base, const Tensor& rows, const std::vector<int>& idx);
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);

// ---- normalization / activations over rows ----
Tensor layer_norm(const Tensor& x, float eps = 1e-5f);  // per-row, no affine
Tensor softmax(const Tensor& x, int axis);
Tensor softmax_rows(const Tensor& x);                   // softmax(x, last axis) for rank 2

// ---- losses / reductions ----
Tensor sum_all(const Tensor& x);  // scalar
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& mask);
Tensor mse(const Tensor& a, const Tensor& b);

// ---- image-structured ops (rank-3 [h, w, c]) ----
Tensor im2col(const Tensor& x, int k, int stride, int pad);
Tensor unpatchify(const Tensor& x, int gh, int gw, int k, int c);
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

// ---- misc ----
Tensor stopgrad(const Tensor& x);
Tensor clamp01(const Tensor& x);  // inference-only; rejects active grad recording

}  // namespace vgpt

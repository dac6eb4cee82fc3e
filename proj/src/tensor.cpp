#include "vgpt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

namespace vgpt {

using detail::Node;

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("vgpt: negative dimension in shape");
    n *= d;
  }
  return n;
}

namespace {

bool g_grad_enabled = true;

void check_finite(const Node& n) {
  for (float v : n.data) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("vgpt: non-finite value in output of op '") + n.op + "'");
    }
  }
}

std::shared_ptr<Node> make_leaf(Shape s, std::vector<float> data, bool requires_grad) {
  if (shape_numel(s) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("vgpt: shape does not match data length");
  }
  auto n = std::make_shared<Node>();
  n->op = "leaf";
  n->shape = std::move(s);
  n->data = std::move(data);
  n->requires_grad = requires_grad && g_grad_enabled;
  check_finite(*n);
  return n;
}

// Result node; records parents and backward only while grad recording is on
// and at least one parent participates.
Tensor make_op(const char* op, Shape s, std::vector<float> data,
               std::vector<Tensor> parents, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(s);
  n->data = std::move(data);
  check_finite(*n);
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(n);
}

std::vector<float>& grad_buf(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0f);
  return n.grad;
}

void require_rank(const Tensor& t, int r, const char* op) {
  if (t.rank() != r) throw std::invalid_argument(std::string("vgpt: ") + op + ": unexpected rank");
}

// C[m x n] += or = A[m x k] * B[k x n]
void mm(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const float* ai = a + static_cast<int64_t>(i) * k;
    float* ci = c + static_cast<int64_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      float av = ai[kk];
      const float* bk = b + static_cast<int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
}

// C[m x n] += A^T[m x k] * B[k x n] where A is [k x m]
void mm_at_b(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int kk = 0; kk < k; ++kk) {
    const float* ak = a + static_cast<int64_t>(kk) * m;
    const float* bk = b + static_cast<int64_t>(kk) * n;
    for (int i = 0; i < m; ++i) {
      float av = ak[i];
      float* ci = c + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
}

// C[m x n] += A[m x k] * B^T[k x n] where B is [n x k]; B is transposed into
// a scratch buffer so the accumulation runs through the vectorizable kernel
// in one fixed order.
void mm_a_bt(const float* a, const float* b, float* c, int m, int k, int n) {
  std::vector<float> bt(static_cast<size_t>(k) * n);
  for (int j = 0; j < n; ++j)
    for (int kk = 0; kk < k; ++kk) bt[static_cast<size_t>(kk) * n + j] = b[static_cast<size_t>(j) * k + kk];
  mm(a, bt.data(), c, m, k, n, true);
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  return Tensor(make_leaf(s, std::vector<float>(static_cast<size_t>(shape_numel(s)), 0.0f), requires_grad));
}

Tensor Tensor::full(const Shape& s, float v, bool requires_grad) {
  return Tensor(make_leaf(s, std::vector<float>(static_cast<size_t>(shape_numel(s)), v), requires_grad));
}

Tensor Tensor::from_data(const Shape& s, std::vector<float> data, bool requires_grad) {
  return Tensor(make_leaf(s, std::move(data), requires_grad));
}

Tensor Tensor::gaussian(Rng& rng, const Shape& s, float stddev, bool requires_grad) {
  std::vector<float> d(static_cast<size_t>(shape_numel(s)));
  for (float& v : d) v = static_cast<float>(rng.gaussian() * stddev);
  return Tensor(make_leaf(s, std::move(d), requires_grad));
}

float Tensor::item() const {
  if (numel() != 1) throw std::runtime_error("vgpt: item() on non-scalar tensor");
  return n_->data[0];
}

void Tensor::zero_grad() { n_->grad.clear(); }

Tape build_tape(const Tensor& root) {
  Tape tape;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS; parents are pushed in recorded order so the
  // tape is deterministic for a given graph.
  struct Frame {
    Node* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  Node* r = root.node().get();
  if (!r->requires_grad) return tape;
  stack.push_back({r, 0});
  visited.insert(r);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      tape.nodes.push_back(f.node);
      stack.pop_back();
    }
  }
  return tape;
}

void backward(const Tensor& root) {
  Node* r = root.node().get();
  if (!r->requires_grad) throw std::runtime_error("vgpt: backward on a tensor that does not require grad");
  Tape tape = build_tape(root);
  grad_buf(*r).assign(r->data.size(), 1.0f);
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------- elementwise ----------------

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw std::invalid_argument(std::string("vgpt: ") + op + ": shape mismatch");
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<float> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (int s = 0; s < 2; ++s) {
      Node& p = *self.parents[s];
      if (!p.requires_grad) continue;
      auto& g = grad_buf(p);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<float> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = grad_buf(*self.parents[0]);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = grad_buf(*self.parents[1]);
      for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<float> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = grad_buf(pa);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = grad_buf(pb);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scalar_mul(const Tensor& a, float s) {
  std::vector<float> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return make_op("scalar_mul", a.shape(), std::move(out), {a}, [s](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Tensor add_scalar(const Tensor& a, float s) {
  std::vector<float> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
  return make_op("add_scalar", a.shape(), std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_bias");
  require_rank(bias, 1, "add_bias");
  int n = x.dim(0), w = x.dim(1);
  if (bias.dim(0) != w) throw std::invalid_argument("vgpt: add_bias: width mismatch");
  std::vector<float> out(x.data().size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j)
      out[static_cast<size_t>(i) * w + j] = x.data()[static_cast<size_t>(i) * w + j] + bias.data()[j];
  return make_op("add_bias", x.shape(), std::move(out), {x, bias}, [n, w](Node& self) {
    Node& px = *self.parents[0];
    Node& pb = *self.parents[1];
    if (px.requires_grad) {
      auto& g = grad_buf(px);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = grad_buf(pb);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j) g[j] += self.grad[static_cast<size_t>(i) * w + j];
    }
  });
}

Tensor mul_rows(const Tensor& x, const Tensor& v) {
  require_rank(x, 2, "mul_rows");
  require_rank(v, 1, "mul_rows");
  int n = x.dim(0), w = x.dim(1);
  if (v.dim(0) != w) throw std::invalid_argument("vgpt: mul_rows: width mismatch");
  std::vector<float> out(x.data().size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j)
      out[static_cast<size_t>(i) * w + j] = x.data()[static_cast<size_t>(i) * w + j] * v.data()[j];
  return make_op("mul_rows", x.shape(), std::move(out), {x, v}, [n, w](Node& self) {
    Node& px = *self.parents[0];
    Node& pv = *self.parents[1];
    if (px.requires_grad) {
      auto& g = grad_buf(px);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j)
          g[static_cast<size_t>(i) * w + j] += self.grad[static_cast<size_t>(i) * w + j] * pv.data[j];
    }
    if (pv.requires_grad) {
      auto& g = grad_buf(pv);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j)
          g[j] += self.grad[static_cast<size_t>(i) * w + j] * px.data[static_cast<size_t>(i) * w + j];
    }
  });
}

Tensor gelu(const Tensor& x) {
  constexpr float kInvSqrt2 = 0.70710678118654752440f;
  constexpr float kInvSqrt2Pi = 0.39894228040143267794f;
  std::vector<float> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    float v = x.data()[i];
    out[i] = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
  }
  return make_op("gelu", x.shape(), std::move(out), {x}, [kInvSqrt2, kInvSqrt2Pi](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    for (size_t i = 0; i < g.size(); ++i) {
      float v = p.data[i];
      float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
      float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

// ---------------- structure ----------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) throw std::invalid_argument("vgpt: matmul: inner dimensions do not match");
  std::vector<float> out(static_cast<size_t>(m) * n);
  mm(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      // dA = dC * B^T
      mm_a_bt(self.grad.data(), pb.data.data(), grad_buf(pa).data(), m, n, k);
    }
    if (pb.requires_grad) {
      // dB = A^T * dC
      mm_at_b(pa.data.data(), self.grad.data(), grad_buf(pb).data(), k, m, n);
    }
  });
}

Tensor matmul_stable(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_stable");
  require_rank(b, 2, "matmul_stable");
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) throw std::invalid_argument("vgpt: matmul_stable: inner dimensions do not match");
  std::vector<float> out(static_cast<size_t>(m) * n);
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk)
        acc += static_cast<double>(ad[static_cast<int64_t>(i) * k + kk]) * bd[static_cast<int64_t>(kk) * n + j];
      out[static_cast<size_t>(i) * n + j] = static_cast<float>(acc);
    }
  return make_op("matmul_stable", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) mm_a_bt(self.grad.data(), pb.data.data(), grad_buf(pa).data(), m, n, k);
    if (pb.requires_grad) mm_at_b(pa.data.data(), self.grad.data(), grad_buf(pb).data(), k, m, n);
  });
}

Tensor transpose2d(const Tensor& a) {
  require_rank(a, 2, "transpose2d");
  int m = a.dim(0), n = a.dim(1);
  std::vector<float> out(a.data().size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
  return make_op("transpose2d", {n, m}, std::move(out), {a}, [m, n](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
  });
}

Tensor reshape(const Tensor& a, const Shape& s) {
  if (shape_numel(s) != a.numel()) throw std::invalid_argument("vgpt: reshape: element count mismatch");
  std::vector<float> out = a.data();
  return make_op("reshape", s, std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& a, int off, int len) {
  require_rank(a, 2, "slice_rows");
  int n = a.dim(0), w = a.dim(1);
  if (off < 0 || len <= 0 || off + len > n) throw std::invalid_argument("vgpt: slice_rows: range out of bounds");
  std::vector<float> out(static_cast<size_t>(len) * w);
  std::memcpy(out.data(), a.data().data() + static_cast<size_t>(off) * w, sizeof(float) * out.size());
  return make_op("slice_rows", {len, w}, std::move(out), {a}, [off, w](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    for (size_t i = 0; i < self.grad.size(); ++i) g[static_cast<size_t>(off) * w + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, int off, int len) {
  require_rank(a, 2, "slice_cols");
  int n = a.dim(0), w = a.dim(1);
  if (off < 0 || len <= 0 || off + len > w) throw std::invalid_argument("vgpt: slice_cols: range out of bounds");
  std::vector<float> out(static_cast<size_t>(n) * len);
  for (int i = 0; i < n; ++i)
    std::memcpy(out.data() + static_cast<size_t>(i) * len, a.data().data() + static_cast<size_t>(i) * w + off,
                sizeof(float) * static_cast<size_t>(len));
  return make_op("slice_cols", {n, len}, std::move(out), {a}, [off, w, len, n](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < len; ++j)
        g[static_cast<size_t>(i) * w + off + j] += self.grad[static_cast<size_t>(i) * len + j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("vgpt: concat_rows: empty input");
  int w = parts[0].dim(1);
  int total = 0;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != w) throw std::invalid_argument("vgpt: concat_rows: width mismatch");
    total += p.dim(0);
  }
  std::vector<float> out;
  out.reserve(static_cast<size_t>(total) * w);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<int> row_counts;
  for (const Tensor& p : parts) row_counts.push_back(p.dim(0));
  return make_op("concat_rows", {total, w}, std::move(out), parts, [row_counts, w](Node& self) {
    size_t off = 0;
    for (size_t s = 0; s < self.parents.size(); ++s) {
      Node& p = *self.parents[s];
      size_t count = static_cast<size_t>(row_counts[s]) * w;
      if (p.requires_grad) {
        auto& g = grad_buf(p);
        for (size_t i = 0; i < count; ++i) g[i] += self.grad[off + i];
      }
      off += count;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("vgpt: concat_cols: empty input");
  int n = parts[0].dim(0);
  int total = 0;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != n) throw std::invalid_argument("vgpt: concat_cols: row count mismatch");
    total += p.dim(1);
  }
  std::vector<float> out(static_cast<size_t>(n) * total);
  int off = 0;
  for (const Tensor& p : parts) {
    int w = p.dim(1);
    for (int i = 0; i < n; ++i)
      std::memcpy(out.data() + static_cast<size_t>(i) * total + off,
                  p.data().data() + static_cast<size_t>(i) * w, sizeof(float) * static_cast<size_t>(w));
    off += w;
  }
  std::vector<int> widths;
  for (const Tensor& p : parts) widths.push_back(p.dim(1));
  return make_op("concat_cols", {n, total}, std::move(out), parts, [widths, n, total](Node& self) {
    int off = 0;
    for (size_t s = 0; s < self.parents.size(); ++s) {
      Node& p = *self.parents[s];
      int w = widths[s];
      if (p.requires_grad) {
        auto& g = grad_buf(p);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < w; ++j)
            g[static_cast<size_t>(i) * w + j] += self.grad[static_cast<size_t>(i) * total + off + j];
      }
      off += w;
    }
  });
}

Tensor overwrite_rows(const Tensor& base, const Tensor& rows, const std::vector<int>& idx) {
  require_rank(base, 2, "overwrite_rows");
  require_rank(rows, 2, "overwrite_rows");
  int n = base.dim(0), w = base.dim(1);
  if (rows.dim(1) != w) throw std::invalid_argument("vgpt: overwrite_rows: width mismatch");
  if (rows.dim(0) != static_cast<int>(idx.size())) throw std::invalid_argument("vgpt: overwrite_rows: index count mismatch");
  std::vector<uint8_t> seen(static_cast<size_t>(n), 0);
  for (int r : idx) {
    if (r < 0 || r >= n) throw std::invalid_argument("vgpt: overwrite_rows: index out of range");
    if (seen[static_cast<size_t>(r)]) throw std::invalid_argument("vgpt: overwrite_rows: duplicate index");
    seen[static_cast<size_t>(r)] = 1;
  }
  std::vector<float> out = base.data();
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(out.data() + static_cast<size_t>(idx[i]) * w, rows.data().data() + i * w,
                sizeof(float) * static_cast<size_t>(w));
  return make_op("overwrite_rows", base.shape(), std::move(out), {base, rows}, [idx, w](Node& self) {
    Node& pb = *self.parents[0];
    Node& pr = *self.parents[1];
    if (pb.requires_grad) {
      auto& g = grad_buf(pb);
      std::vector<uint8_t> replaced(pb.data.size() / w, 0);
      for (int r : idx) replaced[static_cast<size_t>(r)] = 1;
      size_t rows_n = pb.data.size() / w;
      for (size_t i = 0; i < rows_n; ++i) {
        if (replaced[i]) continue;
        for (int j = 0; j < w; ++j) g[i * w + j] += self.grad[i * w + j];
      }
    }
    if (pr.requires_grad) {
      auto& g = grad_buf(pr);
      for (size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < w; ++j) g[i * w + j] += self.grad[static_cast<size_t>(idx[i]) * w + j];
    }
  });
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  require_rank(table, 2, "embedding_rows");
  int v = table.dim(0), w = table.dim(1);
  if (ids.empty()) throw std::invalid_argument("vgpt: embedding_rows: empty id list");
  for (int id : ids)
    if (id < 0 || id >= v) throw std::out_of_range("vgpt: embedding_rows: id out of range");
  std::vector<float> out(ids.size() * static_cast<size_t>(w));
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + i * w, table.data().data() + static_cast<size_t>(ids[i]) * w,
                sizeof(float) * static_cast<size_t>(w));
  return make_op("embedding_rows", {static_cast<int>(ids.size()), w}, std::move(out), {table},
                 [ids, w](Node& self) {
                   Node& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (size_t i = 0; i < ids.size(); ++i)
                     for (int j = 0; j < w; ++j)
                       g[static_cast<size_t>(ids[i]) * w + j] += self.grad[i * w + j];
                 });
}

// ---------------- normalization / softmax ----------------

Tensor layer_norm(const Tensor& x, float eps) {
  require_rank(x, 2, "layer_norm");
  int n = x.dim(0), w = x.dim(1);
  std::vector<float> out(x.data().size());
  std::vector<float> inv_std(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const float* row = x.data().data() + static_cast<size_t>(i) * w;
    double mean = 0.0;
    for (int j = 0; j < w; ++j) mean += row[j];
    mean /= w;
    double var = 0.0;
    for (int j = 0; j < w; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= w;
    float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    inv_std[static_cast<size_t>(i)] = is;
    for (int j = 0; j < w; ++j)
      out[static_cast<size_t>(i) * w + j] = static_cast<float>((row[j] - mean) * is);
  }
  return make_op("layer_norm", x.shape(), std::move(out), {x}, [n, w, inv_std](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    for (int i = 0; i < n; ++i) {
      const float* y = self.data.data() + static_cast<size_t>(i) * w;
      const float* dy = self.grad.data() + static_cast<size_t>(i) * w;
      double mean_dy = 0.0, mean_dyy = 0.0;
      for (int j = 0; j < w; ++j) {
        mean_dy += dy[j];
        mean_dyy += static_cast<double>(dy[j]) * y[j];
      }
      mean_dy /= w;
      mean_dyy /= w;
      float is = inv_std[static_cast<size_t>(i)];
      for (int j = 0; j < w; ++j)
        g[static_cast<size_t>(i) * w + j] +=
            is * static_cast<float>(dy[j] - mean_dy - y[j] * mean_dyy);
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("vgpt: softmax: bad axis");
  int len = x.dim(axis);
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  std::vector<float> out(x.data().size());
  const auto& in = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t c = 0; c < inner; ++c) {
      int64_t base = o * len * inner + c;
      float mx = in[static_cast<size_t>(base)];
      for (int j = 1; j < len; ++j) mx = std::max(mx, in[static_cast<size_t>(base + j * inner)]);
      if (!std::isfinite(mx)) throw std::runtime_error("vgpt: softmax: non-finite input");
      double denom = 0.0;
      for (int j = 0; j < len; ++j) denom += std::exp(static_cast<double>(in[static_cast<size_t>(base + j * inner)] - mx));
      for (int j = 0; j < len; ++j)
        out[static_cast<size_t>(base + j * inner)] =
            static_cast<float>(std::exp(static_cast<double>(in[static_cast<size_t>(base + j * inner)] - mx)) / denom);
    }
  }
  return make_op("softmax", x.shape(), std::move(out), {x}, [len, inner, outer](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t c = 0; c < inner; ++c) {
        int64_t base = o * len * inner + c;
        double dot = 0.0;
        for (int j = 0; j < len; ++j) {
          size_t k = static_cast<size_t>(base + j * inner);
          dot += static_cast<double>(self.grad[k]) * self.data[k];
        }
        for (int j = 0; j < len; ++j) {
          size_t k = static_cast<size_t>(base + j * inner);
          g[k] += self.data[k] * static_cast<float>(self.grad[k] - dot);
        }
      }
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax_rows");
  return softmax(x, 1);
}

// ---------------- reductions / losses ----------------

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_op("sum_all", {1}, {static_cast<float>(acc)}, {x}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& mask) {
  require_rank(logits, 2, "cross_entropy");
  int t = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != t || static_cast<int>(mask.size()) != t)
    throw std::invalid_argument("vgpt: cross_entropy: targets/mask length mismatch");
  int count = 0;
  for (int i = 0; i < t; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= v)
      throw std::out_of_range("vgpt: cross_entropy: target out of range");
    ++count;
  }
  double loss = 0.0;
  const auto& in = logits.data();
  for (int i = 0; i < t; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const float* row = in.data() + static_cast<size_t>(i) * v;
    float mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    loss += std::log(denom) + mx - row[targets[static_cast<size_t>(i)]];
  }
  float out = count > 0 ? static_cast<float>(loss / count) : 0.0f;
  return make_op("cross_entropy", {1}, {out}, {logits}, [targets, mask, t, v, count](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad || count == 0) return;
    auto& g = grad_buf(p);
    float scale = self.grad[0] / static_cast<float>(count);
    for (int i = 0; i < t; ++i) {
      if (!mask[static_cast<size_t>(i)]) continue;
      const float* row = p.data.data() + static_cast<size_t>(i) * v;
      float mx = row[0];
      for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
      for (int j = 0; j < v; ++j) {
        float sm = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / denom);
        float delta = (j == targets[static_cast<size_t>(i)]) ? 1.0f : 0.0f;
        g[static_cast<size_t>(i) * v + j] += scale * (sm - delta);
      }
    }
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse");
  Tensor d = sub(a, b);
  return scalar_mul(sum_all(mul(d, d)), 1.0f / static_cast<float>(a.numel()));
}

// ---------------- image-structured ops ----------------

Tensor im2col(const Tensor& x, int k, int stride, int pad) {
  require_rank(x, 3, "im2col");
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  int oh = (h + 2 * pad - k) / stride + 1;
  int ow = (w + 2 * pad - k) / stride + 1;
  if (oh <= 0 || ow <= 0 || (h + 2 * pad - k) % stride != 0)
    throw std::invalid_argument("vgpt: im2col: resolution not divisible by stride");
  int cols = k * k * c;
  std::vector<int64_t> src(static_cast<size_t>(oh) * ow * cols);
  std::vector<float> out(src.size());
  size_t p = 0;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          int iy = oy * stride + ky - pad;
          int ix = ox * stride + kx - pad;
          bool inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
          for (int ch = 0; ch < c; ++ch, ++p) {
            if (inside) {
              int64_t s = (static_cast<int64_t>(iy) * w + ix) * c + ch;
              src[p] = s;
              out[p] = x.data()[static_cast<size_t>(s)];
            } else {
              src[p] = -1;
              out[p] = 0.0f;
            }
          }
        }
      }
    }
  }
  return make_op("im2col", {oh * ow, cols}, std::move(out), {x}, [src = std::move(src)](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    auto& g = grad_buf(px);
    for (size_t i = 0; i < src.size(); ++i)
      if (src[i] >= 0) g[static_cast<size_t>(src[i])] += self.grad[i];
  });
}

Tensor unpatchify(const Tensor& x, int gh, int gw, int k, int c) {
  require_rank(x, 2, "unpatchify");
  if (x.dim(0) != gh * gw || x.dim(1) != k * k * c)
    throw std::invalid_argument("vgpt: unpatchify: shape mismatch");
  int H = gh * k, W = gw * k;
  std::vector<float> out(static_cast<size_t>(H) * W * c);
  for (int gi = 0; gi < gh; ++gi)
    for (int gj = 0; gj < gw; ++gj)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx)
          for (int ch = 0; ch < c; ++ch) {
            size_t dst = ((static_cast<size_t>(gi * k + ky) * W) + (gj * k + kx)) * c + ch;
            size_t s = static_cast<size_t>(gi * gw + gj) * (k * k * c) + (ky * k + kx) * c + ch;
            out[dst] = x.data()[s];
          }
  return make_op("unpatchify", {H, W, c}, std::move(out), {x}, [gh, gw, k, c, W](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = grad_buf(p);
    for (int gi = 0; gi < gh; ++gi)
      for (int gj = 0; gj < gw; ++gj)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            for (int ch = 0; ch < c; ++ch) {
              size_t dst = ((static_cast<size_t>(gi * k + ky) * W) + (gj * k + kx)) * c + ch;
              size_t s = static_cast<size_t>(gi * gw + gj) * (k * k * c) + (ky * k + kx) * c + ch;
              g[s] += self.grad[dst];
            }
  });
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  require_rank(x, 3, "bilinear_resize");
  int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("vgpt: bilinear_resize: bad output size");
  struct Taps {
    int i0, i1;
    float w0, w1;
  };
  auto axis_taps = [](int in, int out) {
    std::vector<Taps> taps(static_cast<size_t>(out));
    for (int i = 0; i < out; ++i) {
      double src = (i + 0.5) * static_cast<double>(in) / out - 0.5;
      src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
      int i0 = static_cast<int>(std::floor(src));
      int i1 = std::min(i0 + 1, in - 1);
      float w1 = static_cast<float>(src - i0);
      taps[static_cast<size_t>(i)] = {i0, i1, 1.0f - w1, w1};
    }
    return taps;
  };
  std::vector<Taps> ty = axis_taps(h, out_h), tx = axis_taps(w, out_w);
  std::vector<float> out(static_cast<size_t>(out_h) * out_w * c);
  for (int i = 0; i < out_h; ++i)
    for (int j = 0; j < out_w; ++j)
      for (int ch = 0; ch < c; ++ch) {
        const Taps& a = ty[static_cast<size_t>(i)];
        const Taps& b = tx[static_cast<size_t>(j)];
        auto at = [&](int yy, int xx) { return x.data()[(static_cast<size_t>(yy) * w + xx) * c + ch]; };
        out[(static_cast<size_t>(i) * out_w + j) * c + ch] =
            a.w0 * (b.w0 * at(a.i0, b.i0) + b.w1 * at(a.i0, b.i1)) +
            a.w1 * (b.w0 * at(a.i1, b.i0) + b.w1 * at(a.i1, b.i1));
      }
  return make_op("bilinear_resize", {out_h, out_w, c}, std::move(out), {x},
                 [ty = std::move(ty), tx = std::move(tx), out_h, out_w, w, c](Node& self) {
                   Node& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   auto& g = grad_buf(p);
                   for (int i = 0; i < out_h; ++i)
                     for (int j = 0; j < out_w; ++j)
                       for (int ch = 0; ch < c; ++ch) {
                         const auto& a = ty[static_cast<size_t>(i)];
                         const auto& b = tx[static_cast<size_t>(j)];
                         float dv = self.grad[(static_cast<size_t>(i) * out_w + j) * c + ch];
                         g[(static_cast<size_t>(a.i0) * w + b.i0) * c + ch] += a.w0 * b.w0 * dv;
                         g[(static_cast<size_t>(a.i0) * w + b.i1) * c + ch] += a.w0 * b.w1 * dv;
                         g[(static_cast<size_t>(a.i1) * w + b.i0) * c + ch] += a.w1 * b.w0 * dv;
                         g[(static_cast<size_t>(a.i1) * w + b.i1) * c + ch] += a.w1 * b.w1 * dv;
                       }
                 });
}

// ---------------- misc ----------------

Tensor stopgrad(const Tensor& x) {
  auto n = std::make_shared<Node>();
  n->op = "stopgrad";
  n->shape = x.shape();
  n->data = x.data();
  return Tensor(n);
}

Tensor clamp01(const Tensor& x) {
  if (grad_enabled() && x.requires_grad())
    throw std::runtime_error("vgpt: clamp01 is inference-only");
  std::vector<float> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x.data()[i], 0.0f), 1.0f);
  return Tensor(make_leaf(x.shape(), std::move(out), false));
}

}  // namespace vgpt

// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a graph node. Copying a Tensor shares the
// node (like a framework tensor); use clone() for an independent leaf. Every
// op that has at least one input with requires_grad records a backward rule
// on its output node; backward() on a scalar then walks the graph once in
// reverse topological order and accumulates gradients by plain summation.

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ibke {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;
using BackwardFn = std::function<void(const Node& self)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return !backward; }
  /// Adds `g` into grad, allocating a zero buffer first if needed.
  void accumulate(std::span<const double> g);
  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Row-major r×c matrix from a flat list.
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values,
                       bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// Matrix view: 1-D tensors are treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  /// Mutable access to a leaf's values (optimizer updates, init). Throws for
  /// interior nodes, whose values are owned by the graph.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  /// Gradient buffer; empty span if no gradient has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  /// New leaf holding a copy of the values, without gradient tracking.
  Tensor detach() const;
  /// New leaf holding a copy of the values with the same requires_grad flag.
  Tensor clone() const;

  const char* op_name() const;
  bool is_leaf() const;

  /// Reverse-mode sweep from this scalar. Leaves accumulate (+=) into their
  /// gradient buffers; interior gradients are reset at the start of each sweep.
  void backward() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Builds an op result. If no input requires grad the backward rule is
/// dropped and the result is a constant leaf. Throws NumericError when any
/// output value is non-finite.
Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                   std::initializer_list<Tensor> inputs, detail::BackwardFn backward);

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // a·b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a·bᵀ
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // aᵀ·b
Tensor transpose(const Tensor& a);

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// a (m×n) + row (1×n), broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& row);
/// a (m×n) ⊙ col (m×1), broadcast over columns.
Tensor mul_col(const Tensor& a, const Tensor& col);
Tensor scale(const Tensor& a, double factor);
/// a ⊙ s where s is a 1-element tensor.
Tensor scale_by(const Tensor& a, const Tensor& s);
Tensor add_scalar(const Tensor& a, double c);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
/// Clamp into [lo, hi]; gradient passes only where lo < x < hi.
Tensor clamp(const Tensor& a, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- structure ------------------------------------------------------------

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(const Tensor& a, const Tensor& b);
/// Gathers rows of `table` by index (embedding lookup).
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// Reshape without copying semantics change; numel must match.
Tensor reshape(const Tensor& a, Shape shape);

// ---- normalization / attention -------------------------------------------

/// Softmax along `axis` (0 = down columns, 1 = along rows) of a 2-D tensor.
Tensor softmax(const Tensor& x, int axis = 1);
/// Row-wise layer norm with gain and bias rows (1×n).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// Multi-head causal self-attention on T×d projections; heads are contiguous
/// column blocks of width d / n_heads. Scores are multiplied by `score_scale`.
/// `segments` packs several independent sequences row-wise (lengths summing to
/// T); attention never crosses a segment boundary. Empty means one sequence.
Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             std::size_t n_heads, double score_scale,
                             std::span<const std::size_t> segments = {});

// ---- losses ---------------------------------------------------------------

enum class Reduction { Mean, Sum };

/// Fused log-softmax + negative log-likelihood over rows of `logits`.
/// A target of -1 ignores that row. Mean divides by the number of used rows.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     Reduction reduction = Reduction::Mean);

/// Mean over `rows` of KL[softmax(logits[r]) ‖ exp(reference_log_probs[r])].
/// The reference is treated as a constant.
Tensor kl_to_reference(const Tensor& logits, std::span<const double> reference_log_probs,
                       std::span<const int> rows);

// ---- non-differentiable helpers ------------------------------------------

/// Row-wise log-softmax of a plain buffer (rows × cols).
std::vector<double> log_softmax_rows(std::span<const double> x, std::size_t rows, std::size_t cols);

}  // namespace ibke

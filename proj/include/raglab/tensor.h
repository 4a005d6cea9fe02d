#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Every op returns a fresh Tensor. When gradient recording is enabled and any
// input requires a gradient, the result keeps references to its inputs plus a
// closure that pushes the output gradient back into them. backward() walks
// that graph in reverse topological order.
//
// Ops cover rank 0-2 tensors; a rank-1 tensor behaves as a single row.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace raglab {

#ifdef RAGLAB_REAL_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> values);

  static Tensor scalar(Real value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<Real> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const Real> data() const;
  // Leaf tensors only (weights being trained, test fixtures). Mutating an
  // interior node invalidates gradients already recorded against it.
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();

  // Same values, no graph, no gradient flag.
  Tensor detach() const;
  // Deep copy of the values, keeping the requires-grad flag.
  Tensor clone() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct detail::Node;
  friend class OpBuilder;
  friend void backward(const Tensor& loss);
};

// Thread-local switch for graph recording.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

enum class Activation { silu, relu };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation kind);
Real activate(Real x, Activation kind);

// --- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ without materialising the transpose.
Tensor matmul_bt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor sum(const Tensor& a);

// Rows [row0, row0+nrows) × columns [col0, col0+ncols).
Tensor slice(const Tensor& a, std::size_t row0, std::size_t nrows, std::size_t col0,
             std::size_t ncols);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);
// Multiplies column j by the constant factors[j].
Tensor scale_columns(const Tensor& a, std::span<const Real> factors);

// Row-wise softmax of scores + additive_mask. The mask is either the same
// shape as the scores or a single row broadcast over all rows; entries are 0
// or -infinity. Rows with every entry masked come out as zeros.
Tensor softmax_masked(const Tensor& scores, const Tensor& additive_mask);

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps);
Tensor act_fn(const Tensor& x, Activation kind);

// Mean negative log-likelihood over the rows whose mask entry is true.
// Throws ContractError when every row is masked out.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     const std::vector<bool>& position_mask);

// Fills grad on every requires-grad tensor reachable from a scalar loss,
// including intermediates. Gradients accumulate across calls.
void backward(const Tensor& loss);

}  // namespace raglab

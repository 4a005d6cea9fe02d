#include "raglab/tensor.h"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "raglab/error.h"

namespace raglab {

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<Real>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    return grad;
  }
  bool wants_grad() const { return requires_grad; }
};

}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

constexpr Real kNegInf = -std::numeric_limits<Real>::infinity();

std::size_t rows_of(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
std::size_t cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

CMapMat view(const std::vector<Real>& v, const Shape& s) {
  return CMapMat(v.data(), static_cast<Eigen::Index>(rows_of(s)),
                 static_cast<Eigen::Index>(cols_of(s)));
}
MapMat view_mut(std::vector<Real>& v, const Shape& s) {
  return MapMat(v.data(), static_cast<Eigen::Index>(rows_of(s)),
                static_cast<Eigen::Index>(cols_of(s)));
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  if (t.rank() > 2) {
    throw DimensionError(std::string(op) + ": expected rank <= 2, got " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

}  // namespace

// Builds result nodes and wires them into the tape when recording is on.
class OpBuilder {
 public:
  using BackwardFn = std::function<void(detail::Node&)>;

  static Tensor make(Shape shape, std::vector<Real> value,
                     std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
    std::vector<const Tensor*> list(inputs);
    return make(std::move(shape), std::move(value), list, std::move(fn));
  }

  static Tensor make(Shape shape, std::vector<Real> value, const std::vector<const Tensor*>& inputs,
                     BackwardFn fn) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool any = false;
    if (t_grad_enabled) {
      for (const Tensor* in : inputs) any = any || in->node_->requires_grad;
    }
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const Tensor* in : inputs) node->parents.push_back(in->node_);
      node->backward_fn = std::move(fn);
    }
    return Tensor(std::move(node));
  }

  static detail::Node& node(const Tensor& t) { return *t.node_; }
};

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

// --- Tensor ------------------------------------------------------------------

Tensor::Tensor(Shape shape, Real fill) : node_(std::make_shared<detail::Node>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape));
  }
  node_->value.assign(shape_size(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<Real> values) : node_(std::make_shared<detail::Node>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape));
  }
  if (values.size() != shape_size(shape)) {
    throw DimensionError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_string(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::scalar(Real value) { return Tensor(Shape{}, std::vector<Real>{value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<Real> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }
std::size_t Tensor::rows() const { return rows_of(node_->shape); }
std::size_t Tensor::cols() const { return cols_of(node_->shape); }
std::span<const Real> Tensor::data() const { return node_->value; }
std::span<Real> Tensor::mutable_data() { return node_->value; }

Real Tensor::item() const {
  if (size() != 1) throw ContractError("item() on a tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

Real Tensor::at(std::size_t row, std::size_t col) const {
  if (row >= rows() || col >= cols()) throw RangeError("tensor index out of range");
  return node_->value[row * cols() + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

std::span<const Real> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

std::span<Real> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value); }

Tensor Tensor::clone() const {
  Tensor copy(node_->shape, node_->value);
  copy.node_->requires_grad = node_->requires_grad;
  return copy;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// --- activations ---------------------------------------------------------------

Activation parse_activation(std::string_view name) {
  if (name == "silu") return Activation::silu;
  if (name == "relu") return Activation::relu;
  throw ConfigError("unknown activation kind '" + std::string(name) + "'");
}

std::string_view to_string(Activation kind) {
  return kind == Activation::silu ? "silu" : "relu";
}

Real activate(Real x, Activation kind) {
  if (kind == Activation::relu) return x > 0 ? x : Real(0);
  Real y = x / (Real(1) + std::exp(-x));
  // x/2 underflows to zero for the smallest subnormals; keep sign(y) == sign(x).
  if (x > 0 && !(y > 0)) y = std::numeric_limits<Real>::denorm_min();
  return y;
}

namespace {

Real activate_grad(Real x, Activation kind) {
  if (kind == Activation::relu) return x > 0 ? Real(1) : Real(0);
  const Real s = Real(1) / (Real(1) + std::exp(-x));
  return s * (Real(1) + x * (Real(1) - s));
}

}  // namespace

// --- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const Shape a_shape{a.rows(), a.cols()};
  const Shape b_shape{b.rows(), b.cols()};
  Shape out_shape{a.rows(), b.cols()};
  std::vector<Real> out(a.rows() * b.cols());
  view_mut(out, out_shape).noalias() =
      view(OpBuilder::node(a).value, a_shape) * view(OpBuilder::node(b).value, b_shape);
  return OpBuilder::make(std::move(out_shape), std::move(out), {&a, &b},
                         [a_shape, b_shape](detail::Node& self) {
                           auto& pa = *self.parents[0];
                           auto& pb = *self.parents[1];
                           const auto g = view(self.grad, self.shape);
                           if (pa.wants_grad()) {
                             view_mut(pa.grad_buffer(), a_shape).noalias() +=
                                 g * view(pb.value, b_shape).transpose();
                           }
                           if (pb.wants_grad()) {
                             view_mut(pb.grad_buffer(), b_shape).noalias() +=
                                 view(pa.value, a_shape).transpose() * g;
                           }
                         });
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_bt");
  require_matrix(b, "matmul_bt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_bt: inner dimensions differ " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  const Shape a_shape{a.rows(), a.cols()};
  const Shape b_shape{b.rows(), b.cols()};
  Shape out_shape{a.rows(), b.rows()};
  std::vector<Real> out(a.rows() * b.rows());
  view_mut(out, out_shape).noalias() =
      view(OpBuilder::node(a).value, a_shape) * view(OpBuilder::node(b).value, b_shape).transpose();
  return OpBuilder::make(std::move(out_shape), std::move(out), {&a, &b},
                         [a_shape, b_shape](detail::Node& self) {
                           auto& pa = *self.parents[0];
                           auto& pb = *self.parents[1];
                           const auto g = view(self.grad, self.shape);
                           if (pa.wants_grad()) {
                             view_mut(pa.grad_buffer(), a_shape).noalias() +=
                                 g * view(pb.value, b_shape);
                           }
                           if (pb.wants_grad()) {
                             view_mut(pb.grad_buffer(), b_shape).noalias() +=
                                 g.transpose() * view(pa.value, a_shape);
                           }
                         });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const Shape in_shape{a.rows(), a.cols()};
  Shape out_shape{a.cols(), a.rows()};
  std::vector<Real> out(a.size());
  view_mut(out, out_shape) = view(OpBuilder::node(a).value, in_shape).transpose();
  return OpBuilder::make(std::move(out_shape), std::move(out), {&a},
                         [in_shape](detail::Node& self) {
                           auto& pa = *self.parents[0];
                           view_mut(pa.grad_buffer(), in_shape) +=
                               view(self.grad, self.shape).transpose();
                         });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<Real> out(a.size());
  const auto& av = OpBuilder::node(a).value;
  const auto& bv = OpBuilder::node(b).value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return OpBuilder::make(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->wants_grad()) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<Real> out(a.size());
  const auto& av = OpBuilder::node(a).value;
  const auto& bv = OpBuilder::node(b).value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return OpBuilder::make(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    if (self.parents[0]->wants_grad()) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->wants_grad()) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<Real> out(a.size());
  const auto& av = OpBuilder::node(a).value;
  const auto& bv = OpBuilder::node(b).value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return OpBuilder::make(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.wants_grad()) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.wants_grad()) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, Real factor) {
  std::vector<Real> out(OpBuilder::node(a).value);
  for (auto& v : out) v *= factor;
  return OpBuilder::make(a.shape(), std::move(out), {&a}, [factor](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor sum(const Tensor& a) {
  const auto& av = OpBuilder::node(a).value;
  const Real total = std::accumulate(av.begin(), av.end(), Real(0));
  return OpBuilder::make(Shape{}, std::vector<Real>{total}, {&a}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor slice(const Tensor& a, std::size_t row0, std::size_t nrows, std::size_t col0,
             std::size_t ncols) {
  require_matrix(a, "slice");
  if (nrows == 0 || ncols == 0 || row0 + nrows > a.rows() || col0 + ncols > a.cols()) {
    throw DimensionError("slice: block out of range for " + shape_string(a.shape()));
  }
  const std::size_t src_cols = a.cols();
  const auto& av = OpBuilder::node(a).value;
  std::vector<Real> out(nrows * ncols);
  for (std::size_t r = 0; r < nrows; ++r) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((row0 + r) * src_cols + col0), ncols,
                out.begin() + static_cast<std::ptrdiff_t>(r * ncols));
  }
  return OpBuilder::make(Shape{nrows, ncols}, std::move(out), {&a},
                         [row0, nrows, col0, ncols, src_cols](detail::Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t r = 0; r < nrows; ++r) {
                             Real* dst = g.data() + (row0 + r) * src_cols + col0;
                             const Real* src = self.grad.data() + r * ncols;
                             for (std::size_t c = 0; c < ncols; ++c) dst[c] += src[c];
                           }
                         });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t nrows = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != nrows) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.cols());
    total += p.cols();
    inputs.push_back(&p);
  }
  std::vector<Real> out(nrows * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& pv = OpBuilder::node(p).value;
    for (std::size_t r = 0; r < nrows; ++r) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(r * p.cols()), p.cols(),
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += p.cols();
  }
  return OpBuilder::make(Shape{nrows, total}, std::move(out), inputs,
                         [nrows, total, widths](detail::Node& self) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < widths.size(); ++k) {
                             auto& p = *self.parents[k];
                             if (p.wants_grad()) {
                               auto& g = p.grad_buffer();
                               for (std::size_t r = 0; r < nrows; ++r) {
                                 for (std::size_t c = 0; c < widths[k]; ++c) {
                                   g[r * widths[k] + c] += self.grad[r * total + off + c];
                                 }
                               }
                             }
                             off += widths[k];
                           }
                         });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t ncols = parts[0].cols();
  std::size_t total_rows = 0;
  std::vector<std::size_t> sizes;
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != ncols) throw DimensionError("concat_rows: column counts differ");
    total_rows += p.rows();
    sizes.push_back(p.size());
    inputs.push_back(&p);
  }
  std::vector<Real> out;
  out.reserve(total_rows * ncols);
  for (const auto& p : parts) {
    const auto& pv = OpBuilder::node(p).value;
    out.insert(out.end(), pv.begin(), pv.end());
  }
  return OpBuilder::make(Shape{total_rows, ncols}, std::move(out), inputs,
                         [sizes](detail::Node& self) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < sizes.size(); ++k) {
                             auto& p = *self.parents[k];
                             if (p.wants_grad()) {
                               auto& g = p.grad_buffer();
                               for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += self.grad[off + i];
                             }
                             off += sizes[k];
                           }
                         });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  require_matrix(table, "gather_rows");
  if (indices.empty()) throw DimensionError("gather_rows: no indices");
  const std::size_t ncols = table.cols();
  const auto& tv = OpBuilder::node(table).value;
  std::vector<Real> out(indices.size() * ncols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= table.rows()) {
      throw RangeError("gather_rows: row " + std::to_string(indices[i]) + " out of range " +
                       shape_string(table.shape()));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(indices[i] * ncols), ncols,
                out.begin() + static_cast<std::ptrdiff_t>(i * ncols));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return OpBuilder::make(Shape{indices.size(), ncols}, std::move(out), {&table},
                         [idx = std::move(idx), ncols](detail::Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                             Real* dst = g.data() + idx[i] * ncols;
                             const Real* src = self.grad.data() + i * ncols;
                             for (std::size_t c = 0; c < ncols; ++c) dst[c] += src[c];
                           }
                         });
}

Tensor scale_columns(const Tensor& a, std::span<const Real> factors) {
  require_matrix(a, "scale_columns");
  if (factors.size() != a.cols()) throw DimensionError("scale_columns: factor count mismatch");
  const std::size_t ncols = a.cols();
  std::vector<Real> out(OpBuilder::node(a).value);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factors[i % ncols];
  std::vector<Real> f(factors.begin(), factors.end());
  return OpBuilder::make(a.shape(), std::move(out), {&a},
                         [f = std::move(f), ncols](detail::Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             g[i] += self.grad[i] * f[i % ncols];
                           }
                         });
}

Tensor softmax_masked(const Tensor& scores, const Tensor& additive_mask) {
  require_matrix(scores, "softmax_masked");
  require_matrix(additive_mask, "softmax_masked");
  const std::size_t nrows = scores.rows();
  const std::size_t ncols = scores.cols();
  const bool broadcast = additive_mask.rows() == 1 && nrows != 1;
  if (additive_mask.cols() != ncols || (!broadcast && additive_mask.rows() != nrows)) {
    throw DimensionError("softmax_masked: mask " + shape_string(additive_mask.shape()) +
                         " does not broadcast to " + shape_string(scores.shape()));
  }
  const auto& sv = OpBuilder::node(scores).value;
  const auto& mv = OpBuilder::node(additive_mask).value;
  std::vector<Real> out(sv.size(), Real(0));
  for (std::size_t r = 0; r < nrows; ++r) {
    const Real* s = sv.data() + r * ncols;
    const Real* m = mv.data() + (broadcast ? 0 : r * ncols);
    Real* o = out.data() + r * ncols;
    Real best = kNegInf;
    for (std::size_t c = 0; c < ncols; ++c) {
      const Real v = s[c] + m[c];
      if (v > best) best = v;
    }
    if (best == kNegInf) continue;  // fully masked row stays zero
    Real denom = 0;
    for (std::size_t c = 0; c < ncols; ++c) {
      const Real v = s[c] + m[c];
      o[c] = v == kNegInf ? Real(0) : std::exp(v - best);
      denom += o[c];
    }
    for (std::size_t c = 0; c < ncols; ++c) o[c] /= denom;
  }
  return OpBuilder::make(scores.shape(), std::move(out), {&scores},
                         [nrows, ncols](detail::Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t r = 0; r < nrows; ++r) {
                             const Real* y = self.value.data() + r * ncols;
                             const Real* dy = self.grad.data() + r * ncols;
                             Real dot = 0;
                             for (std::size_t c = 0; c < ncols; ++c) dot += y[c] * dy[c];
                             Real* dx = g.data() + r * ncols;
                             for (std::size_t c = 0; c < ncols; ++c) dx[c] += y[c] * (dy[c] - dot);
                           }
                         });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  require_matrix(x, "layernorm");
  const std::size_t nrows = x.rows();
  const std::size_t ncols = x.cols();
  if (gain.size() != ncols || bias.size() != ncols) {
    throw DimensionError("layernorm: gain/bias length must equal " + std::to_string(ncols));
  }
  const auto& xv = OpBuilder::node(x).value;
  const auto& gv = OpBuilder::node(gain).value;
  const auto& bv = OpBuilder::node(bias).value;
  std::vector<Real> xhat(xv.size());
  std::vector<Real> rstd(nrows);
  std::vector<Real> out(xv.size());
  for (std::size_t r = 0; r < nrows; ++r) {
    const Real* xr = xv.data() + r * ncols;
    Real mean = 0;
    for (std::size_t c = 0; c < ncols; ++c) mean += xr[c];
    mean /= static_cast<Real>(ncols);
    Real var = 0;
    for (std::size_t c = 0; c < ncols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<Real>(ncols);
    rstd[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < ncols; ++c) {
      const Real h = (xr[c] - mean) * rstd[r];
      xhat[r * ncols + c] = h;
      out[r * ncols + c] = h * gv[c] + bv[c];
    }
  }
  return OpBuilder::make(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [nrows, ncols, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& gv = pg.value;
        if (pg.wants_grad() || pb.wants_grad()) {
          auto* dg = pg.wants_grad() ? &pg.grad_buffer() : nullptr;
          auto* db = pb.wants_grad() ? &pb.grad_buffer() : nullptr;
          for (std::size_t r = 0; r < nrows; ++r) {
            for (std::size_t c = 0; c < ncols; ++c) {
              const Real dy = self.grad[r * ncols + c];
              if (dg) (*dg)[c] += dy * xhat[r * ncols + c];
              if (db) (*db)[c] += dy;
            }
          }
        }
        if (px.wants_grad()) {
          auto& dx = px.grad_buffer();
          const Real n = static_cast<Real>(ncols);
          for (std::size_t r = 0; r < nrows; ++r) {
            Real mean_dh = 0;
            Real mean_dh_h = 0;
            for (std::size_t c = 0; c < ncols; ++c) {
              const Real dh = self.grad[r * ncols + c] * gv[c];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * ncols + c];
            }
            mean_dh /= n;
            mean_dh_h /= n;
            for (std::size_t c = 0; c < ncols; ++c) {
              const Real dh = self.grad[r * ncols + c] * gv[c];
              dx[r * ncols + c] += rstd[r] * (dh - mean_dh - xhat[r * ncols + c] * mean_dh_h);
            }
          }
        }
      });
}

Tensor act_fn(const Tensor& x, Activation kind) {
  const auto& xv = OpBuilder::node(x).value;
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = activate(xv[i], kind);
  return OpBuilder::make(x.shape(), std::move(out), {&x}, [kind](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * activate_grad(p.value[i], kind);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     const std::vector<bool>& position_mask) {
  require_matrix(logits, "cross_entropy");
  const std::size_t nrows = logits.rows();
  const std::size_t vocab = logits.cols();
  if (targets.size() != nrows || position_mask.size() != nrows) {
    throw DimensionError("cross_entropy: targets/mask length must equal the number of positions");
  }
  const auto& lv = OpBuilder::node(logits).value;
  std::size_t counted = 0;
  Real total = 0;
  std::vector<Real> probs(lv.size(), Real(0));
  for (std::size_t r = 0; r < nrows; ++r) {
    if (!position_mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw RangeError("cross_entropy: target id " + std::to_string(targets[r]) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
    const Real* row = lv.data() + r * vocab;
    const Real best = *std::max_element(row, row + vocab);
    Real denom = 0;
    for (std::size_t c = 0; c < vocab; ++c) {
      probs[r * vocab + c] = std::exp(row[c] - best);
      denom += probs[r * vocab + c];
    }
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] /= denom;
    total -= row[targets[r]] - best - std::log(denom);
    ++counted;
  }
  if (counted == 0) throw ContractError("cross_entropy: every position is masked (empty loss)");
  const Real inv = Real(1) / static_cast<Real>(counted);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return OpBuilder::make(
      Shape{}, std::vector<Real>{total * inv}, {&logits},
      [probs = std::move(probs), tgt = std::move(tgt), mask = position_mask, vocab,
       inv](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        const Real up = self.grad[0] * inv;
        for (std::size_t r = 0; r < mask.size(); ++r) {
          if (!mask[r]) continue;
          for (std::size_t c = 0; c < vocab; ++c) g[r * vocab + c] += up * probs[r * vocab + c];
          g[r * vocab + static_cast<std::size_t>(tgt[r])] -= up;
        }
      });
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar");
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any tensor requiring a gradient");
  }
  // Iterative post-order DFS for a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  visited.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node_->grad_buffer()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
  }
}

}  // namespace raglab

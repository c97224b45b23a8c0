#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stgraph/common.hpp"

namespace stgraph {

namespace detail {

struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until backward touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::size_t numel() const { return values.size(); }

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

// While set, new ops compute values only: no parents, no backward functions.
inline bool& no_grad_flag() {
  thread_local bool flag = false;
  return flag;
}

}  // namespace detail

/// Suppresses tape construction for the enclosing scope (evaluation-mode
/// forwards, finite-difference sweeps).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::no_grad_flag()) { detail::no_grad_flag() = true; }
  ~NoGradGuard() { detail::no_grad_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense 64-bit tensor participating in a reverse-mode differentiation graph.
/// Value-semantic handle: copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad = false) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e == 0) throw std::invalid_argument("tensor extents must be positive");
      n *= e;
    }
    if (n != values.size()) {
      throw std::invalid_argument("shape/value length mismatch: shape wants " + std::to_string(n) +
                                  " values, got " + std::to_string(values.size()));
    }
    node_ = std::make_shared<detail::TensorNode>();
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(std::vector<std::size_t> shape, double v, bool requires_grad = false) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->values.size(); }

  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }

  const std::vector<double>& values() const { return node_->values; }
  std::vector<double>& mutable_values() { return node_->values; }
  double value(std::size_t i = 0) const { return node_->values.at(i); }
  double at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (node_->grad.empty()) throw std::invalid_argument("tensor has no gradient; run backward first");
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  std::shared_ptr<detail::TensorNode> handle() const { return node_; }
  detail::TensorNode* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_op(std::vector<std::size_t> shape, std::vector<double> values,
                        std::vector<Tensor> parents,
                        std::function<void(detail::TensorNode&)> backward_fn);
};

/// Builds a tape node from computed values, parent handles, and a pull-style
/// backward function. Custom ops (losses, fused kernels) go through here.
inline Tensor make_op(std::vector<std::size_t> shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(detail::TensorNode&)> backward_fn) {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  if (!detail::no_grad_flag()) {
    bool needs = false;
    for (const Tensor& p : parents) needs = needs || p.node()->requires_grad;
    if (needs) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (Tensor& p : parents) node->parents.push_back(p.handle());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

// Binary elementwise with scalar broadcast on either side.
template <class Fwd, class Bwd>
Tensor binary_ew(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!a_scalar && !b_scalar) check_same_shape(a, b, name);
  const Tensor& big = a_scalar && !b_scalar ? b : a;
  std::size_t n = big.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  }
  return make_op(big.shape(), std::move(out), {a, b},
                 [a_scalar, b_scalar, n, bwd](detail::TensorNode& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   pa.ensure_grad();
                   pb.ensure_grad();
                   for (std::size_t i = 0; i < n; ++i) {
                     double ga = 0.0, gb = 0.0;
                     bwd(pa.values[a_scalar ? 0 : i], pb.values[b_scalar ? 0 : i], self.grad[i], ga, gb);
                     pa.grad[a_scalar ? 0 : i] += ga;
                     pb.grad[b_scalar ? 0 : i] += gb;
                   }
                 });
}

template <class Fwd, class Bwd>
Tensor unary_ew(const Tensor& x, Fwd fwd, Bwd bwd) {
  std::size_t n = x.numel();
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(xv[i]);
  return make_op(x.shape(), std::move(out), {x}, [n, bwd](detail::TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) p.grad[i] += bwd(p.values[i], self.values[i], self.grad[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_ew(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g, double& ga, double& gb) {
        ga = g;
        gb = g;
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_ew(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g, double& ga, double& gb) {
        ga = g;
        gb = -g;
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_ew(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& ga, double& gb) {
        ga = g * y;
        gb = g * x;
      });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  return detail::binary_ew(
      a, b, "divide", [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& ga, double& gb) {
        ga = g / y;
        gb = -g * x / (y * y);
      });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_ew(
      x, [c](double v) { return c * v; }, [c](double, double, double g) { return c * g; });
}

inline Tensor add_const(const Tensor& x, double c) {
  return detail::unary_ew(
      x, [c](double v) { return v + c; }, [](double, double, double g) { return g; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_ew(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double, double g) { return v > 0.0 ? g : 0.0; });
}

inline Tensor leaky_relu(const Tensor& x, double alpha) {
  return detail::unary_ew(
      x, [alpha](double v) { return v > 0.0 ? v : alpha * v; },
      [alpha](double v, double, double g) { return v > 0.0 ? g : alpha * g; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_ew(
      x,
      [](double v) {
        // Stable on both tails.
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      },
      [](double, double y, double g) { return g * y * (1.0 - y); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_ew(
      x, [](double v) { return std::exp(v); }, [](double, double y, double g) { return g * y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw std::invalid_argument("log: non-positive input");
  }
  return detail::unary_ew(
      x, [](double v) { return std::log(v); }, [](double v, double, double g) { return g / v; });
}

inline Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  if (n != x.numel()) throw std::invalid_argument("reshape: element count mismatch");
  return make_op(std::move(shape), x.values(), {x}, [](detail::TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw std::invalid_argument("matmul: operands must be 2-D");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw std::invalid_argument("matmul: inner dimensions differ");
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    pa.ensure_grad();
    pb.ensure_grad();
    // dA = dC * B^T
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        double acc = 0.0;
        const double* grow = &self.grad[i * n];
        const double* brow = &pb.values[p * n];
        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
        pa.grad[i * k + p] += acc;
      }
    }
    // dB = A^T * dC
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = &pa.values[i * k];
      const double* grow = &self.grad[i * n];
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = arow[p];
        if (aip == 0.0) continue;
        double* bg = &pb.grad[p * n];
        for (std::size_t j = 0; j < n; ++j) bg[j] += aip * grow[j];
      }
    }
  });
}

enum class Reduce { kSum, kMean };

/// Full reduction to a scalar.
inline Tensor reduce_all(const Tensor& x, Reduce kind) {
  const std::size_t n = x.numel();
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  if (kind == Reduce::kMean) acc /= static_cast<double>(n);
  const double w = kind == Reduce::kMean ? 1.0 / static_cast<double>(n) : 1.0;
  return make_op({1}, {acc}, {x}, [n, w](detail::TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    const double g = self.grad[0] * w;
    for (std::size_t i = 0; i < n; ++i) p.grad[i] += g;
  });
}

/// Reduction of a 2-D tensor along one axis: axis 0 collapses rows
/// (output has one entry per column), axis 1 collapses columns.
inline Tensor reduce_axis(const Tensor& x, Reduce kind, int axis) {
  if (x.ndim() != 2) throw std::invalid_argument("reduce_axis: tensor must be 2-D");
  if (axis != 0 && axis != 1) throw std::invalid_argument("reduce_axis: invalid axis");
  const std::size_t r = x.rows(), c = x.cols();
  const auto& xv = x.values();
  if (axis == 0) {
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
    const double w = kind == Reduce::kMean ? 1.0 / static_cast<double>(r) : 1.0;
    if (kind == Reduce::kMean)
      for (double& v : out) v *= w;
    return make_op({c}, std::move(out), {x}, [r, c, w](detail::TensorNode& self) {
      auto& p = *self.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j] * w;
    });
  }
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += xv[i * c + j];
  const double w = kind == Reduce::kMean ? 1.0 / static_cast<double>(c) : 1.0;
  if (kind == Reduce::kMean)
    for (double& v : out) v *= w;
  return make_op({r}, std::move(out), {x}, [r, c, w](detail::TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[i] * w;
  });
}

/// Concatenation along axis 0 (any rank, matching trailing extents) or
/// axis 1 (2-D, matching row counts).
inline Tensor concat(const std::vector<Tensor>& parts, int axis = 0) {
  if (parts.empty()) throw std::invalid_argument("concat: empty input");
  if (axis == 0) {
    std::vector<std::size_t> shape = parts[0].shape();
    std::size_t total = 0;
    for (const Tensor& t : parts) {
      if (t.ndim() != shape.size())
        throw std::invalid_argument("concat: rank mismatch");
      for (std::size_t d = 1; d < shape.size(); ++d)
        if (t.shape()[d] != shape[d]) throw std::invalid_argument("concat: extent mismatch");
      total += t.shape()[0];
    }
    shape[0] = total;
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    std::vector<double> out;
    out.reserve(n);
    for (const Tensor& t : parts) out.insert(out.end(), t.values().begin(), t.values().end());
    std::vector<std::size_t> sizes;
    for (const Tensor& t : parts) sizes.push_back(t.numel());
    return make_op(std::move(shape), std::move(out), parts, [sizes](detail::TensorNode& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < sizes.size(); ++k) {
        auto& p = *self.parents[k];
        p.ensure_grad();
        for (std::size_t i = 0; i < sizes[k]; ++i) p.grad[i] += self.grad[off + i];
        off += sizes[k];
      }
    });
  }
  if (axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  const std::size_t r = parts[0].rows();
  std::size_t total_c = 0;
  for (const Tensor& t : parts) {
    if (t.ndim() != 2 || t.rows() != r) throw std::invalid_argument("concat: extent mismatch");
    total_c += t.cols();
  }
  std::vector<double> out(r * total_c);
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    const std::size_t c = t.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * total_c + off + j] = t.at(i, j);
    off += c;
  }
  std::vector<std::size_t> colw;
  for (const Tensor& t : parts) colw.push_back(t.cols());
  return make_op({r, total_c}, std::move(out), parts, [r, total_c, colw](detail::TensorNode& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < colw.size(); ++k) {
      auto& p = *self.parents[k];
      p.ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < colw[k]; ++j)
          p.grad[i * colw[k] + j] += self.grad[i * total_c + off + j];
      off += colw[k];
    }
  });
}

/// Softmax within segments of a 1-D tensor, stabilized by the per-segment
/// maximum. Segment ids are non-negative and need not be contiguous.
inline Tensor segment_softmax(const Tensor& x, const std::vector<std::size_t>& segment_ids) {
  if (x.numel() == 0 || !x.defined()) throw std::invalid_argument("segment_softmax: empty input");
  if (x.ndim() != 1) throw std::invalid_argument("segment_softmax: tensor must be 1-D");
  const std::size_t n = x.numel();
  if (segment_ids.size() != n) throw std::invalid_argument("segment_softmax: id count mismatch");
  std::size_t num_seg = 0;
  for (std::size_t id : segment_ids) num_seg = std::max(num_seg, id + 1);
  const auto& xv = x.values();
  std::vector<double> segmax(num_seg, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) segmax[segment_ids[i]] = std::max(segmax[segment_ids[i]], xv[i]);
  std::vector<double> out(n), segsum(num_seg, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(xv[i] - segmax[segment_ids[i]]);
    segsum[segment_ids[i]] += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= segsum[segment_ids[i]];
  return make_op(x.shape(), std::move(out), {x},
                 [n, num_seg, segment_ids](detail::TensorNode& self) {
                   auto& p = *self.parents[0];
                   p.ensure_grad();
                   // d x_i = y_i * (g_i - sum_j over segment of g_j y_j)
                   std::vector<double> dot(num_seg, 0.0);
                   for (std::size_t i = 0; i < n; ++i)
                     dot[segment_ids[i]] += self.grad[i] * self.values[i];
                   for (std::size_t i = 0; i < n; ++i)
                     p.grad[i] += self.values[i] * (self.grad[i] - dot[segment_ids[i]]);
                 });
}

inline Tensor softmax(const Tensor& x) {
  return segment_softmax(x, std::vector<std::size_t>(x.numel(), 0));
}

/// Euclidean norm of the whole tensor as a scalar. The forward value is
/// clamped below at `clamp_min` (pass 1e-12 when the result divides);
/// gradient is x/norm above the clamp and 0 at or below it.
inline Tensor l2_norm(const Tensor& x, double clamp_min = 0.0) {
  double sq = 0.0;
  for (double v : x.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  const double out = std::max(norm, clamp_min);
  return make_op({1}, {out}, {x}, [norm, clamp_min](detail::TensorNode& self) {
    if (norm <= clamp_min || norm == 0.0) return;
    auto& p = *self.parents[0];
    p.ensure_grad();
    const double g = self.grad[0] / norm;
    for (std::size_t i = 0; i < p.values.size(); ++i) p.grad[i] += g * p.values[i];
  });
}

/// Per-row Euclidean norms of a 2-D tensor; same clamp semantics as l2_norm.
inline Tensor rows_l2norm(const Tensor& x, double clamp_min = 0.0) {
  if (x.ndim() != 2) throw std::invalid_argument("rows_l2norm: tensor must be 2-D");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> norms(r, 0.0);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) sq += xv[i * c + j] * xv[i * c + j];
    norms[i] = std::sqrt(sq);
  }
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = std::max(norms[i], clamp_min);
  return make_op({r}, std::move(out), {x}, [r, c, norms, clamp_min](detail::TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      if (norms[i] <= clamp_min || norms[i] == 0.0) continue;
      const double g = self.grad[i] / norms[i];
      for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += g * p.values[i * c + j];
    }
  });
}

/// Selects rows of a 2-D tensor by index (repeats allowed).
inline Tensor rows_gather(const Tensor& x, const std::vector<std::size_t>& indices) {
  if (x.ndim() != 2) throw std::invalid_argument("rows_gather: tensor must be 2-D");
  const std::size_t c = x.cols();
  std::vector<double> out(indices.size() * c);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.rows()) throw std::invalid_argument("rows_gather: index out of range");
    std::copy_n(&x.values()[indices[i] * c], c, &out[i * c]);
  }
  return make_op({indices.size(), c}, std::move(out), {x}, [indices, c](detail::TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) p.grad[indices[i] * c + j] += self.grad[i * c + j];
  });
}

/// Multiplies row i of a 2-D tensor by scalar weights[i].
inline Tensor row_scale(const Tensor& x, const Tensor& weights) {
  if (x.ndim() != 2 || weights.ndim() != 1 || weights.numel() != x.rows())
    throw std::invalid_argument("row_scale: shape mismatch");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] * weights.value(i);
  return make_op({r, c}, std::move(out), {x, weights}, [r, c](detail::TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    px.ensure_grad();
    pw.ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        px.grad[i * c + j] += self.grad[i * c + j] * pw.values[i];
        acc += self.grad[i * c + j] * px.values[i * c + j];
      }
      pw.grad[i] += acc;
    }
  });
}

/// Multiplies every row of a 2-D tensor elementwise by a 1-D vector.
inline Tensor mul_rows(const Tensor& x, const Tensor& v) {
  if (x.ndim() != 2 || v.ndim() != 1 || v.numel() != x.cols())
    throw std::invalid_argument("mul_rows: shape mismatch");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] * v.value(j);
  return make_op({r, c}, std::move(out), {x, v}, [r, c](detail::TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pv = *self.parents[1];
    px.ensure_grad();
    pv.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        px.grad[i * c + j] += self.grad[i * c + j] * pv.values[j];
        pv.grad[j] += self.grad[i * c + j] * px.values[i * c + j];
      }
  });
}

/// Adds a 1-D bias vector to every row of a 2-D tensor.
inline Tensor add_rows(const Tensor& x, const Tensor& b) {
  if (x.ndim() != 2 || b.ndim() != 1 || b.numel() != x.cols())
    throw std::invalid_argument("add_rows: shape mismatch");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] + b.value(j);
  return make_op({r, c}, std::move(out), {x, b}, [r, c](detail::TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    px.ensure_grad();
    pb.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        px.grad[i * c + j] += self.grad[i * c + j];
        pb.grad[j] += self.grad[i * c + j];
      }
  });
}

/// Sums rows of a 2-D tensor into `num_segments` buckets; rows of the output
/// whose segment is empty are zero.
inline Tensor segment_sum_rows(const Tensor& x, const std::vector<std::size_t>& segment_ids,
                               std::size_t num_segments) {
  if (x.ndim() != 2) throw std::invalid_argument("segment_sum_rows: tensor must be 2-D");
  if (segment_ids.size() != x.rows())
    throw std::invalid_argument("segment_sum_rows: id count mismatch");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(num_segments * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    if (segment_ids[i] >= num_segments)
      throw std::invalid_argument("segment_sum_rows: segment id out of range");
    for (std::size_t j = 0; j < c; ++j) out[segment_ids[i] * c + j] += x.values()[i * c + j];
  }
  return make_op({num_segments, c}, std::move(out), {x},
                 [r, c, segment_ids](detail::TensorNode& self) {
                   auto& p = *self.parents[0];
                   p.ensure_grad();
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j)
                       p.grad[i * c + j] += self.grad[segment_ids[i] * c + j];
                 });
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable requires_grad tensor; calling twice without zero_grad adds up.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  detail::TensorNode* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order topological sort.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> visited;
  std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      detail::TensorNode* child = node->parents[next_child].get();
      ++next_child;
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior adjoints are per-sweep scratch; only leaf grads accumulate
  // across repeated backward calls.
  for (detail::TensorNode* node : order) {
    if (node->backward_fn) node->grad.assign(node->values.size(), 0.0);
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorNode* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ----------------------------------------------------------------------------
// Adaptive-moment optimizer
// ----------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers for one parameter set plus a shared step count.
struct OptimState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  void init(const std::vector<Tensor>& params) {
    m.clear();
    v.clear();
    for (const Tensor& p : params) {
      m.emplace_back(p.numel(), 0.0);
      v.emplace_back(p.numel(), 0.0);
    }
    step = 0;
  }
};

/// One adaptive-moment update with bias correction over all parameters.
/// Gradients must be populated; parameters without a gradient are an error.
inline void optimizer_step(std::vector<Tensor>& params, OptimState& state,
                           const AdamConfig& cfg = {}) {
  if (state.m.size() != params.size()) state.init(params);
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    if (!p.has_grad()) throw std::invalid_argument("optimizer_step: missing grad on parameter");
    const auto& g = p.grad();
    auto& vals = p.mutable_values();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != vals.size()) throw std::invalid_argument("optimizer_step: state size mismatch");
    for (std::size_t i = 0; i < vals.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      vals[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ----------------------------------------------------------------------------
// Gradient checking
// ----------------------------------------------------------------------------

/// Compares analytic gradients against central finite differences.
/// `scalar_fn` must be a deterministic function of `params` returning a
/// scalar tensor built on the current tape. Returns the max over parameter
/// tensors of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8), with
/// the magnitudes taken as Euclidean norms over each tensor. Norms, not
/// single elements: the central difference of a double-precision function
/// carries ~1e-11 roundoff at h = 1e-5, so any element whose true gradient
/// sits below that floor would saturate an elementwise ratio regardless of
/// correctness.
inline double grad_check(const std::function<Tensor()>& scalar_fn, std::vector<Tensor> params,
                         double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: h must be positive");
  double base1, base2;
  {
    NoGradGuard ng;
    base1 = scalar_fn().value();
    base2 = scalar_fn().value();
  }
  if (base1 != base2) throw NumericError("grad_check: function is not deterministic");

  for (Tensor& p : params) p.zero_grad();
  Tensor loss = scalar_fn();
  if (loss.numel() != 1) throw std::invalid_argument("grad_check: fn must return a scalar");
  backward(loss);

  double max_rel = 0.0;
  for (Tensor& p : params) {
    const std::vector<double> analytic =
        p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0);
    auto& vals = p.mutable_values();
    double diff_sq = 0.0, analytic_sq = 0.0, numeric_sq = 0.0;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      double fp, fm;
      {
        NoGradGuard ng;
        vals[i] = saved + h;
        fp = scalar_fn().value();
        vals[i] = saved - h;
        fm = scalar_fn().value();
      }
      vals[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      diff_sq += (analytic[i] - numeric) * (analytic[i] - numeric);
      analytic_sq += analytic[i] * analytic[i];
      numeric_sq += numeric * numeric;
    }
    const double denom =
        std::max({std::sqrt(analytic_sq), std::sqrt(numeric_sq), 1e-8});
    max_rel = std::max(max_rel, std::sqrt(diff_sq) / denom);
  }
  return max_rel;
}

}  // namespace stgraph

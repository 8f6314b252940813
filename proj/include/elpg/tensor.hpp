#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "elpg/error.hpp"

namespace elpg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

/// One recorded node of the computation graph. Tensors are shared handles to
/// nodes; the graph reachable from a loss scalar is its gradient tape.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated on first backward touch
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Accumulates into input grads given this node's grad. Empty for leaves
    // and constant-folded results.
    std::function<void(Node&)> backward_fn;

    std::size_t size() const { return value.size(); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Decomposition of a shape around one axis: linear index of element
// (o, i, in) is (o * n + i) * inner + in.
struct AxisSplit {
    std::size_t outer, n, inner;
};

inline AxisSplit axis_split(const Shape& shape, std::size_t axis) {
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
    return s;
}

}  // namespace detail

/// Dense row-major tensor of 64-bit floats with reverse-mode autodiff.
///
/// A Tensor is a cheap shared handle to a graph node. Operations on tensors
/// whose inputs require gradients record backward rules; backward() walks the
/// recorded graph in reverse topological order and accumulates leaf
/// gradients additively.
class Tensor {
  public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}

    static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

    static Tensor full(Shape shape, double v) {
        Tensor t;
        t.node_->value.assign(shape_numel(shape), v);
        t.node_->shape = std::move(shape);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> data) {
        if (data.size() != shape_numel(shape)) {
            throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    /// Trainable leaf.
    static Tensor param(Shape shape, std::vector<double> data) {
        Tensor t = from(std::move(shape), std::move(data));
        t.node_->requires_grad = true;
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t ndim() const { return node_->shape.size(); }

    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& data() { return node_->value; }
    double item() const {
        if (size() != 1) {
            throw ContractError("item: tensor " + shape_str(shape()) + " is not scalar");
        }
        return node_->value[0];
    }
    double at(std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw ContractError("grad: no gradient recorded for this tensor");
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
    void clear_grad() { node_->grad.clear(); }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    bool all_finite() const {
        for (double v : node_->value) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const Tensor& t : inputs) node->inputs.push_back(t.node());
        node->backward_fn = std::move(backward);
    }
    // Constant inputs are dropped: pure-value results do not extend the tape.
    return Tensor(std::move(node));
}

}  // namespace detail

/// Escape hatch for fused or test-only operations: wraps a precomputed value
/// and a caller-supplied backward rule into a graph node.
inline Tensor make_custom_op(const char* op, std::vector<Tensor> inputs, Shape shape,
                             std::vector<double> value,
                             std::function<void(detail::Node&)> backward) {
    return detail::make_result(op, std::move(shape), std::move(value), std::move(inputs),
                               std::move(backward));
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

namespace detail {

// Numpy trailing-dimension rule.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    const std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                 shape_str(b) + " do not broadcast");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides padded to nd dims, with stride 0 on broadcast dims.
inline std::vector<std::size_t> broadcast_strides(const Shape& shape, std::size_t nd) {
    std::vector<std::size_t> strides(nd, 0);
    std::size_t s = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        strides[nd - shape.size() + i] = (shape[i] == 1) ? 0 : s;
        s *= shape[i];
    }
    return strides;
}

template <typename F>
void for_each_broadcast(const Shape& out_shape, const Shape& a_shape, const Shape& b_shape,
                        F&& body) {
    const std::size_t nd = out_shape.size();
    const auto sa = broadcast_strides(a_shape, nd);
    const auto sb = broadcast_strides(b_shape, nd);
    std::vector<std::size_t> idx(nd, 0);
    const std::size_t total = shape_numel(out_shape);
    std::size_t ia = 0, ib = 0;
    for (std::size_t lin = 0; lin < total; ++lin) {
        body(lin, ia, ib);
        for (std::size_t d = nd; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out_shape[d]) break;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

// Sum-reduce a gradient of `from` shape down to `to` shape (inverse of
// broadcasting `to` up to `from`).
inline void reduce_into(const std::vector<double>& grad, const Shape& from, const Shape& to,
                        std::vector<double>& out) {
    if (from == to) {
        for (std::size_t i = 0; i < grad.size(); ++i) out[i] += grad[i];
        return;
    }
    const std::size_t nd = from.size();
    const auto st = broadcast_strides(to, nd);
    std::vector<std::size_t> idx(nd, 0);
    std::size_t it = 0;
    for (std::size_t lin = 0; lin < grad.size(); ++lin) {
        out[it] += grad[lin];
        for (std::size_t d = nd; d-- > 0;) {
            ++idx[d];
            it += st[d];
            if (idx[d] < from[d]) break;
            it -= st[d] * from[d];
            idx[d] = 0;
        }
    }
}

template <typename FwdOp>
Tensor elementwise_binary(const char* op, const Tensor& a, const Tensor& b, FwdOp fwd,
                          std::function<void(detail::Node&)> backward) {
    if (a.shape() == b.shape()) {
        std::vector<double> out(a.size());
        const auto& av = a.data();
        const auto& bv = b.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
        return make_result(op, a.shape(), std::move(out), {a, b}, std::move(backward));
    }
    Shape os = broadcast_shape(op, a.shape(), b.shape());
    std::vector<double> out(shape_numel(os));
    const auto& av = a.data();
    const auto& bv = b.data();
    for_each_broadcast(os, a.shape(), b.shape(), [&](std::size_t lin, std::size_t ia,
                                                     std::size_t ib) {
        out[lin] = fwd(av[ia], bv[ib]);
    });
    return make_result(op, std::move(os), std::move(out), {a, b}, std::move(backward));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(
        "add", a, b, [](double x, double y) { return x + y; },
        [](detail::Node& n) {
            for (int k = 0; k < 2; ++k) {
                auto& in = *n.inputs[k];
                if (!in.requires_grad) continue;
                in.ensure_grad();
                detail::reduce_into(n.grad, n.shape, in.shape, in.grad);
            }
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](detail::Node& n) {
            auto& ia = *n.inputs[0];
            auto& ib = *n.inputs[1];
            if (ia.requires_grad) {
                ia.ensure_grad();
                detail::reduce_into(n.grad, n.shape, ia.shape, ia.grad);
            }
            if (ib.requires_grad) {
                ib.ensure_grad();
                std::vector<double> neg(n.grad.size());
                for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -n.grad[i];
                detail::reduce_into(neg, n.shape, ib.shape, ib.grad);
            }
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::elementwise_binary(
        "mul", a, b, [](double x, double y) { return x * y; },
        [a_shape = a.shape(), b_shape = b.shape()](detail::Node& n) {
            auto& ia = *n.inputs[0];
            auto& ib = *n.inputs[1];
            std::vector<double> tmp(n.grad.size());
            if (ia.requires_grad) {
                ia.ensure_grad();
                if (a_shape == b_shape) {
                    for (std::size_t i = 0; i < tmp.size(); ++i)
                        tmp[i] = n.grad[i] * ib.value[i];
                } else {
                    const auto& bv = ib.value;
                    detail::for_each_broadcast(
                        n.shape, a_shape, b_shape,
                        [&](std::size_t lin, std::size_t, std::size_t iB) {
                            tmp[lin] = n.grad[lin] * bv[iB];
                        });
                }
                detail::reduce_into(tmp, n.shape, a_shape, ia.grad);
            }
            if (ib.requires_grad) {
                ib.ensure_grad();
                if (a_shape == b_shape) {
                    for (std::size_t i = 0; i < tmp.size(); ++i)
                        tmp[i] = n.grad[i] * ia.value[i];
                } else {
                    const auto& av = ia.value;
                    detail::for_each_broadcast(
                        n.shape, a_shape, b_shape,
                        [&](std::size_t lin, std::size_t iA, std::size_t) {
                            tmp[lin] = n.grad[lin] * av[iA];
                        });
                }
                detail::reduce_into(tmp, n.shape, b_shape, ib.grad);
            }
        });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c;
    return detail::make_result("add_scalar", a.shape(), std::move(out), {a},
                               [](detail::Node& n) {
                                   auto& in = *n.inputs[0];
                                   if (!in.requires_grad) return;
                                   in.ensure_grad();
                                   for (std::size_t i = 0; i < n.grad.size(); ++i)
                                       in.grad[i] += n.grad[i];
                               });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
    return detail::make_result("mul_scalar", a.shape(), std::move(out), {a},
                               [c](detail::Node& n) {
                                   auto& in = *n.inputs[0];
                                   if (!in.requires_grad) return;
                                   in.ensure_grad();
                                   for (std::size_t i = 0; i < n.grad.size(); ++i)
                                       in.grad[i] += c * n.grad[i];
                               });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

namespace detail {

template <typename FwdOp, typename GradFromOut>
Tensor unary_by_output(const char* op, const Tensor& a, FwdOp fwd, GradFromOut dydx_of_y) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.at(i));
    return make_result(op, a.shape(), std::move(out), {a},
                       [dydx_of_y](detail::Node& n) {
                           auto& in = *n.inputs[0];
                           if (!in.requires_grad) return;
                           in.ensure_grad();
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               in.grad[i] += n.grad[i] * dydx_of_y(n.value[i], in.value[i]);
                       });
}

}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_by_output(
        "sigmoid", a,
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                     : std::exp(x) / (1.0 + std::exp(x)); },
        [](double y, double) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary_by_output(
        "tanh", a, [](double x) { return std::tanh(x); },
        [](double y, double) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_by_output(
        "relu", a, [](double x) { return x > 0 ? x : 0.0; },
        [](double, double x) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_by_output(
        "exp", a, [](double x) { return std::exp(x); },
        [](double y, double) { return y; });
}

inline Tensor log(const Tensor& a) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!(a.at(i) > 0.0)) {
            throw DomainError("log: nonpositive input " + std::to_string(a.at(i)) +
                              " at flat index " + std::to_string(i));
        }
    }
    return detail::unary_by_output(
        "log", a, [](double x) { return std::log(x); },
        [](double, double x) { return 1.0 / x; });
}

/// Elementwise x^p for x > 0 (p need not be an integer).
inline Tensor pow_scalar(const Tensor& a, double p) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!(a.at(i) > 0.0)) {
            throw DomainError("pow_scalar: nonpositive base " + std::to_string(a.at(i)));
        }
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(a.at(i), p);
    return detail::make_result(
        "pow_scalar", a.shape(), std::move(out), {a}, [p](detail::Node& n) {
            auto& in = *n.inputs[0];
            if (!in.requires_grad) return;
            in.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                in.grad[i] += n.grad[i] * p * std::pow(in.value[i], p - 1.0);
        });
}

/// min(hi, max(lo, x)); gradient passes through strictly inside the clamp.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, a.at(i)));
    return detail::make_result(
        "clamp", a.shape(), std::move(out), {a}, [lo, hi](detail::Node& n) {
            auto& in = *n.inputs[0];
            if (!in.requires_grad) return;
            in.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                if (in.value[i] > lo && in.value[i] < hi) in.grad[i] += n.grad[i];
            }
        });
}

// ---------------------------------------------------------------------------
// Matrix operations
// ---------------------------------------------------------------------------

namespace detail {

// C[m x n] += A[m x k] * B[k x n], row-major, ikj loop order.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = arow[l];
            if (av == 0.0) continue;
            const double* brow = b + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A^T[m x k] * B[k x n], with A stored as [k x m].
inline void gemm_at_b_acc(const double* a, const double* b, double* c, std::size_t m,
                          std::size_t k, std::size_t n) {
    for (std::size_t l = 0; l < k; ++l) {
        const double* arow = a + l * m;
        const double* brow = b + l * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B^T[k x n], with B stored as [n x k].
inline void gemm_a_bt_acc(const double* a, const double* b, double* c, std::size_t m,
                          std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t l = 0; l < k; ++l) s += arow[l] * brow[l];
            crow[j] += s;
        }
    }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " do not contract");
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    return detail::make_result(
        "matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& node) {
            auto& ia = *node.inputs[0];
            auto& ib = *node.inputs[1];
            if (ia.requires_grad) {
                ia.ensure_grad();  // dA += G * B^T
                detail::gemm_a_bt_acc(node.grad.data(), ib.value.data(), ia.grad.data(), m, n, k);
            }
            if (ib.requires_grad) {
                ib.ensure_grad();  // dB += A^T * G
                detail::gemm_at_b_acc(ia.value.data(), node.grad.data(), ib.grad.data(), k, m, n);
            }
        });
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) {
        throw DimensionError("transpose: expected 2-d tensor, got " + shape_str(a.shape()));
    }
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i * n + j);
    return detail::make_result("transpose", {n, m}, std::move(out), {a},
                               [m, n](detail::Node& node) {
                                   auto& in = *node.inputs[0];
                                   if (!in.requires_grad) return;
                                   in.ensure_grad();
                                   for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t j = 0; j < n; ++j)
                                           in.grad[i * n + j] += node.grad[j * m + i];
                               });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(shape));
    }
    return detail::make_result("reshape", std::move(shape), a.data(), {a},
                               [](detail::Node& node) {
                                   auto& in = *node.inputs[0];
                                   if (!in.requires_grad) return;
                                   in.ensure_grad();
                                   for (std::size_t i = 0; i < node.grad.size(); ++i)
                                       in.grad[i] += node.grad[i];
                               });
}

// ---------------------------------------------------------------------------
// Shape surgery: concat / slice
// ---------------------------------------------------------------------------

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw DimensionError("concat: axis out of range");
    std::size_t axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != first.size())
            throw DimensionError("concat: rank mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(first));
        for (std::size_t d = 0; d < first.size(); ++d) {
            if (d != axis && p.dim(d) != first[d])
                throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                     shape_str(first));
        }
        axis_total += p.dim(axis);
    }
    Shape os = first;
    os[axis] = axis_total;
    const auto split = detail::axis_split(os, axis);
    std::vector<double> out(shape_numel(os));
    std::vector<std::size_t> offsets(parts.size());
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        offsets[p] = off;
        const std::size_t pn = parts[p].dim(axis);
        const auto& pv = parts[p].data();
        for (std::size_t o = 0; o < split.outer; ++o) {
            std::copy_n(pv.begin() + o * pn * split.inner, pn * split.inner,
                        out.begin() + (o * split.n + off) * split.inner);
        }
        off += pn;
    }
    return detail::make_result(
        "concat", std::move(os), std::move(out), parts,
        [split, offsets](detail::Node& node) {
            for (std::size_t p = 0; p < node.inputs.size(); ++p) {
                auto& in = *node.inputs[p];
                if (!in.requires_grad) continue;
                in.ensure_grad();
                const std::size_t axis_len = in.size() / (split.outer * split.inner);
                for (std::size_t o = 0; o < split.outer; ++o) {
                    const double* src =
                        node.grad.data() + (o * split.n + offsets[p]) * split.inner;
                    double* dst = in.grad.data() + o * axis_len * split.inner;
                    for (std::size_t i = 0; i < axis_len * split.inner; ++i) dst[i] += src[i];
                }
            }
        });
}

/// Contiguous range [start, start+len) along one axis.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= a.ndim() || start + len > a.dim(axis)) {
        throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of bounds for axis " +
                             std::to_string(axis) + " of " + shape_str(a.shape()));
    }
    const auto split = detail::axis_split(a.shape(), axis);
    Shape os = a.shape();
    os[axis] = len;
    std::vector<double> out(shape_numel(os));
    for (std::size_t o = 0; o < split.outer; ++o) {
        std::copy_n(a.data().begin() + (o * split.n + start) * split.inner, len * split.inner,
                    out.begin() + o * len * split.inner);
    }
    return detail::make_result(
        "slice", std::move(os), std::move(out), {a},
        [split, start, len](detail::Node& node) {
            auto& in = *node.inputs[0];
            if (!in.requires_grad) return;
            in.ensure_grad();
            for (std::size_t o = 0; o < split.outer; ++o) {
                const double* src = node.grad.data() + o * len * split.inner;
                double* dst = in.grad.data() + (o * split.n + start) * split.inner;
                for (std::size_t i = 0; i < len * split.inner; ++i) dst[i] += src[i];
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline Shape drop_axis(const Shape& s, std::size_t axis) {
    Shape out;
    out.reserve(s.size() - 1);
    for (std::size_t d = 0; d < s.size(); ++d)
        if (d != axis) out.push_back(s[d]);
    if (out.empty()) out.push_back(1);
    return out;
}

inline void check_axis(const char* op, const Tensor& a, std::size_t axis) {
    if (axis >= a.ndim())
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for " + shape_str(a.shape()));
    if (a.dim(axis) == 0) throw DomainError(std::string(op) + ": empty axis");
}

}  // namespace detail

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i);
    return detail::make_result("sum", {1}, {s}, {a}, [](detail::Node& node) {
        auto& in = *node.inputs[0];
        if (!in.requires_grad) return;
        in.ensure_grad();
        for (double& g : in.grad) g += node.grad[0];
    });
}

inline Tensor sum(const Tensor& a, std::size_t axis) {
    detail::check_axis("sum", a, axis);
    const auto split = detail::axis_split(a.shape(), axis);
    std::vector<double> out(split.outer * split.inner, 0.0);
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t i = 0; i < split.n; ++i)
            for (std::size_t in = 0; in < split.inner; ++in)
                out[o * split.inner + in] += a.at((o * split.n + i) * split.inner + in);
    return detail::make_result("sum_axis", detail::drop_axis(a.shape(), axis), std::move(out),
                               {a}, [split](detail::Node& node) {
                                   auto& in = *node.inputs[0];
                                   if (!in.requires_grad) return;
                                   in.ensure_grad();
                                   for (std::size_t o = 0; o < split.outer; ++o)
                                       for (std::size_t i = 0; i < split.n; ++i)
                                           for (std::size_t k = 0; k < split.inner; ++k)
                                               in.grad[(o * split.n + i) * split.inner + k] +=
                                                   node.grad[o * split.inner + k];
                               });
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
    detail::check_axis("mean", a, axis);
    return mul_scalar(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

/// Population variance over one axis.
inline Tensor variance(const Tensor& a, std::size_t axis) {
    detail::check_axis("variance", a, axis);
    const auto split = detail::axis_split(a.shape(), axis);
    const double inv_n = 1.0 / static_cast<double>(split.n);
    std::vector<double> mu(split.outer * split.inner, 0.0);
    std::vector<double> out(split.outer * split.inner, 0.0);
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t i = 0; i < split.n; ++i)
            for (std::size_t k = 0; k < split.inner; ++k)
                mu[o * split.inner + k] += a.at((o * split.n + i) * split.inner + k) * inv_n;
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t i = 0; i < split.n; ++i)
            for (std::size_t k = 0; k < split.inner; ++k) {
                const double d = a.at((o * split.n + i) * split.inner + k) - mu[o * split.inner + k];
                out[o * split.inner + k] += d * d * inv_n;
            }
    return detail::make_result(
        "variance", detail::drop_axis(a.shape(), axis), std::move(out), {a},
        [split, mu, inv_n](detail::Node& node) {
            auto& in = *node.inputs[0];
            if (!in.requires_grad) return;
            in.ensure_grad();
            // d var / d x_i = 2 (x_i - mu) / n
            for (std::size_t o = 0; o < split.outer; ++o)
                for (std::size_t i = 0; i < split.n; ++i)
                    for (std::size_t k = 0; k < split.inner; ++k) {
                        const std::size_t xi = (o * split.n + i) * split.inner + k;
                        in.grad[xi] += node.grad[o * split.inner + k] * 2.0 * inv_n *
                                       (in.value[xi] - mu[o * split.inner + k]);
                    }
        });
}

/// Max over one axis; ties break toward the lowest index so the backward
/// routing is deterministic.
inline Tensor max(const Tensor& a, std::size_t axis) {
    detail::check_axis("max", a, axis);
    const auto split = detail::axis_split(a.shape(), axis);
    std::vector<double> out(split.outer * split.inner);
    std::vector<std::size_t> arg(split.outer * split.inner);
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t k = 0; k < split.inner; ++k) {
            std::size_t best = (o * split.n) * split.inner + k;
            for (std::size_t i = 1; i < split.n; ++i) {
                const std::size_t xi = (o * split.n + i) * split.inner + k;
                if (a.at(xi) > a.at(best)) best = xi;
            }
            out[o * split.inner + k] = a.at(best);
            arg[o * split.inner + k] = best;
        }
    return detail::make_result("max_axis", detail::drop_axis(a.shape(), axis), std::move(out),
                               {a}, [arg](detail::Node& node) {
                                   auto& in = *node.inputs[0];
                                   if (!in.requires_grad) return;
                                   in.ensure_grad();
                                   for (std::size_t j = 0; j < arg.size(); ++j)
                                       in.grad[arg[j]] += node.grad[j];
                               });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& a, std::size_t axis) {
    detail::check_axis("softmax", a, axis);
    const auto split = detail::axis_split(a.shape(), axis);
    std::vector<double> out(a.size());
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t k = 0; k < split.inner; ++k) {
            double mx = -1e300;
            for (std::size_t i = 0; i < split.n; ++i)
                mx = std::max(mx, a.at((o * split.n + i) * split.inner + k));
            double z = 0.0;
            for (std::size_t i = 0; i < split.n; ++i) {
                const std::size_t xi = (o * split.n + i) * split.inner + k;
                out[xi] = std::exp(a.at(xi) - mx);
                z += out[xi];
            }
            for (std::size_t i = 0; i < split.n; ++i) out[(o * split.n + i) * split.inner + k] /= z;
        }
    return detail::make_result(
        "softmax", a.shape(), std::move(out), {a}, [split](detail::Node& node) {
            auto& in = *node.inputs[0];
            if (!in.requires_grad) return;
            in.ensure_grad();
            // dx = y * (g - sum(g * y)) per softmax fiber
            for (std::size_t o = 0; o < split.outer; ++o)
                for (std::size_t k = 0; k < split.inner; ++k) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < split.n; ++i) {
                        const std::size_t xi = (o * split.n + i) * split.inner + k;
                        dot += node.grad[xi] * node.value[xi];
                    }
                    for (std::size_t i = 0; i < split.n; ++i) {
                        const std::size_t xi = (o * split.n + i) * split.inner + k;
                        in.grad[xi] += node.value[xi] * (node.grad[xi] - dot);
                    }
                }
        });
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis) {
    detail::check_axis("log_softmax", a, axis);
    const auto split = detail::axis_split(a.shape(), axis);
    std::vector<double> out(a.size());
    for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t k = 0; k < split.inner; ++k) {
            double mx = -1e300;
            for (std::size_t i = 0; i < split.n; ++i)
                mx = std::max(mx, a.at((o * split.n + i) * split.inner + k));
            double z = 0.0;
            for (std::size_t i = 0; i < split.n; ++i)
                z += std::exp(a.at((o * split.n + i) * split.inner + k) - mx);
            const double lz = mx + std::log(z);
            for (std::size_t i = 0; i < split.n; ++i) {
                const std::size_t xi = (o * split.n + i) * split.inner + k;
                out[xi] = a.at(xi) - lz;
            }
        }
    return detail::make_result(
        "log_softmax", a.shape(), std::move(out), {a}, [split](detail::Node& node) {
            auto& in = *node.inputs[0];
            if (!in.requires_grad) return;
            in.ensure_grad();
            // dx = g - softmax(x) * sum(g)
            for (std::size_t o = 0; o < split.outer; ++o)
                for (std::size_t k = 0; k < split.inner; ++k) {
                    double gsum = 0.0;
                    for (std::size_t i = 0; i < split.n; ++i)
                        gsum += node.grad[(o * split.n + i) * split.inner + k];
                    for (std::size_t i = 0; i < split.n; ++i) {
                        const std::size_t xi = (o * split.n + i) * split.inner + k;
                        in.grad[xi] += node.grad[xi] - std::exp(node.value[xi]) * gsum;
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Node*> topo_order(Node* root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    // Iterative post-order DFS; sequence graphs can be deep.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;  // children before parents; reverse for backprop
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// into every reachable leaf that requires them.
inline void backward(const Tensor& loss, double seed = 1.0) {
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    detail::Node* root = loss.node().get();
    if (!root->requires_grad) return;  // nothing trainable upstream
    auto order = detail::topo_order(root);
    root->ensure_grad();
    root->grad[0] += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

/// backward() that first zeroes the listed leaves, so leaves unreachable from
/// the loss end the sweep with an all-zero gradient rather than none.
inline void backward(const Tensor& loss, const std::vector<Tensor>& leaves, double seed = 1.0) {
    for (const Tensor& leaf : leaves) {
        if (!leaf.has_grad()) leaf.node()->ensure_grad();
    }
    backward(loss, seed);
}

// ---------------------------------------------------------------------------
// Flat binary dump: u64le ndim, u64le dims, f64le values.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u64le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw DataError("tensor read: truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void put_f64le(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64le(os, bits);
}

inline double get_f64le(std::istream& is) {
    const std::uint64_t bits = get_u64le(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    detail::put_u64le(os, t.ndim());
    for (std::size_t d = 0; d < t.ndim(); ++d) detail::put_u64le(os, t.dim(d));
    for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64le(os, t.at(i));
}

inline Tensor read_tensor(std::istream& is) {
    const std::uint64_t nd = detail::get_u64le(is);
    if (nd == 0 || nd > 16) throw DataError("tensor read: implausible rank " + std::to_string(nd));
    Shape shape(nd);
    for (auto& d : shape) d = detail::get_u64le(is);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = detail::get_f64le(is);
    if (!is) throw DataError("tensor read: truncated payload");
    return Tensor::from(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Small conveniences used throughout the model code
// ---------------------------------------------------------------------------

/// outer(u, v)[i][j] = u[i] * v[j], built from reshape + matmul.
inline Tensor outer(const Tensor& u, const Tensor& v) {
    return matmul(reshape(u, {u.size(), 1}), reshape(v, {1, v.size()}));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace elpg

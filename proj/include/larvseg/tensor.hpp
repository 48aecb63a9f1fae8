#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "larvseg/errors.hpp"

namespace larvseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

// One executed op (or leaf) on the reverse-mode tape. `seq` is a global
// creation counter; replaying nodes in decreasing `seq` visits ops in exact
// reverse execution order. `parents` are the saved inputs of the op.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

}  // namespace detail

// Dense row-major tensor of 64-bit reals. Copies are shallow handles onto the
// same node; use detach() to break both sharing and the gradient graph.
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                                 std::to_string(data.size()) + " values");
        auto node = std::make_shared<detail::TensorNode>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        node->seq = detail::next_seq();
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node()->shape; }
    std::size_t rank() const { return node()->shape.size(); }
    std::size_t numel() const { return node()->data.size(); }
    std::size_t extent(std::size_t axis) const { return node()->shape.at(axis); }

    const std::vector<double>& values() const { return node()->data; }
    std::vector<double>& values() { return node()->data; }

    double item() const {
        if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
        return node()->data[0];
    }

    bool requires_grad() const { return node()->requires_grad; }
    Tensor& set_requires_grad(bool flag) {
        node()->requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return !node()->grad.empty(); }
    const std::vector<double>& grad() const {
        if (node()->grad.empty()) throw ContractError("grad: no gradient recorded");
        return node()->grad;
    }
    void zero_grad() { node()->grad.assign(node()->data.size(), 0.0); }

    // Deep copy with no graph history.
    Tensor detach() const {
        return from(node()->shape, node()->data, false);
    }

    bool all_finite() const {
        for (double v : node()->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Node identity; two handles with equal id() share parameter storage.
    const void* id() const { return node_.get(); }

    std::shared_ptr<detail::TensorNode> node_handle() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

    detail::TensorNode* node() const {
        if (!node_) throw ContractError("tensor: used before initialization");
        return node_.get();
    }

    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor make_op_result(Shape, std::vector<double>,
                                 std::vector<Tensor>,
                                 const std::function<void(detail::TensorNode*)>&);
};

// Builds a result node. `make_backward` receives the freshly created node and
// returns via capture; it is installed only when some input tracks gradients.
inline Tensor make_op_result(Shape shape, std::vector<double> data,
                             std::vector<Tensor> inputs,
                             const std::function<void(detail::TensorNode*)>& install_backward) {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->seq = detail::next_seq();
    bool rg = false;
    for (const auto& t : inputs) rg = rg || t.requires_grad();
    node->requires_grad = rg;
    if (rg) {
        node->parents.reserve(inputs.size());
        for (const auto& t : inputs) node->parents.push_back(t.node_handle());
        install_backward(node.get());
    }
    return Tensor(std::move(node));
}

// Runs reverse-mode accumulation from a scalar root. Gradients add onto any
// existing buffers; zeroing between steps is the caller's job.
inline void backward(const Tensor& root, double seed = 1.0) {
    if (root.numel() != 1) throw ContractError("backward: root must be scalar");
    auto root_node = root.node_handle();
    if (!root_node->requires_grad) return;

    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> seen;
    std::vector<detail::TensorNode*> stack{root_node.get()};
    seen.insert(root_node.get());
    while (!stack.empty()) {
        detail::TensorNode* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const detail::TensorNode* a, const detail::TensorNode* b) { return a->seq > b->seq; });

    for (detail::TensorNode* n : order) n->ensure_grad();
    root_node->ensure_grad();
    root_node->grad[0] += seed;
    for (detail::TensorNode* n : order) {
        if (n->backward_fn) n->backward_fn();
    }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

inline void accumulate(TensorNode* n, const std::vector<double>& delta) {
    n->ensure_grad();
    for (std::size_t i = 0; i < delta.size(); ++i) n->grad[i] += delta[i];
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_op_result(a.shape(), std::move(out), {a, b}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        auto bn = b.node_handle();
        self->backward_fn = [self, an, bn]() {
            if (an->requires_grad) detail::accumulate(an.get(), self->grad);
            if (bn->requires_grad) detail::accumulate(bn.get(), self->grad);
        };
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_op_result(a.shape(), std::move(out), {a, b}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        auto bn = b.node_handle();
        self->backward_fn = [self, an, bn]() {
            if (an->requires_grad) detail::accumulate(an.get(), self->grad);
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] -= self->grad[i];
            }
        };
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op_result(a.shape(), std::move(out), {a, b}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        auto bn = b.node_handle();
        self->backward_fn = [self, an, bn]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    an->grad[i] += self->grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    bn->grad[i] += self->grad[i] * an->data[i];
            }
        };
    });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (bv[i] == 0.0) throw DomainError("div: zero denominator at index " + std::to_string(i));
        out[i] = av[i] / bv[i];
    }
    return make_op_result(a.shape(), std::move(out), {a, b}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        auto bn = b.node_handle();
        self->backward_fn = [self, an, bn]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    an->grad[i] += self->grad[i] / bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    bn->grad[i] -= self->grad[i] * self->data[i] / bn->data[i];
            }
        };
    });
}

// out = k*a + c, the one scalar op every +s/-s/*s variant reduces to.
inline Tensor affine(const Tensor& a, double k, double c) {
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * av[i] + c;
    return make_op_result(a.shape(), std::move(out), {a}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        self->backward_fn = [self, an, k]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += k * self->grad[i];
        };
    });
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, const char* /*name*/, Fwd fwd, Bwd dfdx_from_xy) {
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
    return make_op_result(a.shape(), std::move(out), {a}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        self->backward_fn = [self, an, dfdx_from_xy]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i)
                an->grad[i] += self->grad[i] * dfdx_from_xy(an->data[i], self->data[i]);
        };
    });
}

}  // namespace detail

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(a, "exp", [](double x) { return std::exp(x); },
                            [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    for (double v : a.values())
        if (v <= 0.0) throw DomainError("log: non-positive input " + std::to_string(v));
    return detail::unary_op(a, "log", [](double x) { return std::log(x); },
                            [](double x, double) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                            [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a, "sigmoid",
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor sqrt(const Tensor& a) {
    for (double v : a.values())
        if (v < 0.0) throw DomainError("sqrt: negative input " + std::to_string(v));
    return detail::unary_op(a, "sqrt", [](double x) { return std::sqrt(x); },
                            [](double, double y) { return 0.5 / y; });
}

// max(a, floor); subgradient passes only where a > floor.
inline Tensor clamp_min(const Tensor& a, double floor) {
    return detail::unary_op(a, "clamp_min",
                            [floor](double x) { return x > floor ? x : floor; },
                            [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

// Elementwise max; ties route the gradient to `a`.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "maximum");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] >= bv[i] ? av[i] : bv[i];
    return make_op_result(a.shape(), std::move(out), {a, b}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        auto bn = b.node_handle();
        self->backward_fn = [self, an, bn]() {
            for (std::size_t i = 0; i < self->grad.size(); ++i) {
                if (an->data[i] >= bn->data[i]) {
                    if (an->requires_grad) {
                        an->ensure_grad();
                        an->grad[i] += self->grad[i];
                    }
                } else if (bn->requires_grad) {
                    bn->ensure_grad();
                    bn->grad[i] += self->grad[i];
                }
            }
        };
    });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return affine(a, 1.0, s); }
inline Tensor operator+(double s, const Tensor& a) { return affine(a, 1.0, s); }
inline Tensor operator-(const Tensor& a, double s) { return affine(a, 1.0, -s); }
inline Tensor operator-(double s, const Tensor& a) { return affine(a, -1.0, s); }
inline Tensor operator*(const Tensor& a, double s) { return affine(a, s, 0.0); }
inline Tensor operator*(double s, const Tensor& a) { return affine(a, s, 0.0); }
inline Tensor operator/(const Tensor& a, double s) {
    if (s == 0.0) throw DomainError("div: zero scalar denominator");
    return affine(a, 1.0 / s, 0.0);
}
inline Tensor operator-(const Tensor& a) { return affine(a, -1.0, 0.0); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const std::size_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2)
        throw DimensionError("matmul: inner dims disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const double* ap = a.values().data();
    const double* bp = b.values().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            const double av = ap[i * k + l];
            const double* brow = bp + l * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_op_result({m, n}, std::move(out), {a, b}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        auto bn = b.node_handle();
        self->backward_fn = [self, an, bn, m, k, n]() {
            const double* up = self->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                // dA = dC * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        double acc = 0.0;
                        const double* urow = up + i * n;
                        const double* brow = bn->data.data() + l * n;
                        for (std::size_t j = 0; j < n; ++j) acc += urow[j] * brow[j];
                        an->grad[i * k + l] += acc;
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB = A^T * dC
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        const double av = an->data[i * k + l];
                        const double* urow = up + i * n;
                        double* grow = bn->grad.data() + l * n;
                        for (std::size_t j = 0; j < n; ++j) grow[j] += av * urow[j];
                    }
            }
        };
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: expects rank-2, got " + shape_str(a.shape()));
    const std::size_t m = a.extent(0), n = a.extent(1);
    std::vector<double> out(m * n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    return make_op_result({n, m}, std::move(out), {a}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        self->backward_fn = [self, an, m, n]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += self->grad[j * m + i];
        };
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    return make_op_result(std::move(shape), a.values(), {a}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        self->backward_fn = [self, an]() { detail::accumulate(an.get(), self->grad); };
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    return make_op_result({1}, {acc}, {a}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        self->backward_fn = [self, an]() {
            an->ensure_grad();
            const double up = self->grad[0];
            for (double& g : an->grad) g += up;
        };
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw DomainError("mean: empty tensor");
    return sum(a) * (1.0 / static_cast<double>(a.numel()));
}

namespace detail {
inline void check_axis(const Tensor& a, std::size_t axis, const char* op) {
    if (a.rank() != 2) throw DomainError(std::string(op) + ": expects rank-2, got " + shape_str(a.shape()));
    if (axis > 1) throw DomainError(std::string(op) + ": invalid axis " + std::to_string(axis));
    if (a.extent(axis) == 0) throw DomainError(std::string(op) + ": empty axis");
}
}  // namespace detail

// Reduces the given axis of a rank-2 tensor: axis=0 folds rows away, axis=1 columns.
inline Tensor sum_axis(const Tensor& a, std::size_t axis) {
    detail::check_axis(a, axis, "sum_axis");
    const std::size_t m = a.extent(0), n = a.extent(1);
    const auto& av = a.values();
    std::vector<double> out;
    if (axis == 0) {
        out.assign(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
    } else {
        out.assign(m, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i] += av[i * n + j];
    }
    Shape out_shape{axis == 0 ? n : m};
    return make_op_result(std::move(out_shape), std::move(out), {a}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        self->backward_fn = [self, an, m, n, axis]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    an->grad[i * n + j] += self->grad[axis == 0 ? j : i];
        };
    });
}

inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
    detail::check_axis(a, axis, "mean_axis");
    return sum_axis(a, axis) * (1.0 / static_cast<double>(a.extent(axis)));
}

// Per-slice max with gradient routed to the first attaining element.
inline Tensor max_axis(const Tensor& a, std::size_t axis) {
    detail::check_axis(a, axis, "max_axis");
    const std::size_t m = a.extent(0), n = a.extent(1);
    const auto& av = a.values();
    const std::size_t out_n = axis == 0 ? n : m;
    std::vector<double> out(out_n);
    auto arg = std::make_shared<std::vector<std::size_t>>(out_n);
    if (axis == 0) {
        for (std::size_t j = 0; j < n; ++j) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < m; ++i)
                if (av[i * n + j] > av[best * n + j]) best = i;
            (*arg)[j] = best * n + j;
            out[j] = av[best * n + j];
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < n; ++j)
                if (av[i * n + j] > av[i * n + best]) best = j;
            (*arg)[i] = i * n + best;
            out[i] = av[i * n + best];
        }
    }
    return make_op_result({out_n}, std::move(out), {a}, [&](detail::TensorNode* self) {
        auto an = a.node_handle();
        self->backward_fn = [self, an, arg]() {
            an->ensure_grad();
            for (std::size_t s = 0; s < arg->size(); ++s) an->grad[(*arg)[s]] += self->grad[s];
        };
    });
}

// ---------------------------------------------------------------------------
// Broadcast helpers for rank-2 tensors
// ---------------------------------------------------------------------------

// X[m x n] + v[n], the usual bias add.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    if (x.rank() != 2 || v.rank() != 1 || v.extent(0) != x.extent(1))
        throw DimensionError("add_rowvec: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    const std::size_t m = x.extent(0), n = x.extent(1);
    std::vector<double> out(m * n);
    const auto& xv = x.values();
    const auto& vv = v.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + vv[j];
    return make_op_result({m, n}, std::move(out), {x, v}, [&](detail::TensorNode* self) {
        auto xn = x.node_handle();
        auto vn = v.node_handle();
        self->backward_fn = [self, xn, vn, m, n]() {
            if (xn->requires_grad) detail::accumulate(xn.get(), self->grad);
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) vn->grad[j] += self->grad[i * n + j];
            }
        };
    });
}

namespace detail {

enum class ColBcast { Sub, Mul, Div };

inline Tensor colvec_op(const Tensor& x, const Tensor& c, ColBcast kind, const char* name) {
    if (x.rank() != 2 || c.rank() != 1 || c.extent(0) != x.extent(0))
        throw DimensionError(std::string(name) + ": " + shape_str(x.shape()) + " with " +
                             shape_str(c.shape()));
    const std::size_t m = x.extent(0), n = x.extent(1);
    const auto& xv = x.values();
    const auto& cv = c.values();
    if (kind == ColBcast::Div)
        for (double v : cv)
            if (v == 0.0) throw DomainError(std::string(name) + ": zero row divisor");
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double ci = cv[i];
        for (std::size_t j = 0; j < n; ++j) {
            const double xij = xv[i * n + j];
            out[i * n + j] = kind == ColBcast::Sub ? xij - ci
                           : kind == ColBcast::Mul ? xij * ci
                                                   : xij / ci;
        }
    }
    return make_op_result({m, n}, std::move(out), {x, c}, [&](detail::TensorNode* self) {
        auto xn = x.node_handle();
        auto cn = c.node_handle();
        self->backward_fn = [self, xn, cn, m, n, kind]() {
            for (std::size_t i = 0; i < m; ++i) {
                const double ci = cn->data[i];
                for (std::size_t j = 0; j < n; ++j) {
                    const double up = self->grad[i * n + j];
                    if (xn->requires_grad) {
                        xn->ensure_grad();
                        xn->grad[i * n + j] += kind == ColBcast::Sub ? up
                                             : kind == ColBcast::Mul ? up * ci
                                                                     : up / ci;
                    }
                    if (cn->requires_grad) {
                        cn->ensure_grad();
                        if (kind == ColBcast::Sub)
                            cn->grad[i] -= up;
                        else if (kind == ColBcast::Mul)
                            cn->grad[i] += up * xn->data[i * n + j];
                        else
                            cn->grad[i] -= up * xn->data[i * n + j] / (ci * ci);
                    }
                }
            }
        };
    });
}

}  // namespace detail

// Per-row broadcast against a length-m column vector.
inline Tensor sub_colvec(const Tensor& x, const Tensor& c) {
    return detail::colvec_op(x, c, detail::ColBcast::Sub, "sub_colvec");
}
inline Tensor mul_colvec(const Tensor& x, const Tensor& c) {
    return detail::colvec_op(x, c, detail::ColBcast::Mul, "mul_colvec");
}
inline Tensor div_colvec(const Tensor& x, const Tensor& c) {
    return detail::colvec_op(x, c, detail::ColBcast::Div, "div_colvec");
}

// Broadcast against a 1-element tensor (keeps the scalar differentiable).
inline Tensor sub_bcast(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("sub_bcast: scalar operand expected");
    const double sv = s.values()[0];
    std::vector<double> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] - sv;
    return make_op_result(x.shape(), std::move(out), {x, s}, [&](detail::TensorNode* self) {
        auto xn = x.node_handle();
        auto sn = s.node_handle();
        self->backward_fn = [self, xn, sn]() {
            if (xn->requires_grad) detail::accumulate(xn.get(), self->grad);
            if (sn->requires_grad) {
                sn->ensure_grad();
                for (double g : self->grad) sn->grad[0] -= g;
            }
        };
    });
}

inline Tensor div_bcast(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("div_bcast: scalar operand expected");
    const double sv = s.values()[0];
    if (sv == 0.0) throw DomainError("div_bcast: zero denominator");
    std::vector<double> out(x.numel());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / sv;
    return make_op_result(x.shape(), std::move(out), {x, s}, [&](detail::TensorNode* self) {
        auto xn = x.node_handle();
        auto sn = s.node_handle();
        self->backward_fn = [self, xn, sn]() {
            const double sv2 = sn->data[0];
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    xn->grad[i] += self->grad[i] / sv2;
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    sn->grad[0] -= self->grad[i] * xn->data[i] / (sv2 * sv2);
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Gather / select
// ---------------------------------------------------------------------------

inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> indices) {
    if (x.rank() != 2) throw DimensionError("gather_rows: expects rank-2");
    const std::size_t m = x.extent(0), n = x.extent(1);
    for (std::size_t idx : indices)
        if (idx >= m) throw ContractError("gather_rows: index " + std::to_string(idx) + " out of range");
    std::vector<double> out(indices.size() * n);
    const auto& xv = x.values();
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::copy_n(xv.data() + indices[r] * n, n, out.data() + r * n);
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
    return make_op_result({idx->size(), n}, std::move(out), {x}, [&](detail::TensorNode* self) {
        auto xn = x.node_handle();
        self->backward_fn = [self, xn, idx, n]() {
            xn->ensure_grad();
            for (std::size_t r = 0; r < idx->size(); ++r)
                for (std::size_t j = 0; j < n; ++j)
                    xn->grad[(*idx)[r] * n + j] += self->grad[r * n + j];
        };
    });
}

// out[i] = X[i, idx[i]]; entries at rows where idx[i] == skip_row_marker read
// column zero and are intended to be masked out by the caller.
inline Tensor take_per_row(const Tensor& x, std::vector<std::size_t> indices) {
    if (x.rank() != 2) throw DimensionError("take_per_row: expects rank-2");
    const std::size_t m = x.extent(0), n = x.extent(1);
    if (indices.size() != m) throw DimensionError("take_per_row: one index per row required");
    for (std::size_t idx : indices)
        if (idx >= n) throw ContractError("take_per_row: column " + std::to_string(idx) + " out of range");
    std::vector<double> out(m);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < m; ++i) out[i] = xv[i * n + indices[i]];
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
    return make_op_result({m}, std::move(out), {x}, [&](detail::TensorNode* self) {
        auto xn = x.node_handle();
        self->backward_fn = [self, xn, idx, n]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < idx->size(); ++i)
                xn->grad[i * n + (*idx)[i]] += self->grad[i];
        };
    });
}

inline Tensor at_index(const Tensor& x, std::size_t i) {
    if (x.rank() != 1) throw DimensionError("at_index: expects rank-1");
    if (i >= x.extent(0)) throw ContractError("at_index: out of range");
    std::vector<double> out{x.values()[i]};
    return make_op_result({1}, std::move(out), {x}, [&](detail::TensorNode* self) {
        auto xn = x.node_handle();
        self->backward_fn = [self, xn, i]() {
            xn->ensure_grad();
            xn->grad[i] += self->grad[0];
        };
    });
}

// ---------------------------------------------------------------------------
// Stable softmax and friends
// ---------------------------------------------------------------------------

// Softmax along `axis` of a rank-2 tensor (or over a rank-1 vector when called
// via the vector overload). The max shift is treated as a constant; the result
// is algebraically identical and keeps exp() in range.
inline Tensor softmax_axis(const Tensor& x, std::size_t axis) {
    detail::check_axis(x, axis, "softmax");
    Tensor rows = axis == 1 ? x : transpose(x);
    Tensor shift = max_axis(rows, 1).detach();
    Tensor e = exp(sub_colvec(rows, shift));
    Tensor z = sum_axis(e, 1);
    Tensor out = div_colvec(e, z);
    return axis == 1 ? out : transpose(out);
}

inline Tensor softmax(const Tensor& x) {
    if (x.rank() != 1) throw DimensionError("softmax: vector overload expects rank-1");
    if (x.extent(0) == 0) throw DomainError("softmax: empty axis");
    return reshape(softmax_axis(reshape(x, {1, x.extent(0)}), 1), {x.extent(0)});
}

// log(sum(exp(x))) over a vector, max-shifted.
inline Tensor logsumexp(const Tensor& x) {
    if (x.rank() != 1) throw DimensionError("logsumexp: expects rank-1");
    if (x.extent(0) == 0) throw DomainError("logsumexp: empty axis");
    double m = *std::max_element(x.values().begin(), x.values().end());
    return log(sum(exp(x - m))) + m;
}

// Per-row logsumexp of a rank-2 tensor.
inline Tensor logsumexp_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("logsumexp_rows: expects rank-2");
    if (x.extent(1) == 0) throw DomainError("logsumexp_rows: empty axis");
    Tensor shift = max_axis(x, 1).detach();
    Tensor e = exp(sub_colvec(x, shift));
    return log(sum_axis(e, 1)) + shift;
}

// ---------------------------------------------------------------------------
// Cosine similarity
// ---------------------------------------------------------------------------

inline constexpr double kCosineEps = 1e-8;

// u.v / (max(|u|,eps) * max(|v|,eps)); the clamp happens on the squared norm
// so zero vectors stay differentiable with zero gradient.
inline Tensor cosine_sim(const Tensor& u, const Tensor& v, double eps = kCosineEps) {
    if (u.rank() != 1 || v.rank() != 1) throw DimensionError("cosine_sim: expects rank-1 operands");
    if (u.extent(0) == 0) throw DimensionError("cosine_sim: empty vectors");
    detail::check_same_shape(u, v, "cosine_sim");
    Tensor dot = sum(u * v);
    Tensor nu = sqrt(clamp_min(sum(u * u), eps * eps));
    Tensor nv = sqrt(clamp_min(sum(v * v), eps * eps));
    return div(dot, nu * nv);
}

// Rows of x scaled to unit L2 norm, with the same eps guard as cosine_sim.
inline Tensor l2_normalize_rows(const Tensor& x, double eps = kCosineEps) {
    if (x.rank() != 2) throw DimensionError("l2_normalize_rows: expects rank-2");
    Tensor sq = sum_axis(x * x, 1);
    Tensor norms = sqrt(clamp_min(sq, eps * eps));
    return div_colvec(x, norms);
}

// ---------------------------------------------------------------------------
// Spatial mixing
// ---------------------------------------------------------------------------

// Edge-clamped box average over the spatial dims of an HxWxF tensor; r is the
// neighborhood half-width, so each output pixel averages (2r+1)^2 taps.
inline Tensor box_mean(const Tensor& x, std::size_t r) {
    if (x.rank() != 3) throw DimensionError("box_mean: expects rank-3 HxWxF");
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(x.extent(0));
    const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(x.extent(1));
    const std::size_t f = x.extent(2);
    const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r);
    const double inv = 1.0 / static_cast<double>((2 * r + 1) * (2 * r + 1));
    const auto& xv = x.values();
    std::vector<double> out(x.numel(), 0.0);
    auto clamp_i = [](std::ptrdiff_t v, std::ptrdiff_t hi) {
        return v < 0 ? std::ptrdiff_t{0} : (v >= hi ? hi - 1 : v);
    };
    for (std::ptrdiff_t i = 0; i < h; ++i)
        for (std::ptrdiff_t j = 0; j < w; ++j) {
            double* op = out.data() + (i * w + j) * static_cast<std::ptrdiff_t>(f);
            for (std::ptrdiff_t di = -rr; di <= rr; ++di)
                for (std::ptrdiff_t dj = -rr; dj <= rr; ++dj) {
                    const std::ptrdiff_t si = clamp_i(i + di, h);
                    const std::ptrdiff_t sj = clamp_i(j + dj, w);
                    const double* sp = xv.data() + (si * w + sj) * static_cast<std::ptrdiff_t>(f);
                    for (std::size_t c = 0; c < f; ++c) op[c] += sp[c];
                }
            for (std::size_t c = 0; c < f; ++c) op[c] *= inv;
        }
    return make_op_result(x.shape(), std::move(out), {x}, [&](detail::TensorNode* self) {
        auto xn = x.node_handle();
        self->backward_fn = [self, xn, h, w, f, rr, inv, clamp_i]() {
            xn->ensure_grad();
            for (std::ptrdiff_t i = 0; i < h; ++i)
                for (std::ptrdiff_t j = 0; j < w; ++j) {
                    const double* up = self->grad.data() + (i * w + j) * static_cast<std::ptrdiff_t>(f);
                    for (std::ptrdiff_t di = -rr; di <= rr; ++di)
                        for (std::ptrdiff_t dj = -rr; dj <= rr; ++dj) {
                            const std::ptrdiff_t si = clamp_i(i + di, h);
                            const std::ptrdiff_t sj = clamp_i(j + dj, w);
                            double* gp = xn->grad.data() + (si * w + sj) * static_cast<std::ptrdiff_t>(f);
                            for (std::size_t c = 0; c < f; ++c) gp[c] += inv * up[c];
                        }
                }
        };
    });
}

}  // namespace larvseg

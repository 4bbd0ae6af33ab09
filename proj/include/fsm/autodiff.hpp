#ifndef FSM_AUTODIFF_HPP
#define FSM_AUTODIFF_HPP

// Reverse-mode differentiable tensor engine. Graphs are define-by-run: every
// op call records an edge when an input carries gradient, backward() walks
// the recorded graph once, and the graph is dropped when the output handles
// go out of scope. Parameters are leaf tensors whose grads accumulate until
// explicitly zeroed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "fsm/rng.hpp"
#include "fsm/threading.hpp"

namespace fsm::ad {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

[[noreturn]] inline void op_error(const std::string& op, const std::string& what) {
    throw std::invalid_argument(op + ": " + what);
}

namespace detail {

template <class Real>
struct Node {
    const char* op = "leaf";
    Shape shape;
    std::vector<Real> values;
    std::vector<Real> grad;  // empty until needed
    bool needs_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return parents.empty(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), Real(0));
    }
};

}  // namespace detail

template <class Real>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return make(shape, std::vector<Real>(numel(shape), Real(0)), requires_grad);
    }

    static Tensor from(const Shape& shape, std::vector<Real> vals,
                       bool requires_grad = false) {
        if (static_cast<int64_t>(vals.size()) != numel(shape))
            op_error("tensor", "value count " + std::to_string(vals.size()) +
                                   " does not match shape " + shape_str(shape));
        return make(shape, std::move(vals), requires_grad);
    }

    static Tensor scalar(Real v) { return from({1}, {v}); }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t size() const { return static_cast<int64_t>(n_->values.size()); }

    std::vector<Real>& values() { return n_->values; }
    const std::vector<Real>& values() const { return n_->values; }

    Real item() const {
        if (size() != 1) op_error("item", "tensor " + shape_str(shape()) + " is not scalar");
        return n_->values[0];
    }

    bool requires_grad() const { return n_->needs_grad; }
    bool is_leaf() const { return n_->is_leaf(); }

    std::vector<Real>& grad() {
        if (!n_->needs_grad) op_error("grad", "tensor does not track gradients");
        n_->ensure_grad();
        return n_->grad;
    }
    const std::vector<Real>& grad() const {
        if (!n_->needs_grad) op_error("grad", "tensor does not track gradients");
        const_cast<detail::Node<Real>*>(n_.get())->ensure_grad();
        return n_->grad;
    }

    void zero_grad() {
        if (n_->needs_grad) n_->grad.assign(n_->values.size(), Real(0));
    }

    // deep copy of the values, detached from any graph
    Tensor clone(bool requires_grad) const {
        return make(n_->shape, n_->values, requires_grad);
    }

    detail::Node<Real>* node() const { return n_.get(); }
    const std::shared_ptr<detail::Node<Real>>& handle() const { return n_; }

    static Tensor wrap(std::shared_ptr<detail::Node<Real>> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

private:
    static Tensor make(const Shape& shape, std::vector<Real> vals, bool requires_grad) {
        auto n = std::make_shared<detail::Node<Real>>();
        n->shape = shape;
        n->values = std::move(vals);
        n->needs_grad = requires_grad;
        if (requires_grad) n->ensure_grad();
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

    std::shared_ptr<detail::Node<Real>> n_;
};

namespace detail {

// builds a graph node; bw receives the finished node and must accumulate into
// parents that carry needs_grad
template <class Real>
Tensor<Real> make_op(const char* op, Shape shape, std::vector<Real> vals,
                     std::vector<Tensor<Real>> parents,
                     std::function<void(Node<Real>&)> bw) {
    auto n = std::make_shared<Node<Real>>();
    n->op = op;
    n->shape = std::move(shape);
    n->values = std::move(vals);
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    n->needs_grad = any;
    if (any) {
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.handle());
        n->backward_fn = std::move(bw);
    }
    return Tensor<Real>::wrap(std::move(n));
}

template <class Real>
void accum(Node<Real>& dst, const std::vector<Real>& g) {
    dst.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

template <class Real>
void backward(const Tensor<Real>& loss) {
    using NodeT = detail::Node<Real>;
    if (loss.size() != 1)
        op_error("backward", "loss must be scalar, got " + shape_str(loss.shape()));
    NodeT* root = loss.node();
    if (!root->needs_grad) return;  // no parameters reachable

    // iterative post-order DFS over the needs_grad subgraph
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> visited;
    std::vector<std::pair<NodeT*, size_t>> stack;
    stack.push_back({root, 0});
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        bool descended = false;
        while (idx < node->parents.size()) {
            NodeT* p = node->parents[idx++].get();
            if (p->needs_grad && visited.insert(p).second) {
                stack.push_back({p, 0});
                descended = true;
                break;
            }
        }
        if (!descended && idx >= stack.back().first->parents.size()) {
            order.push_back(stack.back().first);
            stack.pop_back();
        }
    }

    // non-leaf grads are transient per backward call; leaf grads accumulate
    for (NodeT* n : order) {
        if (!n->is_leaf()) n->grad.assign(n->values.size(), Real(0));
    }
    root->ensure_grad();
    root->grad[0] += Real(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

// ---------------------------------------------------------------------------
// elementwise ops

template <class Real>
void check_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape() != b.shape())
        op_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    check_same_shape("add", a, b);
    std::vector<Real> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return detail::make_op<Real>("add", a.shape(), std::move(out), {a, b},
                                 [](detail::Node<Real>& n) {
                                     for (auto& p : n.parents)
                                         if (p->needs_grad) detail::accum(*p, n.grad);
                                 });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    check_same_shape("sub", a, b);
    std::vector<Real> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return detail::make_op<Real>("sub", a.shape(), std::move(out), {a, b},
                                 [](detail::Node<Real>& n) {
                                     auto& pa = *n.parents[0];
                                     auto& pb = *n.parents[1];
                                     if (pa.needs_grad) detail::accum(pa, n.grad);
                                     if (pb.needs_grad) {
                                         pb.ensure_grad();
                                         for (size_t i = 0; i < n.grad.size(); ++i)
                                             pb.grad[i] -= n.grad[i];
                                     }
                                 });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    check_same_shape("mul", a, b);
    std::vector<Real> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return detail::make_op<Real>("mul", a.shape(), std::move(out), {a, b},
                                 [](detail::Node<Real>& n) {
                                     auto& pa = *n.parents[0];
                                     auto& pb = *n.parents[1];
                                     if (pa.needs_grad) {
                                         pa.ensure_grad();
                                         for (size_t i = 0; i < n.grad.size(); ++i)
                                             pa.grad[i] += n.grad[i] * pb.values[i];
                                     }
                                     if (pb.needs_grad) {
                                         pb.ensure_grad();
                                         for (size_t i = 0; i < n.grad.size(); ++i)
                                             pb.grad[i] += n.grad[i] * pa.values[i];
                                     }
                                 });
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real c) {
    std::vector<Real> out(a.size());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return detail::make_op<Real>("scale", a.shape(), std::move(out), {a},
                                 [c](detail::Node<Real>& n) {
                                     auto& pa = *n.parents[0];
                                     pa.ensure_grad();
                                     for (size_t i = 0; i < n.grad.size(); ++i)
                                         pa.grad[i] += n.grad[i] * c;
                                 });
}

template <class Real>
Tensor<Real> one_minus(const Tensor<Real>& a) {
    std::vector<Real> out(a.size());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = Real(1) - av[i];
    return detail::make_op<Real>("one_minus", a.shape(), std::move(out), {a},
                                 [](detail::Node<Real>& n) {
                                     auto& pa = *n.parents[0];
                                     pa.ensure_grad();
                                     for (size_t i = 0; i < n.grad.size(); ++i)
                                         pa.grad[i] -= n.grad[i];
                                 });
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
    std::vector<Real> out(a.size());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > Real(0) ? av[i] : Real(0);
    return detail::make_op<Real>("relu", a.shape(), std::move(out), {a},
                                 [](detail::Node<Real>& n) {
                                     auto& pa = *n.parents[0];
                                     pa.ensure_grad();
                                     for (size_t i = 0; i < n.grad.size(); ++i)
                                         if (pa.values[i] > Real(0)) pa.grad[i] += n.grad[i];
                                 });
}

template <class Real>
Tensor<Real> tanh(const Tensor<Real>& a) {
    std::vector<Real> out(a.size());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
    return detail::make_op<Real>("tanh", a.shape(), std::move(out), {a},
                                 [](detail::Node<Real>& n) {
                                     auto& pa = *n.parents[0];
                                     pa.ensure_grad();
                                     for (size_t i = 0; i < n.grad.size(); ++i) {
                                         Real y = n.values[i];
                                         pa.grad[i] += n.grad[i] * (Real(1) - y * y);
                                     }
                                 });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
    std::vector<Real> out(a.size());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = Real(1) / (Real(1) + std::exp(-av[i]));
    return detail::make_op<Real>("sigmoid", a.shape(), std::move(out), {a},
                                 [](detail::Node<Real>& n) {
                                     auto& pa = *n.parents[0];
                                     pa.ensure_grad();
                                     for (size_t i = 0; i < n.grad.size(); ++i) {
                                         Real y = n.values[i];
                                         pa.grad[i] += n.grad[i] * y * (Real(1) - y);
                                     }
                                 });
}

// out[r, c] = x[r, c] * s[r]; s has shape [R] or [R,1]
template <class Real>
Tensor<Real> scale_rows(const Tensor<Real>& x, const Tensor<Real>& s) {
    if (x.shape().size() != 2) op_error("scale_rows", "x must be 2-d, got " + shape_str(x.shape()));
    int rows = x.shape()[0], cols = x.shape()[1];
    if (s.size() != rows)
        op_error("scale_rows", "scale length " + std::to_string(s.size()) +
                                   " does not match rows of " + shape_str(x.shape()));
    std::vector<Real> out(x.size());
    const auto& xv = x.values();
    const auto& sv = s.values();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * sv[r];
    return detail::make_op<Real>(
        "scale_rows", x.shape(), std::move(out), {x, s},
        [rows, cols](detail::Node<Real>& n) {
            auto& px = *n.parents[0];
            auto& ps = *n.parents[1];
            if (px.needs_grad) {
                px.ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c)
                        px.grad[r * cols + c] += n.grad[r * cols + c] * ps.values[r];
            }
            if (ps.needs_grad) {
                ps.ensure_grad();
                for (int r = 0; r < rows; ++r) {
                    Real acc = 0;
                    for (int c = 0; c < cols; ++c)
                        acc += n.grad[r * cols + c] * px.values[r * cols + c];
                    ps.grad[r] += acc;
                }
            }
        });
}

// out[r, c] = m[r, c] + v[c]
template <class Real>
Tensor<Real> add_rowvec(const Tensor<Real>& m, const Tensor<Real>& v) {
    if (m.shape().size() != 2) op_error("add_rowvec", "matrix must be 2-d, got " + shape_str(m.shape()));
    int rows = m.shape()[0], cols = m.shape()[1];
    if (v.size() != cols)
        op_error("add_rowvec", "vector length " + std::to_string(v.size()) +
                                   " does not match columns of " + shape_str(m.shape()));
    std::vector<Real> out(m.size());
    const auto& mv = m.values();
    const auto& vv = v.values();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out[r * cols + c] = mv[r * cols + c] + vv[c];
    return detail::make_op<Real>(
        "add_rowvec", m.shape(), std::move(out), {m, v},
        [rows, cols](detail::Node<Real>& n) {
            auto& pm = *n.parents[0];
            auto& pv = *n.parents[1];
            if (pm.needs_grad) detail::accum(pm, n.grad);
            if (pv.needs_grad) {
                pv.ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c) pv.grad[c] += n.grad[r * cols + c];
            }
        });
}

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& a) {
    Real acc = 0;
    for (Real v : a.values()) acc += v;
    return detail::make_op<Real>("sum", {1}, {acc}, {a},
                                 [](detail::Node<Real>& n) {
                                     auto& pa = *n.parents[0];
                                     pa.ensure_grad();
                                     Real g = n.grad[0];
                                     for (auto& gv : pa.grad) gv += g;
                                 });
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, const Shape& shape) {
    if (numel(shape) != a.size())
        op_error("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    return detail::make_op<Real>("reshape", shape, a.values(), {a},
                                 [](detail::Node<Real>& n) {
                                     detail::accum(*n.parents[0], n.grad);
                                 });
}

template <class Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) op_error("concat", "no inputs");
    int rows = parts[0].shape().size() == 2 ? parts[0].shape()[0] : -1;
    if (rows < 0) op_error("concat", "inputs must be 2-d");
    int total = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.shape()[0] != rows)
            op_error("concat", "row mismatch: " + shape_str(parts[0].shape()) + " vs " +
                                   shape_str(p.shape()));
        total += p.shape()[1];
    }
    std::vector<Real> out(static_cast<size_t>(rows) * total);
    int off = 0;
    for (const auto& p : parts) {
        int c = p.shape()[1];
        const auto& pv = p.values();
        for (int r = 0; r < rows; ++r)
            std::copy_n(pv.begin() + static_cast<size_t>(r) * c, c,
                        out.begin() + static_cast<size_t>(r) * total + off);
        off += c;
    }
    std::vector<int> widths;
    for (const auto& p : parts) widths.push_back(p.shape()[1]);
    return detail::make_op<Real>(
        "concat", {rows, total}, std::move(out), parts,
        [rows, total, widths](detail::Node<Real>& n) {
            int off = 0;
            for (size_t k = 0; k < n.parents.size(); ++k) {
                auto& p = *n.parents[k];
                int c = widths[k];
                if (p.needs_grad) {
                    p.ensure_grad();
                    for (int r = 0; r < rows; ++r)
                        for (int j = 0; j < c; ++j)
                            p.grad[static_cast<size_t>(r) * c + j] +=
                                n.grad[static_cast<size_t>(r) * total + off + j];
                }
                off += c;
            }
        });
}

template <class Real>
Tensor<Real> slice_rows(const Tensor<Real>& a, int r0, int r1) {
    if (a.shape().size() != 2) op_error("slice_rows", "input must be 2-d, got " + shape_str(a.shape()));
    int rows = a.shape()[0], cols = a.shape()[1];
    if (r0 < 0 || r1 > rows || r0 >= r1)
        op_error("slice_rows", "range [" + std::to_string(r0) + "," + std::to_string(r1) +
                                   ") invalid for " + shape_str(a.shape()));
    int h = r1 - r0;
    std::vector<Real> out(a.values().begin() + static_cast<size_t>(r0) * cols,
                          a.values().begin() + static_cast<size_t>(r1) * cols);
    return detail::make_op<Real>(
        "slice_rows", {h, cols}, std::move(out), {a},
        [r0, cols](detail::Node<Real>& n) {
            auto& pa = *n.parents[0];
            pa.ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i)
                pa.grad[static_cast<size_t>(r0) * cols + i] += n.grad[i];
        });
}

template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& a, int c0, int c1) {
    if (a.shape().size() != 2) op_error("slice", "input must be 2-d, got " + shape_str(a.shape()));
    int rows = a.shape()[0], cols = a.shape()[1];
    if (c0 < 0 || c1 > cols || c0 >= c1)
        op_error("slice", "range [" + std::to_string(c0) + "," + std::to_string(c1) +
                              ") invalid for " + shape_str(a.shape()));
    int w = c1 - c0;
    std::vector<Real> out(static_cast<size_t>(rows) * w);
    const auto& av = a.values();
    for (int r = 0; r < rows; ++r)
        std::copy_n(av.begin() + static_cast<size_t>(r) * cols + c0, w,
                    out.begin() + static_cast<size_t>(r) * w);
    return detail::make_op<Real>(
        "slice", {rows, w}, std::move(out), {a},
        [rows, cols, c0, w](detail::Node<Real>& n) {
            auto& pa = *n.parents[0];
            pa.ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int j = 0; j < w; ++j)
                    pa.grad[static_cast<size_t>(r) * cols + c0 + j] +=
                        n.grad[static_cast<size_t>(r) * w + j];
        });
}

// ---------------------------------------------------------------------------
// GEMM kernels (raw buffers). Parallel over output rows; every output element
// is produced by a single sequential accumulation, so results are identical
// for any thread count.

namespace detail {

constexpr int64_t kGemmGrainFlops = 1 << 18;

template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, int m, int k, int n) {
    int64_t grain = std::max<int64_t>(1, kGemmGrainFlops / std::max(1, 2 * k * n));
    parallel_for(0, m, grain, [&](int64_t r0, int64_t r1) {
        for (int64_t i = r0; i < r1; ++i) {
            Real* ci = c + i * n;
            std::fill(ci, ci + n, Real(0));
            const Real* ai = a + i * k;
            for (int l = 0; l < k; ++l) {
                Real av = ai[l];
                if (av == Real(0)) continue;
                const Real* bl = b + static_cast<int64_t>(l) * n;
                for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
            }
        }
    });
}

// c[m,n] = a[m,k] * b[n,k]^T
template <class Real>
void gemm_nt(const Real* a, const Real* b, Real* c, int m, int k, int n) {
    int64_t grain = std::max<int64_t>(1, kGemmGrainFlops / std::max(1, 2 * k * n));
    parallel_for(0, m, grain, [&](int64_t r0, int64_t r1) {
        for (int64_t i = r0; i < r1; ++i) {
            const Real* ai = a + i * k;
            Real* ci = c + i * n;
            for (int j = 0; j < n; ++j) {
                const Real* bj = b + static_cast<int64_t>(j) * k;
                Real acc = 0;
                for (int l = 0; l < k; ++l) acc += ai[l] * bj[l];
                ci[j] = acc;
            }
        }
    });
}

// c[m,n] = a[k,m]^T * b[k,n]
template <class Real>
void gemm_tn(const Real* a, const Real* b, Real* c, int m, int k, int n) {
    int64_t grain = std::max<int64_t>(1, kGemmGrainFlops / std::max(1, 2 * k * n));
    parallel_for(0, m, grain, [&](int64_t r0, int64_t r1) {
        for (int64_t i = r0; i < r1; ++i) {
            Real* ci = c + i * n;
            std::fill(ci, ci + n, Real(0));
            for (int l = 0; l < k; ++l) {
                Real av = a[static_cast<int64_t>(l) * m + i];
                if (av == Real(0)) continue;
                const Real* bl = b + static_cast<int64_t>(l) * n;
                for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
            }
        }
    });
}

}  // namespace detail

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        op_error("matmul", "incompatible shapes " + shape_str(a.shape()) + " and " +
                               shape_str(b.shape()));
    int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<Real> out(static_cast<size_t>(m) * n);
    detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    return detail::make_op<Real>(
        "matmul", {m, n}, std::move(out), {a, b},
        [m, k, n](detail::Node<Real>& node) {
            auto& pa = *node.parents[0];
            auto& pb = *node.parents[1];
            if (pa.needs_grad) {
                std::vector<Real> da(static_cast<size_t>(m) * k);
                detail::gemm_nt(node.grad.data(), pb.values.data(), da.data(), m, n, k);
                detail::accum(pa, da);
            }
            if (pb.needs_grad) {
                std::vector<Real> db(static_cast<size_t>(k) * n);
                detail::gemm_tn(pa.values.data(), node.grad.data(), db.data(), k, m, n);
                detail::accum(pb, db);
            }
        });
}

// y = x * w + b
template <class Real>
Tensor<Real> dense(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
    return add_rowvec(matmul(x, w), b);
}

// transpose of a 2-d tensor (materialized)
template <class Real>
Tensor<Real> transpose2d(const Tensor<Real>& a) {
    if (a.shape().size() != 2) op_error("transpose", "input must be 2-d, got " + shape_str(a.shape()));
    int r = a.shape()[0], c = a.shape()[1];
    std::vector<Real> out(a.size());
    const auto& av = a.values();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
    return detail::make_op<Real>("transpose", {c, r}, std::move(out), {a},
                                 [r, c](detail::Node<Real>& n) {
                                     auto& pa = *n.parents[0];
                                     pa.ensure_grad();
                                     for (int i = 0; i < r; ++i)
                                         for (int j = 0; j < c; ++j)
                                             pa.grad[static_cast<size_t>(i) * c + j] +=
                                                 n.grad[static_cast<size_t>(j) * r + i];
                                 });
}

// ---------------------------------------------------------------------------
// softmax / losses

// softmax over the last dimension
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x) {
    if (x.shape().empty()) op_error("softmax", "input must have at least one dimension");
    int cols = x.shape().back();
    int64_t rows = x.size() / cols;
    std::vector<Real> out(x.size());
    const auto& xv = x.values();
    for (int64_t r = 0; r < rows; ++r) {
        const Real* row = xv.data() + r * cols;
        Real* orow = out.data() + r * cols;
        Real mx = row[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        Real z = 0;
        for (int c = 0; c < cols; ++c) {
            orow[c] = std::exp(row[c] - mx);
            z += orow[c];
        }
        for (int c = 0; c < cols; ++c) orow[c] /= z;
    }
    return detail::make_op<Real>(
        "softmax", x.shape(), std::move(out), {x},
        [rows, cols](detail::Node<Real>& n) {
            auto& pa = *n.parents[0];
            pa.ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const Real* y = n.values.data() + r * cols;
                const Real* g = n.grad.data() + r * cols;
                Real dot = 0;
                for (int c = 0; c < cols; ++c) dot += g[c] * y[c];
                Real* pg = pa.grad.data() + r * cols;
                for (int c = 0; c < cols; ++c) pg[c] += y[c] * (g[c] - dot);
            }
        });
}

// sum of squared differences, reduced to a scalar
template <class Real>
Tensor<Real> squared_error(const Tensor<Real>& pred, const Tensor<Real>& target) {
    check_same_shape("squared_error", pred, target);
    const auto& pv = pred.values();
    const auto& tv = target.values();
    Real acc = 0;
    for (size_t i = 0; i < pv.size(); ++i) {
        Real d = pv[i] - tv[i];
        acc += d * d;
    }
    return detail::make_op<Real>(
        "squared_error", {1}, {acc}, {pred, target},
        [](detail::Node<Real>& n) {
            auto& pp = *n.parents[0];
            auto& pt = *n.parents[1];
            Real g = n.grad[0];
            if (pp.needs_grad) {
                pp.ensure_grad();
                for (size_t i = 0; i < pp.values.size(); ++i)
                    pp.grad[i] += Real(2) * g * (pp.values[i] - pt.values[i]);
            }
            if (pt.needs_grad) {
                pt.ensure_grad();
                for (size_t i = 0; i < pt.values.size(); ++i)
                    pt.grad[i] -= Real(2) * g * (pp.values[i] - pt.values[i]);
            }
        });
}

// mean over rows of -log softmax(logits)[label]
template <class Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, const std::vector<int>& labels) {
    if (logits.shape().size() != 2)
        op_error("cross_entropy", "logits must be 2-d, got " + shape_str(logits.shape()));
    int rows = logits.shape()[0], cols = logits.shape()[1];
    if (static_cast<int>(labels.size()) != rows)
        op_error("cross_entropy", std::to_string(labels.size()) + " labels for " +
                                      std::to_string(rows) + " rows");
    for (int l : labels)
        if (l < 0 || l >= cols)
            op_error("cross_entropy", "label " + std::to_string(l) + " out of range for " +
                                          std::to_string(cols) + " classes");
    const auto& xv = logits.values();
    Real total = 0;
    for (int r = 0; r < rows; ++r) {
        const Real* row = xv.data() + static_cast<size_t>(r) * cols;
        Real mx = row[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        Real z = 0;
        for (int c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
        total += std::log(z) + mx - row[labels[r]];
    }
    total /= Real(rows);
    return detail::make_op<Real>(
        "cross_entropy", {1}, {total}, {logits},
        [rows, cols, labels](detail::Node<Real>& n) {
            auto& pa = *n.parents[0];
            pa.ensure_grad();
            Real g = n.grad[0] / Real(rows);
            for (int r = 0; r < rows; ++r) {
                const Real* row = pa.values.data() + static_cast<size_t>(r) * cols;
                Real* pg = pa.grad.data() + static_cast<size_t>(r) * cols;
                Real mx = row[0];
                for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
                Real z = 0;
                for (int c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
                for (int c = 0; c < cols; ++c) {
                    Real sm = std::exp(row[c] - mx) / z;
                    pg[c] += g * (sm - (c == labels[r] ? Real(1) : Real(0)));
                }
            }
        });
}

// ---------------------------------------------------------------------------
// convolution ops. Layout is [B, H, W, C] row-major.

namespace detail {

struct ConvGeom {
    int batch, in_h, in_w, in_c;
    int k_h, k_w, out_c;
    int stride, pad;
    int out_h, out_w;
};

// patch gather: cols[b*OH*OW + oi*OW + oj, (a*KW + bb)*C + c]
template <class Real>
void im2col_gather(const Real* img, Real* cols, const ConvGeom& g) {
    int64_t rows = static_cast<int64_t>(g.batch) * g.out_h * g.out_w;
    int patch = g.k_h * g.k_w * g.in_c;
    parallel_for(0, rows, std::max<int64_t>(1, (1 << 16) / std::max(1, patch)),
                 [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
            int b = static_cast<int>(r / (g.out_h * g.out_w));
            int rem = static_cast<int>(r % (g.out_h * g.out_w));
            int oi = rem / g.out_w, oj = rem % g.out_w;
            Real* dst = cols + r * patch;
            for (int a = 0; a < g.k_h; ++a) {
                int ii = oi * g.stride - g.pad + a;
                for (int bb = 0; bb < g.k_w; ++bb) {
                    int jj = oj * g.stride - g.pad + bb;
                    Real* d = dst + (a * g.k_w + bb) * g.in_c;
                    if (ii < 0 || ii >= g.in_h || jj < 0 || jj >= g.in_w) {
                        std::fill(d, d + g.in_c, Real(0));
                    } else {
                        const Real* s = img + ((static_cast<int64_t>(b) * g.in_h + ii) * g.in_w + jj) * g.in_c;
                        std::copy(s, s + g.in_c, d);
                    }
                }
            }
        }
    });
}

// adjoint of im2col_gather: scatter-add patches back into the image.
// parallel across batch items; within an item the scatter is sequential.
template <class Real>
void im2col_scatter(const Real* cols, Real* img, const ConvGeom& g) {
    int patch = g.k_h * g.k_w * g.in_c;
    parallel_for(0, g.batch, 1, [&](int64_t b0, int64_t b1) {
        for (int64_t b = b0; b < b1; ++b) {
            for (int oi = 0; oi < g.out_h; ++oi)
                for (int oj = 0; oj < g.out_w; ++oj) {
                    const Real* src =
                        cols + ((b * g.out_h + oi) * g.out_w + oj) * patch;
                    for (int a = 0; a < g.k_h; ++a) {
                        int ii = oi * g.stride - g.pad + a;
                        if (ii < 0 || ii >= g.in_h) continue;
                        for (int bb = 0; bb < g.k_w; ++bb) {
                            int jj = oj * g.stride - g.pad + bb;
                            if (jj < 0 || jj >= g.in_w) continue;
                            const Real* s = src + (a * g.k_w + bb) * g.in_c;
                            Real* d = img + ((b * g.in_h + ii) * g.in_w + jj) * g.in_c;
                            for (int c = 0; c < g.in_c; ++c) d[c] += s[c];
                        }
                    }
                }
        }
    });
}

}  // namespace detail

// extract conv patches: [B,H,W,C] -> [B*OH*OW, KH*KW*C]
template <class Real>
Tensor<Real> im2col(const Tensor<Real>& x, int k_h, int k_w, int stride, int pad) {
    if (x.shape().size() != 4)
        op_error("im2col", "input must be [B,H,W,C], got " + shape_str(x.shape()));
    detail::ConvGeom g;
    g.batch = x.shape()[0];
    g.in_h = x.shape()[1];
    g.in_w = x.shape()[2];
    g.in_c = x.shape()[3];
    g.k_h = k_h;
    g.k_w = k_w;
    g.stride = stride;
    g.pad = pad;
    g.out_h = (g.in_h + 2 * pad - k_h) / stride + 1;
    g.out_w = (g.in_w + 2 * pad - k_w) / stride + 1;
    if (g.out_h <= 0 || g.out_w <= 0)
        op_error("im2col", "kernel " + std::to_string(k_h) + "x" + std::to_string(k_w) +
                               " too large for input " + shape_str(x.shape()));
    int64_t rows = static_cast<int64_t>(g.batch) * g.out_h * g.out_w;
    int patch = k_h * k_w * g.in_c;
    std::vector<Real> out(rows * patch);
    detail::im2col_gather(x.values().data(), out.data(), g);
    return detail::make_op<Real>(
        "im2col", {static_cast<int>(rows), patch}, std::move(out), {x},
        [g](detail::Node<Real>& n) {
            auto& pa = *n.parents[0];
            pa.ensure_grad();
            detail::im2col_scatter(n.grad.data(), pa.grad.data(), g);
        });
}

// scatter patch columns into an output image: adjoint geometry of im2col.
// cols is [B*H*W, KH*KW*F]; result is [B, OH, OW, F] with
// OH = (H-1)*stride - 2*pad + KH + out_pad.
template <class Real>
Tensor<Real> col2im(const Tensor<Real>& cols, int batch, int in_h, int in_w, int k_h,
                    int k_w, int out_c, int stride, int pad, int out_pad) {
    int out_h = (in_h - 1) * stride - 2 * pad + k_h + out_pad;
    int out_w = (in_w - 1) * stride - 2 * pad + k_w + out_pad;
    if (out_h <= 0 || out_w <= 0)
        op_error("col2im", "degenerate output size for input " + std::to_string(in_h) + "x" +
                               std::to_string(in_w));
    int patch = k_h * k_w * out_c;
    if (cols.shape().size() != 2 ||
        cols.shape()[0] != batch * in_h * in_w || cols.shape()[1] != patch)
        op_error("col2im", "columns " + shape_str(cols.shape()) + " do not match geometry");
    detail::ConvGeom g;  // viewed from the output image: gather geometry of the adjoint
    g.batch = batch;
    g.in_h = out_h;
    g.in_w = out_w;
    g.in_c = out_c;
    g.k_h = k_h;
    g.k_w = k_w;
    g.stride = stride;
    g.pad = pad;
    g.out_h = in_h;
    g.out_w = in_w;
    std::vector<Real> out(static_cast<size_t>(batch) * out_h * out_w * out_c, Real(0));
    detail::im2col_scatter(cols.values().data(), out.data(), g);
    return detail::make_op<Real>(
        "col2im", {batch, out_h, out_w, out_c}, std::move(out), {cols},
        [g, patch](detail::Node<Real>& n) {
            auto& pa = *n.parents[0];
            pa.ensure_grad();
            std::vector<Real> dcols(pa.values.size());
            detail::im2col_gather(n.grad.data(), dcols.data(), g);
            detail::accum(pa, dcols);
        });
}

// conv, stride/pad configurable, weights [KH,KW,Cin,F], bias [F]
template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b,
                    int stride, int pad) {
    if (x.shape().size() != 4 || w.shape().size() != 4)
        op_error("conv2d", "expected [B,H,W,C] input and [KH,KW,Cin,F] weights, got " +
                               shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (w.shape()[2] != x.shape()[3])
        op_error("conv2d", "input channels " + shape_str(x.shape()) +
                               " do not match weights " + shape_str(w.shape()));
    int k_h = w.shape()[0], k_w = w.shape()[1], in_c = w.shape()[2], f = w.shape()[3];
    if (b.size() != f)
        op_error("conv2d", "bias length " + std::to_string(b.size()) + " for " +
                               std::to_string(f) + " filters");
    int batch = x.shape()[0];
    int out_h = (x.shape()[1] + 2 * pad - k_h) / stride + 1;
    int out_w = (x.shape()[2] + 2 * pad - k_w) / stride + 1;
    auto cols = im2col(x, k_h, k_w, stride, pad);
    auto w2 = reshape(w, {k_h * k_w * in_c, f});
    auto y = add_rowvec(matmul(cols, w2), b);
    return reshape(y, {batch, out_h, out_w, f});
}

// "same" padding for odd kernels at stride 1
template <class Real>
Tensor<Real> conv2d_same(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
    return conv2d(x, w, b, 1, w.shape()[0] / 2);
}

// transposed conv, weights [KH,KW,F,Cin], bias [F]; inverts conv2d's shape map
template <class Real>
Tensor<Real> transposed_conv2d(const Tensor<Real>& x, const Tensor<Real>& w,
                               const Tensor<Real>& b, int stride, int pad, int out_pad) {
    if (x.shape().size() != 4 || w.shape().size() != 4)
        op_error("transposed_conv2d", "expected [B,H,W,C] input and [KH,KW,F,Cin] weights, got " +
                                          shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (w.shape()[3] != x.shape()[3])
        op_error("transposed_conv2d", "input channels " + shape_str(x.shape()) +
                                          " do not match weights " + shape_str(w.shape()));
    int k_h = w.shape()[0], k_w = w.shape()[1], f = w.shape()[2], in_c = w.shape()[3];
    if (b.size() != f)
        op_error("transposed_conv2d", "bias length " + std::to_string(b.size()) + " for " +
                                          std::to_string(f) + " filters");
    int batch = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    auto x2 = reshape(x, {batch * h * wd, in_c});
    auto w2 = transpose2d(reshape(w, {k_h * k_w * f, in_c}));  // [Cin, KH*KW*F]
    auto cols = matmul(x2, w2);
    auto img = col2im(cols, batch, h, wd, k_h, k_w, f, stride, pad, out_pad);
    int out_h = img.shape()[1], out_w = img.shape()[2];
    auto flat = reshape(img, {batch * out_h * out_w, f});
    return reshape(add_rowvec(flat, b), {batch, out_h, out_w, f});
}

// 2x2 max pool, stride 2, floor semantics; ties go to the first element in
// row-major window order
template <class Real>
Tensor<Real> max_pool2x2(const Tensor<Real>& x) {
    if (x.shape().size() != 4)
        op_error("max_pool2x2", "input must be [B,H,W,C], got " + shape_str(x.shape()));
    int batch = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
    if (h < 2 || w < 2)
        op_error("max_pool2x2", "spatial size too small: " + shape_str(x.shape()));
    int oh = h / 2, ow = w / 2;
    std::vector<Real> out(static_cast<size_t>(batch) * oh * ow * c);
    std::vector<int64_t> arg(out.size());
    const auto& xv = x.values();
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j)
                for (int ch = 0; ch < c; ++ch) {
                    int64_t best = -1;
                    Real bv = 0;
                    for (int a = 0; a < 2; ++a)
                        for (int bb = 0; bb < 2; ++bb) {
                            int64_t idx =
                                ((static_cast<int64_t>(b) * h + 2 * i + a) * w + 2 * j + bb) * c + ch;
                            if (best < 0 || xv[idx] > bv) {
                                best = idx;
                                bv = xv[idx];
                            }
                        }
                    int64_t o = ((static_cast<int64_t>(b) * oh + i) * ow + j) * c + ch;
                    out[o] = bv;
                    arg[o] = best;
                }
    return detail::make_op<Real>(
        "max_pool2x2", {batch, oh, ow, c}, std::move(out), {x},
        [arg](detail::Node<Real>& n) {
            auto& pa = *n.parents[0];
            pa.ensure_grad();
            for (size_t o = 0; o < arg.size(); ++o) pa.grad[arg[o]] += n.grad[o];
        });
}

// ---------------------------------------------------------------------------
// GRU cell (composite). Weights pack the reset/update/candidate gates as
// three H-wide column blocks.

template <class Real>
struct GruWeights {
    Tensor<Real> w_x;  // [in, 3H]
    Tensor<Real> w_h;  // [H, 3H]
    Tensor<Real> b_x;  // [3H]
    Tensor<Real> b_h;  // [3H]
};

template <class Real>
Tensor<Real> gru_cell_step(const Tensor<Real>& x, const Tensor<Real>& h,
                           const GruWeights<Real>& w) {
    if (x.shape().size() != 2 || h.shape().size() != 2 || x.shape()[0] != h.shape()[0])
        op_error("gru_cell_step", "batch mismatch " + shape_str(x.shape()) + " vs " +
                                      shape_str(h.shape()));
    int hidden = h.shape()[1];
    if (w.w_x.shape()[0] != x.shape()[1] || w.w_x.shape()[1] != 3 * hidden ||
        w.w_h.shape()[0] != hidden || w.w_h.shape()[1] != 3 * hidden)
        op_error("gru_cell_step", "weight shapes " + shape_str(w.w_x.shape()) + "/" +
                                      shape_str(w.w_h.shape()) + " do not fit input " +
                                      shape_str(x.shape()) + " and state " + shape_str(h.shape()));
    auto gx = dense(x, w.w_x, w.b_x);
    auto gh = dense(h, w.w_h, w.b_h);
    auto r = sigmoid(add(slice_cols(gx, 0, hidden), slice_cols(gh, 0, hidden)));
    auto z = sigmoid(add(slice_cols(gx, hidden, 2 * hidden), slice_cols(gh, hidden, 2 * hidden)));
    auto n = tanh(add(slice_cols(gx, 2 * hidden, 3 * hidden),
                      mul(r, slice_cols(gh, 2 * hidden, 3 * hidden))));
    return add(mul(one_minus(z), n), mul(z, h));
}

// ---------------------------------------------------------------------------
// initialization

template <class Real>
Tensor<Real> glorot_uniform(const Shape& shape, int fan_in, int fan_out, Rng& rng) {
    Real limit = static_cast<Real>(std::sqrt(6.0 / (fan_in + fan_out)));
    std::vector<Real> vals(numel(shape));
    for (auto& v : vals) v = static_cast<Real>(rng.uniform(-limit, limit));
    return Tensor<Real>::from(shape, std::move(vals), true);
}

template <class Real>
bool all_finite(const Tensor<Real>& t) {
    for (Real v : t.values())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Adam

template <class Real>
struct AdamState {
    int64_t step = 0;
    Real lr = static_cast<Real>(1e-3);
    Real beta1 = static_cast<Real>(0.9);
    Real beta2 = static_cast<Real>(0.999);
    Real eps = static_cast<Real>(1e-8);
    std::vector<std::vector<Real>> m;
    std::vector<std::vector<Real>> v;

    static AdamState init(const std::vector<Tensor<Real>>& params, Real lr) {
        AdamState s;
        s.lr = lr;
        for (const auto& p : params) {
            s.m.emplace_back(p.size(), Real(0));
            s.v.emplace_back(p.size(), Real(0));
        }
        return s;
    }
};

template <class Real>
void adam_step(std::vector<Tensor<Real>>& params, AdamState<Real>& st) {
    if (params.size() != st.m.size())
        op_error("adam_step", std::to_string(params.size()) + " params for state of " +
                                  std::to_string(st.m.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        if (!params[i].requires_grad())
            op_error("adam_step", "parameter " + std::to_string(i) + " has no gradient");
        if (st.m[i].size() != static_cast<size_t>(params[i].size()))
            op_error("adam_step", "state buffer " + std::to_string(i) + " does not match parameter");
    }
    st.step += 1;
    Real c1 = Real(1) - static_cast<Real>(std::pow(static_cast<double>(st.beta1),
                                                   static_cast<double>(st.step)));
    Real c2 = Real(1) - static_cast<Real>(std::pow(static_cast<double>(st.beta2),
                                                   static_cast<double>(st.step)));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& w = params[i].values();
        const auto& g = params[i].grad();
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (size_t j = 0; j < w.size(); ++j) {
            m[j] = st.beta1 * m[j] + (Real(1) - st.beta1) * g[j];
            v[j] = st.beta2 * v[j] + (Real(1) - st.beta2) * g[j] * g[j];
            Real mhat = m[j] / c1;
            Real vhat = v[j] / c2;
            w[j] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

}  // namespace fsm::ad

#endif

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "pocr/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pocr {

// ---------------------------------------------------------------------------
// Dense matmul kernels (double, row-major). Parallel loops partition output
// rows statically, so each element is written by exactly one thread and
// results are bitwise identical for any thread count.
// ---------------------------------------------------------------------------
namespace kernels {

inline constexpr int64_t kParallelFlops = 1 << 16;

// C[m,n] = A[m,k] * B[k,n]
inline void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                   bool accumulate = false) {
#pragma omp parallel for schedule(static) if (m * n * k > kParallelFlops)
    for (int64_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        if (!accumulate) std::fill(ci, ci + n, 0.0);
        const double* ai = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] = A^T * B where A is [k,m], B is [k,n]
inline void matmul_ta(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                      bool accumulate = false) {
#pragma omp parallel for schedule(static) if (m * n * k > kParallelFlops)
    for (int64_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        if (!accumulate) std::fill(ci, ci + n, 0.0);
        for (int64_t p = 0; p < k; ++p) {
            double av = a[p * m + i];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] = A * B^T where A is [m,k], B is [n,k]
inline void matmul_tb(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                      bool accumulate = false) {
#pragma omp parallel for schedule(static) if (m * n * k > kParallelFlops)
    for (int64_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Autodiff graph
// ---------------------------------------------------------------------------

class Tensor;

namespace detail {

struct Node {
    Shape shape;
    std::shared_ptr<std::vector<double>> values;  // shared between reshape views
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // accumulates into parents' grads

    int64_t numel() const { return static_cast<int64_t>(values->size()); }
    double* data() { return values->data(); }
    const double* data() const { return values->data(); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(values->size(), 0.0);
    }
};

inline thread_local bool g_grad_enabled = true;

}  // namespace detail

// Disables graph recording in scope (inference / metrics paths).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
    ~NoGradGuard() { detail::g_grad_enabled = prev_; }
    bool prev_;
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double v, bool requires_grad = false) {
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->values = std::make_shared<std::vector<double>>(static_cast<size_t>(pocr::numel(n->shape)), v);
        n->requires_grad = requires_grad && detail::g_grad_enabled;
        return Tensor(std::move(n));
    }

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        POCR_CHECK(pocr::numel(shape) == static_cast<int64_t>(data.size()),
                   "tensor data size does not match shape " + shape_str(shape));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->values = std::make_shared<std::vector<double>>(std::move(data));
        n->requires_grad = requires_grad && detail::g_grad_enabled;
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }

    double* data() { return node_->data(); }
    const double* data() const { return node_->data(); }
    std::vector<double>& values() { return *node_->values; }
    const std::vector<double>& values() const { return *node_->values; }
    double value() const {
        POCR_CHECK(numel() == 1, "value() requires a scalar tensor");
        return (*node_->values)[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    std::vector<double>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    // Reverse-mode sweep from a scalar root.
    void backward() const {
        POCR_CHECK(numel() == 1, "backward() requires a scalar root");
        // Iterative post-order DFS for a topological order.
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> visited;
        std::vector<std::pair<detail::Node*, size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        visited.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                detail::Node* p = n->parents[idx++].get();
                if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->ensure_grad();
        node_->grad[0] = 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node* n = *it;
            if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
        }
    }

    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<Tensor> parents,
                      std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::make_shared<std::vector<double>>(static_cast<size_t>(pocr::numel(n->shape)), 0.0);
    if (g_grad_enabled) {
        for (auto& p : parents)
            if (p.requires_grad()) n->requires_grad = true;
        if (n->requires_grad) {
            for (auto& p : parents) n->parents.push_back(p.node());
            n->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor(std::move(n));
}

// Storage-sharing op (reshape): no copy, same contiguous layout.
inline Tensor make_view(Shape shape, const Tensor& parent) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = parent.node()->values;
    if (g_grad_enabled && parent.requires_grad()) {
        n->requires_grad = true;
        n->parents.push_back(parent.node());
        n->backward_fn = [](Node& self) {
            Node& p = *self.parents[0];
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        };
    }
    return Tensor(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    POCR_CHECK(numel(shape) == x.numel(),
               "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    return detail::make_view(std::move(shape), x);
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    POCR_CHECK(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = detail::make_op(a.shape(), {a, b}, [](detail::Node& self) {
        for (int pi = 0; pi < 2; ++pi) {
            detail::Node& p = *self.parents[pi];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        }
    });
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    POCR_CHECK(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = detail::make_op(a.shape(), {a, b}, [](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    POCR_CHECK(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = detail::make_op(a.shape(), {a, b}, [](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        const double* va = pa.data();
        const double* vb = pb.data();
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * vb[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * va[i];
        }
    });
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    return out;
}

namespace detail {

// Shared index arithmetic for numpy-style broadcasting: b must have the same
// rank as a, with every dimension equal to a's or 1.
struct BcastInfo {
    Shape a_shape, b_shape;
    std::vector<int64_t> a_strides, b_strides;
};

inline BcastInfo bcast_info(const Shape& a, const Shape& b) {
    POCR_CHECK(a.size() == b.size(), "broadcast: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    BcastInfo info{a, b, {}, {}};
    info.a_strides.resize(a.size());
    info.b_strides.resize(a.size());
    int64_t sa = 1, sb = 1;
    for (int i = static_cast<int>(a.size()) - 1; i >= 0; --i) {
        POCR_CHECK(b[i] == a[i] || b[i] == 1,
                   "broadcast: dim " + std::to_string(i) + " of " + shape_str(b) + " incompatible with " + shape_str(a));
        info.a_strides[i] = sa;
        info.b_strides[i] = b[i] == 1 ? 0 : sb;
        sa *= a[i];
        sb *= b[i];
    }
    return info;
}

inline int64_t bcast_index(int64_t flat, const BcastInfo& info) {
    int64_t idx = 0;
    for (int i = static_cast<int>(info.a_shape.size()) - 1; i >= 0; --i) {
        int64_t coord = flat % info.a_shape[i];
        flat /= info.a_shape[i];
        idx += coord * info.b_strides[i];
    }
    return idx;
}

}  // namespace detail

// a + broadcast(b), where b's dims are each a's or 1.
inline Tensor add_bcast(const Tensor& a, const Tensor& b) {
    auto info = detail::bcast_info(a.shape(), b.shape());
    Tensor out = detail::make_op(a.shape(), {a, b}, [info](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t i = 0; i < self.numel(); ++i)
                pb.grad[static_cast<size_t>(detail::bcast_index(i, info))] += self.grad[static_cast<size_t>(i)];
        }
    });
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[static_cast<size_t>(detail::bcast_index(i, info))];
    return out;
}

// a * broadcast(b)
inline Tensor mul_bcast(const Tensor& a, const Tensor& b) {
    auto info = detail::bcast_info(a.shape(), b.shape());
    Tensor out = detail::make_op(a.shape(), {a, b}, [info](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        const double* va = pa.data();
        const double* vb = pb.data();
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t i = 0; i < self.numel(); ++i)
                pa.grad[static_cast<size_t>(i)] +=
                    self.grad[static_cast<size_t>(i)] * vb[detail::bcast_index(i, info)];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t i = 0; i < self.numel(); ++i)
                pb.grad[static_cast<size_t>(detail::bcast_index(i, info))] +=
                    self.grad[static_cast<size_t>(i)] * va[i];
        }
    });
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[static_cast<size_t>(detail::bcast_index(i, info))];
    return out;
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    Tensor out = detail::make_op(a.shape(), {a}, [s](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
    });
    const double* pa = a.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * s;
    return out;
}

namespace detail {

template <typename F, typename DF>
Tensor elementwise(const Tensor& a, F f, DF df) {
    Tensor out = detail::make_op(a.shape(), {a}, [df](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        const double* x = p.data();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * df(x[i]);
    });
    const double* pa = a.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = f(pa[i]);
    return out;
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
    return detail::elementwise(a, [](double x) { return x > 0.0 ? x : 0.0; },
                               [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::elementwise(
        a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
}

inline Tensor abs_val(const Tensor& a) {
    return detail::elementwise(a, [](double x) { return std::fabs(x); },
                               [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor exp_val(const Tensor& a) {
    return detail::elementwise(a, [](double x) { return std::exp(x); },
                               [](double x) { return std::exp(x); });
}

inline Tensor clamp_max(const Tensor& a, double hi) {
    return detail::elementwise(a, [hi](double x) { return x < hi ? x : hi; },
                               [hi](double x) { return x < hi ? 1.0 : 0.0; });
}

// Huber with transition point delta: d^2/(2*delta) inside, |d| - delta/2 outside.
inline Tensor smooth_l1(const Tensor& a, double delta) {
    return detail::elementwise(
        a,
        [delta](double d) {
            double ad = std::fabs(d);
            return ad < delta ? d * d / (2.0 * delta) : ad - delta / 2.0;
        },
        [delta](double d) {
            return std::fabs(d) < delta ? d / delta : (d > 0.0 ? 1.0 : -1.0);
        });
}

inline Tensor sum_all(const Tensor& a) {
    Tensor out = detail::make_op({1}, {a}, [](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        for (auto& g : p.grad) g += self.grad[0];
    });
    const double* pa = a.data();
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
    out.data()[0] = acc;
    return out;
}

inline Tensor mean_all(const Tensor& a) {
    double inv = 1.0 / static_cast<double>(a.numel());
    Tensor out = detail::make_op({1}, {a}, [inv](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        for (auto& g : p.grad) g += self.grad[0] * inv;
    });
    const double* pa = a.data();
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
    out.data()[0] = acc * inv;
    return out;
}

// Mean over all leading dims; output is the trailing [row_len] vector.
inline Tensor mean_rows(const Tensor& a, int64_t row_len) {
    POCR_CHECK(a.numel() % row_len == 0, "mean_rows: row length does not divide tensor size");
    int64_t rows = a.numel() / row_len;
    double inv = 1.0 / static_cast<double>(rows);
    Tensor out = detail::make_op({row_len}, {a}, [rows, row_len, inv](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < row_len; ++j)
                p.grad[static_cast<size_t>(r * row_len + j)] += self.grad[static_cast<size_t>(j)] * inv;
    });
    const double* pa = a.data();
    double* po = out.data();
    std::fill(po, po + row_len, 0.0);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < row_len; ++j) po[j] += pa[r * row_len + j];
    for (int64_t j = 0; j < row_len; ++j) po[j] *= inv;
    return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    POCR_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
               "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = detail::make_op({m, n}, {a, b}, [m, k, n](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            kernels::matmul_tb(self.grad.data(), pb.data(), pa.grad.data(), m, n, k, true);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            kernels::matmul_ta(pa.data(), self.grad.data(), pb.grad.data(), k, m, n, true);
        }
    });
    kernels::matmul(a.data(), b.data(), out.data(), m, k, n);
    return out;
}

// A [m,k] * B^T with B [n,k] -> [m,n]
inline Tensor matmul_tb(const Tensor& a, const Tensor& b) {
    POCR_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
               "matmul_tb: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = detail::make_op({m, n}, {a, b}, [m, k, n](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            kernels::matmul(self.grad.data(), pb.data(), pa.grad.data(), m, n, k, true);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            kernels::matmul_ta(self.grad.data(), pa.data(), pb.grad.data(), n, m, k, true);
        }
    });
    kernels::matmul_tb(a.data(), b.data(), out.data(), m, k, n);
    return out;
}

// Batched matmul over leading dim: A [B,m,k] * B [B,k,n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    POCR_CHECK(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
               "bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor out = detail::make_op({bs, m, n}, {a, b}, [bs, m, k, n](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        for (int64_t i = 0; i < bs; ++i) {
            const double* g = self.grad.data() + i * m * n;
            if (pa.requires_grad) {
                pa.ensure_grad();
                kernels::matmul_tb(g, pb.data() + i * k * n, pa.grad.data() + i * m * k, m, n, k, true);
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                kernels::matmul_ta(pa.data() + i * m * k, g, pb.grad.data() + i * k * n, k, m, n, true);
            }
        }
    });
    for (int64_t i = 0; i < bs; ++i)
        kernels::matmul(a.data() + i * m * k, b.data() + i * k * n, out.data() + i * m * n, m, k, n);
    return out;
}

// Batched A [B,m,k] * B^T with B [B,n,k] -> [B,m,n].
inline Tensor bmm_tb(const Tensor& a, const Tensor& b) {
    POCR_CHECK(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
               "bmm_tb: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    Tensor out = detail::make_op({bs, m, n}, {a, b}, [bs, m, k, n](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        for (int64_t i = 0; i < bs; ++i) {
            const double* g = self.grad.data() + i * m * n;
            if (pa.requires_grad) {
                pa.ensure_grad();
                kernels::matmul(g, pb.data() + i * n * k, pa.grad.data() + i * m * k, m, n, k, true);
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                kernels::matmul_ta(g, pa.data() + i * m * k, pb.grad.data() + i * n * k, n, m, k, true);
            }
        }
    });
    for (int64_t i = 0; i < bs; ++i)
        kernels::matmul_tb(a.data() + i * m * k, b.data() + i * n * k, out.data() + i * m * n, m, k, n);
    return out;
}

// x [N, in] * W [in, out] + bias [out]; leading dims of x are flattened.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    POCR_CHECK(w.ndim() == 2 && x.numel() % w.dim(0) == 0 && b.numel() == w.dim(1),
               "linear: incompatible shapes " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    Shape out_shape = x.shape();
    out_shape.back() = w.dim(1);
    POCR_CHECK(x.shape().back() == w.dim(0), "linear: input feature dim mismatch");
    Tensor flat = reshape(x, {x.numel() / w.dim(0), w.dim(0)});
    Tensor y = matmul(flat, w);
    Shape brow(y.shape().size(), 1);
    brow.back() = b.numel();
    Tensor yb = add_bcast(y, reshape(b, brow));
    return reshape(yb, std::move(out_shape));
}

// ---------------------------------------------------------------------------
// Data movement
// ---------------------------------------------------------------------------

// Treats x as [x.numel()/row_len, row_len] and gathers whole rows; index -1
// yields a zero row (used for padding). Backward scatter-adds rows serially.
inline Tensor gather_rows(const Tensor& x, int64_t row_len, std::vector<int64_t> indices,
                          Shape out_shape) {
    POCR_CHECK(x.numel() % row_len == 0, "gather_rows: row length does not divide input size");
    POCR_CHECK(numel(out_shape) == static_cast<int64_t>(indices.size()) * row_len,
               "gather_rows: output shape does not match index count");
    int64_t in_rows = x.numel() / row_len;
    for (int64_t idx : indices)
        POCR_CHECK(idx >= -1 && idx < in_rows, "gather_rows: index out of range");
    auto idx_ptr = std::make_shared<std::vector<int64_t>>(std::move(indices));
    Tensor out = detail::make_op(std::move(out_shape), {x}, [idx_ptr, row_len](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        const auto& idx = *idx_ptr;
        for (size_t r = 0; r < idx.size(); ++r) {
            if (idx[r] < 0) continue;
            double* dst = p.grad.data() + idx[r] * row_len;
            const double* src = self.grad.data() + static_cast<int64_t>(r) * row_len;
            for (int64_t j = 0; j < row_len; ++j) dst[j] += src[j];
        }
    });
    const double* px = x.data();
    double* po = out.data();
    const auto& idx = *idx_ptr;
    for (size_t r = 0; r < idx.size(); ++r) {
        double* dst = po + static_cast<int64_t>(r) * row_len;
        if (idx[r] < 0)
            std::fill(dst, dst + row_len, 0.0);
        else
            std::memcpy(dst, px + idx[r] * row_len, sizeof(double) * static_cast<size_t>(row_len));
    }
    return out;
}

inline Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    POCR_CHECK(static_cast<int>(perm.size()) == x.ndim(), "permute: rank mismatch");
    int nd = x.ndim();
    Shape out_shape(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);

    // Map each output flat index to the input flat index.
    std::vector<int64_t> in_strides(static_cast<size_t>(nd), 1);
    for (int i = nd - 2; i >= 0; --i)
        in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * x.dim(i + 1);
    std::vector<int64_t> strides_for_out(static_cast<size_t>(nd));
    for (int i = 0; i < nd; ++i) strides_for_out[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(x.numel()));
    {
        std::vector<int64_t> coord(static_cast<size_t>(nd), 0);
        for (int64_t o = 0; o < x.numel(); ++o) {
            int64_t rem = o, in_idx = 0;
            for (int i = nd - 1; i >= 0; --i) {
                int64_t c = rem % out_shape[static_cast<size_t>(i)];
                rem /= out_shape[static_cast<size_t>(i)];
                in_idx += c * strides_for_out[static_cast<size_t>(i)];
            }
            (*map)[static_cast<size_t>(o)] = in_idx;
        }
    }
    Tensor out = detail::make_op(std::move(out_shape), {x}, [map](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t o = 0; o < map->size(); ++o) p.grad[static_cast<size_t>((*map)[o])] += self.grad[o];
    });
    const double* px = x.data();
    double* po = out.data();
    for (size_t o = 0; o < map->size(); ++o) po[o] = px[(*map)[o]];
    return out;
}

// ---------------------------------------------------------------------------
// Normalization / attention building blocks
// ---------------------------------------------------------------------------

// Row-wise x / max(||x||, eps) over the last dim.
inline Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12) {
    int64_t d = x.shape().back();
    int64_t rows = x.numel() / d;
    Tensor out = detail::make_op(x.shape(), {x}, [rows, d, eps](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        const double* xv = p.data();
        const double* yv = self.data();
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = xv + r * d;
            const double* yr = yv + r * d;
            const double* gr = self.grad.data() + r * d;
            double norm = 0.0;
            for (int64_t j = 0; j < d; ++j) norm += xr[j] * xr[j];
            norm = std::max(std::sqrt(norm), eps);
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
            double* pg = p.grad.data() + r * d;
            for (int64_t j = 0; j < d; ++j) pg[j] += (gr[j] - yr[j] * dot) / norm;
        }
    });
    const double* px = x.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        double norm = 0.0;
        for (int64_t j = 0; j < d; ++j) norm += px[r * d + j] * px[r * d + j];
        norm = std::max(std::sqrt(norm), eps);
        for (int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] / norm;
    }
    return out;
}

inline Tensor softmax_rows(const Tensor& x) {
    int64_t d = x.shape().back();
    int64_t rows = x.numel() / d;
    Tensor out = detail::make_op(x.shape(), {x}, [rows, d](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        const double* yv = self.data();
        for (int64_t r = 0; r < rows; ++r) {
            const double* yr = yv + r * d;
            const double* gr = self.grad.data() + r * d;
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
            double* pg = p.grad.data() + r * d;
            for (int64_t j = 0; j < d; ++j) pg[j] += yr[j] * (gr[j] - dot);
        }
    });
    const double* px = x.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * d;
        double* yr = po + r * d;
        double mx = xr[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (int64_t j = 0; j < d; ++j) yr[j] /= sum;
    }
    return out;
}

// LayerNorm over the last dim with affine gamma/beta of size [d].
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
    int64_t d = x.shape().back();
    POCR_CHECK(gamma.numel() == d && beta.numel() == d, "layer_norm: affine size mismatch");
    int64_t rows = x.numel() / d;
    Tensor out = detail::make_op(x.shape(), {x, gamma, beta}, [rows, d, eps](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pg = *self.parents[1];
        detail::Node& pb = *self.parents[2];
        const double* xv = px.data();
        const double* gv = pg.data();
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        std::vector<double> xhat(static_cast<size_t>(d));
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = xv + r * d;
            const double* gr = self.grad.data() + r * d;
            double mean = 0.0;
            for (int64_t j = 0; j < d; ++j) mean += xr[j];
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (int64_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
            var /= static_cast<double>(d);
            double inv_std = 1.0 / std::sqrt(var + eps);
            for (int64_t j = 0; j < d; ++j) xhat[static_cast<size_t>(j)] = (xr[j] - mean) * inv_std;
            if (pg.requires_grad || pb.requires_grad) {
                for (int64_t j = 0; j < d; ++j) {
                    if (pg.requires_grad) pg.grad[static_cast<size_t>(j)] += gr[j] * xhat[static_cast<size_t>(j)];
                    if (pb.requires_grad) pb.grad[static_cast<size_t>(j)] += gr[j];
                }
            }
            if (px.requires_grad) {
                double sum_gh = 0.0, sum_ghx = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    double gh = gr[j] * gv[j];
                    sum_gh += gh;
                    sum_ghx += gh * xhat[static_cast<size_t>(j)];
                }
                double invd = 1.0 / static_cast<double>(d);
                double* pxg = px.grad.data() + r * d;
                for (int64_t j = 0; j < d; ++j) {
                    double gh = gr[j] * gv[j];
                    pxg[j] += inv_std * (gh - invd * sum_gh - xhat[static_cast<size_t>(j)] * invd * sum_ghx);
                }
            }
        }
    });
    const double* px = x.data();
    const double* pgv = gamma.data();
    const double* pbv = beta.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * d;
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(d);
        double inv_std = 1.0 / std::sqrt(var + eps);
        for (int64_t j = 0; j < d; ++j) po[r * d + j] = (xr[j] - mean) * inv_std * pgv[j] + pbv[j];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution / pooling (single image, HWC layout)
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const double* x, int64_t h, int64_t w, int64_t cin, int64_t kh, int64_t kw,
                   int64_t pad, double* col) {
    int64_t patch = kh * kw * cin;
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t xx = 0; xx < w; ++xx) {
            double* dst = col + (y * w + xx) * patch;
            for (int64_t ky = 0; ky < kh; ++ky) {
                int64_t iy = y + ky - pad;
                for (int64_t kx = 0; kx < kw; ++kx) {
                    int64_t ix = xx + kx - pad;
                    double* d = dst + (ky * kw + kx) * cin;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= w)
                        std::fill(d, d + cin, 0.0);
                    else
                        std::memcpy(d, x + (iy * w + ix) * cin, sizeof(double) * static_cast<size_t>(cin));
                }
            }
        }
    }
}

}  // namespace detail

// 'same' convolution, stride 1, odd kernel. x [h,w,cin], w [kh,kw,cin,cout], b [cout].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    POCR_CHECK(x.ndim() == 3 && weight.ndim() == 4, "conv2d: expects HWC input and [kh,kw,cin,cout] weight");
    int64_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
    int64_t kh = weight.dim(0), kw = weight.dim(1), cout = weight.dim(3);
    POCR_CHECK(weight.dim(2) == cin, "conv2d: input channels mismatch");
    POCR_CHECK(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel must be odd for same padding");
    POCR_CHECK(bias.numel() == cout, "conv2d: bias size mismatch");
    int64_t pad = kh / 2;
    int64_t patch = kh * kw * cin;

    Tensor out = detail::make_op({h, w, cout}, {x, weight, bias},
                                 [h, w, cin, kh, kw, cout, pad, patch](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pw = *self.parents[1];
        detail::Node& pb = *self.parents[2];
        int64_t hw = h * w;
        // dW = col^T * dOut (col recomputed; cheaper than caching per node)
        if (pw.requires_grad || px.requires_grad) {
            std::vector<double> col(static_cast<size_t>(hw * patch));
            detail::im2col(px.data(), h, w, cin, kh, kw, pad, col.data());
            if (pw.requires_grad) {
                pw.ensure_grad();
                kernels::matmul_ta(col.data(), self.grad.data(), pw.grad.data(), patch, hw, cout, true);
            }
            if (px.requires_grad) {
                px.ensure_grad();
                // dcol = dOut [hw,cout] * W^T with W [patch,cout]
                std::vector<double> dcol(static_cast<size_t>(hw * patch));
                kernels::matmul_tb(self.grad.data(), pw.data(), dcol.data(), hw, cout, patch);
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t xx = 0; xx < w; ++xx) {
                        const double* src = dcol.data() + (y * w + xx) * patch;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            int64_t iy = y + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                int64_t ix = xx + kx - pad;
                                if (ix < 0 || ix >= w) continue;
                                double* dst = px.grad.data() + (iy * w + ix) * cin;
                                const double* s = src + (ky * kw + kx) * cin;
                                for (int64_t ci = 0; ci < cin; ++ci) dst[ci] += s[ci];
                            }
                        }
                    }
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t i = 0; i < hw; ++i)
                for (int64_t co = 0; co < cout; ++co) pb.grad[static_cast<size_t>(co)] += self.grad[static_cast<size_t>(i * cout + co)];
        }
    });
    {
        int64_t hw = h * w;
        std::vector<double> col(static_cast<size_t>(hw * patch));
        detail::im2col(x.data(), h, w, cin, kh, kw, pad, col.data());
        kernels::matmul(col.data(), weight.data(), out.data(), hw, patch, cout);
        double* po = out.data();
        const double* pb = bias.data();
        for (int64_t i = 0; i < hw; ++i)
            for (int64_t co = 0; co < cout; ++co) po[i * cout + co] += pb[co];
    }
    return out;
}

// 2x2 max pool, stride 2, ceil mode (border windows shrink). x [h,w,c].
inline Tensor max_pool2(const Tensor& x) {
    POCR_CHECK(x.ndim() == 3, "max_pool2: expects HWC input");
    int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    int64_t oh = (h + 1) / 2, ow = (w + 1) / 2;
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(oh * ow * c));
    Tensor out = detail::make_op({oh, ow, c}, {x}, [argmax](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < argmax->size(); ++i) p.grad[static_cast<size_t>((*argmax)[i])] += self.grad[i];
    });
    const double* px = x.data();
    double* po = out.data();
    for (int64_t y = 0; y < oh; ++y)
        for (int64_t xx = 0; xx < ow; ++xx)
            for (int64_t ci = 0; ci < c; ++ci) {
                double best = -1e300;
                int64_t best_idx = -1;
                for (int64_t dy = 0; dy < 2; ++dy) {
                    int64_t iy = 2 * y + dy;
                    if (iy >= h) break;
                    for (int64_t dx = 0; dx < 2; ++dx) {
                        int64_t ix = 2 * xx + dx;
                        if (ix >= w) break;
                        double v = px[(iy * w + ix) * c + ci];
                        if (v > best) {
                            best = v;
                            best_idx = (iy * w + ix) * c + ci;
                        }
                    }
                }
                po[(y * ow + xx) * c + ci] = best;
                (*argmax)[static_cast<size_t>((y * ow + xx) * c + ci)] = best_idx;
            }
    return out;
}

}  // namespace pocr

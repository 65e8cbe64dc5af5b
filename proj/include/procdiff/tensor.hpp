#pragma once

// Small reverse-mode autodiff engine over dense tensors. Graphs are built
// eagerly by the op functions below; backward() runs a topological sweep.
// Masked ops produce exact zeros for masked positions, so causality
// statements hold bit-exactly, not just to rounding.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "procdiff/common.hpp"

namespace procdiff {

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

template <class T>
struct Tensor {
    static_assert(std::is_floating_point_v<T>);

    std::vector<int> shape;
    std::vector<T> val;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Tensor>> parents;
    std::function<void()> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(val.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rows() const { return shape[0]; }
    int cols() const { return shape[1]; }

    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <class T>
using Ptr = std::shared_ptr<Tensor<T>>;

namespace detail {

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class T>
MatMap<T> as_mat(std::vector<T>& v, int64_t r, int64_t c) {
    return MatMap<T>(v.data(), r, c);
}
template <class T>
ConstMatMap<T> as_cmat(const std::vector<T>& v, int64_t r, int64_t c) {
    return ConstMatMap<T>(v.data(), r, c);
}

}  // namespace detail

template <class T>
Ptr<T> make_tensor(std::vector<int> shape, bool requires_grad = false) {
    auto t = std::make_shared<Tensor<T>>();
    t->shape = std::move(shape);
    int64_t n = detail::shape_numel(t->shape);
    t->val.assign(static_cast<size_t>(n), T(0));
    t->grad.assign(static_cast<size_t>(n), T(0));
    t->requires_grad = requires_grad;
    return t;
}

template <class T>
Ptr<T> make_tensor(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    auto t = make_tensor<T>(std::move(shape), requires_grad);
    if (static_cast<int64_t>(data.size()) != t->numel())
        fail(ErrorKind::Validation, "tensor data size does not match shape");
    t->val = std::move(data);
    return t;
}

namespace detail {

template <class T>
bool track(std::initializer_list<const Ptr<T>*> inputs) {
    if (!grad_mode()) return false;
    for (const Ptr<T>* p : inputs)
        if ((*p)->requires_grad) return true;
    return false;
}

template <class T>
Ptr<T> result_like(std::vector<int> shape, bool track) {
    auto out = make_tensor<T>(std::move(shape));
    out->requires_grad = track;
    return out;
}

}  // namespace detail

// ---- backward -------------------------------------------------------------

template <class T>
void backward_with_grad(const Ptr<T>& root, const std::vector<T>& seed) {
    if (static_cast<int64_t>(seed.size()) != root->numel())
        fail(ErrorKind::Validation, "backward seed size mismatch");
    for (size_t i = 0; i < seed.size(); ++i) root->grad[i] += seed[i];

    std::vector<Tensor<T>*> order;
    std::unordered_set<Tensor<T>*> seen;
    std::vector<std::pair<Tensor<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor<T>* parent = node->parents[idx].get();
            ++idx;
            if (parent->requires_grad && seen.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // order is children-after-parents reversed; walk from root side
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();
}

template <class T>
void backward(const Ptr<T>& root) {
    if (root->numel() != 1)
        fail(ErrorKind::Validation, "backward() expects a scalar root");
    backward_with_grad(root, std::vector<T>{T(1)});
}

// ---- elementwise ----------------------------------------------------------

template <class T>
Ptr<T> add(const Ptr<T>& a, const Ptr<T>& b) {
    if (a->shape != b->shape) fail(ErrorKind::Validation, "add: shape mismatch");
    bool tr = detail::track<T>({&a, &b});
    auto out = detail::result_like<T>(a->shape, tr);
    for (int64_t i = 0; i < a->numel(); ++i) out->val[i] = a->val[i] + b->val[i];
    if (tr) {
        out->parents = {a, b};
        auto* o = out.get();
        auto* pa = a.get();
        auto* pb = b.get();
        out->backward_fn = [o, pa, pb] {
            for (int64_t i = 0; i < o->numel(); ++i) {
                if (pa->requires_grad) pa->grad[i] += o->grad[i];
                if (pb->requires_grad) pb->grad[i] += o->grad[i];
            }
        };
    }
    return out;
}

template <class T>
Ptr<T> sub(const Ptr<T>& a, const Ptr<T>& b) {
    if (a->shape != b->shape) fail(ErrorKind::Validation, "sub: shape mismatch");
    bool tr = detail::track<T>({&a, &b});
    auto out = detail::result_like<T>(a->shape, tr);
    for (int64_t i = 0; i < a->numel(); ++i) out->val[i] = a->val[i] - b->val[i];
    if (tr) {
        out->parents = {a, b};
        auto* o = out.get();
        auto* pa = a.get();
        auto* pb = b.get();
        out->backward_fn = [o, pa, pb] {
            for (int64_t i = 0; i < o->numel(); ++i) {
                if (pa->requires_grad) pa->grad[i] += o->grad[i];
                if (pb->requires_grad) pb->grad[i] -= o->grad[i];
            }
        };
    }
    return out;
}

template <class T>
Ptr<T> mul(const Ptr<T>& a, const Ptr<T>& b) {
    if (a->shape != b->shape) fail(ErrorKind::Validation, "mul: shape mismatch");
    bool tr = detail::track<T>({&a, &b});
    auto out = detail::result_like<T>(a->shape, tr);
    for (int64_t i = 0; i < a->numel(); ++i) out->val[i] = a->val[i] * b->val[i];
    if (tr) {
        out->parents = {a, b};
        auto* o = out.get();
        auto* pa = a.get();
        auto* pb = b.get();
        out->backward_fn = [o, pa, pb] {
            for (int64_t i = 0; i < o->numel(); ++i) {
                if (pa->requires_grad) pa->grad[i] += o->grad[i] * pb->val[i];
                if (pb->requires_grad) pb->grad[i] += o->grad[i] * pa->val[i];
            }
        };
    }
    return out;
}

template <class T>
Ptr<T> scale(const Ptr<T>& a, T s) {
    bool tr = detail::track<T>({&a});
    auto out = detail::result_like<T>(a->shape, tr);
    for (int64_t i = 0; i < a->numel(); ++i) out->val[i] = a->val[i] * s;
    if (tr) {
        out->parents = {a};
        auto* o = out.get();
        auto* pa = a.get();
        out->backward_fn = [o, pa, s] {
            for (int64_t i = 0; i < o->numel(); ++i) pa->grad[i] += o->grad[i] * s;
        };
    }
    return out;
}

template <class T>
Ptr<T> silu(const Ptr<T>& a) {
    bool tr = detail::track<T>({&a});
    auto out = detail::result_like<T>(a->shape, tr);
    for (int64_t i = 0; i < a->numel(); ++i) {
        T x = a->val[i];
        out->val[i] = x / (T(1) + std::exp(-x));
    }
    if (tr) {
        out->parents = {a};
        auto* o = out.get();
        auto* pa = a.get();
        out->backward_fn = [o, pa] {
            for (int64_t i = 0; i < o->numel(); ++i) {
                T x = pa->val[i];
                T sig = T(1) / (T(1) + std::exp(-x));
                pa->grad[i] += o->grad[i] * (sig * (T(1) + x * (T(1) - sig)));
            }
        };
    }
    return out;
}

// Broadcast a row vector [d] over every row of [n, d].
template <class T>
Ptr<T> add_rowvec(const Ptr<T>& m, const Ptr<T>& v) {
    if (m->shape.size() != 2 || v->numel() != m->cols())
        fail(ErrorKind::Validation, "add_rowvec: shape mismatch");
    bool tr = detail::track<T>({&m, &v});
    auto out = detail::result_like<T>(m->shape, tr);
    int n = m->rows(), d = m->cols();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out->val[static_cast<size_t>(i) * d + j] =
                m->val[static_cast<size_t>(i) * d + j] + v->val[j];
    if (tr) {
        out->parents = {m, v};
        auto* o = out.get();
        auto* pm = m.get();
        auto* pv = v.get();
        out->backward_fn = [o, pm, pv, n, d] {
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) {
                    T g = o->grad[static_cast<size_t>(i) * d + j];
                    if (pm->requires_grad) pm->grad[static_cast<size_t>(i) * d + j] += g;
                    if (pv->requires_grad) pv->grad[j] += g;
                }
        };
    }
    return out;
}

// ---- matrix ops -----------------------------------------------------------

template <class T>
Ptr<T> matmul(const Ptr<T>& a, const Ptr<T>& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->cols() != b->rows())
        fail(ErrorKind::Validation, "matmul: shape mismatch");
    int m = a->rows(), k = a->cols(), n = b->cols();
    bool tr = detail::track<T>({&a, &b});
    auto out = detail::result_like<T>({m, n}, tr);
    detail::as_mat(out->val, m, n).noalias() =
        detail::as_cmat(a->val, m, k) * detail::as_cmat(b->val, k, n);
    if (tr) {
        out->parents = {a, b};
        auto* o = out.get();
        auto* pa = a.get();
        auto* pb = b.get();
        out->backward_fn = [o, pa, pb, m, k, n] {
            auto g = detail::as_cmat(o->grad, m, n);
            if (pa->requires_grad)
                detail::as_mat(pa->grad, m, k).noalias() += g * detail::as_cmat(pb->val, k, n).transpose();
            if (pb->requires_grad)
                detail::as_mat(pb->grad, k, n).noalias() += detail::as_cmat(pa->val, m, k).transpose() * g;
        };
    }
    return out;
}

// a [m,k] x b^T, b [n,k] -> [m,n]
template <class T>
Ptr<T> matmul_nt(const Ptr<T>& a, const Ptr<T>& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->cols() != b->cols())
        fail(ErrorKind::Validation, "matmul_nt: shape mismatch");
    int m = a->rows(), k = a->cols(), n = b->rows();
    bool tr = detail::track<T>({&a, &b});
    auto out = detail::result_like<T>({m, n}, tr);
    detail::as_mat(out->val, m, n).noalias() =
        detail::as_cmat(a->val, m, k) * detail::as_cmat(b->val, n, k).transpose();
    if (tr) {
        out->parents = {a, b};
        auto* o = out.get();
        auto* pa = a.get();
        auto* pb = b.get();
        out->backward_fn = [o, pa, pb, m, k, n] {
            auto g = detail::as_cmat(o->grad, m, n);
            if (pa->requires_grad)
                detail::as_mat(pa->grad, m, k).noalias() += g * detail::as_cmat(pb->val, n, k);
            if (pb->requires_grad)
                detail::as_mat(pb->grad, n, k).noalias() += g.transpose() * detail::as_cmat(pa->val, m, k);
        };
    }
    return out;
}

// X [n,din] * W^T + b, W [dout,din], b [dout] (b may be null)
template <class T>
Ptr<T> linear(const Ptr<T>& x, const Ptr<T>& w, const Ptr<T>& b) {
    auto y = matmul_nt(x, w);
    if (b) y = add_rowvec(y, b);
    return y;
}

template <class T>
Ptr<T> slice_rows(const Ptr<T>& x, int r0, int r1) {
    if (x->shape.size() != 2 || r0 < 0 || r1 > x->rows() || r0 >= r1)
        fail(ErrorKind::Validation, "slice_rows: bad range");
    int d = x->cols();
    bool tr = detail::track<T>({&x});
    auto out = detail::result_like<T>({r1 - r0, d}, tr);
    std::copy(x->val.begin() + static_cast<size_t>(r0) * d,
              x->val.begin() + static_cast<size_t>(r1) * d, out->val.begin());
    if (tr) {
        out->parents = {x};
        auto* o = out.get();
        auto* px = x.get();
        out->backward_fn = [o, px, r0, d] {
            for (int64_t i = 0; i < o->numel(); ++i)
                px->grad[static_cast<size_t>(r0) * d + i] += o->grad[i];
        };
    }
    return out;
}

template <class T>
Ptr<T> slice_cols(const Ptr<T>& x, int c0, int c1) {
    if (x->shape.size() != 2 || c0 < 0 || c1 > x->cols() || c0 >= c1)
        fail(ErrorKind::Validation, "slice_cols: bad range");
    int n = x->rows(), d = x->cols(), w = c1 - c0;
    bool tr = detail::track<T>({&x});
    auto out = detail::result_like<T>({n, w}, tr);
    for (int i = 0; i < n; ++i)
        std::copy(x->val.begin() + static_cast<size_t>(i) * d + c0,
                  x->val.begin() + static_cast<size_t>(i) * d + c1,
                  out->val.begin() + static_cast<size_t>(i) * w);
    if (tr) {
        out->parents = {x};
        auto* o = out.get();
        auto* px = x.get();
        out->backward_fn = [o, px, n, d, c0, w] {
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < w; ++j)
                    px->grad[static_cast<size_t>(i) * d + c0 + j] +=
                        o->grad[static_cast<size_t>(i) * w + j];
        };
    }
    return out;
}

template <class T>
Ptr<T> concat_cols(const std::vector<Ptr<T>>& xs) {
    if (xs.empty()) fail(ErrorKind::Validation, "concat_cols: empty");
    int n = xs[0]->rows(), total = 0;
    bool tr = false;
    for (const auto& x : xs) {
        if (x->shape.size() != 2 || x->rows() != n)
            fail(ErrorKind::Validation, "concat_cols: row mismatch");
        total += x->cols();
        tr = tr || (grad_mode() && x->requires_grad);
    }
    auto out = detail::result_like<T>({n, total}, tr);
    int off = 0;
    for (const auto& x : xs) {
        int d = x->cols();
        for (int i = 0; i < n; ++i)
            std::copy(x->val.begin() + static_cast<size_t>(i) * d,
                      x->val.begin() + static_cast<size_t>(i + 1) * d,
                      out->val.begin() + static_cast<size_t>(i) * total + off);
        off += d;
    }
    if (tr) {
        out->parents = xs;
        auto* o = out.get();
        std::vector<Tensor<T>*> raw;
        for (const auto& x : xs) raw.push_back(x.get());
        out->backward_fn = [o, raw, n, total] {
            int off2 = 0;
            for (Tensor<T>* px : raw) {
                int d = px->cols();
                if (px->requires_grad)
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < d; ++j)
                            px->grad[static_cast<size_t>(i) * d + j] +=
                                o->grad[static_cast<size_t>(i) * total + off2 + j];
                off2 += d;
            }
        };
    }
    return out;
}

template <class T>
Ptr<T> concat_rows(const std::vector<Ptr<T>>& xs) {
    if (xs.empty()) fail(ErrorKind::Validation, "concat_rows: empty");
    int d = xs[0]->cols(), total = 0;
    bool tr = false;
    for (const auto& x : xs) {
        if (x->shape.size() != 2 || x->cols() != d)
            fail(ErrorKind::Validation, "concat_rows: col mismatch");
        total += x->rows();
        tr = tr || (grad_mode() && x->requires_grad);
    }
    auto out = detail::result_like<T>({total, d}, tr);
    int64_t off = 0;
    for (const auto& x : xs) {
        std::copy(x->val.begin(), x->val.end(), out->val.begin() + off);
        off += x->numel();
    }
    if (tr) {
        out->parents = xs;
        auto* o = out.get();
        std::vector<Tensor<T>*> raw;
        for (const auto& x : xs) raw.push_back(x.get());
        out->backward_fn = [o, raw] {
            int64_t off2 = 0;
            for (Tensor<T>* px : raw) {
                if (px->requires_grad)
                    for (int64_t i = 0; i < px->numel(); ++i) px->grad[i] += o->grad[off2 + i];
                off2 += px->numel();
            }
        };
    }
    return out;
}

// out row 0 = 0, out row i = in row i-1. Turns an inclusive-causal attention
// pass into a history-only readout.
template <class T>
Ptr<T> shift_rows_down1(const Ptr<T>& x) {
    if (x->shape.size() != 2) fail(ErrorKind::Validation, "shift_rows_down1: need matrix");
    int n = x->rows(), d = x->cols();
    bool tr = detail::track<T>({&x});
    auto out = detail::result_like<T>(x->shape, tr);
    for (int i = 1; i < n; ++i)
        std::copy(x->val.begin() + static_cast<size_t>(i - 1) * d,
                  x->val.begin() + static_cast<size_t>(i) * d,
                  out->val.begin() + static_cast<size_t>(i) * d);
    if (tr) {
        out->parents = {x};
        auto* o = out.get();
        auto* px = x.get();
        out->backward_fn = [o, px, n, d] {
            for (int i = 1; i < n; ++i)
                for (int j = 0; j < d; ++j)
                    px->grad[static_cast<size_t>(i - 1) * d + j] +=
                        o->grad[static_cast<size_t>(i) * d + j];
        };
    }
    return out;
}

// Row-wise softmax with a 0/1 validity mask. Masked entries get exact weight
// 0; rows with no valid entry come out all-zero.
template <class T>
Ptr<T> softmax_rows_masked(const Ptr<T>& s, const std::vector<uint8_t>& valid) {
    if (s->shape.size() != 2 || static_cast<int64_t>(valid.size()) != s->numel())
        fail(ErrorKind::Validation, "softmax_rows_masked: mask mismatch");
    int n = s->rows(), m = s->cols();
    bool tr = detail::track<T>({&s});
    auto out = detail::result_like<T>(s->shape, tr);
    for (int i = 0; i < n; ++i) {
        const T* row = s->val.data() + static_cast<size_t>(i) * m;
        const uint8_t* vm = valid.data() + static_cast<size_t>(i) * m;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < m; ++j)
            if (vm[j]) mx = std::max(mx, row[j]);
        if (!std::isfinite(static_cast<double>(mx))) continue;  // empty row -> zeros
        T denom = T(0);
        T* orow = out->val.data() + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            if (vm[j]) {
                orow[j] = std::exp(row[j] - mx);
                denom += orow[j];
            }
        }
        for (int j = 0; j < m; ++j)
            if (vm[j]) orow[j] /= denom;
    }
    if (tr) {
        out->parents = {s};
        auto* o = out.get();
        auto* ps = s.get();
        auto mask = valid;
        out->backward_fn = [o, ps, mask, n, m] {
            for (int i = 0; i < n; ++i) {
                const T* p = o->val.data() + static_cast<size_t>(i) * m;
                const T* g = o->grad.data() + static_cast<size_t>(i) * m;
                const uint8_t* vm = mask.data() + static_cast<size_t>(i) * m;
                T dot = T(0);
                for (int j = 0; j < m; ++j)
                    if (vm[j]) dot += p[j] * g[j];
                T* gs = ps->grad.data() + static_cast<size_t>(i) * m;
                for (int j = 0; j < m; ++j)
                    if (vm[j]) gs[j] += p[j] * (g[j] - dot);
            }
        };
    }
    return out;
}

// ---- reductions -----------------------------------------------------------

template <class T>
Ptr<T> sum_all(const Ptr<T>& x) {
    bool tr = detail::track<T>({&x});
    auto out = detail::result_like<T>({1}, tr);
    T acc = T(0);
    for (int64_t i = 0; i < x->numel(); ++i) acc += x->val[i];
    out->val[0] = acc;
    if (tr) {
        out->parents = {x};
        auto* o = out.get();
        auto* px = x.get();
        out->backward_fn = [o, px] {
            for (int64_t i = 0; i < px->numel(); ++i) px->grad[i] += o->grad[0];
        };
    }
    return out;
}

template <class T>
Ptr<T> mean_all(const Ptr<T>& x) {
    return scale(sum_all(x), T(1) / static_cast<T>(x->numel()));
}

// sum_i w_i * x_i with constant weights; handy as a randomized scalar probe
template <class T>
Ptr<T> weighted_sum(const Ptr<T>& x, const std::vector<T>& w) {
    if (static_cast<int64_t>(w.size()) != x->numel())
        fail(ErrorKind::Validation, "weighted_sum: size mismatch");
    bool tr = detail::track<T>({&x});
    auto out = detail::result_like<T>({1}, tr);
    T acc = T(0);
    for (int64_t i = 0; i < x->numel(); ++i) acc += w[i] * x->val[i];
    out->val[0] = acc;
    if (tr) {
        out->parents = {x};
        auto* o = out.get();
        auto* px = x.get();
        auto wc = w;
        out->backward_fn = [o, px, wc] {
            for (int64_t i = 0; i < px->numel(); ++i) px->grad[i] += o->grad[0] * wc[i];
        };
    }
    return out;
}

// mean((x - target)^2), target is plain data
template <class T>
Ptr<T> mse_to_const(const Ptr<T>& x, const std::vector<T>& target) {
    if (static_cast<int64_t>(target.size()) != x->numel())
        fail(ErrorKind::Validation, "mse_to_const: size mismatch");
    bool tr = detail::track<T>({&x});
    auto out = detail::result_like<T>({1}, tr);
    T acc = T(0);
    for (int64_t i = 0; i < x->numel(); ++i) {
        T d = x->val[i] - target[i];
        acc += d * d;
    }
    T inv_n = T(1) / static_cast<T>(x->numel());
    out->val[0] = acc * inv_n;
    if (tr) {
        out->parents = {x};
        auto* o = out.get();
        auto* px = x.get();
        auto tc = target;
        out->backward_fn = [o, px, tc, inv_n] {
            for (int64_t i = 0; i < px->numel(); ++i)
                px->grad[i] += o->grad[0] * T(2) * inv_n * (px->val[i] - tc[i]);
        };
    }
    return out;
}

// ---- conv / image ops -----------------------------------------------------
// Layout: [B, C, H, W], row-major.

namespace detail {

template <class T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad,
            int oh, int ow, T* cols) {
    // cols: [c*kh*kw, oh*ow]
    for (int ci = 0; ci < c; ++ci)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                T* dst = cols + ((static_cast<size_t>(ci) * kh + ki) * kw + kj) *
                                    (static_cast<size_t>(oh) * ow);
                for (int oi = 0; oi < oh; ++oi) {
                    int ii = oi * stride + ki - pad;
                    for (int oj = 0; oj < ow; ++oj) {
                        int jj = oj * stride + kj - pad;
                        dst[static_cast<size_t>(oi) * ow + oj] =
                            (ii >= 0 && ii < h && jj >= 0 && jj < w)
                                ? x[(static_cast<size_t>(ci) * h + ii) * w + jj]
                                : T(0);
                    }
                }
            }
}

template <class T>
void col2im_add(const T* cols, int c, int h, int w, int kh, int kw, int stride, int pad,
                int oh, int ow, T* x) {
    for (int ci = 0; ci < c; ++ci)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                const T* src = cols + ((static_cast<size_t>(ci) * kh + ki) * kw + kj) *
                                          (static_cast<size_t>(oh) * ow);
                for (int oi = 0; oi < oh; ++oi) {
                    int ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= h) continue;
                    for (int oj = 0; oj < ow; ++oj) {
                        int jj = oj * stride + kj - pad;
                        if (jj < 0 || jj >= w) continue;
                        x[(static_cast<size_t>(ci) * h + ii) * w + jj] +=
                            src[static_cast<size_t>(oi) * ow + oj];
                    }
                }
            }
}

}  // namespace detail

// x [B,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout] or null
template <class T>
Ptr<T> conv2d(const Ptr<T>& x, const Ptr<T>& w, const Ptr<T>& b, int stride = 1, int pad = 1) {
    if (x->shape.size() != 4 || w->shape.size() != 4 || x->dim(1) != w->dim(1))
        fail(ErrorKind::Validation, "conv2d: shape mismatch");
    int bsz = x->dim(0), cin = x->dim(1), h = x->dim(2), ww = x->dim(3);
    int cout = w->dim(0), kh = w->dim(2), kw = w->dim(3);
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (ww + 2 * pad - kw) / stride + 1;
    bool tr = b ? detail::track<T>({&x, &w, &b}) : detail::track<T>({&x, &w});
    auto out = detail::result_like<T>({bsz, cout, oh, ow}, tr);

    int64_t col_rows = static_cast<int64_t>(cin) * kh * kw;
    int64_t col_cols = static_cast<int64_t>(oh) * ow;
    std::vector<T> cols(static_cast<size_t>(col_rows * col_cols));
    for (int n = 0; n < bsz; ++n) {
        detail::im2col(x->val.data() + static_cast<size_t>(n) * cin * h * ww, cin, h, ww, kh,
                       kw, stride, pad, oh, ow, cols.data());
        auto wmat = detail::as_cmat(w->val, cout, col_rows);
        detail::MatMap<T> omat(out->val.data() + static_cast<size_t>(n) * cout * oh * ow, cout,
                               col_cols);
        omat.noalias() = wmat * detail::as_cmat(cols, col_rows, col_cols);
        if (b)
            for (int co = 0; co < cout; ++co)
                omat.row(co).array() += b->val[static_cast<size_t>(co)];
    }
    if (tr) {
        out->parents = b ? std::vector<Ptr<T>>{x, w, b} : std::vector<Ptr<T>>{x, w};
        auto* o = out.get();
        auto* px = x.get();
        auto* pw = w.get();
        Tensor<T>* pb = b ? b.get() : nullptr;
        out->backward_fn = [o, px, pw, pb, bsz, cin, h, ww, cout, kh, kw, stride, pad, oh, ow,
                            col_rows, col_cols] {
            std::vector<T> cols2(static_cast<size_t>(col_rows * col_cols));
            std::vector<T> dcols(static_cast<size_t>(col_rows * col_cols));
            for (int n = 0; n < bsz; ++n) {
                detail::ConstMatMap<T> gmat(
                    o->grad.data() + static_cast<size_t>(n) * cout * oh * ow, cout, col_cols);
                if (pw->requires_grad || px->requires_grad)
                    detail::im2col(px->val.data() + static_cast<size_t>(n) * cin * h * ww, cin,
                                   h, ww, kh, kw, stride, pad, oh, ow, cols2.data());
                if (pw->requires_grad)
                    detail::as_mat(pw->grad, cout, col_rows).noalias() +=
                        gmat * detail::as_cmat(cols2, col_rows, col_cols).transpose();
                if (pb && pb->requires_grad)
                    for (int co = 0; co < cout; ++co)
                        pb->grad[static_cast<size_t>(co)] += gmat.row(co).sum();
                if (px->requires_grad) {
                    detail::as_mat(dcols, col_rows, col_cols).noalias() =
                        detail::as_cmat(pw->val, cout, col_rows).transpose() * gmat;
                    detail::col2im_add(dcols.data(), cin, h, ww, kh, kw, stride, pad, oh, ow,
                                       px->grad.data() + static_cast<size_t>(n) * cin * h * ww);
                }
            }
        };
    }
    return out;
}

template <class T>
Ptr<T> upsample_nearest2(const Ptr<T>& x) {
    if (x->shape.size() != 4) fail(ErrorKind::Validation, "upsample_nearest2: need 4d");
    int bsz = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    bool tr = detail::track<T>({&x});
    auto out = detail::result_like<T>({bsz, c, h * 2, w * 2}, tr);
    for (int n = 0; n < bsz; ++n)
        for (int ci = 0; ci < c; ++ci) {
            const T* src = x->val.data() + (static_cast<size_t>(n) * c + ci) * h * w;
            T* dst = out->val.data() + (static_cast<size_t>(n) * c + ci) * h * w * 4;
            for (int i = 0; i < h * 2; ++i)
                for (int j = 0; j < w * 2; ++j)
                    dst[static_cast<size_t>(i) * w * 2 + j] =
                        src[static_cast<size_t>(i / 2) * w + j / 2];
        }
    if (tr) {
        out->parents = {x};
        auto* o = out.get();
        auto* px = x.get();
        out->backward_fn = [o, px, bsz, c, h, w] {
            for (int n = 0; n < bsz; ++n)
                for (int ci = 0; ci < c; ++ci) {
                    T* gx = px->grad.data() + (static_cast<size_t>(n) * c + ci) * h * w;
                    const T* go = o->grad.data() + (static_cast<size_t>(n) * c + ci) * h * w * 4;
                    for (int i = 0; i < h * 2; ++i)
                        for (int j = 0; j < w * 2; ++j)
                            gx[static_cast<size_t>(i / 2) * w + j / 2] +=
                                go[static_cast<size_t>(i) * w * 2 + j];
                }
        };
    }
    return out;
}

// GroupNorm over [B,C,H,W]; gamma/beta are per-channel.
template <class T>
Ptr<T> group_norm(const Ptr<T>& x, int groups, const Ptr<T>& gamma, const Ptr<T>& beta,
                  T eps = T(1e-5)) {
    if (x->shape.size() != 4 || x->dim(1) % groups != 0)
        fail(ErrorKind::Validation, "group_norm: bad shape/groups");
    int bsz = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
    int cg = c / groups;
    int64_t gsize = static_cast<int64_t>(cg) * h * w;
    bool tr = detail::track<T>({&x, &gamma, &beta});
    auto out = detail::result_like<T>(x->shape, tr);
    std::vector<T> means(static_cast<size_t>(bsz) * groups);
    std::vector<T> invstd(static_cast<size_t>(bsz) * groups);
    for (int n = 0; n < bsz; ++n)
        for (int g = 0; g < groups; ++g) {
            const T* base = x->val.data() + (static_cast<size_t>(n) * c + static_cast<size_t>(g) * cg) * h * w;
            T mu = T(0);
            for (int64_t i = 0; i < gsize; ++i) mu += base[i];
            mu /= static_cast<T>(gsize);
            T var = T(0);
            for (int64_t i = 0; i < gsize; ++i) {
                T d = base[i] - mu;
                var += d * d;
            }
            var /= static_cast<T>(gsize);
            T is = T(1) / std::sqrt(var + eps);
            means[static_cast<size_t>(n) * groups + g] = mu;
            invstd[static_cast<size_t>(n) * groups + g] = is;
            T* obase = out->val.data() + (static_cast<size_t>(n) * c + static_cast<size_t>(g) * cg) * h * w;
            for (int ci = 0; ci < cg; ++ci) {
                T ga = gamma->val[static_cast<size_t>(g) * cg + ci];
                T be = beta->val[static_cast<size_t>(g) * cg + ci];
                for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
                    int64_t off = static_cast<int64_t>(ci) * h * w + i;
                    obase[off] = (base[off] - mu) * is * ga + be;
                }
            }
        }
    if (tr) {
        out->parents = {x, gamma, beta};
        auto* o = out.get();
        auto* px = x.get();
        auto* pg = gamma.get();
        auto* pb = beta.get();
        out->backward_fn = [o, px, pg, pb, means, invstd, bsz, c, cg, groups, h, w, gsize] {
            for (int n = 0; n < bsz; ++n)
                for (int g = 0; g < groups; ++g) {
                    size_t base_off =
                        (static_cast<size_t>(n) * c + static_cast<size_t>(g) * cg) * h * w;
                    const T* xv = px->val.data() + base_off;
                    const T* gv = o->grad.data() + base_off;
                    T mu = means[static_cast<size_t>(n) * groups + g];
                    T is = invstd[static_cast<size_t>(n) * groups + g];
                    // accumulate sums for the normalization backward
                    T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                    for (int ci = 0; ci < cg; ++ci) {
                        T ga = pg->val[static_cast<size_t>(g) * cg + ci];
                        for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
                            int64_t off = static_cast<int64_t>(ci) * h * w + i;
                            T xhat = (xv[off] - mu) * is;
                            T dxhat = gv[off] * ga;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            if (pg->requires_grad)
                                pg->grad[static_cast<size_t>(g) * cg + ci] += gv[off] * xhat;
                            if (pb->requires_grad)
                                pb->grad[static_cast<size_t>(g) * cg + ci] += gv[off];
                        }
                    }
                    if (px->requires_grad) {
                        T inv_m = T(1) / static_cast<T>(gsize);
                        T* gx = px->grad.data() + base_off;
                        for (int ci = 0; ci < cg; ++ci) {
                            T ga = pg->val[static_cast<size_t>(g) * cg + ci];
                            for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
                                int64_t off = static_cast<int64_t>(ci) * h * w + i;
                                T xhat = (xv[off] - mu) * is;
                                T dxhat = gv[off] * ga;
                                gx[off] += is * (dxhat - inv_m * sum_dxhat -
                                                 xhat * inv_m * sum_dxhat_xhat);
                            }
                        }
                    }
                }
        };
    }
    return out;
}

template <class T>
Ptr<T> reshape(const Ptr<T>& x, std::vector<int> shape) {
    if (detail::shape_numel(shape) != x->numel())
        fail(ErrorKind::Validation, "reshape: numel mismatch");
    bool tr = detail::track<T>({&x});
    auto out = detail::result_like<T>(std::move(shape), tr);
    out->val = x->val;
    if (tr) {
        out->parents = {x};
        auto* o = out.get();
        auto* px = x.get();
        out->backward_fn = [o, px] {
            for (int64_t i = 0; i < o->numel(); ++i) px->grad[i] += o->grad[i];
        };
    }
    return out;
}

// Per-sample, per-channel bias: x [B,C,H,W] + e [B,C] broadcast over H,W.
template <class T>
Ptr<T> add_channel_bias(const Ptr<T>& x, const Ptr<T>& e) {
    if (x->shape.size() != 4 || e->shape.size() != 2 || e->rows() != x->dim(0) ||
        e->cols() != x->dim(1))
        fail(ErrorKind::Validation, "add_channel_bias: shape mismatch");
    int bsz = x->dim(0), c = x->dim(1), hw = x->dim(2) * x->dim(3);
    bool tr = detail::track<T>({&x, &e});
    auto out = detail::result_like<T>(x->shape, tr);
    for (int n = 0; n < bsz; ++n)
        for (int ci = 0; ci < c; ++ci) {
            T bias = e->val[static_cast<size_t>(n) * c + ci];
            size_t off = (static_cast<size_t>(n) * c + ci) * hw;
            for (int i = 0; i < hw; ++i) out->val[off + i] = x->val[off + i] + bias;
        }
    if (tr) {
        out->parents = {x, e};
        auto* o = out.get();
        auto* px = x.get();
        auto* pe = e.get();
        out->backward_fn = [o, px, pe, bsz, c, hw] {
            for (int n = 0; n < bsz; ++n)
                for (int ci = 0; ci < c; ++ci) {
                    size_t off = (static_cast<size_t>(n) * c + ci) * hw;
                    T acc = T(0);
                    for (int i = 0; i < hw; ++i) {
                        T g = o->grad[off + i];
                        if (px->requires_grad) px->grad[off + i] += g;
                        acc += g;
                    }
                    if (pe->requires_grad) pe->grad[static_cast<size_t>(n) * c + ci] += acc;
                }
        };
    }
    return out;
}

}  // namespace procdiff

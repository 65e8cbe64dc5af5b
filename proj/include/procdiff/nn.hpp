#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "procdiff/common.hpp"
#include "procdiff/tensor.hpp"

namespace procdiff {

// Ordered, named parameter registry. Modules register their leaves here so
// the optimizer, checkpoints and gradient checks all see one flat list.
template <class T>
struct ParamStore {
    std::vector<std::pair<std::string, Ptr<T>>> items;

    Ptr<T> add(const std::string& name, Ptr<T> p) {
        for (auto& [n, _] : items)
            if (n == name) fail(ErrorKind::Validation, "duplicate parameter name: " + name);
        p->requires_grad = true;
        items.emplace_back(name, p);
        return p;
    }

    Ptr<T> find(const std::string& name) const {
        for (auto& [n, p] : items)
            if (n == name) return p;
        return nullptr;
    }

    void zero_grad() {
        for (auto& [n, p] : items) p->zero_grad();
    }

    void set_trainable(const std::string& prefix, bool trainable) {
        for (auto& [n, p] : items)
            if (n.rfind(prefix, 0) == 0) p->requires_grad = trainable;
    }

    int64_t count() const {
        int64_t n = 0;
        for (auto& [name, p] : items) n += p->numel();
        return n;
    }
};

namespace init {

template <class T>
void normal_scaled(Ptr<T>& p, Rng& rng, double stddev) {
    for (auto& v : p->val) v = static_cast<T>(rng.normal() * stddev);
}

template <class T>
void fan_in(Ptr<T>& p, Rng& rng, int64_t fan) {
    normal_scaled(p, rng, 1.0 / std::sqrt(static_cast<double>(fan)));
}

template <class T>
void constant(Ptr<T>& p, T c) {
    std::fill(p->val.begin(), p->val.end(), c);
}

}  // namespace init

template <class T>
struct Linear {
    Ptr<T> w;  // [out, in]
    Ptr<T> b;  // [out] or null

    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng,
           bool bias = true, bool zero_init = false) {
        w = ps.add(name + ".w", make_tensor<T>({out, in}));
        if (!zero_init) init::fan_in(w, rng, in);
        if (bias) {
            b = ps.add(name + ".b", make_tensor<T>({out}));
            // biases start at zero either way
        }
    }

    Ptr<T> forward(const Ptr<T>& x) const { return linear(x, w, b); }
};

// Two-layer perceptron with SiLU in between.
template <class T>
struct Mlp {
    Linear<T> fc1, fc2;

    Mlp() = default;
    Mlp(ParamStore<T>& ps, const std::string& name, int in, int hidden, int out, Rng& rng) {
        fc1 = Linear<T>(ps, name + ".fc1", in, hidden, rng);
        fc2 = Linear<T>(ps, name + ".fc2", hidden, out, rng);
    }

    Ptr<T> forward(const Ptr<T>& x) const { return fc2.forward(silu(fc1.forward(x))); }
};

// pe[pos, 2i] = sin(pos * 10000^(-2i/d)), pe[pos, 2i+1] = cos(...)
template <class T>
std::vector<T> sinusoidal_encoding(int positions, int d) {
    if (d % 2 != 0) fail(ErrorKind::Validation, "sinusoidal encoding needs an even dim");
    std::vector<T> pe(static_cast<size_t>(positions) * d);
    for (int pos = 0; pos < positions; ++pos)
        for (int i = 0; i < d / 2; ++i) {
            double freq = std::exp(-std::log(10000.0) * (2.0 * i / d));
            pe[static_cast<size_t>(pos) * d + 2 * i] = static_cast<T>(std::sin(pos * freq));
            pe[static_cast<size_t>(pos) * d + 2 * i + 1] = static_cast<T>(std::cos(pos * freq));
        }
    return pe;
}

enum class MaskMode { CausalStrict, Full };

// Single-layer multi-head self-attention over a [N, D] sequence.
//
// CausalStrict delivers the history-only contract directly: output row j is a
// function of input rows < j only, with row 0 identically zero. Internally
// that is an inclusive-causal pass whose readout is shifted down one row.
template <class T>
struct AttentionBlock {
    int dim = 0;
    int heads = 1;
    MaskMode mode = MaskMode::CausalStrict;
    bool positional = true;
    Linear<T> wq, wk, wv, wo;

    AttentionBlock() = default;
    AttentionBlock(ParamStore<T>& ps, const std::string& name, int d, int n_heads,
                   MaskMode mask_mode, Rng& rng, bool add_positional = true)
        : dim(d), heads(n_heads), mode(mask_mode), positional(add_positional) {
        if (d % n_heads != 0)
            fail(ErrorKind::Validation, "attention dim must be divisible by heads");
        wq = Linear<T>(ps, name + ".wq", d, d, rng);
        wk = Linear<T>(ps, name + ".wk", d, d, rng);
        wv = Linear<T>(ps, name + ".wv", d, d, rng);
        wo = Linear<T>(ps, name + ".wo", d, d, rng);
    }

    Ptr<T> forward(const Ptr<T>& x) const {
        if (x->shape.size() != 2 || x->cols() != dim)
            fail(ErrorKind::Validation, "attention: input dim mismatch");
        int n = x->rows();
        Ptr<T> h = x;
        if (positional) {
            auto pe = make_tensor<T>({n, dim}, sinusoidal_encoding<T>(n, dim));
            h = add(h, pe);
        }
        auto q = wq.forward(h);
        auto k = wk.forward(h);
        auto v = wv.forward(h);

        int dh = dim / heads;
        T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        std::vector<uint8_t> valid(static_cast<size_t>(n) * n, 1);
        if (mode == MaskMode::CausalStrict)
            for (int i = 0; i < n; ++i)
                for (int j = i + 1; j < n; ++j) valid[static_cast<size_t>(i) * n + j] = 0;

        std::vector<Ptr<T>> head_outs;
        head_outs.reserve(static_cast<size_t>(heads));
        for (int hd = 0; hd < heads; ++hd) {
            auto qh = slice_cols(q, hd * dh, (hd + 1) * dh);
            auto kh = slice_cols(k, hd * dh, (hd + 1) * dh);
            auto vh = slice_cols(v, hd * dh, (hd + 1) * dh);
            auto scores = scale(matmul_nt(qh, kh), inv_sqrt);
            auto probs = softmax_rows_masked(scores, valid);
            head_outs.push_back(matmul(probs, vh));
        }
        auto out = wo.forward(heads == 1 ? head_outs[0] : concat_cols(head_outs));
        if (mode == MaskMode::CausalStrict) out = shift_rows_down1(out);
        return out;
    }
};

// Adam with bias correction. Parameters whose requires_grad is off are
// frozen: they accumulate no gradient and are never stepped.
template <class T>
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step_count = 0;
    std::vector<std::vector<T>> m, v;

    void ensure_state(const ParamStore<T>& ps) {
        if (m.size() == ps.items.size()) return;
        m.resize(ps.items.size());
        v.resize(ps.items.size());
        for (size_t i = 0; i < ps.items.size(); ++i) {
            m[i].assign(ps.items[i].second->val.size(), T(0));
            v[i].assign(ps.items[i].second->val.size(), T(0));
        }
    }

    void step(ParamStore<T>& ps) {
        ensure_state(ps);
        ++step_count;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (size_t i = 0; i < ps.items.size(); ++i) {
            auto& p = ps.items[i].second;
            if (!p->requires_grad) continue;
            for (size_t j = 0; j < p->val.size(); ++j) {
                double g = static_cast<double>(p->grad[j]);
                double mm = beta1 * static_cast<double>(m[i][j]) + (1.0 - beta1) * g;
                double vv = beta2 * static_cast<double>(v[i][j]) + (1.0 - beta2) * g * g;
                m[i][j] = static_cast<T>(mm);
                v[i][j] = static_cast<T>(vv);
                p->val[j] -= static_cast<T>(lr * (mm / bc1) / (std::sqrt(vv / bc2) + eps));
            }
        }
    }
};

}  // namespace procdiff

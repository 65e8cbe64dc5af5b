#pragma once

// Control branch baseline: an encoder-path copy of the denoiser driven by
// procedural representations, with zero-initialized output projections, plus
// the two temporal projection variants for image prompts.

#include <string>
#include <vector>

#include "procdiff/denoiser.hpp"
#include "procdiff/memory.hpp"

namespace procdiff {

// Convolution along the frame axis of [N, C, H, W] with kernel size K and
// left padding K-1. Masking the current tap (PixelCNN style) makes the layer
// strictly causal; later layers keep the current tap and stay causal overall
// once one strict layer sits in front. Bias-free so an empty history maps to
// an exactly-zero representation.
template <class T>
Ptr<T> temporal_conv(const Ptr<T>& x, const Ptr<T>& w, bool exclude_current) {
    if (x->shape.size() != 4 || w->shape.size() != 3 || w->dim(1) != x->dim(1))
        fail(ErrorKind::Validation, "temporal_conv: shape mismatch");
    int n = x->dim(0), cin = x->dim(1), h = x->dim(2), ww = x->dim(3);
    int cout = w->dim(0), k = w->dim(2);
    int hw = h * ww;
    bool tr = detail::track<T>({&x, &w});
    auto out = detail::result_like<T>({n, cout, h, ww}, tr);

    int d_max = exclude_current ? k - 1 : k;
    for (int pos = 0; pos < n; ++pos) {
        detail::MatMap<T> y(out->val.data() + static_cast<size_t>(pos) * cout * hw, cout, hw);
        for (int d = 0; d < d_max; ++d) {
            int src = pos - (k - 1) + d;
            if (src < 0) continue;  // left padding
            detail::ConstMatMap<T> xs(x->val.data() + static_cast<size_t>(src) * cin * hw, cin,
                                      hw);
            // tap weight [cout, cin] at kernel slot d
            Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> wd(cout, cin);
            for (int co = 0; co < cout; ++co)
                for (int ci = 0; ci < cin; ++ci)
                    wd(co, ci) = w->val[(static_cast<size_t>(co) * cin + ci) * k + d];
            y.noalias() += wd * xs;
        }
    }
    if (tr) {
        out->parents = {x, w};
        auto* o = out.get();
        auto* px = x.get();
        auto* pw = w.get();
        out->backward_fn = [o, px, pw, n, cin, cout, k, hw, d_max] {
            for (int pos = 0; pos < n; ++pos) {
                detail::ConstMatMap<T> gy(o->grad.data() + static_cast<size_t>(pos) * cout * hw,
                                          cout, hw);
                for (int d = 0; d < d_max; ++d) {
                    int src = pos - (k - 1) + d;
                    if (src < 0) continue;
                    detail::ConstMatMap<T> xs(
                        px->val.data() + static_cast<size_t>(src) * cin * hw, cin, hw);
                    if (pw->requires_grad) {
                        Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> gw =
                            gy * xs.transpose();
                        for (int co = 0; co < cout; ++co)
                            for (int ci = 0; ci < cin; ++ci)
                                pw->grad[(static_cast<size_t>(co) * cin + ci) * k + d] +=
                                    gw(co, ci);
                    }
                    if (px->requires_grad) {
                        Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> wd(
                            cout, cin);
                        for (int co = 0; co < cout; ++co)
                            for (int ci = 0; ci < cin; ++ci)
                                wd(co, ci) = pw->val[(static_cast<size_t>(co) * cin + ci) * k + d];
                        detail::MatMap<T> gx(px->grad.data() + static_cast<size_t>(src) * cin * hw,
                                             cin, hw);
                        gx.noalias() += wd.transpose() * gy;
                    }
                }
            }
        };
    }
    return out;
}

enum class TpVariant { A, B };

inline TpVariant tp_variant_from_string(const std::string& s) {
    if (s == "A" || s == "a") return TpVariant::A;
    if (s == "B" || s == "b") return TpVariant::B;
    fail(ErrorKind::Config, "unknown temporal projection variant: " + s);
}

template <class T>
struct TemporalProjectionConfig {
    TpVariant variant = TpVariant::A;
    int latent_channels = 3;
    std::vector<int> spatial_plan = {3, 6, 6, 12, 12, 6, 6, 3};  // 7 spatial convs
    int temporal_kernel = 3;
    int temporal_stack = 3;  // leading temporal convs in variant B
};

// Frame stack [N, C, H, W] -> per-step procedural maps, strictly causal:
// output at step j depends only on frames < j, and step 1 is exactly zero.
// All convolutions are bias-free.
template <class T>
struct TemporalProjection {
    TemporalProjectionConfig<T> cfg;
    std::vector<Ptr<T>> spatial_w;   // 3x3, pad 1
    std::vector<Ptr<T>> temporal_w;  // [cout, cin, k]

    TemporalProjection() = default;
    TemporalProjection(ParamStore<T>& ps, const std::string& name,
                       const TemporalProjectionConfig<T>& config, Rng& rng)
        : cfg(config) {
        if (cfg.spatial_plan.front() != cfg.latent_channels ||
            cfg.spatial_plan.back() != cfg.latent_channels)
            fail(ErrorKind::Validation, "temporal projection must preserve latent channels");
        int spatial_layers = static_cast<int>(cfg.spatial_plan.size()) - 1;
        for (int i = 0; i < spatial_layers; ++i) {
            int cin = cfg.spatial_plan[static_cast<size_t>(i)];
            int cout = cfg.spatial_plan[static_cast<size_t>(i) + 1];
            auto w = ps.add(name + ".spatial" + std::to_string(i) + ".w",
                            make_tensor<T>({cout, cin, 3, 3}));
            init::fan_in(w, rng, static_cast<int64_t>(cin) * 9);
            spatial_w.push_back(w);
        }
        int temporal_layers = cfg.variant == TpVariant::A ? spatial_layers : cfg.temporal_stack;
        for (int i = 0; i < temporal_layers; ++i) {
            int ch = cfg.variant == TpVariant::A ? cfg.spatial_plan[static_cast<size_t>(i) + 1]
                                                 : cfg.latent_channels;
            auto w = ps.add(name + ".temporal" + std::to_string(i) + ".w",
                            make_tensor<T>({ch, ch, cfg.temporal_kernel}));
            init::fan_in(w, rng, static_cast<int64_t>(ch) * cfg.temporal_kernel);
            temporal_w.push_back(w);
        }
    }

    Ptr<T> forward(const Ptr<T>& frames) const {
        if (frames->shape.size() != 4 || frames->dim(1) != cfg.latent_channels)
            fail(ErrorKind::Validation, "temporal projection: bad frame stack");
        Ptr<T> h = frames;
        if (cfg.variant == TpVariant::A) {
            // spatial conv -> temporal conv interleaved; first temporal layer
            // excludes the current step
            for (size_t i = 0; i < spatial_w.size(); ++i) {
                h = conv2d(h, spatial_w[i], Ptr<T>{}, 1, 1);
                h = temporal_conv(h, temporal_w[i], /*exclude_current=*/i == 0);
                if (i + 1 < spatial_w.size()) h = silu(h);
            }
        } else {
            for (size_t i = 0; i < temporal_w.size(); ++i) {
                h = temporal_conv(h, temporal_w[i], /*exclude_current=*/i == 0);
                h = silu(h);
            }
            for (size_t i = 0; i < spatial_w.size(); ++i) {
                h = conv2d(h, spatial_w[i], Ptr<T>{}, 1, 1);
                if (i + 1 < spatial_w.size()) h = silu(h);
            }
        }
        return h;
    }
};

// Copy of the denoiser's encoder path with its own parameters and
// zero-initialized per-resolution output projections.
template <class T>
struct ControlBranch {
    DenoiserConfig<T> cfg;
    int ctx_dim = 0;
    Ptr<T> conv_in_w, conv_in_b;
    ResBlock<T> enc1, enc2, mid;
    Ptr<T> down1_w, down1_b, down2_w, down2_b;
    CrossAttention<T> attn;
    Ptr<T> zero_full_w, zero_full_b, zero_half_w, zero_half_b, zero_mid_w, zero_mid_b;
    std::string name_prefix;

    ControlBranch() = default;
    ControlBranch(ParamStore<T>& ps, const std::string& name, const DenoiserConfig<T>& dcfg,
                  int context_dim, Rng& rng)
        : cfg(dcfg), ctx_dim(context_dim), name_prefix(name) {
        int c = cfg.channels;
        conv_in_w = ps.add(name + ".conv_in.w", make_tensor<T>({c, 3, 3, 3}));
        init::fan_in(conv_in_w, rng, 27);
        conv_in_b = ps.add(name + ".conv_in.b", make_tensor<T>({c}));
        enc1 = ResBlock<T>(ps, name + ".enc1", c, c, cfg.time_dim, cfg.groups, rng);
        down1_w = ps.add(name + ".down1.w", make_tensor<T>({c, c, 3, 3}));
        init::fan_in(down1_w, rng, static_cast<int64_t>(c) * 9);
        down1_b = ps.add(name + ".down1.b", make_tensor<T>({c}));
        enc2 = ResBlock<T>(ps, name + ".enc2", c, 2 * c, cfg.time_dim, cfg.groups, rng);
        down2_w = ps.add(name + ".down2.w", make_tensor<T>({2 * c, 2 * c, 3, 3}));
        init::fan_in(down2_w, rng, static_cast<int64_t>(2 * c) * 9);
        down2_b = ps.add(name + ".down2.b", make_tensor<T>({2 * c}));
        mid = ResBlock<T>(ps, name + ".mid", 2 * c, 2 * c, cfg.time_dim, cfg.groups, rng);
        attn = CrossAttention<T>(ps, name + ".attn", 2 * c, context_dim, rng);
        // zero projections: the branch contributes nothing at initialization
        zero_full_w = ps.add(name + ".zero_full.w", make_tensor<T>({c, c, 1, 1}));
        zero_full_b = ps.add(name + ".zero_full.b", make_tensor<T>({c}));
        zero_half_w = ps.add(name + ".zero_half.w", make_tensor<T>({2 * c, 2 * c, 1, 1}));
        zero_half_b = ps.add(name + ".zero_half.b", make_tensor<T>({2 * c}));
        zero_mid_w = ps.add(name + ".zero_mid.w", make_tensor<T>({2 * c, 2 * c, 1, 1}));
        zero_mid_b = ps.add(name + ".zero_mid.b", make_tensor<T>({2 * c}));
    }

    // Copies the encoder-path weights of a base denoiser (the
    // initialize-from-pretrained strategy).
    void copy_from(const ToyDenoiser<T>& base) {
        auto clone = [](const Ptr<T>& dst, const Ptr<T>& src) {
            if (dst->shape != src->shape)
                fail(ErrorKind::Validation, "control branch copy: shape mismatch");
            dst->val = src->val;
        };
        clone(conv_in_w, base.conv_in_w);
        clone(conv_in_b, base.conv_in_b);
        auto clone_res = [&](ResBlock<T>& dst, const ResBlock<T>& src) {
            clone(dst.gn1_g, src.gn1_g);
            clone(dst.gn1_b, src.gn1_b);
            clone(dst.conv1_w, src.conv1_w);
            clone(dst.conv1_b, src.conv1_b);
            clone(dst.cond.w, src.cond.w);
            clone(dst.cond.b, src.cond.b);
            clone(dst.gn2_g, src.gn2_g);
            clone(dst.gn2_b, src.gn2_b);
            clone(dst.conv2_w, src.conv2_w);
            clone(dst.conv2_b, src.conv2_b);
            if (dst.skip_w && src.skip_w) clone(dst.skip_w, src.skip_w);
        };
        clone_res(enc1, base.enc1);
        clone_res(enc2, base.enc2);
        clone_res(mid, base.mid1);
        clone(down1_w, base.down1_w);
        clone(down1_b, base.down1_b);
        clone(down2_w, base.down2_w);
        clone(down2_b, base.down2_b);
    }

    // Only the attention block stays trainable (plus the zero projections,
    // which carry the branch output).
    void freeze_non_attention(ParamStore<T>& ps) {
        ps.set_trainable(name_prefix, false);
        ps.set_trainable(name_prefix + ".attn", true);
        ps.set_trainable(name_prefix + ".zero_full", true);
        ps.set_trainable(name_prefix + ".zero_half", true);
        ps.set_trainable(name_prefix + ".zero_mid", true);
    }

    typename ToyDenoiser<T>::ControlResiduals forward(const Ptr<T>& x, const Ptr<T>& e,
                                                      const Ptr<T>& ctx) const {
        auto h1 = enc1.forward(conv2d(x, conv_in_w, conv_in_b), e);
        auto h2 = enc2.forward(conv2d(h1, down1_w, down1_b, 2, 1), e);
        auto hm = mid.forward(conv2d(h2, down2_w, down2_b, 2, 1), e);
        if (ctx) hm = attn.forward(hm, ctx);
        typename ToyDenoiser<T>::ControlResiduals out;
        out.r_full = conv2d(h1, zero_full_w, zero_full_b, 1, 0);
        out.r_half = conv2d(h2, zero_half_w, zero_half_b, 1, 0);
        out.r_mid = conv2d(hm, zero_mid_w, zero_mid_b, 1, 0);
        return out;
    }
};

// Text variant: the procedural text representation (causal memory path)
// replaces the conditional prompt as the branch's attention context.
template <class T>
typename ToyDenoiser<T>::ControlResiduals control_text_forward(
    const ControlBranch<T>& branch, const Ptr<T>& noisy_latents, const Ptr<T>& procedural_text,
    const Ptr<T>& time_emb) {
    if (procedural_text->rows() != noisy_latents->dim(0) ||
        procedural_text->cols() != branch.ctx_dim)
        fail(ErrorKind::Validation, "control_text_forward: representation shape mismatch");
    return branch.forward(noisy_latents, time_emb, procedural_text);
}

// Image variant: branch input is the sum of noisy latents and the temporal
// projection of the history stack. An empty history contributes zero.
template <class T>
typename ToyDenoiser<T>::ControlResiduals control_image_forward(
    const ControlBranch<T>& branch, const Ptr<T>& noisy_latents, const Ptr<T>& history_frames,
    const TemporalProjection<T>& tp, const Ptr<T>& time_emb) {
    Ptr<T> x = noisy_latents;
    if (history_frames && history_frames->dim(0) > 0) {
        auto maps = tp.forward(history_frames);
        if (maps->shape != noisy_latents->shape)
            fail(ErrorKind::Validation, "control_image_forward: projected shape mismatch");
        x = add(x, maps);
    }
    return branch.forward(x, time_emb, Ptr<T>{});
}

}  // namespace procdiff

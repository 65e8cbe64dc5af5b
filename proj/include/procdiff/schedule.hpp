#pragma once

#include <cmath>
#include <vector>

#include "procdiff/nn.hpp"
#include "procdiff/tensor.hpp"

namespace procdiff {

struct NoiseScheduleConfig {
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
};

// Linear beta schedule; alpha_bar kept in double regardless of model dtype.
class NoiseSchedule {
public:
    explicit NoiseSchedule(const NoiseScheduleConfig& cfg = {}) : cfg_(cfg) {
        if (cfg.timesteps < 1) fail(ErrorKind::Validation, "timesteps must be >= 1");
        beta_.resize(static_cast<size_t>(cfg.timesteps));
        alpha_bar_.resize(static_cast<size_t>(cfg.timesteps));
        double cum = 1.0;
        for (int t = 0; t < cfg.timesteps; ++t) {
            double frac = cfg.timesteps == 1
                              ? 0.0
                              : static_cast<double>(t) / (cfg.timesteps - 1);
            double b = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
            if (!(b > 0.0 && b < 1.0)) fail(ErrorKind::Validation, "beta out of (0, 1)");
            if (t > 0 && b < beta_[static_cast<size_t>(t - 1)])
                fail(ErrorKind::Validation, "beta must be non-decreasing");
            beta_[static_cast<size_t>(t)] = b;
            cum *= 1.0 - b;
            alpha_bar_[static_cast<size_t>(t)] = cum;
            if (t > 0 && !(alpha_bar_[static_cast<size_t>(t)] < alpha_bar_[static_cast<size_t>(t - 1)]))
                fail(ErrorKind::Validation, "alpha_bar must be strictly decreasing");
        }
    }

    int timesteps() const { return cfg_.timesteps; }
    const NoiseScheduleConfig& config() const { return cfg_; }

    // 1-based accessors; alpha_bar(0) = 1 by convention.
    double beta(int t) const {
        check(t);
        return beta_[static_cast<size_t>(t - 1)];
    }
    double alpha(int t) const { return 1.0 - beta(t); }
    double alpha_bar(int t) const {
        if (t == 0) return 1.0;
        check(t);
        return alpha_bar_[static_cast<size_t>(t - 1)];
    }

private:
    void check(int t) const {
        if (t < 1 || t > cfg_.timesteps)
            fail(ErrorKind::Validation,
                 "timestep " + std::to_string(t) + " outside [1, " +
                     std::to_string(cfg_.timesteps) + "]");
    }
    NoiseScheduleConfig cfg_;
    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
};

// x_t = sqrt(alpha_bar_t) * x_0 + sqrt(1 - alpha_bar_t) * noise
template <class T>
Ptr<T> q_sample(const Ptr<T>& x0, int t, const Ptr<T>& noise, const NoiseSchedule& schedule) {
    if (!noise || noise->shape != x0->shape)
        fail(ErrorKind::Validation, "q_sample: noise shape mismatch");
    if (t < 1 || t > schedule.timesteps())
        fail(ErrorKind::Validation,
             "q_sample: timestep " + std::to_string(t) + " outside [1, " +
                 std::to_string(schedule.timesteps()) + "]");
    double ab = schedule.alpha_bar(t);
    T a = static_cast<T>(std::sqrt(ab));
    T s = static_cast<T>(std::sqrt(1.0 - ab));
    return add(scale(x0, a), scale(noise, s));
}

// Sinusoidal features of the timestep followed by a 2-layer perceptron.
template <class T>
struct TimestepEmbedder {
    int feature_dim = 0;
    int out_dim = 0;
    Mlp<T> mlp;

    TimestepEmbedder() = default;
    TimestepEmbedder(ParamStore<T>& ps, const std::string& name, int features, int out, Rng& rng)
        : feature_dim(features), out_dim(out), mlp(ps, name, features, out, out, rng) {
        if (features % 2 != 0) fail(ErrorKind::Validation, "timestep features must be even");
    }

    std::vector<T> features_of(int t) const {
        std::vector<T> f(static_cast<size_t>(feature_dim));
        int half = feature_dim / 2;
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
            f[static_cast<size_t>(i)] = static_cast<T>(std::sin(t * freq));
            f[static_cast<size_t>(half + i)] = static_cast<T>(std::cos(t * freq));
        }
        return f;
    }

    // [B, out_dim], one row per timestep
    Ptr<T> forward(const std::vector<int>& ts) const {
        auto feats = make_tensor<T>({static_cast<int>(ts.size()), feature_dim});
        for (size_t i = 0; i < ts.size(); ++i) {
            auto f = features_of(ts[i]);
            std::copy(f.begin(), f.end(),
                      feats->val.begin() + static_cast<int64_t>(i) * feature_dim);
        }
        return mlp.forward(feats);
    }
};

}  // namespace procdiff

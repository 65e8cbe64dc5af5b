#pragma once

#include <json.hpp>

#include "procdiff/denoiser.hpp"
#include "procdiff/memory.hpp"
#include "procdiff/schedule.hpp"

namespace procdiff {

template <class T>
struct ModelConfig {
    MemoryKind memory_kind = MemoryKind::Tmn;
    int memory_dim = 256;
    int memory_heads = 4;
    int encoder_dim = 64;  // provider embedding width (text and image)
    DenoiserConfig<T> denoiser;
    NoiseScheduleConfig schedule;
    uint64_t init_seed = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["memory.kind"] = to_string(memory_kind);
        j["memory.dim"] = memory_dim;
        j["memory.heads"] = memory_heads;
        j["encoder.dim"] = encoder_dim;
        j["denoiser.image_size"] = denoiser.image_size;
        j["denoiser.channels"] = denoiser.channels;
        j["denoiser.time_dim"] = denoiser.time_dim;
        j["denoiser.text_dim"] = denoiser.text_dim;
        j["denoiser.groups"] = denoiser.groups;
        j["schedule.timesteps"] = schedule.timesteps;
        j["schedule.beta_start"] = schedule.beta_start;
        j["schedule.beta_end"] = schedule.beta_end;
        j["init_seed"] = init_seed;
        return j;
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.memory_kind = memory_kind_from_string(j.value("memory.kind", "tmn"));
        c.memory_dim = j.value("memory.dim", c.memory_dim);
        c.memory_heads = j.value("memory.heads", c.memory_heads);
        c.encoder_dim = j.value("encoder.dim", c.encoder_dim);
        c.denoiser.image_size = j.value("denoiser.image_size", c.denoiser.image_size);
        c.denoiser.channels = j.value("denoiser.channels", c.denoiser.channels);
        c.denoiser.time_dim = j.value("denoiser.time_dim", c.denoiser.time_dim);
        c.denoiser.text_dim = j.value("denoiser.text_dim", c.denoiser.text_dim);
        c.denoiser.groups = j.value("denoiser.groups", c.denoiser.groups);
        c.schedule.timesteps = j.value("schedule.timesteps", c.schedule.timesteps);
        c.schedule.beta_start = j.value("schedule.beta_start", c.schedule.beta_start);
        c.schedule.beta_end = j.value("schedule.beta_end", c.schedule.beta_end);
        c.init_seed = j.value("init_seed", c.init_seed);
        return c;
    }
};

// The trainable bundle: denoiser + memory net + fusion head over one
// parameter store, plus the (non-learned) noise schedule.
template <class T>
struct GenerativeModel {
    ModelConfig<T> cfg;
    ParamStore<T> params;
    ToyDenoiser<T> denoiser;
    MemoryNet<T> memory;
    FusionHead<T> fusion;
    NoiseSchedule schedule;

    explicit GenerativeModel(const ModelConfig<T>& config)
        : cfg(config), schedule(config.schedule) {
        Rng rng(mix_seed(cfg.init_seed, fnv1a("model-init")));
        denoiser = ToyDenoiser<T>(params, "denoiser", make_denoiser_cfg(), rng);
        memory = MemoryNet<T>(params, "memory", make_memory_cfg(), rng);
        fusion = FusionHead<T>(params, "fusion", cfg.memory_dim, cfg.denoiser.time_dim, rng);
    }

private:
    DenoiserConfig<T> make_denoiser_cfg() const {
        DenoiserConfig<T> d = cfg.denoiser;
        d.text_dim = cfg.encoder_dim;
        return d;
    }
    MemoryNetConfig<T> make_memory_cfg() const {
        MemoryNetConfig<T> m;
        m.kind = cfg.memory_kind;
        m.dim = cfg.memory_dim;
        m.heads = cfg.memory_heads;
        m.text_in = cfg.encoder_dim;
        m.image_in = cfg.encoder_dim;
        return m;
    }
};

}  // namespace procdiff

#pragma once

#include <vector>

#include "procdiff/train.hpp"

namespace procdiff {

struct SamplerConfig {
    uint64_t seed = 0;
    int stride = 1;          // 1 = full ancestral sweep; > 1 = strided deterministic
    bool use_memory = true;  // off reduces to unconditioned per-prompt sampling
};

// Generates x_0 estimates for every step of a prepared recipe. Per-step noise
// streams are seeded from (seed, recipe_id, step index) so steps and recipes
// are reproducible independently of each other.
template <class T>
std::vector<std::vector<T>> sample_procedure_values(const GenerativeModel<T>& model,
                                                    const RecipeSamples<T>& rs,
                                                    const SamplerConfig& sc) {
    NoGradGuard no_grad;
    int n = rs.seq.size();
    int side = model.cfg.denoiser.image_size;
    int64_t per = static_cast<int64_t>(3) * side * side;
    int total_t = model.schedule.timesteps();
    if (sc.stride < 1) fail(ErrorKind::Validation, "sampler stride must be >= 1");

    Ptr<T> memory;
    if (sc.use_memory)
        memory = memory_from_prompts(model.memory, rs.seq, rs.mem_text, rs.mem_image).values;

    std::vector<Rng> step_rngs;
    step_rngs.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        step_rngs.emplace_back(
            mix_seed(mix_seed(sc.seed, fnv1a(rs.recipe_id)), static_cast<uint64_t>(i + 1)));

    auto x = make_tensor<T>({n, 3, side, side});
    for (int i = 0; i < n; ++i)
        for (int64_t j = 0; j < per; ++j)
            x->val[static_cast<size_t>(i * per + j)] =
                static_cast<T>(step_rngs[static_cast<size_t>(i)].normal());

    auto text = rows_to_tensor<T>(rs.cond_text);

    // descending timestep ladder; always ends at 1
    std::vector<int> taus;
    for (int t = total_t; t > 1; t -= sc.stride) taus.push_back(t);
    taus.push_back(1);

    for (size_t s = 0; s < taus.size(); ++s) {
        int t = taus[s];
        int t_prev = (s + 1 < taus.size()) ? taus[s + 1] : 0;
        std::vector<int> ts(static_cast<size_t>(n), t);
        auto t_emb = model.denoiser.time_embed.forward(ts);
        auto e = sc.use_memory ? fuse_with_time(t_emb, memory, model.fusion) : t_emb;
        auto eps = model.denoiser.forward(x, e, text);

        double ab_t = model.schedule.alpha_bar(t);
        auto next = make_tensor<T>({n, 3, side, side});
        if (sc.stride == 1) {
            // ancestral update
            double a_t = model.schedule.alpha(t);
            double b_t = model.schedule.beta(t);
            double ab_prev = model.schedule.alpha_bar(t - 1);
            double mean_x = 1.0 / std::sqrt(a_t);
            double mean_e = b_t / std::sqrt(1.0 - ab_t) / std::sqrt(a_t);
            double sigma = t > 1 ? std::sqrt((1.0 - ab_prev) / (1.0 - ab_t) * b_t) : 0.0;
            for (int i = 0; i < n; ++i)
                for (int64_t j = 0; j < per; ++j) {
                    size_t idx = static_cast<size_t>(i * per + j);
                    double v = mean_x * static_cast<double>(x->val[idx]) -
                               mean_e * static_cast<double>(eps->val[idx]);
                    if (t > 1) v += sigma * step_rngs[static_cast<size_t>(i)].normal();
                    next->val[idx] = static_cast<T>(v);
                }
        } else {
            // deterministic strided jump via the x_0 estimate
            double ab_prev = t_prev == 0 ? 1.0 : model.schedule.alpha_bar(t_prev);
            double sq_ab_t = std::sqrt(ab_t);
            double sq_1m_t = std::sqrt(1.0 - ab_t);
            double sq_ab_p = std::sqrt(ab_prev);
            double sq_1m_p = std::sqrt(1.0 - ab_prev);
            for (int i = 0; i < n; ++i)
                for (int64_t j = 0; j < per; ++j) {
                    size_t idx = static_cast<size_t>(i * per + j);
                    double ep = static_cast<double>(eps->val[idx]);
                    double x0 = (static_cast<double>(x->val[idx]) - sq_1m_t * ep) / sq_ab_t;
                    next->val[idx] = static_cast<T>(sq_ab_p * x0 + sq_1m_p * ep);
                }
        }
        x = next;
    }

    std::vector<std::vector<T>> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        out[static_cast<size_t>(i)].assign(x->val.begin() + i * per,
                                           x->val.begin() + (i + 1) * per);
        for (auto& v : out[static_cast<size_t>(i)])
            v = std::clamp(v, T(-1), T(1));
    }
    return out;
}

template <class T>
std::vector<Image8> sample_procedure(const GenerativeModel<T>& model, const RecipeSamples<T>& rs,
                                     const SamplerConfig& sc) {
    auto values = sample_procedure_values(model, rs, sc);
    std::vector<Image8> images;
    images.reserve(values.size());
    for (const auto& v : values)
        images.push_back(unit_to_image<T>(v.data(), model.cfg.denoiser.image_size));
    return images;
}

// ---- content manipulation ---------------------------------------------

struct TextEdit {
    enum class Kind { Replace, Insert, Delete };
    Kind kind = Kind::Replace;
    int step_index = 0;     // 1-based
    std::string find;       // Replace
    std::string replace;    // Replace
    std::string new_text;   // Insert
};

// Applies edits in order; Replace swaps every occurrence within the step,
// Insert places a new step at the index, Delete removes and reindexes.
inline Recipe apply_edits(const Recipe& recipe, const std::vector<TextEdit>& edits) {
    Recipe out = recipe;
    for (const auto& edit : edits) {
        int n = out.size();
        switch (edit.kind) {
            case TextEdit::Kind::Replace: {
                if (edit.step_index < 1 || edit.step_index > n)
                    fail(ErrorKind::Edit, "edit step " + std::to_string(edit.step_index) +
                                              " outside 1.." + std::to_string(n));
                std::string& text = out.steps[static_cast<size_t>(edit.step_index - 1)].text;
                size_t pos = text.find(edit.find);
                if (edit.find.empty() || pos == std::string::npos)
                    fail(ErrorKind::Edit, "step " + std::to_string(edit.step_index) +
                                              ": text '" + edit.find + "' not found");
                while (pos != std::string::npos) {
                    text.replace(pos, edit.find.size(), edit.replace);
                    pos = text.find(edit.find, pos + edit.replace.size());
                }
                break;
            }
            case TextEdit::Kind::Insert: {
                if (edit.step_index < 1 || edit.step_index > n + 1)
                    fail(ErrorKind::Edit, "insert position " + std::to_string(edit.step_index) +
                                              " outside 1.." + std::to_string(n + 1));
                Step s;
                s.text = edit.new_text;
                out.steps.insert(out.steps.begin() + (edit.step_index - 1), s);
                break;
            }
            case TextEdit::Kind::Delete: {
                if (edit.step_index < 1 || edit.step_index > n)
                    fail(ErrorKind::Edit, "delete step " + std::to_string(edit.step_index) +
                                              " outside 1.." + std::to_string(n));
                if (n == 1) fail(ErrorKind::Edit, "cannot delete the only step");
                out.steps.erase(out.steps.begin() + (edit.step_index - 1));
                break;
            }
        }
        for (size_t i = 0; i < out.steps.size(); ++i)
            out.steps[i].index = static_cast<int>(i) + 1;
    }
    return out;
}

// Regenerates the edited recipe end to end so memory reflects the edits in
// all downstream steps.
template <class T>
std::vector<Image8> manipulate_and_generate(const GenerativeModel<T>& model,
                                            const Recipe& recipe,
                                            const std::vector<TextEdit>& edits,
                                            const PromptScenario& scenario,
                                            const EmbeddingProvider& provider,
                                            const SamplerConfig& sc) {
    Recipe edited = apply_edits(recipe, edits);
    auto rs = prepare_recipe(model, edited, scenario, provider, /*with_targets=*/false);
    return sample_procedure(model, rs, sc);
}

}  // namespace procdiff

#pragma once

#include <filesystem>
#include <vector>

#include "procdiff/checkpoint.hpp"
#include "procdiff/encoder.hpp"
#include "procdiff/image.hpp"
#include "procdiff/model.hpp"

namespace procdiff {

// Everything needed to condition on one recipe: the prompt sequence, the
// per-step conditional text embeddings, the memory-side embeddings aligned
// to the sequence entries, and (for training) the target images in [-1, 1].
template <class T>
struct RecipeSamples {
    std::string recipe_id;
    PromptSequence seq;
    std::vector<std::vector<double>> cond_text;  // conditional prompt, every step
    std::vector<std::vector<double>> mem_text;   // aligned to entries, may be empty rows
    std::vector<std::vector<double>> mem_image;
    std::vector<std::vector<T>> targets;  // x_0 per step, 3*S*S, empty unless loaded
};

template <class T>
std::vector<T> image_to_unit(const Image8& img) {
    std::vector<T> out(static_cast<size_t>(3) * img.height * img.width);
    size_t hw = static_cast<size_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const uint8_t* p = img.pixel(x, y);
            size_t base = static_cast<size_t>(y) * img.width + x;
            for (int c = 0; c < 3; ++c)
                out[static_cast<size_t>(c) * hw + base] =
                    static_cast<T>(p[c] / 127.5 - 1.0);
        }
    return out;
}

template <class T>
Image8 unit_to_image(const T* data, int side) {
    Image8 img = make_image(side, side);
    size_t hw = static_cast<size_t>(side) * side;
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            size_t base = static_cast<size_t>(y) * side + x;
            for (int c = 0; c < 3; ++c) {
                double v = (static_cast<double>(data[static_cast<size_t>(c) * hw + base]) + 1.0) *
                           127.5;
                img.pixel(x, y)[c] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    return img;
}

// Encodes a recipe under a scenario. Loads ground-truth step images when the
// memory needs them or when targets are requested.
template <class T>
RecipeSamples<T> prepare_recipe(const GenerativeModel<T>& model, const Recipe& recipe,
                                const PromptScenario& scenario,
                                const EmbeddingProvider& provider, bool with_targets) {
    require_compatible(model.cfg.memory_kind, scenario.kind);
    RecipeSamples<T> rs;
    rs.recipe_id = recipe.recipe_id;
    rs.seq = make_prompt_sequence(recipe, scenario);

    size_t n = rs.seq.entries.size();
    rs.cond_text.reserve(n);
    rs.mem_text.assign(n, {});
    rs.mem_image.assign(n, {});
    for (size_t i = 0; i < n; ++i) {
        const auto& entry = rs.seq.entries[i];
        const Step& step = recipe.steps[i];
        rs.cond_text.push_back(provider.encode_text(step.text));
        if (entry.modality != Modality::Image) rs.mem_text[i] = rs.cond_text.back();
        if (entry.modality != Modality::Text) {
            if (!entry.image_ref)
                fail(ErrorKind::Incomplete, "recipe " + recipe.recipe_id + " step " +
                                                std::to_string(step.index) + ": image required");
            rs.mem_image[i] = provider.encode_image(load_image(recipe.base_dir / *entry.image_ref));
        }
    }
    if (with_targets) {
        int side = model.cfg.denoiser.image_size;
        for (const Step& step : recipe.steps) {
            if (!step.image_ref)
                fail(ErrorKind::Incomplete, "recipe " + recipe.recipe_id + " step " +
                                                std::to_string(step.index) +
                                                ": training needs a ground-truth image");
            Image8 img = crop_and_resize_square(load_image(recipe.base_dir / *step.image_ref), side);
            rs.targets.push_back(image_to_unit<T>(img));
        }
    }
    return rs;
}

template <class T>
Ptr<T> stack_rows_as_tensor(const std::vector<std::vector<T>>& rows, std::vector<int> shape) {
    auto t = make_tensor<T>(std::move(shape));
    size_t per = rows.empty() ? 0 : rows[0].size();
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i].begin(), rows[i].end(), t->val.begin() + static_cast<int64_t>(i * per));
    return t;
}

// Noise-prediction MSE over all steps of one recipe, one optimizer update.
// Throws Numeric on a non-finite loss.
template <class T>
double train_step(GenerativeModel<T>& model, Adam<T>& opt, const RecipeSamples<T>& rs,
                  Rng& rng) {
    int n = rs.seq.size();
    int side = model.cfg.denoiser.image_size;
    int64_t per = static_cast<int64_t>(3) * side * side;
    if (static_cast<int>(rs.targets.size()) != n)
        fail(ErrorKind::Incomplete, "train_step: recipe has no prepared targets");

    auto memory = memory_from_prompts(model.memory, rs.seq, rs.mem_text, rs.mem_image);

    std::vector<int> ts(static_cast<size_t>(n));
    for (auto& t : ts) t = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(model.schedule.timesteps())));

    auto x0 = stack_rows_as_tensor(rs.targets, {n, 3, side, side});
    auto noise = make_tensor<T>({n, 3, side, side});
    for (auto& v : noise->val) v = static_cast<T>(rng.normal());

    // q_sample per row (alpha_bar differs per timestep)
    auto xt = make_tensor<T>({n, 3, side, side});
    for (int i = 0; i < n; ++i) {
        double ab = model.schedule.alpha_bar(ts[static_cast<size_t>(i)]);
        T a = static_cast<T>(std::sqrt(ab)), s = static_cast<T>(std::sqrt(1.0 - ab));
        for (int64_t j = 0; j < per; ++j)
            xt->val[static_cast<size_t>(i * per + j)] =
                a * x0->val[static_cast<size_t>(i * per + j)] +
                s * noise->val[static_cast<size_t>(i * per + j)];
    }

    auto e = fuse_with_time(model.denoiser.time_embed.forward(ts), memory.values, model.fusion);
    auto text = rows_to_tensor<T>(rs.cond_text);
    auto eps_hat = model.denoiser.forward(xt, e, text);
    auto loss = mse_to_const(eps_hat, noise->val);

    double value = static_cast<double>(loss->val[0]);
    if (!std::isfinite(value)) fail(ErrorKind::Numeric, "non-finite training loss");

    model.params.zero_grad();
    backward(loss);
    opt.step(model.params);
    return value;
}

struct TrainLogEntry {
    int64_t step;
    double loss;
};

// Round-robin over recipes, one recipe per step. On a numeric failure a
// diagnostic snapshot (checkpoint + state) is written before rethrowing.
template <class T>
class Trainer {
public:
    Trainer(GenerativeModel<T>& model, std::vector<RecipeSamples<T>> recipes, double lr,
            uint64_t seed)
        : model_(model), recipes_(std::move(recipes)), rng_(mix_seed(seed, fnv1a("train"))) {
        if (recipes_.empty()) fail(ErrorKind::EmptyCorpus, "no recipes to train on");
        opt_.lr = lr;
    }

    Adam<T>& optimizer() { return opt_; }
    int64_t step_count() const { return step_; }
    void set_step_count(int64_t s) { step_ = s; }
    const std::vector<TrainLogEntry>& log() const { return log_; }

    double run_steps(int64_t steps, const std::filesystem::path& snapshot_dir = {}) {
        double last = 0.0;
        for (int64_t i = 0; i < steps; ++i) {
            auto& rs = recipes_[static_cast<size_t>(step_ % static_cast<int64_t>(recipes_.size()))];
            try {
                last = train_step(model_, opt_, rs, rng_);
            } catch (const Error& e) {
                if (e.kind() == ErrorKind::Numeric && !snapshot_dir.empty())
                    write_snapshot(snapshot_dir);
                throw;
            }
            ++step_;
            log_.push_back({step_, last});
        }
        return last;
    }

    // mean of the last `window` losses, or of everything seen when shorter
    double smoothed_loss(size_t window = 100) const {
        if (log_.empty()) return 0.0;
        size_t n = std::min(window, log_.size());
        double acc = 0.0;
        for (size_t i = log_.size() - n; i < log_.size(); ++i) acc += log_[i].loss;
        return acc / static_cast<double>(n);
    }

    double initial_smoothed_loss(size_t window = 100) const {
        if (log_.empty()) return 0.0;
        size_t n = std::min(window, log_.size());
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) acc += log_[i].loss;
        return acc / static_cast<double>(n);
    }

private:
    void write_snapshot(const std::filesystem::path& dir) {
        std::filesystem::create_directories(dir);
        nlohmann::json meta;
        meta["step"] = step_;
        meta["reason"] = "non-finite loss";
        save_checkpoint(dir / "diagnostic.ckpt", model_.params, &opt_, meta);
    }

    GenerativeModel<T>& model_;
    std::vector<RecipeSamples<T>> recipes_;
    Adam<T> opt_;
    Rng rng_;
    int64_t step_ = 0;
    std::vector<TrainLogEntry> log_;
};

}  // namespace procdiff

#include "procdiff/scenario.hpp"

#include <algorithm>
#include <cmath>

#include "procdiff/common.hpp"

namespace procdiff {

std::string to_string(ScenarioKind kind) {
    switch (kind) {
        case ScenarioKind::TextOnly: return "text_only";
        case ScenarioKind::ImageHistory: return "image_history";
        case ScenarioKind::Multimodal: return "multimodal";
    }
    return "?";
}

std::string to_string(Modality m) {
    switch (m) {
        case Modality::Text: return "text";
        case Modality::Image: return "image";
        case Modality::TextImage: return "text+image";
    }
    return "?";
}

ScenarioKind scenario_kind_from_string(const std::string& s) {
    if (s == "text_only") return ScenarioKind::TextOnly;
    if (s == "image_history") return ScenarioKind::ImageHistory;
    if (s == "multimodal") return ScenarioKind::Multimodal;
    fail(ErrorKind::Config, "unknown scenario kind: " + s);
}

Placement placement_from_string(const std::string& s) {
    if (s == "ordered") return Placement::Ordered;
    if (s == "random") return Placement::Random;
    fail(ErrorKind::Config, "unknown placement: " + s);
}

namespace {

// ceil(p*N) image positions; ordered placement is the prefix 1..k, random is
// a seeded draw without replacement mixed with the recipe id.
std::vector<int> pick_image_positions(const Recipe& recipe, const PromptScenario& sc) {
    int n = recipe.size();
    int k = static_cast<int>(std::ceil(sc.p * n - 1e-12));
    k = std::min(k, n);
    std::vector<int> positions;
    if (k == 0) return positions;
    if (sc.placement == Placement::Ordered) {
        for (int i = 1; i <= k; ++i) positions.push_back(i);
    } else {
        std::vector<int> pool(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i + 1;
        Rng rng(mix_seed(sc.seed, fnv1a(recipe.recipe_id)));
        for (int i = 0; i < k; ++i) {
            int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(n - i)));
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        }
        positions.assign(pool.begin(), pool.begin() + k);
        std::sort(positions.begin(), positions.end());
    }
    int available = 0;
    for (const Step& s : recipe.steps)
        if (s.image_ref) ++available;
    if (k > available)
        fail(ErrorKind::Coverage, "recipe " + recipe.recipe_id + ": scenario needs " +
                                      std::to_string(k) + " image positions but only " +
                                      std::to_string(available) + " steps have images");
    for (int pos : positions)
        if (!recipe.steps[static_cast<size_t>(pos - 1)].image_ref)
            fail(ErrorKind::Coverage, "recipe " + recipe.recipe_id + ": step " +
                                          std::to_string(pos) +
                                          " selected as image-bearing but has no image");
    return positions;
}

}  // namespace

PromptSequence make_prompt_sequence(const Recipe& recipe, const PromptScenario& scenario) {
    validate_recipe(recipe);
    if (scenario.kind == ScenarioKind::Multimodal && (scenario.p < 0.0 || scenario.p > 1.0))
        fail(ErrorKind::Validation, "p must be in [0, 1]");

    PromptSequence seq;
    seq.recipe_id = recipe.recipe_id;
    seq.kind = scenario.kind;
    seq.retain_text = scenario.retain_text;

    std::vector<int> image_positions;
    if (scenario.kind == ScenarioKind::ImageHistory) {
        for (const Step& s : recipe.steps)
            if (!s.image_ref)
                fail(ErrorKind::Coverage, "recipe " + recipe.recipe_id + ": step " +
                                              std::to_string(s.index) +
                                              " has no image; image_history needs all steps");
        for (int i = 1; i <= recipe.size(); ++i) image_positions.push_back(i);
    } else if (scenario.kind == ScenarioKind::Multimodal) {
        image_positions = pick_image_positions(recipe, scenario);
    }

    size_t next_image = 0;
    for (const Step& s : recipe.steps) {
        PromptEntry e;
        e.position = s.index;
        e.text = s.text;
        bool is_image = next_image < image_positions.size() &&
                        image_positions[next_image] == s.index;
        if (is_image) {
            ++next_image;
            e.modality = (scenario.kind == ScenarioKind::Multimodal && scenario.retain_text)
                             ? Modality::TextImage
                             : Modality::Image;
            e.image_ref = s.image_ref;
            seq.image_positions.push_back(s.index);
            if (scenario.kind == ScenarioKind::Multimodal && scenario.retain_text)
                seq.text_positions.push_back(s.index);
        } else {
            e.modality = Modality::Text;
            seq.text_positions.push_back(s.index);
        }
        seq.entries.push_back(std::move(e));
    }
    return seq;
}

double sample_validation_p(uint64_t seed, const std::string& recipe_id) {
    Rng rng(mix_seed(seed, fnv1a(recipe_id)));
    // map [0,1) to (0, 0.5]
    return 0.5 * (1.0 - rng.uniform());
}

}  // namespace procdiff

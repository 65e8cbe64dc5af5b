#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "procdiff/data.hpp"

namespace procdiff {

enum class ScenarioKind { TextOnly, ImageHistory, Multimodal };
enum class Placement { Ordered, Random };
enum class Modality { Text, Image, TextImage };

// Which procedural prompt each step contributes. p/placement only apply to
// the multimodal kind; retain_text keeps the step text at image positions.
struct PromptScenario {
    ScenarioKind kind = ScenarioKind::TextOnly;
    double p = 0.0;
    Placement placement = Placement::Ordered;
    bool retain_text = false;
    uint64_t seed = 0;
};

struct PromptEntry {
    int position = 0;  // 1-based step index
    Modality modality = Modality::Text;
    std::string text;                      // step text (conditional prompt)
    std::optional<std::string> image_ref;  // set for image-bearing entries
};

struct PromptSequence {
    std::string recipe_id;
    ScenarioKind kind = ScenarioKind::TextOnly;
    bool retain_text = false;
    std::vector<PromptEntry> entries;     // one per step, ordered
    std::vector<int> text_positions;      // n_i
    std::vector<int> image_positions;     // m_j

    int size() const { return static_cast<int>(entries.size()); }
};

std::string to_string(ScenarioKind kind);
std::string to_string(Modality m);
ScenarioKind scenario_kind_from_string(const std::string& s);
Placement placement_from_string(const std::string& s);

// Pure in (recipe, scenario). Multimodal places ceil(p*N) image positions,
// either the recipe prefix or a seeded-random subset; errors with Coverage
// when a selected position has no image.
PromptSequence make_prompt_sequence(const Recipe& recipe, const PromptScenario& scenario);

// Uniform draw from (0, 0.5], deterministic per (seed, recipe_id).
double sample_validation_p(uint64_t seed, const std::string& recipe_id);

}  // namespace procdiff

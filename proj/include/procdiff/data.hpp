#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace procdiff {

// One instruction of a procedure. index is 1-based within its recipe.
struct Step {
    int index = 0;
    std::string text;
    std::optional<std::string> image_ref;  // relative to the manifest directory
    std::optional<double> t_start;
    std::optional<double> t_end;
};

struct Recipe {
    std::string recipe_id;
    std::string split;  // "train" | "validation"
    std::optional<std::string> label;
    std::vector<Step> steps;
    std::filesystem::path base_dir;  // set by the loader; not serialized

    int size() const { return static_cast<int>(steps.size()); }

    std::filesystem::path image_path(const Step& step) const;
};

// Loads a JSONL manifest, validates every recipe and returns them ordered by
// recipe_id. Errors: Parse (malformed record, with line number), Integrity
// (duplicate recipe_id), Referential (bad step indices, missing image file).
std::vector<Recipe> load_manifest(const std::filesystem::path& path);

// Canonical serialization; load followed by save is byte-identical for
// canonicalized manifests.
void save_manifest(const std::vector<Recipe>& recipes, const std::filesystem::path& path);
std::string manifest_line(const Recipe& recipe);

void validate_recipe(const Recipe& recipe);

}  // namespace procdiff

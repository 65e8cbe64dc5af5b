#include "procdiff/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "procdiff/common.hpp"

namespace procdiff {

using json = nlohmann::ordered_json;

std::filesystem::path Recipe::image_path(const Step& step) const {
    if (!step.image_ref) fail(ErrorKind::Validation, "step has no image: " + recipe_id);
    return base_dir / *step.image_ref;
}

void validate_recipe(const Recipe& recipe) {
    if (recipe.recipe_id.empty()) fail(ErrorKind::Parse, "empty recipe_id");
    if (recipe.split != "train" && recipe.split != "validation")
        fail(ErrorKind::Parse, "recipe " + recipe.recipe_id + ": bad split '" + recipe.split + "'");
    if (recipe.steps.empty())
        fail(ErrorKind::Parse, "recipe " + recipe.recipe_id + ": no steps");
    for (size_t i = 0; i < recipe.steps.size(); ++i) {
        const Step& s = recipe.steps[i];
        if (s.index != static_cast<int>(i) + 1)
            fail(ErrorKind::Referential,
                 "recipe " + recipe.recipe_id + ": step indices must be contiguous 1..N, got " +
                     std::to_string(s.index) + " at position " + std::to_string(i + 1));
        if (s.t_start && s.t_end && !(*s.t_start < *s.t_end))
            fail(ErrorKind::Parse, "recipe " + recipe.recipe_id + " step " +
                                       std::to_string(s.index) + ": t_start must be < t_end");
    }
}

namespace {

Recipe parse_recipe_line(const std::string& line, int line_no) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        fail(ErrorKind::Parse, "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    Recipe r;
    try {
        r.recipe_id = j.at("recipe_id").get<std::string>();
        r.split = j.at("split").get<std::string>();
        if (j.contains("label") && !j["label"].is_null())
            r.label = j["label"].get<std::string>();
        for (const auto& js : j.at("steps")) {
            Step s;
            s.index = js.at("idx").get<int>();
            s.text = js.at("text").get<std::string>();
            if (js.contains("t_start") && !js["t_start"].is_null())
                s.t_start = js["t_start"].get<double>();
            if (js.contains("t_end") && !js["t_end"].is_null())
                s.t_end = js["t_end"].get<double>();
            if (js.contains("image") && !js["image"].is_null())
                s.image_ref = js["image"].get<std::string>();
            r.steps.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::Parse, "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    return r;
}

}  // namespace

std::vector<Recipe> load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open manifest: " + path.string());
    std::filesystem::path base = path.has_parent_path() ? path.parent_path() : ".";

    std::vector<Recipe> recipes;
    std::set<std::string> seen;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        Recipe r = parse_recipe_line(line, line_no);
        r.base_dir = base;
        validate_recipe(r);
        if (!seen.insert(r.recipe_id).second)
            fail(ErrorKind::Integrity, "duplicate recipe_id: " + r.recipe_id);
        for (const Step& s : r.steps) {
            if (s.image_ref && !std::filesystem::exists(base / *s.image_ref))
                fail(ErrorKind::Referential, "recipe " + r.recipe_id + " step " +
                                                 std::to_string(s.index) +
                                                 ": image not found: " + *s.image_ref);
        }
        recipes.push_back(std::move(r));
    }
    std::sort(recipes.begin(), recipes.end(),
              [](const Recipe& a, const Recipe& b) { return a.recipe_id < b.recipe_id; });
    return recipes;
}

std::string manifest_line(const Recipe& recipe) {
    json j;
    j["recipe_id"] = recipe.recipe_id;
    j["split"] = recipe.split;
    if (recipe.label) j["label"] = *recipe.label;
    j["steps"] = json::array();
    for (const Step& s : recipe.steps) {
        json js;
        js["idx"] = s.index;
        js["text"] = s.text;
        js["t_start"] = s.t_start ? json(*s.t_start) : json(nullptr);
        js["t_end"] = s.t_end ? json(*s.t_end) : json(nullptr);
        js["image"] = s.image_ref ? json(*s.image_ref) : json(nullptr);
        j["steps"].push_back(std::move(js));
    }
    return j.dump();
}

void save_manifest(const std::vector<Recipe>& recipes, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write manifest: " + path.string());
    for (const Recipe& r : recipes) out << manifest_line(r) << "\n";
    if (!out) fail(ErrorKind::Io, "short write: " + path.string());
}

}  // namespace procdiff

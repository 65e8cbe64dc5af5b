#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <functional>

#include "procdiff/common.hpp"
#include "procdiff/data.hpp"
#include "procdiff/image.hpp"
#include "procdiff/scenario.hpp"

using namespace procdiff;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("procdiff_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
    std::ofstream out(path, std::ios::binary);
    for (const auto& l : lines) out << l << "\n";
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

Recipe toy_recipe(const std::string& id, int n, bool with_images = true) {
    Recipe r;
    r.recipe_id = id;
    r.split = "train";
    for (int i = 1; i <= n; ++i) {
        Step s;
        s.index = i;
        s.text = "step " + std::to_string(i) + " of " + id;
        if (with_images) s.image_ref = "img_" + std::to_string(i) + ".png";
        r.steps.push_back(s);
    }
    return r;
}

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::Io;
}

}  // namespace

TEST_CASE("manifest round-trip of a hand-written fixture") {
    auto dir = fresh_dir("manifest_rt");
    for (int i = 1; i <= 3; ++i)
        save_image(make_image(8, 8, static_cast<uint8_t>(40 * i), 0, 0),
                   dir / ("img_" + std::to_string(i) + ".png"));
    write_lines(dir / "manifest.jsonl",
                {R"({"recipe_id":"r001","split":"train","steps":[)"
                 R"({"idx":1,"text":"chop the onions","t_start":0.5,"t_end":4.0,"image":"img_1.png"},)"
                 R"({"idx":2,"text":"fry the onions","t_start":4.0,"t_end":9.5,"image":"img_2.png"},)"
                 R"({"idx":3,"text":"serve","t_start":null,"t_end":null,"image":"img_3.png"}]})"});

    auto recipes = load_manifest(dir / "manifest.jsonl");
    REQUIRE(recipes.size() == 1);
    CHECK(recipes[0].size() == 3);
    CHECK(recipes[0].steps[0].text == "chop the onions");
    CHECK(recipes[0].steps[2].t_start == std::nullopt);
    CHECK(*recipes[0].steps[1].image_ref == "img_2.png");

    // canonicalized manifests survive serialize(load(x)) byte-identically
    save_manifest(recipes, dir / "copy.jsonl");
    auto again = load_manifest(dir / "copy.jsonl");
    save_manifest(again, dir / "copy2.jsonl");
    CHECK(read_file(dir / "copy.jsonl") == read_file(dir / "copy2.jsonl"));
}

TEST_CASE("manifest error paths") {
    auto dir = fresh_dir("manifest_err");

    SUBCASE("step indices 1,3 break contiguity") {
        write_lines(dir / "m.jsonl",
                    {R"({"recipe_id":"a","split":"train","steps":[)"
                     R"({"idx":1,"text":"x"},{"idx":3,"text":"y"}]})"});
        CHECK(kind_of([&] { load_manifest(dir / "m.jsonl"); }) == ErrorKind::Referential);
    }
    SUBCASE("duplicate recipe_id") {
        std::string line = R"({"recipe_id":"a","split":"train","steps":[{"idx":1,"text":"x"}]})";
        write_lines(dir / "m.jsonl", {line, line});
        CHECK(kind_of([&] { load_manifest(dir / "m.jsonl"); }) == ErrorKind::Integrity);
    }
    SUBCASE("malformed record names the line") {
        write_lines(dir / "m.jsonl",
                    {R"({"recipe_id":"a","split":"train","steps":[{"idx":1,"text":"x"}]})",
                     R"(this is not json)"});
        try {
            load_manifest(dir / "m.jsonl");
            FAIL("expected parse error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Parse);
            CHECK(std::string(e.what()).find("line 2") != std::string::npos);
        }
    }
    SUBCASE("missing image file") {
        write_lines(dir / "m.jsonl",
                    {R"({"recipe_id":"a","split":"train","steps":)"
                     R"([{"idx":1,"text":"x","image":"nope.png"}]})"});
        CHECK(kind_of([&] { load_manifest(dir / "m.jsonl"); }) == ErrorKind::Referential);
    }
    SUBCASE("bad split") {
        write_lines(dir / "m.jsonl",
                    {R"({"recipe_id":"a","split":"test","steps":[{"idx":1,"text":"x"}]})"});
        CHECK(kind_of([&] { load_manifest(dir / "m.jsonl"); }) == ErrorKind::Parse);
    }
    SUBCASE("t_start >= t_end") {
        write_lines(dir / "m.jsonl",
                    {R"({"recipe_id":"a","split":"train","steps":)"
                     R"([{"idx":1,"text":"x","t_start":5.0,"t_end":5.0}]})"});
        CHECK(kind_of([&] { load_manifest(dir / "m.jsonl"); }) == ErrorKind::Parse);
    }
}

TEST_CASE("ordered multimodal placement is the prefix") {
    auto recipe = toy_recipe("r", 10);
    PromptScenario sc;
    sc.kind = ScenarioKind::Multimodal;
    sc.p = 0.3;
    sc.placement = Placement::Ordered;
    auto seq = make_prompt_sequence(recipe, sc);
    CHECK(seq.image_positions == std::vector<int>({1, 2, 3}));
    CHECK(seq.text_positions.size() == 7);
}

TEST_CASE("random placement is deterministic per seed") {
    auto recipe = toy_recipe("r", 10);
    PromptScenario sc;
    sc.kind = ScenarioKind::Multimodal;
    sc.p = 0.3;
    sc.placement = Placement::Random;
    sc.seed = 7;
    auto a = make_prompt_sequence(recipe, sc);
    auto b = make_prompt_sequence(recipe, sc);
    CHECK(a.image_positions == b.image_positions);
    sc.seed = 8;
    auto c = make_prompt_sequence(recipe, sc);
    CHECK(a.image_positions.size() == c.image_positions.size());
}

TEST_CASE("p = 0 degenerates to text_only") {
    auto recipe = toy_recipe("r", 5);
    PromptScenario mm;
    mm.kind = ScenarioKind::Multimodal;
    mm.p = 0.0;
    PromptScenario to;
    to.kind = ScenarioKind::TextOnly;
    auto a = make_prompt_sequence(recipe, mm);
    auto b = make_prompt_sequence(recipe, to);
    REQUIRE(a.size() == b.size());
    for (int i = 0; i < a.size(); ++i) {
        CHECK(a.entries[static_cast<size_t>(i)].modality == Modality::Text);
        CHECK(a.entries[static_cast<size_t>(i)].text == b.entries[static_cast<size_t>(i)].text);
    }
    CHECK(a.image_positions.empty());
}

TEST_CASE("scenario partition fuzz: |text| + |image| = N") {
    Rng rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        int n = 1 + static_cast<int>(rng.below(16));
        auto recipe = toy_recipe("fuzz" + std::to_string(trial), n);
        PromptScenario sc;
        sc.kind = ScenarioKind::Multimodal;
        sc.p = rng.uniform();
        sc.placement = (trial % 2) ? Placement::Random : Placement::Ordered;
        sc.seed = static_cast<uint64_t>(trial);
        sc.retain_text = false;
        auto seq = make_prompt_sequence(recipe, sc);
        CHECK(static_cast<int>(seq.text_positions.size() + seq.image_positions.size()) == n);
        if (!seq.image_positions.empty() && sc.placement == Placement::Ordered)
            CHECK(seq.image_positions.back() ==
                  static_cast<int>(seq.image_positions.size()));  // prefix property
        // positions partition 1..N
        std::vector<bool> hit(static_cast<size_t>(n), false);
        for (int p : seq.text_positions) hit[static_cast<size_t>(p - 1)] = true;
        for (int p : seq.image_positions) hit[static_cast<size_t>(p - 1)] = true;
        CHECK(std::all_of(hit.begin(), hit.end(), [](bool b) { return b; }));
    }
}

TEST_CASE("retain_text marks image positions text+image and keeps both lists") {
    auto recipe = toy_recipe("r", 6);
    PromptScenario sc;
    sc.kind = ScenarioKind::Multimodal;
    sc.p = 0.5;
    sc.retain_text = true;
    auto seq = make_prompt_sequence(recipe, sc);
    CHECK(seq.image_positions == std::vector<int>({1, 2, 3}));
    CHECK(seq.text_positions.size() == 6);  // every step still carries text
    CHECK(seq.entries[0].modality == Modality::TextImage);
    CHECK(seq.entries[5].modality == Modality::Text);
}

TEST_CASE("coverage error when images are unavailable") {
    auto recipe = toy_recipe("r", 4, /*with_images=*/false);
    PromptScenario sc;
    sc.kind = ScenarioKind::Multimodal;
    sc.p = 0.5;
    CHECK(kind_of([&] { make_prompt_sequence(recipe, sc); }) == ErrorKind::Coverage);

    PromptScenario ih;
    ih.kind = ScenarioKind::ImageHistory;
    CHECK(kind_of([&] { make_prompt_sequence(recipe, ih); }) == ErrorKind::Coverage);
}

TEST_CASE("image_history tags every entry as image with text payload") {
    auto recipe = toy_recipe("r", 4);
    PromptScenario sc;
    sc.kind = ScenarioKind::ImageHistory;
    auto seq = make_prompt_sequence(recipe, sc);
    REQUIRE(seq.size() == 4);
    for (const auto& e : seq.entries) {
        CHECK(e.modality == Modality::Image);
        CHECK_FALSE(e.text.empty());
        CHECK(e.image_ref.has_value());
    }
}

TEST_CASE("validation p sampler: range, determinism, mean") {
    CHECK(sample_validation_p(3, "a") == sample_validation_p(3, "a"));
    CHECK(sample_validation_p(3, "a") != sample_validation_p(4, "a"));
    CHECK(sample_validation_p(3, "a") != sample_validation_p(3, "b"));

    double sum = 0.0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        double p = sample_validation_p(static_cast<uint64_t>(i), "recipe");
        CHECK(p > 0.0);
        CHECK(p <= 0.5);
        sum += p;
    }
    double mean = sum / draws;  // uniform(0, 0.5] has mean 0.25
    CHECK(mean == doctest::Approx(0.25).epsilon(0.02));
    CHECK(std::fabs(mean - 0.25) < 0.005);
}

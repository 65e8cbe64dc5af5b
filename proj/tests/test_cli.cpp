#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "procdiff/common.hpp"
#include "procdiff/config.hpp"
#include "procdiff/data.hpp"
#include "procdiff/image.hpp"

using namespace procdiff;
namespace fs = std::filesystem;

namespace {

const char* kCli = PROCDIFF_CLI_PATH;

struct CliResult {
    int code;
    std::string out;
};

CliResult run_cli(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    fs::path log = fs::temp_directory_path() / ("procdiff_cli_" + std::to_string(counter++) + ".log");
    std::string cmd = env + " " + std::string(kCli) + " " + args + " >" + log.string() + " 2>&1";
    int status = std::system(cmd.c_str());
    std::ifstream in(log);
    std::string out(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
    int code = -1;
    if (WIFEXITED(status)) code = WEXITSTATUS(status);
    return {code, out};
}

// One shared fixture corpus; preprocess feeds the later commands.
struct Corpus {
    fs::path root, out, model_dir, gen_dir, config_file;
    std::string manifest;

    Corpus() {
        root = fs::temp_directory_path() / "procdiff_cli_fixture";
        fs::remove_all(root);
        fs::create_directories(root / "frames");

        nlohmann::json db;
        Rng rng(17);
        for (int v = 0; v < 3; ++v) {
            std::string id = "dish" + std::to_string(v);
            nlohmann::json entry;
            entry["subset"] = v == 2 ? "validation" : "training";
            entry["recipe_type"] = 100 + v;
            entry["annotations"] = nlohmann::json::array();
            fs::path fdir = root / "frames" / id;
            fs::create_directories(fdir);
            for (int s = 0; s < 3; ++s) {
                nlohmann::json ann;
                ann["segment"] = {2.0 * s, 2.0 * s + 2.0};
                ann["sentence"] = "recipe " + std::to_string(v) + " move " + std::to_string(s) +
                                  " stir mix pour";
                entry["annotations"].push_back(ann);
            }
            for (int f = 0; f < 6; ++f) {
                char name[32];
                std::snprintf(name, sizeof(name), "%05.2f.ppm", f * 1.0);
                Image8 img = make_image(48, 48, static_cast<uint8_t>(rng.below(256)),
                                        static_cast<uint8_t>(rng.below(256)),
                                        static_cast<uint8_t>(rng.below(256)));
                save_image(img, fdir / name);
            }
            db[id] = entry;
        }
        nlohmann::json ann_root;
        ann_root["database"] = db;
        std::ofstream(root / "annotations.json") << ann_root.dump();

        // small-model config for fast end-to-end runs
        nlohmann::json cfg;
        cfg["denoiser.image_size"] = 8;
        cfg["denoiser.channels"] = 8;
        cfg["denoiser.time_dim"] = 16;
        cfg["denoiser.groups"] = 4;
        cfg["memory.dim"] = 16;
        cfg["memory.heads"] = 2;
        cfg["encoder.dim"] = 16;
        cfg["schedule.timesteps"] = 10;
        cfg["train.lr"] = 1e-3;
        config_file = root / "small.json";
        std::ofstream(config_file) << cfg.dump();

        out = root / "pre";
        model_dir = root / "model";
        gen_dir = root / "gendir";
        manifest = (out / "manifest.jsonl").string();
    }
};

Corpus& corpus() {
    static Corpus c;
    return c;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
}

}  // namespace

TEST_CASE("cli preprocess builds a deterministic manifest") {
    auto& c = corpus();
    auto r = run_cli("preprocess --annotations " + (c.root / "annotations.json").string() +
                     " --frames-root " + (c.root / "frames").string() + " --out " +
                     c.out.string() + " --side 32");
    CAPTURE(r.out);
    REQUIRE(r.code == 0);
    REQUIRE(fs::exists(c.manifest));
    CHECK(fs::exists(c.out / "run_config.json"));
    CHECK(fs::exists(c.out / "skipped.jsonl"));

    auto recipes = load_manifest(c.manifest);
    REQUIRE(recipes.size() == 3);
    for (const auto& rec : recipes) {
        REQUIRE(rec.size() == 3);
        for (const auto& s : rec.steps) {
            Image8 img = load_image(rec.image_path(s));
            CHECK(img.width == 32);
        }
    }

    // idempotent rerun
    std::string before = read_file(c.manifest);
    auto r2 = run_cli("preprocess --annotations " + (c.root / "annotations.json").string() +
                      " --frames-root " + (c.root / "frames").string() + " --out " +
                      c.out.string() + " --side 32");
    REQUIRE(r2.code == 0);
    CHECK(read_file(c.manifest) == before);

    // missing annotation file names the path and exits 1
    auto bad = run_cli("preprocess --annotations /nonexistent/ann.json --frames-root " +
                       (c.root / "frames").string() + " --out " + (c.root / "x").string());
    CHECK(bad.code == 1);
    CHECK(bad.out.find("/nonexistent/ann.json") != std::string::npos);
}

TEST_CASE("cli train: descent logging, mismatch guard, resume") {
    auto& c = corpus();
    REQUIRE(fs::exists(c.manifest));  // ordering: preprocess ran first

    auto r = run_cli("train --manifest " + c.manifest + " --out " + c.model_dir.string() +
                     " --config " + c.config_file.string() +
                     " --scenario text_only --memory tmn --steps 8 --seed 3");
    CAPTURE(r.out);
    REQUIRE(r.code == 0);
    REQUIRE(fs::exists(c.model_dir / "model.ckpt"));
    REQUIRE(fs::exists(c.model_dir / "train_log.jsonl"));
    CHECK(fs::exists(c.model_dir / "run_config.json"));

    // log has one line per step with finite losses
    std::ifstream log(c.model_dir / "train_log.jsonl");
    std::string line;
    int lines = 0;
    double first_loss = -1, last_loss = -1;
    while (std::getline(log, line)) {
        auto j = nlohmann::json::parse(line);
        if (lines == 0) first_loss = j["loss"].get<double>();
        last_loss = j["loss"].get<double>();
        ++lines;
    }
    CHECK(lines == 8);
    CHECK(std::isfinite(first_loss));
    CHECK(std::isfinite(last_loss));

    // scenario/memory mismatch exits 4
    auto mismatch = run_cli("train --manifest " + c.manifest + " --out " +
                            (c.root / "bad").string() + " --config " + c.config_file.string() +
                            " --scenario image_history --memory tmn --steps 2");
    CHECK(mismatch.code == 4);

    // resume continues the step counter
    auto resumed = run_cli("train --manifest " + c.manifest + " --out " +
                           (c.root / "resumed").string() + " --config " +
                           c.config_file.string() +
                           " --scenario text_only --memory tmn --steps 4 --seed 3 --resume " +
                           (c.model_dir / "model.ckpt").string());
    CAPTURE(resumed.out);
    REQUIRE(resumed.code == 0);
    std::ifstream log2(c.root / "resumed" / "train_log.jsonl");
    int64_t first_step = -1;
    if (std::getline(log2, line)) first_step = nlohmann::json::parse(line)["step"].get<int64_t>();
    CHECK(first_step == 9);  // counter picks up after the 8 completed steps
}

TEST_CASE("cli generate: files, determinism, edits") {
    auto& c = corpus();
    std::string ckpt = (c.model_dir / "model.ckpt").string();
    REQUIRE(fs::exists(ckpt));

    auto r = run_cli("generate --checkpoint " + ckpt + " --manifest " + c.manifest + " --out " +
                     c.gen_dir.string() + " --config " + c.config_file.string() +
                     " --scenario text_only --seed 11 --stride 2");
    CAPTURE(r.out);
    REQUIRE(r.code == 0);
    for (int v = 0; v < 3; ++v)
        for (int s = 1; s <= 3; ++s)
            CHECK(fs::exists(c.gen_dir / "gen" / ("dish" + std::to_string(v)) /
                             (std::to_string(s) + ".png")));

    std::string bytes = read_file(c.gen_dir / "gen" / "dish0" / "2.png");
    auto r2 = run_cli("generate --checkpoint " + ckpt + " --manifest " + c.manifest +
                      " --out " + (c.root / "gen2").string() + " --config " +
                      c.config_file.string() + " --scenario text_only --seed 11 --stride 2");
    REQUIRE(r2.code == 0);
    CHECK(read_file(c.root / "gen2" / "gen" / "dish0" / "2.png") == bytes);

    // a different seed changes the bytes
    auto r3 = run_cli("generate --checkpoint " + ckpt + " --manifest " + c.manifest +
                      " --out " + (c.root / "gen3").string() + " --config " +
                      c.config_file.string() + " --scenario text_only --seed 12 --stride 2");
    REQUIRE(r3.code == 0);
    CHECK(read_file(c.root / "gen3" / "gen" / "dish0" / "2.png") != bytes);

    // edit wiring: an edit on step 2 regenerates the recipe
    auto r4 = run_cli("generate --checkpoint " + ckpt + " --manifest " + c.manifest +
                      " --out " + (c.root / "gen4").string() + " --config " +
                      c.config_file.string() +
                      " --scenario text_only --seed 11 --stride 2 --recipe dish0 "
                      "--edit \"2:stir->whisk\"");
    CAPTURE(r4.out);
    REQUIRE(r4.code == 0);
    CHECK(read_file(c.root / "gen4" / "gen" / "dish0" / "1.png") ==
          read_file(c.gen_dir / "gen" / "dish0" / "1.png"));  // before the edit: unchanged

    // absent find-text exits 4
    auto r5 = run_cli("generate --checkpoint " + ckpt + " --manifest " + c.manifest +
                      " --out " + (c.root / "gen5").string() + " --config " +
                      c.config_file.string() +
                      " --scenario text_only --recipe dish0 --edit \"2:braise->whisk\"");
    CHECK(r5.code == 4);
}

TEST_CASE("cli evaluate: ground-truth tree scores zero fid; incomplete tree exits 5") {
    auto& c = corpus();
    auto recipes = load_manifest(c.manifest);

    // gen tree = the ground-truth keyframes themselves
    fs::path mirror = c.root / "mirror";
    for (const auto& r : recipes)
        for (const auto& s : r.steps) {
            fs::create_directories(mirror / r.recipe_id);
            fs::copy_file(r.image_path(s), mirror / r.recipe_id / (std::to_string(s.index) + ".png"),
                          fs::copy_options::overwrite_existing);
        }
    fs::path report = c.root / "report.json";
    auto r = run_cli("evaluate --manifest " + c.manifest + " --gen " + mirror.string() +
                     " --out " + report.string() + " --config " + c.config_file.string() +
                     " --by-history-length --per-recipe");
    CAPTURE(r.out);
    REQUIRE(r.code == 0);
    auto j = nlohmann::json::parse(read_file(report));
    REQUIRE(j.contains("train"));
    REQUIRE(j.contains("validation"));
    CHECK(j["train"]["fid"].get<double>() <= 1e-6);
    CHECK(j["train"]["avg_pcon"].get<double>() > 0.0);
    CHECK(j["train"]["recipes"].size() == 2);
    CHECK(j["train"]["by_history_length"].size() == 3);  // histories 0, 1, 2

    // evaluating the sampled tree works and differs from ground truth
    auto rg = run_cli("evaluate --manifest " + c.manifest + " --gen " + c.gen_dir.string() +
                      " --out " + (c.root / "report_gen.json").string() + " --config " +
                      c.config_file.string());
    CAPTURE(rg.out);
    REQUIRE(rg.code == 0);
    auto jg = nlohmann::json::parse(read_file(c.root / "report_gen.json"));
    CHECK(jg["train"]["fid"].get<double>() > 1e-3);

    // missing one generated image exits 5
    fs::remove(mirror / "dish0" / "2.png");
    auto bad = run_cli("evaluate --manifest " + c.manifest + " --gen " + mirror.string());
    CHECK(bad.code == 5);
}

TEST_CASE("cli simulate-scenario and env-var precedence") {
    auto& c = corpus();
    fs::path seqs = c.root / "seqs.jsonl";
    auto r = run_cli("simulate-scenario --manifest " + c.manifest +
                     " --scenario multimodal --p 0.4 --placement ordered --out " + seqs.string());
    REQUIRE(r.code == 0);
    std::ifstream in(seqs);
    std::string line;
    int count = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j["kind"] == "multimodal");
        CHECK(j["image_positions"].size() == 2);  // ceil(0.4 * 3)
        ++count;
    }
    CHECK(count == 3);

    // env beats the flag: PROCDIFF_SCENARIO_P overrides --p
    auto r2 = run_cli("simulate-scenario --manifest " + c.manifest +
                          " --scenario multimodal --p 0.4 --out " + seqs.string(),
                      "PROCDIFF_SCENARIO_P=1.0");
    REQUIRE(r2.code == 0);
    std::ifstream in2(seqs);
    std::getline(in2, line);
    CHECK(nlohmann::json::parse(line)["image_positions"].size() == 3);
}

TEST_CASE("cli manipulate regenerates one edited recipe") {
    auto& c = corpus();
    std::string ckpt = (c.model_dir / "model.ckpt").string();
    auto r = run_cli("manipulate --checkpoint " + ckpt + " --manifest " + c.manifest +
                     " --recipe dish1 --edit \"1:stir->fold\" --out " +
                     (c.root / "manip").string() + " --config " + c.config_file.string() +
                     " --scenario text_only --seed 4 --stride 2");
    CAPTURE(r.out);
    REQUIRE(r.code == 0);
    for (int s = 1; s <= 3; ++s)
        CHECK(fs::exists(c.root / "manip" / "gen" / "dish1" / (std::to_string(s) + ".png")));
}

TEST_CASE("cli train-baseline writes a control-branch checkpoint") {
    auto& c = corpus();
    auto r = run_cli("train-baseline --manifest " + c.manifest + " --out " +
                     (c.root / "baseline").string() + " --config " + c.config_file.string() +
                     " --baseline controlnet_text --steps 2 --lr 1e-3 --seed 5");
    CAPTURE(r.out);
    REQUIRE(r.code == 0);
    CHECK(fs::exists(c.root / "baseline" / "baseline.ckpt"));

    auto r2 = run_cli("train-baseline --manifest " + c.manifest + " --out " +
                      (c.root / "baseline_img").string() + " --config " +
                      c.config_file.string() +
                      " --baseline controlnet_image --tp B --steps 2 --lr 1e-3 --seed 5");
    CAPTURE(r2.out);
    REQUIRE(r2.code == 0);
    CHECK(fs::exists(c.root / "baseline_img" / "baseline.ckpt"));
}

#include "procdiff/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <future>

#include <json.hpp>

#include "procdiff/common.hpp"

namespace procdiff {

namespace {

class DirectoryFrameSource : public FrameSource {
public:
    explicit DirectoryFrameSource(const std::filesystem::path& dir) {
        if (!std::filesystem::is_directory(dir))
            fail(ErrorKind::Io, "frame directory not found: " + dir.string());
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            if (!entry.is_regular_file()) continue;
            auto ext = entry.path().extension();
            if (ext != ".png" && ext != ".ppm") continue;
            std::string stem = entry.path().stem().string();
            char* end = nullptr;
            double ts = std::strtod(stem.c_str(), &end);
            if (end == stem.c_str() || *end != '\0') continue;  // not a timestamp name
            frames_.emplace_back(ts, entry.path());
        }
        std::sort(frames_.begin(), frames_.end());
        if (frames_.empty())
            fail(ErrorKind::Io, "no frames in directory: " + dir.string());
    }

    bool next(double& timestamp, Image8& frame) override {
        if (pos_ >= frames_.size()) return false;
        timestamp = frames_[pos_].first;
        frame = load_image(frames_[pos_].second);  // throws Io on undecodable
        ++pos_;
        return true;
    }

    void reset() override { pos_ = 0; }

private:
    std::vector<std::pair<double, std::filesystem::path>> frames_;
    size_t pos_ = 0;
};

}  // namespace

std::shared_ptr<FrameSource> make_directory_frame_source(const std::filesystem::path& dir) {
    return std::make_shared<DirectoryFrameSource>(dir);
}

KeyframeRecord select_keyframe(FrameSource& source, const Step& step,
                               const EmbeddingProvider& encoder, double sample_rate,
                               const std::string& recipe_id) {
    if (!step.t_start || !step.t_end)
        fail(ErrorKind::Validation, "recipe " + recipe_id + " step " +
                                        std::to_string(step.index) + ": no timestamps");
    if (sample_rate <= 0.0) fail(ErrorKind::Validation, "sample rate must be positive");
    double t0 = *step.t_start, t1 = *step.t_end;
    double slot = 1.0 / sample_rate;

    auto text_emb = encoder.encode_text(step.text);

    source.reset();
    KeyframeRecord best;
    bool found = false;
    int next_slot = 0;  // candidate k: slot window [t0 + k*slot, t0 + (k+1)*slot)
    double ts;
    Image8 frame;
    while (source.next(ts, frame)) {
        if (ts < t0 || ts >= t1) continue;
        int k = static_cast<int>((ts - t0) / slot);
        if (k < next_slot) continue;  // one candidate per slot, the earliest
        next_slot = k + 1;
        double score = clip_score(encoder.encode_image(frame), text_emb);
        if (!found || score > best.similarity) {
            best.step_index = step.index;
            best.timestamp = ts;
            best.similarity = score;
            best.frame = frame;
            found = true;
        }
    }
    if (!found)
        fail(ErrorKind::Validation, "recipe " + recipe_id + " step " +
                                        std::to_string(step.index) +
                                        ": no frame inside [" + std::to_string(t0) + ", " +
                                        std::to_string(t1) + ")");
    return best;
}

Image8 resize_and_store(const Image8& image, const std::filesystem::path& out_path, int side) {
    if (image.width <= 0 || image.height <= 0)
        fail(ErrorKind::Validation, "cannot store an empty image");
    Image8 out = crop_and_resize_square(image, side);
    std::filesystem::create_directories(out_path.parent_path());
    save_image(out, out_path);
    return out;
}

namespace {

struct JobOutcome {
    Recipe recipe;
    bool ok = false;
    std::string reason;
};

JobOutcome process_video(VideoJob& job, const EmbeddingProvider& encoder,
                         const PipelineConfig& config, const std::filesystem::path& out_dir) {
    JobOutcome outcome;
    outcome.recipe = job.recipe;
    if (!job.source) {
        outcome.reason = "video unavailable: no frame source";
        return outcome;
    }
    try {
        for (Step& step : outcome.recipe.steps) {
            auto record = select_keyframe(*job.source, step, encoder, config.sample_fps,
                                          outcome.recipe.recipe_id);
            std::filesystem::path rel = std::filesystem::path("images") /
                                        outcome.recipe.recipe_id /
                                        (std::to_string(step.index) + ".png");
            resize_and_store(record.frame, out_dir / rel, config.image_side);
            step.image_ref = rel.generic_string();
        }
        outcome.ok = true;
    } catch (const std::exception& e) {
        outcome.ok = false;
        outcome.reason = e.what();
    }
    return outcome;
}

}  // namespace

PipelineResult build_manifest(std::vector<VideoJob> jobs, const EmbeddingProvider& encoder,
                              const PipelineConfig& config,
                              const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<JobOutcome> outcomes(jobs.size());

    int workers = std::max(1, config.jobs);
    if (workers == 1) {
        for (size_t i = 0; i < jobs.size(); ++i)
            outcomes[i] = process_video(jobs[i], encoder, config, out_dir);
    } else {
        std::vector<std::future<void>> futures;
        std::atomic<size_t> cursor{0};
        for (int w = 0; w < workers; ++w)
            futures.push_back(std::async(std::launch::async, [&] {
                for (size_t i = cursor.fetch_add(1); i < jobs.size(); i = cursor.fetch_add(1))
                    outcomes[i] = process_video(jobs[i], encoder, config, out_dir);
            }));
        for (auto& f : futures) f.get();
    }

    PipelineResult result;
    std::vector<Recipe> kept;
    for (auto& outcome : outcomes) {
        if (outcome.ok)
            kept.push_back(std::move(outcome.recipe));
        else
            result.skipped.push_back({outcome.recipe.recipe_id, outcome.reason});
    }
    std::sort(kept.begin(), kept.end(),
              [](const Recipe& a, const Recipe& b) { return a.recipe_id < b.recipe_id; });
    std::sort(result.skipped.begin(), result.skipped.end(),
              [](const SkipEntry& a, const SkipEntry& b) { return a.recipe_id < b.recipe_id; });

    result.skip_log_path = out_dir / "skipped.jsonl";
    {
        std::ofstream log(result.skip_log_path, std::ios::binary);
        for (const auto& s : result.skipped) {
            nlohmann::ordered_json j;
            j["recipe_id"] = s.recipe_id;
            j["reason"] = s.reason;
            log << j.dump() << "\n";
        }
    }
    if (kept.empty())
        fail(ErrorKind::EmptyCorpus, "no recipe survived preprocessing (" +
                                         std::to_string(result.skipped.size()) + " skipped)");

    result.manifest_path = out_dir / "manifest.jsonl";
    save_manifest(kept, result.manifest_path);
    result.recipes_written = static_cast<int>(kept.size());
    return result;
}

std::vector<Recipe> parse_video_annotations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open annotations: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, "annotations " + path.string() + ": " + e.what());
    }
    if (!j.contains("database"))
        fail(ErrorKind::Parse, "annotations " + path.string() + ": missing 'database'");

    std::vector<Recipe> recipes;
    const nlohmann::json db = j["database"];
    for (auto& [id, entry] : db.items()) {
        Recipe r;
        r.recipe_id = id;
        std::string subset = entry.value("subset", "training");
        r.split = subset == "validation" ? "validation" : "train";
        if (entry.contains("recipe_type"))
            r.label = entry["recipe_type"].is_string()
                          ? entry["recipe_type"].get<std::string>()
                          : entry["recipe_type"].dump();
        int idx = 0;
        for (const auto& ann : entry.value("annotations", nlohmann::json::array())) {
            Step s;
            s.index = ++idx;
            s.text = ann.at("sentence").get<std::string>();
            auto segment = ann.at("segment");
            s.t_start = segment.at(0).get<double>();
            s.t_end = segment.at(1).get<double>();
            r.steps.push_back(std::move(s));
        }
        if (!r.steps.empty()) recipes.push_back(std::move(r));
    }
    std::sort(recipes.begin(), recipes.end(),
              [](const Recipe& a, const Recipe& b) { return a.recipe_id < b.recipe_id; });
    return recipes;
}

}  // namespace procdiff

#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "procdiff/data.hpp"
#include "procdiff/encoder.hpp"
#include "procdiff/image.hpp"

namespace procdiff {

// Pull-style frame iterator for one video. Timestamps are non-decreasing and
// every yielded frame decodes; implementations may wrap an external decoder
// or a directory of pre-extracted frames.
class FrameSource {
public:
    virtual ~FrameSource() = default;
    virtual bool next(double& timestamp, Image8& frame) = 0;
    virtual void reset() = 0;
};

// Frames stored as <seconds>.png / <seconds>.ppm inside one directory.
std::shared_ptr<FrameSource> make_directory_frame_source(const std::filesystem::path& dir);

struct KeyframeRecord {
    int step_index = 0;
    double timestamp = 0.0;
    double similarity = 0.0;
    std::filesystem::path image_path;  // filled once the keyframe is stored
    Image8 frame;                      // the chosen source frame, pre-resize
};

// Scores one candidate frame per 1/sample_rate slot inside [t_start, t_end)
// against the step text and returns the argmax; ties go to the earliest
// timestamp. Similarity is computed on the raw decoded frame.
KeyframeRecord select_keyframe(FrameSource& source, const Step& step,
                               const EmbeddingProvider& encoder, double sample_rate,
                               const std::string& recipe_id = "");

// Center-crop to square, bilinear resize to side x side, store; returns the
// stored pixels.
Image8 resize_and_store(const Image8& image, const std::filesystem::path& out_path,
                        int side = 256);

struct VideoJob {
    Recipe recipe;  // step texts and timestamps; image refs are filled here
    std::shared_ptr<FrameSource> source;
};

struct PipelineConfig {
    double sample_fps = 1.0;
    int image_side = 256;
    int jobs = 1;
};

struct SkipEntry {
    std::string recipe_id;
    std::string reason;
};

struct PipelineResult {
    std::filesystem::path manifest_path;
    std::filesystem::path skip_log_path;
    int recipes_written = 0;
    std::vector<SkipEntry> skipped;
};

// Runs keyframe selection and storage for every job, skipping (and logging)
// recipes whose videos yield no usable frames. Emits manifest.jsonl,
// images/<recipe_id>/<step_idx>.png and skipped.jsonl under out_dir.
PipelineResult build_manifest(std::vector<VideoJob> jobs, const EmbeddingProvider& encoder,
                              const PipelineConfig& config,
                              const std::filesystem::path& out_dir);

// Source annotation format: {"database": {id: {"subset": ..., "recipe_type":
// ..., "annotations": [{"segment": [s, e], "sentence": ...}]}}}.
std::vector<Recipe> parse_video_annotations(const std::filesystem::path& path);

}  // namespace procdiff

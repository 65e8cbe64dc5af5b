#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "procdiff/encoder.hpp"
#include "procdiff/image.hpp"

namespace procdiff {

// Per-recipe procedure consistency: P_i weights each image-text clip score
// by the normalized similarity of the corresponding texts.
struct ProcedureConsistency {
    std::vector<double> p_values;  // P_i
    double p = 0.0;                // mean of P_i
    int uniform_fallback_rows = 0; // rows where all text-text scores were zero
};

ProcedureConsistency procedure_consistency(const std::vector<std::string>& step_texts,
                                           const std::vector<Image8>& gen_images,
                                           const EmbeddingProvider& encoder);

struct RecipeEval {
    std::string recipe_id;
    std::vector<std::string> texts;
    std::vector<Image8> gen_images;
    std::vector<Image8> real_images;  // optional, used by distribution metrics
};

struct ConsistencyReport {
    struct Entry {
        std::string recipe_id;
        double p = 0.0;
        std::vector<double> p_values;
    };
    std::vector<Entry> recipes;
    double avg_pcon = 0.0;
    int evaluated = 0;
    int excluded = 0;
    int uniform_fallback_rows = 0;
    std::string encoder_name;

    nlohmann::json to_json(bool per_recipe_detail = false) const;
};

// Unweighted mean of per-recipe P; recipes with fewer than two steps or an
// incomplete image set are excluded and counted.
ConsistencyReport avg_pcon(const std::vector<RecipeEval>& recipes,
                           const EmbeddingProvider& encoder);

// Streaming mean/covariance accumulator (Welford co-moments, population
// normalization so duplicating a set leaves the statistics unchanged).
class FeatureStats {
public:
    FeatureStats() = default;
    explicit FeatureStats(int dim);
    FeatureStats(Eigen::VectorXd mean, Eigen::MatrixXd covariance, int64_t count);

    void update(const Eigen::VectorXd& x);
    int dim() const { return static_cast<int>(mean_.size()); }
    int64_t count() const { return count_; }
    const Eigen::VectorXd& mean() const { return mean_; }
    Eigen::MatrixXd covariance() const;

private:
    int64_t count_ = 0;
    Eigen::VectorXd mean_;
    Eigen::MatrixXd m2_;
    bool fixed_cov_ = false;
    Eigen::MatrixXd cov_;
};

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), the matrix root taken on
// the symmetrized product with a small diagonal jitter retry.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

using FeatureExtractor = std::function<std::vector<double>(const Image8&)>;

// backend "toy" needs no weights; "inception" expects a feature table
// (precomputed activations) at weight_path.
FeatureExtractor make_feature_extractor(const std::string& backend,
                                        const std::string& weight_path = "",
                                        uint64_t seed = 0);

struct FidOptions {
    double max_skip_fraction = 0.01;
};

double fid_over_sets(const std::vector<Image8>& real, const std::vector<Image8>& gen,
                     const FeatureExtractor& extractor, const FidOptions& options = {});

// Fig-style grouping of step metrics by history length: buckets "0".."8"
// plus "more than 8".
struct HistoryBucket {
    std::string label;
    int count = 0;
    double avg_pcon = 0.0;
    double fid = -1.0;  // -1 when a bucket lacks enough images
};

std::vector<HistoryBucket> evaluate_by_history_length(const std::vector<RecipeEval>& recipes,
                                                      const EmbeddingProvider& encoder,
                                                      const FeatureExtractor& extractor);

}  // namespace procdiff

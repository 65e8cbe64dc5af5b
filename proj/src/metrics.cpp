#include "procdiff/metrics.hpp"

#include <cmath>
#include <map>

#include <Eigen/Dense>

#include "procdiff/common.hpp"

namespace procdiff {

ProcedureConsistency procedure_consistency(const std::vector<std::string>& step_texts,
                                           const std::vector<Image8>& gen_images,
                                           const EmbeddingProvider& encoder) {
    size_t n = step_texts.size();
    if (n < 2)
        fail(ErrorKind::Validation,
             "procedure consistency is undefined for recipes with fewer than two steps");
    if (gen_images.size() != n)
        fail(ErrorKind::Validation, "procedure consistency: texts and images misaligned");

    std::vector<std::vector<double>> text_embs(n), image_embs(n);
    for (size_t i = 0; i < n; ++i) {
        text_embs[i] = encoder.encode_text(step_texts[i]);
        image_embs[i] = encoder.encode_image(gen_images[i]);
    }

    ProcedureConsistency out;
    out.p_values.resize(n);
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        std::vector<double> weights(n, 0.0);
        double total = 0.0;
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            weights[j] = clip_score(text_embs[i], text_embs[j]);
            total += weights[j];
        }
        if (total <= 0.0) {
            // all text-text scores clamped to zero: fall back to uniform
            ++out.uniform_fallback_rows;
            for (size_t j = 0; j < n; ++j) weights[j] = (j == i) ? 0.0 : 1.0;
            total = static_cast<double>(n - 1);
        }
        double p_i = 0.0;
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            p_i += weights[j] / total * clip_score(image_embs[i], text_embs[j]);
        }
        out.p_values[i] = p_i;
        acc += p_i;
    }
    out.p = acc / static_cast<double>(n);
    return out;
}

nlohmann::json ConsistencyReport::to_json(bool per_recipe_detail) const {
    nlohmann::json j;
    j["avg_pcon"] = avg_pcon;
    j["evaluated"] = evaluated;
    j["excluded"] = excluded;
    j["uniform_fallback_rows"] = uniform_fallback_rows;
    j["encoder"] = encoder_name;
    if (per_recipe_detail) {
        j["recipes"] = nlohmann::json::array();
        for (const auto& r : recipes) {
            nlohmann::json e;
            e["recipe_id"] = r.recipe_id;
            e["p"] = r.p;
            e["p_values"] = r.p_values;
            j["recipes"].push_back(std::move(e));
        }
    }
    return j;
}

ConsistencyReport avg_pcon(const std::vector<RecipeEval>& recipes,
                           const EmbeddingProvider& encoder) {
    ConsistencyReport report;
    report.encoder_name = encoder.name();
    double acc = 0.0;
    for (const auto& r : recipes) {
        if (r.texts.size() < 2 || r.gen_images.size() != r.texts.size()) {
            ++report.excluded;
            continue;
        }
        auto pc = procedure_consistency(r.texts, r.gen_images, encoder);
        report.recipes.push_back({r.recipe_id, pc.p, pc.p_values});
        report.uniform_fallback_rows += pc.uniform_fallback_rows;
        acc += pc.p;
        ++report.evaluated;
    }
    if (report.evaluated == 0)
        fail(ErrorKind::EmptyCorpus, "no recipe was eligible for the consistency metric");
    report.avg_pcon = acc / report.evaluated;
    return report;
}

FeatureStats::FeatureStats(int dim)
    : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::MatrixXd::Zero(dim, dim)) {}

FeatureStats::FeatureStats(Eigen::VectorXd mean, Eigen::MatrixXd covariance, int64_t count)
    : count_(count), mean_(std::move(mean)), fixed_cov_(true), cov_(std::move(covariance)) {
    if (cov_.rows() != cov_.cols() || cov_.rows() != mean_.size())
        fail(ErrorKind::Validation, "feature stats: covariance shape mismatch");
    if (!cov_.isApprox(cov_.transpose(), 1e-8))
        fail(ErrorKind::Validation, "feature stats: covariance must be symmetric");
    if (count_ < 2) fail(ErrorKind::Validation, "feature stats need at least 2 samples");
}

void FeatureStats::update(const Eigen::VectorXd& x) {
    if (fixed_cov_) fail(ErrorKind::Validation, "cannot update fixed statistics");
    if (x.size() != mean_.size())
        fail(ErrorKind::Validation, "feature stats: dimension mismatch");
    ++count_;
    Eigen::VectorXd delta = x - mean_;
    mean_ += delta / static_cast<double>(count_);
    Eigen::VectorXd delta2 = x - mean_;
    m2_ += delta * delta2.transpose();
}

Eigen::MatrixXd FeatureStats::covariance() const {
    if (fixed_cov_) return cov_;
    if (count_ < 2) fail(ErrorKind::Validation, "feature stats need at least 2 samples");
    Eigen::MatrixXd cov = m2_ / static_cast<double>(count_);
    return (cov + cov.transpose()) / 2.0;
}

namespace {

// trace of (A B)^(1/2) via sqrt(A)^T B sqrt(A), which is symmetric PSD
double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    auto attempt = [](const Eigen::MatrixXd& sa, const Eigen::MatrixXd& sb) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(sa);
        Eigen::MatrixXd sqrt_a =
            es_a.eigenvectors() *
            es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
            es_a.eigenvectors().transpose();
        Eigen::MatrixXd m = sqrt_a * sb * sqrt_a;
        m = (m + m.transpose()) / 2.0;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m(m);
        return es_m.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    };
    double t = attempt(a, b);
    if (std::isfinite(t)) return t;
    Eigen::MatrixXd jitter = 1e-10 * Eigen::MatrixXd::Identity(a.rows(), a.cols());
    t = attempt(a + jitter, b + jitter);
    if (!std::isfinite(t)) fail(ErrorKind::Numeric, "matrix square root failed to stabilize");
    return t;
}

}  // namespace

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.dim() != b.dim()) fail(ErrorKind::Validation, "frechet: feature dims differ");
    Eigen::VectorXd dmu = a.mean() - b.mean();
    Eigen::MatrixXd ca = a.covariance();
    Eigen::MatrixXd cb = b.covariance();
    if (!dmu.allFinite() || !ca.allFinite() || !cb.allFinite())
        fail(ErrorKind::Numeric, "frechet: non-finite inputs");
    double d2 = dmu.squaredNorm() + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(ca, cb);
    if (d2 < -1e-6) fail(ErrorKind::Numeric, "frechet distance came out negative");
    return std::max(0.0, d2);
}

FeatureExtractor make_feature_extractor(const std::string& backend,
                                        const std::string& weight_path, uint64_t seed) {
    if (backend == "toy") {
        auto enc = std::make_shared<ToyEncoder>(seed);
        return [enc](const Image8& img) { return enc->encode_image(img); };
    }
    if (backend == "inception") {
        if (weight_path.empty())
            fail(ErrorKind::Config,
                 "the inception extractor reads precomputed activations; set "
                 "metrics.fid.weights to a feature table or use extractor 'toy'");
        auto enc = std::make_shared<TableEncoder>(weight_path);
        return [enc](const Image8& img) { return enc->encode_image(img); };
    }
    fail(ErrorKind::Config, "unknown feature extractor: " + backend);
}

double fid_over_sets(const std::vector<Image8>& real, const std::vector<Image8>& gen,
                     const FeatureExtractor& extractor, const FidOptions& options) {
    if (real.size() < 2 || gen.size() < 2)
        fail(ErrorKind::Validation, "fid needs at least two images per set");

    size_t total = real.size() + gen.size();
    size_t skipped = 0;
    FeatureStats sa, sb;
    bool init = false;
    auto feed = [&](const std::vector<Image8>& images, FeatureStats& stats) {
        for (const auto& img : images) {
            std::vector<double> f;
            try {
                f = extractor(img);
            } catch (const std::exception&) {
                ++skipped;
                continue;
            }
            if (!init) {
                sa = FeatureStats(static_cast<int>(f.size()));
                sb = FeatureStats(static_cast<int>(f.size()));
                init = true;
            }
            stats.update(Eigen::Map<const Eigen::VectorXd>(f.data(),
                                                           static_cast<Eigen::Index>(f.size())));
        }
    };
    feed(real, sa);
    feed(gen, sb);
    if (static_cast<double>(skipped) > options.max_skip_fraction * static_cast<double>(total))
        fail(ErrorKind::Incomplete, "feature extraction skipped " + std::to_string(skipped) +
                                        " of " + std::to_string(total) + " images");
    return frechet_distance(sa, sb);
}

std::vector<HistoryBucket> evaluate_by_history_length(const std::vector<RecipeEval>& recipes,
                                                      const EmbeddingProvider& encoder,
                                                      const FeatureExtractor& extractor) {
    constexpr int kMaxExplicit = 8;
    struct Acc {
        std::vector<double> p_values;
        std::vector<Image8> real, gen;
    };
    std::map<int, Acc> buckets;  // history length, kMaxExplicit+1 = "more than 8"

    for (const auto& r : recipes) {
        if (r.texts.size() < 2 || r.gen_images.size() != r.texts.size()) continue;
        auto pc = procedure_consistency(r.texts, r.gen_images, encoder);
        for (size_t i = 0; i < r.texts.size(); ++i) {
            int history = static_cast<int>(i);
            int key = history > kMaxExplicit ? kMaxExplicit + 1 : history;
            auto& acc = buckets[key];
            acc.p_values.push_back(pc.p_values[i]);
            acc.gen.push_back(r.gen_images[i]);
            if (r.real_images.size() == r.texts.size()) acc.real.push_back(r.real_images[i]);
        }
    }

    std::vector<HistoryBucket> out;
    for (auto& [key, acc] : buckets) {
        HistoryBucket hb;
        hb.label = key > kMaxExplicit ? "more than 8" : std::to_string(key);
        hb.count = static_cast<int>(acc.p_values.size());
        double sum = 0.0;
        for (double v : acc.p_values) sum += v;
        hb.avg_pcon = hb.count ? sum / hb.count : 0.0;
        if (acc.real.size() >= 2 && acc.gen.size() >= 2)
            hb.fid = fid_over_sets(acc.real, acc.gen, extractor);
        out.push_back(std::move(hb));
    }
    return out;
}

}  // namespace procdiff

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "procdiff/common.hpp"
#include "procdiff/metrics.hpp"

using namespace procdiff;

namespace {

// Test provider with hand-placed embeddings: texts by string, images by the
// red value of their first pixel.
struct PlantedProvider : EmbeddingProvider {
    int dim = 4;
    std::map<std::string, std::vector<double>> texts;
    std::map<int, std::vector<double>> images;

    std::string name() const override { return "planted"; }
    int text_dim() const override { return dim; }
    int image_dim() const override { return dim; }
    bool deterministic() const override { return true; }
    std::vector<double> encode_text(const std::string& t) const override { return texts.at(t); }
    std::vector<double> encode_image(const Image8& img) const override {
        return images.at(img.rgb[0]);
    }
};

Image8 keyed_image(int key) { return make_image(4, 4, static_cast<uint8_t>(key), 0, 0); }

// Independent three-nested-loop oracle over raw embeddings.
double brute_force_p(const std::vector<std::vector<double>>& text_embs,
                     const std::vector<std::vector<double>>& image_embs,
                     std::vector<double>* p_out = nullptr) {
    auto cosine100 = [](const std::vector<double>& a, const std::vector<double>& b) {
        double dot = 0, na = 0, nb = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        double c = dot / (std::sqrt(na) * std::sqrt(nb));
        return 100.0 * std::max(0.0, c);
    };
    size_t n = text_embs.size();
    double p_sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double denom = 0.0;
        for (size_t j = 0; j < n; ++j)
            if (j != i) denom += cosine100(text_embs[i], text_embs[j]);
        double p_i = 0.0;
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double w = denom > 0.0 ? cosine100(text_embs[i], text_embs[j]) / denom
                                   : 1.0 / static_cast<double>(n - 1);
            p_i += w * cosine100(image_embs[i], text_embs[j]);
        }
        if (p_out) p_out->push_back(p_i);
        p_sum += p_i;
    }
    return p_sum / static_cast<double>(n);
}

std::vector<double> random_unit(Rng& rng, int dim) {
    std::vector<double> v(static_cast<size_t>(dim));
    double norm = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
}

}  // namespace

TEST_CASE("procedure consistency matches the brute-force oracle") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        int n = 2 + static_cast<int>(rng.below(5));  // N <= 6
        PlantedProvider prov;
        std::vector<std::string> texts;
        std::vector<Image8> images;
        std::vector<std::vector<double>> text_embs, image_embs;
        for (int i = 0; i < n; ++i) {
            std::string t = "t" + std::to_string(trial) + "_" + std::to_string(i);
            auto te = random_unit(rng, prov.dim);
            auto ie = random_unit(rng, prov.dim);
            prov.texts[t] = te;
            prov.images[i] = ie;
            texts.push_back(t);
            images.push_back(keyed_image(i));
            text_embs.push_back(te);
            image_embs.push_back(ie);
        }
        std::vector<double> oracle_ps;
        double oracle_p = brute_force_p(text_embs, image_embs, &oracle_ps);
        auto pc = procedure_consistency(texts, images, prov);
        CHECK(pc.p == doctest::Approx(oracle_p).epsilon(1e-9));
        for (int i = 0; i < n; ++i)
            CHECK(pc.p_values[static_cast<size_t>(i)] ==
                  doctest::Approx(oracle_ps[static_cast<size_t>(i)]).epsilon(1e-9));
        // convex combination of clamped scores stays within [0, 100]
        for (double v : pc.p_values) {
            CHECK(v >= 0.0);
            CHECK(v <= 100.0 + 1e-9);
        }
    }
}

TEST_CASE("constant image-text score collapses P to that score") {
    PlantedProvider prov;
    double s = 37.0;
    double angle = std::acos(s / 100.0);
    std::vector<std::string> texts;
    std::vector<Image8> images;
    for (int i = 0; i < 4; ++i) {
        std::string t = "t" + std::to_string(i);
        prov.texts[t] = {1.0, 0.0, 0.0, 0.0};
        prov.images[i] = {std::cos(angle), std::sin(angle), 0.0, 0.0};
        texts.push_back(t);
        images.push_back(keyed_image(i));
    }
    auto pc = procedure_consistency(texts, images, prov);
    for (double v : pc.p_values) CHECK(v == doctest::Approx(s).epsilon(1e-12));
    CHECK(pc.p == doctest::Approx(s).epsilon(1e-12));
}

TEST_CASE("joint permutation leaves P unchanged") {
    Rng rng(7);
    PlantedProvider prov;
    int n = 5;
    std::vector<std::string> texts;
    std::vector<Image8> images;
    for (int i = 0; i < n; ++i) {
        std::string t = "t" + std::to_string(i);
        prov.texts[t] = random_unit(rng, prov.dim);
        prov.images[i] = random_unit(rng, prov.dim);
        texts.push_back(t);
        images.push_back(keyed_image(i));
    }
    auto base = procedure_consistency(texts, images, prov);
    std::vector<int> perm = {3, 0, 4, 1, 2};
    std::vector<std::string> texts2;
    std::vector<Image8> images2;
    for (int i : perm) {
        texts2.push_back(texts[static_cast<size_t>(i)]);
        images2.push_back(images[static_cast<size_t>(i)]);
    }
    auto permuted = procedure_consistency(texts2, images2, prov);
    CHECK(permuted.p == doctest::Approx(base.p).epsilon(1e-9));
}

TEST_CASE("degenerate text similarities fall back to uniform weights") {
    PlantedProvider prov;
    // orthogonal text embeddings: every clamped text-text score is zero
    prov.texts["a"] = {1, 0, 0, 0};
    prov.texts["b"] = {0, 1, 0, 0};
    prov.texts["c"] = {0, 0, 1, 0};
    prov.images[0] = {1, 0, 0, 0};
    prov.images[1] = {0, 1, 0, 0};
    prov.images[2] = {0, 0, 1, 0};
    auto pc = procedure_consistency({"a", "b", "c"}, {keyed_image(0), keyed_image(1), keyed_image(2)},
                                    prov);
    CHECK(pc.uniform_fallback_rows == 3);
    // image 0 is collinear with text a, orthogonal to b and c: uniform weights
    // over {b, c} give zero
    CHECK(pc.p_values[0] == doctest::Approx(0.0));
}

TEST_CASE("consistency metric rejects single-step recipes") {
    PlantedProvider prov;
    prov.texts["a"] = {1, 0, 0, 0};
    prov.images[0] = {1, 0, 0, 0};
    CHECK_THROWS_AS(procedure_consistency({"a"}, {keyed_image(0)}, prov), Error);
}

TEST_CASE("avg_pcon is the unweighted recipe mean and excludes short recipes") {
    PlantedProvider prov;
    auto make_recipe = [&](const std::string& id, double s, int n) {
        RecipeEval r;
        r.recipe_id = id;
        double angle = std::acos(s / 100.0);
        for (int i = 0; i < n; ++i) {
            std::string t = id + "_t" + std::to_string(i);
            prov.texts[t] = {1.0, 0.0, 0.0, 0.0};
            int key = static_cast<int>(prov.images.size());
            prov.images[key] = {std::cos(angle), std::sin(angle), 0.0, 0.0};
            r.texts.push_back(t);
            r.gen_images.push_back(keyed_image(key));
        }
        return r;
    };
    auto r10 = make_recipe("p10", 10.0, 3);
    auto r20 = make_recipe("p20", 20.0, 5);
    auto single = make_recipe("single", 50.0, 1);

    auto report = avg_pcon({r10, r20, single}, prov);
    CHECK(report.evaluated == 2);
    CHECK(report.excluded == 1);
    CHECK(report.avg_pcon == doctest::Approx(15.0).epsilon(1e-9));

    auto solo = avg_pcon({r20}, prov);
    CHECK(solo.avg_pcon == doctest::Approx(20.0).epsilon(1e-9));

    CHECK_THROWS_AS(avg_pcon({single}, prov), Error);
}

TEST_CASE("frechet distance closed forms") {
    int d = 6;
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
    Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
    FeatureStats a(mu, eye, 10);

    SUBCASE("identical stats give zero") {
        CHECK(frechet_distance(a, a) == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("unit mean offset with identity covariances gives exactly one") {
        Eigen::VectorXd mu2 = mu;
        mu2(0) += 1.0;
        FeatureStats b(mu2, eye, 10);
        CHECK(frechet_distance(a, b) == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(frechet_distance(b, a) == doctest::Approx(1.0).epsilon(1e-9));  // symmetry
    }
    SUBCASE("diagonal case 4I vs I gives the dimension") {
        FeatureStats b(mu, 4.0 * eye, 10);
        // tr(4I) + tr(I) - 2 tr(2I) = 4d + d - 4d = d
        CHECK(frechet_distance(b, a) == doctest::Approx(static_cast<double>(d)).epsilon(1e-6));
    }
    SUBCASE("dimension mismatch and non-finite inputs fail") {
        FeatureStats c(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3), 5);
        CHECK_THROWS_AS(frechet_distance(a, c), Error);
        Eigen::VectorXd bad = mu;
        bad(1) = std::numeric_limits<double>::quiet_NaN();
        FeatureStats nanstats(bad, eye, 5);
        CHECK_THROWS_AS(frechet_distance(a, nanstats), Error);
    }
}

TEST_CASE("streaming stats equal the two-pass computation") {
    Rng rng(11);
    int d = 5, n = 64;
    std::vector<Eigen::VectorXd> xs;
    FeatureStats stream(d);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd x(d);
        for (int j = 0; j < d; ++j) x(j) = rng.normal() * (j + 1);
        xs.push_back(x);
        stream.update(x);
    }
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (const auto& x : xs) mean += x;
    mean /= n;
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (const auto& x : xs) cov += (x - mean) * (x - mean).transpose();
    cov /= n;

    CHECK((stream.mean() - mean).cwiseAbs().maxCoeff() < 1e-10);
    double denom = std::max(1.0, cov.cwiseAbs().maxCoeff());
    CHECK((stream.covariance() - cov).cwiseAbs().maxCoeff() / denom < 1e-6);
}

TEST_CASE("fid over image sets") {
    Rng rng(13);
    std::vector<Image8> set_a, set_b;
    for (int i = 0; i < 12; ++i) {
        Image8 img = make_image(16, 16);
        for (auto& px : img.rgb) px = static_cast<uint8_t>(rng.below(256));
        set_a.push_back(img);
        Image8 img2 = make_image(16, 16);
        for (auto& px : img2.rgb) px = static_cast<uint8_t>(rng.below(256));
        set_b.push_back(img2);
    }
    auto extractor = make_feature_extractor("toy");

    SUBCASE("identical sets score (near) zero") {
        CHECK(fid_over_sets(set_a, set_a, extractor) <= 1e-6);
    }
    SUBCASE("distinct sets score positive, duplication leaves it unchanged") {
        double base = fid_over_sets(set_a, set_b, extractor);
        CHECK(base > 0.0);
        auto doubled_a = set_a;
        doubled_a.insert(doubled_a.end(), set_a.begin(), set_a.end());
        auto doubled_b = set_b;
        doubled_b.insert(doubled_b.end(), set_b.begin(), set_b.end());
        CHECK(fid_over_sets(doubled_a, doubled_b, extractor) ==
              doctest::Approx(base).epsilon(1e-9));
    }
    SUBCASE("too many extraction failures fail the metric") {
        int calls = 0;
        FeatureExtractor flaky = [&](const Image8& img) -> std::vector<double> {
            if (++calls % 3 == 0) throw std::runtime_error("bad image");
            return extractor(img);
        };
        CHECK_THROWS_AS(fid_over_sets(set_a, set_b, flaky), Error);
    }
    SUBCASE("tiny sets are rejected") {
        std::vector<Image8> one = {set_a[0]};
        CHECK_THROWS_AS(fid_over_sets(one, set_b, extractor), Error);
    }
}

TEST_CASE("history-length buckets cover 0..8 and the overflow label") {
    Rng rng(17);
    PlantedProvider prov;
    RecipeEval r;
    r.recipe_id = "long";
    int n = 11;
    for (int i = 0; i < n; ++i) {
        std::string t = "t" + std::to_string(i);
        prov.texts[t] = random_unit(rng, prov.dim);
        prov.images[i] = random_unit(rng, prov.dim);
        r.texts.push_back(t);
        r.gen_images.push_back(keyed_image(i));
    }
    auto extractor = make_feature_extractor("toy");
    auto buckets = evaluate_by_history_length({r}, prov, extractor);
    REQUIRE(buckets.size() == 10);  // 0..8 plus "more than 8"
    CHECK(buckets.front().label == "0");
    CHECK(buckets.back().label == "more than 8");
    CHECK(buckets.back().count == 2);  // histories 9 and 10
    for (const auto& b : buckets)
        if (b.label != "more than 8") CHECK(b.count == 1);
}

TEST_CASE("published full-scale reference values parse but are not replayed") {
    // Reference numbers from the upstream full-scale benchmark runs; they
    // need fine-tuning a pretrained latent backbone on the complete corpus
    // and are recorded for context only, excluded from pass/fail.
    std::ifstream in(std::filesystem::path(PROCDIFF_TEST_DIR) / "fixtures" /
                     "reference_metrics.json");
    REQUIRE(in.good());
    nlohmann::json j;
    in >> j;
    CHECK(j.at("scope") == "full-scale reference, not reproducible at desk scale");
    auto tmn = j.at("memory_text");
    CHECK(tmn.at("fid_train").get<double>() == doctest::Approx(24.336));
    CHECK(tmn.at("avg_pcon_train").get<double>() == doctest::Approx(18.648));
    auto imn = j.at("memory_image");
    CHECK(imn.at("fid_val").get<double>() == doctest::Approx(34.294));
    CHECK(imn.at("avg_pcon_val").get<double>() == doctest::Approx(18.755));
    auto corpus = j.at("corpus");
    CHECK(corpus.at("train_recipes").get<int>() == 1185);
    CHECK(corpus.at("validation_recipes").get<int>() == 446);
    CHECK(corpus.at("train_pairs").get<int>() == 9171);
    CHECK(corpus.at("validation_pairs").get<int>() == 3420);
}

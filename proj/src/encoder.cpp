#include "procdiff/encoder.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "procdiff/common.hpp"

namespace procdiff {

namespace {

constexpr int kPatchGrid = 8;  // 8x8 grid, mean RGB per patch

void normalize(std::vector<double>& v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.0)
        for (double& x : v) x /= norm;
}

}  // namespace

ToyEncoder::ToyEncoder(uint64_t seed, int dim) : seed_(seed), dim_(dim) {
    if (dim <= 0) fail(ErrorKind::Validation, "encoder dim must be positive");
    int features = kPatchGrid * kPatchGrid * 3;
    patch_projection_.resize(static_cast<size_t>(dim) * features);
    Rng rng(mix_seed(seed, fnv1a("patch-projection")));
    for (double& w : patch_projection_) w = rng.normal();
}

std::vector<double> ToyEncoder::encode_text(const std::string& text) const {
    if (text.empty()) fail(ErrorKind::Validation, "cannot encode empty text");
    std::vector<double> acc(static_cast<size_t>(dim_), 0.0);
    std::string token;
    int tokens = 0;
    auto flush = [&] {
        if (token.empty()) return;
        Rng rng(mix_seed(seed_, fnv1a(token)));
        for (int i = 0; i < dim_; ++i) acc[static_cast<size_t>(i)] += rng.normal();
        token.clear();
        ++tokens;
    };
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            token.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        else
            flush();
    }
    flush();
    if (tokens == 0) fail(ErrorKind::Validation, "text has no tokens: '" + text + "'");
    normalize(acc);
    return acc;
}

std::vector<double> ToyEncoder::encode_image(const Image8& image) const {
    if (image.empty()) fail(ErrorKind::Validation, "cannot encode empty image");
    int features = kPatchGrid * kPatchGrid * 3;
    std::vector<double> stats(static_cast<size_t>(features), 0.0);
    for (int py = 0; py < kPatchGrid; ++py)
        for (int px = 0; px < kPatchGrid; ++px) {
            int y0 = py * image.height / kPatchGrid;
            int y1 = std::max(y0 + 1, (py + 1) * image.height / kPatchGrid);
            int x0 = px * image.width / kPatchGrid;
            int x1 = std::max(x0 + 1, (px + 1) * image.width / kPatchGrid);
            y1 = std::min(y1, image.height);
            x1 = std::min(x1, image.width);
            double sum[3] = {0, 0, 0};
            int count = 0;
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x) {
                    const uint8_t* p = image.pixel(x, y);
                    sum[0] += p[0];
                    sum[1] += p[1];
                    sum[2] += p[2];
                    ++count;
                }
            for (int c = 0; c < 3; ++c)
                stats[(static_cast<size_t>(py) * kPatchGrid + px) * 3 + c] =
                    count ? sum[c] / (count * 255.0) - 0.5 : 0.0;
        }
    std::vector<double> out(static_cast<size_t>(dim_), 0.0);
    for (int i = 0; i < dim_; ++i) {
        const double* row = patch_projection_.data() + static_cast<size_t>(i) * features;
        double acc = 0.0;
        for (int f = 0; f < features; ++f) acc += row[f] * stats[static_cast<size_t>(f)];
        out[static_cast<size_t>(i)] = acc;
    }
    normalize(out);
    return out;
}

struct TableEncoder::Impl {
    std::map<std::string, std::vector<double>> texts;
    std::map<uint64_t, std::vector<double>> images;
};

uint64_t TableEncoder::image_key(const Image8& image) {
    uint64_t h = fnv1a_bytes(image.rgb.data(), image.rgb.size());
    h = fnv1a_bytes(&image.width, sizeof(image.width), h);
    h = fnv1a_bytes(&image.height, sizeof(image.height), h);
    return h;
}

TableEncoder::TableEncoder(const std::filesystem::path& table_path)
    : impl_(std::make_shared<Impl>()) {
    std::ifstream in(table_path);
    if (!in) fail(ErrorKind::Io, "cannot open embedding table: " + table_path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, "embedding table " + table_path.string() + ": " + e.what());
    }
    const nlohmann::json texts = j.value("texts", nlohmann::json::object());
    for (auto& [key, val] : texts.items()) {
        auto vec = val.get<std::vector<double>>();
        if (text_dim_ == 0) text_dim_ = static_cast<int>(vec.size());
        if (static_cast<int>(vec.size()) != text_dim_)
            fail(ErrorKind::Integrity, "embedding table: inconsistent text dims");
        impl_->texts[key] = std::move(vec);
    }
    const nlohmann::json images = j.value("images", nlohmann::json::object());
    for (auto& [key, val] : images.items()) {
        auto vec = val.get<std::vector<double>>();
        if (image_dim_ == 0) image_dim_ = static_cast<int>(vec.size());
        if (static_cast<int>(vec.size()) != image_dim_)
            fail(ErrorKind::Integrity, "embedding table: inconsistent image dims");
        impl_->images[std::stoull(key, nullptr, 16)] = std::move(vec);
    }
    if (impl_->texts.empty() && impl_->images.empty())
        fail(ErrorKind::EmptyCorpus, "embedding table is empty: " + table_path.string());
}

std::vector<double> TableEncoder::encode_text(const std::string& text) const {
    if (text.empty()) fail(ErrorKind::Validation, "cannot encode empty text");
    auto it = impl_->texts.find(text);
    if (it == impl_->texts.end())
        fail(ErrorKind::Incomplete, "embedding table has no entry for text: '" + text + "'");
    return it->second;
}

std::vector<double> TableEncoder::encode_image(const Image8& image) const {
    if (image.empty()) fail(ErrorKind::Validation, "cannot encode empty image");
    auto it = impl_->images.find(image_key(image));
    if (it == impl_->images.end())
        fail(ErrorKind::Incomplete, "embedding table has no entry for image");
    return it->second;
}

std::shared_ptr<EmbeddingProvider> make_encoder(const std::string& backend,
                                                const std::string& weight_path, uint64_t seed,
                                                int toy_dim) {
    if (backend == "toy") return std::make_shared<ToyEncoder>(seed, toy_dim);
    if (backend == "pretrained") {
        if (weight_path.empty())
            fail(ErrorKind::Config, "pretrained encoder backend needs encoder.weights");
        return std::make_shared<TableEncoder>(weight_path);
    }
    fail(ErrorKind::Config, "unknown encoder backend: " + backend);
}

double clip_score(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        fail(ErrorKind::Validation, "clip_score: dim mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) fail(ErrorKind::Numeric, "clip_score: zero-norm embedding");
    double cosine = dot / (std::sqrt(na) * std::sqrt(nb));
    return 100.0 * std::max(0.0, cosine);
}

std::vector<double> encode_step_text(const EmbeddingProvider& provider, const std::string& text) {
    return provider.encode_text(text);
}

std::vector<double> encode_step_image(const EmbeddingProvider& provider, const Image8& image) {
    return provider.encode_image(image);
}

}  // namespace procdiff

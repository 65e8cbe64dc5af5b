#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "procdiff/image.hpp"

namespace procdiff {

// Uniform contract for step-text and step-image embeddings. Implementations
// must keep output dims constant and, when deterministic() is true, return
// bitwise-identical vectors for identical inputs.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::string name() const = 0;
    virtual int text_dim() const = 0;
    virtual int image_dim() const = 0;
    virtual bool deterministic() const = 0;
    virtual std::vector<double> encode_text(const std::string& text) const = 0;
    virtual std::vector<double> encode_image(const Image8& image) const = 0;
};

// Seeded random-projection encoder: token hashes and image patch statistics
// mapped to unit-norm vectors. No weights, fully deterministic, fast enough
// to sit inside every test.
class ToyEncoder : public EmbeddingProvider {
public:
    explicit ToyEncoder(uint64_t seed = 0, int dim = 64);

    std::string name() const override { return "toy"; }
    int text_dim() const override { return dim_; }
    int image_dim() const override { return dim_; }
    bool deterministic() const override { return true; }
    std::vector<double> encode_text(const std::string& text) const override;
    std::vector<double> encode_image(const Image8& image) const override;

private:
    uint64_t seed_;
    int dim_;
    std::vector<double> patch_projection_;  // [dim, patch_features]
};

// Backend for externally computed embeddings: a JSON table mapping step
// texts and image content hashes to fixed vectors. Keeps pretrained encoder
// identity a deployment concern; lookups missing from the table fail.
class TableEncoder : public EmbeddingProvider {
public:
    explicit TableEncoder(const std::filesystem::path& table_path);

    std::string name() const override { return "pretrained"; }
    int text_dim() const override { return text_dim_; }
    int image_dim() const override { return image_dim_; }
    bool deterministic() const override { return true; }
    std::vector<double> encode_text(const std::string& text) const override;
    std::vector<double> encode_image(const Image8& image) const override;

    static uint64_t image_key(const Image8& image);

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
    int text_dim_ = 0;
    int image_dim_ = 0;
};

// Factory over the config surface: backend = "toy" | "pretrained".
std::shared_ptr<EmbeddingProvider> make_encoder(const std::string& backend,
                                                const std::string& weight_path,
                                                uint64_t seed = 0, int toy_dim = 64);

// 100 * max(0, cosine). Symmetric, clamped at zero so downstream weights and
// terms stay non-negative. Errors on zero-norm inputs.
double clip_score(const std::vector<double>& a, const std::vector<double>& b);

std::vector<double> encode_step_text(const EmbeddingProvider& provider, const std::string& text);
std::vector<double> encode_step_image(const EmbeddingProvider& provider, const Image8& image);

}  // namespace procdiff

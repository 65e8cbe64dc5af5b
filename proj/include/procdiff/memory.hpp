#pragma once

// Procedural memory: causal attention over text or image histories, or
// bi-directional attention over mixed sequences, fused into the timestep
// embedding through a zero-initialized linear head.

#include <string>
#include <vector>

#include "procdiff/nn.hpp"
#include "procdiff/scenario.hpp"
#include "procdiff/tensor.hpp"

namespace procdiff {

enum class MemoryKind { Tmn, Imn, Mmn };

inline std::string to_string(MemoryKind kind) {
    switch (kind) {
        case MemoryKind::Tmn: return "tmn";
        case MemoryKind::Imn: return "imn";
        case MemoryKind::Mmn: return "mmn";
    }
    return "?";
}

inline MemoryKind memory_kind_from_string(const std::string& s) {
    if (s == "tmn") return MemoryKind::Tmn;
    if (s == "imn") return MemoryKind::Imn;
    if (s == "mmn") return MemoryKind::Mmn;
    fail(ErrorKind::Config, "unknown memory kind: " + s);
}

// Per-step conditioning vectors m_1..m_N, kept as a graph node so training
// can differentiate through the producing net.
template <class T>
struct ProceduralMemory {
    Ptr<T> values;  // [N, dim]
    Modality source = Modality::Text;

    int size() const { return values ? values->rows() : 0; }
};

// Maps a provider embedding to the shared memory width.
template <class T>
struct ProjectionHead {
    Mlp<T> mlp;
    int out_dim = 0;

    ProjectionHead() = default;
    ProjectionHead(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng)
        : mlp(ps, name, in, out, out, rng), out_dim(out) {}

    Ptr<T> forward(const Ptr<T>& x) const { return mlp.forward(x); }
};

// Combines a step's text and image encodings into one vector when both are
// kept at a position.
template <class T>
struct TokenMixer {
    Mlp<T> mlp;
    int dim = 0;

    TokenMixer() = default;
    TokenMixer(ParamStore<T>& ps, const std::string& name, int dim_, Rng& rng)
        : mlp(ps, name, 2 * dim_, 2 * dim_, dim_, rng), dim(dim_) {}

    // text, image: [N, dim] rows aligned by position
    Ptr<T> forward(const Ptr<T>& text, const Ptr<T>& image) const {
        if (text->cols() != dim || image->cols() != dim)
            fail(ErrorKind::Validation, "token mixer: dim mismatch");
        return mlp.forward(concat_cols(std::vector<Ptr<T>>{text, image}));
    }
};

// Linear map to the time-embedding width, weights and bias exactly zero at
// construction so a fresh net cannot perturb the backbone.
template <class T>
struct FusionHead {
    Linear<T> lin;
    int in_dim = 0, out_dim = 0;

    FusionHead() = default;
    FusionHead(ParamStore<T>& ps, const std::string& name, int dm, int dtime, Rng& rng)
        : lin(ps, name, dm, dtime, rng, /*bias=*/true, /*zero_init=*/true),
          in_dim(dm),
          out_dim(dtime) {}

    Ptr<T> forward(const Ptr<T>& m) const { return lin.forward(m); }
};

// e_j = t_j + head(m_j); with a freshly constructed head this is t_j exactly.
template <class T>
Ptr<T> fuse_with_time(const Ptr<T>& t, const Ptr<T>& m, const FusionHead<T>& head) {
    if (m->cols() != head.in_dim || t->cols() != head.out_dim || t->rows() != m->rows())
        fail(ErrorKind::Validation, "fuse_with_time: dim mismatch");
    return add(t, head.forward(m));
}

template <class T>
struct MemoryNetConfig {
    MemoryKind kind = MemoryKind::Tmn;
    int dim = 256;
    int heads = 4;
    int text_in = 64;   // provider text dim
    int image_in = 64;  // provider image dim
};

template <class T>
struct MemoryNet {
    MemoryNetConfig<T> config;
    ProjectionHead<T> text_proj;
    ProjectionHead<T> image_proj;
    TokenMixer<T> mixer;
    AttentionBlock<T> attn;

    MemoryNet() = default;
    MemoryNet(ParamStore<T>& ps, const std::string& prefix, const MemoryNetConfig<T>& cfg,
              Rng& rng)
        : config(cfg),
          text_proj(ps, prefix + ".text_proj", cfg.text_in, cfg.dim, rng),
          image_proj(ps, prefix + ".image_proj", cfg.image_in, cfg.dim, rng),
          mixer(ps, prefix + ".mixer", cfg.dim, rng),
          attn(ps, prefix + ".attn", cfg.dim, cfg.heads,
               cfg.kind == MemoryKind::Mmn ? MaskMode::Full : MaskMode::CausalStrict, rng) {}
};

// Memory over an already-projected [N, dim] sequence under strict causal
// masking: m_1 = 0, m_j depends only on rows < j.
template <class T>
ProceduralMemory<T> tmn_forward(const MemoryNet<T>& net, const Ptr<T>& text_embs) {
    if (net.config.kind != MemoryKind::Tmn)
        fail(ErrorKind::Config, "tmn_forward on a non-tmn net");
    if (!text_embs || text_embs->rows() < 1)
        fail(ErrorKind::Validation, "tmn_forward: empty sequence");
    if (text_embs->cols() != net.config.dim)
        fail(ErrorKind::Validation, "tmn_forward: dim mismatch");
    return {net.attn.forward(text_embs), Modality::Text};
}

template <class T>
ProceduralMemory<T> imn_forward(const MemoryNet<T>& net, const Ptr<T>& image_embs) {
    if (net.config.kind != MemoryKind::Imn)
        fail(ErrorKind::Config, "imn_forward on a non-imn net");
    if (!image_embs || image_embs->rows() < 1)
        fail(ErrorKind::Validation, "imn_forward: empty sequence");
    if (image_embs->cols() != net.config.dim)
        fail(ErrorKind::Validation, "imn_forward: dim mismatch");
    return {net.attn.forward(image_embs), Modality::Image};
}

// One position of a mixed sequence; tensors are [1, dim] rows.
template <class T>
struct MixedEntry {
    Modality modality = Modality::Text;
    Ptr<T> text;
    Ptr<T> image;
};

// Bi-directional memory over a mixed sequence; text+image positions are
// combined by the token mixer before attention, keeping sequence length N.
template <class T>
ProceduralMemory<T> mmn_forward(const MemoryNet<T>& net,
                                const std::vector<MixedEntry<T>>& entries) {
    if (net.config.kind != MemoryKind::Mmn)
        fail(ErrorKind::Config, "mmn_forward on a non-mmn net");
    if (entries.empty()) fail(ErrorKind::Validation, "mmn_forward: empty sequence");
    std::vector<Ptr<T>> rows;
    rows.reserve(entries.size());
    for (const auto& e : entries) {
        Ptr<T> row;
        switch (e.modality) {
            case Modality::Text: row = e.text; break;
            case Modality::Image: row = e.image; break;
            case Modality::TextImage:
                if (!e.text || !e.image)
                    fail(ErrorKind::Validation, "mmn_forward: text+image entry incomplete");
                row = net.mixer.forward(e.text, e.image);
                break;
        }
        if (!row || row->shape.size() != 2 || row->rows() != 1 || row->cols() != net.config.dim)
            fail(ErrorKind::Validation, "mmn_forward: entries must be [1, dim] rows");
        rows.push_back(row);
    }
    return {net.attn.forward(concat_rows(rows)), Modality::TextImage};
}

// Scenario kinds are bound to the memory net that can consume them.
inline MemoryKind memory_kind_for(ScenarioKind scenario) {
    switch (scenario) {
        case ScenarioKind::TextOnly: return MemoryKind::Tmn;
        case ScenarioKind::ImageHistory: return MemoryKind::Imn;
        case ScenarioKind::Multimodal: return MemoryKind::Mmn;
    }
    return MemoryKind::Tmn;
}

inline void require_compatible(MemoryKind kind, ScenarioKind scenario) {
    if (memory_kind_for(scenario) != kind)
        fail(ErrorKind::Config, "memory net '" + to_string(kind) +
                                    "' cannot consume scenario '" + to_string(scenario) + "'");
}

// Assemble provider-space rows into a leaf tensor.
template <class T>
Ptr<T> rows_to_tensor(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) fail(ErrorKind::Validation, "rows_to_tensor: empty");
    int d = static_cast<int>(rows[0].size());
    auto t = make_tensor<T>({static_cast<int>(rows.size()), d});
    for (size_t i = 0; i < rows.size(); ++i) {
        if (static_cast<int>(rows[i].size()) != d)
            fail(ErrorKind::Validation, "rows_to_tensor: ragged rows");
        for (int j = 0; j < d; ++j)
            t->val[i * static_cast<size_t>(d) + static_cast<size_t>(j)] =
                static_cast<T>(rows[i][static_cast<size_t>(j)]);
    }
    return t;
}

// Memory for one prompt sequence given provider-space embeddings aligned to
// its entries (empty vectors where a modality is absent).
template <class T>
ProceduralMemory<T> memory_from_prompts(const MemoryNet<T>& net, const PromptSequence& seq,
                                        const std::vector<std::vector<double>>& text_embs,
                                        const std::vector<std::vector<double>>& image_embs) {
    size_t n = seq.entries.size();
    if (text_embs.size() != n || image_embs.size() != n)
        fail(ErrorKind::Validation, "memory_from_prompts: embeddings misaligned with entries");

    switch (net.config.kind) {
        case MemoryKind::Tmn: {
            require_compatible(net.config.kind, seq.kind);
            return tmn_forward(net, net.text_proj.forward(rows_to_tensor<T>(text_embs)));
        }
        case MemoryKind::Imn: {
            require_compatible(net.config.kind, seq.kind);
            return imn_forward(net, net.image_proj.forward(rows_to_tensor<T>(image_embs)));
        }
        case MemoryKind::Mmn: {
            require_compatible(net.config.kind, seq.kind);
            std::vector<MixedEntry<T>> entries(n);
            for (size_t i = 0; i < n; ++i) {
                entries[i].modality = seq.entries[i].modality;
                if (!text_embs[i].empty())
                    entries[i].text =
                        net.text_proj.forward(rows_to_tensor<T>({text_embs[i]}));
                if (!image_embs[i].empty())
                    entries[i].image =
                        net.image_proj.forward(rows_to_tensor<T>({image_embs[i]}));
                bool need_text = entries[i].modality != Modality::Image;
                bool need_image = entries[i].modality != Modality::Text;
                if ((need_text && !entries[i].text) || (need_image && !entries[i].image))
                    fail(ErrorKind::Validation,
                         "memory_from_prompts: missing embedding for entry " +
                             std::to_string(seq.entries[i].position));
            }
            return mmn_forward(net, entries);
        }
    }
    fail(ErrorKind::Validation, "unreachable");
}

}  // namespace procdiff

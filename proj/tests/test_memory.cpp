#include <doctest.h>

#include <Eigen/Dense>

#include "gradcheck.hpp"
#include "procdiff/memory.hpp"

using namespace procdiff;
using namespace procdiff::testing;

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Mat to_eigen(const Ptr<double>& t) {
    Mat m(t->rows(), t->cols());
    for (int i = 0; i < t->rows(); ++i)
        for (int j = 0; j < t->cols(); ++j)
            m(i, j) = t->val[static_cast<size_t>(i) * t->cols() + j];
    return m;
}

// Literal per-step oracle: slice the history [1..j-1], append positional
// encodings, run one attention computation with the query at the last slice
// row. Plain Eigen math, no shared code with AttentionBlock.
Mat sliced_history_oracle(const MemoryNet<double>& net, const Mat& inputs) {
    int n = static_cast<int>(inputs.rows());
    int d = net.config.dim;
    int heads = net.config.heads;
    int dh = d / heads;

    auto lin = [&](const Linear<double>& l, const Mat& x) -> Mat {
        Mat w = to_eigen(l.w);
        Mat y = x * w.transpose();
        if (l.b)
            for (int i = 0; i < y.rows(); ++i)
                for (int j = 0; j < y.cols(); ++j) y(i, j) += l.b->val[static_cast<size_t>(j)];
        return y;
    };

    auto pe_full = sinusoidal_encoding<double>(n, d);
    Mat out = Mat::Zero(n, d);
    for (int j = 2; j <= n; ++j) {
        int hist = j - 1;
        Mat h(hist, d);
        for (int r = 0; r < hist; ++r)
            for (int c = 0; c < d; ++c)
                h(r, c) = inputs(r, c) + pe_full[static_cast<size_t>(r) * d + c];
        Mat q = lin(net.attn.wq, h), k = lin(net.attn.wk, h), v = lin(net.attn.wv, h);
        Mat heads_out(1, d);
        for (int hd = 0; hd < heads; ++hd) {
            Vec qlast = q.row(hist - 1).segment(hd * dh, dh);
            Vec scores(hist);
            for (int r = 0; r < hist; ++r)
                scores(r) = qlast.dot(k.row(r).segment(hd * dh, dh).transpose()) /
                            std::sqrt(static_cast<double>(dh));
            Vec p = (scores.array() - scores.maxCoeff()).exp();
            p /= p.sum();
            Vec acc = Vec::Zero(dh);
            for (int r = 0; r < hist; ++r)
                acc += p(r) * v.row(r).segment(hd * dh, dh).transpose();
            heads_out.block(0, hd * dh, 1, dh) = acc.transpose();
        }
        out.row(j - 1) = lin(net.attn.wo, heads_out).row(0);
    }
    return out;
}

MemoryNet<double> make_net(ParamStore<double>& ps, MemoryKind kind, int dim, int heads,
                           uint64_t seed, int text_in = 5, int image_in = 6) {
    Rng rng(seed);
    MemoryNetConfig<double> cfg;
    cfg.kind = kind;
    cfg.dim = dim;
    cfg.heads = heads;
    cfg.text_in = text_in;
    cfg.image_in = image_in;
    return MemoryNet<double>(ps, "mem", cfg, rng);
}

}  // namespace

TEST_CASE("empty history gives the zero vector") {
    ParamStore<double> ps;
    auto net = make_net(ps, MemoryKind::Tmn, 8, 2, 1);
    Rng rng(2);
    auto x = random_leaf<double>({1, 8}, rng);
    auto m = tmn_forward(net, x);
    REQUIRE(m.size() == 1);
    for (int j = 0; j < 8; ++j) CHECK(m.values->val[static_cast<size_t>(j)] == 0.0);
}

TEST_CASE("single-pass readout equals the sliced-history oracle") {
    for (uint64_t seed : {3u, 4u, 5u}) {
        ParamStore<double> ps;
        auto net = make_net(ps, MemoryKind::Tmn, 8, 2, seed);
        Rng rng(seed + 100);
        for (int n : {2, 3, 5, 8}) {
            auto x = random_leaf<double>({n, 8}, rng);
            auto m = tmn_forward(net, x);
            Mat oracle = sliced_history_oracle(net, to_eigen(x));
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < 8; ++j)
                    CHECK(m.values->val[static_cast<size_t>(i) * 8 + j] ==
                          doctest::Approx(oracle(i, j)).epsilon(1e-12));
        }
    }
}

TEST_CASE("strict causality: perturbing input k leaves m_j unchanged for j <= k") {
    ParamStore<double> ps;
    auto net = make_net(ps, MemoryKind::Imn, 8, 2, 7);
    Rng rng(8);
    int n = 6;
    auto x = random_leaf<double>({n, 8}, rng);
    auto m0 = imn_forward(net, x);

    for (int k = 1; k <= n; ++k) {  // 1-based perturbed position
        auto x2 = make_tensor<double>({n, 8}, x->val);
        for (int j = 0; j < 8; ++j)
            x2->val[static_cast<size_t>(k - 1) * 8 + j] += 0.37 + j;
        auto m1 = imn_forward(net, x2);
        for (int j = 1; j <= n; ++j) {
            bool must_match = j <= k;
            bool matches = true;
            for (int c = 0; c < 8; ++c)
                matches = matches && (m0.values->val[static_cast<size_t>(j - 1) * 8 + c] ==
                                      m1.values->val[static_cast<size_t>(j - 1) * 8 + c]);
            if (must_match)
                CHECK(matches);  // exact, bitwise
            else if (j == k + 1)
                CHECK_FALSE(matches);  // the very next step must see the change
        }
    }
}

TEST_CASE("analytic jacobian blocks vanish on and above the diagonal") {
    ParamStore<double> ps;
    auto net = make_net(ps, MemoryKind::Tmn, 8, 2, 9);
    Rng rng(10);
    int n = 5;
    auto x = random_leaf<double>({n, 8}, rng, 1.0, /*requires_grad=*/true);

    for (int j = 1; j <= n; ++j)
        for (int c = 0; c < 8; ++c) {
            x->zero_grad();
            auto m = tmn_forward(net, x);
            std::vector<double> seed(static_cast<size_t>(n) * 8, 0.0);
            seed[static_cast<size_t>(j - 1) * 8 + c] = 1.0;
            backward_with_grad(m.values, seed);
            // d m_j / d input_k must be identically zero for k >= j
            for (int k = j; k <= n; ++k)
                for (int cc = 0; cc < 8; ++cc)
                    CHECK(x->grad[static_cast<size_t>(k - 1) * 8 + cc] == 0.0);
        }
}

TEST_CASE("mmn is bi-directional: the last position reaches m_1") {
    ParamStore<double> ps;
    auto net = make_net(ps, MemoryKind::Mmn, 8, 2, 11);
    Rng rng(12);
    int n = 5;
    auto x = random_leaf<double>({n, 8}, rng);

    auto run = [&](const Ptr<double>& inp) {
        std::vector<MixedEntry<double>> entries(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            entries[static_cast<size_t>(i)].modality = Modality::Text;
            entries[static_cast<size_t>(i)].text = slice_rows(inp, i, i + 1);
        }
        return mmn_forward(net, entries);
    };

    auto m0 = run(x);
    auto x2 = make_tensor<double>({n, 8}, x->val);
    x2->val[static_cast<size_t>(n - 1) * 8] += 1.0;
    auto m1 = run(x2);
    double diff = 0.0;
    for (int c = 0; c < 8; ++c)
        diff = std::max(diff, std::fabs(m0.values->val[static_cast<size_t>(c)] -
                                        m1.values->val[static_cast<size_t>(c)]));
    CHECK(diff > 0.0);
}

TEST_CASE("mmn single-step sequence is well-defined self-attention") {
    ParamStore<double> ps;
    auto net = make_net(ps, MemoryKind::Mmn, 8, 2, 13);
    Rng rng(14);
    std::vector<MixedEntry<double>> entries(1);
    entries[0].modality = Modality::Text;
    entries[0].text = random_leaf<double>({1, 8}, rng);
    auto m = mmn_forward(net, entries);
    REQUIRE(m.size() == 1);
    double norm = 0.0;
    for (int c = 0; c < 8; ++c) norm += m.values->val[static_cast<size_t>(c)] *
                                        m.values->val[static_cast<size_t>(c)];
    CHECK(std::isfinite(norm));
    CHECK(norm > 0.0);
}

TEST_CASE("mixed entries keep sequence length N") {
    ParamStore<double> ps;
    auto net = make_net(ps, MemoryKind::Mmn, 8, 2, 15);
    Rng rng(16);
    std::vector<MixedEntry<double>> entries(4);
    entries[0] = {Modality::Text, random_leaf<double>({1, 8}, rng), nullptr};
    entries[1] = {Modality::TextImage, random_leaf<double>({1, 8}, rng),
                  random_leaf<double>({1, 8}, rng)};
    entries[2] = {Modality::Image, nullptr, random_leaf<double>({1, 8}, rng)};
    entries[3] = {Modality::Text, random_leaf<double>({1, 8}, rng), nullptr};
    auto m = mmn_forward(net, entries);
    CHECK(m.size() == 4);
}

TEST_CASE("projection heads agree on the shared width") {
    ParamStore<double> ps;
    auto net = make_net(ps, MemoryKind::Mmn, 8, 2, 17, /*text_in=*/5, /*image_in=*/9);
    Rng rng(18);
    auto t = net.text_proj.forward(random_leaf<double>({3, 5}, rng));
    auto i = net.image_proj.forward(random_leaf<double>({3, 9}, rng));
    CHECK(t->cols() == 8);
    CHECK(i->cols() == 8);  // both land in the memory width
}

TEST_CASE("zero-initialized fusion head is exactly neutral") {
    ParamStore<double> ps;
    Rng rng(19);
    FusionHead<double> head(ps, "fusion", 8, 12, rng);
    auto t = random_leaf<double>({4, 12}, rng);
    auto m = random_leaf<double>({4, 8}, rng);
    auto e = fuse_with_time(t, m, head);
    for (int64_t i = 0; i < t->numel(); ++i) CHECK(e->val[i] == t->val[i]);  // bitwise

    // m = 0 gives t + bias
    for (auto& v : head.lin.b->val) v = 0.25;
    auto zero_m = make_tensor<double>({4, 8});
    auto e2 = fuse_with_time(t, zero_m, head);
    for (int64_t i = 0; i < t->numel(); ++i)
        CHECK(e2->val[i] == doctest::Approx(t->val[i] + 0.25));
}

TEST_CASE("fusion is linear: checked against a direct matrix multiply") {
    ParamStore<double> ps;
    Rng rng(20);
    FusionHead<double> head(ps, "fusion", 6, 10, rng);
    init::fan_in(head.lin.w, rng, 6);
    init::normal_scaled(head.lin.b, rng, 0.5);

    auto t = random_leaf<double>({3, 10}, rng);
    auto m = random_leaf<double>({3, 6}, rng);
    auto m2 = scale(m, 2.0);
    auto e1 = fuse_with_time(t, m, head);
    auto e2 = fuse_with_time(t, m2, head);

    Mat w = to_eigen(head.lin.w);
    Mat me = to_eigen(m);
    Mat direct = me * w.transpose();  // independent route for e(m) - t - b
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 10; ++j) {
            double b = head.lin.b->val[static_cast<size_t>(j)];
            double d1 = e1->val[static_cast<size_t>(i) * 10 + j] -
                        t->val[static_cast<size_t>(i) * 10 + j];
            double d2 = e2->val[static_cast<size_t>(i) * 10 + j] -
                        t->val[static_cast<size_t>(i) * 10 + j];
            CHECK(d1 == doctest::Approx(direct(i, j) + b).epsilon(1e-12));
            CHECK(d2 - b == doctest::Approx(2.0 * (d1 - b)).epsilon(1e-9));
        }
}

TEST_CASE("memory net parameter gradients match finite differences") {
    SUBCASE("causal net with projection") {
        ParamStore<double> ps;
        auto net = make_net(ps, MemoryKind::Tmn, 8, 2, 21);
        Rng rng(22);
        std::vector<std::vector<double>> raw(4, std::vector<double>(5));
        for (auto& row : raw)
            for (auto& v : row) v = rng.normal();
        auto w = random_weights<double>(4 * 8, rng);
        auto loss = [&] {
            auto projected = net.text_proj.forward(rows_to_tensor<double>(raw));
            return weighted_sum(tmn_forward(net, projected).values, w);
        };
        auto res = gradcheck_params<double>(ps, loss);
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("bi-directional net with token mixer") {
        ParamStore<double> ps;
        auto net = make_net(ps, MemoryKind::Mmn, 8, 2, 23);
        Rng rng(24);
        std::vector<std::vector<double>> raw_t(3, std::vector<double>(5));
        std::vector<std::vector<double>> raw_i(3, std::vector<double>(6));
        for (auto& row : raw_t)
            for (auto& v : row) v = rng.normal();
        for (auto& row : raw_i)
            for (auto& v : row) v = rng.normal();
        auto w = random_weights<double>(3 * 8, rng);
        auto loss = [&] {
            std::vector<MixedEntry<double>> entries(3);
            entries[0] = {Modality::Text,
                          net.text_proj.forward(rows_to_tensor<double>({raw_t[0]})), nullptr};
            entries[1] = {Modality::TextImage,
                          net.text_proj.forward(rows_to_tensor<double>({raw_t[1]})),
                          net.image_proj.forward(rows_to_tensor<double>({raw_i[1]}))};
            entries[2] = {Modality::Image, nullptr,
                          net.image_proj.forward(rows_to_tensor<double>({raw_i[2]}))};
            return weighted_sum(mmn_forward(net, entries).values, w);
        };
        auto res = gradcheck_params<double>(ps, loss);
        CHECK(res.max_rel_err < 1e-6);
    }
    SUBCASE("fusion head") {
        ParamStore<double> ps;
        Rng rng(25);
        FusionHead<double> head(ps, "fusion", 6, 10, rng);
        auto t = random_leaf<double>({3, 10}, rng);
        auto m = random_leaf<double>({3, 6}, rng);
        auto w = random_weights<double>(30, rng);
        auto res = gradcheck_params<double>(
            ps, [&] { return weighted_sum(fuse_with_time(t, m, head), w); });
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("memory_from_prompts dispatches and validates") {
    Recipe recipe;
    recipe.recipe_id = "r";
    recipe.split = "train";
    for (int i = 1; i <= 3; ++i) {
        Step s;
        s.index = i;
        s.text = "step " + std::to_string(i);
        s.image_ref = "x.png";
        recipe.steps.push_back(s);
    }
    PromptScenario sc;
    sc.kind = ScenarioKind::TextOnly;
    auto seq = make_prompt_sequence(recipe, sc);

    ParamStore<double> ps;
    auto net = make_net(ps, MemoryKind::Tmn, 8, 2, 26);
    Rng rng(27);
    std::vector<std::vector<double>> texts(3, std::vector<double>(5));
    for (auto& row : texts)
        for (auto& v : row) v = rng.normal();
    std::vector<std::vector<double>> images(3);
    auto m = memory_from_prompts(net, seq, texts, images);
    CHECK(m.size() == 3);

    // scenario/memory mismatch
    ParamStore<double> ps2;
    auto imn = make_net(ps2, MemoryKind::Imn, 8, 2, 28);
    CHECK_THROWS_AS(memory_from_prompts(imn, seq, texts, images), Error);

    // kind-mismatched direct call
    CHECK_THROWS_AS(tmn_forward(imn, rows_to_tensor<double>(texts)), Error);
    // empty sequence
    ParamStore<double> ps3;
    auto tmn = make_net(ps3, MemoryKind::Tmn, 8, 2, 29);
    CHECK_THROWS_AS(tmn_forward(tmn, Ptr<double>{}), Error);
}

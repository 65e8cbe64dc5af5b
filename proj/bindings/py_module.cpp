// Python bindings for the core operations: encoders and clip scoring, the
// data model and scenario masking, memory nets with fusion, the forward
// diffusion process, and the evaluation metrics.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "procdiff/data.hpp"
#include "procdiff/encoder.hpp"
#include "procdiff/memory.hpp"
#include "procdiff/metrics.hpp"
#include "procdiff/scenario.hpp"
#include "procdiff/schedule.hpp"

namespace py = pybind11;
using namespace procdiff;

namespace {

Image8 image_from_array(const py::array_t<uint8_t>& arr) {
    auto buf = arr.request();
    if (buf.ndim != 3 || buf.shape[2] != 3)
        throw py::value_error("expected an HxWx3 uint8 array");
    Image8 img;
    img.height = static_cast<int>(buf.shape[0]);
    img.width = static_cast<int>(buf.shape[1]);
    img.rgb.resize(static_cast<size_t>(img.width) * img.height * 3);
    auto view = arr.unchecked<3>();
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                img.pixel(x, y)[c] = view(y, x, c);
    return img;
}

py::array_t<double> vec_to_array(const std::vector<double>& v) {
    return py::array_t<double>(static_cast<py::ssize_t>(v.size()), v.data());
}

Ptr<double> matrix_from_array(const py::array_t<double>& arr) {
    auto buf = arr.request();
    if (buf.ndim != 2) throw py::value_error("expected a 2-D float64 array");
    int n = static_cast<int>(buf.shape[0]);
    int d = static_cast<int>(buf.shape[1]);
    auto t = make_tensor<double>({n, d});
    auto view = arr.unchecked<2>();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            t->val[static_cast<size_t>(i) * d + j] = view(i, j);
    return t;
}

py::array_t<double> matrix_to_array(const Ptr<double>& t) {
    py::array_t<double> out({static_cast<py::ssize_t>(t->rows()),
                             static_cast<py::ssize_t>(t->cols())});
    std::copy(t->val.begin(), t->val.end(), out.mutable_data());
    return out;
}

Eigen::MatrixXd eigen_from_array(const py::array_t<double>& arr) {
    auto buf = arr.request();
    if (buf.ndim != 2) throw py::value_error("expected a 2-D float64 array");
    Eigen::MatrixXd m(buf.shape[0], buf.shape[1]);
    auto view = arr.unchecked<2>();
    for (py::ssize_t i = 0; i < buf.shape[0]; ++i)
        for (py::ssize_t j = 0; j < buf.shape[1]; ++j) m(i, j) = view(i, j);
    return m;
}

// Owns one memory net plus a fusion head over a private parameter store.
struct PyMemoryNet {
    ParamStore<double> params;
    MemoryNet<double> net;
    FusionHead<double> fusion;

    PyMemoryNet(const std::string& kind, int dim, int heads, int text_in, int image_in,
                int time_dim, uint64_t seed) {
        MemoryNetConfig<double> cfg;
        cfg.kind = memory_kind_from_string(kind);
        cfg.dim = dim;
        cfg.heads = heads;
        cfg.text_in = text_in;
        cfg.image_in = image_in;
        Rng rng(mix_seed(seed, fnv1a("py-memory")));
        net = MemoryNet<double>(params, "memory", cfg, rng);
        fusion = FusionHead<double>(params, "fusion", dim, time_dim, rng);
    }

    py::array_t<double> project_text(const py::array_t<double>& raw) {
        NoGradGuard ng;
        return matrix_to_array(net.text_proj.forward(matrix_from_array(raw)));
    }
    py::array_t<double> project_image(const py::array_t<double>& raw) {
        NoGradGuard ng;
        return matrix_to_array(net.image_proj.forward(matrix_from_array(raw)));
    }
    py::array_t<double> forward(const py::array_t<double>& projected) {
        NoGradGuard ng;
        auto x = matrix_from_array(projected);
        switch (net.config.kind) {
            case MemoryKind::Tmn: return matrix_to_array(tmn_forward(net, x).values);
            case MemoryKind::Imn: return matrix_to_array(imn_forward(net, x).values);
            case MemoryKind::Mmn: {
                std::vector<MixedEntry<double>> entries;
                for (int i = 0; i < x->rows(); ++i)
                    entries.push_back({Modality::Text, slice_rows(x, i, i + 1), nullptr});
                return matrix_to_array(mmn_forward(net, entries).values);
            }
        }
        throw py::value_error("unreachable");
    }
    py::array_t<double> fuse(const py::array_t<double>& time_emb,
                             const py::array_t<double>& memory) {
        NoGradGuard ng;
        return matrix_to_array(
            fuse_with_time(matrix_from_array(time_emb), matrix_from_array(memory), fusion));
    }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "procedural image sequence toolkit (native core)";

    py::register_exception<Error>(m, "ProcdiffError");

    py::class_<Step>(m, "Step")
        .def_readonly("index", &Step::index)
        .def_readonly("text", &Step::text)
        .def_property_readonly("image",
                               [](const Step& s) { return s.image_ref.value_or(""); })
        .def_property_readonly("t_start",
                               [](const Step& s) {
                                   return s.t_start ? py::cast(*s.t_start) : py::none();
                               })
        .def_property_readonly("t_end", [](const Step& s) {
            return s.t_end ? py::cast(*s.t_end) : py::none();
        });

    py::class_<Recipe>(m, "Recipe")
        .def_readonly("recipe_id", &Recipe::recipe_id)
        .def_readonly("split", &Recipe::split)
        .def_readonly("steps", &Recipe::steps)
        .def("__len__", &Recipe::size);

    m.def("load_manifest", [](const std::string& path) { return load_manifest(path); });

    py::class_<PromptSequence>(m, "PromptSequence")
        .def_readonly("recipe_id", &PromptSequence::recipe_id)
        .def_readonly("text_positions", &PromptSequence::text_positions)
        .def_readonly("image_positions", &PromptSequence::image_positions)
        .def("__len__", &PromptSequence::size)
        .def_property_readonly("modalities", [](const PromptSequence& seq) {
            std::vector<std::string> out;
            for (const auto& e : seq.entries) out.push_back(to_string(e.modality));
            return out;
        });

    m.def(
        "make_prompt_sequence",
        [](const Recipe& recipe, const std::string& kind, double p, const std::string& placement,
           bool retain_text, uint64_t seed) {
            PromptScenario sc;
            sc.kind = scenario_kind_from_string(kind);
            sc.p = p;
            sc.placement = placement_from_string(placement);
            sc.retain_text = retain_text;
            sc.seed = seed;
            return make_prompt_sequence(recipe, sc);
        },
        py::arg("recipe"), py::arg("kind"), py::arg("p") = 0.0,
        py::arg("placement") = "ordered", py::arg("retain_text") = false, py::arg("seed") = 0);

    m.def("sample_validation_p", &sample_validation_p, py::arg("seed"), py::arg("recipe_id"));

    py::class_<EmbeddingProvider, std::shared_ptr<EmbeddingProvider>>(m, "Encoder")
        .def_property_readonly("name", &EmbeddingProvider::name)
        .def_property_readonly("text_dim", &EmbeddingProvider::text_dim)
        .def_property_readonly("image_dim", &EmbeddingProvider::image_dim)
        .def("encode_text",
             [](const EmbeddingProvider& e, const std::string& text) {
                 return vec_to_array(e.encode_text(text));
             })
        .def("encode_image", [](const EmbeddingProvider& e, const py::array_t<uint8_t>& img) {
            return vec_to_array(e.encode_image(image_from_array(img)));
        });

    m.def(
        "make_encoder",
        [](const std::string& backend, const std::string& weights, uint64_t seed, int dim) {
            return make_encoder(backend, weights, seed, dim);
        },
        py::arg("backend") = "toy", py::arg("weights") = "", py::arg("seed") = 0,
        py::arg("dim") = 64);

    m.def("clip_score", [](const py::array_t<double>& a, const py::array_t<double>& b) {
        std::vector<double> va(a.data(), a.data() + a.size());
        std::vector<double> vb(b.data(), b.data() + b.size());
        return clip_score(va, vb);
    });

    py::class_<PyMemoryNet>(m, "MemoryNet")
        .def(py::init<const std::string&, int, int, int, int, int, uint64_t>(),
             py::arg("kind") = "tmn", py::arg("dim") = 64, py::arg("heads") = 4,
             py::arg("text_in") = 64, py::arg("image_in") = 64, py::arg("time_dim") = 128,
             py::arg("seed") = 0)
        .def("project_text", &PyMemoryNet::project_text)
        .def("project_image", &PyMemoryNet::project_image)
        .def("forward", &PyMemoryNet::forward)
        .def("fuse", &PyMemoryNet::fuse);

    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def(py::init([](int timesteps, double beta_start, double beta_end) {
                 NoiseScheduleConfig cfg;
                 cfg.timesteps = timesteps;
                 cfg.beta_start = beta_start;
                 cfg.beta_end = beta_end;
                 return NoiseSchedule(cfg);
             }),
             py::arg("timesteps") = 1000, py::arg("beta_start") = 1e-4,
             py::arg("beta_end") = 2e-2)
        .def_property_readonly("timesteps", &NoiseSchedule::timesteps)
        .def("beta", &NoiseSchedule::beta)
        .def("alpha_bar", &NoiseSchedule::alpha_bar);

    m.def("q_sample", [](const py::array_t<double>& x0, int t, const py::array_t<double>& noise,
                         const NoiseSchedule& schedule) {
        if (x0.size() != noise.size()) throw py::value_error("shape mismatch");
        NoGradGuard ng;
        auto xt = make_tensor<double>({static_cast<int>(x0.size())});
        auto nt = make_tensor<double>({static_cast<int>(noise.size())});
        std::copy(x0.data(), x0.data() + x0.size(), xt->val.begin());
        std::copy(noise.data(), noise.data() + noise.size(), nt->val.begin());
        auto out = q_sample(xt, t, nt, schedule);
        return py::array_t<double>(static_cast<py::ssize_t>(out->numel()), out->val.data());
    });

    m.def("procedure_consistency",
          [](const std::vector<std::string>& texts,
             const std::vector<py::array_t<uint8_t>>& images,
             const std::shared_ptr<EmbeddingProvider>& encoder) {
              std::vector<Image8> imgs;
              imgs.reserve(images.size());
              for (const auto& a : images) imgs.push_back(image_from_array(a));
              auto pc = procedure_consistency(texts, imgs, *encoder);
              return py::make_tuple(pc.p_values, pc.p);
          });

    m.def("frechet_distance",
          [](const py::array_t<double>& mu_a, const py::array_t<double>& cov_a,
             const py::array_t<double>& mu_b, const py::array_t<double>& cov_b) {
              Eigen::VectorXd ma = Eigen::Map<const Eigen::VectorXd>(mu_a.data(), mu_a.size());
              Eigen::VectorXd mb = Eigen::Map<const Eigen::VectorXd>(mu_b.data(), mu_b.size());
              FeatureStats a(ma, eigen_from_array(cov_a), 2);
              FeatureStats b(mb, eigen_from_array(cov_b), 2);
              return frechet_distance(a, b);
          });

    m.def(
        "fid_over_sets",
        [](const std::vector<py::array_t<uint8_t>>& real,
           const std::vector<py::array_t<uint8_t>>& gen, const std::string& extractor,
           uint64_t seed) {
            std::vector<Image8> r, g;
            for (const auto& a : real) r.push_back(image_from_array(a));
            for (const auto& a : gen) g.push_back(image_from_array(a));
            return fid_over_sets(r, g, make_feature_extractor(extractor, "", seed));
        },
        py::arg("real"), py::arg("gen"), py::arg("extractor") = "toy", py::arg("seed") = 0);
}

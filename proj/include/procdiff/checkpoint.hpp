#pragma once

// Flat named-tensor archive: 8-byte magic, u64 header length, JSON header
// (dtype, tensor names/shapes/offsets, optimizer step count), raw data.

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "procdiff/nn.hpp"

namespace procdiff {

namespace ckpt_detail {
constexpr char kMagic[8] = {'P', 'D', 'C', 'K', 'P', 'T', '1', '\n'};

template <class T>
const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}
}  // namespace ckpt_detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& ps,
                     const Adam<T>* opt = nullptr,
                     const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header;
    header["dtype"] = ckpt_detail::dtype_name<T>();
    header["meta"] = meta;
    header["tensors"] = nlohmann::json::array();

    std::vector<const std::vector<T>*> blobs;
    uint64_t offset = 0;
    auto add_blob = [&](const std::string& name, const std::vector<int>& shape,
                        const std::vector<T>& data) {
        nlohmann::json t;
        t["name"] = name;
        t["shape"] = shape;
        t["offset"] = offset;
        t["count"] = data.size();
        header["tensors"].push_back(t);
        blobs.push_back(&data);
        offset += data.size() * sizeof(T);
    };
    for (const auto& [name, p] : ps.items) add_blob(name, p->shape, p->val);
    if (opt) {
        header["adam_steps"] = opt->step_count;
        for (size_t i = 0; i < opt->m.size() && i < ps.items.size(); ++i) {
            add_blob("adam.m." + ps.items[i].first, ps.items[i].second->shape, opt->m[i]);
            add_blob("adam.v." + ps.items[i].first, ps.items[i].second->shape, opt->v[i]);
        }
    }

    std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write checkpoint: " + path.string());
    out.write(ckpt_detail::kMagic, 8);
    uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto* blob : blobs)
        out.write(reinterpret_cast<const char*>(blob->data()),
                  static_cast<std::streamsize>(blob->size() * sizeof(T)));
    if (!out) fail(ErrorKind::Io, "short checkpoint write: " + path.string());
}

// Reads just the meta document of an archive (cheap, no tensor data).
inline nlohmann::json read_checkpoint_meta(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open checkpoint: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, ckpt_detail::kMagic, 8) != 0)
        fail(ErrorKind::Parse, "not a checkpoint file: " + path.string());
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) fail(ErrorKind::Parse, "truncated checkpoint: " + path.string());
    try {
        return nlohmann::json::parse(hs).value("meta", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, std::string("bad checkpoint header: ") + e.what());
    }
}

// Loads values into an already-constructed store; names and shapes must
// match. Returns the stored meta document.
template <class T>
nlohmann::json load_checkpoint(const std::filesystem::path& path, ParamStore<T>& ps,
                               Adam<T>* opt = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open checkpoint: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, ckpt_detail::kMagic, 8) != 0)
        fail(ErrorKind::Parse, "not a checkpoint file: " + path.string());
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, std::string("bad checkpoint header: ") + e.what());
    }
    if (header.value("dtype", "") != ckpt_detail::dtype_name<T>())
        fail(ErrorKind::Config, "checkpoint dtype mismatch: stored " +
                                    header.value("dtype", "?") + ", expected " +
                                    ckpt_detail::dtype_name<T>());

    uint64_t data_start = 16 + hlen;
    auto read_blob = [&](uint64_t offset, size_t count, std::vector<T>& dst) {
        dst.resize(count);
        in.seekg(static_cast<std::streamoff>(data_start + offset));
        in.read(reinterpret_cast<char*>(dst.data()),
                static_cast<std::streamsize>(count * sizeof(T)));
        if (!in) fail(ErrorKind::Parse, "truncated checkpoint: " + path.string());
    };

    if (opt) {
        opt->ensure_state(ps);
        opt->step_count = header.value("adam_steps", int64_t{0});
    }
    size_t loaded = 0;
    for (const auto& t : header.at("tensors")) {
        std::string name = t.at("name").get<std::string>();
        auto count = t.at("count").get<size_t>();
        auto offset = t.at("offset").get<uint64_t>();
        if (name.rfind("adam.m.", 0) == 0 || name.rfind("adam.v.", 0) == 0) {
            if (!opt) continue;
            bool is_m = name[5] == 'm';
            std::string pname = name.substr(7);
            for (size_t i = 0; i < ps.items.size(); ++i)
                if (ps.items[i].first == pname)
                    read_blob(offset, count, is_m ? opt->m[i] : opt->v[i]);
            continue;
        }
        auto p = ps.find(name);
        if (!p) fail(ErrorKind::Config, "checkpoint tensor not in model: " + name);
        if (t.at("shape").get<std::vector<int>>() != p->shape)
            fail(ErrorKind::Config, "checkpoint shape mismatch for " + name);
        read_blob(offset, count, p->val);
        ++loaded;
    }
    if (loaded != ps.items.size())
        fail(ErrorKind::Config, "checkpoint is missing model tensors");
    return header.value("meta", nlohmann::json::object());
}

}  // namespace procdiff

#include "procdiff/config.hpp"

#include <cstdlib>
#include <fstream>

#include "procdiff/common.hpp"

namespace procdiff {

void RunConfig::set_default(const std::string& key, nlohmann::json value) {
    known_.insert(key);
    values_[key] = std::move(value);
}

void RunConfig::require_known(const std::string& key) const {
    if (!known_.count(key))
        fail(ErrorKind::Config, "unknown configuration key: " + key);
}

void RunConfig::load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, "config " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) fail(ErrorKind::Parse, "config must be a flat JSON object");
    for (auto& [key, value] : j.items()) {
        require_known(key);
        values_[key] = value;
    }
}

void RunConfig::set(const std::string& key, nlohmann::json value) {
    require_known(key);
    values_[key] = std::move(value);
}

std::string RunConfig::env_name(const std::string& key) {
    std::string name = "PROCDIFF_";
    for (char c : key)
        name.push_back(c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    return name;
}

void RunConfig::apply_env() {
    for (const auto& key : known_) {
        const char* raw = std::getenv(env_name(key).c_str());
        if (!raw) continue;
        // parse as JSON when possible, else take the raw string
        nlohmann::json parsed = nlohmann::json::parse(raw, nullptr, false);
        values_[key] = parsed.is_discarded() ? nlohmann::json(std::string(raw)) : parsed;
    }
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) > 0; }

const nlohmann::json& RunConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) fail(ErrorKind::Config, "missing configuration key: " + key);
    return it->second;
}

std::string RunConfig::get_string(const std::string& key) const {
    const auto& v = get(key);
    return v.is_string() ? v.get<std::string>() : v.dump();
}

double RunConfig::get_double(const std::string& key) const {
    const auto& v = get(key);
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) return std::stod(v.get<std::string>());
    fail(ErrorKind::Config, "key " + key + " is not numeric");
}

int64_t RunConfig::get_int(const std::string& key) const {
    const auto& v = get(key);
    if (v.is_number_integer()) return v.get<int64_t>();
    if (v.is_number()) return static_cast<int64_t>(v.get<double>());
    if (v.is_string()) return std::stoll(v.get<std::string>());
    fail(ErrorKind::Config, "key " + key + " is not an integer");
}

bool RunConfig::get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v.is_boolean()) return v.get<bool>();
    if (v.is_string()) return v.get<std::string>() == "true" || v.get<std::string>() == "1";
    if (v.is_number()) return v.get<double>() != 0.0;
    fail(ErrorKind::Config, "key " + key + " is not a boolean");
}

nlohmann::json RunConfig::snapshot() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [key, value] : values_) j[key] = value;
    return j;
}

uint64_t hash_file_contents(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot hash missing file: " + path.string());
    uint64_t h = 14695981039346656037ull;
    char buf[1 << 14];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
        h = fnv1a_bytes(buf, static_cast<size_t>(in.gcount()), h);
    return h;
}

void RunConfig::write_snapshot(const std::filesystem::path& out_dir,
                               const std::vector<std::filesystem::path>& inputs) const {
    std::filesystem::create_directories(out_dir);
    nlohmann::ordered_json j;
    j["config"] = snapshot();
    j["inputs"] = nlohmann::ordered_json::object();
    for (const auto& p : inputs) {
        char hex[32];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(hash_file_contents(p)));
        j["inputs"][p.string()] = hex;
    }
    std::ofstream out(out_dir / "run_config.json", std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write run_config.json under " + out_dir.string());
    out << j.dump(2) << "\n";
}

}  // namespace procdiff

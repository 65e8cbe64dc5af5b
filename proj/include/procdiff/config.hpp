#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>

#include <json.hpp>

namespace procdiff {

// Layered key-value configuration: defaults < config file < flags < env
// vars (PROCDIFF_* wins). Keys are dotted, e.g. "encoder.backend"; the env
// name of a key is PROCDIFF_ + uppercase with dots as underscores.
class RunConfig {
public:
    void set_default(const std::string& key, nlohmann::json value);
    void load_file(const std::filesystem::path& path);  // flat JSON object
    void set(const std::string& key, nlohmann::json value);  // flags layer
    void apply_env();

    bool has(const std::string& key) const;
    const nlohmann::json& get(const std::string& key) const;
    std::string get_string(const std::string& key) const;
    double get_double(const std::string& key) const;
    int64_t get_int(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    nlohmann::json snapshot() const;

    // Resolved config plus content hashes of the named inputs, written as
    // run_config.json into out_dir.
    void write_snapshot(const std::filesystem::path& out_dir,
                        const std::vector<std::filesystem::path>& inputs) const;

    static std::string env_name(const std::string& key);

private:
    void require_known(const std::string& key) const;
    std::map<std::string, nlohmann::json> values_;
    std::set<std::string> known_;
};

uint64_t hash_file_contents(const std::filesystem::path& path);

}  // namespace procdiff

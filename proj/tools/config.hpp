#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fovea/common.hpp"

namespace fovea::cli {

using nlohmann::json;

struct ConfigIssue {
    std::string path;  ///< JSON pointer into the config document
    std::string message;
};

/// Thrown after validation with every schema problem found.
class ConfigError : public Error {
public:
    explicit ConfigError(std::vector<ConfigIssue> issues);
    const std::vector<ConfigIssue>& issues() const { return issues_; }

private:
    std::vector<ConfigIssue> issues_;
};

class Issues {
public:
    void add(std::string path, std::string message) { list_.push_back({std::move(path), std::move(message)}); }
    bool empty() const { return list_.empty(); }
    void throw_if_any() const;

private:
    std::vector<ConfigIssue> list_;
};

/// Typed view of one JSON object. Every read records the resolved value
/// (default included) in `resolved`; keys never read are reported by finish().
class Section {
public:
    Section(const json* node, json* resolved, std::string path, Issues* issues);

    bool has(const std::string& key) const;
    const std::string& path() const { return path_; }
    std::string path_of(const std::string& key) const { return path_ + "/" + key; }

    double number(const std::string& key, double fallback, std::optional<double> min = {},
                  std::optional<double> max = {});
    int integer(const std::string& key, int fallback, std::optional<int> min = {}, std::optional<int> max = {});
    std::uint64_t seed(const std::string& key, std::uint64_t fallback);
    bool boolean(const std::string& key, bool fallback);
    std::string string(const std::string& key, const std::string& fallback,
                       const std::vector<std::string>& allowed = {});
    /// Required string; records an issue and returns "" when missing.
    std::string required_string(const std::string& key);
    std::vector<double> numbers(const std::string& key, const std::vector<double>& fallback,
                                std::optional<std::size_t> size = {});
    std::vector<int> integers(const std::string& key, const std::vector<int>& fallback, std::optional<int> min = {});
    std::vector<std::string> strings(const std::string& key, const std::vector<std::string>& fallback);
    /// Raw array of objects; each element is handed out as a Section.
    std::vector<Section> objects(const std::string& key);

    /// Nested object; missing keys yield an empty section that resolves to defaults.
    Section child(const std::string& key);

    /// Accept keys without reading them (sections handled elsewhere).
    void allow(std::initializer_list<const char*> keys);
    /// Report keys that were never read.
    void finish();

private:
    const json* get(const std::string& key);
    void type_error(const std::string& key, const char* expected);

    const json* node_;
    json* resolved_;
    std::string path_;
    Issues* issues_;
    std::set<std::string> used_;
};

struct RunConfig {
    std::filesystem::path config_path;
    std::filesystem::path base_dir;  ///< relative paths resolve against this
    json document;
    json resolved = json::object();
    std::uint64_t seed = 0;
    std::filesystem::path out_dir;
    int threads = 1;
    Issues issues;  ///< schema problems found so far; commands add theirs

    std::filesystem::path resolve(const std::string& p) const;
};

/// Reads the document (only unparsable JSON throws); CLI overrides take precedence, then FOVEA_THREADS for threads.
RunConfig load_run_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override,
                          std::optional<std::string> out_override, std::optional<int> threads_override);

}  // namespace fovea::cli

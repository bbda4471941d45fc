#include "config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace fovea::cli {

namespace {

std::string summarize(const std::vector<ConfigIssue>& issues) {
    std::ostringstream os;
    os << issues.size() << " config error" << (issues.size() == 1 ? "" : "s");
    for (const auto& i : issues) os << "; " << (i.path.empty() ? "/" : i.path) << ": " << i.message;
    return os.str();
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

const char* kRootKeys[] = {"system", "seed",   "out",       "threads", "optimize", "analyze",
                           "render", "fuse",   "control",   "calibrate", "track"};

}  // namespace

ConfigError::ConfigError(std::vector<ConfigIssue> issues) : Error(summarize(issues)), issues_(std::move(issues)) {}

void Issues::throw_if_any() const {
    if (!list_.empty()) throw ConfigError(list_);
}

Section::Section(const json* node, json* resolved, std::string path, Issues* issues)
    : node_(node), resolved_(resolved), path_(std::move(path)), issues_(issues) {
    if (node_ && !node_->is_object()) {
        issues_->add(path_.empty() ? "/" : path_, "expected an object");
        node_ = nullptr;
    }
    if (!resolved_->is_object()) *resolved_ = json::object();
}

bool Section::has(const std::string& key) const { return node_ && node_->contains(key); }

const json* Section::get(const std::string& key) {
    used_.insert(key);
    if (!node_) return nullptr;
    auto it = node_->find(key);
    return it == node_->end() ? nullptr : &*it;
}

void Section::type_error(const std::string& key, const char* expected) {
    issues_->add(path_of(key), std::string("expected ") + expected);
}

double Section::number(const std::string& key, double fallback, std::optional<double> min,
                       std::optional<double> max) {
    double v = fallback;
    if (const json* j = get(key)) {
        if (!j->is_number()) {
            type_error(key, "a number");
        } else {
            v = j->get<double>();
            if ((min && v < *min) || (max && v > *max)) {
                std::string range = "must be";
                if (min) range += " >= " + fmt(*min);
                if (min && max) range += " and";
                if (max) range += " <= " + fmt(*max);
                issues_->add(path_of(key), range);
                v = fallback;
            }
        }
    }
    (*resolved_)[key] = v;
    return v;
}

int Section::integer(const std::string& key, int fallback, std::optional<int> min, std::optional<int> max) {
    int v = fallback;
    if (const json* j = get(key)) {
        if (!j->is_number_integer()) {
            type_error(key, "an integer");
        } else {
            const auto raw = j->get<long long>();
            if ((min && raw < *min) || (max && raw > *max)) {
                std::string range = "must be";
                if (min) range += " >= " + std::to_string(*min);
                if (min && max) range += " and";
                if (max) range += " <= " + std::to_string(*max);
                issues_->add(path_of(key), range);
            } else {
                v = static_cast<int>(raw);
            }
        }
    }
    (*resolved_)[key] = v;
    return v;
}

std::uint64_t Section::seed(const std::string& key, std::uint64_t fallback) {
    std::uint64_t v = fallback;
    if (const json* j = get(key)) {
        if (j->is_number_unsigned())
            v = j->get<std::uint64_t>();
        else if (j->is_number_integer())
            issues_->add(path_of(key), "must be non-negative");
        else
            type_error(key, "a non-negative integer");
    }
    (*resolved_)[key] = v;
    return v;
}

bool Section::boolean(const std::string& key, bool fallback) {
    bool v = fallback;
    if (const json* j = get(key)) {
        if (!j->is_boolean())
            type_error(key, "a boolean");
        else
            v = j->get<bool>();
    }
    (*resolved_)[key] = v;
    return v;
}

std::string Section::string(const std::string& key, const std::string& fallback,
                            const std::vector<std::string>& allowed) {
    std::string v = fallback;
    if (const json* j = get(key)) {
        if (!j->is_string()) {
            type_error(key, "a string");
        } else {
            v = j->get<std::string>();
            if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
                std::string list;
                for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
                issues_->add(path_of(key), "must be one of: " + list);
                v = fallback;
            }
        }
    }
    (*resolved_)[key] = v;
    return v;
}

std::string Section::required_string(const std::string& key) {
    if (!has(key)) {
        used_.insert(key);
        issues_->add(path_of(key), "is required");
        return {};
    }
    return string(key, "");
}

std::vector<double> Section::numbers(const std::string& key, const std::vector<double>& fallback,
                                     std::optional<std::size_t> size) {
    std::vector<double> v = fallback;
    if (const json* j = get(key)) {
        bool ok = j->is_array();
        if (ok)
            for (const auto& e : *j) ok = ok && e.is_number();
        if (!ok) {
            type_error(key, "an array of numbers");
        } else if (size && j->size() != *size) {
            issues_->add(path_of(key), "expected " + std::to_string(*size) + " numbers");
        } else {
            v = j->get<std::vector<double>>();
        }
    }
    (*resolved_)[key] = v;
    return v;
}

std::vector<int> Section::integers(const std::string& key, const std::vector<int>& fallback, std::optional<int> min) {
    std::vector<int> v = fallback;
    if (const json* j = get(key)) {
        bool ok = j->is_array();
        if (ok)
            for (const auto& e : *j) ok = ok && e.is_number_integer() && (!min || e.get<long long>() >= *min);
        if (!ok)
            type_error(key, min ? ("an array of integers >= " + std::to_string(*min)).c_str() : "an array of integers");
        else
            v = j->get<std::vector<int>>();
    }
    (*resolved_)[key] = v;
    return v;
}

std::vector<std::string> Section::strings(const std::string& key, const std::vector<std::string>& fallback) {
    std::vector<std::string> v = fallback;
    if (const json* j = get(key)) {
        bool ok = j->is_array();
        if (ok)
            for (const auto& e : *j) ok = ok && e.is_string();
        if (!ok)
            type_error(key, "an array of strings");
        else
            v = j->get<std::vector<std::string>>();
    }
    (*resolved_)[key] = v;
    return v;
}

std::vector<Section> Section::objects(const std::string& key) {
    std::vector<Section> out;
    const json* j = get(key);
    json& dst = (*resolved_)[key];
    dst = json::array();
    if (!j) return out;
    if (!j->is_array()) {
        type_error(key, "an array of objects");
        return out;
    }
    for (std::size_t i = 0; i < j->size(); ++i) dst.push_back(json::object());
    for (std::size_t i = 0; i < j->size(); ++i)
        out.emplace_back(&(*j)[i], &dst[i], path_of(key) + "/" + std::to_string(i), issues_);
    return out;
}

Section Section::child(const std::string& key) {
    const json* j = get(key);
    return Section(j, &(*resolved_)[key], path_of(key), issues_);
}

void Section::allow(std::initializer_list<const char*> keys) {
    for (const char* k : keys) used_.insert(k);
}

void Section::finish() {
    if (!node_) return;
    for (const auto& [key, value] : node_->items())
        if (!used_.count(key)) issues_->add(path_of(key), "unknown key");
}

std::filesystem::path RunConfig::resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
}

RunConfig load_run_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override,
                          std::optional<std::string> out_override, std::optional<int> threads_override) {
    RunConfig rc;
    rc.config_path = path;
    rc.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    try {
        rc.document = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::vector<ConfigIssue>{{"", std::string("invalid JSON: ") + e.what()}});
    }
    Issues& issues = rc.issues;
    Section root(&rc.document, &rc.resolved, "", &issues);
    rc.seed = root.seed("seed", 0);
    const std::string out = root.string("out", "out");
    int threads = root.integer("threads", 1, 1, 1024);
    for (const char* k : kRootKeys) root.allow({k});
    root.finish();

    if (seed_override) rc.seed = *seed_override;
    rc.out_dir = (out_override ? std::filesystem::path(*out_override) : rc.resolve(out)).lexically_normal();
    if (const char* env = std::getenv("FOVEA_THREADS"); env && *env) {
        char* end = nullptr;
        const long t = std::strtol(env, &end, 10);
        if (*end != '\0' || t < 1)
            issues.add("env:FOVEA_THREADS", "must be a positive integer");
        else
            threads = static_cast<int>(t);
    }
    if (threads_override) threads = *threads_override;
    rc.threads = threads;
    rc.resolved["seed"] = rc.seed;
    rc.resolved["out"] = rc.out_dir.string();
    rc.resolved["threads"] = rc.threads;
    return rc;
}

}  // namespace fovea::cli

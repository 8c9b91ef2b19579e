#pragma once

// Training run configuration. Files are TOML or JSON:
//
//   seed = 7
//   epochs = 300
//   [optimizer]
//   lr = 5e-5
//   [[runs]]
//   name = "fc"
//   model = "fc"
//   case = "bin_features"
//
// Top-level keys are defaults for every entry of [[runs]]; a run's own keys
// win, and MRP_TRAIN_<KEY> environment variables win over both ("__"
// separates nested keys, e.g. MRP_TRAIN_OPTIMIZER__LR=1e-4).

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "mrp/common.hpp"
#include "mrp/models.hpp"
#include "mrp/optim.hpp"

extern char** environ;

namespace mrp {

enum class DataCase { interpolate_gt, bin_features };

inline std::string_view to_string(DataCase c) {
    return c == DataCase::interpolate_gt ? "interpolate_gt" : "bin_features";
}

inline DataCase parse_data_case(std::string_view s) {
    if (s == "interpolate_gt") return DataCase::interpolate_gt;
    if (s == "bin_features") return DataCase::bin_features;
    throw ConfigError("case must be interpolate_gt or bin_features, got '" + std::string(s) + "'");
}

struct TrainConfig {
    std::string name = "run";
    ModelConfig model;
    DataCase data_case = DataCase::bin_features;
    std::size_t target_len = kCurveLength;  // bin_features only: 100 or 10
    double margin = 0.01;
    std::size_t epochs = 300;
    std::size_t eval_window = 50;
    std::size_t folds = 5;
    std::vector<std::size_t> run_folds;  // empty = all folds
    std::uint64_t seed = 0;
    std::size_t max_pairs = 10000;
    std::vector<std::size_t> ks{15, 30, 50};
    bool eval_every_epoch = false;
    AdamConfig optimizer;

    /// Length of the score vectors compared at evaluation time.
    std::size_t eval_len() const {
        return data_case == DataCase::bin_features && target_len == 10 ? 10 : kCurveLength;
    }

    std::size_t first_eval_epoch() const { return epochs - eval_window; }

    void validate() const {
        model.validate();
        if (epochs == 0) throw ConfigError("epochs must be positive");
        if (eval_window == 0 || eval_window > epochs) throw ConfigError("eval_window must lie in [1, epochs]");
        if (folds < 2) throw ConfigError("folds must be >= 2");
        for (auto f : run_folds) {
            if (f >= folds) throw ConfigError("run_folds entry " + std::to_string(f) + " >= folds");
        }
        if (max_pairs == 0) throw ConfigError("max_pairs must be positive");
        if (!(margin >= 0.0)) throw ConfigError("margin must be >= 0");
        if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
        if (!(optimizer.l2 >= 0.0)) throw ConfigError("optimizer.l2 must be >= 0");
        if (data_case == DataCase::bin_features && target_len != 100 && target_len != 10) {
            throw ConfigError("bin_features target_len must be 100 or 10");
        }
        if (ks.empty()) throw ConfigError("ks must not be empty");
        for (auto k : ks) {
            if (k < 1 || k > eval_len()) {
                throw ConfigError("k = " + std::to_string(k) + " outside [1, " + std::to_string(eval_len()) + "]");
            }
        }
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"name", c.name},
         {"model", std::string(to_string(c.model.kind))},
         {"case", std::string(to_string(c.data_case))},
         {"target_len", c.target_len},
         {"margin", c.margin},
         {"epochs", c.epochs},
         {"eval_window", c.eval_window},
         {"folds", c.folds},
         {"run_folds", c.run_folds},
         {"seed", c.seed},
         {"max_pairs", c.max_pairs},
         {"ks", c.ks},
         {"eval_every_epoch", c.eval_every_epoch},
         {"optimizer",
          {{"lr", c.optimizer.lr},
           {"beta1", c.optimizer.beta1},
           {"beta2", c.optimizer.beta2},
           {"eps", c.optimizer.eps},
           {"l2", c.optimizer.l2}}},
         {"network",
          {{"input_dim", c.model.input_dim},
           {"hidden", c.model.hidden},
           {"global_heads", c.model.global_heads},
           {"local_heads", c.model.local_heads},
           {"windows", c.model.windows},
           {"dropout", c.model.dropout},
           {"layer_norm_eps", c.model.layer_norm_eps}}}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known, std::string_view where) {
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("unknown key '" + key + "' in " + std::string(where));
        }
    }
}

}  // namespace detail

/// Builds a validated config; a missing margin follows target_len (0.05 for
/// 10 shots, 0.01 otherwise), missing ks follow the evaluation length.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("run configuration must be a table");
    detail::reject_unknown(j,
                           {"name", "model", "case", "target_len", "margin", "epochs", "eval_window", "folds",
                            "run_folds", "seed", "max_pairs", "ks", "eval_every_epoch", "optimizer", "network"},
                           "run");
    TrainConfig c;
    try {
        c.name = j.value("name", c.name);
        if (j.contains("model")) c.model.kind = parse_model_kind(j.at("model").get<std::string>());
        if (j.contains("case")) c.data_case = parse_data_case(j.at("case").get<std::string>());
        c.target_len = j.value("target_len", c.target_len);
        c.margin = j.contains("margin") ? j.at("margin").get<double>() : (c.target_len == 10 ? 0.05 : 0.01);
        c.epochs = j.value("epochs", c.epochs);
        c.eval_window = j.value("eval_window", std::min(c.eval_window, c.epochs));
        c.folds = j.value("folds", c.folds);
        c.run_folds = j.value("run_folds", c.run_folds);
        c.seed = j.value("seed", c.seed);
        c.max_pairs = j.value("max_pairs", c.max_pairs);
        if (j.contains("ks")) {
            c.ks = j.at("ks").get<std::vector<std::size_t>>();
        } else if (c.eval_len() == 10) {
            c.ks = {1, 3, 5};
        }
        c.eval_every_epoch = j.value("eval_every_epoch", c.eval_every_epoch);
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            detail::reject_unknown(o, {"lr", "beta1", "beta2", "eps", "l2"}, "optimizer");
            c.optimizer.lr = o.value("lr", c.optimizer.lr);
            c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
            c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
            c.optimizer.eps = o.value("eps", c.optimizer.eps);
            c.optimizer.l2 = o.value("l2", c.optimizer.l2);
        }
        if (j.contains("network")) {
            const auto& n = j.at("network");
            detail::reject_unknown(
                n, {"input_dim", "hidden", "global_heads", "local_heads", "windows", "dropout", "layer_norm_eps"},
                "network");
            nlohmann::json m = n;
            m["kind"] = to_string(c.model.kind);
            c.model = m.get<ModelConfig>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad value in run '") + c.name + "': " + e.what());
    }
    if (c.data_case == DataCase::interpolate_gt) c.target_len = 0;
    c.validate();
    return c;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Hash of the canonical (sorted-key) JSON form; the run name is excluded.
inline std::string config_hash(const TrainConfig& c) {
    nlohmann::json j = c;
    j.erase("name");
    return hex64(fnv1a(j.dump()));
}

// TOML tables map onto JSON objects one to one.
inline nlohmann::json toml_to_json(const toml::node& node) {
    if (const auto* t = node.as_table()) {
        nlohmann::json out = nlohmann::json::object();
        for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
        return out;
    }
    if (const auto* a = node.as_array()) {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& v : *a) out.push_back(toml_to_json(v));
        return out;
    }
    if (const auto* v = node.as_integer()) return v->get();
    if (const auto* v = node.as_floating_point()) return v->get();
    if (const auto* v = node.as_boolean()) return v->get();
    if (const auto* v = node.as_string()) return v->get();
    throw ConfigError("unsupported TOML value (dates and times are not configuration values)");
}

inline nlohmann::json parse_config_text(std::string_view text, std::string_view source_name, bool json) {
    if (json) {
        try {
            return nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(std::string(source_name) + ": " + e.what());
        }
    }
    try {
        return toml_to_json(toml::parse(text, source_name));
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << source_name << ":" << e.source().begin.line << ":" << e.source().begin.column << ": "
           << e.description();
        throw ConfigError(os.str());
    }
}

inline nlohmann::json read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return parse_config_text(os.str(), path.string(), path.extension() == ".json");
}

/// Environment entries starting with `prefix`, keys lower-cased, "__" split
/// into a path. Values parse as JSON when they can, else stay strings.
inline std::vector<std::pair<std::vector<std::string>, nlohmann::json>> env_overrides(std::string_view prefix) {
    std::vector<std::pair<std::vector<std::string>, nlohmann::json>> out;
    for (char** e = environ; e && *e; ++e) {
        const std::string_view entry(*e);
        if (!entry.starts_with(prefix)) continue;
        const auto eq = entry.find('=');
        if (eq == std::string_view::npos) continue;
        std::string key(entry.substr(prefix.size(), eq - prefix.size()));
        const std::string value(entry.substr(eq + 1));
        for (auto& ch : key) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        std::vector<std::string> path;
        std::size_t start = 0;
        while (true) {
            const auto sep = key.find("__", start);
            path.push_back(key.substr(start, sep - start));
            if (sep == std::string::npos) break;
            start = sep + 2;
        }
        nlohmann::json v = nlohmann::json::parse(value, nullptr, false);
        if (v.is_discarded()) v = value;
        out.emplace_back(std::move(path), std::move(v));
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

inline void apply_override(nlohmann::json& target, const std::vector<std::string>& path, const nlohmann::json& value) {
    nlohmann::json* node = &target;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
        nlohmann::json& next = (*node)[path[i]];
        if (next.is_null()) next = nlohmann::json::object();
        if (!next.is_object()) throw ConfigError("override path crosses non-table key '" + path[i] + "'");
        node = &next;
    }
    (*node)[path.back()] = value;
}

/// One resolved config per [[runs]] entry (or a single run when the file
/// has no [[runs]]).
inline std::vector<TrainConfig> resolve_train_configs(const nlohmann::json& doc, std::string_view env_prefix = "MRP_TRAIN_") {
    if (!doc.is_object()) throw ConfigError("config root must be a table");
    nlohmann::json defaults = doc;
    defaults.erase("runs");
    std::vector<nlohmann::json> runs;
    if (doc.contains("runs")) {
        if (!doc.at("runs").is_array() || doc.at("runs").empty()) throw ConfigError("'runs' must be a non-empty array");
        for (const auto& r : doc.at("runs")) {
            nlohmann::json merged = defaults;
            merged.merge_patch(r);
            runs.push_back(std::move(merged));
        }
    } else {
        runs.push_back(defaults);
    }
    const auto overrides = env_overrides(env_prefix);
    std::vector<TrainConfig> out;
    for (auto& r : runs) {
        for (const auto& [path, value] : overrides) apply_override(r, path, value);
        out.push_back(train_config_from_json(r));
    }
    for (std::size_t a = 0; a < out.size(); ++a) {
        for (std::size_t b = a + 1; b < out.size(); ++b) {
            if (out[a].name == out[b].name) throw ConfigError("duplicate run name '" + out[a].name + "'");
        }
    }
    return out;
}

}  // namespace mrp

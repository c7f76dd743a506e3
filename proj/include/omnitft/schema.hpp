#pragma once

#include <cstddef>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnitft/diff.hpp"
#include "omnitft/error.hpp"

namespace omnitft {

enum class Role { static_covariate, observed_past, known_future, target };
enum class DType { continuous, categorical };

struct FeatureSpec {
    std::string name;
    Role role = Role::observed_past;
    DType dtype = DType::continuous;
    /// Categorical only. Either vocab is listed (CSV values are labels) or only
    /// vocab_size is given (CSV values are integer indices).
    std::size_t vocab_size = 0;
    std::vector<std::string> vocab;
    std::string unit;

    [[nodiscard]] bool categorical() const noexcept { return dtype == DType::categorical; }

    friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

struct DatasetSchema {
    std::vector<FeatureSpec> features;
    double grid_step_min = 10.0;
    std::size_t encoder_len = 72;
    std::size_t horizon_len = 12;

    [[nodiscard]] std::size_t window_len() const noexcept { return encoder_len + horizon_len; }

    /// Feature indices of the past-side (temporal) variables in schema order:
    /// targets, observed and known inputs. Their count is N_h.
    [[nodiscard]] std::vector<std::size_t> past_vars() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < features.size(); ++i)
            if (features[i].role != Role::static_covariate) out.push_back(i);
        return out;
    }
    [[nodiscard]] std::vector<std::size_t> future_vars() const { return with_role(Role::known_future); }
    [[nodiscard]] std::vector<std::size_t> static_vars() const { return with_role(Role::static_covariate); }
    [[nodiscard]] std::vector<std::size_t> targets() const { return with_role(Role::target); }

    [[nodiscard]] std::size_t n_past() const { return past_vars().size(); }
    [[nodiscard]] std::size_t n_future() const { return future_vars().size(); }

    [[nodiscard]] std::optional<std::size_t> index_of(const std::string& name) const {
        for (std::size_t i = 0; i < features.size(); ++i)
            if (features[i].name == name) return i;
        return std::nullopt;
    }

    friend bool operator==(const DatasetSchema&, const DatasetSchema&) = default;

private:
    [[nodiscard]] std::vector<std::size_t> with_role(Role r) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < features.size(); ++i)
            if (features[i].role == r) out.push_back(i);
        return out;
    }
};

/// Checks every schema invariant and returns the schema with categorical
/// vocab sizes filled in from explicit vocabularies. Idempotent.
inline DatasetSchema validate_schema(DatasetSchema schema) {
    std::set<std::string> names;
    bool has_target = false;
    for (auto& f : schema.features) {
        require(!f.name.empty(), Errc::InvalidSchema, "feature with empty name");
        require(names.insert(f.name).second, Errc::DuplicateFeatureName, f.name);
        if (f.role == Role::target) {
            has_target = true;
            require(!f.categorical(), Errc::CategoricalTarget, f.name);
        }
        if (f.categorical()) {
            if (!f.vocab.empty()) {
                require(f.vocab_size == 0 || f.vocab_size == f.vocab.size(), Errc::InvalidSchema,
                        f.name + ": vocab_size disagrees with vocab list");
                f.vocab_size = f.vocab.size();
                std::set<std::string> labels(f.vocab.begin(), f.vocab.end());
                require(labels.size() == f.vocab.size(), Errc::InvalidSchema, f.name + ": repeated vocab label");
            }
            require(f.vocab_size >= 1, Errc::InvalidSchema, f.name + ": categorical needs vocab_size >= 1");
        } else {
            require(f.vocab_size == 0 && f.vocab.empty(), Errc::InvalidSchema,
                    f.name + ": continuous feature must not carry a vocabulary");
        }
    }
    require(has_target, Errc::NoTarget, "schema declares no target feature");
    require(schema.encoder_len >= 1 && schema.horizon_len >= 1, Errc::ZeroLengthWindow,
            "encoder_len and horizon_len must be >= 1");
    require(schema.grid_step_min > 0.0, Errc::InvalidSchema, "grid_step_min must be positive");
    return schema;
}

enum class Group : std::size_t { unknown = 0, known = 1, observed = 2 };

/// Fixed one-hot assignment of past-side variables to {unknown, known, observed}.
struct GroupAssignment {
    /// 3 x N_h, entries 0/1, columns one-hot.
    diff::Tensor matrix;

    [[nodiscard]] std::size_t n_vars() const noexcept { return matrix.cols(); }
    [[nodiscard]] Group group_of(std::size_t j) const {
        for (std::size_t g = 0; g < 3; ++g)
            if (matrix(g, j) == 1.0) return static_cast<Group>(g);
        fail(Errc::InvalidSchema, "column without group");
    }
};

inline Group group_for_role(Role r) {
    switch (r) {
    case Role::target: return Group::unknown;
    case Role::known_future: return Group::known;
    case Role::observed_past: return Group::observed;
    case Role::static_covariate: break;
    }
    fail(Errc::InvalidSchema, "static covariates have no temporal group");
}

inline GroupAssignment build_group_assignment(const DatasetSchema& schema) {
    const auto past = validate_schema(schema).past_vars();
    GroupAssignment ga{diff::Tensor(3, past.size())};
    for (std::size_t j = 0; j < past.size(); ++j)
        ga.matrix(static_cast<std::size_t>(group_for_role(schema.features[past[j]].role)), j) = 1.0;
    return ga;
}

// ---------------------------------------------------------------------------
// JSON

inline std::string role_name(Role r) {
    switch (r) {
    case Role::static_covariate: return "static";
    case Role::observed_past: return "observed_past";
    case Role::known_future: return "known_future";
    case Role::target: return "target";
    }
    return "?";
}

inline Role role_from_name(const std::string& s) {
    if (s == "static") return Role::static_covariate;
    if (s == "observed_past") return Role::observed_past;
    if (s == "known_future") return Role::known_future;
    if (s == "target") return Role::target;
    fail(Errc::InvalidSchema, "unknown role '" + s + "'");
}

inline void to_json(nlohmann::json& j, const FeatureSpec& f) {
    j = nlohmann::json{{"name", f.name},
                       {"role", role_name(f.role)},
                       {"dtype", f.categorical() ? "categorical" : "continuous"},
                       {"unit", f.unit}};
    if (f.categorical()) {
        j["vocab_size"] = f.vocab_size;
        if (!f.vocab.empty()) j["vocab"] = f.vocab;
    }
}

inline void from_json(const nlohmann::json& j, FeatureSpec& f) {
    f.name = j.at("name").get<std::string>();
    f.role = role_from_name(j.at("role").get<std::string>());
    const auto dtype = j.at("dtype").get<std::string>();
    if (dtype == "continuous")
        f.dtype = DType::continuous;
    else if (dtype == "categorical")
        f.dtype = DType::categorical;
    else
        fail(Errc::InvalidSchema, "unknown dtype '" + dtype + "'");
    f.vocab_size = j.value("vocab_size", std::size_t{0});
    f.vocab = j.value("vocab", std::vector<std::string>{});
    f.unit = j.value("unit", std::string{});
}

inline void to_json(nlohmann::json& j, const DatasetSchema& s) {
    j = nlohmann::json{{"features", s.features},
                       {"grid_step_min", s.grid_step_min},
                       {"encoder_len", s.encoder_len},
                       {"horizon_len", s.horizon_len}};
}

inline void from_json(const nlohmann::json& j, DatasetSchema& s) {
    s.features = j.at("features").get<std::vector<FeatureSpec>>();
    s.grid_step_min = j.at("grid_step_min").get<double>();
    s.encoder_len = j.at("encoder_len").get<std::size_t>();
    s.horizon_len = j.at("horizon_len").get<std::size_t>();
}

inline DatasetSchema parse_schema(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
        return validate_schema(j.get<DatasetSchema>());
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::InvalidSchema, e.what());
    }
}

inline DatasetSchema load_schema(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), Errc::IoError, "cannot open schema " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_schema(text);
}

} // namespace omnitft

#pragma once
// End-to-end data preparation: grid series -> patient split -> training fill
// values -> imputation -> windows with regime labels, plus run configuration.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnitft/error.hpp"
#include "omnitft/ingest.hpp"
#include "omnitft/labeler.hpp"
#include "omnitft/model.hpp"
#include "omnitft/sampler.hpp"
#include "omnitft/schema.hpp"
#include "omnitft/trainer.hpp"

namespace omnitft {

enum class LabelMethod { threshold, hmm };

struct DataConfig {
    std::uint64_t split_seed = 0;
    std::array<unsigned, 3> split_ratios{7, 2, 1};
    std::size_t stride = 1;
    double max_gap_h = 6.0;
    double missing_threshold = 0.8;
    DeltaTable delta;  // per-target overrides of the 75th-percentile default
    LabelMethod labeler = LabelMethod::threshold;
    std::uint64_t init_seed = 0;

    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

inline void to_json(nlohmann::json& j, const DataConfig& c) {
    j = nlohmann::json{{"split_seed", c.split_seed},
                       {"split_ratios", c.split_ratios},
                       {"stride", c.stride},
                       {"max_gap_h", c.max_gap_h},
                       {"missing_threshold", c.missing_threshold},
                       {"delta", c.delta},
                       {"labeler", c.labeler == LabelMethod::hmm ? "hmm" : "threshold"},
                       {"init_seed", c.init_seed}};
}
inline void from_json(const nlohmann::json& j, DataConfig& c) {
    const DataConfig d;
    c.split_seed = j.value("split_seed", d.split_seed);
    c.split_ratios = j.value("split_ratios", d.split_ratios);
    c.stride = j.value("stride", d.stride);
    c.max_gap_h = j.value("max_gap_h", d.max_gap_h);
    c.missing_threshold = j.value("missing_threshold", d.missing_threshold);
    c.delta = parse_delta_table(j);
    const auto lab = j.value("labeler", std::string("threshold"));
    require(lab == "threshold" || lab == "hmm", Errc::InvalidConfig, "labeler must be threshold or hmm");
    c.labeler = lab == "hmm" ? LabelMethod::hmm : LabelMethod::threshold;
    c.init_seed = j.value("init_seed", d.init_seed);
    require(c.stride >= 1, Errc::InvalidConfig, "stride must be >= 1");
}

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
};

inline nlohmann::json run_config_json(const RunConfig& c) {
    return {{"model", c.model}, {"train", c.train}, {"data", c.data}};
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
    RunConfig c;
    try {
        if (j.contains("model")) c.model = validate_config(j.at("model").get<ModelConfig>());
        if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
        if (j.contains("data")) c.data = j.at("data").get<DataConfig>();
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::InvalidConfig, std::string("bad run config: ") + e.what());
    }
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), Errc::IoError, "cannot read " + path);
    try {
        return parse_run_config(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        fail(Errc::InvalidConfig, path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------

/// Reads `<dir>/events.csv` and resamples every patient onto the grid.
inline std::vector<PatientSeries> load_grid_series(const std::string& dir, const DatasetSchema& schema) {
    const auto path = std::filesystem::path(dir) / "events.csv";
    std::ifstream in(path);
    require(static_cast<bool>(in), Errc::IoError, "cannot read " + path.string());
    auto events = parse_events(in, schema);
    std::vector<PatientSeries> out;
    for (auto& [id, evs] : group_by_patient(std::move(events))) out.push_back(resample_to_grid(evs, schema));
    return out;
}

constexpr std::array<Split, 3> kSplits{Split::train, Split::val, Split::test};

struct PreparedData {
    DatasetSchema schema;
    SplitAssignment assignment;
    FillValues fill;
    Normalizer normalizer;
    std::map<std::string, double> delta;  // per target name
    std::array<std::vector<PatientSeries>, 3> series;
    std::array<std::vector<WindowSample>, 3> windows;
    std::vector<std::string> dropped;  // patients removed, with the reason

    [[nodiscard]] const std::vector<WindowSample>& split(Split s) const { return windows[static_cast<std::size_t>(s)]; }
};

/// Window labels for one series under the configured method.
inline void label_windows(std::vector<WindowSample>& ws, const PatientSeries& s, const DatasetSchema& schema,
                          std::size_t k, const DataConfig& cfg, double delta) {
    if (cfg.labeler == LabelMethod::threshold) {
        for (auto& w : ws) w.label = threshold_label(w.score, delta);
        return;
    }
    const auto labels = hmm_window_labels(s, schema, k, cfg.split_seed, cfg.stride);
    for (std::size_t i = 0; i < ws.size(); ++i) ws[i].label = labels[i];
}

/// Splits, imputes and windows `grids`. `fixed_fill` / `fixed_delta` replace the
/// statistics otherwise computed from the training split (used at evaluation).
inline PreparedData prepare(std::vector<PatientSeries> grids, const DatasetSchema& schema_in, const DataConfig& cfg,
                            const std::optional<FillValues>& fixed_fill = std::nullopt,
                            const std::optional<Normalizer>& fixed_norm = std::nullopt,
                            const std::optional<std::map<std::string, double>>& fixed_delta = std::nullopt) {
    PreparedData d;
    d.schema = validate_schema(schema_in);
    const auto& schema = d.schema;

    std::vector<std::string> ids;
    for (const auto& g : grids) ids.push_back(g.patient_id);
    d.assignment = split_by_patient(ids, cfg.split_ratios, cfg.split_seed);

    std::vector<PatientSeries> kept;
    for (auto& g : grids) {
        const auto mf = missing_fractions(g, schema);
        if (mf.observed > cfg.missing_threshold || mf.statics > cfg.missing_threshold) {
            d.dropped.push_back(g.patient_id + ": missing fraction above threshold");
            continue;
        }
        kept.push_back(std::move(g));
    }

    if (fixed_fill) {
        d.fill = *fixed_fill;
    } else {
        std::vector<PatientSeries> train;
        for (const auto& g : kept)
            if (d.assignment.at(g.patient_id) == Split::train) train.push_back(g);
        d.fill = compute_fill_values(train, schema);
    }

    for (auto& g : kept) {
        const auto split = d.assignment.at(g.patient_id);
        const auto id = g.patient_id;
        try {
            auto s = impute(std::move(g), schema, d.fill, cfg.max_gap_h);
            if (s.length() < schema.window_len()) {
                d.dropped.push_back(id + ": shorter than one window");
                continue;
            }
            d.series[static_cast<std::size_t>(split)].push_back(std::move(s));
        } catch (const Error& e) {
            if (e.code() != Errc::AllMissingFeature) throw;
            d.dropped.push_back(id + ": " + e.what());
        }
    }

    const auto& train = d.series[static_cast<std::size_t>(Split::train)];
    d.normalizer = fixed_norm ? *fixed_norm : Normalizer::fit(train, schema);

    const auto targets = schema.targets();
    for (std::size_t k = 0; k < targets.size(); ++k) {
        const auto& name = schema.features[targets[k]].name;
        double delta;
        if (fixed_delta && fixed_delta->count(name)) {
            delta = fixed_delta->at(name);
        } else if (cfg.delta.count(name)) {
            delta = cfg.delta.at(name);
        } else {
            std::vector<double> scores;
            for (const auto& s : train) {
                const auto sc = window_scores(s, schema, k, cfg.stride);
                scores.insert(scores.end(), sc.begin(), sc.end());
            }
            delta = default_delta(std::move(scores));
        }
        d.delta[name] = delta;
    }

    for (auto split : kSplits) {
        auto& out = d.windows[static_cast<std::size_t>(split)];
        for (const auto& s : d.series[static_cast<std::size_t>(split)])
            for (std::size_t k = 0; k < targets.size(); ++k) {
                const double delta = d.delta.at(schema.features[targets[k]].name);
                auto ws = enumerate_windows(s, schema, k, delta, cfg.stride);
                label_windows(ws, s, schema, k, cfg, delta);
                out.insert(out.end(), std::make_move_iterator(ws.begin()), std::make_move_iterator(ws.end()));
            }
    }
    return d;
}

// ---------------------------------------------------------------------------
// Ground-truth regimes written next to synthetic data.

inline void write_regimes_csv(std::ostream& os, const SyntheticData& data, const DatasetSchema& schema) {
    const auto targets = schema.targets();
    os << "patient_id,target,step,regime\n";
    for (std::size_t p = 0; p < data.series.size(); ++p)
        for (std::size_t k = 0; k < targets.size(); ++k)
            for (std::size_t t = 0; t < data.regimes[p][k].size(); ++t)
                os << data.series[p].patient_id << ',' << schema.features[targets[k]].name << ',' << t << ','
                   << (data.regimes[p][k][t] ? "volatile" : "stable") << '\n';
}

/// regimes[patient][target name][step] = volatile.
using RegimeTruth = std::map<std::string, std::map<std::string, std::vector<std::uint8_t>>>;

inline RegimeTruth read_regimes_csv(std::istream& in) {
    RegimeTruth out;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        require(cells.size() == 4, Errc::UnparsableValue, "regimes row: " + line);
        auto& v = out[cells[0]][cells[1]];
        const auto step = static_cast<std::size_t>(std::stoul(cells[2]));
        if (v.size() <= step) v.resize(step + 1, 0);
        v[step] = cells[3] == "volatile" ? 1 : 0;
    }
    return out;
}

/// Default synthetic schema: two targets, a lagged covariate, a noise channel,
/// a clock, and Gaussian plus Zipf categorical statics.
inline DatasetSchema default_synthetic_schema(std::size_t encoder_len = 72, std::size_t horizon_len = 12) {
    DatasetSchema s;
    s.encoder_len = encoder_len;
    s.horizon_len = horizon_len;
    s.features = {
        {"hr", Role::target, DType::continuous, 0, {}, "bpm"},
        {"map", Role::target, DType::continuous, 0, {}, "mmHg"},
        {"lactate", Role::observed_past, DType::continuous, 0, {}, "mmol/L"},
        {"noise_a", Role::observed_past, DType::continuous, 0, {}, ""},
        {"clock", Role::known_future, DType::continuous, 0, {}, ""},
        {"age", Role::static_covariate, DType::continuous, 0, {}, "z"},
        {"unit", Role::static_covariate, DType::categorical, 20, {}, ""},
    };
    return validate_schema(s);
}

} // namespace omnitft

#pragma once
// Long-format CSV ingestion, grid alignment, imputation, patient filtering,
// patient-level splitting and a synthetic regime-switching data generator.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "omnitft/diff.hpp"
#include "omnitft/error.hpp"
#include "omnitft/schema.hpp"

namespace omnitft {

struct RawEvent {
    std::string patient_id;
    double time_h = 0.0;
    std::size_t feature = 0;  // index into schema.features
    double value = 0.0;       // category index for categorical features

    friend bool operator==(const RawEvent&, const RawEvent&) = default;
};

/// One patient on the fixed grid. Temporal columns follow schema.past_vars().
struct PatientSeries {
    std::string patient_id;
    double origin_h = 0.0;  // time of row 0
    diff::Tensor values;    // n x N_h
    std::vector<std::uint8_t> mask;  // n x N_h, 1 = observed before imputation
    std::vector<double> statics;     // schema.static_vars() order
    std::vector<std::uint8_t> static_mask;
    std::size_t trimmed_rows = 0;

    [[nodiscard]] std::size_t length() const noexcept { return values.rows(); }
    [[nodiscard]] std::size_t width() const noexcept { return values.cols(); }
    [[nodiscard]] bool observed(std::size_t row, std::size_t col) const { return mask[row * width() + col] != 0; }
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    const auto e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(line);
    while (std::getline(ss, cur, ',')) out.push_back(trim(cur));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* b = s.data();
    const char* e = s.data() + s.size();
    if (*b == '+') ++b;
    auto [p, ec] = std::from_chars(b, e, out);
    return ec == std::errc{} && p == e && std::isfinite(out);
}

} // namespace detail

/// Reads `patient_id,time_h,feature,value` rows. Categorical values go through
/// the schema vocabulary (or are integer indices when no labels are declared).
inline std::vector<RawEvent> parse_events(std::istream& in, const DatasetSchema& schema) {
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), Errc::UnparsableValue, "missing CSV header");
    const auto header = detail::split_csv_line(line);
    require(header == std::vector<std::string>{"patient_id", "time_h", "feature", "value"}, Errc::UnparsableValue,
            "CSV header must be patient_id,time_h,feature,value");

    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < schema.features.size(); ++i) index[schema.features[i].name] = i;

    std::vector<RawEvent> events;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        const auto cells = detail::split_csv_line(line);
        const std::string where = "line " + std::to_string(lineno);
        require(cells.size() == 4, Errc::UnparsableValue, where + ": expected 4 columns");
        RawEvent ev;
        ev.patient_id = cells[0];
        require(!ev.patient_id.empty(), Errc::UnparsableValue, where + ": empty patient_id");
        require(detail::parse_double(cells[1], ev.time_h), Errc::UnparsableValue, where + ": bad time_h");
        require(ev.time_h >= 0.0, Errc::NegativeTime, where + ": time_h " + cells[1]);
        auto it = index.find(cells[2]);
        require(it != index.end(), Errc::UnknownFeature, where + ": " + cells[2]);
        ev.feature = it->second;
        const auto& f = schema.features[ev.feature];
        if (f.categorical() && !f.vocab.empty()) {
            auto v = std::find(f.vocab.begin(), f.vocab.end(), cells[3]);
            require(v != f.vocab.end(), Errc::UnparsableValue, where + ": '" + cells[3] + "' not in vocab of " + f.name);
            ev.value = static_cast<double>(v - f.vocab.begin());
        } else {
            require(detail::parse_double(cells[3], ev.value), Errc::UnparsableValue, where + ": bad value");
            if (f.categorical())
                require(ev.value >= 0 && ev.value == std::floor(ev.value) &&
                            ev.value < static_cast<double>(f.vocab_size),
                        Errc::UnparsableValue, where + ": category index out of range");
        }
        events.push_back(std::move(ev));
    }
    return events;
}

/// Groups events by patient (ids sorted), each group stably sorted by time.
inline std::map<std::string, std::vector<RawEvent>> group_by_patient(std::vector<RawEvent> events) {
    std::map<std::string, std::vector<RawEvent>> out;
    for (auto& e : events) out[e.patient_id].push_back(std::move(e));
    for (auto& [id, evs] : out)
        std::stable_sort(evs.begin(), evs.end(), [](const RawEvent& a, const RawEvent& b) { return a.time_h < b.time_h; });
    return out;
}

namespace detail {
inline double mode_of(const std::vector<double>& xs) {
    std::map<double, std::size_t> counts;
    for (double x : xs) ++counts[x];
    double best = xs.front();
    std::size_t n = 0;
    for (auto [v, c] : counts)
        if (c > n) {
            best = v;
            n = c;
        }
    return best;
}
inline double mean_of(const std::vector<double>& xs) {
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}
} // namespace detail

/// Bins one patient's events into grid_step bins starting at t = 0. Continuous
/// features take the bin mean, categorical the bin mode (smallest on ties).
/// Statics aggregate over all their events.
inline PatientSeries resample_to_grid(const std::vector<RawEvent>& events, const DatasetSchema& schema) {
    require(!events.empty(), Errc::EmptyPatient, "patient has no events");
    const double step_h = schema.grid_step_min / 60.0;
    const auto past = schema.past_vars();
    const auto stat = schema.static_vars();
    std::vector<std::size_t> col_of(schema.features.size(), SIZE_MAX), stat_of(schema.features.size(), SIZE_MAX);
    for (std::size_t j = 0; j < past.size(); ++j) col_of[past[j]] = j;
    for (std::size_t j = 0; j < stat.size(); ++j) stat_of[stat[j]] = j;

    double tmax = 0.0;
    for (const auto& e : events) tmax = std::max(tmax, e.time_h);
    const auto n = static_cast<std::size_t>(std::floor(tmax / step_h + 1e-9)) + 1;

    std::vector<std::vector<double>> cells(n * past.size());
    std::vector<std::vector<double>> svals(stat.size());
    for (const auto& e : events) {
        if (stat_of[e.feature] != SIZE_MAX) {
            svals[stat_of[e.feature]].push_back(e.value);
            continue;
        }
        const auto row = std::min(n - 1, static_cast<std::size_t>(std::floor(e.time_h / step_h + 1e-9)));
        cells[row * past.size() + col_of[e.feature]].push_back(e.value);
    }

    PatientSeries s;
    s.patient_id = events.front().patient_id;
    s.values = diff::Tensor(n, past.size(), std::numeric_limits<double>::quiet_NaN());
    s.mask.assign(n * past.size(), 0);
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cells[i].empty()) continue;
        const bool cat = schema.features[past[i % past.size()]].categorical();
        s.values[i] = cat ? detail::mode_of(cells[i]) : detail::mean_of(cells[i]);
        s.mask[i] = 1;
    }
    s.statics.assign(stat.size(), std::numeric_limits<double>::quiet_NaN());
    s.static_mask.assign(stat.size(), 0);
    for (std::size_t j = 0; j < stat.size(); ++j) {
        if (svals[j].empty()) continue;
        s.statics[j] = schema.features[stat[j]].categorical() ? detail::mode_of(svals[j]) : detail::mean_of(svals[j]);
        s.static_mask[j] = 1;
    }
    return s;
}

/// Per-feature fill values computed over training patients only: median for
/// continuous features, mode for categorical ones. NaN when never observed.
struct FillValues {
    std::vector<double> temporal;
    std::vector<double> statics;
};

inline FillValues compute_fill_values(const std::vector<PatientSeries>& train, const DatasetSchema& schema) {
    const auto past = schema.past_vars();
    const auto stat = schema.static_vars();
    auto summarize = [](std::vector<double>& xs, bool categorical) {
        if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
        if (categorical) return detail::mode_of(xs);
        std::sort(xs.begin(), xs.end());
        const auto n = xs.size();
        return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
    };
    FillValues fv;
    for (std::size_t j = 0; j < past.size(); ++j) {
        std::vector<double> xs;
        for (const auto& s : train)
            for (std::size_t r = 0; r < s.length(); ++r)
                if (s.observed(r, j)) xs.push_back(s.values(r, j));
        fv.temporal.push_back(summarize(xs, schema.features[past[j]].categorical()));
    }
    for (std::size_t j = 0; j < stat.size(); ++j) {
        std::vector<double> xs;
        for (const auto& s : train)
            if (s.static_mask[j]) xs.push_back(s.statics[j]);
        fv.statics.push_back(summarize(xs, schema.features[stat[j]].categorical()));
    }
    return fv;
}

/// Forward-fills each temporal feature for up to `max_gap_h` after its last
/// observation and falls back to the training fill value beyond that. The
/// series is trimmed so that it starts at the first step where every target
/// is observed; leading covariate gaps take the fill value. Statics missing
/// take the fill value. Observed cells are never modified.
inline PatientSeries impute(PatientSeries s, const DatasetSchema& schema, const FillValues& fill,
                            double max_gap_h = 6.0) {
    const auto past = schema.past_vars();
    const double step_h = schema.grid_step_min / 60.0;
    const std::size_t w = past.size();

    std::vector<std::size_t> target_cols;
    for (std::size_t j = 0; j < w; ++j)
        if (schema.features[past[j]].role == Role::target) target_cols.push_back(j);

    std::size_t start = s.length();
    for (std::size_t r = 0; r < s.length(); ++r) {
        bool all = true;
        for (auto j : target_cols) all = all && s.observed(r, j);
        if (all) {
            start = r;
            break;
        }
    }
    require(start < s.length(), Errc::AllMissingFeature, s.patient_id + ": targets never jointly observed");

    if (start > 0) {
        const std::size_t n = s.length() - start;
        diff::Tensor v(n, w);
        std::vector<std::uint8_t> m(n * w);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < w; ++j) {
                v(r, j) = s.values(r + start, j);
                m[r * w + j] = s.mask[(r + start) * w + j];
            }
        s.values = std::move(v);
        s.mask = std::move(m);
        s.origin_h += static_cast<double>(start) * step_h;
        s.trimmed_rows += start;
    }

    for (std::size_t j = 0; j < w; ++j) {
        std::ptrdiff_t last = -1;
        for (std::size_t r = 0; r < s.length(); ++r) {
            if (s.observed(r, j)) {
                last = static_cast<std::ptrdiff_t>(r);
                continue;
            }
            const double gap = last < 0 ? std::numeric_limits<double>::infinity()
                                        : static_cast<double>(static_cast<std::ptrdiff_t>(r) - last) * step_h;
            if (gap <= max_gap_h + 1e-9) {
                s.values(r, j) = s.values(static_cast<std::size_t>(last), j);
            } else {
                require(!std::isnan(fill.temporal[j]), Errc::AllMissingFeature,
                        s.patient_id + ": no fill value for " + schema.features[past[j]].name);
                s.values(r, j) = fill.temporal[j];
            }
        }
    }
    const auto stat = schema.static_vars();
    for (std::size_t j = 0; j < s.statics.size(); ++j) {
        if (s.static_mask[j]) continue;
        require(!std::isnan(fill.statics[j]), Errc::AllMissingFeature,
                s.patient_id + ": no fill value for " + schema.features[stat[j]].name);
        s.statics[j] = fill.statics[j];
    }
    return s;
}

/// Fraction of missing observed_past cells and of missing statics.
struct MissingFractions {
    double observed = 0.0;
    double statics = 0.0;
};

inline MissingFractions missing_fractions(const PatientSeries& s, const DatasetSchema& schema) {
    const auto past = schema.past_vars();
    std::size_t total = 0, missing = 0;
    for (std::size_t j = 0; j < past.size(); ++j) {
        if (schema.features[past[j]].role != Role::observed_past) continue;
        for (std::size_t r = 0; r < s.length(); ++r) {
            ++total;
            missing += s.observed(r, j) ? 0 : 1;
        }
    }
    MissingFractions mf;
    mf.observed = total ? static_cast<double>(missing) / static_cast<double>(total) : 0.0;
    if (!s.static_mask.empty()) {
        const auto seen = std::count(s.static_mask.begin(), s.static_mask.end(), std::uint8_t{1});
        mf.statics = 1.0 - static_cast<double>(seen) / static_cast<double>(s.static_mask.size());
    }
    return mf;
}

/// Drops patients whose observed-feature or static missing fraction is strictly above `threshold`.
inline std::vector<PatientSeries> filter_patients(std::vector<PatientSeries> all, const DatasetSchema& schema,
                                                  double threshold = 0.8) {
    std::vector<PatientSeries> kept;
    for (auto& s : all) {
        const auto mf = missing_fractions(s, schema);
        if (mf.observed > threshold || mf.statics > threshold) continue;
        kept.push_back(std::move(s));
    }
    return kept;
}

enum class Split { train, val, test };

inline std::string split_name(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "?";
}

using SplitAssignment = std::map<std::string, Split>;

/// Shuffles ids under `seed`; val and test take floor(n * r / sum(r)), train the rest.
inline SplitAssignment split_by_patient(std::vector<std::string> ids, std::array<unsigned, 3> ratios = {7, 2, 1},
                                        std::uint64_t seed = 0) {
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    require(ids.size() >= 10, Errc::TooFewPatients, std::to_string(ids.size()) + " patients, need >= 10");
    const unsigned total = ratios[0] + ratios[1] + ratios[2];
    require(total > 0, Errc::InvalidConfig, "split ratios sum to zero");
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n = ids.size();
    const auto n_val = n * ratios[1] / total;
    const auto n_test = n * ratios[2] / total;
    SplitAssignment out;
    for (std::size_t i = 0; i < n; ++i) {
        Split s = Split::train;
        if (i >= n - n_test)
            s = Split::test;
        else if (i >= n - n_test - n_val)
            s = Split::val;
        out[ids[i]] = s;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticOptions {
    std::size_t steps_per_patient = 240;
    double ar_coefficient = 0.9;
    /// Baseline level of every target, so percentage metrics stay meaningful.
    double target_level = 50.0;
    double stable_sd = 1.0;
    /// Innovation sd in the volatile regime relative to the stable one.
    double volatile_sd_ratio = 4.0;
    /// Mean length in steps of a volatile episode.
    double volatile_episode_len = 10.0;
    double covariate_noise_sd = 0.5;
    double zipf_exponent = 1.2;
    /// Probability that an observed_past cell is dropped from the output.
    double observed_missing_rate = 0.0;
};

struct SyntheticData {
    std::vector<PatientSeries> series;
    /// regimes[p][k][t]: 1 = volatile for target k of patient p at step t.
    std::vector<std::vector<std::vector<std::uint8_t>>> regimes;
    /// Per-patient level every target reverts to.
    std::vector<double> levels;
};

/// Two-state regime chain whose stationary volatile probability is `shock_rate`.
struct RegimeChain {
    double p_enter = 0.0;  // stable -> volatile
    double p_leave = 1.0;  // volatile -> stable

    static RegimeChain for_rate(double shock_rate, double episode_len) {
        require(shock_rate >= 0.0 && shock_rate < 1.0, Errc::InvalidConfig, "shock_rate must be in [0, 1)");
        RegimeChain c;
        c.p_leave = 1.0 / std::max(1.0, episode_len);
        c.p_enter = std::min(1.0, shock_rate / (1.0 - shock_rate) * c.p_leave);
        return c;
    }
    [[nodiscard]] double stationary_volatile() const {
        return p_enter + p_leave > 0 ? p_enter / (p_enter + p_leave) : 0.0;
    }
};

/// Each target is an AR(1) process around a patient offset whose innovation
/// sd switches with a 2-state Markov chain. Observed covariates are lagged,
/// noisy copies of a target (pure noise when their name starts with "noise"),
/// known inputs follow a 24 h clock, statics are a Gaussian and Zipf-drawn
/// categories that shift the patient offset.
inline SyntheticData generate_synthetic(std::size_t n_patients, const DatasetSchema& schema_in, double shock_rate,
                                        std::uint64_t seed, const SyntheticOptions& opt = {}) {
    const auto schema = validate_schema(schema_in);
    const auto past = schema.past_vars();
    const auto stat = schema.static_vars();
    const auto chain = RegimeChain::for_rate(shock_rate, opt.volatile_episode_len);
    const double step_h = schema.grid_step_min / 60.0;
    const std::size_t n = opt.steps_per_patient;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    auto zipf = [&](std::size_t v) {
        std::vector<double> w(v);
        for (std::size_t k = 0; k < v; ++k) w[k] = 1.0 / std::pow(static_cast<double>(k + 1), opt.zipf_exponent);
        return std::discrete_distribution<std::size_t>(w.begin(), w.end());
    };

    // fixed per-category effects, shared by all patients
    std::vector<std::vector<double>> cat_effect(stat.size());
    for (std::size_t j = 0; j < stat.size(); ++j)
        if (schema.features[stat[j]].categorical()) {
            cat_effect[j].resize(schema.features[stat[j]].vocab_size);
            for (double& e : cat_effect[j]) e = 0.5 * normal(rng);
        }

    std::vector<std::size_t> target_cols;
    for (std::size_t j = 0; j < past.size(); ++j)
        if (schema.features[past[j]].role == Role::target) target_cols.push_back(j);

    SyntheticData out;
    const int width = static_cast<int>(std::to_string(n_patients == 0 ? 0 : n_patients - 1).size());
    for (std::size_t p = 0; p < n_patients; ++p) {
        PatientSeries s;
        std::string num = std::to_string(p);
        s.patient_id = "p" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(num.size()))), '0') + num;
        s.values = diff::Tensor(n, past.size());
        s.mask.assign(n * past.size(), 1);

        double offset = opt.target_level;
        for (std::size_t j = 0; j < stat.size(); ++j) {
            const auto& f = schema.features[stat[j]];
            double v;
            if (f.categorical()) {
                auto d = zipf(f.vocab_size);
                const auto k = d(rng);
                v = static_cast<double>(k);
                offset += cat_effect[j][k];
            } else {
                v = normal(rng);
                offset += 0.5 * v;
            }
            s.statics.push_back(v);
            s.static_mask.push_back(1);
        }

        std::vector<std::vector<std::uint8_t>> regimes(target_cols.size(), std::vector<std::uint8_t>(n));
        for (std::size_t k = 0; k < target_cols.size(); ++k) {
            const double pi = chain.stationary_volatile();
            std::uint8_t state = unif(rng) < pi ? 1 : 0;
            double y = offset;
            for (std::size_t t = 0; t < n; ++t) {
                if (t > 0) {
                    const double u = unif(rng);
                    state = state ? (u < chain.p_leave ? 0 : 1) : (u < chain.p_enter ? 1 : 0);
                }
                const double sd = opt.stable_sd * (state ? opt.volatile_sd_ratio : 1.0);
                y = offset + opt.ar_coefficient * (y - offset) + sd * normal(rng);
                regimes[k][t] = state;
                s.values(t, target_cols[k]) = y;
            }
        }

        std::size_t observed_idx = 0, known_idx = 0;
        for (std::size_t j = 0; j < past.size(); ++j) {
            const auto& f = schema.features[past[j]];
            if (f.role == Role::target) continue;
            if (f.role == Role::observed_past) {
                const bool pure_noise = f.name.rfind("noise", 0) == 0;
                const std::size_t src = target_cols[observed_idx % target_cols.size()];
                const std::size_t lag = 1 + observed_idx / target_cols.size();
                auto cat = f.categorical() ? zipf(f.vocab_size) : std::discrete_distribution<std::size_t>{};
                for (std::size_t t = 0; t < n; ++t) {
                    if (f.categorical()) {
                        s.values(t, j) = static_cast<double>(cat(rng));
                    } else if (pure_noise) {
                        s.values(t, j) = normal(rng);
                    } else {
                        const double base = t >= lag ? s.values(t - lag, src) : offset;
                        s.values(t, j) = base + opt.covariate_noise_sd * normal(rng);
                    }
                    if (opt.observed_missing_rate > 0 && unif(rng) < opt.observed_missing_rate) {
                        s.mask[t * past.size() + j] = 0;
                    }
                }
                ++observed_idx;
            } else {
                const double phase = 0.7 * static_cast<double>(known_idx);
                for (std::size_t t = 0; t < n; ++t) {
                    const double hour = std::fmod(static_cast<double>(t) * step_h, 24.0);
                    if (f.categorical())
                        s.values(t, j) = static_cast<double>(static_cast<std::size_t>(hour) % f.vocab_size);
                    else
                        s.values(t, j) = std::sin(2.0 * M_PI * hour / 24.0 + phase);
                }
                ++known_idx;
            }
        }
        for (std::size_t i = 0; i < s.mask.size(); ++i)
            if (!s.mask[i]) s.values[i] = std::numeric_limits<double>::quiet_NaN();
        out.series.push_back(std::move(s));
        out.regimes.push_back(std::move(regimes));
        out.levels.push_back(offset);
    }
    return out;
}

/// Long-format events for a grid series: one event per observed cell at the
/// bin start, statics at t = 0.
inline std::vector<RawEvent> to_events(const PatientSeries& s, const DatasetSchema& schema) {
    const auto past = schema.past_vars();
    const auto stat = schema.static_vars();
    const double step_h = schema.grid_step_min / 60.0;
    std::vector<RawEvent> out;
    for (std::size_t j = 0; j < stat.size(); ++j)
        if (s.static_mask[j]) out.push_back({s.patient_id, s.origin_h, stat[j], s.statics[j]});
    for (std::size_t r = 0; r < s.length(); ++r)
        for (std::size_t j = 0; j < past.size(); ++j)
            if (s.observed(r, j))
                out.push_back({s.patient_id, s.origin_h + static_cast<double>(r) * step_h, past[j], s.values(r, j)});
    return out;
}

namespace detail {
inline std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}
} // namespace detail

inline void write_events_csv(std::ostream& out, const std::vector<RawEvent>& events, const DatasetSchema& schema) {
    out << "patient_id,time_h,feature,value\n";
    for (const auto& e : events) {
        const auto& f = schema.features[e.feature];
        out << e.patient_id << ',' << detail::format_double(e.time_h) << ',' << f.name << ',';
        if (f.categorical() && !f.vocab.empty())
            out << f.vocab[static_cast<std::size_t>(e.value)];
        else
            out << detail::format_double(e.value);
        out << '\n';
    }
}

} // namespace omnitft

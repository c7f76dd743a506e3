#pragma once
// Sliding-window enumeration and per-epoch class balancing over stable and
// volatile windows.

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "omnitft/diff.hpp"
#include "omnitft/error.hpp"
#include "omnitft/ingest.hpp"
#include "omnitft/labeler.hpp"
#include "omnitft/schema.hpp"

namespace omnitft {

struct WindowSample {
    std::string patient_id;
    std::size_t start = 0;       // 0-based first encoder row
    std::size_t target = 0;      // index into schema.targets()
    diff::Tensor encoder;        // E x N_h, past-side variables
    diff::Tensor future_known;   // H x N_f
    std::vector<double> future_target;  // H
    std::vector<std::uint8_t> target_observed;  // H, 0 = imputed, masked out of the loss
    std::vector<double> statics;
    double score = 0.0;          // fluctuation score of future_target
    RegimeLabel label = RegimeLabel::Stable;
};

/// Fluctuation scores of every window start for target `k` (stride 1 when `stride` is 1).
inline std::vector<double> window_scores(const PatientSeries& s, const DatasetSchema& schema, std::size_t k,
                                         std::size_t stride = 1) {
    const std::size_t T = schema.window_len();
    const std::size_t E = schema.encoder_len;
    require(s.length() >= T, Errc::SeriesTooShort,
            s.patient_id + ": " + std::to_string(s.length()) + " steps < window " + std::to_string(T));
    const auto past = schema.past_vars();
    const auto tcol = static_cast<std::size_t>(
        std::find(past.begin(), past.end(), schema.targets().at(k)) - past.begin());
    std::vector<double> out;
    std::vector<double> fut(schema.horizon_len);
    for (std::size_t t = 0; t + T <= s.length(); t += stride) {
        for (std::size_t h = 0; h < schema.horizon_len; ++h) fut[h] = s.values(t + E + h, tcol);
        out.push_back(fluctuation_score(fut));
    }
    return out;
}

/// One window per start index (stride 1 by default) for target `k`, labelled
/// by the threshold rule on the future target slice.
inline std::vector<WindowSample> enumerate_windows(const PatientSeries& s, const DatasetSchema& schema, std::size_t k,
                                                   double delta, std::size_t stride = 1) {
    require(stride >= 1, Errc::InvalidConfig, "stride must be >= 1");
    const std::size_t E = schema.encoder_len, H = schema.horizon_len, T = schema.window_len();
    require(s.length() >= T, Errc::SeriesTooShort,
            s.patient_id + ": " + std::to_string(s.length()) + " steps < window " + std::to_string(T));
    const auto past = schema.past_vars();
    const auto fut = schema.future_vars();
    const auto tcol = static_cast<std::size_t>(
        std::find(past.begin(), past.end(), schema.targets().at(k)) - past.begin());
    std::vector<std::size_t> fcols;
    for (auto f : fut) fcols.push_back(static_cast<std::size_t>(std::find(past.begin(), past.end(), f) - past.begin()));

    std::vector<WindowSample> out;
    for (std::size_t t = 0; t + T <= s.length(); t += stride) {
        WindowSample w;
        w.patient_id = s.patient_id;
        w.start = t;
        w.target = k;
        w.encoder = diff::Tensor(E, past.size());
        for (std::size_t r = 0; r < E; ++r)
            for (std::size_t j = 0; j < past.size(); ++j) w.encoder(r, j) = s.values(t + r, j);
        w.future_known = diff::Tensor(H, fcols.size());
        w.future_target.resize(H);
        w.target_observed.assign(H, 1);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t j = 0; j < fcols.size(); ++j) w.future_known(h, j) = s.values(t + E + h, fcols[j]);
            w.future_target[h] = s.values(t + E + h, tcol);
            if (!s.mask.empty()) w.target_observed[h] = s.observed(t + E + h, tcol) ? 1 : 0;
        }
        w.statics = s.statics;
        w.score = fluctuation_score(w.future_target);
        w.label = threshold_label(w.score, delta);
        out.push_back(std::move(w));
    }
    return out;
}

/// Per-window HMM labels: volatile iff at least one horizon step decodes volatile.
inline std::vector<RegimeLabel> hmm_window_labels(const PatientSeries& s, const DatasetSchema& schema, std::size_t k,
                                                  std::uint64_t seed = 0, std::size_t stride = 1) {
    const auto past = schema.past_vars();
    const auto tcol = static_cast<std::size_t>(
        std::find(past.begin(), past.end(), schema.targets().at(k)) - past.begin());
    std::vector<double> y(s.length());
    for (std::size_t r = 0; r < s.length(); ++r) y[r] = s.values(r, tcol);
    const auto steps = hmm_label_series(y, seed);
    std::vector<RegimeLabel> out;
    const std::size_t E = schema.encoder_len, T = schema.window_len();
    for (std::size_t t = 0; t + T <= s.length(); t += stride) {
        bool vol = false;
        for (std::size_t h = 0; h < schema.horizon_len; ++h) vol = vol || steps[t + E + h] == RegimeLabel::Volatile;
        out.push_back(vol ? RegimeLabel::Volatile : RegimeLabel::Stable);
    }
    return out;
}

struct EpochDraw {
    std::vector<std::size_t> indices;  // into the window pool, shuffled
    std::size_t n_stable = 0;
    std::size_t n_volatile = 0;
    /// One class was empty; the epoch holds every window, unbalanced.
    bool single_class = false;
};

/// Undersamples the majority class to the minority count, without replacement, then shuffles.
inline EpochDraw balanced_epoch(std::span<const RegimeLabel> labels, std::mt19937_64& rng) {
    std::vector<std::size_t> stable, vol;
    for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == RegimeLabel::Volatile ? vol : stable).push_back(i);
    EpochDraw d;
    if (stable.empty() || vol.empty()) {
        d.single_class = true;
        d.indices.resize(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) d.indices[i] = i;
        std::shuffle(d.indices.begin(), d.indices.end(), rng);
        d.n_stable = stable.size();
        d.n_volatile = vol.size();
        return d;
    }
    const std::size_t m = std::min(stable.size(), vol.size());
    std::shuffle(stable.begin(), stable.end(), rng);
    std::shuffle(vol.begin(), vol.end(), rng);
    d.indices.assign(stable.begin(), stable.begin() + static_cast<std::ptrdiff_t>(m));
    d.indices.insert(d.indices.end(), vol.begin(), vol.begin() + static_cast<std::ptrdiff_t>(m));
    std::shuffle(d.indices.begin(), d.indices.end(), rng);
    d.n_stable = d.n_volatile = m;
    return d;
}

inline EpochDraw balanced_epoch(std::span<const RegimeLabel> labels, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return balanced_epoch(labels, rng);
}

inline EpochDraw balanced_epoch(std::span<const WindowSample> windows, std::uint64_t seed) {
    std::vector<RegimeLabel> labels;
    labels.reserve(windows.size());
    for (const auto& w : windows) labels.push_back(w.label);
    return balanced_epoch(labels, seed);
}

} // namespace omnitft

#pragma once
// Regularisers added to the quantile loss: frequency-aware embedding
// shrinkage, group-entropy selection and shock-aligned attention calibration.

#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnitft/diff.hpp"
#include "omnitft/error.hpp"

namespace omnitft {

struct PenaltyWeights {
    double lambda_embed = 1e-3;
    double lambda_group = 1e-2;
    double lambda_shock = 1e-1;
    double eps_embed = 1e-6;
    double eps_group = 1e-6;
    double eps_std = 1e-8;

    friend bool operator==(const PenaltyWeights&, const PenaltyWeights&) = default;
};

inline PenaltyWeights validate_weights(PenaltyWeights w) {
    for (double v : {w.lambda_embed, w.lambda_group, w.lambda_shock, w.eps_embed, w.eps_group, w.eps_std})
        require(v >= 0.0 && std::isfinite(v), Errc::InvalidConfig, "penalty weights must be finite and >= 0");
    return w;
}

inline void to_json(nlohmann::json& j, const PenaltyWeights& w) {
    j = nlohmann::json{{"lambda_embed", w.lambda_embed}, {"lambda_group", w.lambda_group},
                       {"lambda_shock", w.lambda_shock}, {"eps_embed", w.eps_embed},
                       {"eps_group", w.eps_group},       {"eps_std", w.eps_std}};
}
inline void from_json(const nlohmann::json& j, PenaltyWeights& w) {
    const PenaltyWeights d;
    w.lambda_embed = j.value("lambda_embed", d.lambda_embed);
    w.lambda_group = j.value("lambda_group", d.lambda_group);
    w.lambda_shock = j.value("lambda_shock", d.lambda_shock);
    w.eps_embed = j.value("eps_embed", d.eps_embed);
    w.eps_group = j.value("eps_group", d.eps_group);
    w.eps_std = j.value("eps_std", d.eps_std);
    w = validate_weights(w);
}

// ---------------------------------------------------------------------------
// Embedding shrinkage

/// ||row||^2 / sqrt(p + eps).
inline double embed_row_penalty(std::span<const double> row, double p, double eps) {
    double s = 0.0;
    for (double x : row) s += x * x;
    return s / std::sqrt(p + eps);
}

inline diff::Var embed_row_penalty(diff::Var row, double p, double eps) {
    return diff::scale(diff::reduce_sum(diff::square(row)), 1.0 / std::sqrt(p + eps));
}

/// Batch frequencies c_k / sum c. A feature absent from the batch gets p = 0
/// everywhere, which puts every row at the 1/sqrt(eps) cap.
inline std::vector<double> category_frequencies(std::span<const double> counts) {
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    std::vector<double> p(counts.size(), 0.0);
    if (total > 0.0)
        for (std::size_t k = 0; k < counts.size(); ++k) p[k] = counts[k] / total;
    return p;
}

/// Mean over features of the mean over categories of the row penalty.
/// Frequencies are constants of the batch; only the tables are differentiated.
inline diff::Var c_embed(diff::Graph& g, const std::vector<diff::Var>& tables,
                         const std::vector<std::vector<double>>& counts, double eps) {
    require(tables.size() == counts.size(), Errc::LengthMismatch, "one count vector per embedding table");
    if (tables.empty()) return g.constant(diff::Tensor::scalar(0.0));
    diff::Var total;
    for (std::size_t i = 0; i < tables.size(); ++i) {
        const std::size_t V = tables[i].rows();
        require(counts[i].size() == V, Errc::LengthMismatch, "count vector length != vocabulary size");
        const auto p = category_frequencies(counts[i]);
        std::vector<double> coef(V);
        for (std::size_t k = 0; k < V; ++k) coef[k] = 1.0 / (std::sqrt(p[k] + eps) * static_cast<double>(V));
        const auto sq = diff::reduce_sum(diff::square(tables[i]), 1);  // V x 1
        const auto term = diff::reduce_sum(diff::mul(sq, g.constant(diff::Tensor::column(std::move(coef)))));
        total = i == 0 ? term : diff::add(total, term);
    }
    return diff::scale(total, 1.0 / static_cast<double>(tables.size()));
}

// ---------------------------------------------------------------------------
// Group entropy

/// Rows of `w` (T x N_h) aggregated into groups by `G` (3 x N_h) and normalised
/// by (sum + eps). Result T x 3.
inline diff::Var group_distribution_past(diff::Var w, const diff::Tensor& G, double eps) {
    require(G.rows() == 3 && G.cols() == w.cols(), Errc::ShapeMismatch, "group matrix must be 3 x N_h");
    diff::Graph& g = *w.graph;
    diff::Tensor gt(G.cols(), 3);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < G.cols(); ++c) gt(c, r) = G(r, c);
    const auto s = diff::matmul(w, g.constant(std::move(gt)));
    return diff::div(s, diff::add_scalar(diff::reduce_sum(s, 1), eps));
}

/// Future-side distribution: all mass sits in the known group, so every row is
/// (0, 1, 0) exactly. Result T x 3.
inline diff::Var group_distribution_future(diff::Var w) {
    diff::Graph& g = *w.graph;
    const auto s = diff::reduce_sum(w, 1);
    for (double x : s.value().data())
        require(x > 0.0, Errc::AllZeroFutureWeights, "future selection weights sum to zero");
    const auto known = diff::div(s, s);
    const auto zeros = g.constant(diff::Tensor(w.rows(), 1));
    return diff::concat_cols({zeros, known, zeros});
}

/// Shannon entropy of each row, natural log, 0 log 0 = 0. Result rows x 1.
inline diff::Var row_entropy(diff::Var p) { return diff::scale(diff::reduce_sum(diff::xlogx(p), 1), -1.0); }

/// 1/2 (mean_t H(p_hs) + mean_t H(p_fut)); an absent future side contributes 0.
inline diff::Var c_group(diff::Var p_hs, std::optional<diff::Var> p_fut) {
    auto total = diff::reduce_mean(row_entropy(p_hs));
    if (p_fut) total = diff::add(total, diff::reduce_mean(row_entropy(*p_fut)));
    return diff::scale(total, 0.5);
}

inline double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

// ---------------------------------------------------------------------------
// Shock alignment

/// Attention mass each row in [first_row, T) puts on lags 1..W. Result n x 1.
inline diff::Var retro_mass(diff::Var abar, std::size_t first_row, std::size_t W = 3) {
    const std::size_t T = abar.cols();
    require(abar.rows() == T && first_row < T, Errc::ShapeMismatch, "retro_mass needs a square surface");
    diff::Graph& g = *abar.graph;
    const std::size_t n = T - first_row;
    diff::Tensor band(n, T);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t t = first_row + i;
        for (std::size_t k = 1; k <= W && k <= t; ++k) band(i, t - k) = 1.0;
    }
    return diff::reduce_sum(diff::mul(diff::slice_rows(abar, first_row, n), g.constant(std::move(band))), 1);
}

/// ||v_t - v_{t-1}|| for t >= 1. Row 0 of `v` is the anchor (last encoder
/// state), so H + 1 rows give H differences. Result H x 1.
inline diff::Var rep_first_diff(diff::Var v) {
    require(v.rows() >= 3, Errc::TooShortHorizon, "first differences need a horizon of at least 2");
    const std::size_t n = v.rows() - 1;
    return diff::l2_norm_rows(diff::sub(diff::slice_rows(v, 1, n), diff::slice_rows(v, 0, n)));
}

struct Standardized {
    diff::Var z;
    bool constant = false;
    double mean = 0.0;
    double sd = 0.0;
};

/// (x - mean) / (sd + eps) with population sd; a series with sd < eps comes
/// back as zeros and flagged constant.
inline Standardized standardize(diff::Var x, double eps) {
    require(x.value().size() >= 2, Errc::SeriesTooShort, "standardize needs at least 2 points");
    diff::Graph& g = *x.graph;
    const auto& xv = x.value();
    const double n = static_cast<double>(xv.size());
    double mu = 0.0;
    for (double v : xv.data()) mu += v;
    mu /= n;
    double var = 0.0;
    for (double v : xv.data()) var += (v - mu) * (v - mu);
    const double sd = std::sqrt(var / n);
    if (sd < eps) return {g.constant(diff::Tensor(xv.rows(), xv.cols())), true, mu, sd};
    const auto centered = diff::sub(x, diff::reduce_mean(x));
    const auto sigma = diff::sqrt(diff::reduce_mean(diff::square(centered)));
    return {diff::div(centered, diff::add_scalar(sigma, eps)), false, mu, sd};
}

inline std::vector<double> standardize_values(std::span<const double> x, double eps, bool* constant = nullptr) {
    diff::Graph g;
    const auto s = standardize(g.constant(diff::Tensor::column({x.begin(), x.end()})), eps);
    if (constant) *constant = s.constant;
    return s.z.value().vec();
}

/// Mean squared gap between the standardised series; 0 when either is constant.
inline diff::Var c_shock(const Standardized& a, const Standardized& s) {
    require(a.z.value().size() == s.z.value().size(), Errc::LengthMismatch, "shock series lengths differ");
    if (a.constant || s.constant) return a.z.graph->constant(diff::Tensor::scalar(0.0));
    return diff::reduce_mean(diff::square(diff::sub(a.z, s.z)));
}

struct ShockTrace {
    diff::Var retro;  // a_t, H x 1
    diff::Var diffs;  // s_t, H x 1
    Standardized a_std;
    Standardized s_std;
    diff::Var loss;
};

/// Full chain for one window: decoder rows of the averaged attention surface
/// and the (H + 1) x d representation.
inline ShockTrace shock_trace(diff::Var abar, diff::Var representation, std::size_t encoder_len, std::size_t W,
                              double eps_std) {
    ShockTrace t;
    t.retro = retro_mass(abar, encoder_len, W);
    t.diffs = rep_first_diff(representation);
    require(t.retro.rows() == t.diffs.rows(), Errc::LengthMismatch, "decoder rows mismatch");
    t.a_std = standardize(t.retro, eps_std);
    t.s_std = standardize(t.diffs, eps_std);
    t.loss = c_shock(t.a_std, t.s_std);
    return t;
}

} // namespace omnitft

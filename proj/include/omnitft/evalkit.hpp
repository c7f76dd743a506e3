#pragma once
// Forecast metrics, the "MAE (MAPE%)" table, attention-weighted importance
// and trajectory export.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnitft/diff.hpp"
#include "omnitft/error.hpp"
#include "omnitft/model.hpp"
#include "omnitft/parallel.hpp"
#include "omnitft/penalties.hpp"
#include "omnitft/sampler.hpp"
#include "omnitft/schema.hpp"

namespace omnitft {

namespace detail {
inline void require_aligned(std::span<const double> pred, std::span<const double> actual) {
    require(!actual.empty(), Errc::EmptySeries, "metric over an empty series");
    require(pred.size() == actual.size(), Errc::LengthMismatch, "prediction and actual lengths differ");
}
} // namespace detail

inline double mae(std::span<const double> pred, std::span<const double> actual) {
    detail::require_aligned(pred, actual);
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - actual[i]);
    return s / static_cast<double>(pred.size());
}

inline double rmse(std::span<const double> pred, std::span<const double> actual) {
    detail::require_aligned(pred, actual);
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - actual[i]) * (pred[i] - actual[i]);
    return std::sqrt(s / static_cast<double>(pred.size()));
}

/// A percentage metric; undefined when every actual is near zero.
struct PercentMetric {
    double value = std::numeric_limits<double>::quiet_NaN();
    std::size_t excluded = 0;  // points with |actual| < threshold
    [[nodiscard]] bool defined() const { return !std::isnan(value); }
};

constexpr double kNearZero = 1e-8;

/// 100 * mean(|pred - actual| / |actual|) over points with |actual| >= 1e-8.
inline PercentMetric mape(std::span<const double> pred, std::span<const double> actual) {
    detail::require_aligned(pred, actual);
    PercentMetric m;
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (std::abs(actual[i]) < kNearZero) {
            ++m.excluded;
            continue;
        }
        s += std::abs(pred[i] - actual[i]) / std::abs(actual[i]);
        ++n;
    }
    if (n > 0) m.value = 100.0 * s / static_cast<double>(n);
    return m;
}

/// Relative mean bias: 100 * mean(pred - actual) / mean(actual), signed, over
/// points with |actual| >= 1e-8. Undefined when that mean is itself near zero.
inline PercentMetric rmbe(std::span<const double> pred, std::span<const double> actual) {
    detail::require_aligned(pred, actual);
    PercentMetric m;
    double bias = 0.0, level = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (std::abs(actual[i]) < kNearZero) {
            ++m.excluded;
            continue;
        }
        bias += pred[i] - actual[i];
        level += actual[i];
        ++n;
    }
    if (n > 0 && std::abs(level / static_cast<double>(n)) >= kNearZero) m.value = 100.0 * bias / level;
    return m;
}

inline double pinball_at(double q, std::span<const double> pred, std::span<const double> actual) {
    detail::require_aligned(pred, actual);
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = actual[i] - pred[i];
        s += e > 0.0 ? q * e : (q - 1.0) * e;
    }
    return s / static_cast<double>(pred.size());
}

/// Fraction of actuals at or below the predicted quantile.
inline double coverage_below(std::span<const double> pred, std::span<const double> actual) {
    detail::require_aligned(pred, actual);
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) n += actual[i] <= pred[i] ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Reports

struct TargetMetrics {
    std::string target;
    double mae = 0.0;
    PercentMetric mape;
    double rmse = 0.0;
    PercentMetric rmbe;
    double p10_coverage = 0.0;
    double p10_pinball = 0.0;
    double p90_coverage = 0.0;
    double p90_pinball = 0.0;
    std::size_t n_points = 0;
    /// Horizon steps whose raw quantiles crossed and were sorted for interval metrics.
    std::size_t crossing_rows = 0;
};

struct MetricReport {
    std::vector<TargetMetrics> targets;
    std::string rmbe_definition = "100 * mean(pred - actual) / mean(actual)";
    std::vector<double> quantiles;
};

/// Pooled points of one target: raw median track and sorted lower/upper tracks.
struct TargetPoints {
    std::vector<double> actual, lower, median, upper;
    std::size_t crossing_rows = 0;
};

inline TargetMetrics compute_metrics(const std::string& name, const TargetPoints& p, double q_lo, double q_hi) {
    TargetMetrics m;
    m.target = name;
    m.n_points = p.actual.size();
    m.mae = mae(p.median, p.actual);
    m.mape = mape(p.median, p.actual);
    m.rmse = rmse(p.median, p.actual);
    m.rmbe = rmbe(p.median, p.actual);
    m.p10_coverage = coverage_below(p.lower, p.actual);
    m.p10_pinball = pinball_at(q_lo, p.lower, p.actual);
    m.p90_coverage = coverage_below(p.upper, p.actual);
    m.p90_pinball = pinball_at(q_hi, p.upper, p.actual);
    m.crossing_rows = p.crossing_rows;
    return m;
}

/// Column indices of the lower, median and upper quantiles: 0.1/0.5/0.9 when
/// configured, else the lowest, middle and highest.
struct QuantileColumns {
    std::size_t lower = 0, median = 0, upper = 0;
};

inline QuantileColumns quantile_columns(std::span<const double> qs) {
    auto find = [&](double q, std::size_t fallback) {
        for (std::size_t i = 0; i < qs.size(); ++i)
            if (std::abs(qs[i] - q) < 1e-12) return i;
        return fallback;
    };
    return {find(0.1, 0), find(0.5, qs.size() / 2), find(0.9, qs.size() - 1)};
}

/// Forecasts for each window, in order (parallel over windows).
inline std::vector<ForecastBundle> predict_all(const Model& model, std::span<const WindowSample> windows,
                                               std::size_t threads = thread_budget()) {
    std::vector<ForecastBundle> out(windows.size());
    parallel_for(windows.size(), threads, [&](std::size_t i) { out[i] = model.predict(windows[i]); });
    return out;
}

inline MetricReport evaluate(const Model& model, std::span<const WindowSample> windows,
                             std::span<const ForecastBundle> bundles) {
    require(windows.size() == bundles.size(), Errc::LengthMismatch, "one forecast per window");
    const auto& qs = model.config().quantiles;
    const auto cols = quantile_columns(qs);
    const auto targets = model.schema().targets();
    std::vector<TargetPoints> pts(targets.size());
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const auto& w = windows[i];
        auto& p = pts[w.target];
        const auto sorted = sorted_view(bundles[i].quantiles);
        p.crossing_rows += sorted.fixed_rows;
        for (std::size_t h = 0; h < w.future_target.size(); ++h) {
            if (!w.target_observed.empty() && !w.target_observed[h]) continue;
            p.actual.push_back(w.future_target[h]);
            p.median.push_back(bundles[i].quantiles(h, cols.median));
            p.lower.push_back(sorted.values(h, cols.lower));
            p.upper.push_back(sorted.values(h, cols.upper));
        }
    }
    MetricReport r;
    r.quantiles = qs;
    for (std::size_t k = 0; k < targets.size(); ++k) {
        if (pts[k].actual.empty()) continue;
        r.targets.push_back(
            compute_metrics(model.schema().features[targets[k]].name, pts[k], qs[cols.lower], qs[cols.upper]));
    }
    return r;
}

inline nlohmann::json percent_json(const PercentMetric& m) {
    return m.defined() ? nlohmann::json(m.value) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json j;
    j["rmbe_definition"] = r.rmbe_definition;
    j["quantiles"] = r.quantiles;
    j["targets"] = nlohmann::json::array();
    for (const auto& t : r.targets)
        j["targets"].push_back({{"target", t.target},
                                {"MAE", t.mae},
                                {"MAPE", percent_json(t.mape)},
                                {"MAPE_excluded", t.mape.excluded},
                                {"RMSE", t.rmse},
                                {"RMBE", percent_json(t.rmbe)},
                                {"P10_coverage", t.p10_coverage},
                                {"P10_pinball", t.p10_pinball},
                                {"P90_coverage", t.p90_coverage},
                                {"P90_pinball", t.p90_pinball},
                                {"n_points", t.n_points},
                                {"sorted_quantile_rows", t.crossing_rows}});
    return j;
}

/// "MAE (MAPE)" with two decimals; "(>1)" stands in for an undefined MAPE.
inline std::string table_cell(double mae_value, const PercentMetric& mape_value) {
    char buf[96];
    if (mape_value.defined())
        std::snprintf(buf, sizeof buf, "%.2f (%.2f)", mae_value, mape_value.value);
    else
        std::snprintf(buf, sizeof buf, "%.2f (>1)", mae_value);
    return buf;
}

inline std::string render_table(const MetricReport& r) {
    std::size_t w = 6;
    for (const auto& t : r.targets) w = std::max(w, t.target.size());
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s  %-18s  %8s  %8s  %8s  %8s  %8s  %8s\n", static_cast<int>(w), "target",
                  "MAE (MAPE%)", "RMSE", "RMBE%", "P10cov", "P10pin", "P90cov", "P90pin");
    out += buf;
    for (const auto& t : r.targets) {
        char rmbe_buf[32];
        if (t.rmbe.defined())
            std::snprintf(rmbe_buf, sizeof rmbe_buf, "%.2f", t.rmbe.value);
        else
            std::snprintf(rmbe_buf, sizeof rmbe_buf, ">1");
        std::snprintf(buf, sizeof buf, "%-*s  %-18s  %8.2f  %8s  %8.2f  %8.2f  %8.2f  %8.2f\n", static_cast<int>(w),
                      t.target.c_str(), table_cell(t.mae, t.mape).c_str(), t.rmse, rmbe_buf, t.p10_coverage,
                      t.p10_pinball, t.p90_coverage, t.p90_pinball);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Importance

/// Per-variable score of one window: sum_t w_hs[t, j] * m_t, where m_t is the
/// attention mass decoder rows place on encoder step t.
inline std::vector<double> window_importance(const ForecastBundle& b, std::size_t encoder_len) {
    const auto& a = b.attention;
    const auto& w = b.past_weights;
    std::vector<double> mass(encoder_len, 0.0);
    for (std::size_t r = encoder_len; r < a.rows(); ++r)
        for (std::size_t t = 0; t < encoder_len; ++t) mass[t] += a(r, t);
    std::vector<double> score(w.cols(), 0.0);
    for (std::size_t t = 0; t < encoder_len; ++t)
        for (std::size_t j = 0; j < w.cols(); ++j) score[j] += w(t, j) * mass[t];
    return score;
}

struct ImportanceRow {
    std::string target;
    std::string feature;
    double score = 0.0;  // normalised per target, mean over runs
    std::size_t rank = 0;  // 1 = most important within the target
    std::optional<double> cv;  // std / mean across runs, when more than one run
};

struct ImportanceTable {
    std::vector<ImportanceRow> rows;
};

/// One run's per-window scores tagged with their target index.
struct WindowScores {
    std::size_t target = 0;
    std::vector<double> scores;
};

inline ImportanceTable aggregate_importance(const std::vector<std::vector<WindowScores>>& runs,
                                            const DatasetSchema& schema) {
    require(!runs.empty(), Errc::EmptySeries, "no importance runs");
    const auto past = schema.past_vars();
    const auto targets = schema.targets();
    const std::size_t nh = past.size();
    // normalised[k][run][j]
    std::vector<std::vector<std::vector<double>>> norm(targets.size());
    for (const auto& run : runs) {
        std::vector<std::vector<double>> sum(targets.size(), std::vector<double>(nh, 0.0));
        std::vector<std::size_t> count(targets.size(), 0);
        for (const auto& ws : run) {
            require(ws.scores.size() == nh, Errc::ShapeMismatch, "importance width != N_h");
            for (std::size_t j = 0; j < nh; ++j) sum[ws.target][j] += ws.scores[j];
            ++count[ws.target];
        }
        for (std::size_t k = 0; k < targets.size(); ++k) {
            if (count[k] == 0) continue;
            double total = 0.0;
            for (double v : sum[k]) total += v;
            std::vector<double> n(nh, 1.0 / static_cast<double>(nh));
            if (total > 0.0)
                for (std::size_t j = 0; j < nh; ++j) n[j] = sum[k][j] / total;
            norm[k].push_back(std::move(n));
        }
    }
    ImportanceTable table;
    for (std::size_t k = 0; k < targets.size(); ++k) {
        if (norm[k].empty()) continue;
        const double nr = static_cast<double>(norm[k].size());
        std::vector<ImportanceRow> rows(nh);
        for (std::size_t j = 0; j < nh; ++j) {
            double mean = 0.0;
            for (const auto& r : norm[k]) mean += r[j];
            mean /= nr;
            rows[j].target = schema.features[targets[k]].name;
            rows[j].feature = schema.features[past[j]].name;
            rows[j].score = mean;
            if (norm[k].size() > 1) {
                double var = 0.0;
                for (const auto& r : norm[k]) var += (r[j] - mean) * (r[j] - mean);
                const double sd = std::sqrt(var / nr);
                rows[j].cv = mean > 0.0 ? sd / mean : 0.0;
            }
        }
        std::vector<std::size_t> order(nh);
        for (std::size_t j = 0; j < nh; ++j) order[j] = j;
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rows[a].score > rows[b].score; });
        for (std::size_t r = 0; r < nh; ++r) rows[order[r]].rank = r + 1;
        for (auto j : order) table.rows.push_back(rows[j]);
    }
    return table;
}

inline void write_importance_csv(std::ostream& os, const ImportanceTable& t) {
    os << "target,feature,score,rank,cv\n";
    char buf[64];
    for (const auto& r : t.rows) {
        std::snprintf(buf, sizeof buf, "%.10g", r.score);
        os << r.target << ',' << r.feature << ',' << buf << ',' << r.rank << ',';
        if (r.cv) {
            std::snprintf(buf, sizeof buf, "%.10g", *r.cv);
            os << buf;
        }
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Trajectories

struct TrajectoryRow {
    long t = 0;  // -E+1 .. 0 history, 1 .. H forecast
    std::optional<double> history, actual, p10, p50, p90;
};

/// History rows from the encoder target column, then the sorted forecast next
/// to the actual future.
inline std::vector<TrajectoryRow> export_trajectory(const Model& model, const WindowSample& w,
                                                    const ForecastBundle& b) {
    const auto sorted = sorted_view(b.quantiles).values;
    const auto cols = quantile_columns(model.config().quantiles);
    const auto col = model.target_column(w.target);
    const std::size_t E = w.encoder.rows(), H = w.future_target.size();
    std::vector<TrajectoryRow> rows;
    for (std::size_t r = 0; r < E; ++r) {
        TrajectoryRow row;
        row.t = static_cast<long>(r) - static_cast<long>(E) + 1;
        row.history = w.encoder(r, col);
        rows.push_back(row);
    }
    for (std::size_t h = 0; h < H; ++h) {
        TrajectoryRow row;
        row.t = static_cast<long>(h) + 1;
        row.actual = w.future_target[h];
        row.p10 = sorted(h, cols.lower);
        row.p50 = sorted(h, cols.median);
        row.p90 = sorted(h, cols.upper);
        rows.push_back(row);
    }
    return rows;
}

inline void write_trajectory_csv(std::ostream& os, const std::vector<TrajectoryRow>& rows) {
    os << "t,history,actual_future,p10,p50,p90\n";
    auto cell = [&](const std::optional<double>& v) {
        if (!v) return std::string();
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.10g", *v);
        return std::string(buf);
    };
    for (const auto& r : rows)
        os << r.t << ',' << cell(r.history) << ',' << cell(r.actual) << ',' << cell(r.p10) << ',' << cell(r.p50)
           << ',' << cell(r.p90) << '\n';
}

/// Index of the value closest to the mean (first on ties).
inline std::size_t nearest_to_mean(std::span<const double> values) {
    require(!values.empty(), Errc::EmptySeries, "nearest_to_mean of empty set");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (std::abs(values[i] - mean) < std::abs(values[best] - mean)) best = i;
    return best;
}

/// Pearson correlation; 0 when either series is constant.
inline double pearson(std::span<const double> a, std::span<const double> b) {
    detail::require_aligned(a, b);
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

/// Standardised retro mass and representation first differences of one forecast.
struct ShockSeries {
    std::vector<double> retro, diffs;
    bool constant = false;
};

inline ShockSeries shock_series(const ForecastBundle& b, std::size_t encoder_len, std::size_t W = 3,
                                double eps_std = 1e-8) {
    diff::Graph g;
    const auto t = shock_trace(g.constant(b.attention), g.constant(b.representation), encoder_len, W, eps_std);
    return {t.a_std.z.value().vec(), t.s_std.z.value().vec(), t.a_std.constant || t.s_std.constant};
}

} // namespace omnitft

#pragma once
// Stable/volatile regime labelling: the max-minus-min threshold rule on a
// future segment, and a two-state Gaussian HMM over first differences.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnitft/error.hpp"

namespace omnitft {

enum class RegimeLabel : std::uint8_t { Stable = 0, Volatile = 1 };

inline std::string label_name(RegimeLabel l) { return l == RegimeLabel::Volatile ? "volatile" : "stable"; }

/// max(y) - min(y) over the segment.
inline double fluctuation_score(std::span<const double> y) {
    require(!y.empty(), Errc::EmptySegment, "fluctuation score of empty segment");
    const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
    return *hi - *lo;
}

/// Volatile iff score > delta (strict).
inline RegimeLabel threshold_label(double score, double delta) {
    return score > delta ? RegimeLabel::Volatile : RegimeLabel::Stable;
}

/// Nearest-rank 75th percentile of training-window scores.
inline double default_delta(std::vector<double> scores, double percentile = 75.0) {
    require(!scores.empty(), Errc::EmptyScores, "no training scores");
    std::sort(scores.begin(), scores.end());
    const auto n = static_cast<double>(scores.size());
    auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * n));
    rank = std::clamp<std::size_t>(rank, 1, scores.size());
    return scores[rank - 1];
}

/// Per-target delta overrides, read from {"delta": {"hr": 10.0, ...}}.
using DeltaTable = std::map<std::string, double>;

inline DeltaTable parse_delta_table(const nlohmann::json& j) {
    DeltaTable t;
    if (!j.contains("delta")) return t;
    for (const auto& [k, v] : j.at("delta").items()) {
        const double d = v.get<double>();
        require(d >= 0.0, Errc::InvalidConfig, "delta for " + k + " must be >= 0");
        t[k] = d;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Two-state Gaussian HMM

struct HmmParams {
    std::array<std::array<double, 2>, 2> transition{{{0.9, 0.1}, {0.1, 0.9}}};
    std::array<double, 2> mean{0.0, 0.0};
    std::array<double, 2> sd{1.0, 1.0};
    std::array<double, 2> initial{0.5, 0.5};

    /// Index of the state decoded as volatile (larger emission variance).
    [[nodiscard]] std::size_t volatile_state() const noexcept { return sd[1] > sd[0] ? 1 : 0; }
};

struct HmmFit {
    HmmParams params;
    /// Log-likelihood of the data under the parameters entering each EM iteration,
    /// followed by the final parameters' value.
    std::vector<double> log_likelihood;
    std::size_t iterations = 0;
    bool converged = false;
    /// Constant differenced signal: single-regime parameters were returned.
    bool degenerate = false;
};

namespace detail {

constexpr double kSdFloor = 1e-6;

inline double gauss_pdf(double x, double mu, double sd) {
    const double z = (x - mu) / sd;
    return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * std::numbers::pi));
}

inline double gauss_logpdf(double x, double mu, double sd) {
    const double z = (x - mu) / sd;
    return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
}

// Scaled forward-backward; returns log-likelihood, fills posteriors.
inline double forward_backward(std::span<const double> x, const HmmParams& p, std::vector<std::array<double, 2>>& gamma,
                               std::array<std::array<double, 2>, 2>& xi_sum) {
    const std::size_t n = x.size();
    std::vector<std::array<double, 2>> alpha(n), beta(n), emit(n);
    std::vector<double> scale(n);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t k = 0; k < 2; ++k)
            emit[t][k] = std::max(gauss_pdf(x[t], p.mean[k], p.sd[k]), 1e-300);

    double ll = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t k = 0; k < 2; ++k) {
            double prior = t == 0 ? p.initial[k]
                                  : alpha[t - 1][0] * p.transition[0][k] + alpha[t - 1][1] * p.transition[1][k];
            alpha[t][k] = prior * emit[t][k];
        }
        scale[t] = alpha[t][0] + alpha[t][1];
        alpha[t][0] /= scale[t];
        alpha[t][1] /= scale[t];
        ll += std::log(scale[t]);
    }
    beta[n - 1] = {1.0, 1.0};
    for (std::size_t t = n - 1; t-- > 0;)
        for (std::size_t k = 0; k < 2; ++k)
            beta[t][k] = (p.transition[k][0] * emit[t + 1][0] * beta[t + 1][0] +
                          p.transition[k][1] * emit[t + 1][1] * beta[t + 1][1]) /
                         scale[t + 1];

    gamma.assign(n, {0.0, 0.0});
    xi_sum = {{{0.0, 0.0}, {0.0, 0.0}}};
    for (std::size_t t = 0; t < n; ++t) {
        const double s = alpha[t][0] * beta[t][0] + alpha[t][1] * beta[t][1];
        gamma[t] = {alpha[t][0] * beta[t][0] / s, alpha[t][1] * beta[t][1] / s};
        if (t + 1 < n)
            for (std::size_t i = 0; i < 2; ++i)
                for (std::size_t j = 0; j < 2; ++j)
                    xi_sum[i][j] +=
                        alpha[t][i] * p.transition[i][j] * emit[t + 1][j] * beta[t + 1][j] / scale[t + 1];
    }
    return ll;
}

} // namespace detail

/// Baum-Welch EM for a two-state Gaussian HMM. Initialisation splits the
/// samples at the median of |x| (ties broken at random under `seed`).
inline HmmFit hmm_fit(std::span<const double> x, std::size_t max_iter = 50, double tol = 1e-6, std::uint64_t seed = 0) {
    require(x.size() + 1 >= 10, Errc::SignalTooShort, "HMM needs a series of at least 10 points");
    HmmFit fit;
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    if (*hi - *lo == 0.0) {
        fit.degenerate = true;
        fit.params.mean = {*lo, *lo};
        fit.params.sd = {detail::kSdFloor, detail::kSdFloor};
        fit.params.transition = {{{1.0, 0.0}, {0.0, 1.0}}};
        fit.params.initial = {1.0, 0.0};
        fit.converged = true;
        return fit;
    }

    // 2-quantile split of |x|
    std::vector<std::size_t> order(x.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(x[a]) < std::abs(x[b]); });
    std::vector<std::uint8_t> high(x.size(), 0);
    for (std::size_t r = order.size() / 2; r < order.size(); ++r) high[order[r]] = 1;
    for (std::size_t k = 0; k < 2; ++k) {
        double s = 0, ss = 0, c = 0;
        for (std::size_t i = 0; i < x.size(); ++i)
            if (high[i] == k) {
                s += x[i];
                c += 1;
            }
        const double mu = s / c;
        for (std::size_t i = 0; i < x.size(); ++i)
            if (high[i] == k) ss += (x[i] - mu) * (x[i] - mu);
        fit.params.mean[k] = mu;
        fit.params.sd[k] = std::max(std::sqrt(ss / c), detail::kSdFloor);
    }

    std::vector<std::array<double, 2>> gamma;
    std::array<std::array<double, 2>, 2> xi{};
    double prev = -std::numeric_limits<double>::infinity();
    for (std::size_t it = 0; it < max_iter; ++it) {
        const double ll = detail::forward_backward(x, fit.params, gamma, xi);
        fit.log_likelihood.push_back(ll);
        if (it > 0 && ll - prev < tol) {
            fit.converged = true;
            break;
        }
        prev = ll;

        HmmParams next = fit.params;
        next.initial = gamma[0];
        for (std::size_t i = 0; i < 2; ++i) {
            const double row = xi[i][0] + xi[i][1];
            if (row > 0)
                for (std::size_t j = 0; j < 2; ++j) next.transition[i][j] = xi[i][j] / row;
        }
        for (std::size_t k = 0; k < 2; ++k) {
            double w = 0, s = 0;
            for (std::size_t t = 0; t < x.size(); ++t) {
                w += gamma[t][k];
                s += gamma[t][k] * x[t];
            }
            if (w <= 0) continue;
            const double mu = s / w;
            double ss = 0;
            for (std::size_t t = 0; t < x.size(); ++t) ss += gamma[t][k] * (x[t] - mu) * (x[t] - mu);
            next.mean[k] = mu;
            next.sd[k] = std::max(std::sqrt(ss / w), detail::kSdFloor);
        }
        fit.params = next;
        fit.iterations = it + 1;
    }
    if (!fit.converged) fit.log_likelihood.push_back(detail::forward_backward(x, fit.params, gamma, xi));
    return fit;
}

/// Viterbi path over the differenced signal; one label per element of `x`.
inline std::vector<RegimeLabel> hmm_decode(std::span<const double> x, const HmmParams& p) {
    const std::size_t n = x.size();
    std::vector<RegimeLabel> out(n, RegimeLabel::Stable);
    if (n == 0) return out;
    if (p.sd[0] == p.sd[1]) return out;  // single regime
    const std::size_t vol = p.volatile_state();
    auto lg = [](double v) { return v > 0 ? std::log(v) : -std::numeric_limits<double>::infinity(); };

    std::vector<std::array<double, 2>> delta(n);
    std::vector<std::array<std::uint8_t, 2>> back(n);
    for (std::size_t k = 0; k < 2; ++k) delta[0][k] = lg(p.initial[k]) + detail::gauss_logpdf(x[0], p.mean[k], p.sd[k]);
    for (std::size_t t = 1; t < n; ++t)
        for (std::size_t k = 0; k < 2; ++k) {
            const double a = delta[t - 1][0] + lg(p.transition[0][k]);
            const double b = delta[t - 1][1] + lg(p.transition[1][k]);
            back[t][k] = b > a ? 1 : 0;
            delta[t][k] = std::max(a, b) + detail::gauss_logpdf(x[t], p.mean[k], p.sd[k]);
        }
    std::size_t s = delta[n - 1][1] > delta[n - 1][0] ? 1 : 0;
    for (std::size_t t = n; t-- > 0;) {
        out[t] = s == vol ? RegimeLabel::Volatile : RegimeLabel::Stable;
        if (t > 0) s = back[t][s];
    }
    return out;
}

/// First differences y_t - y_{t-1}, length n - 1.
inline std::vector<double> first_differences(std::span<const double> y) {
    std::vector<double> d;
    for (std::size_t t = 1; t < y.size(); ++t) d.push_back(y[t] - y[t - 1]);
    return d;
}

/// Per-step HMM labels for a raw series: the label of diff index t-1 applies
/// to y_t, and y_0 inherits the label of y_1.
inline std::vector<RegimeLabel> hmm_label_series(std::span<const double> y, std::uint64_t seed = 0,
                                                 HmmFit* fit_out = nullptr) {
    const auto d = first_differences(y);
    const auto fit = hmm_fit(d, 50, 1e-6, seed);
    auto dec = hmm_decode(d, fit.params);
    std::vector<RegimeLabel> out(y.size(), RegimeLabel::Stable);
    for (std::size_t t = 1; t < y.size(); ++t) out[t] = dec[t - 1];
    if (y.size() > 1) out[0] = out[1];
    if (fit_out) *fit_out = fit;
    return out;
}

} // namespace omnitft

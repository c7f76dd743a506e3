#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "common.hpp"
#include "omnitft/labeler.hpp"

using namespace omnitft;
using omnitft::testing::thrown;

namespace {

// Two-regime differenced signal with sd ratio `ratio`; returns values and truth.
std::pair<std::vector<double>, std::vector<int>> two_regime(std::size_t n, double ratio, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> x(n);
    std::vector<int> truth(n);
    int state = 0;
    for (std::size_t t = 0; t < n; ++t) {
        if (u(rng) < (state ? 0.05 : 0.02)) state = 1 - state;
        truth[t] = state;
        x[t] = z(rng) * (state ? ratio : 1.0);
    }
    return {x, truth};
}

} // namespace

TEST(Labeler, FluctuationScore) {
    const std::vector<double> y{5, 3, 9, 4};
    EXPECT_EQ(fluctuation_score(y), 6.0);
    EXPECT_EQ(fluctuation_score(std::vector<double>{2, 2, 2}), 0.0);
    EXPECT_EQ(fluctuation_score(std::vector<double>{7}), 0.0);
    EXPECT_EQ(thrown([] { fluctuation_score(std::vector<double>{}); }), Errc::EmptySegment);
}

TEST(Labeler, ThresholdIsStrict) {
    EXPECT_EQ(threshold_label(6, 5), RegimeLabel::Volatile);
    EXPECT_EQ(threshold_label(5, 5), RegimeLabel::Stable);
    EXPECT_EQ(threshold_label(0, 0), RegimeLabel::Stable);
}

TEST(Labeler, ThresholdScaleInvariance) {
    for (double sc : {0.5, 3.0, 7.0})
        EXPECT_EQ(threshold_label(sc * 6.0, sc * 5.0), threshold_label(6.0, 5.0));
}

TEST(Labeler, DefaultDelta) {
    std::vector<double> scores;
    for (int i = 1; i <= 100; ++i) scores.push_back(i);
    const double d = default_delta(scores);
    EXPECT_EQ(d, 75.0);
    std::size_t vol = 0;
    for (double s : scores) vol += threshold_label(s, d) == RegimeLabel::Volatile;
    EXPECT_EQ(vol, 25u);
    EXPECT_EQ(default_delta(std::vector<double>(10, 4.0)), 4.0);
    EXPECT_EQ(thrown([] { default_delta({}); }), Errc::EmptyScores);
}

TEST(Labeler, DeltaTableOverrides) {
    const auto t = parse_delta_table(nlohmann::json::parse(R"({"delta": {"hr": 12.5}})"));
    EXPECT_EQ(t.at("hr"), 12.5);
    EXPECT_EQ(thrown([] { parse_delta_table(nlohmann::json::parse(R"({"delta": {"hr": -1}})")); }),
              Errc::InvalidConfig);
}

TEST(Hmm, IidNoiseHasNoRealRegime) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> z(0.0, 1.0);
    std::vector<double> x(2000);
    for (double& v : x) v = z(rng);
    const auto fit = hmm_fit(x);
    const double r = fit.params.sd[0] / fit.params.sd[1];
    EXPECT_LT(std::max(r, 1.0 / r), 3.0);
}

TEST(Hmm, RecoversVarianceRatio) {
    const auto [x, truth] = two_regime(2000, std::sqrt(10.0), 9);
    const auto fit = hmm_fit(x);
    const double hi = std::max(fit.params.sd[0], fit.params.sd[1]);
    const double lo = std::min(fit.params.sd[0], fit.params.sd[1]);
    EXPECT_GT(hi * hi / (lo * lo), 4.0);
}

TEST(Hmm, LogLikelihoodNonDecreasing) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto [x, truth] = two_regime(1000, 3.0, seed);
        const auto fit = hmm_fit(x);
        ASSERT_GE(fit.log_likelihood.size(), 2u);
        for (std::size_t i = 1; i < fit.log_likelihood.size(); ++i)
            EXPECT_GE(fit.log_likelihood[i], fit.log_likelihood[i - 1] - 1e-9);
    }
}

TEST(Hmm, DecodeAccuracy) {
    const auto [x, truth] = two_regime(2000, std::sqrt(10.0), 21);
    const auto fit = hmm_fit(x);
    const auto dec = hmm_decode(x, fit.params);
    EXPECT_EQ(dec, hmm_decode(x, fit.params));
    std::size_t agree = 0;
    for (std::size_t t = 0; t < x.size(); ++t) agree += (dec[t] == RegimeLabel::Volatile) == (truth[t] == 1);
    EXPECT_GE(static_cast<double>(agree) / static_cast<double>(x.size()), 0.9);
}

TEST(Hmm, ConstantSignalIsDegenerate) {
    const std::vector<double> zeros(50, 0.0);
    const auto fit = hmm_fit(zeros);
    EXPECT_TRUE(fit.degenerate);
    for (auto l : hmm_decode(zeros, fit.params)) EXPECT_EQ(l, RegimeLabel::Stable);
    const std::vector<double> flat(51, 3.0);
    for (auto l : hmm_label_series(flat)) EXPECT_EQ(l, RegimeLabel::Stable);
}

TEST(Hmm, TooShort) {
    EXPECT_EQ(thrown([] { hmm_fit(std::vector<double>{1, 2, 3}); }), Errc::SignalTooShort);
}

TEST(Hmm, SeriesLabelsAlignWithSteps) {
    const auto [d, truth] = two_regime(500, 4.0, 3);
    std::vector<double> y{0.0};
    for (double v : d) y.push_back(y.back() + v);
    const auto labels = hmm_label_series(y);
    ASSERT_EQ(labels.size(), y.size());
    const auto dec = hmm_decode(d, hmm_fit(d).params);
    for (std::size_t t = 1; t < y.size(); ++t) EXPECT_EQ(labels[t], dec[t - 1]);
    EXPECT_EQ(labels[0], labels[1]);
}

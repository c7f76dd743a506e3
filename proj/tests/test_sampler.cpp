#include <algorithm>
#include <set>

#include <gtest/gtest.h>

#include "common.hpp"
#include "omnitft/sampler.hpp"

using namespace omnitft;
using omnitft::testing::thrown;

namespace {

PatientSeries ramp(const DatasetSchema& s, std::size_t n, bool constant = false) {
    PatientSeries p;
    p.patient_id = "p";
    p.values = diff::Tensor(n, s.n_past());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < s.n_past(); ++j)
            p.values(r, j) = constant ? 1.0 : static_cast<double>((r * 7 + j) % 11);
    p.mask.assign(n * s.n_past(), 1);
    p.statics = {0.5, 1.0};
    p.static_mask = {1, 1};
    return p;
}

std::vector<RegimeLabel> labels(std::size_t stable, std::size_t vol) {
    std::vector<RegimeLabel> l(stable, RegimeLabel::Stable);
    l.insert(l.end(), vol, RegimeLabel::Volatile);
    return l;
}

} // namespace

TEST(Sampler, WindowCounts) {
    const auto s = omnitft::testing::tiny_schema(6, 4);
    EXPECT_EQ(enumerate_windows(ramp(s, 10), s, 0, 1.0).size(), 1u);
    EXPECT_EQ(enumerate_windows(ramp(s, 14), s, 0, 1.0).size(), 5u);
    EXPECT_EQ(enumerate_windows(ramp(s, 14), s, 0, 1.0, 2).size(), 3u);
    EXPECT_EQ(thrown([&] { enumerate_windows(ramp(s, 9), s, 0, 1.0); }), Errc::SeriesTooShort);
}

TEST(Sampler, WindowContents) {
    const auto s = omnitft::testing::tiny_schema(6, 4);
    const auto p = ramp(s, 12);
    const auto ws = enumerate_windows(p, s, 0, 1.0);
    const auto& w = ws[2];
    EXPECT_EQ(w.start, 2u);
    EXPECT_EQ(w.encoder(0, 1), p.values(2, 1));
    EXPECT_EQ(w.future_target[0], p.values(8, 0));
    EXPECT_EQ(w.future_known(3, 0), p.values(11, 2));
    EXPECT_EQ(w.score, fluctuation_score(w.future_target));
    EXPECT_EQ(w.statics, p.statics);
}

TEST(Sampler, ConstantSeriesAllStable) {
    const auto s = omnitft::testing::tiny_schema(6, 4);
    for (const auto& w : enumerate_windows(ramp(s, 30, true), s, 0, 0.0)) EXPECT_EQ(w.label, RegimeLabel::Stable);
}

TEST(Sampler, UndersamplesMajority) {
    const auto l = labels(100, 20);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto d = balanced_epoch(l, seed);
        EXPECT_EQ(d.indices.size(), 40u);
        EXPECT_FALSE(d.single_class);
        std::size_t vol = 0;
        for (auto i : d.indices) vol += l[i] == RegimeLabel::Volatile;
        EXPECT_EQ(vol, 20u);
        EXPECT_EQ(std::set<std::size_t>(d.indices.begin(), d.indices.end()).size(), 40u);
    }
}

TEST(Sampler, EvenSplitIsPermutation) {
    const auto d = balanced_epoch(labels(50, 50), 3);
    auto idx = d.indices;
    std::sort(idx.begin(), idx.end());
    for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(idx[i], i);
}

TEST(Sampler, SingleClassFlag) {
    const auto d = balanced_epoch(labels(100, 0), 1);
    EXPECT_TRUE(d.single_class);
    EXPECT_EQ(d.indices.size(), 100u);
}

TEST(Sampler, MajorityCoveredOverEpochs) {
    const auto l = labels(100, 20);
    std::mt19937_64 rng(8);
    std::set<std::size_t> seen;
    for (int e = 0; e < 50; ++e)
        for (auto i : balanced_epoch(l, rng).indices)
            if (l[i] == RegimeLabel::Stable) seen.insert(i);
    EXPECT_GE(seen.size(), 95u);
}

TEST(Sampler, SameSeedSameDraw) {
    const auto l = labels(30, 10);
    EXPECT_EQ(balanced_epoch(l, 5).indices, balanced_epoch(l, 5).indices);
}

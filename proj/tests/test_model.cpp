#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "common.hpp"
#include "omnitft/model.hpp"
#include "omnitft/trainer.hpp"

using namespace omnitft;
using omnitft::testing::random_window;
using omnitft::testing::thrown;
using omnitft::testing::tiny_config;
using omnitft::testing::tiny_schema;

namespace {

void expect_simplex_rows(const diff::Tensor& w, double tol = 1e-9) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
        double s = 0;
        for (double v : w.row_span(r)) {
            EXPECT_GE(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, tol);
    }
}

} // namespace

TEST(Model, BundleShapes) {
    const auto s = tiny_schema(6, 4);
    const Model m(s, tiny_config(8, 2, 2), 1);
    std::mt19937_64 rng(1);
    const auto b = m.predict(random_window(s, rng));
    EXPECT_EQ(b.quantiles.shape(), (diff::Shape{4, 3}));
    EXPECT_EQ(b.attention.shape(), (diff::Shape{10, 10}));
    EXPECT_EQ(b.head_attention.size(), 2u);
    EXPECT_EQ(b.past_weights.shape(), (diff::Shape{6, 3}));
    EXPECT_EQ(b.future_weights.shape(), (diff::Shape{4, 1}));
    EXPECT_EQ(b.decoder_states.shape(), (diff::Shape{4, 8}));
    EXPECT_EQ(b.representation.shape(), (diff::Shape{5, 8}));
    for (double v : b.decoder_states.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, ShapesDependOnlyOnDimensions) {
    const auto s = tiny_schema(5, 3);
    const Model a(s, tiny_config(6, 3, 1), 1), b(s, tiny_config(6, 3, 1), 99);
    std::mt19937_64 rng(2);
    const auto w = random_window(s, rng);
    const auto x = a.predict(w), y = b.predict(w);
    EXPECT_EQ(x.quantiles.shape(), y.quantiles.shape());
    EXPECT_EQ(x.attention.shape(), y.attention.shape());
    EXPECT_EQ(x.representation.shape(), y.representation.shape());
}

TEST(Model, SelectionWeightsOnSimplex) {
    const auto s = tiny_schema();
    const Model m(s, tiny_config(), 3);
    std::mt19937_64 rng(3);
    for (int i = 0; i < 20; ++i) {
        const auto b = m.predict(random_window(s, rng));
        expect_simplex_rows(b.past_weights);
        expect_simplex_rows(b.future_weights);
    }
}

TEST(Model, SingleVariableWeightIsOne) {
    DatasetSchema s;
    s.encoder_len = 5;
    s.horizon_len = 3;
    s.features = {{"y", Role::target, DType::continuous, 0, {}, ""}};
    s = validate_schema(s);
    const Model m(s, tiny_config(), 1);
    std::mt19937_64 rng(4);
    const auto b = m.predict(random_window(s, rng));
    for (double v : b.past_weights.data()) EXPECT_EQ(v, 1.0);
    EXPECT_TRUE(b.future_weights.empty());
}

TEST(Model, AttentionCausalAndRowStochastic) {
    const auto s = tiny_schema();
    const Model m(s, tiny_config(8, 3, 2), 5);
    std::mt19937_64 rng(5);
    const auto b = m.predict(random_window(s, rng));
    const auto T = b.attention.rows();
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t tau = t + 1; tau < T; ++tau) {
            EXPECT_EQ(b.attention(t, tau), 0.0);
            for (const auto& h : b.head_attention) EXPECT_EQ(h(t, tau), 0.0);
        }
    expect_simplex_rows(b.attention);
}

TEST(Model, SingleHeadAverageIsTheHead) {
    const auto s = tiny_schema();
    const Model m(s, tiny_config(8, 1, 1), 6);
    std::mt19937_64 rng(6);
    const auto b = m.predict(random_window(s, rng));
    ASSERT_EQ(b.head_attention.size(), 1u);
    EXPECT_EQ(b.attention, b.head_attention[0]);
}

TEST(Model, BiasOnlyHead) {
    const auto s = tiny_schema();
    Model m(s, tiny_config(), 7);
    m.params().at("head/y/w").fill(0.0);
    m.params().at("head/y/b") = diff::Tensor::row({-1.5, 0.25, 3.0});
    std::mt19937_64 rng(7);
    const auto b = m.predict(random_window(s, rng));
    for (std::size_t h = 0; h < b.quantiles.rows(); ++h) {
        EXPECT_DOUBLE_EQ(b.quantiles(h, 0), -1.5);
        EXPECT_DOUBLE_EQ(b.quantiles(h, 1), 0.25);
        EXPECT_DOUBLE_EQ(b.quantiles(h, 2), 3.0);
    }
}

TEST(Model, HeadOutputsInTargetUnits) {
    const auto s = tiny_schema();
    Model m(s, tiny_config(), 7);
    m.params().at("head/y/w").fill(0.0);
    m.params().at("head/y/b") = diff::Tensor::row({-1.0, 0.0, 1.0});
    auto n = Normalizer::identity(s);
    n.past_mean[0] = 50.0;
    n.past_sd[0] = 4.0;
    m.set_normalizer(n);
    std::mt19937_64 rng(7);
    const auto b = m.predict(random_window(s, rng));
    EXPECT_DOUBLE_EQ(b.quantiles(0, 0), 46.0);
    EXPECT_DOUBLE_EQ(b.quantiles(0, 2), 54.0);
}

TEST(Model, SortedViewNeverCrosses) {
    const diff::Tensor q(3, 3, std::vector<double>{1, 2, 3, 3, 1, 2, 5, 5, 4});
    const auto v = sorted_view(q);
    EXPECT_EQ(v.fixed_rows, 2u);
    for (std::size_t r = 0; r < 3; ++r) {
        EXPECT_LE(v.values(r, 0), v.values(r, 1));
        EXPECT_LE(v.values(r, 1), v.values(r, 2));
    }
}

TEST(Model, DeterministicGivenSeed) {
    const auto s = tiny_schema();
    auto cfg = tiny_config();
    cfg.dropout = 0.3;
    const Model a(s, cfg, 11), b(s, cfg, 11);
    EXPECT_EQ(a.params(), b.params());
    std::mt19937_64 rng(8);
    const auto w = random_window(s, rng);
    auto run = [&](std::uint64_t seed) {
        diff::Graph g;
        Binder bind(g, a.params(), false);
        return a.forward(bind, w, {true, seed}).quantiles.value();
    };
    EXPECT_EQ(run(5), run(5));
    EXPECT_NE(run(5), run(6));
    EXPECT_EQ(a.predict(w).quantiles, a.predict(w).quantiles);
}

TEST(Model, LargeInputsStayFinite) {
    const auto s = tiny_schema();
    const Model m(s, tiny_config(), 12);
    std::mt19937_64 rng(9);
    auto w = random_window(s, rng);
    for (double& x : w.encoder.data()) x *= 1e3;
    for (double& x : w.future_known.data()) x *= 1e3;
    w.statics[0] = -1e3;
    const auto b = m.predict(w);
    for (double v : b.quantiles.data()) EXPECT_TRUE(std::isfinite(v));
    for (double v : b.representation.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, CategoryOutOfVocab) {
    const auto s = tiny_schema(6, 4, 5);
    const Model m(s, tiny_config(), 1);
    std::mt19937_64 rng(10);
    auto w = random_window(s, rng);
    w.statics[1] = 5.0;
    EXPECT_EQ(thrown([&] { (void)m.predict(w); }), Errc::CategoryOutOfVocab);
}

TEST(Model, ContinuousEmbeddingOfZeroIsZero) {
    const auto s = tiny_schema();
    Model m(s, tiny_config(), 1);
    diff::Graph g;
    Binder b(g, m.params(), false);
    m.params().at("embed/obs/b").fill(0.0);
    const auto e = nn::linear(b, "embed/obs/w", "embed/obs/b", g.constant(diff::Tensor::column({0.0, 0.0})));
    for (double v : e.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, CategoryLooksUpItsRow) {
    const auto s = tiny_schema(6, 4, 5);
    const Model m(s, tiny_config(), 2);
    const auto& table = m.params().at(Model::table_name("unit"));
    diff::Graph g;
    const auto row = diff::slice_rows(g.constant(table), 3, 1).value();
    for (std::size_t c = 0; c < table.cols(); ++c) EXPECT_EQ(row[c], table(3, c));
}

TEST(Model, MixtureIgnoresZeroWeightedVariable) {
    const auto s = tiny_schema();
    const Model m(s, tiny_config(), 13);
    std::mt19937_64 rng(13);
    std::normal_distribution<double> n;
    auto fuse = [&](const diff::Tensor& e2) {
        diff::Graph g;
        Binder b(g, m.params(), false);
        diff::Tensor e0(1, 8), e1(1, 8);
        std::mt19937_64 r2(1);
        for (double& x : e0.data()) x = n(r2);
        for (double& x : e1.data()) x = n(r2);
        const std::vector<double> w{0.3, 0.7, 0.0};
        const std::vector<diff::Tensor> embs{e0, e1, e2};
        diff::Var fused;
        for (std::size_t j = 0; j < 3; ++j) {
            auto term = diff::scale(nn::grn(b, "vsn_past/var" + std::to_string(j), g.constant(embs[j])), w[j]);
            fused = j == 0 ? term : diff::add(fused, term);
        }
        return fused.value();
    };
    diff::Tensor a(1, 8), z(1, 8);
    for (double& x : a.data()) x = n(rng);
    EXPECT_EQ(fuse(a), fuse(z));
}

TEST(Model, ClosedGateReducesGrnToNormalisedResidual) {
    ParameterSet p;
    const std::size_t d = 4;
    std::mt19937_64 rng(14);
    std::normal_distribution<double> n;
    auto rnd = [&](std::size_t r, std::size_t c) {
        diff::Tensor t(r, c);
        for (double& x : t.data()) x = n(rng);
        return t;
    };
    p.add("g/w1", rnd(d, d));
    p.add("g/b1", rnd(1, d));
    p.add("g/w2", rnd(d, d));
    p.add("g/b2", rnd(1, d));
    p.add("g/wg", diff::Tensor(d, d));
    p.add("g/bg", diff::Tensor(1, d, -800.0));
    p.add("g/wl", rnd(d, d));
    p.add("g/bl", rnd(1, d));
    p.add("g/ln_g", diff::Tensor(1, d, 1.0));
    p.add("g/ln_b", diff::Tensor(1, d));
    diff::Graph g;
    Binder b(g, p, false);
    const auto x = g.constant(rnd(3, d));
    const auto out = nn::grn(b, "g", x).value();
    const auto ref = diff::layer_norm_rows(x).value();
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-9);
}

TEST(Model, ZeroLstmGivesZeroOutput) {
    ParameterSet p;
    p.add("l/w", diff::Tensor(3, 12));
    p.add("l/u", diff::Tensor(3, 12));
    p.add("l/b", diff::Tensor(1, 12));
    diff::Graph g;
    Binder b(g, p, false);
    const auto [out, st] = nn::lstm_layer(b, "l", g.constant(diff::Tensor(5, 3)),
                                          {g.constant(diff::Tensor(1, 3)), g.constant(diff::Tensor(1, 3))});
    EXPECT_EQ(out.rows(), 5u);
    for (double v : out.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, Causality) {
    const auto s = tiny_schema(6, 4);
    const Model m(s, tiny_config(8, 2, 2), 15);
    std::mt19937_64 rng(15);
    const auto w = random_window(s, rng);
    auto internals = [&](const WindowSample& x) {
        diff::Graph g;
        Binder b(g, m.params(), false);
        const auto fv = m.forward(b, x);
        return std::pair{fv.attention.value(), fv.lstm_output.value()};
    };
    const auto [a0, l0] = internals(w);
    const std::size_t d = 8;
    // perturb the future input at horizon step 2 (position E + 2)
    auto wf = w;
    wf.future_known(2, 0) += 5.0;
    const auto [a1, l1] = internals(wf);
    const std::size_t pos = 8;
    for (std::size_t t = 0; t < pos; ++t) {
        for (std::size_t c = 0; c < a0.cols(); ++c) EXPECT_EQ(a0(t, c), a1(t, c)) << t;
        for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(l0(t, c), l1(t, c)) << t;
    }
    bool changed = false;
    for (std::size_t c = 0; c < d; ++c) changed = changed || l0(pos, c) != l1(pos, c);
    EXPECT_TRUE(changed);
    // perturb an encoder input at step 3
    auto we = w;
    we.encoder(3, 1) += 5.0;
    const auto [a2, l2] = internals(we);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t c = 0; c < a0.cols(); ++c) EXPECT_EQ(a0(t, c), a2(t, c));
}

TEST(Model, RebuildChecksParameters) {
    const auto s = tiny_schema();
    const Model m(s, tiny_config(), 1);
    EXPECT_NO_THROW(Model(s, tiny_config(), m.params(), m.normalizer()));
    EXPECT_EQ(thrown([&] { Model(s, tiny_config(6, 2, 1), m.params(), m.normalizer()); }), Errc::BadCheckpoint);
}

TEST(Model, ConfigValidation) {
    auto c = tiny_config();
    c.quantiles = {0.5, 0.1};
    EXPECT_EQ(thrown([&] { validate_config(c); }), Errc::InvalidConfig);
    c.quantiles = {0.0, 0.5};
    EXPECT_EQ(thrown([&] { validate_config(c); }), Errc::InvalidConfig);
    const nlohmann::json j = ModelConfig{};
    EXPECT_EQ(j.get<ModelConfig>(), ModelConfig{});
    EXPECT_EQ(ModelConfig{}.hidden, 128u);
    EXPECT_EQ(ModelConfig{}.heads, 6u);
    EXPECT_EQ(ModelConfig{}.blocks, 4u);
    EXPECT_EQ(ModelConfig{}.dropout, 0.3);
    EXPECT_EQ(ModelConfig{}.retro_window, 3u);
}

TEST(Model, QuantileLossGradientMatchesFiniteDifferences) {
    const auto s = tiny_schema(6, 4);
    const Model m(s, tiny_config(8, 2, 1), 21);
    std::mt19937_64 rng(21);
    const auto w = random_window(s, rng);
    const auto rep = omnitft::testing::param_grad_check(
        m,
        [&](Binder& b) {
            const auto fv = m.forward(b, w);
            return quantile_loss(fv.quantiles, fv.target_normalized, m.config().quantiles);
        },
        4, 21);
    // Coordinates with |grad| below 1e-6 sit near the finite-difference noise
    // floor (one ulp of the loss over 2eps), so they get a looser bound.
    EXPECT_LE(rep.max_rel_error_resolvable, 1e-4);
    EXPECT_LE(rep.max_rel_error, 1e-2) << "worst input " << rep.worst_input << " index " << rep.worst_index
                                       << " analytic " << rep.analytic << " numeric " << rep.numeric;
}

#pragma once
// Small fixtures shared by the unit tests and the acceptance binary.

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "omnitft/error.hpp"
#include "omnitft/model.hpp"
#include "omnitft/params.hpp"
#include "omnitft/sampler.hpp"
#include "omnitft/schema.hpp"

namespace omnitft::testing {

/// Error code thrown by `f`, if any.
template <class F>
std::optional<Errc> thrown(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return std::nullopt;
}

/// One target, one observed input, one known input, a continuous and a categorical static.
inline DatasetSchema tiny_schema(std::size_t E = 6, std::size_t H = 4, std::size_t vocab = 5) {
    DatasetSchema s;
    s.encoder_len = E;
    s.horizon_len = H;
    s.features = {
        {"y", Role::target, DType::continuous, 0, {}, ""},
        {"obs", Role::observed_past, DType::continuous, 0, {}, ""},
        {"clock", Role::known_future, DType::continuous, 0, {}, ""},
        {"age", Role::static_covariate, DType::continuous, 0, {}, ""},
        {"unit", Role::static_covariate, DType::categorical, vocab, {}, ""},
    };
    return validate_schema(s);
}

inline ModelConfig tiny_config(std::size_t d = 8, std::size_t heads = 2, std::size_t blocks = 1) {
    ModelConfig c;
    c.hidden = d;
    c.heads = heads;
    c.blocks = blocks;
    c.dropout = 0.0;
    return c;
}

/// A window with standard normal inputs and a random category.
inline WindowSample random_window(const DatasetSchema& s, std::mt19937_64& rng, std::size_t target = 0) {
    std::normal_distribution<double> n(0.0, 1.0);
    const std::size_t E = s.encoder_len, H = s.horizon_len;
    const auto past = s.past_vars();
    const auto fut = s.future_vars();
    const auto stat = s.static_vars();
    WindowSample w;
    w.patient_id = "p";
    w.target = target;
    w.encoder = diff::Tensor(E, past.size());
    for (std::size_t r = 0; r < E; ++r)
        for (std::size_t j = 0; j < past.size(); ++j) {
            const auto& f = s.features[past[j]];
            w.encoder(r, j) = f.categorical() ? static_cast<double>(rng() % f.vocab_size) : n(rng);
        }
    w.future_known = diff::Tensor(H, fut.size());
    for (double& x : w.future_known.data()) x = n(rng);
    w.future_target.resize(H);
    for (double& x : w.future_target) x = n(rng);
    w.target_observed.assign(H, 1);
    for (std::size_t j = 0; j < stat.size(); ++j) {
        const auto& f = s.features[stat[j]];
        w.statics.push_back(f.categorical() ? static_cast<double>(rng() % f.vocab_size) : n(rng));
    }
    return w;
}

/// Random T x T causal row-stochastic matrix.
inline diff::Tensor random_causal(std::size_t T, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.01, 1.0);
    diff::Tensor a(T, T);
    for (std::size_t t = 0; t < T; ++t) {
        double s = 0;
        for (std::size_t k = 0; k <= t; ++k) s += a(t, k) = u(rng);
        for (std::size_t k = 0; k <= t; ++k) a(t, k) /= s;
    }
    return a;
}

/// Finite-difference check of `objective` against every parameter of `m`
/// (at most `per_tensor` coordinates of each tensor, 0 = all).
inline diff::GradCheckReport param_grad_check(const Model& m, const std::function<diff::Var(Binder&)>& objective,
                                              std::size_t per_tensor = 0, std::uint64_t seed = 0) {
    std::vector<std::string> names;
    std::vector<diff::Tensor> xs;
    for (const auto& [name, t] : m.params().tensors()) {
        names.push_back(name);
        xs.push_back(t);
    }
    diff::GradCheckOptions opt;
    opt.max_coordinates = per_tensor;
    opt.seed = seed;
    return diff::grad_check(
        [&](diff::Graph& g, const std::vector<diff::Var>& vs) {
            Binder b(g, m.params(), false);
            for (std::size_t k = 0; k < vs.size(); ++k) b.set(names[k], vs[k]);
            return objective(b);
        },
        std::move(xs), opt);
}

} // namespace omnitft::testing

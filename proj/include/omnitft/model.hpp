#pragma once
// Temporal-fusion quantile forecaster: input embeddings, variable selection,
// static covariate encoder, LSTM encoder/decoder, stacked causal
// interpretable multi-head attention and per-target quantile heads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnitft/diff.hpp"
#include "omnitft/error.hpp"
#include "omnitft/ingest.hpp"
#include "omnitft/params.hpp"
#include "omnitft/sampler.hpp"
#include "omnitft/schema.hpp"

namespace omnitft {

/// Which hidden states stand for the decoder-side representation v_t.
enum class Representation { post_attention, lstm_decoder };

struct ModelConfig {
    std::size_t hidden = 128;
    std::size_t heads = 6;
    std::size_t blocks = 4;
    double dropout = 0.3;
    std::vector<double> quantiles{0.1, 0.5, 0.9};
    std::size_t lstm_layers = 2;
    std::size_t retro_window = 3;
    /// Per-head query/key/value width; 0 means max(1, hidden / heads).
    std::size_t head_dim = 0;
    Representation representation = Representation::post_attention;

    [[nodiscard]] std::size_t attention_dim() const { return head_dim ? head_dim : std::max<std::size_t>(1, hidden / heads); }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline ModelConfig validate_config(ModelConfig c) {
    require(c.hidden >= 1, Errc::InvalidConfig, "hidden must be >= 1");
    require(c.heads >= 1, Errc::InvalidConfig, "heads must be >= 1");
    require(c.blocks >= 1, Errc::InvalidConfig, "blocks must be >= 1");
    require(c.lstm_layers >= 1, Errc::InvalidConfig, "lstm_layers must be >= 1");
    require(c.retro_window >= 1, Errc::InvalidConfig, "retro_window must be >= 1");
    require(c.dropout >= 0.0 && c.dropout < 1.0, Errc::InvalidConfig, "dropout must be in [0, 1)");
    require(!c.quantiles.empty(), Errc::InvalidConfig, "no quantiles");
    for (std::size_t i = 0; i < c.quantiles.size(); ++i) {
        require(c.quantiles[i] > 0.0 && c.quantiles[i] < 1.0, Errc::InvalidConfig, "quantiles must lie in (0, 1)");
        require(i == 0 || c.quantiles[i] > c.quantiles[i - 1], Errc::InvalidConfig,
                "quantiles must be strictly increasing");
    }
    return c;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"hidden", c.hidden},
                       {"heads", c.heads},
                       {"blocks", c.blocks},
                       {"dropout", c.dropout},
                       {"quantiles", c.quantiles},
                       {"lstm_layers", c.lstm_layers},
                       {"retro_window", c.retro_window},
                       {"head_dim", c.head_dim},
                       {"representation", c.representation == Representation::post_attention ? "post_attention"
                                                                                               : "lstm_decoder"}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.hidden = j.value("hidden", d.hidden);
    c.heads = j.value("heads", d.heads);
    c.blocks = j.value("blocks", d.blocks);
    c.dropout = j.value("dropout", d.dropout);
    c.quantiles = j.value("quantiles", d.quantiles);
    c.lstm_layers = j.value("lstm_layers", d.lstm_layers);
    c.retro_window = j.value("retro_window", d.retro_window);
    c.head_dim = j.value("head_dim", d.head_dim);
    const auto rep = j.value("representation", std::string("post_attention"));
    require(rep == "post_attention" || rep == "lstm_decoder", Errc::InvalidConfig, "unknown representation " + rep);
    c.representation = rep == "post_attention" ? Representation::post_attention : Representation::lstm_decoder;
}

/// Per-feature affine standardisation of continuous inputs (identity for categoricals).
struct Normalizer {
    std::vector<double> past_mean, past_sd;      // schema.past_vars() order
    std::vector<double> static_mean, static_sd;  // schema.static_vars() order

    static Normalizer identity(const DatasetSchema& s) {
        Normalizer n;
        n.past_mean.assign(s.n_past(), 0.0);
        n.past_sd.assign(s.n_past(), 1.0);
        n.static_mean.assign(s.static_vars().size(), 0.0);
        n.static_sd.assign(s.static_vars().size(), 1.0);
        return n;
    }

    static Normalizer fit(const std::vector<PatientSeries>& train, const DatasetSchema& s) {
        Normalizer n = identity(s);
        const auto past = s.past_vars();
        const auto stat = s.static_vars();
        auto finish = [](double sum, double sq, double cnt, double& mean, double& sd) {
            if (cnt < 1) return;
            mean = sum / cnt;
            const double var = std::max(0.0, sq / cnt - mean * mean);
            sd = std::sqrt(var) > 1e-8 ? std::sqrt(var) : 1.0;
        };
        for (std::size_t j = 0; j < past.size(); ++j) {
            if (s.features[past[j]].categorical()) continue;
            double sum = 0, sq = 0, cnt = 0;
            for (const auto& p : train)
                for (std::size_t r = 0; r < p.length(); ++r) {
                    sum += p.values(r, j);
                    sq += p.values(r, j) * p.values(r, j);
                    cnt += 1;
                }
            finish(sum, sq, cnt, n.past_mean[j], n.past_sd[j]);
        }
        for (std::size_t j = 0; j < stat.size(); ++j) {
            if (s.features[stat[j]].categorical()) continue;
            double sum = 0, sq = 0, cnt = 0;
            for (const auto& p : train) {
                sum += p.statics[j];
                sq += p.statics[j] * p.statics[j];
                cnt += 1;
            }
            finish(sum, sq, cnt, n.static_mean[j], n.static_sd[j]);
        }
        return n;
    }

    friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

inline void to_json(nlohmann::json& j, const Normalizer& n) {
    j = nlohmann::json{{"past_mean", n.past_mean},
                       {"past_sd", n.past_sd},
                       {"static_mean", n.static_mean},
                       {"static_sd", n.static_sd}};
}
inline void from_json(const nlohmann::json& j, Normalizer& n) {
    n.past_mean = j.at("past_mean").get<std::vector<double>>();
    n.past_sd = j.at("past_sd").get<std::vector<double>>();
    n.static_mean = j.at("static_mean").get<std::vector<double>>();
    n.static_sd = j.at("static_sd").get<std::vector<double>>();
}

struct ForwardOptions {
    bool training = false;  // enables dropout
    std::uint64_t dropout_seed = 0;
};

/// Graph handles produced by one forward pass; everything the penalties consume.
struct ForwardVars {
    diff::Var quantiles;       // H x Q, in normalised target units
    diff::Var past_weights;    // E x N_h
    std::optional<diff::Var> future_weights;  // H x N_f, absent when N_f = 0
    std::vector<diff::Var> head_attention;    // M of T x T, final block
    diff::Var attention;       // T x T head average
    diff::Var representation;  // (H + 1) x d: last encoder row then decoder rows
    diff::Var lstm_output;     // T x d
    /// Embedding lookups per categorical feature name, per category.
    std::map<std::string, std::vector<double>> category_counts;
    std::vector<double> target_normalized;  // H, future target in model units
};

/// Plain-value forecast for one window.
struct ForecastBundle {
    diff::Tensor quantiles;  // H x Q, target units, raw (may cross)
    diff::Tensor attention;  // T x T
    std::vector<diff::Tensor> head_attention;
    diff::Tensor past_weights;
    diff::Tensor future_weights;
    diff::Tensor decoder_states;  // H x d
    diff::Tensor representation;  // (H + 1) x d, last encoder row first
};

/// Quantile trajectories sorted per row so they never cross; `fixed_rows`
/// counts rows that needed reordering.
struct SortedQuantiles {
    diff::Tensor values;
    std::size_t fixed_rows = 0;
};

inline SortedQuantiles sorted_view(const diff::Tensor& q) {
    SortedQuantiles out{q, 0};
    for (std::size_t r = 0; r < q.rows(); ++r) {
        std::vector<double> row(q.row_span(r).begin(), q.row_span(r).end());
        if (!std::is_sorted(row.begin(), row.end())) {
            std::sort(row.begin(), row.end());
            ++out.fixed_rows;
        }
        for (std::size_t c = 0; c < row.size(); ++c) out.values(r, c) = row[c];
    }
    return out;
}

class Model {
public:
    Model(DatasetSchema schema, ModelConfig config, std::uint64_t init_seed = 0)
        : schema_(validate_schema(std::move(schema))), config_(validate_config(std::move(config))),
          normalizer_(Normalizer::identity(schema_)) {
        init_parameters(init_seed);
    }

    /// Rebuilds a model around existing parameters (e.g. from a checkpoint).
    Model(DatasetSchema schema, ModelConfig config, ParameterSet params, Normalizer normalizer)
        : schema_(validate_schema(std::move(schema))), config_(validate_config(std::move(config))),
          normalizer_(std::move(normalizer)) {
        const Model fresh(schema_, config_, 0);
        require(params.size() == fresh.params_.size(), Errc::BadCheckpoint, "parameter count mismatch");
        for (const auto& [name, t] : fresh.params_.tensors())
            require(params.contains(name) && params.at(name).shape() == t.shape(), Errc::BadCheckpoint,
                    "parameter " + name + " missing or misshapen");
        params_ = std::move(params);
    }

    [[nodiscard]] const DatasetSchema& schema() const noexcept { return schema_; }
    [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
    [[nodiscard]] const ParameterSet& params() const noexcept { return params_; }
    ParameterSet& params() noexcept { return params_; }
    [[nodiscard]] const Normalizer& normalizer() const noexcept { return normalizer_; }
    void set_normalizer(Normalizer n) { normalizer_ = std::move(n); }

    /// Names of every categorical embedding table, in schema order.
    [[nodiscard]] std::vector<std::string> embedding_tables() const {
        std::vector<std::string> out;
        for (const auto& f : schema_.features)
            if (f.categorical()) out.push_back(table_name(f.name));
        return out;
    }
    static std::string table_name(const std::string& feature) { return "embed/" + feature + "/table"; }

    [[nodiscard]] ForwardVars forward(Binder& bind, const WindowSample& w, const ForwardOptions& opt = {}) const;

    /// Inference: no gradients, dropout off, outputs in target units.
    [[nodiscard]] ForecastBundle predict(const WindowSample& w, diff::Precision precision = diff::Precision::f64) const {
        diff::Graph g(precision);
        Binder bind(g, params_, false);
        const auto fv = forward(bind, w);
        ForecastBundle b;
        const auto col = target_column(w.target);
        b.quantiles = fv.quantiles.value();
        for (double& x : b.quantiles.data()) x = x * normalizer_.past_sd[col] + normalizer_.past_mean[col];
        b.attention = fv.attention.value();
        for (const auto& a : fv.head_attention) b.head_attention.push_back(a.value());
        b.past_weights = fv.past_weights.value();
        if (fv.future_weights) b.future_weights = fv.future_weights->value();
        const auto& rep = fv.representation.value();
        b.representation = rep;
        b.decoder_states = diff::Tensor(rep.rows() - 1, rep.cols());
        for (std::size_t i = 0; i < b.decoder_states.size(); ++i) b.decoder_states[i] = rep[rep.cols() + i];
        return b;
    }

    /// Column of target `k` within the past-side variables.
    [[nodiscard]] std::size_t target_column(std::size_t k) const {
        const auto past = schema_.past_vars();
        const auto f = schema_.targets().at(k);
        return static_cast<std::size_t>(std::find(past.begin(), past.end(), f) - past.begin());
    }

private:
    enum class Init { xavier, zeros, ones, forget_bias };

    void param(const std::string& name, std::size_t rows, std::size_t cols, Init init) {
        diff::Tensor t(rows, cols);
        switch (init) {
        case Init::xavier: {
            const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
            std::uniform_real_distribution<double> u(-a, a);
            for (double& x : t.data()) x = u(rng_);
            break;
        }
        case Init::zeros: break;
        case Init::ones: t.fill(1.0); break;
        case Init::forget_bias:
            for (std::size_t c = cols / 4; c < cols / 2; ++c) t(0, c) = 1.0;
            break;
        }
        params_.add(name, std::move(t));
    }

    void grn_params(const std::string& n, std::size_t in, std::size_t out, bool context) {
        const auto d = config_.hidden;
        param(n + "/w1", in, d, Init::xavier);
        param(n + "/b1", 1, d, Init::zeros);
        if (context) param(n + "/wc", d, d, Init::xavier);
        param(n + "/w2", d, d, Init::xavier);
        param(n + "/b2", 1, d, Init::zeros);
        param(n + "/wg", d, out, Init::xavier);
        param(n + "/bg", 1, out, Init::zeros);
        param(n + "/wl", d, out, Init::xavier);
        param(n + "/bl", 1, out, Init::zeros);
        if (in != out) {
            param(n + "/skip_w", in, out, Init::xavier);
            param(n + "/skip_b", 1, out, Init::zeros);
        }
        param(n + "/ln_g", 1, out, Init::ones);
        param(n + "/ln_b", 1, out, Init::zeros);
    }

    void gate_params(const std::string& n) {
        const auto d = config_.hidden;
        param(n + "/wg", d, d, Init::xavier);
        param(n + "/bg", 1, d, Init::zeros);
        param(n + "/wl", d, d, Init::xavier);
        param(n + "/bl", 1, d, Init::zeros);
        param(n + "/ln_g", 1, d, Init::ones);
        param(n + "/ln_b", 1, d, Init::zeros);
    }

    void init_parameters(std::uint64_t seed) {
        rng_.seed(seed);
        const auto d = config_.hidden;
        for (const auto& f : schema_.features) {
            if (f.categorical()) {
                param(table_name(f.name), f.vocab_size, d, Init::xavier);
            } else {
                param("embed/" + f.name + "/w", 1, d, Init::xavier);
                param("embed/" + f.name + "/b", 1, d, Init::zeros);
            }
        }
        const auto n_static = schema_.static_vars().size();
        const bool has_static = n_static > 0;
        if (has_static) {
            grn_params("static_vsn/flat", n_static * d, n_static, false);
            for (std::size_t j = 0; j < n_static; ++j) grn_params("static_vsn/var" + std::to_string(j), d, d, false);
            for (const char* c : {"select", "enrich", "state_h", "state_c"})
                grn_params(std::string("static_ctx/") + c, d, d, false);
        }
        const auto nh = schema_.n_past();
        grn_params("vsn_past/flat", nh * d, nh, has_static);
        for (std::size_t j = 0; j < nh; ++j) grn_params("vsn_past/var" + std::to_string(j), d, d, false);
        const auto nf = schema_.n_future();
        if (nf > 0) {
            grn_params("vsn_future/flat", nf * d, nf, has_static);
            for (std::size_t j = 0; j < nf; ++j) grn_params("vsn_future/var" + std::to_string(j), d, d, false);
        }
        for (const char* part : {"lstm_enc", "lstm_dec"})
            for (std::size_t l = 0; l < config_.lstm_layers; ++l) {
                const auto n = std::string(part) + "/l" + std::to_string(l);
                param(n + "/w", d, 4 * d, Init::xavier);
                param(n + "/u", d, 4 * d, Init::xavier);
                param(n + "/b", 1, 4 * d, Init::forget_bias);
            }
        gate_params("post_lstm");
        grn_params("enrich", d, d, has_static);
        const auto dk = config_.attention_dim();
        for (std::size_t b = 0; b < config_.blocks; ++b) {
            const auto n = "attn" + std::to_string(b);
            for (std::size_t m = 0; m < config_.heads; ++m) {
                param(n + "/wq" + std::to_string(m), d, dk, Init::xavier);
                param(n + "/wk" + std::to_string(m), d, dk, Init::xavier);
            }
            param(n + "/wv", d, dk, Init::xavier);
            param(n + "/wo", dk, d, Init::xavier);
            gate_params(n + "/gate");
            grn_params(n + "/ff", d, d, false);
        }
        gate_params("pre_output");
        for (auto t : schema_.targets()) {
            const auto n = "head/" + schema_.features[t].name;
            param(n + "/w", d, config_.quantiles.size(), Init::xavier);
            param(n + "/b", 1, config_.quantiles.size(), Init::zeros);
        }
    }

    DatasetSchema schema_;
    ModelConfig config_;
    Normalizer normalizer_;
    ParameterSet params_;
    std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Building blocks

namespace nn {

using diff::Var;

struct Dropout {
    double rate = 0.0;
    std::mt19937_64* rng = nullptr;  // null: dropout disabled

    Var operator()(Var x) const { return rng && rate > 0.0 ? diff::dropout(x, rate, *rng) : x; }
};

inline Var linear(Binder& p, const std::string& w, const std::string& b, Var x) {
    return diff::add(diff::matmul(x, p(w)), p(b));
}

inline Var layer_norm(Binder& p, const std::string& n, Var x) {
    return diff::add(diff::mul(diff::layer_norm_rows(x), p(n + "/ln_g")), p(n + "/ln_b"));
}

/// Gated linear unit: sigmoid(x Wg + bg) * (x Wl + bl).
inline Var glu(Binder& p, const std::string& n, Var x) {
    return diff::mul(diff::sigmoid(linear(p, n + "/wg", n + "/bg", x)), linear(p, n + "/wl", n + "/bl", x));
}

/// LayerNorm(residual + GLU(x)).
inline Var gate_add_norm(Binder& p, const std::string& n, Var x, Var residual, const Dropout& drop = {}) {
    return layer_norm(p, n, diff::add(residual, glu(p, n, drop(x))));
}

/// Gated residual network: dense -> ELU -> dense -> GLU, residual add and
/// layer norm. An optional 1 x d context is added into the first dense input.
inline Var grn(Binder& p, const std::string& n, Var x, std::optional<Var> context = std::nullopt,
               const Dropout& drop = {}) {
    Var a = linear(p, n + "/w1", n + "/b1", x);
    if (context) a = diff::add(a, diff::matmul(*context, p(n + "/wc")));
    Var h = diff::elu(a);
    Var h2 = drop(linear(p, n + "/w2", n + "/b2", h));
    Var skip = p.has(n + "/skip_w") ? linear(p, n + "/skip_w", n + "/skip_b", x) : x;
    return layer_norm(p, n, diff::add(skip, glu(p, n, h2)));
}

struct LstmState {
    Var h, c;
};

/// One LSTM layer over the rows of `x`. Gate order i, f, g, o.
inline std::pair<Var, LstmState> lstm_layer(Binder& p, const std::string& n, Var x, LstmState s) {
    const std::size_t d = s.h.cols();
    Var xw = diff::add(diff::matmul(x, p(n + "/w")), p(n + "/b"));
    Var u = p(n + "/u");
    std::vector<Var> outs;
    outs.reserve(x.rows());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        Var z = diff::add(diff::slice_rows(xw, t, 1), diff::matmul(s.h, u));
        Var i = diff::sigmoid(diff::slice_cols(z, 0, d));
        Var f = diff::sigmoid(diff::slice_cols(z, d, d));
        Var g = diff::tanh(diff::slice_cols(z, 2 * d, d));
        Var o = diff::sigmoid(diff::slice_cols(z, 3 * d, d));
        s.c = diff::add(diff::mul(f, s.c), diff::mul(i, g));
        s.h = diff::mul(o, diff::tanh(s.c));
        outs.push_back(s.h);
    }
    return {diff::concat_rows(outs), s};
}

} // namespace nn

// ---------------------------------------------------------------------------

inline ForwardVars Model::forward(Binder& p, const WindowSample& w, const ForwardOptions& opt) const {
    using diff::Tensor;
    using diff::Var;
    diff::Graph& g = p.graph();
    const std::size_t E = schema_.encoder_len, H = schema_.horizon_len, T = E + H;
    const std::size_t d = config_.hidden;
    const auto past = schema_.past_vars();
    const auto fut = schema_.future_vars();
    const auto stat = schema_.static_vars();
    require(w.encoder.rows() == E && w.encoder.cols() == past.size(), Errc::ShapeMismatch, "window encoder shape");
    require(w.future_known.rows() == H && w.future_known.cols() == fut.size(), Errc::ShapeMismatch,
            "window future shape");
    require(w.statics.size() == stat.size(), Errc::ShapeMismatch, "window statics size");
    require(w.target < schema_.targets().size(), Errc::ShapeMismatch, "window target index");

    std::mt19937_64 drop_rng(opt.dropout_seed);
    const nn::Dropout drop{config_.dropout, opt.training ? &drop_rng : nullptr};

    ForwardVars out;

    // embed a column of raw values for feature `fi` (rows x 1) -> rows x d
    auto embed = [&](std::size_t fi, const std::vector<double>& raw, double mean, double sd) -> Var {
        const auto& f = schema_.features[fi];
        if (f.categorical()) {
            const Var table = p(table_name(f.name));
            auto& counts = out.category_counts[f.name];
            counts.resize(f.vocab_size, 0.0);
            std::vector<Var> rows;
            for (double v : raw) {
                require(v >= 0 && v < static_cast<double>(f.vocab_size) && v == std::floor(v), Errc::CategoryOutOfVocab,
                        f.name + ": category " + std::to_string(v));
                const auto k = static_cast<std::size_t>(v);
                counts[k] += 1.0;
                rows.push_back(diff::slice_rows(table, k, 1));
            }
            return diff::concat_rows(rows);
        }
        std::vector<double> x(raw.size());
        for (std::size_t i = 0; i < raw.size(); ++i) x[i] = (raw[i] - mean) / sd;
        const Var col = g.constant(Tensor::column(std::move(x)));
        return nn::linear(p, "embed/" + f.name + "/w", "embed/" + f.name + "/b", col);
    };

    // static covariate encoder
    std::optional<Var> ctx_select, ctx_enrich, ctx_h, ctx_c;
    if (!stat.empty()) {
        std::vector<Var> embs;
        for (std::size_t j = 0; j < stat.size(); ++j)
            embs.push_back(embed(stat[j], {w.statics[j]}, normalizer_.static_mean[j], normalizer_.static_sd[j]));
        Var weights = diff::softmax(nn::grn(p, "static_vsn/flat", diff::concat_cols(embs), std::nullopt, drop));
        Var fused;
        for (std::size_t j = 0; j < stat.size(); ++j) {
            Var term = diff::mul(nn::grn(p, "static_vsn/var" + std::to_string(j), embs[j], std::nullopt, drop),
                                 diff::slice_cols(weights, j, 1));
            fused = j == 0 ? term : diff::add(fused, term);
        }
        ctx_select = nn::grn(p, "static_ctx/select", fused, std::nullopt, drop);
        ctx_enrich = nn::grn(p, "static_ctx/enrich", fused, std::nullopt, drop);
        ctx_h = nn::grn(p, "static_ctx/state_h", fused, std::nullopt, drop);
        ctx_c = nn::grn(p, "static_ctx/state_c", fused, std::nullopt, drop);
    }

    // variable selection over a set of temporal inputs
    auto select = [&](const std::string& n, const std::vector<Var>& embs) -> std::pair<Var, Var> {
        Var weights = diff::softmax(nn::grn(p, n + "/flat", diff::concat_cols(embs), ctx_select, drop));
        Var fused;
        for (std::size_t j = 0; j < embs.size(); ++j) {
            Var term = diff::mul(nn::grn(p, n + "/var" + std::to_string(j), embs[j], std::nullopt, drop),
                                 diff::slice_cols(weights, j, 1));
            fused = j == 0 ? term : diff::add(fused, term);
        }
        return {weights, fused};
    };

    std::vector<Var> past_embs;
    for (std::size_t j = 0; j < past.size(); ++j) {
        std::vector<double> col(E);
        for (std::size_t r = 0; r < E; ++r) col[r] = w.encoder(r, j);
        past_embs.push_back(embed(past[j], col, normalizer_.past_mean[j], normalizer_.past_sd[j]));
    }
    auto [w_past, fused_past] = select("vsn_past", past_embs);
    out.past_weights = w_past;

    Var fused_future;
    if (!fut.empty()) {
        std::vector<Var> fut_embs;
        for (std::size_t j = 0; j < fut.size(); ++j) {
            const auto col_idx =
                static_cast<std::size_t>(std::find(past.begin(), past.end(), fut[j]) - past.begin());
            std::vector<double> col(H);
            for (std::size_t r = 0; r < H; ++r) col[r] = w.future_known(r, j);
            fut_embs.push_back(embed(fut[j], col, normalizer_.past_mean[col_idx], normalizer_.past_sd[col_idx]));
        }
        auto [w_fut, f] = select("vsn_future", fut_embs);
        out.future_weights = w_fut;
        fused_future = f;
    } else {
        fused_future = g.constant(Tensor(H, d));
    }

    // LSTM encoder / decoder
    nn::LstmState init{ctx_h ? *ctx_h : g.constant(Tensor(1, d)), ctx_c ? *ctx_c : g.constant(Tensor(1, d))};
    Var enc = fused_past;
    std::vector<nn::LstmState> finals;
    for (std::size_t l = 0; l < config_.lstm_layers; ++l) {
        auto [o, s] = nn::lstm_layer(p, "lstm_enc/l" + std::to_string(l), enc, init);
        enc = o;
        finals.push_back(s);
    }
    Var dec = fused_future;
    for (std::size_t l = 0; l < config_.lstm_layers; ++l) {
        auto [o, s] = nn::lstm_layer(p, "lstm_dec/l" + std::to_string(l), dec, finals[l]);
        dec = o;
    }
    Var lstm_out = diff::concat_rows({enc, dec});
    out.lstm_output = lstm_out;
    Var temporal = nn::gate_add_norm(p, "post_lstm", lstm_out, diff::concat_rows({fused_past, fused_future}));
    Var x = nn::grn(p, "enrich", temporal, ctx_enrich, drop);

    // stacked causal interpretable multi-head attention
    std::vector<std::uint8_t> causal(T * T, 0);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t tau = t + 1; tau < T; ++tau) causal[t * T + tau] = 1;
    const auto dk = config_.attention_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
    for (std::size_t b = 0; b < config_.blocks; ++b) {
        const auto n = "attn" + std::to_string(b);
        std::vector<Var> heads;
        for (std::size_t m = 0; m < config_.heads; ++m) {
            Var q = diff::matmul(x, p(n + "/wq" + std::to_string(m)));
            Var k = diff::matmul(x, p(n + "/wk" + std::to_string(m)));
            Var scores = diff::scale(diff::matmul(q, diff::transpose(k)), inv_sqrt);
            heads.push_back(diff::softmax(diff::masked_fill(scores, causal, -std::numeric_limits<double>::infinity())));
        }
        Var mean = heads.front();
        for (std::size_t m = 1; m < heads.size(); ++m) mean = diff::add(mean, heads[m]);
        if (heads.size() > 1) mean = diff::scale(mean, 1.0 / static_cast<double>(heads.size()));
        Var v = diff::matmul(x, p(n + "/wv"));
        Var attended = diff::matmul(diff::matmul(mean, v), p(n + "/wo"));
        Var y = nn::gate_add_norm(p, n + "/gate", attended, x, drop);
        x = nn::grn(p, n + "/ff", y, std::nullopt, drop);
        if (b + 1 == config_.blocks) {
            out.head_attention = heads;
            out.attention = mean;
        }
    }

    Var final_rep = nn::gate_add_norm(p, "pre_output", x, temporal);
    Var decoder_rows = diff::slice_rows(final_rep, E, H);
    const auto head = "head/" + schema_.features[schema_.targets()[w.target]].name;
    out.quantiles = nn::linear(p, head + "/w", head + "/b", decoder_rows);
    out.representation = config_.representation == Representation::post_attention ? diff::slice_rows(x, E - 1, H + 1)
                                                                                  : diff::slice_rows(lstm_out, E - 1, H + 1);
    const auto col = target_column(w.target);
    out.target_normalized.resize(H);
    for (std::size_t h = 0; h < H; ++h)
        out.target_normalized[h] = (w.future_target[h] - normalizer_.past_mean[col]) / normalizer_.past_sd[col];
    return out;
}

} // namespace omnitft

#pragma once
// Objective assembly, gradient clipping, Adam and the epoch loop with
// balanced sampling and early stopping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnitft/diff.hpp"
#include "omnitft/error.hpp"
#include "omnitft/model.hpp"
#include "omnitft/parallel.hpp"
#include "omnitft/params.hpp"
#include "omnitft/penalties.hpp"
#include "omnitft/sampler.hpp"
#include "omnitft/schema.hpp"

namespace omnitft {

struct TrainConfig {
    double lr = 1e-5;
    std::size_t batch = 64;
    double clip = 1.0;
    std::size_t max_epochs = 300;
    std::size_t patience = 10;
    std::uint64_t seed = 0;  // dropout masks and epoch shuffles
    PenaltyWeights penalties;
    /// Undersample the majority regime each epoch; off means every window every epoch.
    bool balanced = true;
    /// Gradient work is split into this many fixed chunks per batch and reduced
    /// in order, so results do not depend on the thread count.
    std::size_t gradient_chunks = 8;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline TrainConfig validate_train_config(TrainConfig c) {
    require(c.lr > 0.0 && std::isfinite(c.lr), Errc::InvalidConfig, "lr must be > 0");
    require(c.batch >= 1, Errc::InvalidConfig, "batch must be >= 1");
    require(c.patience >= 1, Errc::InvalidConfig, "patience must be >= 1");
    require(c.clip > 0.0, Errc::InvalidConfig, "clip must be > 0");
    require(c.gradient_chunks >= 1, Errc::InvalidConfig, "gradient_chunks must be >= 1");
    c.penalties = validate_weights(c.penalties);
    return c;
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"lr", c.lr},
                       {"batch", c.batch},
                       {"clip", c.clip},
                       {"max_epochs", c.max_epochs},
                       {"patience", c.patience},
                       {"seed", c.seed},
                       {"penalties", c.penalties},
                       {"balanced", c.balanced},
                       {"gradient_chunks", c.gradient_chunks}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    const TrainConfig d;
    c.lr = j.value("lr", d.lr);
    c.batch = j.value("batch", d.batch);
    c.clip = j.value("clip", d.clip);
    c.max_epochs = j.value("max_epochs", d.max_epochs);
    c.patience = j.value("patience", d.patience);
    c.seed = j.value("seed", d.seed);
    c.penalties = j.contains("penalties") ? j.at("penalties").get<PenaltyWeights>() : d.penalties;
    c.balanced = j.value("balanced", d.balanced);
    c.gradient_chunks = j.value("gradient_chunks", d.gradient_chunks);
    c = validate_train_config(c);
}

// ---------------------------------------------------------------------------
// Quantile loss

/// Mean pinball loss over unmasked horizon steps and all quantiles.
inline diff::Var quantile_loss(diff::Var pred, std::span<const double> actual, std::span<const double> quantiles,
                               std::span<const std::uint8_t> observed = {}) {
    require(pred.rows() == actual.size() && pred.cols() == quantiles.size(), Errc::ShapeMismatch,
            "quantile_loss operand shapes");
    require(observed.empty() || observed.size() == actual.size(), Errc::ShapeMismatch, "quantile_loss mask length");
    diff::Graph& g = *pred.graph;
    const auto losses = diff::pinball(pred, actual, quantiles);
    std::size_t n = actual.size();
    if (observed.empty())
        return diff::scale(diff::reduce_sum(losses), 1.0 / static_cast<double>(n * quantiles.size()));
    n = static_cast<std::size_t>(std::count_if(observed.begin(), observed.end(), [](auto m) { return m != 0; }));
    require(n > 0, Errc::AllMasked, "every target step is masked");
    std::vector<double> m(observed.begin(), observed.end());
    const auto masked = diff::mul(losses, g.constant(diff::Tensor::column(std::move(m))));
    return diff::scale(diff::reduce_sum(masked), 1.0 / static_cast<double>(n * quantiles.size()));
}

inline double quantile_loss(const diff::Tensor& pred, std::span<const double> actual, std::span<const double> quantiles,
                            std::span<const std::uint8_t> observed = {}) {
    diff::Graph g;
    return quantile_loss(g.constant(pred), actual, quantiles, observed).item();
}

// ---------------------------------------------------------------------------
// Objective

struct ObjectiveBreakdown {
    double l_quantile = 0.0;
    double c_embed = 0.0;
    double c_group = 0.0;
    double c_shock = 0.0;
    double l_total = 0.0;

    [[nodiscard]] bool finite() const {
        return std::isfinite(l_quantile) && std::isfinite(c_embed) && std::isfinite(c_group) &&
               std::isfinite(c_shock) && std::isfinite(l_total);
    }
};

inline double weighted_total(double lq, double ce, double cg, double cs, const PenaltyWeights& w) {
    return lq + w.lambda_embed * ce + w.lambda_group * cg + w.lambda_shock * cs;
}

/// Per-feature category counts over a batch: statics once per window,
/// temporal categoricals once per looked-up step. Keyed by feature name.
inline std::map<std::string, std::vector<double>> batch_category_counts(const DatasetSchema& schema,
                                                                        std::span<const WindowSample> windows) {
    std::map<std::string, std::vector<double>> counts;
    const auto past = schema.past_vars();
    const auto fut = schema.future_vars();
    const auto stat = schema.static_vars();
    auto bump = [&](std::size_t fi, double v) {
        const auto& f = schema.features[fi];
        auto& c = counts[f.name];
        c.resize(f.vocab_size, 0.0);
        if (v >= 0 && v < static_cast<double>(f.vocab_size)) c[static_cast<std::size_t>(v)] += 1.0;
    };
    for (const auto& f : schema.features)
        if (f.categorical()) counts[f.name].assign(f.vocab_size, 0.0);
    for (const auto& w : windows) {
        for (std::size_t j = 0; j < stat.size(); ++j)
            if (schema.features[stat[j]].categorical()) bump(stat[j], w.statics[j]);
        for (std::size_t j = 0; j < past.size(); ++j)
            if (schema.features[past[j]].categorical())
                for (std::size_t r = 0; r < w.encoder.rows(); ++r) bump(past[j], w.encoder(r, j));
        for (std::size_t j = 0; j < fut.size(); ++j)
            if (schema.features[fut[j]].categorical())
                for (std::size_t r = 0; r < w.future_known.rows(); ++r) bump(fut[j], w.future_known(r, j));
    }
    return counts;
}

struct ObjectiveVars {
    diff::Var l_quantile, c_embed, c_group, c_shock, total;
};

struct ObjectiveOptions {
    bool training = false;
    std::uint64_t step_seed = 0;
    /// Per-window terms are divided by this (the full batch size); 0 means windows.size().
    std::size_t batch_size = 0;
    /// Index of windows[0] within the batch, for dropout seeding.
    std::size_t offset = 0;
    bool include_embed = true;
};

inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Builds the weighted objective for `windows` into the binder's graph.
/// `counts` are the batch category counts consumed by the embedding penalty.
inline ObjectiveVars build_objective(Binder& bind, const Model& model, std::span<const WindowSample> windows,
                                     const PenaltyWeights& w, const std::map<std::string, std::vector<double>>& counts,
                                     const ObjectiveOptions& opt = {}) {
    diff::Graph& g = bind.graph();
    const auto& schema = model.schema();
    const auto& cfg = model.config();
    const double inv_b = 1.0 / static_cast<double>(opt.batch_size ? opt.batch_size : windows.size());
    auto zero = [&] { return g.constant(diff::Tensor::scalar(0.0)); };
    ObjectiveVars out{zero(), zero(), zero(), zero(), zero()};
    const auto G = build_group_assignment(schema).matrix;

    for (std::size_t i = 0; i < windows.size(); ++i) {
        ForwardOptions fo;
        fo.training = opt.training;
        fo.dropout_seed = mix_seed(opt.step_seed ^ mix_seed(opt.offset + i));
        const auto fv = model.forward(bind, windows[i], fo);
        const auto lq = quantile_loss(fv.quantiles, fv.target_normalized, cfg.quantiles, windows[i].target_observed);
        const auto p_hs = group_distribution_past(fv.past_weights, G, w.eps_group);
        std::optional<diff::Var> p_fut;
        if (fv.future_weights) p_fut = group_distribution_future(*fv.future_weights);
        const auto cg = c_group(p_hs, p_fut);
        const auto cs =
            shock_trace(fv.attention, fv.representation, schema.encoder_len, cfg.retro_window, w.eps_std).loss;
        out.l_quantile = diff::add(out.l_quantile, diff::scale(lq, inv_b));
        out.c_group = diff::add(out.c_group, diff::scale(cg, inv_b));
        out.c_shock = diff::add(out.c_shock, diff::scale(cs, inv_b));
    }
    if (opt.include_embed) {
        std::vector<diff::Var> tables;
        std::vector<std::vector<double>> cnt;
        for (const auto& f : schema.features)
            if (f.categorical()) {
                tables.push_back(bind(Model::table_name(f.name)));
                auto it = counts.find(f.name);
                cnt.push_back(it != counts.end() ? it->second : std::vector<double>(f.vocab_size, 0.0));
            }
        out.c_embed = c_embed(g, tables, cnt, w.eps_embed);
    }
    out.total = diff::add(
        diff::add(out.l_quantile, diff::scale(out.c_embed, w.lambda_embed)),
        diff::add(diff::scale(out.c_group, w.lambda_group), diff::scale(out.c_shock, w.lambda_shock)));
    return out;
}

/// Evaluates the objective over a batch, split into fixed chunks that may run
/// on separate threads. When `grads` is given it receives the summed gradients.
inline ObjectiveBreakdown total_objective(const Model& model, std::span<const WindowSample> batch,
                                          const PenaltyWeights& w, ParameterSet* grads, bool training,
                                          std::uint64_t step_seed, std::size_t chunks = 8,
                                          std::size_t threads = thread_budget()) {
    require(!batch.empty(), Errc::InvalidConfig, "empty batch");
    chunks = std::max<std::size_t>(1, std::min(chunks, batch.size()));
    const auto counts = batch_category_counts(model.schema(), batch);
    std::vector<ObjectiveBreakdown> parts(chunks);
    std::vector<ParameterSet> part_grads(grads ? chunks : 0);
    const std::size_t per = batch.size() / chunks, extra = batch.size() % chunks;
    auto begin_of = [&](std::size_t c) { return c * per + std::min(c, extra); };

    parallel_for(chunks, threads, [&](std::size_t c) {
        const std::size_t b = begin_of(c), e = begin_of(c + 1);
        diff::Graph g;
        Binder bind(g, model.params(), grads != nullptr);
        ObjectiveOptions opt;
        opt.training = training;
        opt.step_seed = step_seed;
        opt.batch_size = batch.size();
        opt.offset = b;
        opt.include_embed = c == 0;
        const auto v = build_objective(bind, model, batch.subspan(b, e - b), w, counts, opt);
        parts[c] = {v.l_quantile.item(), v.c_embed.item(), v.c_group.item(), v.c_shock.item(), v.total.item()};
        if (grads) {
            g.backward(v.total);
            part_grads[c] = model.params().zeros_like();
            bind.accumulate_grads(part_grads[c]);
        }
    });

    ObjectiveBreakdown total;
    for (std::size_t c = 0; c < chunks; ++c) {
        total.l_quantile += parts[c].l_quantile;
        total.c_embed += parts[c].c_embed;
        total.c_group += parts[c].c_group;
        total.c_shock += parts[c].c_shock;
        if (grads) grads->add_scaled(part_grads[c]);
    }
    total.l_total = weighted_total(total.l_quantile, total.c_embed, total.c_group, total.c_shock, w);
    return total;
}

/// Mean per-window quantile loss (normalised target units), dropout off.
inline double evaluate_quantile_loss(const Model& model, std::span<const WindowSample> windows,
                                     std::size_t threads = thread_budget()) {
    require(!windows.empty(), Errc::InvalidConfig, "no windows to evaluate");
    std::vector<double> losses(windows.size());
    parallel_for(windows.size(), threads, [&](std::size_t i) {
        diff::Graph g;
        Binder bind(g, model.params(), false);
        const auto fv = model.forward(bind, windows[i]);
        losses[i] = quantile_loss(fv.quantiles, fv.target_normalized, model.config().quantiles,
                                  windows[i].target_observed)
                        .item();
    });
    double s = 0.0;
    for (double l : losses) s += l;
    return s / static_cast<double>(losses.size());
}

// ---------------------------------------------------------------------------
// Optimisation

/// Scales `grads` in place so the global L2 norm is at most `max_norm`. Returns the pre-clip norm.
inline double clip_gradients(ParameterSet& grads, double max_norm = 1.0) {
    const double norm = grads.l2_norm();
    if (norm > max_norm) grads.scale(max_norm / norm);
    return norm;
}

struct AdamState {
    ParameterSet m, v;
    std::size_t step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    static AdamState for_params(const ParameterSet& p) { return {p.zeros_like(), p.zeros_like(), 0}; }
};

inline void adam_step(ParameterSet& params, const ParameterSet& grads, AdamState& s, double lr) {
    if (s.m.size() != params.size()) {
        s.m = params.zeros_like();
        s.v = params.zeros_like();
    }
    ++s.step;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (auto& [name, p] : params.tensors()) {
        const auto& g = grads.at(name);
        auto& m = s.m.at(name);
        auto& v = s.v.at(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
            v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
            p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + s.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
    std::size_t epoch = 0;
    ObjectiveBreakdown objective;  // mean over the epoch's batches; epoch 0 = initial parameters
    double val_loss = 0.0;
    std::size_t windows = 0;
    bool single_class = false;  // some target had only one regime this epoch
};

struct TrainResult {
    ParameterSet best_params;
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    bool early_stopped = false;
    bool diverged = false;
};

/// Batches of one epoch: per-target (balanced) draws cut into batches, then
/// interleaved round-robin across targets.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::span<const WindowSample> pool, std::size_t n_targets,
                                                           const TrainConfig& cfg, std::mt19937_64& rng,
                                                           bool* single_class = nullptr) {
    std::vector<std::vector<std::vector<std::size_t>>> per_target(n_targets);
    for (std::size_t k = 0; k < n_targets; ++k) {
        std::vector<std::size_t> idx;
        std::vector<RegimeLabel> labels;
        for (std::size_t i = 0; i < pool.size(); ++i)
            if (pool[i].target == k) {
                idx.push_back(i);
                labels.push_back(pool[i].label);
            }
        if (idx.empty()) continue;
        std::vector<std::size_t> order;
        if (cfg.balanced) {
            const auto draw = balanced_epoch(labels, rng);
            if (draw.single_class && single_class) *single_class = true;
            for (auto j : draw.indices) order.push_back(idx[j]);
        } else {
            order = idx;
            std::shuffle(order.begin(), order.end(), rng);
        }
        for (std::size_t b = 0; b < order.size(); b += cfg.batch)
            per_target[k].emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + cfg.batch)));
    }
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t r = 0;; ++r) {
        bool any = false;
        for (auto& t : per_target)
            if (r < t.size()) {
                out.push_back(std::move(t[r]));
                any = true;
            }
        if (!any) break;
    }
    return out;
}

inline void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
    os << "epoch,L_quantile,C_embed,C_group,C_shock,L_total,val_loss\n";
    char buf[512];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.objective.l_quantile,
                      r.objective.c_embed, r.objective.c_group, r.objective.c_shock, r.objective.l_total, r.val_loss);
        os << buf;
    }
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains `model` in place. On return the model holds the best-validation
/// parameters. A non-finite objective stops training with `diverged` set.
inline TrainResult train(Model& model, std::span<const WindowSample> train_set, std::span<const WindowSample> val_set,
                         TrainConfig cfg, const EpochCallback& on_epoch = {}) {
    cfg = validate_train_config(cfg);
    require(!train_set.empty() && !val_set.empty(), Errc::InvalidConfig, "train and validation sets must be nonempty");
    const std::size_t n_targets = model.schema().targets().size();
    const std::size_t threads = thread_budget();
    std::mt19937_64 rng(cfg.seed);
    TrainResult res;

    EpochRecord init;
    init.objective = total_objective(model, train_set, cfg.penalties, nullptr, false, 0, cfg.gradient_chunks, threads);
    init.val_loss = evaluate_quantile_loss(model, val_set, threads);
    init.windows = train_set.size();
    res.history.push_back(init);
    if (on_epoch) on_epoch(init);
    res.best_params = model.params();
    res.best_val_loss = init.val_loss;
    if (!init.objective.finite() || !std::isfinite(init.val_loss)) {
        res.diverged = true;
        return res;
    }

    AdamState adam = AdamState::for_params(model.params());
    std::size_t bad_epochs = 0;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        const auto batches = epoch_batches(train_set, n_targets, cfg, rng, &rec.single_class);
        std::size_t step = 0;
        for (const auto& idx : batches) {
            std::vector<WindowSample> batch;
            batch.reserve(idx.size());
            for (auto i : idx) batch.push_back(train_set[i]);
            ParameterSet grads = model.params().zeros_like();
            const auto seed = mix_seed(cfg.seed ^ mix_seed(epoch * 1000003ULL + step++));
            const auto ob = total_objective(model, batch, cfg.penalties, &grads, true, seed, cfg.gradient_chunks, threads);
            if (!ob.finite() || !grads.all_finite()) {
                res.diverged = true;
                break;
            }
            clip_gradients(grads, cfg.clip);
            adam_step(model.params(), grads, adam, cfg.lr);
            const double n = static_cast<double>(batch.size());
            rec.objective.l_quantile += ob.l_quantile * n;
            rec.objective.c_embed += ob.c_embed * n;
            rec.objective.c_group += ob.c_group * n;
            rec.objective.c_shock += ob.c_shock * n;
            rec.windows += batch.size();
        }
        if (!res.diverged && !model.params().all_finite()) res.diverged = true;
        if (res.diverged) break;
        const double n = static_cast<double>(std::max<std::size_t>(1, rec.windows));
        rec.objective.l_quantile /= n;
        rec.objective.c_embed /= n;
        rec.objective.c_group /= n;
        rec.objective.c_shock /= n;
        rec.objective.l_total = weighted_total(rec.objective.l_quantile, rec.objective.c_embed,
                                               rec.objective.c_group, rec.objective.c_shock, cfg.penalties);
        rec.val_loss = evaluate_quantile_loss(model, val_set, threads);
        res.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (!std::isfinite(rec.val_loss)) {
            res.diverged = true;
            break;
        }
        if (rec.val_loss < res.best_val_loss) {
            res.best_val_loss = rec.val_loss;
            res.best_epoch = epoch;
            res.best_params = model.params();
            bad_epochs = 0;
        } else if (++bad_epochs >= cfg.patience) {
            res.early_stopped = true;
            break;
        }
    }
    model.params() = res.best_params;
    return res;
}

} // namespace omnitft

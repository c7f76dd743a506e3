#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "omnitft/diff.hpp"
#include "omnitft/error.hpp"

namespace omnitft {

/// Named trainable tensors, iterated in name order.
class ParameterSet {
public:
    using Map = std::map<std::string, diff::Tensor>;

    diff::Tensor& add(const std::string& name, diff::Tensor t) {
        auto [it, inserted] = tensors_.emplace(name, std::move(t));
        require(inserted, Errc::InvalidConfig, "duplicate parameter " + name);
        return it->second;
    }

    [[nodiscard]] bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

    [[nodiscard]] const diff::Tensor& at(const std::string& name) const {
        auto it = tensors_.find(name);
        require(it != tensors_.end(), Errc::InvalidConfig, "no parameter " + name);
        return it->second;
    }
    diff::Tensor& at(const std::string& name) {
        auto it = tensors_.find(name);
        require(it != tensors_.end(), Errc::InvalidConfig, "no parameter " + name);
        return it->second;
    }

    [[nodiscard]] const Map& tensors() const noexcept { return tensors_; }
    Map& tensors() noexcept { return tensors_; }
    [[nodiscard]] std::size_t size() const noexcept { return tensors_.size(); }

    [[nodiscard]] std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [k, t] : tensors_) n += t.size();
        return n;
    }

    /// Same names and shapes, all zeros.
    [[nodiscard]] ParameterSet zeros_like() const {
        ParameterSet z;
        for (const auto& [k, t] : tensors_) z.tensors_.emplace(k, diff::Tensor(t.rows(), t.cols()));
        return z;
    }

    void add_scaled(const ParameterSet& other, double s = 1.0) {
        for (auto& [k, t] : tensors_) {
            auto it = other.tensors_.find(k);
            if (it == other.tensors_.end()) continue;
            for (std::size_t i = 0; i < t.size(); ++i) t[i] += s * it->second[i];
        }
    }

    void scale(double s) {
        for (auto& [k, t] : tensors_)
            for (double& x : t.data()) x *= s;
    }

    [[nodiscard]] double l2_norm() const {
        double s = 0.0;
        for (const auto& [k, t] : tensors_)
            for (double x : t.data()) s += x * x;
        return std::sqrt(s);
    }

    [[nodiscard]] bool all_finite() const {
        for (const auto& [k, t] : tensors_)
            for (double x : t.data())
                if (!std::isfinite(x)) return false;
        return true;
    }

    friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

private:
    Map tensors_;
};

/// Binds parameters into one graph on first use. Trainable binders create
/// gradient-carrying leaves; frozen ones create constants.
class Binder {
public:
    Binder(diff::Graph& g, const ParameterSet& params, bool trainable = true)
        : graph_(&g), params_(&params), trainable_(trainable) {}

    diff::Var operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        const auto& t = params_->at(name);
        const auto v = trainable_ ? graph_->variable(t) : graph_->constant(t);
        bound_.emplace(name, v);
        return v;
    }

    /// Binds `name` to an existing node instead of the stored tensor.
    void set(const std::string& name, diff::Var v) { bound_[name] = v; }

    [[nodiscard]] bool has(const std::string& name) const { return params_->contains(name); }
    [[nodiscard]] diff::Graph& graph() const noexcept { return *graph_; }
    [[nodiscard]] const std::map<std::string, diff::Var>& bound() const noexcept { return bound_; }

    /// Adds the graph's gradients of every bound parameter into `acc`.
    void accumulate_grads(ParameterSet& acc) const {
        for (const auto& [name, v] : bound_) {
            if (!graph_->requires_grad(v)) continue;
            const auto g = graph_->grad(v);
            auto& dst = acc.at(name);
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
        }
    }

private:
    diff::Graph* graph_;
    const ParameterSet* params_;
    bool trainable_;
    std::map<std::string, diff::Var> bound_;
};

} // namespace omnitft

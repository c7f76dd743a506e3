#pragma once
// Reverse-mode automatic differentiation over dense row-major 2-D tensors.
//
// A Graph is the tape: every primitive appends one node holding its forward
// value and a closure that pushes the node's gradient into its inputs.
// Node ids are assigned in creation order, so iterating ids downwards is a
// reverse topological traversal.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "omnitft/error.hpp"

namespace omnitft::diff {

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    [[nodiscard]] constexpr std::size_t size() const noexcept { return rows * cols; }
    friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(Shape s) {
    return "(" + std::to_string(s.rows) + "x" + std::to_string(s.cols) + ")";
}

/// Dense row-major matrix of doubles. Vectors are 1 x n.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
        : shape_{rows, cols}, data_(rows * cols, fill) {}
    Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
        : shape_{rows, cols}, data_(std::move(data)) {
        require(data_.size() == shape_.size(), Errc::ShapeMismatch,
                "tensor data length " + std::to_string(data_.size()) + " != " + to_string(shape_));
    }

    static Tensor row(std::vector<double> v) {
        const auto n = v.size();
        return {1, n, std::move(v)};
    }
    static Tensor column(std::vector<double> v) {
        const auto n = v.size();
        return {n, 1, std::move(v)};
    }
    static Tensor scalar(double v) { return {1, 1, std::vector<double>{v}}; }

    [[nodiscard]] Shape shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rows() const noexcept { return shape_.rows; }
    [[nodiscard]] std::size_t cols() const noexcept { return shape_.cols; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.cols + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    [[nodiscard]] const std::vector<double>& vec() const noexcept { return data_; }
    [[nodiscard]] std::span<const double> row_span(std::size_t r) const {
        return {data_.data() + r * shape_.cols, shape_.cols};
    }

    [[nodiscard]] double item() const {
        require(data_.size() == 1, Errc::ShapeMismatch, "item() on " + to_string(shape_));
        return data_[0];
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_{};
    std::vector<double> data_;
};

enum class Precision { f64, f32 };

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    [[nodiscard]] const Tensor& value() const;
    [[nodiscard]] Shape shape() const { return value().shape(); }
    [[nodiscard]] std::size_t rows() const { return value().rows(); }
    [[nodiscard]] std::size_t cols() const { return value().cols(); }
    [[nodiscard]] double item() const { return value().item(); }
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    explicit Graph(Precision precision = Precision::f64) : precision_(precision) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor t) { return push(std::move(t), false, {}, {}); }
    Var variable(Tensor t) { return push(std::move(t), true, {}, {}); }

    /// Appends a primitive application. `fn` is dropped when no input needs a gradient.
    Var emit(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        bool any = false;
        for (const Var& v : inputs) any = any || nodes_[v.id].requires_grad;
        return push(std::move(value), any, inputs, any ? std::move(fn) : BackwardFn{});
    }
    Var emit(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
        bool any = false;
        for (const Var& v : inputs) any = any || nodes_[v.id].requires_grad;
        auto id = push(std::move(value), any, {}, any ? std::move(fn) : BackwardFn{});
        return id;
    }

    [[nodiscard]] const Tensor& value(Var v) const { return nodes_[v.id].value; }
    [[nodiscard]] const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    [[nodiscard]] bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
    [[nodiscard]] Precision precision() const noexcept { return precision_; }

    /// Gradient of the last backward pass w.r.t. `v` (zeros if none reached it).
    [[nodiscard]] Tensor grad(Var v) const {
        const auto& n = nodes_[v.id];
        if (n.grad.empty() && n.value.size() != 0) return Tensor(n.value.rows(), n.value.cols());
        return n.grad;
    }

    /// Lazily allocated gradient accumulator; used by primitive closures.
    Tensor& grad_ref(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape())
            n.grad = Tensor(n.value.rows(), n.value.cols());
        return n.grad;
    }
    [[nodiscard]] const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }

    void backward(Var loss) {
        require(loss.graph == this, Errc::ShapeMismatch, "loss belongs to another graph");
        require(nodes_[loss.id].value.size() == 1, Errc::NonScalarLoss,
                "loss has shape " + to_string(nodes_[loss.id].value.shape()));
        require(!backward_done_, Errc::DoubleBackward, "call reset_grad() before a second backward");
        backward_done_ = true;
        grad_ref(loss.id)[0] = 1.0;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            auto& n = nodes_[id];
            if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
            n.backward(*this, id);
        }
    }

    void reset_grad() {
        for (auto& n : nodes_) n.grad = Tensor();
        backward_done_ = false;
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var push(Tensor t, bool requires_grad, std::initializer_list<Var>, BackwardFn fn) {
        if (precision_ == Precision::f32)
            for (double& x : t.data()) x = static_cast<double>(static_cast<float>(x));
        nodes_.push_back(Node{std::move(t), Tensor(), requires_grad, std::move(fn)});
        return Var{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    Precision precision_;
    bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

namespace detail {

inline void same_graph(Var a, Var b) {
    require(a.graph == b.graph && a.graph != nullptr, Errc::ShapeMismatch, "vars from different graphs");
}

enum class Bcast { same, row, col, scalar };

inline Bcast broadcast_kind(Shape a, Shape b, const char* op) {
    if (a == b) return Bcast::same;
    if (b.rows == 1 && b.cols == 1) return Bcast::scalar;
    if (b.rows == 1 && b.cols == a.cols) return Bcast::row;
    if (b.cols == 1 && b.rows == a.rows) return Bcast::col;
    fail(Errc::ShapeMismatch, std::string(op) + ": " + to_string(a) + " vs " + to_string(b));
}

inline std::size_t bindex(Bcast k, std::size_t r, std::size_t c, std::size_t cols) {
    switch (k) {
    case Bcast::same: return r * cols + c;
    case Bcast::row: return c;
    case Bcast::col: return r;
    case Bcast::scalar: return 0;
    }
    return 0;
}

// z = f(x, y); dz/dx = dx(x, y, z), dz/dy = dy(x, y, z). `b` may broadcast.
template <class F, class Dx, class Dy>
Var binary(Var a, Var b, const char* name, F f, Dx dx, Dy dy) {
    same_graph(a, b);
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    const auto kind = broadcast_kind(av.shape(), bv.shape(), name);
    const std::size_t rows = av.rows(), cols = av.cols();
    Tensor out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = f(av[r * cols + c], bv[bindex(kind, r, c, cols)]);
    const auto ia = a.id, ib = b.id;
    return g.emit(std::move(out), {a, b}, [ia, ib, kind, rows, cols, dx, dy](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        const Tensor& x = g.value(ia);
        const Tensor& y = g.value(ib);
        const Tensor& z = g.value(self);
        if (g.requires_grad(ia)) {
            Tensor& gx = g.grad_ref(ia);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const auto i = r * cols + c;
                    gx[i] += gy[i] * dx(x[i], y[bindex(kind, r, c, cols)], z[i]);
                }
        }
        if (g.requires_grad(ib)) {
            Tensor& gb = g.grad_ref(ib);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const auto i = r * cols + c;
                    const auto j = bindex(kind, r, c, cols);
                    gb[j] += gy[i] * dy(x[i], y[j], z[i]);
                }
        }
    });
}

// z = f(x); dz/dx = d(x, z)
template <class F, class D>
Var unary(Var a, F f, D d) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    Tensor out(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    const auto ia = a.id;
    return g.emit(std::move(out), {a}, [ia, d](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        const Tensor& x = g.value(ia);
        const Tensor& z = g.value(self);
        Tensor& gx = g.grad_ref(ia);
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * d(x[i], z[i]);
    });
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The right operand may broadcast as a 1 x cols row,
// a rows x 1 column, or a 1 x 1 scalar.

inline Var add(Var a, Var b) {
    return detail::binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
    return detail::binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
    return detail::binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

inline Var div(Var a, Var b) {
    return detail::binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double z) { return -z / y; });
}

inline Var scale(Var a, double s) {
    return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(Var a, double s) {
    return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator+(Var a, double s) { return add_scalar(a, s); }
inline Var operator-(Var a, double s) { return add_scalar(a, -s); }
inline Var operator-(Var a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities.

inline Var exp(Var a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double z) { return z; });
}

inline Var log(Var a) {
    for (double x : a.value().data())
        require(!(x < 0.0), Errc::DomainError, "log of negative value " + std::to_string(x));
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(Var a) {
    for (double x : a.value().data())
        require(!(x < 0.0), Errc::DomainError, "sqrt of negative value " + std::to_string(x));
    return detail::unary(
        a, [](double x) { return std::sqrt(x); }, [](double, double z) { return 0.5 / z; });
}

inline Var square(Var a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var tanh(Var a) {
    return detail::unary(
        a, [](double x) { return std::tanh(x); }, [](double, double z) { return 1.0 - z * z; });
}

inline double sigmoid_value(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
    return detail::unary(a, sigmoid_value, [](double, double z) { return z * (1.0 - z); });
}

inline Var relu(Var a) {
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var elu(Var a) {
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
        [](double x, double z) { return x > 0.0 ? 1.0 : z + 1.0; });
}

/// x log x with the 0 log 0 := 0 convention; the subgradient at 0 is taken as 0.
inline Var xlogx(Var a) {
    for (double x : a.value().data())
        require(!(x < 0.0), Errc::DomainError, "xlogx of negative value " + std::to_string(x));
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; },
        [](double x, double) { return x > 0.0 ? std::log(x) + 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra and structure.

inline Var matmul(Var a, Var b) {
    detail::same_graph(a, b);
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    require(av.cols() == bv.rows(), Errc::ShapeMismatch,
            "matmul " + to_string(av.shape()) + " x " + to_string(bv.shape()));
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out(m, n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = bv.data().data() + p * n;
            double* orow = out.data().data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    const auto ia = a.id, ib = b.id;
    return g.emit(std::move(out), {a, b}, [ia, ib, m, k, n](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        const Tensor& av = g.value(ia);
        const Tensor& bv = g.value(ib);
        if (g.requires_grad(ia)) {
            Tensor& ga = g.grad_ref(ia);  // gy * b^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = bv.data().data() + p * n;
                    const double* grow = gy.data().data() + i * n;
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                    ga[i * k + p] += s;
                }
        }
        if (g.requires_grad(ib)) {
            Tensor& gb = g.grad_ref(ib);  // a^T * gy
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    if (aip == 0.0) continue;
                    const double* grow = gy.data().data() + i * n;
                    double* gbrow = gb.data().data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                }
        }
    });
}

inline Var transpose(Var a) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    const std::size_t r = av.rows(), c = av.cols();
    Tensor out(c, r);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    const auto ia = a.id;
    return g.emit(std::move(out), {a}, [ia, r, c](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        Tensor& ga = g.grad_ref(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += gy[j * r + i];
    });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    require(begin + count <= av.rows(), Errc::ShapeMismatch,
            "slice_rows [" + std::to_string(begin) + "," + std::to_string(begin + count) + ") of " +
                to_string(av.shape()));
    const std::size_t c = av.cols();
    Tensor out(count, c, std::vector<double>(av.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                                             av.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * c)));
    const auto ia = a.id;
    return g.emit(std::move(out), {a}, [ia, begin, count, c](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        Tensor& ga = g.grad_ref(ia);
        for (std::size_t i = 0; i < count * c; ++i) ga[begin * c + i] += gy[i];
    });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    require(begin + count <= av.cols(), Errc::ShapeMismatch,
            "slice_cols [" + std::to_string(begin) + "," + std::to_string(begin + count) + ") of " +
                to_string(av.shape()));
    const std::size_t r = av.rows(), c = av.cols();
    Tensor out(r, count);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = av[i * c + begin + j];
    const auto ia = a.id;
    return g.emit(std::move(out), {a}, [ia, begin, count, r, c](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        Tensor& ga = g.grad_ref(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < count; ++j) ga[i * c + begin + j] += gy[i * count + j];
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), Errc::ShapeMismatch, "concat_rows of nothing");
    Graph& g = *parts.front().graph;
    const std::size_t c = parts.front().cols();
    std::size_t rows = 0;
    for (const Var& p : parts) {
        detail::same_graph(parts.front(), p);
        require(p.cols() == c, Errc::ShapeMismatch, "concat_rows column mismatch");
        rows += p.rows();
    }
    std::vector<double> data;
    data.reserve(rows * c);
    std::vector<std::size_t> ids;
    for (const Var& p : parts) {
        const auto& v = g.value(p).vec();
        data.insert(data.end(), v.begin(), v.end());
        ids.push_back(p.id);
    }
    return g.emit(Tensor(rows, c, std::move(data)), parts, [ids](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        std::size_t off = 0;
        for (auto id : ids) {
            const std::size_t n = g.value(id).size();
            if (g.requires_grad(id)) {
                Tensor& ga = g.grad_ref(id);
                for (std::size_t i = 0; i < n; ++i) ga[i] += gy[off + i];
            }
            off += n;
        }
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), Errc::ShapeMismatch, "concat_cols of nothing");
    Graph& g = *parts.front().graph;
    const std::size_t r = parts.front().rows();
    std::size_t cols = 0;
    for (const Var& p : parts) {
        detail::same_graph(parts.front(), p);
        require(p.rows() == r, Errc::ShapeMismatch, "concat_cols row mismatch");
        cols += p.cols();
    }
    Tensor out(r, cols);
    std::vector<std::size_t> ids;
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& v = g.value(p);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < v.cols(); ++j) out[i * cols + off + j] = v[i * v.cols() + j];
        off += v.cols();
        ids.push_back(p.id);
    }
    return g.emit(std::move(out), parts, [ids, r, cols](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        std::size_t off = 0;
        for (auto id : ids) {
            const std::size_t pc = g.value(id).cols();
            if (g.requires_grad(id)) {
                Tensor& ga = g.grad_ref(id);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < pc; ++j) ga[i * pc + j] += gy[i * cols + off + j];
            }
            off += pc;
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions.

inline Var reduce_sum(Var a) {
    Graph& g = *a.graph;
    double s = 0.0;
    for (double x : g.value(a).data()) s += x;
    const auto ia = a.id;
    return g.emit(Tensor::scalar(s), {a}, [ia](Graph& g, std::size_t self) {
        const double gy = g.out_grad(self)[0];
        for (double& x : g.grad_ref(ia).data()) x += gy;
    });
}

/// axis 0 sums over rows (result 1 x cols); axis 1 over columns (rows x 1).
inline Var reduce_sum(Var a, int axis) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    const std::size_t r = av.rows(), c = av.cols();
    require(axis == 0 || axis == 1, Errc::ShapeMismatch, "reduce_sum axis must be 0 or 1");
    Tensor out = axis == 0 ? Tensor(1, c) : Tensor(r, 1);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += av[i * c + j];
    const auto ia = a.id;
    return g.emit(std::move(out), {a}, [ia, r, c, axis](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        Tensor& ga = g.grad_ref(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += gy[axis == 0 ? j : i];
    });
}

inline Var reduce_mean(Var a) { return scale(reduce_sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var reduce_mean(Var a, int axis) {
    const double n = static_cast<double>(axis == 0 ? a.rows() : a.cols());
    return scale(reduce_sum(a, axis), 1.0 / n);
}

namespace detail {
// Ties route to the first extremal index.
template <class Better>
Var reduce_extreme(Var a, Better better) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    require(av.size() > 0, Errc::ShapeMismatch, "reduction of empty tensor");
    std::size_t best = 0;
    for (std::size_t i = 1; i < av.size(); ++i)
        if (better(av[i], av[best])) best = i;
    const auto ia = a.id;
    return g.emit(Tensor::scalar(av[best]), {a},
                  [ia, best](Graph& g, std::size_t self) { g.grad_ref(ia)[best] += g.out_grad(self)[0]; });
}
} // namespace detail

inline Var reduce_max(Var a) {
    return detail::reduce_extreme(a, [](double x, double best) { return x > best; });
}
inline Var reduce_min(Var a) {
    return detail::reduce_extreme(a, [](double x, double best) { return x < best; });
}

/// Row-wise Euclidean norm, rows x 1. The subgradient at a zero row is 0.
inline Var l2_norm_rows(Var a) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    const std::size_t r = av.rows(), c = av.cols();
    Tensor out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += av[i * c + j] * av[i * c + j];
        out[i] = std::sqrt(s);
    }
    const auto ia = a.id;
    return g.emit(std::move(out), {a}, [ia, r, c](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        const Tensor& x = g.value(ia);
        const Tensor& n = g.value(self);
        Tensor& ga = g.grad_ref(ia);
        for (std::size_t i = 0; i < r; ++i) {
            if (n[i] == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += gy[i] * x[i * c + j] / n[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Normalisation and masking.

/// Numerically stable softmax along `axis` (1 = across each row, 0 = down each column).
/// Entries at -inf come out as exact zeros.
inline Var softmax(Var a, int axis = 1) {
    require(axis == 0 || axis == 1, Errc::ShapeMismatch, "softmax axis must be 0 or 1");
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    const std::size_t r = av.rows(), c = av.cols();
    const std::size_t outer = axis == 1 ? r : c;
    const std::size_t inner = axis == 1 ? c : r;
    auto at = [r, c, axis](std::size_t o, std::size_t i) { return axis == 1 ? o * c + i : i * c + o; };
    (void)r;
    Tensor out(r, c);
    for (std::size_t o = 0; o < outer; ++o) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < inner; ++i) mx = std::max(mx, av[at(o, i)]);
        double s = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
            const double e = std::exp(av[at(o, i)] - mx);
            out[at(o, i)] = e;
            s += e;
        }
        for (std::size_t i = 0; i < inner; ++i) out[at(o, i)] /= s;
    }
    const auto ia = a.id;
    return g.emit(std::move(out), {a}, [ia, outer, inner, at](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        const Tensor& y = g.value(self);
        Tensor& ga = g.grad_ref(ia);
        for (std::size_t o = 0; o < outer; ++o) {
            double dot = 0.0;
            for (std::size_t i = 0; i < inner; ++i) dot += gy[at(o, i)] * y[at(o, i)];
            for (std::size_t i = 0; i < inner; ++i) ga[at(o, i)] += y[at(o, i)] * (gy[at(o, i)] - dot);
        }
    });
}

/// Replaces entries where `mask` is nonzero by `fill`; those entries receive no gradient.
inline Var masked_fill(Var a, const std::vector<std::uint8_t>& mask, double fill) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    require(mask.size() == av.size(), Errc::ShapeMismatch, "masked_fill mask size");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (mask[i]) out[i] = fill;
    const auto ia = a.id;
    return g.emit(std::move(out), {a}, [ia, mask](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        Tensor& ga = g.grad_ref(ia);
        for (std::size_t i = 0; i < ga.size(); ++i)
            if (!mask[i]) ga[i] += gy[i];
    });
}

/// (x - mean) / sqrt(var + eps) across each row, population variance.
inline Var layer_norm_rows(Var a, double eps = 1e-5) {
    Graph& g = *a.graph;
    const Tensor& av = g.value(a);
    const std::size_t r = av.rows(), c = av.cols();
    Tensor out(r, c);
    std::vector<double> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += av[i * c + j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (av[i * c + j] - mu) * (av[i * c + j] - mu);
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (av[i * c + j] - mu) * inv_std[i];
    }
    const auto ia = a.id;
    return g.emit(std::move(out), {a}, [ia, r, c, inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        const Tensor& y = g.value(self);
        Tensor& ga = g.grad_ref(ia);
        const double n = static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i) {
            double mg = 0.0, mgy = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                mg += gy[i * c + j];
                mgy += gy[i * c + j] * y[i * c + j];
            }
            mg /= n;
            mgy /= n;
            for (std::size_t j = 0; j < c; ++j)
                ga[i * c + j] += inv_std[i] * (gy[i * c + j] - mg - y[i * c + j] * mgy);
        }
    });
}

/// Pinball loss per element: pred is rows x Q, `actual` a rows-vector, `quantiles` has Q entries.
/// With e = y - yhat, loss = max(q e, (q - 1) e). At the kink (y <= yhat) the
/// "actual under prediction" branch (q - 1) e supplies the subgradient.
inline Var pinball(Var pred, std::span<const double> actual, std::span<const double> quantiles) {
    Graph& g = *pred.graph;
    const Tensor& pv = g.value(pred);
    const std::size_t r = pv.rows(), q = pv.cols();
    require(actual.size() == r && quantiles.size() == q, Errc::ShapeMismatch, "pinball operand sizes");
    std::vector<double> y(actual.begin(), actual.end());
    std::vector<double> qs(quantiles.begin(), quantiles.end());
    Tensor out(r, q);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < q; ++j) {
            const double e = y[i] - pv[i * q + j];
            out[i * q + j] = e > 0.0 ? qs[j] * e : (qs[j] - 1.0) * e;
        }
    const auto ip = pred.id;
    return g.emit(std::move(out), {pred}, [ip, r, q, y = std::move(y), qs = std::move(qs)](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        const Tensor& pv = g.value(ip);
        Tensor& gp = g.grad_ref(ip);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < q; ++j) {
                const double e = y[i] - pv[i * q + j];
                gp[i * q + j] += gy[i * q + j] * (e > 0.0 ? -qs[j] : 1.0 - qs[j]);
            }
    });
}

/// Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate).
inline Var dropout(Var a, double rate, std::mt19937_64& rng) {
    if (rate <= 0.0) return a;
    Graph& g = *a.graph;
    Tensor mask(a.rows(), a.cols());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep = 1.0 / (1.0 - rate);
    for (double& m : mask.data()) m = u(rng) < rate ? 0.0 : keep;
    return mul(a, g.constant(std::move(mask)));
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    /// True when one-sided differences disagreed at some coordinate, i.e. the
    /// original point sits on a kink; the reported error then comes from the
    /// shifted point.
    bool non_smooth = false;
    std::size_t coordinates_checked = 0;
    double max_abs_error = 0.0;
    /// Max relative error over coordinates with |numeric| >= `resolvable`; one
    /// ulp of f over 2eps already swamps gradients far below that.
    double max_rel_error_resolvable = 0.0;
};

struct GradCheckOptions {
    double eps = 1e-5;
    double kink_tolerance = 1e-3;
    double kink_shift = 1e-3;
    /// Per input, check at most this many coordinates (0 = all), picked with `seed`.
    std::size_t max_coordinates = 0;
    std::uint64_t seed = 0;
    double resolvable = 1e-6;
};

/// Scalar function of several tensors, built on a fresh graph.
using MultiFn = std::function<Var(Graph&, const std::vector<Var>&)>;

namespace detail {
inline double eval_at(const MultiFn& f, const std::vector<Tensor>& xs) {
    Graph g;
    std::vector<Var> vs;
    vs.reserve(xs.size());
    for (const auto& x : xs) vs.push_back(g.constant(x));
    return f(g, vs).item();
}
} // namespace detail

/// Compares reverse-mode gradients against central differences
/// (f(x+eps e) - f(x-eps e)) / 2eps, scoring |analytic - numeric| / (|numeric| + 1e-8).
inline GradCheckReport grad_check(const MultiFn& f, std::vector<Tensor> xs, const GradCheckOptions& opt = {}) {
    // pick coordinates
    std::vector<std::vector<std::size_t>> coords(xs.size());
    std::mt19937_64 rng(opt.seed);
    for (std::size_t k = 0; k < xs.size(); ++k) {
        auto& c = coords[k];
        c.resize(xs[k].size());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = i;
        if (opt.max_coordinates != 0 && c.size() > opt.max_coordinates) {
            std::shuffle(c.begin(), c.end(), rng);
            c.resize(opt.max_coordinates);
            std::sort(c.begin(), c.end());
        }
    }

    auto run = [&](const std::vector<Tensor>& at, bool detect, std::vector<std::pair<std::size_t, std::size_t>>* kinks) {
        Graph g;
        std::vector<Var> vs;
        for (const auto& x : at) vs.push_back(g.variable(x));
        Var loss = f(g, vs);
        const double f0 = loss.item();
        g.backward(loss);
        GradCheckReport rep;
        for (std::size_t k = 0; k < at.size(); ++k) {
            const Tensor analytic = g.grad(vs[k]);
            for (std::size_t i : coords[k]) {
                auto plus = at, minus = at;
                plus[k][i] += opt.eps;
                minus[k][i] -= opt.eps;
                const double fp = detail::eval_at(f, plus);
                const double fm = detail::eval_at(f, minus);
                const double numeric = (fp - fm) / (2.0 * opt.eps);
                if (detect) {
                    const double right = (fp - f0) / opt.eps;
                    const double left = (f0 - fm) / opt.eps;
                    if (std::abs(right - left) > opt.kink_tolerance) {
                        rep.non_smooth = true;
                        if (kinks) kinks->emplace_back(k, i);
                        continue;
                    }
                }
                const double err = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8);
                ++rep.coordinates_checked;
                rep.max_abs_error = std::max(rep.max_abs_error, std::abs(analytic[i] - numeric));
                if (std::abs(numeric) >= opt.resolvable)
                    rep.max_rel_error_resolvable = std::max(rep.max_rel_error_resolvable, err);
                if (err >= rep.max_rel_error) {
                    rep.max_rel_error = err;
                    rep.worst_input = k;
                    rep.worst_index = i;
                    rep.analytic = analytic[i];
                    rep.numeric = numeric;
                }
            }
        }
        return rep;
    };

    std::vector<std::pair<std::size_t, std::size_t>> kinks;
    GradCheckReport first = run(xs, true, &kinks);
    if (!first.non_smooth) return first;
    for (auto [k, i] : kinks) xs[k][i] += opt.kink_shift;
    GradCheckReport shifted = run(xs, false, nullptr);
    shifted.non_smooth = true;
    return shifted;
}

/// Single-input convenience form.
inline GradCheckReport grad_check(const std::function<Var(Graph&, Var)>& f, const Tensor& x,
                                  const GradCheckOptions& opt = {}) {
    return grad_check([&f](Graph& g, const std::vector<Var>& v) { return f(g, v[0]); }, std::vector<Tensor>{x},
                      opt);
}

} // namespace omnitft::diff

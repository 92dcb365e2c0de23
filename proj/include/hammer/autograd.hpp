#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "parameters.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace hammer {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;
    Var(Graph* graph, std::uint32_t id) : graph_(graph), id_(id) {}

    [[nodiscard]] bool valid() const { return graph_ != nullptr; }
    [[nodiscard]] Graph& graph() const { return *graph_; }
    [[nodiscard]] std::uint32_t id() const { return id_; }

    [[nodiscard]] const Tensor& value() const;
    [[nodiscard]] std::size_t rows() const { return value().rows(); }
    [[nodiscard]] std::size_t cols() const { return value().cols(); }
    [[nodiscard]] double item() const { return value().item(); }

private:
    Graph* graph_ = nullptr;
    std::uint32_t id_ = 0;
};

// Tape of operations. Nodes are appended in evaluation order, so the tape is a
// topological order and backward() is a single reverse sweep. A graph built
// with recording=false keeps values only and cannot be differentiated.
class Graph {
public:
    using Backward = std::function<void(Graph&, std::uint32_t)>;

    explicit Graph(bool recording = true) : recording_(recording) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    [[nodiscard]] bool recording() const { return recording_; }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    Var constant(Tensor value) { return push(std::move(value), nullptr, false); }

    // Differentiable leaf that is not a stored parameter (used by checks).
    Var variable(Tensor value) { return push(std::move(value), nullptr, recording_); }

    // Leaf bound to a parameter; each parameter maps to one node per graph.
    Var parameter(Parameter& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return {this, it->second};
        Node node;
        node.external = &p.value;
        node.parameter = &p;
        node.requires_grad = recording_;
        nodes_.push_back(std::move(node));
        const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
        param_nodes_.emplace(&p, id);
        return {this, id};
    }

    [[nodiscard]] const Tensor& value(std::uint32_t id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.value;
    }

    [[nodiscard]] bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

    // Gradient buffer of a node, allocated as zeros on first access.
    Tensor& grad(std::uint32_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty() && value(id).size() != 0) {
            n.grad = Tensor(value(id).shape(), 0.0);
        }
        return n.grad;
    }

    [[nodiscard]] Tensor gradient_of(Var v) const {
        const Node& n = nodes_[v.id()];
        return n.grad.empty() ? Tensor(value(v.id()).shape(), 0.0) : n.grad;
    }

    // Appends an op result. The backward closure runs only when some parent
    // requires a gradient.
    Var emplace(Tensor value, std::initializer_list<Var> parents, Backward backward) {
        bool needs = false;
        if (recording_) {
            for (const Var& p : parents) {
                if (&p.graph() != this) {
                    throw ContractError("operands belong to different graphs");
                }
                needs = needs || nodes_[p.id()].requires_grad;
            }
        }
        Var out = push(std::move(value), nullptr, needs);
        if (needs) nodes_.back().backward = std::move(backward);
        return out;
    }

    Var emplace(Tensor value, const std::vector<Var>& parents, Backward backward) {
        bool needs = false;
        if (recording_) {
            for (const Var& p : parents) {
                if (&p.graph() != this) {
                    throw ContractError("operands belong to different graphs");
                }
                needs = needs || nodes_[p.id()].requires_grad;
            }
        }
        Var out = push(std::move(value), nullptr, needs);
        if (needs) nodes_.back().backward = std::move(backward);
        return out;
    }

    // Reverse sweep from a scalar loss. Parameter leaves add their gradient into
    // Parameter::grad; callers zero those beforehand when starting a new step.
    void backward(Var loss) {
        if (!recording_) {
            throw ContractError("backward on a graph built without recording");
        }
        if (value(loss.id()).size() != 1) {
            throw ContractError("backward needs a scalar loss, got shape " +
                                shape_string(value(loss.id()).shape()));
        }
        if (!nodes_[loss.id()].requires_grad) {
            return;
        }
        grad(loss.id()).fill(1.0);
        for (std::int64_t i = loss.id(); i >= 0; --i) {
            const auto id = static_cast<std::uint32_t>(i);
            Node& n = nodes_[id];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, id);
        }
        for (auto& [param, id] : param_nodes_) {
            const Node& n = nodes_[id];
            if (n.grad.empty()) continue;
            auto dst = param->grad.data();
            auto src = n.grad.data();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        }
    }

    // Drops every node created after `mark`; Vars pointing past it become
    // dangling. Lets one graph hold a shared prefix (e.g. a query encoding)
    // while many suffixes are evaluated in turn.
    void truncate(std::size_t mark) {
        if (mark > nodes_.size()) throw ContractError("truncate past the end of the graph");
        for (auto it = param_nodes_.begin(); it != param_nodes_.end();) {
            it = it->second >= mark ? param_nodes_.erase(it) : std::next(it);
        }
        nodes_.resize(mark);
    }

private:
    struct Node {
        Tensor value;
        const Tensor* external = nullptr;
        Tensor grad;
        Backward backward;
        Parameter* parameter = nullptr;
        bool requires_grad = false;
    };

    Var push(Tensor value, Parameter* param, bool needs_grad) {
        Node node;
        node.value = std::move(value);
        node.parameter = param;
        node.requires_grad = needs_grad;
        nodes_.push_back(std::move(node));
        return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    bool recording_;
    std::vector<Node> nodes_;
    std::unordered_map<Parameter*, std::uint32_t> param_nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

namespace detail {

inline void require_matrix_shape(const Var& v, std::size_t rows, std::size_t cols, std::string_view op) {
    if (v.rows() != rows || v.cols() != cols) {
        throw ShapeError(std::string(op) + ": expected [" + std::to_string(rows) + "x" + std::to_string(cols) +
                         "], got " + shape_string(v.value().shape()));
    }
}

inline void accumulate(Tensor& dst, std::span<const double> src) {
    auto d = dst.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

inline void check_finite(std::span<const double> values, std::string_view op) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite input");
        }
    }
}

} // namespace detail

inline Var matmul(Var a, Var b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: shape mismatch " + shape_string(a.value().shape()) + " x " +
                         shape_string(b.value().shape()));
    }
    Tensor out = Tensor::matrix(m, n);
    kernels::gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
    const auto ia = a.id(), ib = b.id();
    return a.graph().emplace(std::move(out), {a, b}, [ia, ib, m, k, n](Graph& g, std::uint32_t self) {
        const double* dc = g.grad(self).data().data();
        if (g.requires_grad(ia)) {
            kernels::gemm_nt(dc, g.value(ib).data().data(), g.grad(ia).data().data(), m, n, k);
        }
        if (g.requires_grad(ib)) {
            kernels::gemm_tn(g.value(ia).data().data(), dc, g.grad(ib).data().data(), m, k, n);
        }
    });
}

// a · bᵀ without materializing the transpose.
inline Var matmul_nt(Var a, Var b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw ShapeError("matmul_nt: shape mismatch " + shape_string(a.value().shape()) + " x " +
                         shape_string(b.value().shape()) + "^T");
    }
    Tensor out = Tensor::matrix(m, n);
    kernels::gemm_nt(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
    const auto ia = a.id(), ib = b.id();
    return a.graph().emplace(std::move(out), {a, b}, [ia, ib, m, k, n](Graph& g, std::uint32_t self) {
        const double* dc = g.grad(self).data().data();
        if (g.requires_grad(ia)) {
            kernels::gemm_nn(dc, g.value(ib).data().data(), g.grad(ia).data().data(), m, n, k);
        }
        if (g.requires_grad(ib)) {
            kernels::gemm_tn(dc, g.value(ia).data().data(), g.grad(ib).data().data(), m, n, k);
        }
    });
}

inline Var add(Var a, Var b) {
    if (a.value().shape() != b.value().shape()) {
        throw ShapeError("add: shape mismatch " + shape_string(a.value().shape()) + " + " +
                         shape_string(b.value().shape()));
    }
    Tensor out = a.value();
    detail::accumulate(out, b.value().data());
    const auto ia = a.id(), ib = b.id();
    return a.graph().emplace(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
        const auto& d = g.grad(self);
        if (g.requires_grad(ia)) detail::accumulate(g.grad(ia), d.data());
        if (g.requires_grad(ib)) detail::accumulate(g.grad(ib), d.data());
    });
}

inline Var sub(Var a, Var b) {
    if (a.value().shape() != b.value().shape()) {
        throw ShapeError("sub: shape mismatch " + shape_string(a.value().shape()) + " - " +
                         shape_string(b.value().shape()));
    }
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
    const auto ia = a.id(), ib = b.id();
    return a.graph().emplace(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
        const auto d = g.grad(self).data();
        if (g.requires_grad(ia)) detail::accumulate(g.grad(ia), d);
        if (g.requires_grad(ib)) {
            auto gb = g.grad(ib).data();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= d[i];
        }
    });
}

// Element-wise product.
inline Var mul(Var a, Var b) {
    if (a.value().shape() != b.value().shape()) {
        throw ShapeError("mul: shape mismatch " + shape_string(a.value().shape()) + " * " +
                         shape_string(b.value().shape()));
    }
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    const auto ia = a.id(), ib = b.id();
    return a.graph().emplace(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
        const auto d = g.grad(self).data();
        const auto av = g.value(ia).data();
        const auto bv2 = g.value(ib).data();
        if (g.requires_grad(ia)) {
            auto ga = g.grad(ia).data();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += d[i] * bv2[i];
        }
        if (g.requires_grad(ib)) {
            auto gb = g.grad(ib).data();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += d[i] * av[i];
        }
    });
}

inline Var scale(Var a, double factor) {
    Tensor out = a.value();
    for (double& v : out.data()) v *= factor;
    const auto ia = a.id();
    return a.graph().emplace(std::move(out), {a}, [ia, factor](Graph& g, std::uint32_t self) {
        const auto d = g.grad(self).data();
        auto ga = g.grad(ia).data();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * d[i];
    });
}

// a[m x n] + b where b is [1 x n] (row), [m x 1] (column), [1 x 1] or [m x n].
inline Var add_broadcast(Var a, Var b) {
    const std::size_t m = a.rows(), n = a.cols();
    const std::size_t br = b.rows(), bc = b.cols();
    if (br == m && bc == n) return add(a, b);
    const bool row = br == 1 && bc == n;
    const bool col = br == m && bc == 1;
    const bool scalar = br == 1 && bc == 1;
    if (!row && !col && !scalar) {
        throw ShapeError("add_broadcast: cannot broadcast " + shape_string(b.value().shape()) + " onto " +
                         shape_string(a.value().shape()));
    }
    Tensor out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out(i, j) += bv[row ? j : (col ? i : 0)];
        }
    }
    const auto ia = a.id(), ib = b.id();
    return a.graph().emplace(std::move(out), {a, b}, [ia, ib, m, n, row, col](Graph& g, std::uint32_t self) {
        const auto& d = g.grad(self);
        if (g.requires_grad(ia)) detail::accumulate(g.grad(ia), d.data());
        if (g.requires_grad(ib)) {
            auto& gb = g.grad(ib);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    gb[row ? j : (col ? i : 0)] += d(i, j);
                }
            }
        }
    });
}

// Exact (erf-based) GELU.
inline Var gelu(Var a) {
    Tensor out = a.value();
    for (double& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
    const auto ia = a.id();
    return a.graph().emplace(std::move(out), {a}, [ia](Graph& g, std::uint32_t self) {
        const auto d = g.grad(self).data();
        const auto x = g.value(ia).data();
        auto ga = g.grad(ia).data();
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(x[i] / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
            ga[i] += d[i] * (cdf + x[i] * pdf);
        }
    });
}

// Row-wise layer normalization with affine gain and bias of width cols(x).
inline Var layer_norm(Var x, Var gain, Var bias, double epsilon) {
    const std::size_t m = x.rows(), n = x.cols();
    if (n == 0 || x.value().size() == 0) {
        throw ShapeError("layer_norm: zero-width input");
    }
    if (gain.value().size() != n || bias.value().size() != n) {
        throw ShapeError("layer_norm: gain/bias width " + std::to_string(gain.value().size()) + "/" +
                         std::to_string(bias.value().size()) + " does not match input width " + std::to_string(n));
    }
    Tensor out = Tensor::matrix(m, n);
    Tensor xhat = Tensor::matrix(m, n);
    std::vector<double> inv_std(m);
    const auto& xv = x.value();
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xv(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + epsilon);
        for (std::size_t j = 0; j < n; ++j) {
            xhat(i, j) = (xv(i, j) - mean) * inv_std[i];
            out(i, j) = gv[j] * xhat(i, j) + bv[j];
        }
    }
    const auto ix = x.id(), ig = gain.id(), ib = bias.id();
    return x.graph().emplace(
        std::move(out), {x, gain, bias},
        [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, std::uint32_t self) {
            const auto& d = g.grad(self);
            const auto& gv2 = g.value(ig);
            if (g.requires_grad(ig)) {
                auto& gg = g.grad(ig);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gg[j] += d(i, j) * xhat(i, j);
            }
            if (g.requires_grad(ib)) {
                auto& gb = g.grad(ib);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += d(i, j);
            }
            if (g.requires_grad(ix)) {
                auto& gx = g.grad(ix);
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = d(i, j) * gv2[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat(i, j);
                    }
                    mean_dxhat *= inv_n;
                    mean_dxhat_xhat *= inv_n;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxh = d(i, j) * gv2[j];
                        gx(i, j) += inv_std[i] * (dxh - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
                    }
                }
            }
        });
}

namespace detail {

inline void softmax_row_inplace(std::span<double> row) {
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double& v : row) {
        v = std::exp(v - mx);
        total += v;
    }
    for (double& v : row) v /= total;
}

} // namespace detail

// Plain softmax of a vector of logits (no graph). Max-subtracted.
inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) {
        throw ShapeError("softmax: empty input");
    }
    detail::check_finite(logits, "softmax");
    std::vector<double> out(logits.begin(), logits.end());
    detail::softmax_row_inplace(out);
    return out;
}

inline std::vector<double> log_softmax(std::span<const double> logits) {
    if (logits.empty()) {
        throw ShapeError("log_softmax: empty input");
    }
    detail::check_finite(logits, "log_softmax");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double v : logits) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

inline Var softmax_rows(Var x) {
    const std::size_t m = x.rows(), n = x.cols();
    if (n == 0) throw ShapeError("softmax_rows: zero-width input");
    detail::check_finite(x.value().data(), "softmax_rows");
    Tensor out = x.value();
    for (std::size_t i = 0; i < m; ++i) detail::softmax_row_inplace(out.row(i));
    const auto ix = x.id();
    return x.graph().emplace(std::move(out), {x}, [ix, m, n](Graph& g, std::uint32_t self) {
        const auto& d = g.grad(self);
        const auto& p = g.value(self);
        auto& gx = g.grad(ix);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += d(i, j) * p(i, j);
            for (std::size_t j = 0; j < n; ++j) gx(i, j) += p(i, j) * (d(i, j) - dot);
        }
    });
}

// Mean over rows of −log softmax(row)[target].
inline Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets) {
    const std::size_t m = logits.rows(), n = logits.cols();
    if (targets.size() != m) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(m) +
                         " rows");
    }
    if (m == 0) throw ShapeError("cross_entropy: no rows");
    detail::check_finite(logits.value().data(), "cross_entropy");
    Tensor probs = logits.value();
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i] >= n) {
            throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " outside [0, " +
                             std::to_string(n) + ")");
        }
        const auto lsm = log_softmax(logits.value().row(i));
        loss -= lsm[targets[i]];
        for (std::size_t j = 0; j < n; ++j) probs(i, j) = std::exp(lsm[j]);
    }
    loss /= static_cast<double>(m);
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    const auto il = logits.id();
    return logits.graph().emplace(
        Tensor::scalar(loss), {logits},
        [il, m, n, probs = std::move(probs), tg = std::move(tg)](Graph& g, std::uint32_t self) {
            const double d = g.grad(self)[0] / static_cast<double>(m);
            auto& gl = g.grad(il);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) gl(i, j) += d * probs(i, j);
                gl(i, tg[i]) -= d;
            }
        });
}

inline Var cross_entropy(Var logits, std::size_t target) {
    if (logits.rows() != 1) {
        throw ShapeError("cross_entropy: expected a single row of logits, got " +
                         shape_string(logits.value().shape()));
    }
    const std::size_t t[1] = {target};
    return cross_entropy_rows(logits, t);
}

inline Var sum(Var x) {
    double total = 0.0;
    for (double v : x.value().data()) total += v;
    const auto ix = x.id();
    return x.graph().emplace(Tensor::scalar(total), {x}, [ix](Graph& g, std::uint32_t self) {
        const double d = g.grad(self)[0];
        for (double& v : g.grad(ix).data()) v += d;
    });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// Sum of a list of same-shape nodes.
inline Var add_n(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("add_n: no operands");
    Var acc = xs.front();
    for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
}

// Largest element; the gradient flows to the first maximal position.
inline Var max_element(Var x) {
    const auto data = x.value().data();
    if (data.empty()) throw InputError("max_element: empty input");
    const auto it = std::max_element(data.begin(), data.end());
    const auto pos = static_cast<std::size_t>(it - data.begin());
    const auto ix = x.id();
    return x.graph().emplace(Tensor::scalar(*it), {x}, [ix, pos](Graph& g, std::uint32_t self) {
        g.grad(ix)[pos] += g.grad(self)[0];
    });
}

inline Var pick(Var x, std::size_t r, std::size_t c) {
    if (r >= x.rows() || c >= x.cols()) {
        throw IndexError("pick: (" + std::to_string(r) + "," + std::to_string(c) + ") outside " +
                         shape_string(x.value().shape()));
    }
    const std::size_t pos = r * x.cols() + c;
    const auto ix = x.id();
    return x.graph().emplace(Tensor::scalar(x.value()[pos]), {x}, [ix, pos](Graph& g, std::uint32_t self) {
        g.grad(ix)[pos] += g.grad(self)[0];
    });
}

inline Var reshape(Var x, std::size_t rows, std::size_t cols) {
    Tensor out = x.value().reshaped({rows, cols});
    const auto ix = x.id();
    return x.graph().emplace(std::move(out), {x}, [ix](Graph& g, std::uint32_t self) {
        detail::accumulate(g.grad(ix), g.grad(self).data());
    });
}

inline Var slice_rows(Var x, std::size_t begin, std::size_t count) {
    const std::size_t n = x.cols();
    if (begin + count > x.rows()) {
        throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + std::to_string(x.rows()) + " rows");
    }
    const auto src = x.value().data().subspan(begin * n, count * n);
    Tensor out({count, n}, std::vector<double>(src.begin(), src.end()));
    const auto ix = x.id();
    return x.graph().emplace(std::move(out), {x}, [ix, begin, n](Graph& g, std::uint32_t self) {
        const auto d = g.grad(self).data();
        auto gx = g.grad(ix).data().subspan(begin * n, d.size());
        for (std::size_t i = 0; i < d.size(); ++i) gx[i] += d[i];
    });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
    const std::size_t m = x.rows(), n = x.cols();
    if (begin + count > n) {
        throw IndexError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + std::to_string(n) + " cols");
    }
    Tensor out = Tensor::matrix(m, count);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = x.value()(i, begin + j);
    const auto ix = x.id();
    return x.graph().emplace(std::move(out), {x}, [ix, begin, m, count](Graph& g, std::uint32_t self) {
        const auto& d = g.grad(self);
        auto& gx = g.grad(ix);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j) gx(i, begin + j) += d(i, j);
    });
}

inline Var row(Var x, std::size_t r) { return slice_rows(x, r, 1); }

inline Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_rows: no operands");
    const std::size_t n = xs.front().cols();
    std::size_t total = 0;
    for (const Var& v : xs) {
        if (v.cols() != n) {
            throw ShapeError("concat_rows: width mismatch " + std::to_string(v.cols()) + " vs " + std::to_string(n));
        }
        total += v.rows();
    }
    std::vector<double> data;
    data.reserve(total * n);
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> offsets;
    for (const Var& v : xs) {
        offsets.push_back(data.size());
        ids.push_back(v.id());
        data.insert(data.end(), v.value().data().begin(), v.value().data().end());
    }
    return xs.front().graph().emplace(
        Tensor({total, n}, std::move(data)), xs,
        [ids = std::move(ids), offsets = std::move(offsets)](Graph& g, std::uint32_t self) {
            const auto d = g.grad(self).data();
            for (std::size_t k = 0; k < ids.size(); ++k) {
                if (!g.requires_grad(ids[k])) continue;
                auto gx = g.grad(ids[k]).data();
                for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d[offsets[k] + i];
            }
        });
}

inline Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: no operands");
    const std::size_t m = xs.front().rows();
    std::size_t total = 0;
    for (const Var& v : xs) {
        if (v.rows() != m) {
            throw ShapeError("concat_cols: row mismatch " + std::to_string(v.rows()) + " vs " + std::to_string(m));
        }
        total += v.cols();
    }
    Tensor out = Tensor::matrix(m, total);
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> widths;
    std::size_t off = 0;
    for (const Var& v : xs) {
        const std::size_t w = v.cols();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out(i, off + j) = v.value()(i, j);
        ids.push_back(v.id());
        offsets.push_back(off);
        widths.push_back(w);
        off += w;
    }
    return xs.front().graph().emplace(
        std::move(out), xs,
        [ids = std::move(ids), offsets = std::move(offsets), widths = std::move(widths), m](Graph& g,
                                                                                           std::uint32_t self) {
            const auto& d = g.grad(self);
            for (std::size_t k = 0; k < ids.size(); ++k) {
                if (!g.requires_grad(ids[k])) continue;
                auto& gx = g.grad(ids[k]);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) gx(i, j) += d(i, offsets[k] + j);
            }
        });
}

// Rows of `table` selected by `indices` (repeats allowed); backward scatter-adds.
inline Var gather_rows(Var table, std::vector<std::size_t> indices) {
    const std::size_t n = table.cols(), rows = table.rows();
    Tensor out = Tensor::matrix(indices.size(), n);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows) {
            throw IndexError("gather_rows: index " + std::to_string(indices[i]) + " outside " +
                             std::to_string(rows) + " rows");
        }
        auto src = table.value().row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    const auto it = table.id();
    return table.graph().emplace(std::move(out), {table},
                                 [it, n, indices = std::move(indices)](Graph& g, std::uint32_t self) {
                                     const auto& d = g.grad(self);
                                     auto& gt = g.grad(it);
                                     for (std::size_t i = 0; i < indices.size(); ++i)
                                         for (std::size_t j = 0; j < n; ++j) gt(indices[i], j) += d(i, j);
                                 });
}

// Inverted dropout: kept entries are scaled by 1/(1-rate). rate 0 is identity.
inline Var dropout(Var x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.value().size());
    for (double& m : mask) m = rng.bernoulli(rate) ? 0.0 : keep_scale;
    Tensor out = x.value();
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= mask[i];
    const auto ix = x.id();
    return x.graph().emplace(std::move(out), {x}, [ix, mask = std::move(mask)](Graph& g, std::uint32_t self) {
        const auto d = g.grad(self).data();
        auto gx = g.grad(ix).data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += d[i] * mask[i];
    });
}

// Boolean attendability matrix (query rows x key columns). An empty mask
// allows everything.
struct AttentionMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> allowed;

    static AttentionMask all(std::size_t lq, std::size_t lk) { return {lq, lk, {}}; }

    // Same key-padding pattern for every query row.
    static AttentionMask keys(std::size_t lq, const std::vector<std::uint8_t>& key_allowed) {
        AttentionMask m{lq, key_allowed.size(), {}};
        m.allowed.reserve(lq * key_allowed.size());
        for (std::size_t i = 0; i < lq; ++i) m.allowed.insert(m.allowed.end(), key_allowed.begin(), key_allowed.end());
        return m;
    }

    [[nodiscard]] bool allows(std::size_t i, std::size_t j) const {
        return allowed.empty() || allowed[i * cols + j] != 0;
    }

    void validate(std::size_t lq, std::size_t lk) const {
        if (!allowed.empty() && (rows != lq || cols != lk || allowed.size() != lq * lk)) {
            throw ShapeError("attention mask is [" + std::to_string(rows) + "x" + std::to_string(cols) +
                             "], attention is [" + std::to_string(lq) + "x" + std::to_string(lk) + "]");
        }
        if (allowed.empty()) return;
        for (std::size_t i = 0; i < lq; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < lk && !any; ++j) any = allows(i, j);
            if (!any) {
                throw ContractError("attention row " + std::to_string(i) + " has every key masked");
            }
        }
    }
};

inline constexpr double masked_logit_offset = -1e9;

// Single-head attention composed from primitive ops.
inline Var scaled_dot_attention(Var queries, Var keys, Var values, const AttentionMask& mask) {
    const std::size_t lq = queries.rows(), lk = keys.rows(), d = queries.cols();
    if (keys.cols() != d || values.rows() != lk) {
        throw ShapeError("attention: queries " + shape_string(queries.value().shape()) + ", keys " +
                         shape_string(keys.value().shape()) + ", values " + shape_string(values.value().shape()));
    }
    mask.validate(lq, lk);
    Graph& g = queries.graph();
    Var logits = scale(matmul_nt(queries, keys), 1.0 / std::sqrt(static_cast<double>(d)));
    if (!mask.allowed.empty()) {
        Tensor bias = Tensor::matrix(lq, lk);
        for (std::size_t i = 0; i < lq; ++i)
            for (std::size_t j = 0; j < lk; ++j) bias(i, j) = mask.allows(i, j) ? 0.0 : masked_logit_offset;
        logits = add(logits, g.constant(std::move(bias)));
    }
    return matmul(softmax_rows(logits), values);
}

// Fused multi-head attention over column blocks of width d/heads. Produces the
// same values as running scaled_dot_attention per head and concatenating.
inline Var multi_head_attention(Var q, Var k, Var v, std::size_t heads, const AttentionMask& mask) {
    const std::size_t lq = q.rows(), lk = k.rows(), d = q.cols();
    if (heads == 0 || d % heads != 0) {
        throw ConfigError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                          " heads");
    }
    if (k.cols() != d || v.cols() != d || v.rows() != lk) {
        throw ShapeError("multi_head_attention: q " + shape_string(q.value().shape()) + ", k " +
                         shape_string(k.value().shape()) + ", v " + shape_string(v.value().shape()));
    }
    mask.validate(lq, lk);
    const std::size_t dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    std::vector<double> probs(heads * lq * lk);
    Tensor out = Tensor::matrix(lq, d);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < lq; ++i) {
            std::span<double> p(probs.data() + (h * lq + i) * lk, lk);
            const double* qi = qv.data().data() + i * d + c0;
            for (std::size_t j = 0; j < lk; ++j) {
                const double* kj = kv.data().data() + j * d + c0;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                p[j] = acc * sc + (mask.allows(i, j) ? 0.0 : masked_logit_offset);
            }
            detail::softmax_row_inplace(p);
            double* oi = out.data().data() + i * d + c0;
            for (std::size_t j = 0; j < lk; ++j) {
                const double pj = p[j];
                if (pj == 0.0) continue;
                const double* vj = vv.data().data() + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) oi[c] += pj * vj[c];
            }
        }
    }
    const auto iq = q.id(), ik = k.id(), iv = v.id();
    return q.graph().emplace(
        std::move(out), {q, k, v},
        [iq, ik, iv, heads, lq, lk, d, dh, sc, probs = std::move(probs)](Graph& g, std::uint32_t self) {
            const double* dout = g.grad(self).data().data();
            const double* qv2 = g.value(iq).data().data();
            const double* kv2 = g.value(ik).data().data();
            const double* vv2 = g.value(iv).data().data();
            double* gq = g.requires_grad(iq) ? g.grad(iq).data().data() : nullptr;
            double* gk = g.requires_grad(ik) ? g.grad(ik).data().data() : nullptr;
            double* gv = g.requires_grad(iv) ? g.grad(iv).data().data() : nullptr;
            std::vector<double> dp(lk);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t c0 = h * dh;
                for (std::size_t i = 0; i < lq; ++i) {
                    const double* p = probs.data() + (h * lq + i) * lk;
                    const double* doi = dout + i * d + c0;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < lk; ++j) {
                        const double* vj = vv2 + j * d + c0;
                        double acc = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
                        dp[j] = acc;
                        dot += acc * p[j];
                        if (gv != nullptr && p[j] != 0.0) {
                            double* gvj = gv + j * d + c0;
                            for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * doi[c];
                        }
                    }
                    for (std::size_t j = 0; j < lk; ++j) {
                        const double ds = p[j] * (dp[j] - dot) * sc;
                        if (ds == 0.0) continue;
                        if (gq != nullptr) {
                            const double* kj = kv2 + j * d + c0;
                            double* gqi = gq + i * d + c0;
                            for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                        }
                        if (gk != nullptr) {
                            const double* qi = qv2 + i * d + c0;
                            double* gkj = gk + j * d + c0;
                            for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        });
}

// Compares reverse-mode gradients of `loss_fn` against central differences.
// Returns max over checked coordinates of |analytic − numeric| / max(1, |analytic|).
// max_coords_per_param = 0 checks every coordinate; otherwise a seeded sample.
struct FiniteDiffReport {
    double max_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    std::size_t coordinates_checked = 0;
};

inline FiniteDiffReport finite_diff_report(const std::function<Var(Graph&)>& loss_fn,
                                           std::span<Parameter* const> params, double step,
                                           std::size_t max_coords_per_param = 0, std::uint64_t seed = 0) {
    for (Parameter* p : params) p->grad.fill(0.0);
    {
        Graph g;
        Var loss = loss_fn(g);
        g.backward(loss);
    }
    auto evaluate = [&]() {
        Graph g(false);
        return loss_fn(g).item();
    };
    FiniteDiffReport report;
    Rng rng(seed);
    for (Parameter* p : params) {
        const std::size_t n = p->value.size();
        std::vector<std::size_t> coords;
        if (max_coords_per_param == 0 || max_coords_per_param >= n) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (std::size_t c = 0; c < max_coords_per_param; ++c) {
                coords.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)));
            }
        }
        for (std::size_t i : coords) {
            const double original = p->value[i];
            p->value[i] = original + step;
            const double up = evaluate();
            p->value[i] = original - step;
            const double down = evaluate();
            p->value[i] = original;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = p->grad[i];
            const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
            ++report.coordinates_checked;
            if (err >= report.max_error) {
                report.max_error = err;
                report.worst_parameter = p->name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

inline double finite_diff_check(const std::function<Var(Graph&)>& loss_fn, std::span<Parameter* const> params,
                                double step, std::size_t max_coords_per_param = 0, std::uint64_t seed = 0) {
    return finite_diff_report(loss_fn, params, step, max_coords_per_param, seed).max_error;
}

} // namespace hammer

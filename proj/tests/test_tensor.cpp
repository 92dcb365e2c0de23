#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "hammer/autograd.hpp"
#include "hammer/parameters.hpp"

using namespace hammer;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.data()) v = rng.normal();
    return t;
}

std::vector<Parameter*> as_params(ParameterStore& store) { return store.all(); }

} // namespace

TEST(TensorCore, ShapeInvariantEnforced) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
    Tensor t({2, 3}, std::vector<double>(6, 1.0));
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
}

TEST(Matmul, IdentityZeroAndHandCase) {
    Graph g;
    auto eye = g.constant(Tensor::matrix({{1, 0}, {0, 1}}));
    auto m = g.constant(Tensor::matrix({{1, 2}, {3, 4}}));
    EXPECT_EQ(matmul(eye, m).value(), Tensor::matrix({{1, 2}, {3, 4}}));

    auto col = g.constant(Tensor::matrix({{5}, {6}}));
    EXPECT_EQ(matmul(m, col).value(), Tensor::matrix({{17}, {39}}));

    Rng rng(3);
    auto z = g.constant(Tensor::matrix(2, 3));
    auto any = g.constant(random_matrix(rng, 3, 4));
    EXPECT_EQ(matmul(z, any).value(), Tensor::matrix(2, 4));
}

TEST(Matmul, MismatchNamesBothShapes) {
    Graph g;
    auto a = g.constant(Tensor::matrix(2, 3));
    auto b = g.constant(Tensor::matrix(4, 5));
    try {
        matmul(a, b);
        FAIL();
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[4x5]"), std::string::npos);
    }
}

TEST(Softmax, Examples) {
    auto u = softmax(std::vector<double>{0, 0, 0});
    for (double p : u) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
    auto s = softmax(std::vector<double>{0, std::log(3.0)});
    EXPECT_NEAR(s[0], 0.25, 1e-15);
    EXPECT_NEAR(s[1], 0.75, 1e-15);
    EXPECT_THROW(softmax(std::vector<double>{0, NAN}), NumericError);
    EXPECT_THROW(softmax(std::vector<double>{0, INFINITY}), NumericError);
}

TEST(Softmax, SumsToOneAndShiftInvariant) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 40));
        std::vector<double> x(n);
        for (double& v : x) v = rng.normal(0, 5);
        const double c = rng.normal(0, 100);
        std::vector<double> shifted(x);
        for (double& v : shifted) v += c;
        auto p = softmax(x);
        auto q = softmax(shifted);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_GT(p[i], 0.0);
            EXPECT_NEAR(p[i], q[i], 1e-12);
            total += p[i];
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(LayerNorm, Examples) {
    Graph g;
    auto ones2 = g.constant(Tensor::row_vector({1, 1}));
    auto zeros2 = g.constant(Tensor::row_vector({0, 0}));

    auto constant = g.constant(Tensor::row_vector({4, 4}));
    auto y0 = layer_norm(constant, ones2, zeros2, 1e-5);
    EXPECT_EQ(y0.value()(0, 0), 0.0);
    EXPECT_EQ(y0.value()(0, 1), 0.0);

    auto unit = g.constant(Tensor::row_vector({1, -1}));
    auto y1 = layer_norm(unit, ones2, zeros2, 0.0);
    EXPECT_DOUBLE_EQ(y1.value()(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(y1.value()(0, 1), -1.0);

    // mean 1, variance 1: xhat = [-1, 1]; 2*xhat + 1 = [-1, 3]
    auto x = g.constant(Tensor::row_vector({0, 2}));
    auto y2 = layer_norm(x, g.constant(Tensor::row_vector({2, 2})), g.constant(Tensor::row_vector({1, 1})), 0.0);
    EXPECT_DOUBLE_EQ(y2.value()(0, 0), -1.0);
    EXPECT_DOUBLE_EQ(y2.value()(0, 1), 3.0);

    EXPECT_THROW(layer_norm(g.constant(Tensor::matrix(1, 0)), g.constant(Tensor::matrix(1, 0)),
                            g.constant(Tensor::matrix(1, 0)), 1e-5),
                 ShapeError);
}

TEST(Attention, SingleKeyIdenticalKeysAndHandBlend) {
    Graph g;
    Rng rng(5);
    auto q = g.constant(random_matrix(rng, 3, 4));
    auto k1 = g.constant(random_matrix(rng, 1, 4));
    auto v1 = g.constant(random_matrix(rng, 1, 4));
    auto out1 = scaled_dot_attention(q, k1, v1, AttentionMask::all(3, 1));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(out1.value()(i, j), v1.value()(0, j));

    Tensor same = random_matrix(rng, 1, 4);
    Tensor keys = Tensor::matrix(3, 4);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 4; ++c) keys(r, c) = same(0, c);
    auto vals = g.constant(random_matrix(rng, 3, 4));
    auto out2 = scaled_dot_attention(q, g.constant(keys), vals, AttentionMask::all(3, 3));
    for (std::size_t j = 0; j < 4; ++j) {
        const double avg = (vals.value()(0, j) + vals.value()(1, j) + vals.value()(2, j)) / 3.0;
        EXPECT_NEAR(out2.value()(0, j), avg, 1e-12);
    }

    // d = 1: logits are q*k/1 = [0, ln 3] -> weights 0.25 / 0.75.
    auto qh = g.constant(Tensor::matrix({{1.0}}));
    auto kh = g.constant(Tensor::matrix({{0.0}, {std::log(3.0)}}));
    auto vh = g.constant(Tensor::matrix({{10.0}, {20.0}}));
    auto out3 = scaled_dot_attention(qh, kh, vh, AttentionMask::all(1, 2));
    EXPECT_NEAR(out3.value()(0, 0), 0.25 * 10 + 0.75 * 20, 1e-12);
}

TEST(Attention, FullyMaskedRowIsContractViolation) {
    Graph g;
    auto q = g.constant(Tensor::matrix(2, 2));
    auto k = g.constant(Tensor::matrix(2, 2));
    AttentionMask mask{2, 2, {1, 1, 0, 0}};
    EXPECT_THROW(scaled_dot_attention(q, k, k, mask), ContractError);
    EXPECT_THROW(multi_head_attention(q, k, k, 1, mask), ContractError);
}

TEST(Attention, MaskedKeysGetNoWeightAndRowsStayConvex) {
    Graph g;
    Rng rng(9);
    auto q = g.constant(random_matrix(rng, 2, 4));
    auto k = g.constant(random_matrix(rng, 3, 4));
    auto v = g.constant(Tensor::matrix({{1, 0, 0, 0}, {0, 1, 0, 0}, {100, 100, 100, 100}}));
    auto out = scaled_dot_attention(q, k, v, AttentionMask::keys(2, {1, 1, 0}));
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_NEAR(out.value()(i, 0) + out.value()(i, 1), 1.0, 1e-12);
        EXPECT_EQ(out.value()(i, 2), 0.0);
    }
}

TEST(Attention, FusedMultiHeadMatchesPerHeadComposite) {
    Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        Graph g;
        const std::size_t heads = static_cast<std::size_t>(rng.uniform_int(1, 4));
        const std::size_t dh = static_cast<std::size_t>(rng.uniform_int(1, 4));
        const std::size_t lq = static_cast<std::size_t>(rng.uniform_int(1, 6));
        const std::size_t lk = static_cast<std::size_t>(rng.uniform_int(1, 6));
        const std::size_t d = heads * dh;
        auto q = g.constant(random_matrix(rng, lq, d));
        auto k = g.constant(random_matrix(rng, lk, d));
        auto v = g.constant(random_matrix(rng, lk, d));
        std::vector<std::uint8_t> keep(lk, 1);
        for (std::size_t j = 1; j < lk; ++j) keep[j] = rng.bernoulli(0.7) ? 1 : 0;
        auto mask = AttentionMask::keys(lq, keep);
        auto fused = multi_head_attention(q, k, v, heads, mask);
        std::vector<Var> per_head;
        for (std::size_t h = 0; h < heads; ++h) {
            per_head.push_back(scaled_dot_attention(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh),
                                                    slice_cols(v, h * dh, dh), mask));
        }
        auto composite = concat_cols(per_head);
        for (std::size_t i = 0; i < fused.value().size(); ++i) {
            EXPECT_NEAR(fused.value()[i], composite.value()[i], 1e-12);
        }
    }
}

TEST(CrossEntropy, Examples) {
    Graph g;
    EXPECT_NEAR(cross_entropy(g.constant(Tensor::row_vector({0, 0, 0})), 1).item(), std::log(3.0), 1e-15);
    EXPECT_NEAR(cross_entropy(g.constant(Tensor::row_vector({0, std::log(3.0)})), 0).item(), -std::log(0.25),
                1e-14);
    EXPECT_LT(cross_entropy(g.constant(Tensor::row_vector({800, 0, 0})), 0).item(), 1e-300);
    EXPECT_THROW(cross_entropy(g.constant(Tensor::row_vector({0, 0})), 2), IndexError);
    const double nonneg = cross_entropy(g.constant(Tensor::row_vector({-3, 7, 1})), 0).item();
    EXPECT_GE(nonneg, 0.0);
}

TEST(Backward, AnalyticExamples) {
    ParameterStore store;
    auto& p = store.add("p", {1, 4}, Init::normal, 1.0);
    {
        Graph g;
        g.backward(sum(g.parameter(p)));
        for (double v : p.grad.data()) EXPECT_EQ(v, 1.0);
    }
    store.zero_grad();
    {
        Graph g;
        auto pv = g.parameter(p);
        g.backward(sum(mul(pv, pv)));
        for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p.grad[i], 2.0 * p.value[i]);
    }
}

TEST(Backward, UnreachedParameterGetsZeroAndNonScalarRejected) {
    ParameterStore store;
    auto& used = store.add("used", {1, 3}, Init::ones);
    auto& unused = store.add("unused", {1, 3}, Init::ones);
    Graph g;
    auto a = g.parameter(used);
    g.parameter(unused);
    EXPECT_THROW(g.backward(a), ContractError);
    g.backward(sum(a));
    for (double v : unused.grad.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, ThreeLayerCompositeMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ParameterStore store(seed);
        auto& w1 = store.add("w1", {4, 6}, Init::xavier_uniform);
        auto& w2 = store.add("w2", {6, 5}, Init::xavier_uniform);
        auto& w3 = store.add("w3", {5, 3}, Init::xavier_uniform);
        auto& gain = store.add("gain", {1, 5}, Init::ones);
        auto& bias = store.add("bias", {1, 5}, Init::normal, 0.1);
        Rng rng(seed + 100);
        Tensor x = random_matrix(rng, 3, 4);
        auto fn = [&](Graph& g) {
            auto h = gelu(matmul(g.constant(x), g.parameter(w1)));
            h = layer_norm(matmul(h, g.parameter(w2)), g.parameter(gain), g.parameter(bias), 1e-5);
            auto logits = matmul(h, g.parameter(w3));
            const std::size_t targets[] = {0, 2, 1};
            return cross_entropy_rows(logits, targets);
        };
        auto params = as_params(store);
        EXPECT_LE(finite_diff_check(fn, params, 1e-5), 1e-4) << "seed " << seed;
    }
}

TEST(FiniteDiff, LinearAndQuadratic) {
    ParameterStore store(1);
    auto& p = store.add("p", {1, 5}, Init::normal, 1.0);
    std::vector<Parameter*> params{&p};
    Tensor coeff = Tensor::row_vector({1.5, -2, 0.25, 3, -1});
    auto linear = [&](Graph& g) { return sum(mul(g.parameter(p), g.constant(coeff))); };
    EXPECT_LE(finite_diff_check(linear, params, 1e-5), 1e-9);
    auto quadratic = [&](Graph& g) {
        auto v = g.parameter(p);
        return sum(mul(mul(v, v), g.constant(coeff)));
    };
    EXPECT_LE(finite_diff_check(quadratic, params, 1e-5), 1e-7);
}

// Every differentiable op, >= 20 random shapes/seeds each.
TEST(FiniteDiff, EveryOpOnRandomShapes) {
    Rng shapes(2024);
    for (int trial = 0; trial < 20; ++trial) {
        const auto seed = static_cast<std::uint64_t>(trial);
        const std::size_t m = static_cast<std::size_t>(shapes.uniform_int(1, 4));
        const std::size_t heads = static_cast<std::size_t>(shapes.uniform_int(1, 2));
        const std::size_t n = heads * static_cast<std::size_t>(shapes.uniform_int(1, 3));
        const std::size_t k = static_cast<std::size_t>(shapes.uniform_int(1, 4));
        ParameterStore store(seed);
        auto& a = store.add("a", {m, n}, Init::normal, 1.0);
        auto& b = store.add("b", {m, n}, Init::normal, 1.0);
        auto& w = store.add("w", {n, k}, Init::normal, 1.0);
        auto& kk = store.add("kk", {k, n}, Init::normal, 1.0);
        auto& vv = store.add("vv", {k, n}, Init::normal, 1.0);
        auto& row = store.add("row", {1, n}, Init::normal, 1.0);
        auto& col = store.add("col", {m, 1}, Init::normal, 1.0);
        auto& table = store.add("table", {5, n}, Init::normal, 1.0);
        Rng rng(seed + 7);
        Tensor weights = random_matrix(rng, m, n);
        std::vector<std::uint8_t> keep(k, 1);
        for (std::size_t j = 1; j < k; ++j) keep[j] = rng.bernoulli(0.6) ? 1 : 0;
        const auto mask = AttentionMask::keys(m, keep);
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < m + 1; ++i) idx.push_back(static_cast<std::size_t>(rng.uniform_int(0, 4)));
        std::vector<std::size_t> targets;
        for (std::size_t i = 0; i < m; ++i) targets.push_back(static_cast<std::size_t>(rng.uniform_int(0, k - 1)));

        std::vector<std::function<Var(Graph&)>> cases = {
            [&](Graph& g) { return sum(mul(matmul(g.parameter(a), g.parameter(w)), g.constant(random_matrix(rng, m, k)))); },
            [&](Graph& g) { return sum(mul(matmul_nt(g.parameter(a), g.parameter(kk)), matmul_nt(g.parameter(b), g.parameter(vv)))); },
            [&](Graph& g) { return sum(mul(add(g.parameter(a), g.parameter(b)), g.constant(weights))); },
            [&](Graph& g) { return sum(mul(sub(g.parameter(a), g.parameter(b)), g.parameter(a))); },
            [&](Graph& g) { return sum(mul(add_broadcast(g.parameter(a), g.parameter(row)), g.constant(weights))); },
            [&](Graph& g) { return sum(mul(add_broadcast(g.parameter(a), g.parameter(col)), g.constant(weights))); },
            [&](Graph& g) { return sum(mul(gelu(g.parameter(a)), g.constant(weights))); },
            [&](Graph& g) {
                return sum(mul(layer_norm(g.parameter(a), g.parameter(row), slice_rows(g.parameter(table), 0, 1), 1e-5),
                               g.constant(weights)));
            },
            [&](Graph& g) { return sum(mul(softmax_rows(g.parameter(a)), g.constant(weights))); },
            [&](Graph& g) { return cross_entropy_rows(matmul(g.parameter(a), g.parameter(w)), targets); },
            [&](Graph& g) { return scale(max_element(g.parameter(a)), 3.0); },
            [&](Graph& g) { return mul(pick(g.parameter(a), m - 1, n - 1), pick(g.parameter(b), 0, 0)); },
            [&](Graph& g) { return sum(mul(reshape(g.parameter(a), 1, m * n), reshape(g.parameter(b), 1, m * n))); },
            [&](Graph& g) {
                return sum(mul(concat_cols({g.parameter(a), g.parameter(b)}),
                               concat_cols({g.parameter(b), g.constant(weights)})));
            },
            [&](Graph& g) { return sum(mul(concat_rows({g.parameter(a), g.parameter(row)}), concat_rows({g.parameter(b), g.parameter(row)}))); },
            [&](Graph& g) { return sum(mul(gather_rows(g.parameter(table), idx), gather_rows(g.parameter(table), idx))); },
            [&](Graph& g) {
                return sum(mul(scaled_dot_attention(g.parameter(a), g.parameter(kk), g.parameter(vv), mask),
                               g.constant(weights)));
            },
            [&](Graph& g) {
                return sum(mul(multi_head_attention(g.parameter(a), g.parameter(kk), g.parameter(vv), heads, mask),
                               g.constant(weights)));
            },
            [&](Graph& g) { return mean(mul(slice_cols(g.parameter(a), 0, 1), slice_cols(g.parameter(b), n - 1, 1))); },
        };
        auto params = as_params(store);
        for (std::size_t c = 0; c < cases.size(); ++c) {
            Rng snapshot = rng;
            auto fixed = [&, c](Graph& g) {
                rng = snapshot;
                return cases[c](g);
            };
            EXPECT_LE(finite_diff_check(fixed, params, 1e-5), 1e-3) << "trial " << trial << " case " << c;
        }
    }
}

TEST(Dropout, IdentityAtZeroAndScaledOtherwise) {
    Graph g;
    Rng rng(1);
    auto x = g.constant(Tensor::matrix(4, 50, 1.0));
    auto same = dropout(x, 0.0, rng);
    EXPECT_EQ(same.id(), x.id());
    auto dropped = dropout(x, 0.5, rng);
    for (double v : dropped.value().data()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

TEST(Backward, Deterministic) {
    auto run = [] {
        ParameterStore store(42);
        auto& w = store.add("w", {8, 8}, Init::xavier_uniform);
        auto& q = store.add("q", {5, 8}, Init::normal, 1.0);
        Graph g;
        auto h = multi_head_attention(g.parameter(q), matmul(g.parameter(q), g.parameter(w)), g.parameter(q), 2,
                                      AttentionMask::all(5, 5));
        g.backward(sum(gelu(h)));
        return std::pair{w.grad, q.grad};
    };
    auto first = run();
    auto second = run();
    EXPECT_EQ(first.first.storage(), second.first.storage());
    EXPECT_EQ(first.second.storage(), second.second.storage());
}

TEST(Checkpoint, BitExactRoundTripAndLayout) {
    ParameterStore store(7);
    store.add("alpha", {2, 3}, Init::normal, 1.0);
    store.add("beta.gamma", {4}, Init::xavier_uniform);
    store[0].value[0] = -0.0;
    store[0].value[1] = std::numeric_limits<double>::denorm_min();
    const std::string bytes = store.serialize();
    EXPECT_EQ(bytes.substr(0, 8), "HMRCKPT1");
    EXPECT_EQ(static_cast<int>(bytes[8]), 1);
    // name length (u32 LE) = 5, then "alpha"
    EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 5);
    EXPECT_EQ(bytes.substr(13, 5), "alpha");
    EXPECT_EQ(bytes.size(), 9u + (4 + 5 + 4 + 8 + 6 * 8) + (4 + 10 + 4 + 4 + 4 * 8));

    ParameterStore other(99);
    other.add("alpha", {2, 3}, Init::zeros);
    other.add("beta.gamma", {4}, Init::zeros);
    other.deserialize(bytes);
    EXPECT_EQ(other.serialize(), bytes);
    EXPECT_TRUE(std::signbit(other[0].value[0]));

    EXPECT_THROW(other.deserialize(bytes.substr(0, bytes.size() - 3)), LoadError);
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(other.deserialize(bad), LoadError);
    ParameterStore mismatched;
    mismatched.add("alpha", {3, 2}, Init::zeros);
    mismatched.add("beta.gamma", {4}, Init::zeros);
    EXPECT_THROW(mismatched.deserialize(bytes), LoadError);
}

TEST(Parameters, InitDependsOnlyOnSeedAndName) {
    ParameterStore a(5), b(5);
    a.add("x", {3, 3}, Init::normal);
    b.add("other", {2, 2}, Init::normal);
    b.add("x", {3, 3}, Init::normal);
    EXPECT_EQ(a.at("x").value, b.at("x").value);
}

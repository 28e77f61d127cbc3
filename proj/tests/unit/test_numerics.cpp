#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "eduvqa/autodiff.hpp"
#include "eduvqa/errors.hpp"
#include "eduvqa/gradcheck.hpp"

using namespace eduvqa;
using namespace eduvqa::numerics;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

// Naive triple loop, independent of the tape kernels.
std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    Tape tape;
    Var out = matmul(tape.constant(Tensor::matrix({{1, 0}, {0, 1}})),
                     tape.constant(Tensor::matrix({{5, 6}, {7, 8}})));
    EXPECT_EQ(out.shape(), (Shape{2, 2}));
    EXPECT_EQ(out.value().data(), (std::vector<double>{5, 6, 7, 8}));
}

TEST(Matmul, RowTimesColumnIsDotProduct) {
    Tape tape;
    Var out = matmul(tape.constant(Tensor::matrix({{1, 2}})),
                     tape.constant(Tensor::matrix({{3}, {4}})));
    EXPECT_EQ(out.shape(), (Shape{1, 1}));
    EXPECT_EQ(out.item(), 11.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
        Tape tape;
        Var out = matmul(tape.constant(a), tape.constant(b));
        const auto expected = naive_matmul(a, b);
        for (std::size_t i = 0; i < expected.size(); ++i) {
            EXPECT_LT(std::abs(out.value()[i] - expected[i]), 1e-12);
        }
    }
}

TEST(Matmul, BatchedAndBroadcastAgreeWithPerSliceProducts) {
    std::mt19937_64 rng(8);
    Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    Tape tape;
    Var batched = matmul(tape.constant(a), tape.constant(b));
    Var broadcast = matmul(tape.constant(a), tape.constant(w));
    for (std::size_t s = 0; s < 2; ++s) {
        Tensor as({3, 4}, std::vector<double>(a.data().begin() + s * 12, a.data().begin() + (s + 1) * 12));
        Tensor bs({4, 5}, std::vector<double>(b.data().begin() + s * 20, b.data().begin() + (s + 1) * 20));
        const auto e1 = naive_matmul(as, bs);
        const auto e2 = naive_matmul(as, w);
        for (std::size_t i = 0; i < 15; ++i) {
            EXPECT_NEAR(batched.value()[s * 15 + i], e1[i], 1e-12);
            EXPECT_NEAR(broadcast.value()[s * 15 + i], e2[i], 1e-12);
        }
    }
}

TEST(Matmul, ShapeMismatchIsDescriptive) {
    Tape tape;
    Var a = tape.constant(Tensor({2, 3}));
    Var b = tape.constant(Tensor({4, 2}));
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("3 != 4"), std::string::npos) << e.what();
    }
}

TEST(MeanPool, ConstantAlongAxisIsUnchanged) {
    std::mt19937_64 rng(1);
    Tensor frame = random_tensor({2, 3}, rng);
    std::vector<double> values;
    for (int t = 0; t < 4; ++t) values.insert(values.end(), frame.data().begin(), frame.data().end());
    Tape tape;
    Var pooled = mean_pool(tape.constant(Tensor({4, 2, 3}, values)), {0});
    EXPECT_EQ(pooled.shape(), (Shape{2, 3}));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(pooled.value()[i], frame[i]);
}

TEST(MeanPool, HandSum) {
    Tape tape;
    Var pooled = mean_pool(tape.constant(Tensor::matrix({{1, 2}, {3, 4}})), {0});
    EXPECT_EQ(pooled.value().data(), (std::vector<double>{2, 3}));
}

TEST(MeanPool, DisjointAxisPoolsCommute) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        Tape tape;
        Var x = tape.constant(random_tensor({3, 2, 4, 5}, rng));
        Var two_step = mean_pool(mean_pool(x, {0}), {0, 1});
        Var one_step = mean_pool(x, {0, 1, 2});
        ASSERT_EQ(two_step.shape(), one_step.shape());
        for (std::size_t i = 0; i < one_step.size(); ++i) {
            EXPECT_LT(std::abs(two_step.value()[i] - one_step.value()[i]), 1e-12);
        }
    }
}

TEST(MeanPool, IsLinear) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> coef(-3.0, 3.0);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({2, 3, 4}, rng), y = random_tensor({2, 3, 4}, rng);
        const double alpha = coef(rng), beta = coef(rng);
        Tape tape;
        Var combo = add(scale(tape.constant(x), alpha), scale(tape.constant(y), beta));
        Var lhs = mean_pool(combo, {1, 2});
        Var px = mean_pool(tape.constant(x), {1, 2});
        Var py = mean_pool(tape.constant(y), {1, 2});
        for (std::size_t i = 0; i < lhs.size(); ++i) {
            EXPECT_LT(std::abs(lhs.value()[i] - (alpha * px.value()[i] + beta * py.value()[i])), 1e-12);
        }
    }
}

TEST(MeanPool, RejectsRepeatedOrInvalidAxes) {
    Tape tape;
    Var x = tape.constant(Tensor({2, 2}));
    EXPECT_THROW(mean_pool(x, {0, 0}), ShapeError);
    EXPECT_THROW(mean_pool(x, {2}), ShapeError);
}

TEST(Softmax, UniformOnEqualLogits) {
    Tape tape;
    Var y = softmax(tape.constant(Tensor::vector({0, 0, 0})), 0);
    for (double v : y.value().values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, ShiftInvariant) {
    Tape tape;
    Var a = softmax(tape.constant(Tensor::vector({0.3, 1.7})), 0);
    Var b = softmax(tape.constant(Tensor::vector({100.3, 101.7})), 0);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-12);
}

TEST(Softmax, MatchesDirectFormula) {
    Tape tape;
    Var y = softmax(tape.constant(Tensor::vector({1, 2, 3})), 0);
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(y.value()[i], std::exp(i + 1.0) / z, 1e-12);
}

TEST(Softmax, RowsSumToOne) {
    std::mt19937_64 rng(4);
    Tape tape;
    Var y = softmax(tape.constant(random_tensor({5, 7}, rng, -20, 20)), 1);
    for (std::size_t r = 0; r < 5; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 7; ++j) s += y.value()[r * 7 + j];
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
    Var all = softmax_all(tape.constant(random_tensor({3, 3}, rng)));
    EXPECT_NEAR(ordered_sum(all.value().values()), 1.0, 1e-9);
}

TEST(Backward, LinearLossGivesOnes) {
    Tape tape;
    Var p = tape.leaf(Tensor::vector({0.5, -2.0, 3.0}));
    tape.backward(sum_all(p));
    const Tensor g = tape.grad(p);
    for (double v : g.values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, QuadraticLossGivesParameter) {
    Tape tape;
    Var p = tape.leaf(Tensor::vector({0.5, -2.0, 3.0}));
    tape.backward(scale(sum_all(mul(p, p)), 0.5));
    EXPECT_EQ(tape.grad(p).data(), p.value().data());
}

TEST(Backward, BeforeForwardIsUsageError) {
    Tape tape;
    Tape other;
    Var loss = other.leaf(Tensor::scalar(1.0));
    EXPECT_THROW(tape.backward(loss), UsageError);
}

TEST(Backward, NonScalarLossIsUsageError) {
    Tape tape;
    Var p = tape.leaf(Tensor::vector({1, 2}));
    EXPECT_THROW(tape.backward(p), UsageError);
}

TEST(Backward, UnusedTensorGetsZeroGradient) {
    Tape tape;
    Var used = tape.leaf(Tensor::vector({1, 2}));
    Var unused = tape.leaf(Tensor::vector({3, 4}));
    Var side = mul(unused, unused);
    (void)side;
    tape.backward(sum_all(used));
    const Tensor g = tape.grad(unused);
    for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Tape, NonFiniteResultIsAnErrorNamingTheScope) {
    Tape tape;
    tape.set_scope("perceptual/gating");
    Var x = tape.constant(Tensor::vector({1e300, 1e300}));
    try {
        mul(x, x);
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("perceptual/gating"), std::string::npos);
    }
}

// Finite differences over a composition touching every primitive.
TEST(GradientCheck, CompositionOfAllPrimitives) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        ParameterSet params;
        params.add("x", random_tensor({2, 3, 4}, rng));
        params.add("w", random_tensor({4, 4}, rng));
        params.add("b", random_tensor({4}, rng));
        params.add("gamma", random_tensor({4}, rng, 0.5, 1.5));
        params.add("beta", random_tensor({4}, rng));
        params.add("mix", random_tensor({3}, rng, 0.1, 1.0));
        params.add("s", random_tensor({}, rng, 0.5, 2.0));

        auto build = [](Tape& tape) {
            Var x = tape.parameter("x");
            Var h = linear(x, tape.parameter("w"), tape.parameter("b"));
            Var att = softmax(matmul(h, transpose_last2(x)), 2);
            Var ctx = matmul(att, x);
            Var ln = layer_norm(add(ctx, h), tape.parameter("gamma"), tape.parameter("beta"));
            Var act = relu(sub(ln, scale(x, 0.3)));
            Var pooled = mean_pool(act, {0});                   // [3,4]
            Var rows = softmax_all(pooled);
            std::vector<Var> terms{select(pooled, 0, 0), select(pooled, 0, 1), select(pooled, 0, 2)};
            Var w = div_scalar(tape.parameter("mix"), sum_all(tape.parameter("mix")));
            Var mixed = weighted_sum(terms, w);                 // [4]
            Var cat = concat({mixed, gather(rows, {0, 5, 11})}, 0);
            Var centered = add_scalar(cat, scale(mean_all(cat), -1.0));
            Var norm = sqrt(add_scalar(sum_all(mul(centered, centered)), tape.parameter("s")));
            Var st = stack({norm, mul_scalar(sum_all(cat), tape.parameter("s"))});
            return sum_all(mul(st, reshape(stack({norm, norm}), {2})));
        };
        Tape tape(&params);
        Var loss = build(tape);
        tape.backward(loss);
        const Gradients grads = tape.parameter_grads();
        auto value = [&](const ParameterSet& p) {
            Tape t(&p);
            return build(t).item();
        };
        GradCheckReport report = check_gradients(params, value, grads);
        EXPECT_LT(report.max_rel_error, 1e-4)
            << report.worst.parameter << "[" << report.worst.index << "] analytic "
            << report.worst.analytic << " numeric " << report.worst.numeric;
    }
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({3, 4}, rng);
    auto run = [&]() {
        Tape tape;
        Var v = tape.leaf(x);
        Var y = softmax(matmul(v, transpose_last2(v)), 1);
        tape.backward(sum_all(mul(y, y)));
        return std::pair{y.value(), tape.grad(v)};
    };
    auto [y1, g1] = run();
    auto [y2, g2] = run();
    EXPECT_TRUE(bit_equal(y1, y2));
    EXPECT_TRUE(bit_equal(g1, g2));
}

TEST(Tensor, RejectsZeroExtentsAndSizeMismatch) {
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, Float32ValuesAreRepresentable) {
    Tensor t({1}, {0.1}, DType::f32);
    EXPECT_EQ(t[0], static_cast<double>(0.1f));
}

TEST(OrderedSum, IndependentOfPermutation) {
    std::mt19937_64 rng(6);
    Tensor v = random_tensor({9}, rng, -1e3, 1e3);
    std::vector<double> values = v.data();
    const double reference = ordered_sum(values);
    for (int i = 0; i < 50; ++i) {
        std::shuffle(values.begin(), values.end(), rng);
        EXPECT_EQ(ordered_sum(values), reference);
    }
}

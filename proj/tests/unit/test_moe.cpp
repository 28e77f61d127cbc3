#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "eduvqa/errors.hpp"
#include "eduvqa/moe.hpp"

using namespace eduvqa;
using namespace eduvqa::moe;
using numerics::Shape;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(numerics::shape_size(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

void set_scalar_expert(ParameterSet& p, const std::string& prefix, double w1, double b1, double w2,
                       double b2) {
    p.add(prefix + ".w1", Tensor({1, 1}, {w1}));
    p.add(prefix + ".b1", Tensor({1}, {b1}));
    p.add(prefix + ".w2", Tensor({1, 1}, {w2}));
    p.add(prefix + ".b2", Tensor({1}, {b2}));
}

}  // namespace

TEST(TopK, FullSelectionOfNormalizedScoresIsIdentity) {
    const std::vector<double> scores{0.1, 0.2, 0.3, 0.4};
    ExpertWeights w = topk_renorm(scores, 4);
    EXPECT_EQ(w.indices, (std::vector<std::size_t>{0, 1, 2, 3}));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w.weights[i], scores[i], 1e-15);
}

TEST(TopK, KeepsLargestAndRenormalizes) {
    ExpertWeights w = topk_renorm(std::vector<double>{0.1, 0.5, 0.3, 0.1}, 2);
    EXPECT_EQ(w.indices, (std::vector<std::size_t>{1, 2}));
    EXPECT_NEAR(w.weights[0], 0.625, 1e-15);
    EXPECT_NEAR(w.weights[1], 0.375, 1e-15);
}

TEST(TopK, TiesBreakTowardLowestIndex) {
    ExpertWeights w = topk_renorm(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 2);
    EXPECT_EQ(w.indices, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(w.weights, (std::vector<double>{0.5, 0.5}));
}

TEST(TopK, AllZeroScoresFallBackToUniformFirstK) {
    ExpertWeights w = topk_renorm(std::vector<double>{0, 0, 0}, 2);
    EXPECT_TRUE(w.degenerate);
    EXPECT_EQ(w.indices, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(w.weights, (std::vector<double>{0.5, 0.5}));
}

TEST(TopK, InvalidKIsConfigError) {
    EXPECT_THROW(topk_renorm(std::vector<double>{0.5, 0.5}, 0), ConfigError);
    EXPECT_THROW(topk_renorm(std::vector<double>{0.5, 0.5}, 3), ConfigError);
    EXPECT_THROW(topk_renorm(std::vector<double>{-0.5, 0.5}, 1), ConfigError);
}

TEST(Gating, ZeroContextAndWeightsGiveUniformMatrix) {
    Tape tape;
    GatingMatrix g = make_gating(tape.constant(Tensor({3})), 2, 4, tape.constant(Tensor({3, 8})),
                                 tape.constant(Tensor({8})));
    for (double v : g.matrix.value().values()) EXPECT_DOUBLE_EQ(v, 1.0 / 8.0);
}

TEST(Gating, SingleExpertIsOne) {
    Tape tape;
    std::mt19937_64 rng(3);
    GatingMatrix g = make_gating(tape.constant(random_tensor({4}, rng)), 1, 1,
                                 tape.constant(random_tensor({4, 1}, rng)),
                                 tape.constant(random_tensor({1}, rng)));
    EXPECT_EQ(g.matrix.shape(), (Shape{1, 1}));
    EXPECT_EQ(g.matrix.item(), 1.0);
}

TEST(Gating, MatchesLinearThenSoftmaxByHand) {
    Tape tape;
    Tensor w = Tensor::matrix({{0.1, 0.2, 0.3, 0.4}, {0.4, 0.3, 0.2, 0.1}});
    Tensor b = Tensor::vector({0.05, 0.0, -0.05, 0.1});
    GatingMatrix g = make_gating(tape.constant(Tensor::vector({1.0, -1.0})), 2, 2,
                                 tape.constant(w), tape.constant(b));
    const double logits[4] = {0.1 - 0.4 + 0.05, 0.2 - 0.3, 0.3 - 0.2 - 0.05, 0.4 - 0.1 + 0.1};
    double z = 0.0;
    for (double l : logits) z += std::exp(l);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(g.matrix.value()[i], std::exp(logits[i]) / z, 1e-12);
}

TEST(Gating, NonPositiveExtentIsConfigError) {
    Tape tape;
    EXPECT_THROW(make_gating(tape.constant(Tensor({2})), 0, 2, tape.constant(Tensor({2, 1})),
                             tape.constant(Tensor({1}))),
                 ConfigError);
}

TEST(StructuredWeights, UniformMatrixFullK) {
    StructuredWeightValues w = structured_weights(Tensor::filled({2, 2}, 0.25), 2, 2, 4);
    for (const ExpertWeights* e : {&w.rows, &w.cols, &w.joint_rows, &w.joint_cols}) {
        EXPECT_EQ(e->indices, (std::vector<std::size_t>{0, 1}));
        EXPECT_NEAR(e->weights[0], 0.5, 1e-15);
        EXPECT_NEAR(e->weights[1], 0.5, 1e-15);
    }
}

TEST(StructuredWeights, DiagonalJointSelection) {
    StructuredWeightValues w = structured_weights(Tensor::matrix({{0.4, 0.1}, {0.1, 0.4}}), 1, 1, 2);
    EXPECT_EQ(w.joint_rows.indices, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(w.joint_cols.indices, (std::vector<std::size_t>{0, 1}));
    for (double v : w.joint_rows.weights) EXPECT_NEAR(v, 0.5, 1e-15);
    for (double v : w.joint_cols.weights) EXPECT_NEAR(v, 0.5, 1e-15);
    // Row means tie at 0.25; the lowest index wins.
    EXPECT_EQ(w.rows.indices, (std::vector<std::size_t>{0}));
    EXPECT_EQ(w.rows.weights, (std::vector<double>{1.0}));
}

TEST(StructuredWeights, ArgmaxEverywhereWithK1) {
    StructuredWeightValues w = structured_weights(Tensor::matrix({{0.7, 0.1}, {0.1, 0.1}}), 1, 1, 1);
    EXPECT_EQ(w.rows.indices, (std::vector<std::size_t>{0}));
    EXPECT_EQ(w.cols.indices, (std::vector<std::size_t>{0}));
    EXPECT_EQ(w.joint_rows.indices, (std::vector<std::size_t>{0}));
    EXPECT_EQ(w.joint_cols.indices, (std::vector<std::size_t>{0}));
    EXPECT_EQ(w.joint_rows.weights, (std::vector<double>{1.0}));
}

// Enumerate-all-entries oracle: with full k the marginals are exact row/column sums.
TEST(StructuredWeights, FullKIsLossless) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t rows = 1 + rng() % 5, cols = 1 + rng() % 5;
        Tensor logits = random_tensor({rows, cols}, rng, -2, 2);
        Tape tape;
        Var w = numerics::softmax_all(tape.constant(logits));
        StructuredWeightValues s = structured_weights(w.value(), rows, cols, rows * cols);
        for (std::size_t r = 0; r < rows; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < cols; ++c) sum += w.value()[r * cols + c];
            EXPECT_NEAR(s.rows.weight_of(r), sum, 1e-12);
            EXPECT_NEAR(s.joint_rows.weight_of(r), sum, 1e-12);
        }
        for (std::size_t c = 0; c < cols; ++c) {
            double sum = 0.0;
            for (std::size_t r = 0; r < rows; ++r) sum += w.value()[r * cols + c];
            EXPECT_NEAR(s.cols.weight_of(c), sum, 1e-12);
            EXPECT_NEAR(s.joint_cols.weight_of(c), sum, 1e-12);
        }
    }
}

TEST(StructuredWeights, SparseAndConvexForRandomMatrices) {
    std::mt19937_64 rng(22);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t rows = 1 + rng() % 8, cols = 1 + rng() % 8;
        const std::size_t k = 1 + rng() % std::min(rows, cols);
        const std::size_t kj = 1 + rng() % (rows * cols);
        Tape tape;
        Var w = numerics::softmax_all(tape.constant(random_tensor({rows, cols}, rng, -3, 3)));
        StructuredWeightValues s = structured_weights(w.value(), k, k, kj);
        for (const ExpertWeights* e : {&s.rows, &s.cols, &s.joint_rows, &s.joint_cols}) {
            EXPECT_NEAR(e->total(), 1.0, 1e-9);
            for (double v : e->weights) EXPECT_GE(v, 0.0);
        }
        EXPECT_LE(s.rows.indices.size(), k);
        EXPECT_LE(s.cols.indices.size(), k);
        EXPECT_LE(s.joint_rows.indices.size(), kj);
        EXPECT_LE(s.joint_cols.indices.size(), kj);
    }
}

TEST(MixExperts, SingleExpertEqualsPlainMlp) {
    std::mt19937_64 rng(5);
    ParameterSet params;
    add_expert_parameters(params, "e.0", {4, 8}, rng);
    add_expert_parameters(params, "e.1", {4, 8}, rng);
    Tape tape(&params);
    Var x = tape.constant(random_tensor({3, 4}, rng));
    RoutedWeights w{{1}, tape.constant(Tensor::vector({1.0})), false};
    Var mixed = mix_experts(tape, w, pool_prefixes("e", 2), x);
    Var plain = expert_forward(tape, "e.1", x);
    EXPECT_TRUE(numerics::bit_equal(mixed.value(), plain.value()));
}

TEST(MixExperts, IdenticalExpertsAreConvex) {
    std::mt19937_64 rng(6);
    ParameterSet params;
    add_expert_parameters(params, "e.0", {4, 8}, rng);
    for (const char* n : {".w1", ".b1", ".w2", ".b2"}) params.add(std::string("e.1") + n, params.at(std::string("e.0") + n));
    Tape tape(&params);
    Var x = tape.constant(random_tensor({4}, rng));
    RoutedWeights w{{0, 1}, tape.constant(Tensor::vector({0.5, 0.5})), false};
    Var mixed = mix_experts(tape, w, pool_prefixes("e", 2), x);
    Var single = expert_forward(tape, "e.0", x);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(mixed.value()[i], single.value()[i], 1e-15);
}

TEST(MixExperts, ScalarExpertsByHand) {
    ParameterSet params;
    set_scalar_expert(params, "e.0", 2.0, 0.0, 3.0, 1.0);    // x=1.5 -> 3*relu(3)+1 = 10
    set_scalar_expert(params, "e.1", -1.0, 2.0, 0.5, -1.0);  // x=1.5 -> 0.5*relu(0.5)-1 = -0.75
    Tape tape(&params);
    RoutedWeights w{{0, 1}, tape.constant(Tensor::vector({0.25, 0.75})), false};
    Var mixed = mix_experts(tape, w, pool_prefixes("e", 2), tape.constant(Tensor::vector({1.5})));
    EXPECT_NEAR(mixed.item(), 0.25 * 10.0 + 0.75 * -0.75, 1e-15);
}

TEST(MixExperts, WidthMismatchIsShapeError) {
    std::mt19937_64 rng(7);
    ParameterSet params;
    add_expert_parameters(params, "e.0", {4, 8}, rng);
    Tape tape(&params);
    RoutedWeights w{{0}, tape.constant(Tensor::vector({1.0})), false};
    EXPECT_THROW(mix_experts(tape, w, pool_prefixes("e", 1), tape.constant(Tensor({3}))), ShapeError);
}

TEST(MixExperts, UnselectedExpertsGetNoGradient) {
    std::mt19937_64 rng(8);
    ParameterSet params;
    for (int j = 0; j < 4; ++j) add_expert_parameters(params, "e." + std::to_string(j), {3, 5}, rng);
    params.add("scores", Tensor::vector({0.1, 0.4, 0.2, 0.3}));
    Tape tape(&params);
    RoutedWeights w = topk_renorm(tape.parameter("scores"), 2);
    Var out = mix_experts(tape, w, pool_prefixes("e", 4), tape.constant(random_tensor({3}, rng)));
    tape.backward(numerics::sum_all(numerics::mul(out, out)));
    auto grads = tape.parameter_grads();
    for (const char* n : {".w1", ".b1", ".w2", ".b2"}) {
        for (int j : {0, 2}) {
            for (double g : grads.at("e." + std::to_string(j) + n).values()) EXPECT_EQ(g, 0.0);
        }
    }
    const Tensor& gs = grads.at("scores");
    EXPECT_EQ(gs[0], 0.0);
    EXPECT_EQ(gs[2], 0.0);
    EXPECT_NE(gs[1], 0.0);
}

TEST(VanillaMoe, UniformGateWithFullKAverages) {
    std::mt19937_64 rng(9);
    ParameterSet params;
    for (int j = 0; j < 3; ++j) add_expert_parameters(params, "e." + std::to_string(j), {4, 6}, rng);
    Tape tape(&params);
    Var x = tape.constant(random_tensor({4}, rng));
    VanillaResult r = vanilla_moe(tape, tape.constant(random_tensor({4}, rng)),
                                  tape.constant(Tensor({4, 3})), tape.constant(Tensor({3})),
                                  pool_prefixes("e", 3), x, 3);
    for (std::size_t i = 0; i < 4; ++i) {
        double mean = 0.0;
        for (int j = 0; j < 3; ++j) mean += expert_forward(tape, "e." + std::to_string(j), x).value()[i];
        EXPECT_NEAR(r.output.value()[i], mean / 3.0, 1e-12);
    }
}

TEST(VanillaMoe, ReducesToMixExpertsWithSameWeights) {
    std::mt19937_64 rng(10);
    ParameterSet params;
    for (int j = 0; j < 4; ++j) add_expert_parameters(params, "e." + std::to_string(j), {4, 6}, rng);
    Tape tape(&params);
    Var x = tape.constant(random_tensor({4}, rng));
    VanillaResult r = vanilla_moe(tape, tape.constant(random_tensor({4}, rng)),
                                  tape.constant(random_tensor({4, 4}, rng)),
                                  tape.constant(random_tensor({4}, rng)), pool_prefixes("e", 4), x, 2);
    Var direct = mix_experts(tape, r.weights, pool_prefixes("e", 4), x);
    EXPECT_TRUE(numerics::bit_equal(direct.value(), r.output.value()));
}

#include "eduvqa/moe.hpp"

#include <algorithm>
#include <map>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "eduvqa/errors.hpp"

namespace eduvqa::moe {

using numerics::Shape;

double ExpertWeights::total() const { return numerics::ordered_sum(weights); }

double ExpertWeights::weight_of(std::size_t id) const {
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] == id) return weights[i];
    }
    return 0.0;
}

ExpertWeights RoutedWeights::values() const {
    const Tensor& w = weights.value();
    return ExpertWeights{indices, w.data(), degenerate};
}

std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
    if (k == 0 || k > scores.size()) {
        throw ConfigError("TopK needs 1 <= k <= " + std::to_string(scores.size()) + ", got k=" +
                          std::to_string(k));
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

namespace {

void check_scores(std::span<const double> scores, std::size_t k) {
    if (k == 0 || k > scores.size()) {
        throw ConfigError("TopK needs 1 <= k <= " + std::to_string(scores.size()) + ", got k=" +
                          std::to_string(k));
    }
    for (double s : scores) {
        if (!(s >= 0.0) || !std::isfinite(s)) {
            throw ConfigError("TopK scores must be finite and non-negative");
        }
    }
}

bool all_zero(std::span<const double> scores) {
    return std::all_of(scores.begin(), scores.end(), [](double s) { return s == 0.0; });
}

std::vector<std::size_t> first_k(std::size_t k) {
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

// Sums `selected` flattened entries of a rows x cols matrix onto one axis.
RoutedWeights marginalize(Var kept, Var total,
                          const std::vector<std::size_t>& selected, std::size_t cols,
                          bool onto_rows) {
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t pos = 0; pos < selected.size(); ++pos) {
        const std::size_t entry = selected[pos];
        groups[onto_rows ? entry / cols : entry % cols].push_back(pos);
    }
    RoutedWeights out;
    std::vector<Var> sums;
    for (const auto& [axis_id, positions] : groups) {
        out.indices.push_back(axis_id);
        sums.push_back(numerics::sum_all(numerics::gather(kept, positions)));
    }
    out.weights = numerics::div_scalar(numerics::reshape(numerics::stack(sums), {sums.size()}),
                                       total);
    return out;
}

}  // namespace

ExpertWeights topk_renorm(std::span<const double> scores, std::size_t k) {
    check_scores(scores, k);
    ExpertWeights out;
    if (all_zero(scores)) {
        spdlog::warn("TopK over all-zero scores; using uniform weights over the first {} experts", k);
        out.indices = first_k(k);
        out.weights.assign(k, 1.0 / static_cast<double>(k));
        out.degenerate = true;
        return out;
    }
    out.indices = topk_indices(scores, k);
    std::vector<double> kept;
    for (std::size_t i : out.indices) kept.push_back(scores[i]);
    const double total = numerics::ordered_sum(kept);
    for (double v : kept) out.weights.push_back(v / total);
    return out;
}

RoutedWeights topk_renorm(Var scores, std::size_t k) {
    Tape& tape = scores.tape();
    const Tensor& values = scores.value();
    if (values.rank() != 1) throw ShapeError("TopK expects a 1-D score vector");
    check_scores(values.values(), k);
    RoutedWeights out;
    if (all_zero(values.values())) {
        spdlog::warn("TopK over all-zero scores; using uniform weights over the first {} experts", k);
        out.indices = first_k(k);
        out.weights = tape.constant(Tensor::filled({k}, 1.0 / static_cast<double>(k)));
        out.degenerate = true;
        return out;
    }
    out.indices = topk_indices(values.values(), k);
    Var kept = numerics::gather(scores, out.indices);
    out.weights = numerics::div_scalar(kept, numerics::sum_all(kept));
    return out;
}

GatingMatrix make_gating(Var context, std::size_t rows, std::size_t cols, Var weight, Var bias) {
    if (rows == 0 || cols == 0) throw ConfigError("gating matrix needs positive rows and cols");
    if (context.value().rank() != 1) throw ShapeError("gating context must be a vector");
    if (weight.shape() != Shape{context.size(), rows * cols}) {
        throw ShapeError("gating weight " + numerics::shape_to_string(weight.shape()) +
                         " does not map " + std::to_string(context.size()) + " channels to " +
                         std::to_string(rows * cols) + " logits");
    }
    Var logits = numerics::linear(context, weight, bias);
    Var probs = numerics::softmax_all(numerics::reshape(logits, {rows, cols}));
    return GatingMatrix{probs, rows, cols};
}

GatingMatrix make_row_gating(Var contexts, std::size_t cols, Var weight, Var bias) {
    if (cols == 0) throw ConfigError("gating matrix needs positive cols");
    if (contexts.value().rank() != 2) throw ShapeError("row gating contexts must be [rows, C]");
    const std::size_t rows = contexts.shape()[0];
    Var logits = numerics::linear(contexts, weight, bias);
    if (logits.shape() != Shape{rows, cols}) throw ShapeError("row gating weight has wrong width");
    return GatingMatrix{numerics::softmax_all(logits), rows, cols};
}

StructuredWeights structured_weights(const GatingMatrix& gating, std::size_t k_rows,
                                     std::size_t k_cols, std::size_t k_joint) {
    if (gating.matrix.shape() != Shape{gating.rows, gating.cols}) {
        throw ShapeError("gating matrix shape does not match its declared extents");
    }
    StructuredWeights out;
    out.rows = topk_renorm(numerics::mean_pool(gating.matrix, {1}), k_rows);
    out.cols = topk_renorm(numerics::mean_pool(gating.matrix, {0}), k_cols);

    Var flat = numerics::reshape(gating.matrix, {gating.rows * gating.cols});
    if (all_zero(flat.value().values())) {
        throw DegenerateInputError("gating matrix has no mass");
    }
    out.joint_entries = topk_indices(flat.value().values(), k_joint);
    Var kept = numerics::gather(flat, out.joint_entries);
    Var total = numerics::sum_all(kept);
    out.joint_rows = marginalize(kept, total, out.joint_entries, gating.cols, true);
    out.joint_cols = marginalize(kept, total, out.joint_entries, gating.cols, false);
    return out;
}

StructuredWeightValues structured_weights(const Tensor& matrix, std::size_t k_rows,
                                          std::size_t k_cols, std::size_t k_joint) {
    if (matrix.rank() != 2) throw ShapeError("structured weights need a matrix");
    Tape tape;
    GatingMatrix g{tape.constant(matrix), matrix.shape()[0], matrix.shape()[1]};
    StructuredWeights w = structured_weights(g, k_rows, k_cols, k_joint);
    return {w.rows.values(), w.cols.values(), w.joint_rows.values(), w.joint_cols.values()};
}

void add_expert_parameters(ParameterSet& params, const std::string& prefix, ExpertShape shape,
                           std::mt19937_64& rng) {
    if (shape.channels == 0 || shape.hidden == 0) throw ConfigError("expert widths must be positive");
    auto init = [&](std::size_t fan_in, std::size_t fan_out) {
        std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        std::vector<double> v(fan_in * fan_out);
        for (double& x : v) x = dist(rng);
        return Tensor({fan_in, fan_out}, std::move(v));
    };
    params.add(prefix + ".w1", init(shape.channels, shape.hidden));
    params.add(prefix + ".b1", Tensor({shape.hidden}));
    params.add(prefix + ".w2", init(shape.hidden, shape.channels));
    params.add(prefix + ".b2", Tensor({shape.channels}));
}

Var expert_forward(Tape& tape, const std::string& prefix, Var x) {
    Var w1 = tape.parameter(prefix + ".w1");
    if (x.shape().empty() || x.shape().back() != w1.shape()[0]) {
        throw ShapeError("expert '" + prefix + "' expects width " + std::to_string(w1.shape()[0]) +
                         ", got input " + numerics::shape_to_string(x.shape()));
    }
    Var h = numerics::relu(numerics::linear(x, w1, tape.parameter(prefix + ".b1")));
    return numerics::linear(h, tape.parameter(prefix + ".w2"), tape.parameter(prefix + ".b2"));
}

std::vector<std::string> pool_prefixes(const std::string& base, std::size_t count) {
    std::vector<std::string> out;
    for (std::size_t j = 0; j < count; ++j) out.push_back(base + "." + std::to_string(j));
    return out;
}

Var mix_experts(Tape& tape, const RoutedWeights& weights, const std::vector<std::string>& pool,
                Var x) {
    if (weights.indices.empty()) throw ConfigError("mixture with no selected experts");
    std::vector<Var> outputs;
    for (std::size_t id : weights.indices) {
        if (id >= pool.size()) {
            throw ConfigError("expert id " + std::to_string(id) + " outside pool of " +
                              std::to_string(pool.size()));
        }
        outputs.push_back(expert_forward(tape, pool[id], x));
    }
    return numerics::weighted_sum(outputs, weights.weights);
}

VanillaResult vanilla_moe(Tape& tape, Var context, Var gate_weight, Var gate_bias,
                          const std::vector<std::string>& pool, Var x, std::size_t k) {
    Var probs = numerics::softmax(numerics::linear(context, gate_weight, gate_bias), 0);
    if (probs.size() != pool.size()) throw ShapeError("vanilla gate width differs from pool size");
    RoutedWeights routed = topk_renorm(probs, k);
    return {mix_experts(tape, routed, pool, x), routed};
}

}  // namespace eduvqa::moe

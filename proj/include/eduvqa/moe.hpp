#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "eduvqa/autodiff.hpp"

namespace eduvqa::moe {

using numerics::ParameterSet;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

/// A sparse convex combination over an expert pool, as plain numbers.
struct ExpertWeights {
    std::vector<std::size_t> indices;  // ascending expert ids
    std::vector<double> weights;       // aligned with indices
    bool degenerate = false;           // all scores were zero

    double total() const;
    /// Weight of expert `id`, 0 when not selected.
    double weight_of(std::size_t id) const;
};

/// ExpertWeights whose weights live on a tape so gradients reach the gate.
struct RoutedWeights {
    std::vector<std::size_t> indices;
    Var weights;  // shape [indices.size()]
    bool degenerate = false;

    ExpertWeights values() const;
};

/// Indices of the k largest scores; ties go to the lowest index. Returned ascending.
std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k);

/// Keep the k largest scores, zero the rest, renormalize the kept ones to sum to 1.
/// All-zero scores fall back to uniform weights over the first k indices.
ExpertWeights topk_renorm(std::span<const double> scores, std::size_t k);
RoutedWeights topk_renorm(Var scores, std::size_t k);

/// Softmax-normalized routing matrix (entries >= 0, total mass 1).
struct GatingMatrix {
    Var matrix;  // [rows, cols]
    std::size_t rows = 0;
    std::size_t cols = 0;
};

/// Single linear layer from a context vector [C] to rows*cols logits, softmax over all entries.
GatingMatrix make_gating(Var context, std::size_t rows, std::size_t cols, Var weight, Var bias);

/// One row of logits per context row: contexts [R, C] -> [R, cols], softmax over all entries.
GatingMatrix make_row_gating(Var contexts, std::size_t cols, Var weight, Var bias);

/// Routing derived from one 2D gating matrix.
struct StructuredWeights {
    RoutedWeights rows;           // TopK of row means (spatial experts)
    RoutedWeights cols;           // TopK of column means (temporal experts)
    RoutedWeights joint_rows;     // joint TopK entries, marginalized onto rows
    RoutedWeights joint_cols;     // joint TopK entries, marginalized onto columns
    std::vector<std::size_t> joint_entries;  // flattened ids of the selected entries
};

StructuredWeights structured_weights(const GatingMatrix& gating, std::size_t k_rows,
                                     std::size_t k_cols, std::size_t k_joint);

/// Plain-value variant used by tooling and tests; `matrix` must be rank 2.
struct StructuredWeightValues {
    ExpertWeights rows, cols, joint_rows, joint_cols;
};
StructuredWeightValues structured_weights(const Tensor& matrix, std::size_t k_rows,
                                          std::size_t k_cols, std::size_t k_joint);

/// Two-layer ReLU MLP with parameters `<prefix>.w1/.b1/.w2/.b2`; width in == width out.
struct ExpertShape {
    std::size_t channels = 0;
    std::size_t hidden = 0;
};

void add_expert_parameters(ParameterSet& params, const std::string& prefix, ExpertShape shape,
                           std::mt19937_64& rng);
/// Applies the expert over the last axis of `x`.
Var expert_forward(Tape& tape, const std::string& prefix, Var x);

/// Names of an expert pool, e.g. "percept.spatial.0" ... "percept.spatial.7".
std::vector<std::string> pool_prefixes(const std::string& base, std::size_t count);

/// sum_j w_j E_j(x) over the selected experts only.
Var mix_experts(Tape& tape, const RoutedWeights& weights, const std::vector<std::string>& pool,
                Var x);

struct VanillaResult {
    Var output;
    RoutedWeights weights;
};

/// Conventional 1D MoE: softmax(linear(context)) over one expert axis, TopK, mix.
VanillaResult vanilla_moe(Tape& tape, Var context, Var gate_weight, Var gate_bias,
                          const std::vector<std::string>& pool, Var x, std::size_t k);

}  // namespace eduvqa::moe

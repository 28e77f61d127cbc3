#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eduvqa/autodiff.hpp"
#include "eduvqa/moe.hpp"

namespace eduvqa::model {

using numerics::ParameterSet;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

/// Architecture hyperparameters. `tokens` counts the token axis including the
/// sentence slot at position 0, so a sample carries tokens - 1 word positions.
struct ModelConfig {
    std::size_t frames = 4;
    std::size_t height = 4;
    std::size_t width = 4;
    std::size_t tokens = 8;
    std::size_t channels = 16;

    std::size_t spatial_experts = 8;
    std::size_t temporal_experts = 8;
    std::size_t alignment_experts = 8;
    std::size_t top_k = 2;
    std::size_t joint_top_k = 2;
    std::size_t expert_hidden = 0;  // 0 selects 2 * channels
    std::size_t attention_heads = 1;

    bool fusion = true;
    bool perceptual_moe = true;
    bool alignment_moe = true;
    bool st_heads = true;
    bool wl_heads = true;
    bool vanilla_moe = false;

    numerics::DType dtype = numerics::DType::f32;

    void validate() const;
    std::size_t hidden() const { return expert_hidden ? expert_hidden : 2 * channels; }
    std::size_t words() const { return tokens - 1; }
    /// Expert pool sizes actually instantiated (1 when a path's MoE is disabled).
    std::size_t spatial_pool() const { return perceptual_moe ? spatial_experts : 1; }
    std::size_t temporal_pool() const { return perceptual_moe ? temporal_experts : 1; }
    std::size_t alignment_pool() const { return alignment_moe ? alignment_experts : 1; }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

/// Ablation rows 1-7: fusion / MoE (vanilla, perceptual, alignment) / sub-dimension heads.
ModelConfig ablation_config(int id, ModelConfig base = {});

/// Precomputed backbone features for one video.
struct SampleFeatures {
    Tensor vst;                       // [T, H, W, C]
    Tensor blip;                      // [T, tokens, C]
    std::vector<std::uint8_t> word_mask;  // [tokens - 1], 1 = real word token
};

/// One routed mixture evaluated during a forward pass.
struct MixtureTrace {
    std::string name;  // "spatial", "temporal", "overall_spatial", "overall_temporal", "word[i]", "sentence"
    std::string pool;  // parameter prefix of the expert pool
    moe::ExpertWeights weights;
};

struct PredictionVars {
    std::optional<Var> spatial;
    std::optional<Var> temporal;
    Var overall;
    std::optional<Var> word;  // [tokens - 1]; masked positions hold 0
    Var sentence;
    std::vector<MixtureTrace> mixtures;
};

struct PredictionBundle {
    std::optional<double> spatial;
    std::optional<double> temporal;
    double overall = 0.0;
    std::vector<double> word;            // empty when word heads are off
    std::vector<std::uint8_t> word_mask;
    double sentence = 0.0;
    std::vector<MixtureTrace> mixtures;
};

ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed);

/// Frame-synchronized cross-attention: frame t of `query` [T, Lq, C] attends
/// over frame t of `kv` [T, Lk, C]; output LayerNorm(query + softmax(QK^T/sqrt(C)) V).
Var cross_attention(Tape& tape, const std::string& prefix, Var query, Var kv,
                    bool normalize = true);

struct PerceptualOutputs {
    std::optional<Var> spatial, temporal;
    Var overall;
};

PerceptualOutputs perceptual_forward(Tape& tape, const ModelConfig& config, Var features,
                                     std::vector<MixtureTrace>* trace = nullptr);

struct AlignmentOutputs {
    std::optional<Var> word;
    Var sentence;
};

AlignmentOutputs alignment_forward(Tape& tape, const ModelConfig& config, Var features,
                                   const std::vector<std::uint8_t>& word_mask,
                                   std::vector<MixtureTrace>* trace = nullptr);

class EduVqaModel {
public:
    EduVqaModel(ModelConfig config, ParameterSet params);
    static EduVqaModel initialize(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }
    const ParameterSet& params() const noexcept { return params_; }
    ParameterSet& params() noexcept { return params_; }

    /// Records the forward pass on `tape`, which must be bound to params().
    PredictionVars forward(Tape& tape, const SampleFeatures& sample) const;
    PredictionBundle predict(const SampleFeatures& sample) const;

private:
    ModelConfig config_;
    ParameterSet params_;
};

PredictionBundle to_bundle(const PredictionVars& vars, const std::vector<std::uint8_t>& mask);

}  // namespace eduvqa::model

#pragma once

#include <random>

#include "eduvqa/model.hpp"

namespace eduvqa::testing {

using numerics::Shape;
using numerics::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(numerics::shape_size(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

// T=2, H=W=2, C=4, D=3, M=N=Z=2 in float64.
inline model::ModelConfig micro_config(std::size_t k = 1) {
    model::ModelConfig c;
    c.frames = 2;
    c.height = 2;
    c.width = 2;
    c.tokens = 3;
    c.channels = 4;
    c.spatial_experts = c.temporal_experts = c.alignment_experts = 2;
    c.top_k = k;
    c.joint_top_k = k;
    c.expert_hidden = 6;
    c.dtype = numerics::DType::f64;
    return c;
}

inline model::SampleFeatures random_sample(const model::ModelConfig& c, std::mt19937_64& rng,
                                           bool full_mask = false) {
    model::SampleFeatures s;
    s.vst = random_tensor({c.frames, c.height, c.width, c.channels}, rng);
    s.blip = random_tensor({c.frames, c.tokens, c.channels}, rng);
    s.word_mask.assign(c.words(), 1);
    if (!full_mask && c.words() > 1) {
        for (auto& m : s.word_mask) m = static_cast<std::uint8_t>(rng() % 4 != 0);
        s.word_mask[rng() % c.words()] = 1;
    }
    return s;
}

// Replaces every parameter with uniform noise so biases and norms are exercised.
inline void randomize(numerics::ParameterSet& p, std::mt19937_64& rng, double scale = 0.8) {
    std::uniform_real_distribution<double> dist(-scale, scale);
    for (auto& [name, t] : p) {
        for (double& v : t.values()) v = dist(rng);
    }
}

}  // namespace eduvqa::testing

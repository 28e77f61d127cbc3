#include "eduvqa/model.hpp"

#include <cmath>
#include <random>

#include "eduvqa/errors.hpp"

namespace eduvqa::model {

using numerics::Shape;
namespace nx = numerics;

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(frames, "frames");
    positive(height, "height");
    positive(width, "width");
    positive(channels, "channels");
    positive(spatial_experts, "spatial_experts");
    positive(temporal_experts, "temporal_experts");
    positive(alignment_experts, "alignment_experts");
    positive(top_k, "top_k");
    positive(joint_top_k, "joint_top_k");
    if (tokens < 2) throw ConfigError("tokens must include the sentence slot and at least one word");
    if (attention_heads != 1) throw ConfigError("only single-head cross-attention is supported");
    if (perceptual_moe) {
        if (top_k > std::min(spatial_experts, temporal_experts)) {
            throw ConfigError("top_k exceeds the perceptual expert count");
        }
        if (joint_top_k > spatial_experts * temporal_experts) {
            throw ConfigError("joint_top_k exceeds spatial_experts * temporal_experts");
        }
    }
    if (alignment_moe && top_k > alignment_experts) {
        throw ConfigError("top_k exceeds the alignment expert count");
    }
    if (vanilla_moe && !perceptual_moe && !alignment_moe) {
        throw ConfigError("vanilla_moe needs at least one MoE path enabled");
    }
}

nlohmann::json ModelConfig::to_json() const {
    return {{"frames", frames},
            {"height", height},
            {"width", width},
            {"tokens", tokens},
            {"channels", channels},
            {"spatial_experts", spatial_experts},
            {"temporal_experts", temporal_experts},
            {"alignment_experts", alignment_experts},
            {"top_k", top_k},
            {"joint_top_k", joint_top_k},
            {"expert_hidden", expert_hidden},
            {"attention_heads", attention_heads},
            {"fusion", fusion},
            {"perceptual_moe", perceptual_moe},
            {"alignment_moe", alignment_moe},
            {"st_heads", st_heads},
            {"wl_heads", wl_heads},
            {"vanilla_moe", vanilla_moe},
            {"dtype", nx::dtype_name(dtype)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "frames") c.frames = value.get<std::size_t>();
        else if (key == "height") c.height = value.get<std::size_t>();
        else if (key == "width") c.width = value.get<std::size_t>();
        else if (key == "tokens") c.tokens = value.get<std::size_t>();
        else if (key == "channels") c.channels = value.get<std::size_t>();
        else if (key == "spatial_experts") c.spatial_experts = value.get<std::size_t>();
        else if (key == "temporal_experts") c.temporal_experts = value.get<std::size_t>();
        else if (key == "alignment_experts") c.alignment_experts = value.get<std::size_t>();
        else if (key == "top_k") c.top_k = value.get<std::size_t>();
        else if (key == "joint_top_k") c.joint_top_k = value.get<std::size_t>();
        else if (key == "expert_hidden") c.expert_hidden = value.get<std::size_t>();
        else if (key == "attention_heads") c.attention_heads = value.get<std::size_t>();
        else if (key == "fusion") c.fusion = value.get<bool>();
        else if (key == "perceptual_moe") c.perceptual_moe = value.get<bool>();
        else if (key == "alignment_moe") c.alignment_moe = value.get<bool>();
        else if (key == "st_heads") c.st_heads = value.get<bool>();
        else if (key == "wl_heads") c.wl_heads = value.get<bool>();
        else if (key == "vanilla_moe") c.vanilla_moe = value.get<bool>();
        else if (key == "dtype") c.dtype = nx::parse_dtype(value.get<std::string>());
        else throw ConfigError("unknown model config key '" + key + "'");
    }
    return c;
}

ModelConfig ablation_config(int id, ModelConfig base) {
    struct Row {
        bool fusion, vanilla, per, aln, st, wl;
    };
    static constexpr Row rows[] = {
        {false, false, false, false, false, false},  // 1
        {true, false, false, false, false, false},   // 2
        {true, false, false, false, true, true},     // 3
        {true, false, false, true, false, true},     // 4
        {true, false, true, false, true, false},     // 5
        {true, true, true, true, true, true},        // 6
        {true, false, true, true, true, true},       // 7
    };
    if (id < 1 || id > 7) throw ConfigError("ablation id must be in 1..7");
    const Row& r = rows[id - 1];
    base.fusion = r.fusion;
    base.vanilla_moe = r.vanilla;
    base.perceptual_moe = r.per;
    base.alignment_moe = r.aln;
    base.st_heads = r.st;
    base.wl_heads = r.wl;
    return base;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(nx::shape_size(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

void add_linear(ParameterSet& p, const std::string& prefix, std::size_t in, std::size_t out,
                std::mt19937_64& rng, double gain = 1.0) {
    p.add(prefix + ".w", gaussian({in, out}, gain / std::sqrt(static_cast<double>(in)), rng));
    p.add(prefix + ".b", Tensor({out}));
}

void add_attention(ParameterSet& p, const std::string& prefix, std::size_t c,
                   std::mt19937_64& rng) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(c));
    p.add(prefix + ".wq", gaussian({c, c}, sd, rng));
    p.add(prefix + ".wk", gaussian({c, c}, sd, rng));
    p.add(prefix + ".wv", gaussian({c, c}, sd, rng));
    p.add(prefix + ".ln_gamma", Tensor::filled({c}, 1.0));
    p.add(prefix + ".ln_beta", Tensor({c}));
}

ParameterSet with_dtype(ParameterSet params, nx::DType dtype) {
    ParameterSet out;
    for (auto& [name, t] : params) out.add(name, t.as_dtype(dtype));
    return out;
}

}  // namespace

ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    ParameterSet p;
    const std::size_t c = config.channels;
    const moe::ExpertShape expert{c, config.hidden()};

    if (config.fusion) {
        add_attention(p, "fusion.percept", c, rng);
        add_attention(p, "fusion.align", c, rng);
    }

    // Perceptual path.
    if (config.perceptual_moe) {
        const std::size_t m = config.spatial_experts, n = config.temporal_experts;
        if (config.vanilla_moe) {
            add_linear(p, "percept.gate_overall_spatial", c, m, rng);
            add_linear(p, "percept.gate_overall_temporal", c, n, rng);
            if (config.st_heads) {
                add_linear(p, "percept.gate_spatial", c, m, rng);
                add_linear(p, "percept.gate_temporal", c, n, rng);
            }
        } else {
            add_linear(p, "percept.gate", c, m * n, rng);
        }
    }
    for (const auto& prefix : moe::pool_prefixes("percept.spatial", config.spatial_pool())) {
        moe::add_expert_parameters(p, prefix, expert, rng);
    }
    for (const auto& prefix : moe::pool_prefixes("percept.temporal", config.temporal_pool())) {
        moe::add_expert_parameters(p, prefix, expert, rng);
    }
    if (config.st_heads) {
        add_linear(p, "percept.head_spatial", c, 1, rng);
        add_linear(p, "percept.head_temporal", c, 1, rng);
    }
    add_linear(p, "percept.head_overall", 2 * c, 1, rng);

    // Alignment path.
    if (config.alignment_moe) {
        const std::size_t z = config.alignment_experts;
        if (config.vanilla_moe) {
            add_linear(p, "align.gate_sentence", c, z, rng);
            if (config.wl_heads) add_linear(p, "align.gate_word", c, z, rng);
        } else {
            add_linear(p, "align.gate", c, z, rng);
        }
    }
    for (const auto& prefix : moe::pool_prefixes("align.expert", config.alignment_pool())) {
        moe::add_expert_parameters(p, prefix, expert, rng);
    }
    if (config.wl_heads) add_linear(p, "align.head_word", c, 1, rng);
    add_linear(p, "align.head_sentence", c, 1, rng);

    return with_dtype(std::move(p), config.dtype);
}

// ---------------------------------------------------------------------------
// Forward pass

Var cross_attention(Tape& tape, const std::string& prefix, Var query, Var kv, bool normalize) {
    const Shape& qs = query.shape();
    const Shape& ks = kv.shape();
    if (qs.size() != 3 || ks.size() != 3) {
        throw ShapeError("cross_attention expects [T, L, C] operands, got " +
                         nx::shape_to_string(qs) + " and " + nx::shape_to_string(ks));
    }
    if (qs[0] != ks[0]) {
        throw ShapeError("cross_attention frame count mismatch: " + std::to_string(qs[0]) +
                         " vs " + std::to_string(ks[0]));
    }
    if (qs[2] != ks[2]) throw ShapeError("cross_attention channel mismatch");
    const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(qs[2]));
    Var q = nx::matmul(query, tape.parameter(prefix + ".wq"));
    Var k = nx::matmul(kv, tape.parameter(prefix + ".wk"));
    Var v = nx::matmul(kv, tape.parameter(prefix + ".wv"));
    Var scores = nx::scale(nx::matmul(q, nx::transpose_last2(k)), inv_sqrt_c);  // [T, Lq, Lk]
    Var attended = nx::matmul(nx::softmax(scores, 2), v);
    Var residual = nx::add(query, attended);
    if (!normalize) return residual;
    return nx::layer_norm(residual, tape.parameter(prefix + ".ln_gamma"),
                          tape.parameter(prefix + ".ln_beta"));
}

namespace {

moe::RoutedWeights single_expert(Tape& tape) {
    return moe::RoutedWeights{{0}, tape.constant(Tensor::vector({1.0})), false};
}

Var head(Tape& tape, const std::string& prefix, Var x) {
    return nx::reshape(nx::linear(x, tape.parameter(prefix + ".w"), tape.parameter(prefix + ".b")),
                       Shape{});
}

moe::RoutedWeights vanilla_route(Tape& tape, const std::string& gate, Var context, std::size_t k) {
    Var probs = nx::softmax(
        nx::linear(context, tape.parameter(gate + ".w"), tape.parameter(gate + ".b")), 0);
    return moe::topk_renorm(probs, k);
}

Var traced_mix(Tape& tape, const moe::RoutedWeights& route, const std::string& pool_name,
               std::size_t pool_size, Var x, const std::string& name,
               std::vector<MixtureTrace>* trace) {
    if (trace) trace->push_back({name, pool_name, route.values()});
    return moe::mix_experts(tape, route, moe::pool_prefixes(pool_name, pool_size), x);
}

}  // namespace

PerceptualOutputs perceptual_forward(Tape& tape, const ModelConfig& config, Var features,
                                     std::vector<MixtureTrace>* trace) {
    const Shape expected{config.frames, config.height, config.width, config.channels};
    if (features.shape() != expected) {
        throw ShapeError("perceptual features " + nx::shape_to_string(features.shape()) +
                         " do not match config " + nx::shape_to_string(expected));
    }
    nx::ScopeGuard scope(tape, "perceptual");
    const std::size_t m = config.spatial_pool(), n = config.temporal_pool(), k = config.top_k;
    Var pooled_all = nx::mean_pool(features, {0, 1, 2});  // [C]

    moe::RoutedWeights route_s, route_t, route_os, route_ot;
    if (config.perceptual_moe && !config.vanilla_moe) {
        tape.set_scope("perceptual/gating");
        moe::GatingMatrix gating =
            moe::make_gating(pooled_all, m, n, tape.parameter("percept.gate.w"),
                             tape.parameter("percept.gate.b"));
        moe::StructuredWeights sw = moe::structured_weights(gating, k, k, config.joint_top_k);
        route_s = sw.rows;
        route_t = sw.cols;
        route_os = sw.joint_rows;
        route_ot = sw.joint_cols;
    } else if (config.perceptual_moe) {
        tape.set_scope("perceptual/gating");
        route_os = vanilla_route(tape, "percept.gate_overall_spatial", pooled_all, k);
        route_ot = vanilla_route(tape, "percept.gate_overall_temporal", pooled_all, k);
        if (config.st_heads) {
            route_s = vanilla_route(tape, "percept.gate_spatial", pooled_all, k);
            route_t = vanilla_route(tape, "percept.gate_temporal", pooled_all, k);
        }
    } else {
        route_s = route_t = route_os = route_ot = single_expert(tape);
    }

    PerceptualOutputs out;
    if (config.st_heads) {
        tape.set_scope("perceptual/spatial");
        Var spatial_in = nx::mean_pool(features, {0});  // [H, W, C]
        Var spatial = nx::mean_pool(
            traced_mix(tape, route_s, "percept.spatial", m, spatial_in, "spatial", trace), {0, 1});
        out.spatial = head(tape, "percept.head_spatial", spatial);

        tape.set_scope("perceptual/temporal");
        Var temporal_in = nx::mean_pool(features, {1, 2});  // [T, C]
        Var temporal = nx::mean_pool(
            traced_mix(tape, route_t, "percept.temporal", n, temporal_in, "temporal", trace), {0});
        out.temporal = head(tape, "percept.head_temporal", temporal);
    }
    tape.set_scope("perceptual/overall");
    Var overall_s =
        traced_mix(tape, route_os, "percept.spatial", m, pooled_all, "overall_spatial", trace);
    Var overall_t =
        traced_mix(tape, route_ot, "percept.temporal", n, pooled_all, "overall_temporal", trace);
    out.overall = head(tape, "percept.head_overall", nx::concat({overall_s, overall_t}, 0));
    return out;
}

AlignmentOutputs alignment_forward(Tape& tape, const ModelConfig& config, Var features,
                                   const std::vector<std::uint8_t>& word_mask,
                                   std::vector<MixtureTrace>* trace) {
    const Shape expected{config.frames, config.tokens, config.channels};
    if (features.shape() != expected) {
        throw ShapeError("alignment features " + nx::shape_to_string(features.shape()) +
                         " do not match config " + nx::shape_to_string(expected));
    }
    if (word_mask.size() != config.words()) {
        throw ShapeError("word mask has " + std::to_string(word_mask.size()) + " entries, expected " +
                         std::to_string(config.words()));
    }
    std::vector<std::size_t> valid;  // token positions 1..tokens-1
    for (std::size_t i = 0; i < word_mask.size(); ++i) {
        if (word_mask[i]) valid.push_back(i + 1);
    }
    if (valid.empty()) throw DegenerateInputError("alignment path: token mask has no word tokens");

    nx::ScopeGuard scope(tape, "alignment");
    const std::size_t z = config.alignment_pool(), k = config.top_k;
    Var token_features = nx::mean_pool(features, {0});  // [tokens, C]
    Var sentence_feature = nx::select(token_features, 0, 0);
    std::vector<Var> word_features;
    for (std::size_t pos : valid) word_features.push_back(nx::select(token_features, 0, pos));

    moe::RoutedWeights route_sentence;
    std::vector<moe::RoutedWeights> route_words(valid.size());
    if (config.alignment_moe && !config.vanilla_moe) {
        tape.set_scope("alignment/gating");
        moe::GatingMatrix gating =
            moe::make_row_gating(nx::stack(word_features), z, tape.parameter("align.gate.w"),
                                 tape.parameter("align.gate.b"));
        route_sentence = moe::topk_renorm(nx::mean_pool(gating.matrix, {0}), k);
        if (config.wl_heads) {
            for (std::size_t r = 0; r < valid.size(); ++r) {
                route_words[r] = moe::topk_renorm(nx::select(gating.matrix, 0, r), k);
            }
        }
    } else if (config.alignment_moe) {
        tape.set_scope("alignment/gating");
        route_sentence = vanilla_route(tape, "align.gate_sentence", sentence_feature, k);
        if (config.wl_heads) {
            for (std::size_t r = 0; r < valid.size(); ++r) {
                route_words[r] = vanilla_route(tape, "align.gate_word", word_features[r], k);
            }
        }
    } else {
        route_sentence = single_expert(tape);
        for (auto& r : route_words) r = single_expert(tape);
    }

    AlignmentOutputs out;
    tape.set_scope("alignment/sentence");
    out.sentence = head(tape, "align.head_sentence",
                        traced_mix(tape, route_sentence, "align.expert", z, sentence_feature,
                                   "sentence", trace));
    if (config.wl_heads) {
        tape.set_scope("alignment/word");
        std::vector<Var> scores(config.words());
        std::size_t r = 0;
        for (std::size_t i = 0; i < config.words(); ++i) {
            if (!word_mask[i]) {
                scores[i] = tape.constant(Tensor::scalar(0.0));
                continue;
            }
            scores[i] = head(tape, "align.head_word",
                             traced_mix(tape, route_words[r], "align.expert", z, word_features[r],
                                        "word[" + std::to_string(i + 1) + "]", trace));
            ++r;
        }
        out.word = nx::stack(scores);
    }
    return out;
}

EduVqaModel::EduVqaModel(ModelConfig config, ParameterSet params)
    : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
}

EduVqaModel EduVqaModel::initialize(const ModelConfig& config, std::uint64_t seed) {
    return EduVqaModel(config, init_parameters(config, seed));
}

PredictionVars EduVqaModel::forward(Tape& tape, const SampleFeatures& sample) const {
    const ModelConfig& c = config_;
    const Shape vst_shape{c.frames, c.height, c.width, c.channels};
    const Shape blip_shape{c.frames, c.tokens, c.channels};
    if (sample.vst.shape() != vst_shape) {
        throw ShapeError("video features " + nx::shape_to_string(sample.vst.shape()) +
                         " do not match config " + nx::shape_to_string(vst_shape));
    }
    if (sample.blip.shape() != blip_shape) {
        throw ShapeError("text-video features " + nx::shape_to_string(sample.blip.shape()) +
                         " do not match config " + nx::shape_to_string(blip_shape));
    }
    Var vst = tape.constant(sample.vst);
    Var blip = tape.constant(sample.blip);
    Var percept_in = vst;
    Var align_in = blip;
    if (c.fusion) {
        nx::ScopeGuard scope(tape, "fusion");
        Var video_tokens = nx::reshape(vst, {c.frames, c.height * c.width, c.channels});
        percept_in = nx::reshape(cross_attention(tape, "fusion.percept", video_tokens, blip),
                                 vst_shape);
        align_in = cross_attention(tape, "fusion.align", blip, video_tokens);
    }
    PredictionVars out;
    PerceptualOutputs p = perceptual_forward(tape, c, percept_in, &out.mixtures);
    AlignmentOutputs a = alignment_forward(tape, c, align_in, sample.word_mask, &out.mixtures);
    out.spatial = p.spatial;
    out.temporal = p.temporal;
    out.overall = p.overall;
    out.word = a.word;
    out.sentence = a.sentence;
    return out;
}

PredictionBundle to_bundle(const PredictionVars& vars, const std::vector<std::uint8_t>& mask) {
    PredictionBundle b;
    if (vars.spatial) b.spatial = vars.spatial->item();
    if (vars.temporal) b.temporal = vars.temporal->item();
    b.overall = vars.overall.item();
    if (vars.word) b.word = vars.word->value().data();
    b.word_mask = mask;
    b.sentence = vars.sentence.item();
    b.mixtures = vars.mixtures;
    return b;
}

PredictionBundle EduVqaModel::predict(const SampleFeatures& sample) const {
    Tape tape(&params_);
    return to_bundle(forward(tape, sample), sample.word_mask);
}

}  // namespace eduvqa::model

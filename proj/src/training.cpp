#include "eduvqa/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include <spdlog/spdlog.h>

#include "eduvqa/errors.hpp"
#include "eduvqa/evaluation.hpp"

namespace eduvqa::training {

namespace {

struct Centered {
    std::vector<double> dev;
    double norm = 0.0;
};

Centered center(std::span<const double> x) {
    Centered c;
    const double mu = numerics::ordered_sum(x) / static_cast<double>(x.size());
    double scale = 0.0;
    for (double v : x) {
        c.dev.push_back(v - mu);
        scale = std::max(scale, std::abs(v));
    }
    std::vector<double> sq;
    for (double d : c.dev) sq.push_back(d * d);
    c.norm = std::sqrt(numerics::ordered_sum(sq));
    // Spread at the level of rounding noise counts as none.
    if (c.norm <= 1e-12 * std::max(1.0, scale)) c.norm = 0.0;
    return c;
}

void check_lengths(std::size_t a, std::size_t b) {
    if (a != b) throw ShapeError("PLCC inputs differ in length: " + std::to_string(a) + " vs " + std::to_string(b));
    if (a < 2) throw DegenerateInputError("PLCC needs at least 2 samples");
}

}  // namespace

void LossWeights::validate() const {
    for (double w : {spatial, temporal, overall, word, sentence}) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and nonnegative");
    }
}

PlccValue plcc_value(std::span<const double> pred, std::span<const double> target) {
    check_lengths(pred.size(), target.size());
    const Centered p = center(pred), t = center(target);
    PlccValue out;
    if (p.norm == 0.0 || t.norm == 0.0) {
        out.degenerate = true;
        return out;
    }
    std::vector<double> prod;
    for (std::size_t i = 0; i < pred.size(); ++i) prod.push_back(p.dev[i] * t.dev[i]);
    out.r = std::clamp(numerics::ordered_sum(prod) / (p.norm * t.norm), -1.0, 1.0);
    out.loss = (1.0 - out.r) / 2.0;
    return out;
}

std::vector<double> plcc_gradient(std::span<const double> pred, std::span<const double> target) {
    check_lengths(pred.size(), target.size());
    const Centered p = center(pred), t = center(target);
    std::vector<double> g(pred.size(), 0.0);
    if (p.norm == 0.0 || t.norm == 0.0) return g;
    const double r = plcc_value(pred, target).r;
    // dr/dp_i = t_i / (|p||t|) - r p_i / |p|^2 with centered p, t; the centering
    // term vanishes because the deviations sum to zero.
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double dr = t.dev[i] / (p.norm * t.norm) - r * p.dev[i] / (p.norm * p.norm);
        g[i] = -0.5 * dr;
    }
    return g;
}

PlccTerm plcc_loss(Tape& tape, Var pred, std::span<const double> target) {
    if (pred.value().rank() != 1) throw ShapeError("PLCC prediction must be a vector");
    const std::vector<double> p(pred.value().values().begin(), pred.value().values().end());
    const std::vector<double> t(target.begin(), target.end());
    const PlccValue v = plcc_value(p, t);
    PlccTerm term;
    term.degenerate = v.degenerate;
    if (v.degenerate) {
        term.loss = tape.constant(Tensor::scalar(0.5));
        return term;
    }
    const std::size_t id = pred.id();
    term.loss = tape.record(Tensor::scalar(v.loss), "plcc_loss", {pred}, [id, p, t](Tape& tp, const Tensor& g) {
        const std::vector<double> d = plcc_gradient(p, t);
        Tensor gx({d.size()}, d);
        for (double& x : gx.values()) x *= g[0];
        tp.accumulate(id, gx);
    });
    return term;
}

LossReport total_loss(Tape& tape, const std::vector<model::PredictionVars>& preds,
                      const std::vector<QualityLabels>& labels,
                      const std::vector<std::vector<std::uint8_t>>& masks, const LossWeights& weights) {
    weights.validate();
    if (preds.size() != labels.size() || preds.size() != masks.size()) {
        throw ShapeError("total_loss: predictions, labels and masks differ in count");
    }
    if (preds.size() < 2) throw DegenerateInputError("total_loss needs a batch of at least 2");
    LossReport report;
    std::vector<Var> parts;

    auto add_term = [&](const std::string& name, double weight, auto pick, auto target) {
        if (weight == 0.0) return;
        std::vector<Var> p;
        std::vector<double> t;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const std::optional<Var> v = pick(preds[i]);
            if (!v) return;  // the model has no head for this term
            p.push_back(*v);
            t.push_back(target(labels[i]));
        }
        const PlccTerm term = plcc_loss(tape, numerics::stack(p), t);
        report.terms[name] = term.loss.item();
        report.degenerate_terms += term.degenerate;
        parts.push_back(numerics::scale(term.loss, weight));
    };
    add_term("spatial", weights.spatial, [](const auto& p) { return p.spatial; },
             [](const QualityLabels& l) { return l.spatial; });
    add_term("temporal", weights.temporal, [](const auto& p) { return p.temporal; },
             [](const QualityLabels& l) { return l.temporal; });
    add_term("overall_percept", weights.overall, [](const auto& p) { return std::optional<Var>(p.overall); },
             [](const QualityLabels& l) { return l.overall_percept; });
    add_term("sentence", weights.sentence, [](const auto& p) { return std::optional<Var>(p.sentence); },
             [](const QualityLabels& l) { return l.sentence; });

    if (weights.word > 0.0 && std::all_of(preds.begin(), preds.end(), [](const auto& p) { return p.word.has_value(); })) {
        const std::size_t words = masks.front().size();
        std::vector<Var> position_losses;
        for (std::size_t pos = 0; pos < words; ++pos) {
            std::vector<Var> p;
            std::vector<double> t;
            for (std::size_t i = 0; i < preds.size(); ++i) {
                if (masks[i].size() != words || labels[i].word.size() != words) {
                    throw ShapeError("total_loss: word masks and labels must share one length");
                }
                if (!masks[i][pos]) continue;
                p.push_back(numerics::select(*preds[i].word, 0, pos));
                t.push_back(labels[i].word[pos]);
            }
            if (p.size() < 2) continue;
            const PlccTerm term = plcc_loss(tape, numerics::stack(p), t);
            report.degenerate_terms += term.degenerate;
            position_losses.push_back(term.loss);
        }
        report.word_positions = position_losses.size();
        if (position_losses.empty()) {
            spdlog::warn("no word position has two masked-in samples in this batch; word term contributes 0");
            report.terms["word"] = 0.0;
        } else {
            Var mean = numerics::scale(numerics::sum_all(numerics::stack(position_losses)),
                                       1.0 / static_cast<double>(position_losses.size()));
            report.terms["word"] = mean.item();
            parts.push_back(numerics::scale(mean, weights.word));
        }
    }

    if (parts.empty()) {
        report.total = tape.constant(Tensor::scalar(0.0));
    } else {
        report.total = numerics::sum_all(numerics::stack(parts));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

void TrainSchedule::validate() const {
    if (!(lr0 >= 0.0) || !std::isfinite(lr0)) throw ConfigError("lr0 must be finite and >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("Adam eps must be > 0");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch < 2) throw ConfigError("batch must be >= 2 (PLCC needs two samples)");
    if (accumulation == 0) throw ConfigError("accumulation must be >= 1");
    weights.validate();
}

nlohmann::json TrainSchedule::to_json() const {
    return {{"lr0", lr0},     {"beta1", beta1}, {"beta2", beta2},
            {"eps", eps},     {"epochs", epochs}, {"batch", batch},
            {"accumulation", accumulation}, {"seed", seed},
            {"weights",
             {{"spatial", weights.spatial},
              {"temporal", weights.temporal},
              {"overall_percept", weights.overall},
              {"word", weights.word},
              {"sentence", weights.sentence}}}};
}

TrainSchedule TrainSchedule::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{"lr0", "beta1", "beta2", "eps", "epochs", "batch",
                                             "accumulation", "seed", "weights"};
    if (!j.is_object()) throw ConfigError("schedule must be a JSON object");
    TrainSchedule s;
    try {
        for (const auto& [key, value] : j.items()) {
            if (!known.count(key)) throw ConfigError("unknown schedule key '" + key + "'");
        }
        s.lr0 = j.value("lr0", s.lr0);
        s.beta1 = j.value("beta1", s.beta1);
        s.beta2 = j.value("beta2", s.beta2);
        s.eps = j.value("eps", s.eps);
        s.epochs = j.value("epochs", s.epochs);
        s.batch = j.value("batch", s.batch);
        s.accumulation = j.value("accumulation", s.accumulation);
        s.seed = j.value("seed", s.seed);
        if (j.contains("weights")) {
            const auto& w = j.at("weights");
            for (const auto& [key, value] : w.items()) {
                static const std::set<std::string> names{"spatial", "temporal", "overall_percept", "word", "sentence"};
                if (!names.count(key)) throw ConfigError("unknown loss weight '" + key + "'");
            }
            s.weights.spatial = w.value("spatial", s.weights.spatial);
            s.weights.temporal = w.value("temporal", s.weights.temporal);
            s.weights.overall = w.value("overall_percept", s.weights.overall);
            s.weights.word = w.value("word", s.weights.word);
            s.weights.sentence = w.value("sentence", s.weights.sentence);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad schedule: ") + e.what());
    }
    s.validate();
    return s;
}

double cosine_lr(double lr0, std::size_t epoch, std::size_t epochs) {
    if (epochs == 0) throw ConfigError("cosine schedule needs at least one epoch");
    if (epoch >= epochs) return 0.0;
    if (epoch == 0) return lr0;
    const double phase = std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs);
    return lr0 * (1.0 + std::cos(phase)) / 2.0;
}

void Adam::step(ParameterSet& params, const Gradients& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        Tensor& p = params.at(name);
        if (g.shape() != p.shape()) throw ShapeError("gradient shape mismatch for " + name);
        auto [mit, fresh] = m_.try_emplace(name, Tensor(p.shape()));
        auto vit = v_.try_emplace(name, Tensor(p.shape())).first;
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        std::vector<double> updated(p.values().begin(), p.values().end());
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            updated[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
        p = Tensor(p.shape(), std::move(updated), p.dtype());
    }
}

datastore::TrainingState Adam::state() const {
    datastore::TrainingState s;
    s.step = t_;
    s.adam_m = m_;
    s.adam_v = v_;
    return s;
}

void Adam::restore(const datastore::TrainingState& state) {
    t_ = state.step;
    m_ = state.adam_m;
    v_ = state.adam_v;
}

// ---------------------------------------------------------------------------
// Data

Dataset load_partition(const datastore::Manifest& manifest, const datastore::SplitSpec& split,
                       datastore::Partition partition) {
    std::map<std::string, const datastore::VideoRecord*> by_id;
    for (const auto& r : manifest.records) by_id[r.video_id] = &r;
    Dataset d;
    for (const std::string& id : split.ids(partition)) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw FormatError("split references unknown video '" + id + "'");
        d.ids.push_back(id);
        d.features.push_back(datastore::load_features(manifest, *it->second));
        d.labels.push_back(it->second->labels);
    }
    return d;
}

Dataset select_partition(const datastore::SyntheticDataset& data, const datastore::SplitSpec& split,
                         datastore::Partition partition) {
    Dataset d;
    for (std::size_t i = 0; i < data.manifest.records.size(); ++i) {
        const auto& r = data.manifest.records[i];
        auto it = split.assignment.find(r.video_id);
        if (it == split.assignment.end() || it->second != partition) continue;
        d.ids.push_back(r.video_id);
        d.features.push_back(data.features[i]);
        d.labels.push_back(r.labels);
    }
    return d;
}

std::vector<model::PredictionBundle> predict_all(const model::EduVqaModel& model, const Dataset& data) {
    std::vector<model::PredictionBundle> out;
    out.reserve(data.size());
    for (const auto& f : data.features) out.push_back(model.predict(f));
    return out;
}

std::map<std::string, double> validation_srcc(const model::EduVqaModel& model, const Dataset& data) {
    const auto bundles = predict_all(model, data);
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> series;
    for (std::size_t i = 0; i < bundles.size(); ++i) {
        const auto& b = bundles[i];
        const auto& l = data.labels[i];
        auto add = [&](const std::string& dim, double p, double t) {
            series[dim].first.push_back(p);
            series[dim].second.push_back(t);
        };
        if (b.spatial) add("spatial", *b.spatial, l.spatial);
        if (b.temporal) add("temporal", *b.temporal, l.temporal);
        add("overall_percept", b.overall, l.overall_percept);
        add("sentence", b.sentence, l.sentence);
        for (std::size_t w = 0; w < b.word.size(); ++w) {
            if (data.features[i].word_mask[w]) add("word", b.word[w], l.word[w]);
        }
    }
    std::map<std::string, double> out;
    for (const auto& [dim, s] : series) {
        if (s.first.size() < 2) continue;
        out[dim] = evaluation::srcc(s.first, s.second).value;
    }
    return out;
}

nlohmann::json EpochLog::to_json() const {
    return {{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss}, {"val_srcc", val_srcc}, {"val_mean", val_mean}};
}

// ---------------------------------------------------------------------------
// Loop

namespace {

std::vector<std::vector<std::size_t>> make_groups(std::vector<std::size_t> order, std::size_t size) {
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < order.size(); i += size) {
        groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                            order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + size)));
    }
    // A trailing single sample has no correlation; fold it into the previous group.
    if (groups.size() > 1 && groups.back().size() < 2) {
        const auto tail = groups.back();
        groups.pop_back();
        groups.back().insert(groups.back().end(), tail.begin(), tail.end());
    }
    return groups;
}

bool all_finite(const Gradients& g) {
    return std::all_of(g.begin(), g.end(), [](const auto& kv) { return kv.second.all_finite(); });
}

}  // namespace

TrainResult train(const model::ModelConfig& config, const TrainSchedule& schedule, const Dataset& train_set,
                  const Dataset& val_set, const std::function<void(const EpochLog&)>& on_epoch) {
    return train_from(config, model::init_parameters(config, schedule.seed), schedule, train_set, val_set,
                      on_epoch);
}

TrainResult train_from(const model::ModelConfig& config, ParameterSet params, const TrainSchedule& schedule,
                       const Dataset& train_set, const Dataset& val_set,
                       const std::function<void(const EpochLog&)>& on_epoch) {
    schedule.validate();
    if (train_set.size() < 2) throw DegenerateInputError("training needs at least 2 samples");
    if (val_set.size() < 2) throw DegenerateInputError("validation needs at least 2 samples");
    model::EduVqaModel model(config, std::move(params));
    Adam adam(schedule.beta1, schedule.beta2, schedule.eps);
    std::mt19937_64 rng(schedule.seed);
    TrainResult result;
    result.best = model.params();
    result.best_val = -std::numeric_limits<double>::infinity();
    const std::size_t group_size = schedule.batch * schedule.accumulation;

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
        const double lr = cosine_lr(schedule.lr0, epoch, schedule.epochs);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<double> losses;
        for (const auto& group : make_groups(order, group_size)) {
            const ParameterSet before = model.params();
            try {
                Tape tape(&model.params());
                std::vector<model::PredictionVars> preds;
                std::vector<QualityLabels> labels;
                std::vector<std::vector<std::uint8_t>> masks;
                for (std::size_t i : group) {
                    preds.push_back(model.forward(tape, train_set.features[i]));
                    labels.push_back(train_set.labels[i]);
                    masks.push_back(train_set.features[i].word_mask);
                }
                const LossReport report = total_loss(tape, preds, labels, masks, schedule.weights);
                const double loss = report.total.item();
                if (!std::isfinite(loss)) throw NumericalError("non-finite training loss");
                tape.backward(report.total);
                const Gradients grads = tape.parameter_grads();
                if (!all_finite(grads)) throw NumericalError("non-finite gradient");
                adam.step(model.params(), grads, lr);
                for (const auto& [name, t] : model.params()) {
                    if (!t.all_finite()) throw NumericalError("non-finite parameter " + name + " after update");
                }
                losses.push_back(loss);
            } catch (const NumericalError& e) {
                model.params() = before;
                result.aborted = true;
                result.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
                spdlog::error("training aborted: {}", result.abort_reason);
                break;
            }
        }
        if (result.aborted) break;

        EpochLog log;
        log.epoch = epoch;
        log.lr = lr;
        log.train_loss = numerics::ordered_sum(losses) / static_cast<double>(losses.size());
        log.val_srcc = validation_srcc(model, val_set);
        std::vector<double> vals;
        for (const auto& [dim, v] : log.val_srcc) vals.push_back(v);
        log.val_mean = vals.empty() ? 0.0 : numerics::ordered_sum(vals) / static_cast<double>(vals.size());
        if (log.val_mean > result.best_val) {
            result.best_val = log.val_mean;
            result.best_epoch = epoch;
            result.best = model.params();
        }
        spdlog::info("epoch {} lr {:.3g} loss {:.4f} val {:.4f}", epoch, lr, log.train_loss, log.val_mean);
        if (on_epoch) on_epoch(log);
        result.log.push_back(std::move(log));
    }
    result.last = model.params();
    result.state = adam.state();
    result.state.epoch = result.log.size();
    if (result.log.empty()) result.best_val = 0.0;
    return result;
}

// ---------------------------------------------------------------------------
// Gradient check

numerics::GradCheckReport gradient_check(const model::ModelConfig& config, std::uint64_t seed, std::size_t batch,
                                         const LossWeights& weights, double step, double floor) {
    if (config.dtype != numerics::DType::f64) throw ConfigError("gradient check requires dtype f64");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0), score(1.0, 5.0);
    // Uniform parameters give head outputs an O(1) spread across the batch;
    // near-constant predictions make the PLCC loss sharply curved.
    ParameterSet params = model::init_parameters(config, seed);
    for (auto& [name, t] : params) {
        for (double& v : t.values()) v = 0.8 * unit(rng);
    }
    std::vector<model::SampleFeatures> samples(batch);
    std::vector<QualityLabels> labels(batch);
    std::vector<std::vector<std::uint8_t>> masks(batch);
    auto random = [&](numerics::Shape shape) {
        Tensor t(shape);
        for (double& v : t.values()) v = unit(rng);
        return t;
    };
    for (std::size_t i = 0; i < batch; ++i) {
        samples[i].vst = random({config.frames, config.height, config.width, config.channels});
        samples[i].blip = random({config.frames, config.tokens, config.channels});
        samples[i].word_mask.assign(config.words(), 1);
        if (i % 2 == 1 && config.words() > 1) samples[i].word_mask[rng() % config.words()] = 0;
        masks[i] = samples[i].word_mask;
        labels[i] = {score(rng), score(rng), score(rng), {}, score(rng)};
        for (std::size_t w = 0; w < config.words(); ++w) labels[i].word.push_back(score(rng));
    }

    auto evaluate = [&](const ParameterSet& p, Gradients* grads) {
        model::EduVqaModel m(config, p);
        Tape tape(&m.params());
        std::vector<model::PredictionVars> preds;
        for (const auto& s : samples) preds.push_back(m.forward(tape, s));
        const LossReport report = total_loss(tape, preds, labels, masks, weights);
        if (grads) {
            tape.backward(report.total);
            *grads = tape.parameter_grads();
        }
        return report.total.item();
    };
    Gradients analytic;
    evaluate(params, &analytic);
    return numerics::check_gradients(params, [&](const ParameterSet& p) { return evaluate(p, nullptr); }, analytic,
                                     step, floor);
}

}  // namespace eduvqa::training

#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eduvqa/autodiff.hpp"
#include "eduvqa/datastore.hpp"
#include "eduvqa/gradcheck.hpp"
#include "eduvqa/model.hpp"
#include "eduvqa/types.hpp"

namespace eduvqa::training {

using numerics::Gradients;
using numerics::ParameterSet;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

struct LossWeights {
    double spatial = 0.125;
    double temporal = 0.125;
    double overall = 0.25;
    double word = 0.25;
    double sentence = 0.25;

    double sum() const { return spatial + temporal + overall + word + sentence; }
    void validate() const;
    bool operator==(const LossWeights&) const = default;
};

/// Pearson r with a constant-input guard: r = 0 and degenerate = true when
/// either side has no spread.
struct PlccValue {
    double r = 0.0;
    double loss = 0.5;
    bool degenerate = false;
};

PlccValue plcc_value(std::span<const double> pred, std::span<const double> target);

/// d loss / d pred for loss = (1 - r) / 2; zeros for degenerate inputs.
std::vector<double> plcc_gradient(std::span<const double> pred, std::span<const double> target);

struct PlccTerm {
    Var loss;
    bool degenerate = false;
};

/// (1 - r) / 2 between a 1-D prediction variable and fixed targets.
PlccTerm plcc_loss(Tape& tape, Var pred, std::span<const double> target);

struct LossReport {
    Var total;
    std::map<std::string, double> terms;  // unweighted PLCC losses of the active terms
    std::size_t degenerate_terms = 0;
    std::size_t word_positions = 0;  // positions averaged in the word term
};

/// Weighted sum of the five PLCC terms over a batch. Terms with zero weight
/// or without a head in the model are left out.
LossReport total_loss(Tape& tape, const std::vector<model::PredictionVars>& preds,
                      const std::vector<QualityLabels>& labels,
                      const std::vector<std::vector<std::uint8_t>>& masks, const LossWeights& weights);

struct TrainSchedule {
    double lr0 = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t epochs = 50;
    std::size_t batch = 4;
    std::size_t accumulation = 1;  // batches merged into one correlation group
    std::uint64_t seed = 0;
    LossWeights weights;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainSchedule from_json(const nlohmann::json& j);
    bool operator==(const TrainSchedule&) const = default;
};

/// lr0 * (1 + cos(pi * epoch / epochs)) / 2.
double cosine_lr(double lr0, std::size_t epoch, std::size_t epochs);

class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// Updates every parameter that has a gradient. Values are re-rounded to
    /// the parameter dtype.
    void step(ParameterSet& params, const Gradients& grads, double lr);

    datastore::TrainingState state() const;
    void restore(const datastore::TrainingState& state);
    std::uint64_t steps() const noexcept { return t_; }

private:
    double beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

struct Dataset {
    std::vector<std::string> ids;
    std::vector<model::SampleFeatures> features;
    std::vector<QualityLabels> labels;

    std::size_t size() const { return ids.size(); }
};

/// Loads the given partition of a manifest.
Dataset load_partition(const datastore::Manifest& manifest, const datastore::SplitSpec& split,
                       datastore::Partition partition);
/// In-memory variant for a synthetic dataset.
Dataset select_partition(const datastore::SyntheticDataset& data, const datastore::SplitSpec& split,
                         datastore::Partition partition);

std::vector<model::PredictionBundle> predict_all(const model::EduVqaModel& model, const Dataset& data);

/// SRCC per active dimension (word pooled over valid positions).
std::map<std::string, double> validation_srcc(const model::EduVqaModel& model, const Dataset& data);

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    std::map<std::string, double> val_srcc;
    double val_mean = 0.0;

    nlohmann::json to_json() const;
};

struct TrainResult {
    ParameterSet best;
    ParameterSet last;
    std::size_t best_epoch = 0;
    double best_val = 0.0;
    std::vector<EpochLog> log;
    datastore::TrainingState state;
    bool aborted = false;
    std::string abort_reason;
};

/// Epoch loop: shuffle, Adam step per correlation group, cosine lr per epoch,
/// validation SRCC after every epoch. A non-finite loss or update stops the
/// run and returns the last finite parameters with `aborted` set.
TrainResult train(const model::ModelConfig& config, const TrainSchedule& schedule,
                  const Dataset& train_set, const Dataset& val_set,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

/// Same loop starting from the given parameters.
TrainResult train_from(const model::ModelConfig& config, ParameterSet params,
                       const TrainSchedule& schedule, const Dataset& train_set,
                       const Dataset& val_set, const std::function<void(const EpochLog&)>& on_epoch = {});

/// Finite-difference check of the full objective on `batch` random samples.
numerics::GradCheckReport gradient_check(const model::ModelConfig& config, std::uint64_t seed,
                                         std::size_t batch = 4, const LossWeights& weights = {},
                                         double step = 1e-4, double floor = 1e-6);

}  // namespace eduvqa::training

#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eduvqa/types.hpp"

namespace eduvqa::subjective {

inline constexpr double kGaussianLambda = 2.0;
extern const double kHeavyTailLambda;  // sqrt(20)

/// beta2 = m4 / m2^2 with population central moments; 0 when m2 == 0.
double kurtosis(std::span<const double> scores);

struct LambdaChoice {
    double lambda = kGaussianLambda;
    double kurtosis = 0.0;
    bool degenerate = false;    // zero variance
    bool small_sample = false;  // fewer than 4 scores; the kurtosis gate is skipped
};

/// lambda = 2 when 2 <= beta2 <= 4, sqrt(20) otherwise.
LambdaChoice select_lambda(std::span<const double> scores);

/// Indices i with |x_i - mean| <= lambda * s, s the n-1 standard deviation.
/// Zero spread or fewer than 2 scores keep everything.
std::vector<std::size_t> inlier_set(std::span<const double> scores, double lambda);

double sample_stddev(std::span<const double> scores);

/// `n` counts every submitted rating; the statistics describe the ratings
/// screened in that pass.
struct CellReport {
    std::string video_id;
    DimensionKey dimension;
    std::size_t n = 0;
    double mean = 0.0;
    double sigma = 0.0;
    double lambda = kGaussianLambda;
    double kurtosis = 0.0;
    std::vector<std::size_t> excluded;  // row indices into the ratings list
    double mos = 0.0;
    bool degenerate = false;
    bool small_sample = false;
    bool fallback = false;  // every rater rejected: unscreened mean used
};

struct AnnotatorReport {
    std::string annotator_id;
    std::size_t ratings = 0;
    std::size_t outliers = 0;
    double outlier_fraction = 0.0;
    bool rejected = false;
};

struct ConsolidationReport {
    double reject_fraction = 0.05;
    std::vector<CellReport> first_pass;  // screening over every rater
    std::vector<CellReport> cells;       // final, rejected annotators removed
    std::vector<AnnotatorReport> annotators;

    /// Final MOS keyed by (video, dimension).
    std::map<std::pair<std::string, DimensionKey>, double> mos() const;
};

/// Two passes: screen each (video, dimension) cell, reject annotators whose
/// outlier fraction exceeds `reject_fraction`, then re-screen and aggregate
/// without them.
ConsolidationReport consolidate(const std::vector<RatingRecord>& ratings,
                                double reject_fraction = 0.05);

/// CSV with header `annotator_id,video_id,dimension,score`; scores must be
/// integers 1..5.
std::vector<RatingRecord> read_ratings_csv(const std::filesystem::path& path);
std::vector<RatingRecord> parse_ratings_csv(const std::string& text);

nlohmann::json to_json(const ConsolidationReport& report);

/// One line per video: {"video_id", "labels": {...}, "word_mask": [...]}.
/// Word entries cover positions 1..max position rated; unrated ones are null.
std::string labels_jsonl(const ConsolidationReport& report);

}  // namespace eduvqa::subjective

#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eduvqa/types.hpp"

namespace eduvqa::evaluation {

/// A correlation coefficient; constant inputs report 0 with `degenerate` set.
struct Correlation {
    double value = 0.0;
    bool degenerate = false;
};

/// 1-based ranks, ties share their average rank.
std::vector<double> average_ranks(std::span<const double> x);

Correlation plcc(std::span<const double> pred, std::span<const double> mos);
Correlation srcc(std::span<const double> pred, std::span<const double> mos);
/// Kendall tau-b.
Correlation krcc(std::span<const double> pred, std::span<const double> mos);
double rmse(std::span<const double> pred, std::span<const double> mos);

/// f(x) = b2 + (b1 - b2) / (1 + exp(-(x - b3) / |b4|))
struct LogisticFit {
    double b1 = 0.0, b2 = 0.0, b3 = 0.0, b4 = 1.0;
    bool affine = false;    // the affine limit (slope, intercept in b1, b2) fit better
    bool identity = false;  // fit skipped or diverged; mapped == pred
    double sse = 0.0;
    std::vector<double> mapped;

    double operator()(double x) const;
};

double logistic4(double x, double b1, double b2, double b3, double b4);

/// Least-squares monotone logistic map from pred to mos. Falls back to identity
/// with a warning for fewer than 5 samples or a non-finite fit.
LogisticFit logistic_map(std::span<const double> pred, std::span<const double> mos);

struct DimensionMetrics {
    double srcc = 0.0, plcc = 0.0, krcc = 0.0, rmse = 0.0;
    std::size_t n = 0;
    bool degenerate = false;
};

DimensionMetrics compute_metrics(std::span<const double> pred, std::span<const double> mos,
                                 bool logistic = false);

/// Metrics keyed by dimension name ("spatial", ..., "word", "sentence").
/// Word metrics pool every valid (video, position) pair.
struct MetricReport {
    std::string split;
    std::map<std::string, DimensionMetrics> dimensions;
};

struct MetricSummary {
    double mean = 0.0, std = 0.0;  // population std
};

struct AggregateReport {
    std::size_t splits = 0;
    std::map<std::string, std::map<std::string, MetricSummary>> dimensions;  // dim -> metric -> summary
};

AggregateReport aggregate(const std::vector<MetricReport>& reports);

nlohmann::json to_json(const MetricReport& r);
nlohmann::json to_json(const AggregateReport& r);
/// Aligned plaintext table: one row per method, perceptual then alignment columns.
std::string format_table(const std::string& method, const MetricReport& r);
std::string format_table(const std::string& method, const AggregateReport& r);

/// Per-annotator agreement with consolidated MOS, grouped into the perceptual
/// dimensions and the alignment dimensions.
struct AnnotatorAgreement {
    std::string annotator_id;
    std::string group;  // "perceptual" or "alignment"
    double srcc = 0.0, plcc = 0.0;
    std::size_t n = 0;
};

struct ConsistencyReport {
    std::vector<AnnotatorAgreement> entries;
    std::vector<std::string> skipped;  // "<annotator>/<group>: reason"
    std::map<std::string, double> mean_srcc, mean_plcc;
    std::map<std::string, std::size_t> above_threshold;
};

using MosTable = std::map<std::pair<std::string, DimensionKey>, double>;

ConsistencyReport annotator_consistency(const std::vector<RatingRecord>& ratings,
                                        const MosTable& mos, double threshold = 0.8);

struct GmadPair {
    std::string defender, attacker;
    std::string video_a, video_b;  // video_a < video_b
    double defender_delta = 0.0, attacker_delta = 0.0;
};

using ScoreMap = std::map<std::string, double>;

/// Pairs whose defender |delta| <= eps, ranked by attacker |delta| descending,
/// ties by (video_a, video_b). With `swap_roles` the two models trade places.
std::vector<GmadPair> gmad_pairs(const ScoreMap& model_a, const ScoreMap& model_b, double eps,
                                 std::size_t top_n, bool swap_roles = false,
                                 const std::string& name_a = "A", const std::string& name_b = "B");

/// 0.05 times the spread of `reference` scores.
double default_gmad_eps(const ScoreMap& reference);

}  // namespace eduvqa::evaluation

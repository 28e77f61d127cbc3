#include "eduvqa/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include <spdlog/spdlog.h>
#include <unsupported/Eigen/LevenbergMarquardt>

#include "eduvqa/errors.hpp"

namespace eduvqa::evaluation {

namespace {

void check_pair(std::span<const double> a, std::span<const double> b, const char* what) {
    if (a.size() != b.size()) {
        throw ShapeError(std::string(what) + ": length mismatch " + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()));
    }
    if (a.size() < 2) throw DegenerateInputError(std::string(what) + " needs at least 2 samples");
}

double mean(std::span<const double> x) {
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

bool constant(std::span<const double> x) {
    return std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; });
}

double pearson_raw(std::span<const double> a, std::span<const double> b) {
    const double ma = mean(a), mb = mean(b);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    const double r = sab / std::sqrt(saa * sbb);
    return std::clamp(r, -1.0, 1.0);
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
        i = j + 1;
    }
    return ranks;
}

Correlation plcc(std::span<const double> pred, std::span<const double> mos) {
    check_pair(pred, mos, "plcc");
    if (constant(pred) || constant(mos)) return {0.0, true};
    return {pearson_raw(pred, mos), false};
}

Correlation srcc(std::span<const double> pred, std::span<const double> mos) {
    check_pair(pred, mos, "srcc");
    if (constant(pred) || constant(mos)) return {0.0, true};
    const auto rp = average_ranks(pred);
    const auto rm = average_ranks(mos);
    return {pearson_raw(rp, rm), false};
}

Correlation krcc(std::span<const double> pred, std::span<const double> mos) {
    check_pair(pred, mos, "krcc");
    if (constant(pred) || constant(mos)) return {0.0, true};
    long long concordant = 0, discordant = 0, tie_pred = 0, tie_mos = 0;
    const std::size_t n = pred.size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dp = pred[i] - pred[j], dm = mos[i] - mos[j];
            if (dp == 0.0 && dm == 0.0) continue;
            if (dp == 0.0) ++tie_pred;
            else if (dm == 0.0) ++tie_mos;
            else if ((dp > 0) == (dm > 0)) ++concordant;
            else ++discordant;
        }
    }
    const double n1 = static_cast<double>(concordant + discordant + tie_pred);
    const double n2 = static_cast<double>(concordant + discordant + tie_mos);
    return {static_cast<double>(concordant - discordant) / std::sqrt(n1 * n2), false};
}

double rmse(std::span<const double> pred, std::span<const double> mos) {
    if (pred.size() != mos.size()) throw ShapeError("rmse: length mismatch");
    if (pred.empty()) throw DegenerateInputError("rmse of an empty vector");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - mos[i]) * (pred[i] - mos[i]);
    return std::sqrt(s / static_cast<double>(pred.size()));
}

// ---------------------------------------------------------------------------
// Logistic mapping

namespace {

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

struct LogisticResidual : Eigen::DenseFunctor<double> {
    LogisticResidual(std::span<const double> x, std::span<const double> y)
        : Eigen::DenseFunctor<double>(4, static_cast<int>(x.size())), x_(x), y_(y) {}

    int operator()(const InputType& b, ValueType& f) const {
        for (std::size_t i = 0; i < x_.size(); ++i) {
            f(static_cast<Eigen::Index>(i)) = logistic4(x_[i], b(0), b(1), b(2), b(3)) - y_[i];
        }
        return 0;
    }

    int df(const InputType& b, JacobianType& j) const {
        const double s4 = std::abs(b(3)), sign = b(3) < 0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < x_.size(); ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            const double z = (x_[i] - b(2)) / s4;
            const double sg = sigmoid(z);
            const double d = (b(0) - b(1)) * sg * (1.0 - sg);
            j(r, 0) = sg;
            j(r, 1) = 1.0 - sg;
            j(r, 2) = -d / s4;
            j(r, 3) = -d * z / s4 * sign;
        }
        return 0;
    }

    std::span<const double> x_, y_;
};

double sse_of(std::span<const double> mapped, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (mapped[i] - y[i]) * (mapped[i] - y[i]);
    return s;
}

}  // namespace

double logistic4(double x, double b1, double b2, double b3, double b4) {
    return b2 + (b1 - b2) * sigmoid((x - b3) / std::abs(b4));
}

double LogisticFit::operator()(double x) const {
    if (identity) return x;
    if (affine) return b1 * x + b2;
    return logistic4(x, b1, b2, b3, b4);
}

LogisticFit logistic_map(std::span<const double> pred, std::span<const double> mos) {
    if (pred.size() != mos.size()) throw ShapeError("logistic_map: length mismatch");
    LogisticFit fit;
    fit.identity = true;
    fit.mapped.assign(pred.begin(), pred.end());
    fit.sse = sse_of(fit.mapped, mos);
    if (pred.size() < 5) {
        spdlog::warn("logistic mapping needs at least 5 samples, got {}; using identity", pred.size());
        return fit;
    }
    if (constant(pred)) {
        spdlog::warn("logistic mapping of constant predictions; using identity");
        return fit;
    }

    // Affine least squares: the logistic's linear regime.
    const double mx = mean(pred), my = mean(mos);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        sxy += (pred[i] - mx) * (mos[i] - my);
        sxx += (pred[i] - mx) * (pred[i] - mx);
    }
    LogisticFit affine;
    affine.affine = true;
    affine.b1 = sxy / sxx;
    affine.b2 = my - affine.b1 * mx;
    for (double x : pred) affine.mapped.push_back(affine(x));
    affine.sse = sse_of(affine.mapped, mos);

    Eigen::VectorXd b(4);
    const auto [lo, hi] = std::minmax_element(mos.begin(), mos.end());
    b << *hi, *lo, mx, std::max(std::sqrt(sxx / static_cast<double>(pred.size())), 1e-6);
    if (sxy < 0) std::swap(b(0), b(1));
    LogisticResidual functor(pred, mos);
    Eigen::LevenbergMarquardt<LogisticResidual> lm(functor);
    lm.setMaxfev(2000);
    lm.minimize(b);

    LogisticFit logistic;
    logistic.b1 = b(0), logistic.b2 = b(1), logistic.b3 = b(2), logistic.b4 = b(3);
    bool finite = b.allFinite() && b(3) != 0.0;
    if (finite) {
        for (double x : pred) logistic.mapped.push_back(logistic(x));
        logistic.sse = sse_of(logistic.mapped, mos);
        finite = std::isfinite(logistic.sse);
    }
    if (!finite) spdlog::warn("logistic fit diverged; keeping the affine fit");

    LogisticFit best = (finite && logistic.sse <= affine.sse) ? logistic : affine;
    if (!std::isfinite(best.sse)) {
        spdlog::warn("logistic mapping failed; using identity");
        return fit;
    }
    return best;
}

DimensionMetrics compute_metrics(std::span<const double> pred, std::span<const double> mos,
                                 bool logistic) {
    DimensionMetrics m;
    m.n = pred.size();
    const Correlation s = srcc(pred, mos), k = krcc(pred, mos);
    std::vector<double> mapped(pred.begin(), pred.end());
    if (logistic) mapped = logistic_map(pred, mos).mapped;
    const Correlation p = plcc(mapped, mos);
    m.srcc = s.value;
    m.krcc = k.value;
    m.plcc = p.value;
    m.rmse = rmse(mapped, mos);
    m.degenerate = s.degenerate || k.degenerate || p.degenerate;
    return m;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

const char* const kMetricNames[] = {"srcc", "plcc", "krcc", "rmse"};

double metric_of(const DimensionMetrics& m, const std::string& name) {
    if (name == "srcc") return m.srcc;
    if (name == "plcc") return m.plcc;
    if (name == "krcc") return m.krcc;
    return m.rmse;
}

const std::vector<std::string>& dimension_order() {
    static const std::vector<std::string> order{"spatial", "temporal", "overall_percept", "word",
                                                "sentence"};
    return order;
}

std::string group_of(const std::string& dim) {
    return (dim == "word" || dim == "sentence") ? "Alignment" : "Perceptual";
}

std::string render_table(const std::string& method,
                         const std::vector<std::pair<std::string, std::vector<std::string>>>& rows) {
    std::ostringstream out;
    auto line = [&](const std::string& a, const std::string& b, const std::string& c,
                    const std::vector<std::string>& cells) {
        out << std::left << std::setw(12) << a << std::setw(17) << b << std::setw(10) << c;
        for (const auto& cell : cells) out << std::right << std::setw(16) << cell;
        out << '\n';
    };
    line("Metric", "Dimension", "Method", {"SRCC", "PLCC", "KRCC", "RMSE"});
    std::string previous;
    for (const auto& [dim, cells] : rows) {
        const std::string group = group_of(dim);
        line(group == previous ? "" : group, dim, method, cells);
        previous = group;
    }
    return out.str();
}

std::string fixed(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
}

}  // namespace

AggregateReport aggregate(const std::vector<MetricReport>& reports) {
    AggregateReport out;
    out.splits = reports.size();
    std::map<std::string, std::map<std::string, std::vector<double>>> values;
    for (const auto& r : reports) {
        for (const auto& [dim, m] : r.dimensions) {
            for (const char* name : kMetricNames) values[dim][name].push_back(metric_of(m, name));
        }
    }
    for (const auto& [dim, metrics] : values) {
        for (const auto& [name, v] : metrics) {
            MetricSummary s;
            s.mean = mean(v);
            double var = 0.0;
            for (double x : v) var += (x - s.mean) * (x - s.mean);
            s.std = std::sqrt(var / static_cast<double>(v.size()));
            out.dimensions[dim][name] = s;
        }
    }
    return out;
}

nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json j{{"split", r.split}, {"dimensions", nlohmann::json::object()}};
    for (const auto& [dim, m] : r.dimensions) {
        j["dimensions"][dim] = {{"srcc", m.srcc}, {"plcc", m.plcc}, {"krcc", m.krcc},
                                {"rmse", m.rmse}, {"n", m.n},       {"degenerate", m.degenerate}};
    }
    return j;
}

nlohmann::json to_json(const AggregateReport& r) {
    nlohmann::json j{{"splits", r.splits}, {"dimensions", nlohmann::json::object()}};
    for (const auto& [dim, metrics] : r.dimensions) {
        for (const auto& [name, s] : metrics) {
            j["dimensions"][dim][name] = {{"mean", s.mean}, {"std", s.std}};
        }
    }
    return j;
}

std::string format_table(const std::string& method, const MetricReport& r) {
    std::vector<std::pair<std::string, std::vector<std::string>>> rows;
    for (const auto& dim : dimension_order()) {
        auto it = r.dimensions.find(dim);
        if (it == r.dimensions.end()) continue;
        const auto& m = it->second;
        rows.push_back({dim, {fixed(m.srcc), fixed(m.plcc), fixed(m.krcc), fixed(m.rmse)}});
    }
    return render_table(method, rows);
}

std::string format_table(const std::string& method, const AggregateReport& r) {
    std::vector<std::pair<std::string, std::vector<std::string>>> rows;
    for (const auto& dim : dimension_order()) {
        auto it = r.dimensions.find(dim);
        if (it == r.dimensions.end()) continue;
        std::vector<std::string> cells;
        for (const char* name : kMetricNames) {
            const MetricSummary& s = it->second.at(name);
            cells.push_back(fixed(s.mean) + "±" + fixed(s.std));
        }
        rows.push_back({dim, cells});
    }
    return render_table(method, rows);
}

// ---------------------------------------------------------------------------
// Annotator consistency

ConsistencyReport annotator_consistency(const std::vector<RatingRecord>& ratings,
                                        const MosTable& mos, double threshold) {
    // annotator -> group -> (rating, mos) pairs
    std::map<std::string, std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>>
        series;
    for (const auto& r : ratings) {
        auto it = mos.find({r.video_id, r.dimension});
        if (it == mos.end()) continue;
        const std::string group = is_perceptual(r.dimension.dimension) ? "perceptual" : "alignment";
        auto& [x, y] = series[r.annotator_id][group];
        x.push_back(r.score);
        y.push_back(it->second);
    }
    ConsistencyReport out;
    std::map<std::string, std::vector<double>> srccs, plccs;
    for (const auto& [annotator, groups] : series) {
        for (const auto& [group, xy] : groups) {
            const auto& [x, y] = xy;
            if (x.size() < 2) {
                out.skipped.push_back(annotator + "/" + group + ": fewer than 2 rated cells");
                continue;
            }
            const Correlation s = srcc(x, y), p = plcc(x, y);
            if (s.degenerate || p.degenerate) {
                out.skipped.push_back(annotator + "/" + group + ": constant ratings or MOS");
                continue;
            }
            out.entries.push_back({annotator, group, s.value, p.value, x.size()});
            srccs[group].push_back(s.value);
            plccs[group].push_back(p.value);
            if (s.value > threshold) ++out.above_threshold[group];
        }
    }
    for (const auto& [group, v] : srccs) {
        out.mean_srcc[group] = mean(v);
        out.mean_plcc[group] = mean(plccs[group]);
        out.above_threshold.try_emplace(group, 0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// gMAD

std::vector<GmadPair> gmad_pairs(const ScoreMap& model_a, const ScoreMap& model_b, double eps,
                                 std::size_t top_n, bool swap_roles, const std::string& name_a,
                                 const std::string& name_b) {
    if (model_a.size() != model_b.size()) throw ShapeError("gMAD score maps cover different videos");
    for (const auto& [id, _] : model_a) {
        if (!model_b.count(id)) throw ShapeError("gMAD: video '" + id + "' missing from second model");
    }
    if (!(eps >= 0.0)) throw UsageError("gMAD eps must be non-negative");
    const ScoreMap& defender = swap_roles ? model_b : model_a;
    const ScoreMap& attacker = swap_roles ? model_a : model_b;

    struct Entry {
        double score;
        const std::string* id;
    };
    std::vector<Entry> sorted;
    for (const auto& [id, s] : defender) sorted.push_back({s, &id});
    std::sort(sorted.begin(), sorted.end(), [](const Entry& a, const Entry& b) {
        return a.score != b.score ? a.score < b.score : *a.id < *b.id;
    });

    std::vector<GmadPair> candidates;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        for (std::size_t j = i + 1; j < sorted.size() && sorted[j].score - sorted[i].score <= eps; ++j) {
            const std::string& u = std::min(*sorted[i].id, *sorted[j].id);
            const std::string& v = std::max(*sorted[i].id, *sorted[j].id);
            candidates.push_back({swap_roles ? name_b : name_a, swap_roles ? name_a : name_b, u, v,
                                  std::abs(defender.at(u) - defender.at(v)),
                                  std::abs(attacker.at(u) - attacker.at(v))});
        }
    }
    auto better = [](const GmadPair& a, const GmadPair& b) {
        if (a.attacker_delta != b.attacker_delta) return a.attacker_delta > b.attacker_delta;
        if (a.video_a != b.video_a) return a.video_a < b.video_a;
        return a.video_b < b.video_b;
    };
    const std::size_t keep = std::min(top_n, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), better);
    candidates.resize(keep);
    return candidates;
}

double default_gmad_eps(const ScoreMap& reference) {
    if (reference.empty()) return 0.0;
    auto [lo, hi] = std::minmax_element(reference.begin(), reference.end(),
                                        [](const auto& a, const auto& b) { return a.second < b.second; });
    return 0.05 * (hi->second - lo->second);
}

}  // namespace eduvqa::evaluation

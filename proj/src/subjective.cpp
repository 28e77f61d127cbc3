#include "eduvqa/subjective.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "eduvqa/errors.hpp"

namespace eduvqa::subjective {

const double kHeavyTailLambda = std::sqrt(20.0);

namespace {

double mean_of(std::span<const double> x) {
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

using CellKey = std::pair<std::string, DimensionKey>;

// Screens one cell of scores. `rows` maps score positions back to input rows.
CellReport screen(const CellKey& key, const std::vector<double>& scores,
                  const std::vector<std::size_t>& rows) {
    CellReport cell;
    cell.video_id = key.first;
    cell.dimension = key.second;
    cell.n = scores.size();
    cell.mean = mean_of(scores);
    cell.sigma = sample_stddev(scores);
    const LambdaChoice choice = select_lambda(scores);
    cell.lambda = choice.lambda;
    cell.kurtosis = choice.kurtosis;
    cell.degenerate = choice.degenerate;
    cell.small_sample = choice.small_sample;
    const std::vector<std::size_t> keep = inlier_set(scores, cell.lambda);
    std::vector<bool> kept(scores.size(), false);
    double sum = 0.0;
    for (std::size_t i : keep) {
        kept[i] = true;
        sum += scores[i];
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!kept[i]) cell.excluded.push_back(rows[i]);
    }
    cell.mos = sum / static_cast<double>(keep.size());
    return cell;
}

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace

double kurtosis(std::span<const double> scores) {
    if (scores.empty()) return 0.0;
    const double mu = mean_of(scores);
    double m2 = 0.0, m4 = 0.0;
    for (double x : scores) {
        const double d = (x - mu) * (x - mu);
        m2 += d;
        m4 += d * d;
    }
    const double n = static_cast<double>(scores.size());
    m2 /= n;
    m4 /= n;
    return m2 == 0.0 ? 0.0 : m4 / (m2 * m2);
}

double sample_stddev(std::span<const double> scores) {
    if (scores.size() < 2) return 0.0;
    const double mu = mean_of(scores);
    double ss = 0.0;
    for (double x : scores) ss += (x - mu) * (x - mu);
    return std::sqrt(ss / static_cast<double>(scores.size() - 1));
}

LambdaChoice select_lambda(std::span<const double> scores) {
    LambdaChoice c;
    if (scores.empty()) throw DegenerateInputError("select_lambda on an empty cell");
    c.kurtosis = kurtosis(scores);
    c.degenerate = std::all_of(scores.begin(), scores.end(), [&](double x) { return x == scores[0]; });
    if (c.degenerate) return c;
    if (scores.size() < 4) {
        c.small_sample = true;
        return c;
    }
    c.lambda = (c.kurtosis >= 2.0 && c.kurtosis <= 4.0) ? kGaussianLambda : kHeavyTailLambda;
    return c;
}

std::vector<std::size_t> inlier_set(std::span<const double> scores, double lambda) {
    std::vector<std::size_t> out;
    const double mu = scores.empty() ? 0.0 : mean_of(scores);
    const double threshold = lambda * sample_stddev(scores);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (threshold == 0.0 || std::abs(scores[i] - mu) <= threshold) out.push_back(i);
    }
    return out;
}

std::map<std::pair<std::string, DimensionKey>, double> ConsolidationReport::mos() const {
    std::map<std::pair<std::string, DimensionKey>, double> out;
    for (const auto& c : cells) out[{c.video_id, c.dimension}] = c.mos;
    return out;
}

ConsolidationReport consolidate(const std::vector<RatingRecord>& ratings, double reject_fraction) {
    if (ratings.empty()) throw DegenerateInputError("no ratings to consolidate");
    for (const auto& r : ratings) {
        if (!(r.score >= 1.0 && r.score <= 5.0)) {
            throw FormatError("rating by '" + r.annotator_id + "' for '" + r.video_id +
                              "' is outside [1, 5]");
        }
    }
    std::map<CellKey, std::vector<std::size_t>> cells;
    for (std::size_t i = 0; i < ratings.size(); ++i) {
        cells[{ratings[i].video_id, ratings[i].dimension}].push_back(i);
    }

    ConsolidationReport report;
    report.reject_fraction = reject_fraction;
    std::vector<bool> outlier(ratings.size(), false);
    for (const auto& [key, rows] : cells) {
        std::vector<double> scores;
        for (std::size_t r : rows) scores.push_back(ratings[r].score);
        CellReport cell = screen(key, scores, rows);
        for (std::size_t r : cell.excluded) outlier[r] = true;
        if (cell.n < 3) spdlog::warn("cell {}/{} has only {} rating(s)", key.first, key.second.to_string(), cell.n);
        report.first_pass.push_back(std::move(cell));
    }

    std::map<std::string, AnnotatorReport> annotators;
    for (std::size_t i = 0; i < ratings.size(); ++i) {
        AnnotatorReport& a = annotators[ratings[i].annotator_id];
        a.annotator_id = ratings[i].annotator_id;
        ++a.ratings;
        if (outlier[i]) ++a.outliers;
    }
    for (auto& [id, a] : annotators) {
        a.outlier_fraction = static_cast<double>(a.outliers) / static_cast<double>(a.ratings);
        a.rejected = a.outlier_fraction > reject_fraction;
        if (a.rejected) spdlog::info("annotator {} rejected: {:.3f} of ratings are outliers", id, a.outlier_fraction);
        report.annotators.push_back(a);
    }

    std::size_t index = 0;
    for (const auto& [key, rows] : cells) {
        std::vector<double> scores;
        std::vector<std::size_t> kept_rows;
        for (std::size_t r : rows) {
            if (annotators.at(ratings[r].annotator_id).rejected) continue;
            scores.push_back(ratings[r].score);
            kept_rows.push_back(r);
        }
        if (scores.empty()) {
            CellReport cell = report.first_pass[index];
            cell.excluded.clear();
            cell.mos = cell.mean;
            cell.fallback = true;
            spdlog::warn("every rater of {}/{} was rejected; using the unscreened mean", key.first,
                         key.second.to_string());
            report.cells.push_back(cell);
        } else {
            CellReport cell = screen(key, scores, kept_rows);
            cell.n = rows.size();
            for (std::size_t r : rows) {
                if (annotators.at(ratings[r].annotator_id).rejected) cell.excluded.push_back(r);
            }
            std::sort(cell.excluded.begin(), cell.excluded.end());
            report.cells.push_back(std::move(cell));
        }
        ++index;
    }
    return report;
}

std::vector<RatingRecord> parse_ratings_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::vector<RatingRecord> out;
    bool header = false;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(trim(field));
        if (!line.empty() && line.back() == ',') fields.push_back("");
        if (!header) {
            if (fields != std::vector<std::string>{"annotator_id", "video_id", "dimension", "score"}) {
                throw FormatError("ratings CSV line 1: expected header annotator_id,video_id,dimension,score");
            }
            header = true;
            continue;
        }
        const std::string where = "ratings CSV line " + std::to_string(line_no) + ": ";
        if (fields.size() != 4) throw FormatError(where + "expected 4 fields");
        if (fields[0].empty() || fields[1].empty()) throw FormatError(where + "empty id");
        RatingRecord r;
        r.annotator_id = fields[0];
        r.video_id = fields[1];
        try {
            r.dimension = parse_dimension(fields[2]);
        } catch (const UsageError& e) {
            throw FormatError(where + e.what());
        }
        if (fields[3].size() != 1 || fields[3][0] < '1' || fields[3][0] > '5') {
            throw FormatError(where + "score must be an integer 1..5, got '" + fields[3] + "'");
        }
        r.score = fields[3][0] - '0';
        out.push_back(std::move(r));
    }
    if (!header) throw FormatError("ratings CSV is empty");
    return out;
}

std::vector<RatingRecord> read_ratings_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open ratings file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_ratings_csv(buf.str());
}

nlohmann::json to_json(const ConsolidationReport& report) {
    auto cell_json = [](const CellReport& c) {
        return nlohmann::json{{"video_id", c.video_id},
                              {"dimension", c.dimension.to_string()},
                              {"n", c.n},
                              {"mean", c.mean},
                              {"sigma", c.sigma},
                              {"lambda", c.lambda},
                              {"kurtosis", c.kurtosis},
                              {"excluded", c.excluded},
                              {"mos", c.mos},
                              {"degenerate", c.degenerate},
                              {"small_sample", c.small_sample},
                              {"fallback", c.fallback}};
    };
    nlohmann::json j;
    j["reject_fraction"] = report.reject_fraction;
    j["cells"] = nlohmann::json::array();
    for (const auto& c : report.cells) j["cells"].push_back(cell_json(c));
    j["first_pass"] = nlohmann::json::array();
    for (const auto& c : report.first_pass) j["first_pass"].push_back(cell_json(c));
    j["annotators"] = nlohmann::json::array();
    for (const auto& a : report.annotators) {
        j["annotators"].push_back({{"annotator_id", a.annotator_id},
                                   {"ratings", a.ratings},
                                   {"outliers", a.outliers},
                                   {"outlier_fraction", a.outlier_fraction},
                                   {"rejected", a.rejected}});
    }
    return j;
}

std::string labels_jsonl(const ConsolidationReport& report) {
    std::map<std::string, nlohmann::json> videos;
    std::map<std::string, std::map<std::size_t, double>> words;
    for (const auto& c : report.cells) {
        nlohmann::json& v = videos[c.video_id];
        if (c.dimension.dimension == Dimension::word) {
            words[c.video_id][c.dimension.position] = c.mos;
        } else {
            v[dimension_name(c.dimension.dimension)] = c.mos;
        }
    }
    std::string out;
    for (auto& [id, labels] : videos) {
        nlohmann::json word = nlohmann::json::array();
        nlohmann::json mask = nlohmann::json::array();
        if (auto it = words.find(id); it != words.end()) {
            const std::size_t max_pos = it->second.rbegin()->first;
            for (std::size_t p = 1; p <= max_pos; ++p) {
                auto w = it->second.find(p);
                word.push_back(w == it->second.end() ? nlohmann::json(nullptr) : nlohmann::json(w->second));
                mask.push_back(w == it->second.end() ? 0 : 1);
            }
        }
        labels["word"] = word;
        out += nlohmann::json{{"video_id", id}, {"labels", labels}, {"word_mask", mask}}.dump() + "\n";
    }
    return out;
}

}  // namespace eduvqa::subjective

#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "eduvqa/datastore.hpp"
#include "eduvqa/errors.hpp"
#include "eduvqa/evaluation.hpp"
#include "eduvqa/subjective.hpp"
#include "eduvqa/training.hpp"

namespace eduvqa::cli {

namespace fs = std::filesystem;
namespace ds = eduvqa::datastore;

// ---------------------------------------------------------------------------
// Settings

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    // Prefer the shortest form that reads back exactly.
    for (int p = 1; p <= 17; ++p) {
        char shorter[32];
        std::snprintf(shorter, sizeof shorter, "%.*g", p, v);
        if (std::strtod(shorter, nullptr) == v) return shorter;
    }
    return buf;
}

std::string json_scalar(const nlohmann::json& v) {
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_float()) return format_double(v.get<double>());
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
}

// Keys that configure the schedule or the generator rather than the model.
const std::map<std::string, std::string>& extra_defaults() {
    static const std::map<std::string, std::string> d = [] {
        const training::TrainSchedule s;
        return std::map<std::string, std::string>{
            {"ablation", "0"},
            {"lr0", format_double(s.lr0)},
            {"beta1", format_double(s.beta1)},
            {"beta2", format_double(s.beta2)},
            {"eps", format_double(s.eps)},
            {"epochs", std::to_string(s.epochs)},
            {"batch", std::to_string(s.batch)},
            {"accumulation", std::to_string(s.accumulation)},
            {"lambda_spatial", format_double(s.weights.spatial)},
            {"lambda_temporal", format_double(s.weights.temporal)},
            {"lambda_overall_percept", format_double(s.weights.overall)},
            {"lambda_word", format_double(s.weights.word)},
            {"lambda_sentence", format_double(s.weights.sentence)},
            {"seed", "0"},
            {"videos", "400"},
            {"noise", "0.1"},
        };
    }();
    return d;
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long out = 0;
    try {
        if (v.empty() || v[0] == '-') throw std::invalid_argument(v);
        out = std::stoull(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError("'" + key + "' expects a nonnegative integer, got '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError("'" + key + "' expects a nonnegative integer, got '" + v + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double out = 0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
    }
    if (pos != v.size() || !std::isfinite(out)) throw ConfigError("'" + key + "' expects a finite number, got '" + v + "'");
    return out;
}

}  // namespace

std::map<std::string, std::string> parse_flat_config(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key");
        if (!out.emplace(key, value).second) throw ConfigError("config line " + std::to_string(n) + ": duplicate key '" + key + "'");
    }
    return out;
}

Settings::Settings() {
    const nlohmann::json model_keys = model::ModelConfig{}.to_json();
    for (const auto& [key, value] : model_keys.items()) values_[key] = json_scalar(value);
    for (const auto& [key, value] : extra_defaults()) values_[key] = value;
}

void Settings::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
    explicit_.insert(key);
}

const std::string& Settings::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

void Settings::load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    for (const auto& [key, value] : parse_flat_config(buf.str())) set(key, value);
}

model::ModelConfig Settings::model_config() const {
    const nlohmann::json defaults = model::ModelConfig{}.to_json();
    nlohmann::json j;
    for (const auto& [key, def] : defaults.items()) {
        const std::string& v = get(key);
        if (def.is_boolean()) {
            if (v != "true" && v != "false") throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
            j[key] = v == "true";
        } else if (def.is_number_unsigned() || def.is_number_integer()) {
            j[key] = parse_unsigned(key, v);
        } else {
            j[key] = v;
        }
    }
    model::ModelConfig c;
    try {
        c = model::ModelConfig::from_json(j);
    } catch (const UsageError& e) {
        throw ConfigError(e.what());
    }
    const auto ablation = parse_unsigned("ablation", get("ablation"));
    if (ablation != 0) c = model::ablation_config(static_cast<int>(ablation), c);
    c.validate();
    return c;
}

training::TrainSchedule Settings::schedule() const {
    training::TrainSchedule s;
    s.lr0 = parse_real("lr0", get("lr0"));
    s.beta1 = parse_real("beta1", get("beta1"));
    s.beta2 = parse_real("beta2", get("beta2"));
    s.eps = parse_real("eps", get("eps"));
    s.epochs = parse_unsigned("epochs", get("epochs"));
    s.batch = parse_unsigned("batch", get("batch"));
    s.accumulation = parse_unsigned("accumulation", get("accumulation"));
    s.seed = seed();
    s.weights = {parse_real("lambda_spatial", get("lambda_spatial")),
                 parse_real("lambda_temporal", get("lambda_temporal")),
                 parse_real("lambda_overall_percept", get("lambda_overall_percept")),
                 parse_real("lambda_word", get("lambda_word")),
                 parse_real("lambda_sentence", get("lambda_sentence"))};
    s.validate();
    return s;
}

std::uint64_t Settings::seed() const { return parse_unsigned("seed", get("seed")); }

std::string Settings::echo() const {
    std::string out;
    for (const auto& [key, value] : values_) out += key + " = " + value + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Shared helpers

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string seed;
    std::string dtype;
    std::string out_dir = ".";
    std::string log_level = "info";
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "Flat key = value config file");
    cmd->add_option("--set", c.overrides, "Override one config key (key=value); repeatable");
    cmd->add_option("--seed", c.seed, "Random seed");
    cmd->add_option("--dtype", c.dtype, "Parameter/feature dtype (f32 or f64)");
    cmd->add_option("--out-dir", c.out_dir, "Directory for outputs")->capture_default_str();
    cmd->add_option("--log-level", c.log_level, "trace, debug, info, warn, error or off")->capture_default_str();
}

Settings resolve(const Common& c, const std::map<std::string, std::string>& flags) {
    Settings s;
    if (!c.config.empty()) s.load_file(c.config);
    for (const auto& kv : c.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        s.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    if (!c.seed.empty()) s.set("seed", c.seed);
    if (!c.dtype.empty()) s.set("dtype", c.dtype);
    for (const auto& [key, value] : flags) {
        if (!value.empty()) s.set(key, value);
    }
    return s;
}

void write_echo(const std::string& command, const Common& c, const Settings& s, const std::string& extra = "") {
    std::string text = "# eduvqa " + command + "\n";
    if (!extra.empty()) text += extra;
    text += s.echo();
    ds::write_file(fs::path(c.out_dir) / "resolved_config.txt", text);
}

std::string describe_inputs(const std::map<std::string, std::string>& inputs) {
    std::string out;
    for (const auto& [k, v] : inputs) {
        if (!v.empty()) out += "# " + k + ": " + v + "\n";
    }
    return out;
}

// video -> dimension key -> score
using PredictionTable = std::map<std::string, std::map<DimensionKey, double>>;

void write_predictions(const fs::path& path, const std::vector<std::string>& ids,
                       const std::vector<model::PredictionBundle>& bundles) {
    std::string out = "video_id,dimension,score\n";
    auto row = [&](const std::string& id, const std::string& dim, double v) {
        out += id + "," + dim + "," + format_double(v) + "\n";
    };
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& b = bundles[i];
        if (b.spatial) row(ids[i], "spatial", *b.spatial);
        if (b.temporal) row(ids[i], "temporal", *b.temporal);
        row(ids[i], "overall_percept", b.overall);
        for (std::size_t w = 0; w < b.word.size(); ++w) {
            if (b.word_mask[w]) row(ids[i], "word[" + std::to_string(w + 1) + "]", b.word[w]);
        }
        row(ids[i], "sentence", b.sentence);
    }
    ds::write_file(path, out);
}

PredictionTable read_predictions(const fs::path& path) {
    std::istringstream in(ds::read_file(path));
    std::string line;
    std::size_t n = 0;
    PredictionTable t;
    bool header = false;
    while (std::getline(in, line)) {
        ++n;
        line = trim(line);
        if (line.empty()) continue;
        if (!header) {
            if (line != "video_id,dimension,score") {
                throw FormatError(path.string() + ":1: expected header video_id,dimension,score");
            }
            header = true;
            continue;
        }
        const std::string where = path.string() + ":" + std::to_string(n) + ": ";
        const auto a = line.find(','), b = line.rfind(',');
        if (a == std::string::npos || a == b) throw FormatError(where + "expected 3 fields");
        const std::string id = trim(line.substr(0, a));
        DimensionKey key;
        try {
            key = parse_dimension(trim(line.substr(a + 1, b - a - 1)));
        } catch (const UsageError& e) {
            throw FormatError(where + e.what());
        }
        double score = 0;
        try {
            score = parse_real("score", trim(line.substr(b + 1)));
        } catch (const ConfigError& e) {
            throw FormatError(where + e.what());
        }
        if (!t[id].emplace(key, score).second) throw FormatError(where + "duplicate prediction for " + id + " " + key.to_string());
    }
    if (!header) throw FormatError(path.string() + ": empty predictions file");
    return t;
}

// Pairs predictions with manifest labels for the given videos.
evaluation::MetricReport score_videos(const PredictionTable& preds, const ds::Manifest& manifest,
                                      const std::vector<std::string>& ids, bool logistic,
                                      const std::string& split_name) {
    std::map<std::string, const ds::VideoRecord*> by_id;
    for (const auto& r : manifest.records) by_id[r.video_id] = &r;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> series;
    std::set<std::string> present;  // dimensions with at least one prediction
    for (const auto& [id, dims] : preds) {
        for (const auto& [key, v] : dims) present.insert(dimension_name(key.dimension));
    }
    for (const std::string& id : ids) {
        auto rec = by_id.find(id);
        if (rec == by_id.end()) throw FormatError("video '" + id + "' is not in the manifest");
        auto p = preds.find(id);
        if (p == preds.end()) throw FormatError("no predictions for video '" + id + "'");
        const QualityLabels& l = rec->second->labels;
        auto add = [&](DimensionKey key, double label) {
            const std::string name = dimension_name(key.dimension);
            if (!present.count(name)) return;
            auto v = p->second.find(key);
            if (v == p->second.end()) throw FormatError("no " + key.to_string() + " prediction for video '" + id + "'");
            series[name].first.push_back(v->second);
            series[name].second.push_back(label);
        };
        add({Dimension::spatial, 0}, l.spatial);
        add({Dimension::temporal, 0}, l.temporal);
        add({Dimension::overall_percept, 0}, l.overall_percept);
        add({Dimension::sentence, 0}, l.sentence);
        for (std::size_t w = 0; w < rec->second->word_mask.size(); ++w) {
            if (rec->second->word_mask[w]) add({Dimension::word, w + 1}, l.word[w]);
        }
    }
    evaluation::MetricReport report;
    report.split = split_name;
    for (const auto& [dim, s] : series) {
        if (s.first.size() < 2) continue;
        report.dimensions[dim] = evaluation::compute_metrics(s.first, s.second, logistic);
    }
    return report;
}

ds::Partition parse_partition(const std::string& s) {
    if (s == "train") return ds::Partition::train;
    if (s == "val") return ds::Partition::val;
    if (s == "test") return ds::Partition::test;
    throw UsageError("partition must be train, val, test or all; got '" + s + "'");
}

std::vector<std::string> select_ids(const ds::Manifest& m, const std::string& splits_path, std::size_t index,
                                    const std::string& partition) {
    if (splits_path.empty() || partition == "all") {
        std::vector<std::string> ids;
        for (const auto& r : m.records) ids.push_back(r.video_id);
        return ids;
    }
    const auto splits = ds::read_splits(splits_path);
    if (index >= splits.size()) throw UsageError("--split-index " + std::to_string(index) + " out of range");
    return splits[index].ids(parse_partition(partition));
}

// Fills frames/height/width/tokens/channels from the data unless set explicitly.
void infer_shape(Settings& s, const ds::Manifest& m) {
    if (m.records.empty()) throw FormatError("manifest has no records");
    const model::SampleFeatures f = ds::load_features(m, m.records.front());
    const std::pair<const char*, std::size_t> dims[] = {{"frames", f.vst.shape()[0]},
                                                         {"height", f.vst.shape()[1]},
                                                         {"width", f.vst.shape()[2]},
                                                         {"channels", f.vst.shape()[3]},
                                                         {"tokens", f.blip.shape()[1]}};
    for (const auto& [key, value] : dims) {
        if (!s.explicitly_set(key)) s.set(key, std::to_string(value));
    }
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(const Common& c, std::size_t videos, const std::string& noise, std::ostream& out) {
    std::map<std::string, std::string> flags{{"noise", noise}};
    if (videos) flags["videos"] = std::to_string(videos);
    const Settings s = resolve(c, flags);
    ds::SyntheticOptions o;
    o.shape = s.model_config();
    o.videos = parse_unsigned("videos", s.get("videos"));
    o.noise = parse_real("noise", s.get("noise"));
    o.seed = s.seed();
    const ds::SyntheticDataset data = ds::gen_synthetic(o);
    ds::write_dataset(c.out_dir, data);
    write_echo("synth", c, s);
    out << "wrote " << data.manifest.records.size() << " videos to " << (fs::path(c.out_dir) / "manifest.jsonl").string()
        << "\n";
    return kExitOk;
}

int cmd_split(const Common& c, const std::string& manifest, std::size_t count, std::ostream& out) {
    const Settings s = resolve(c, {});
    const ds::Manifest m = ds::read_manifest(manifest);
    const auto splits = ds::make_splits(m.records, count, s.seed());
    const fs::path path = fs::path(c.out_dir) / "splits.json";
    ds::write_splits(path, splits);
    write_echo("split", c, s, describe_inputs({{"manifest", manifest}, {"count", std::to_string(count)}}));
    const auto first = splits.front();
    out << "wrote " << splits.size() << " splits to " << path.string() << " (train/val/test "
        << first.ids(ds::Partition::train).size() << "/" << first.ids(ds::Partition::val).size() << "/"
        << first.ids(ds::Partition::test).size() << ")\n";
    return kExitOk;
}

int cmd_mos(const Common& c, const std::string& ratings_path, double reject_fraction, double threshold,
            std::ostream& out) {
    const Settings s = resolve(c, {});
    const auto ratings = subjective::read_ratings_csv(ratings_path);
    const auto report = subjective::consolidate(ratings, reject_fraction);
    const fs::path dir = c.out_dir;
    nlohmann::json j = subjective::to_json(report);
    const auto consistency = evaluation::annotator_consistency(ratings, report.mos(), threshold);
    nlohmann::json cj;
    for (const auto& [group, v] : consistency.mean_srcc) {
        cj[group] = {{"mean_srcc", v},
                     {"mean_plcc", consistency.mean_plcc.at(group)},
                     {"above_threshold", consistency.above_threshold.count(group) ? consistency.above_threshold.at(group) : 0}};
    }
    cj["skipped"] = consistency.skipped;
    j["consistency"] = cj;
    ds::write_file(dir / "mos_report.json", j.dump(2) + "\n");
    ds::write_file(dir / "labels.jsonl", subjective::labels_jsonl(report));
    write_echo("mos", c, s,
               describe_inputs({{"ratings", ratings_path}, {"reject_fraction", format_double(reject_fraction)}}));

    char line[256];
    out << "video        dimension           n  lambda  kurtosis  excluded  MOS\n";
    for (const auto& cell : report.cells) {
        std::snprintf(line, sizeof line, "%-12s %-18s %3zu  %6.4f  %8.4f  %8zu  %.4f%s\n", cell.video_id.c_str(),
                      cell.dimension.to_string().c_str(), cell.n, cell.lambda, cell.kurtosis, cell.excluded.size(),
                      cell.mos, cell.fallback ? "  (fallback)" : "");
        out << line;
    }
    std::size_t rejected = 0;
    for (const auto& a : report.annotators) rejected += a.rejected;
    out << report.annotators.size() << " annotators, " << rejected << " rejected\n";
    return kExitOk;
}

int cmd_train(const Common& c, const std::map<std::string, std::string>& flags, const std::string& manifest_path,
              const std::string& splits_path, std::size_t split_index, std::ostream& out) {
    Settings s = resolve(c, flags);
    const ds::Manifest m = ds::read_manifest(manifest_path);
    infer_shape(s, m);
    const model::ModelConfig config = s.model_config();
    const training::TrainSchedule schedule = s.schedule();
    const auto splits = ds::read_splits(splits_path);
    if (split_index >= splits.size()) throw UsageError("--split-index out of range");
    const auto train_set = training::load_partition(m, splits[split_index], ds::Partition::train);
    const auto val_set = training::load_partition(m, splits[split_index], ds::Partition::val);
    const fs::path dir = c.out_dir;
    fs::create_directories(dir);
    write_echo("train", c, s,
               describe_inputs({{"manifest", manifest_path},
                                {"splits", splits_path},
                                {"split_index", std::to_string(split_index)}}));

    std::ofstream log(dir / "train_log.jsonl", std::ios::trunc);
    const auto start = std::chrono::steady_clock::now();
    const training::TrainResult r = training::train(config, schedule, train_set, val_set, [&](const auto& e) {
        log << e.to_json().dump() << "\n";
        log.flush();
    });
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    ds::Checkpoint best{config, r.best, std::nullopt};
    ds::Checkpoint last{config, r.last, r.state};
    last.state->extra = {{"aborted", r.aborted}};
    ds::save_checkpoint(dir / "best.ckpt", best);
    ds::save_checkpoint(dir / "last.ckpt", last);
    nlohmann::json summary{{"best_epoch", r.best_epoch},
                           {"best_val_srcc", r.best_val},
                           {"epochs_run", r.log.size()},
                           {"aborted", r.aborted},
                           {"abort_reason", r.abort_reason},
                           {"seconds", seconds}};
    ds::write_file(dir / "train_summary.json", summary.dump(2) + "\n");
    if (r.aborted) {
        out << "training aborted: " << r.abort_reason << "; last finite parameters saved\n";
        return kExitNumerical;
    }
    out << "trained " << r.log.size() << " epochs in " << format_double(std::round(seconds * 10) / 10)
        << " s; best epoch " << r.best_epoch << " (mean val SRCC " << format_double(r.best_val) << ")\n";
    return kExitOk;
}

int cmd_predict(const Common& c, const std::string& checkpoint, const std::string& manifest_path,
                const std::string& splits_path, std::size_t split_index, const std::string& partition,
                std::ostream& out) {
    const Settings s = resolve(c, {});
    const ds::Checkpoint ck = ds::load_checkpoint(checkpoint);
    const ds::Manifest m = ds::read_manifest(manifest_path);
    const auto ids = select_ids(m, splits_path, split_index, partition);
    std::map<std::string, const ds::VideoRecord*> by_id;
    for (const auto& r : m.records) by_id[r.video_id] = &r;
    const model::EduVqaModel model(ck.config, ck.params);
    std::vector<model::PredictionBundle> bundles;
    for (const auto& id : ids) bundles.push_back(model.predict(ds::load_features(m, *by_id.at(id))));
    const fs::path path = fs::path(c.out_dir) / "predictions.csv";
    write_predictions(path, ids, bundles);
    write_echo("predict", c, s,
               describe_inputs({{"checkpoint", checkpoint},
                                {"manifest", manifest_path},
                                {"splits", splits_path},
                                {"partition", partition},
                                {"split_index", std::to_string(split_index)}}));
    out << "wrote predictions for " << ids.size() << " videos to " << path.string() << "\n";
    return kExitOk;
}

int cmd_eval(const Common& c, const std::string& manifest_path, const std::vector<std::string>& predictions,
             const std::string& splits_path, const std::string& split_index, const std::string& partition,
             bool logistic, const std::string& method, std::ostream& out) {
    const Settings s = resolve(c, {});
    const ds::Manifest m = ds::read_manifest(manifest_path);
    std::vector<evaluation::MetricReport> reports;
    if (splits_path.empty()) {
        if (predictions.size() != 1) throw UsageError("without --splits give exactly one --predictions file");
        const auto table = read_predictions(predictions.front());
        std::vector<std::string> ids;
        for (const auto& [id, _] : table) ids.push_back(id);
        reports.push_back(score_videos(table, m, ids, logistic, "all"));
    } else {
        const auto splits = ds::read_splits(splits_path);
        const ds::Partition p = parse_partition(partition);
        if (split_index == "all") {
            if (predictions.size() != splits.size()) {
                throw UsageError("--split-index all needs one --predictions file per split (" +
                                 std::to_string(splits.size()) + ")");
            }
            for (std::size_t k = 0; k < splits.size(); ++k) {
                reports.push_back(score_videos(read_predictions(predictions[k]), m, splits[k].ids(p), logistic,
                                               "split " + std::to_string(k)));
            }
        } else {
            const auto k = parse_unsigned("split-index", split_index);
            if (k >= splits.size()) throw UsageError("--split-index out of range");
            if (predictions.size() != 1) throw UsageError("a single split takes exactly one --predictions file");
            reports.push_back(score_videos(read_predictions(predictions.front()), m, splits[k].ids(p), logistic,
                                           "split " + std::to_string(k)));
        }
    }
    nlohmann::json j;
    j["splits"] = nlohmann::json::array();
    for (const auto& r : reports) j["splits"].push_back(evaluation::to_json(r));
    if (reports.size() > 1) {
        const auto agg = evaluation::aggregate(reports);
        j["aggregate"] = evaluation::to_json(agg);
        out << evaluation::format_table(method, agg);
    } else {
        out << evaluation::format_table(method, reports.front());
    }
    j["logistic"] = logistic;
    ds::write_file(fs::path(c.out_dir) / "metrics.json", j.dump(2) + "\n");
    write_echo("eval", c, s,
               describe_inputs({{"manifest", manifest_path},
                                {"splits", splits_path},
                                {"split_index", split_index},
                                {"partition", partition},
                                {"logistic", logistic ? "true" : "false"}}));
    return kExitOk;
}

int cmd_gmad(const Common& c, const std::string& a_path, const std::string& b_path, const std::string& manifest_path,
             const std::string& dimension, const std::string& eps_text, std::size_t top, bool swap,
             std::ostream& out) {
    const Settings s = resolve(c, {});
    const DimensionKey key = parse_dimension(dimension);
    auto scores = [&](const std::string& path) {
        evaluation::ScoreMap map;
        for (const auto& [id, dims] : read_predictions(path)) {
            if (auto it = dims.find(key); it != dims.end()) map[id] = it->second;
        }
        if (map.size() < 2) throw FormatError(path + ": fewer than 2 videos carry a " + dimension + " score");
        return map;
    };
    const evaluation::ScoreMap a = scores(a_path), b = scores(b_path);
    double eps = 0;
    std::string eps_source;
    if (!eps_text.empty()) {
        eps = parse_real("eps", eps_text);
        eps_source = "given";
    } else if (!manifest_path.empty()) {
        evaluation::ScoreMap mos;
        for (const auto& r : ds::read_manifest(manifest_path).records) {
            if (!a.count(r.video_id)) continue;
            if (key.dimension == Dimension::word) {
                if (key.position >= 1 && key.position <= r.word_mask.size() && r.word_mask[key.position - 1]) {
                    mos[r.video_id] = r.labels.word[key.position - 1];
                }
            } else if (key.dimension == Dimension::spatial) mos[r.video_id] = r.labels.spatial;
            else if (key.dimension == Dimension::temporal) mos[r.video_id] = r.labels.temporal;
            else if (key.dimension == Dimension::overall_percept) mos[r.video_id] = r.labels.overall_percept;
            else mos[r.video_id] = r.labels.sentence;
        }
        eps = evaluation::default_gmad_eps(mos);
        eps_source = "0.05 x MOS range";
    } else {
        eps = evaluation::default_gmad_eps(swap ? b : a);
        eps_source = "0.05 x defender score range";
    }
    const std::string name_a = fs::path(a_path).stem().string(), name_b = fs::path(b_path).stem().string();
    const auto pairs = evaluation::gmad_pairs(a, b, eps, top, swap, name_a, name_b);
    nlohmann::json j{{"dimension", key.to_string()}, {"eps", eps}, {"eps_source", eps_source}, {"pairs", nlohmann::json::array()}};
    char line[256];
    out << "gMAD on " << key.to_string() << ", defender tolerance " << format_double(eps) << " (" << eps_source << ")\n";
    out << "defender     attacker     video_a      video_b      |d_def|   |d_att|\n";
    for (const auto& p : pairs) {
        j["pairs"].push_back({{"defender", p.defender},
                              {"attacker", p.attacker},
                              {"video_a", p.video_a},
                              {"video_b", p.video_b},
                              {"defender_delta", p.defender_delta},
                              {"attacker_delta", p.attacker_delta}});
        std::snprintf(line, sizeof line, "%-12s %-12s %-12s %-12s %8.4f  %8.4f\n", p.defender.c_str(), p.attacker.c_str(),
                      p.video_a.c_str(), p.video_b.c_str(), p.defender_delta, p.attacker_delta);
        out << line;
    }
    ds::write_file(fs::path(c.out_dir) / "gmad.json", j.dump(2) + "\n");
    write_echo("gmad", c, s, describe_inputs({{"a", a_path}, {"b", b_path}, {"dimension", dimension}}));
    return kExitOk;
}

int cmd_gradcheck(const Common& c, double tolerance, double step, std::ostream& out) {
    Settings s = resolve(c, {});
    // The micro-config unless the user overrides individual keys.
    const std::pair<const char*, const char*> micro[] = {
        {"frames", "2"}, {"height", "2"}, {"width", "2"}, {"tokens", "3"}, {"channels", "4"},
        {"spatial_experts", "2"}, {"temporal_experts", "2"}, {"alignment_experts", "2"},
        {"expert_hidden", "6"}, {"dtype", "f64"}};
    for (const auto& [key, value] : micro) {
        if (!s.explicitly_set(key)) s.set(key, value);
    }
    const bool fixed_k = s.explicitly_set("top_k") || s.explicitly_set("joint_top_k");
    std::vector<std::size_t> ks = fixed_k ? std::vector<std::size_t>{0} : std::vector<std::size_t>{1, 2};
    bool ok = true;
    nlohmann::json j = nlohmann::json::array();
    for (std::size_t k : ks) {
        Settings run = s;
        if (k) {
            run.set("top_k", std::to_string(k));
            run.set("joint_top_k", std::to_string(k));
        }
        const model::ModelConfig config = run.model_config();
        const auto start = std::chrono::steady_clock::now();
        const auto r = training::gradient_check(config, run.seed(), 4, run.schedule().weights, step);
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool pass = r.passed(tolerance);
        ok &= pass;
        out << (pass ? "PASS" : "FAIL") << "  top_k=" << config.top_k << " joint_top_k=" << config.joint_top_k
            << "  checked " << r.checked << " scalars, max relative error " << r.max_rel_error << " at "
            << r.worst.parameter << "[" << r.worst.index << "]  (" << format_double(std::round(seconds * 100) / 100)
            << " s)\n";
        j.push_back({{"top_k", config.top_k},
                     {"checked", r.checked},
                     {"max_rel_error", r.max_rel_error},
                     {"worst", r.worst.parameter + "[" + std::to_string(r.worst.index) + "]"},
                     {"pass", pass},
                     {"seconds", seconds}});
        s = run;
    }
    ds::write_file(fs::path(c.out_dir) / "gradcheck.json", j.dump(2) + "\n");
    write_echo("gradcheck", c, s, describe_inputs({{"tolerance", format_double(tolerance)}, {"step", format_double(step)}}));
    return ok ? kExitOk : kExitNumerical;
}

}  // namespace

// ---------------------------------------------------------------------------
// Entry point

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"EduVQA: structured mixture-of-experts quality prediction for generated educational videos"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every subcommand");

    Common common;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with planted structure");
    add_common(synth, common);
    std::size_t videos = 0;
    std::string noise;
    synth->add_option("--videos", videos, "Number of videos (default 400)");
    synth->add_option("--noise", noise, "Feature noise sigma (default 0.1)");

    auto* split = app.add_subcommand("split", "Write stratified 6:2:2 splits");
    add_common(split, common);
    std::string manifest, splits_path;
    std::size_t count = 10;
    split->add_option("--manifest", manifest, "manifest.jsonl")->required()->check(CLI::ExistingFile);
    split->add_option("--count", count, "Number of splits (seeds seed, seed+1, ...)")->capture_default_str();

    auto* mos = app.add_subcommand("mos", "Consolidate raw ratings into MOS");
    add_common(mos, common);
    std::string ratings;
    double reject_fraction = 0.05, threshold = 0.8;
    mos->add_option("--ratings", ratings, "CSV annotator_id,video_id,dimension,score")->required()->check(CLI::ExistingFile);
    mos->add_option("--reject-fraction", reject_fraction, "Annotator outlier fraction that triggers rejection")
        ->capture_default_str();
    mos->add_option("--consistency-threshold", threshold, "SRCC threshold for the consistency count")
        ->capture_default_str();

    auto* train = app.add_subcommand("train", "Train on one split");
    add_common(train, common);
    std::size_t split_index = 0;
    std::string ablation, epochs, lr0, batch;
    train->add_option("--manifest", manifest, "manifest.jsonl")->required()->check(CLI::ExistingFile);
    train->add_option("--splits", splits_path, "splits.json")->required()->check(CLI::ExistingFile);
    train->add_option("--split-index", split_index, "Which split to train on")->capture_default_str();
    train->add_option("--ablation", ablation, "Ablation row 1-7");
    train->add_option("--epochs", epochs, "Epochs");
    train->add_option("--lr0", lr0, "Initial learning rate");
    train->add_option("--batch", batch, "Batch size");

    auto* predict = app.add_subcommand("predict", "Score videos with a checkpoint");
    add_common(predict, common);
    std::string checkpoint, partition = "all";
    predict->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    predict->add_option("--manifest", manifest, "manifest.jsonl")->required()->check(CLI::ExistingFile);
    predict->add_option("--splits", splits_path, "splits.json")->check(CLI::ExistingFile);
    predict->add_option("--split-index", split_index, "Split used with --partition")->capture_default_str();
    predict->add_option("--partition", partition, "train, val, test or all")->capture_default_str();

    auto* eval = app.add_subcommand("eval", "Compute SRCC/PLCC/KRCC/RMSE per dimension");
    add_common(eval, common);
    std::vector<std::string> predictions;
    std::string eval_index = "0", eval_partition = "test", method = "EduVQA";
    bool logistic = false;
    eval->add_option("--manifest", manifest, "manifest.jsonl with labels")->required()->check(CLI::ExistingFile);
    eval->add_option("--predictions", predictions, "predictions.csv; one per split with --split-index all")
        ->required()
        ->check(CLI::ExistingFile);
    eval->add_option("--splits", splits_path, "splits.json")->check(CLI::ExistingFile);
    eval->add_option("--split-index", eval_index, "Split number or 'all'")->capture_default_str();
    eval->add_option("--partition", eval_partition, "Partition to score")->capture_default_str();
    eval->add_flag("--logistic", logistic, "Fit the 4-parameter logistic map before PLCC/RMSE");
    eval->add_option("--method", method, "Method name in the table")->capture_default_str();

    auto* gmad = app.add_subcommand("gmad", "Group maximum differentiation pairs between two models");
    add_common(gmad, common);
    std::string a_path, b_path, dimension = "overall_percept", eps;
    std::size_t top = 10;
    bool swap = false;
    gmad->add_option("--a", a_path, "predictions.csv of model A (defender)")->required()->check(CLI::ExistingFile);
    gmad->add_option("--b", b_path, "predictions.csv of model B (attacker)")->required()->check(CLI::ExistingFile);
    gmad->add_option("--manifest", manifest, "manifest.jsonl; sets the default tolerance from MOS")
        ->check(CLI::ExistingFile);
    gmad->add_option("--dimension", dimension, "Dimension key")->capture_default_str();
    gmad->add_option("--eps", eps, "Defender tolerance (default 0.05 x MOS range)");
    gmad->add_option("--top", top, "Pairs to report")->capture_default_str();
    gmad->add_flag("--swap", swap, "Let B defend and A attack");

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
    add_common(gradcheck, common);
    double tolerance = 1e-4, step = 1e-4;
    gradcheck->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();
    gradcheck->add_option("--step", step, "Central difference step")->capture_default_str();

    // CLI11 prints through std::cout/cerr; route them to the given streams.
    auto* old_out = std::cout.rdbuf(out.rdbuf());
    auto* old_err = std::cerr.rdbuf(err.rdbuf());
    struct Restore {
        std::streambuf *o, *e;
        ~Restore() {
            std::cout.rdbuf(o);
            std::cerr.rdbuf(e);
        }
    } restore{old_out, old_err};

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    auto sink = std::make_shared<spdlog::sinks::ostream_sink_st>(err);
    auto logger = std::make_shared<spdlog::logger>("eduvqa", sink);
    logger->set_pattern("[%l] %v");
    logger->set_level(spdlog::level::from_str(common.log_level));
    auto previous = spdlog::default_logger();
    spdlog::set_default_logger(logger);
    struct RestoreLogger {
        std::shared_ptr<spdlog::logger> p;
        ~RestoreLogger() { spdlog::set_default_logger(p); }
    } restore_logger{previous};

    try {
        fs::create_directories(common.out_dir);
        if (synth->parsed()) return cmd_synth(common, videos, noise, out);
        if (split->parsed()) return cmd_split(common, manifest, count, out);
        if (mos->parsed()) return cmd_mos(common, ratings, reject_fraction, threshold, out);
        if (train->parsed()) {
            return cmd_train(common, {{"ablation", ablation}, {"epochs", epochs}, {"lr0", lr0}, {"batch", batch}},
                             manifest, splits_path, split_index, out);
        }
        if (predict->parsed()) return cmd_predict(common, checkpoint, manifest, splits_path, split_index, partition, out);
        if (eval->parsed()) {
            return cmd_eval(common, manifest, predictions, splits_path, eval_index, eval_partition, logistic, method, out);
        }
        if (gmad->parsed()) return cmd_gmad(common, a_path, b_path, manifest, dimension, eps, top, swap, out);
        if (gradcheck->parsed()) return cmd_gradcheck(common, tolerance, step, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const Error& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        err << "file error: " << e.what() << "\n";
        return kExitData;
    } catch (const nlohmann::json::exception& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}

}  // namespace eduvqa::cli

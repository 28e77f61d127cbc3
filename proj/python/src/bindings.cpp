#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "eduvqa/datastore.hpp"
#include "eduvqa/errors.hpp"
#include "eduvqa/evaluation.hpp"
#include "eduvqa/model.hpp"
#include "eduvqa/subjective.hpp"
#include "eduvqa/training.hpp"

namespace py = pybind11;
namespace ds = eduvqa::datastore;
using namespace eduvqa;
using numerics::Tensor;

namespace {

// JSON crosses the boundary as text through the stdlib json module.
nlohmann::json to_cpp(const py::handle& obj) {
    if (obj.is_none()) return nlohmann::json::object();
    const auto dumps = py::module_::import("json").attr("dumps");
    return nlohmann::json::parse(dumps(obj).cast<std::string>());
}

py::object to_py(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

model::ModelConfig config_from(const py::handle& obj) {
    nlohmann::json j = model::ModelConfig{}.to_json();
    const nlohmann::json overrides = to_cpp(obj);
    for (const auto& [k, v] : overrides.items()) j[k] = v;
    return model::ModelConfig::from_json(j);
}

py::array_t<double> to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

Tensor from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
                  numerics::DType dtype = numerics::DType::f64) {
    numerics::Shape shape(a.shape(), a.shape() + a.ndim());
    std::vector<double> v(a.data(), a.data() + a.size());
    return Tensor(std::move(shape), std::move(v)).as_dtype(dtype);
}

std::vector<std::uint8_t> full_mask(const model::ModelConfig& c) { return std::vector<std::uint8_t>(c.words(), 1); }

py::dict bundle_dict(const model::PredictionBundle& b) {
    py::dict d;
    if (b.spatial) d["spatial"] = *b.spatial;
    if (b.temporal) d["temporal"] = *b.temporal;
    d["overall_percept"] = b.overall;
    if (!b.word.empty()) {
        py::dict words;
        for (std::size_t i = 0; i < b.word.size(); ++i) {
            if (b.word_mask[i]) words[py::int_(i + 1)] = b.word[i];
        }
        d["word"] = words;
    }
    d["sentence"] = b.sentence;
    py::list mixtures;
    for (const auto& m : b.mixtures) {
        py::dict e;
        e["name"] = m.name;
        e["pool"] = m.pool;
        e["experts"] = m.weights.indices;
        e["weights"] = m.weights.weights;
        mixtures.append(e);
    }
    d["mixtures"] = mixtures;
    return d;
}

struct PyModel {
    model::EduVqaModel model;

    py::dict predict(const py::array_t<double>& vst, const py::array_t<double>& blip,
                     std::optional<std::vector<std::uint8_t>> mask) const {
        model::SampleFeatures s;
        s.vst = from_array(vst);
        s.blip = from_array(blip);
        s.word_mask = mask ? *mask : full_mask(model.config());
        return bundle_dict(model.predict(s));
    }
};

py::dict metrics_dict(const evaluation::DimensionMetrics& m) {
    py::dict d;
    d["srcc"] = m.srcc;
    d["plcc"] = m.plcc;
    d["krcc"] = m.krcc;
    d["rmse"] = m.rmse;
    d["n"] = m.n;
    d["degenerate"] = m.degenerate;
    return d;
}

}  // namespace

PYBIND11_MODULE(_eduvqa, m) {
    m.doc() = "EduVQA core: structured mixture-of-experts video quality model";

    auto base = py::register_exception<Error>(m, "Error");
    py::register_exception<ShapeError>(m, "ShapeError", base);
    py::register_exception<DegenerateInputError>(m, "DegenerateInputError", base);
    py::register_exception<UsageError>(m, "UsageError", base);
    py::register_exception<NumericalError>(m, "NumericalError", base);
    py::register_exception<ConfigError>(m, "ConfigError", base);
    auto format = py::register_exception<FormatError>(m, "FormatError", base);
    // Subclasses must be registered for the translator to map them to FormatError.
    py::register_exception<BadMagicError>(m, "BadMagicError", format);
    py::register_exception<UnsupportedVersionError>(m, "UnsupportedVersionError", format);
    py::register_exception<TruncationError>(m, "TruncationError", format);

    // Configuration.
    m.def("default_config", [] { return to_py(model::ModelConfig{}.to_json()); });
    m.def(
        "ablation_config",
        [](int id, const py::object& base) { return to_py(model::ablation_config(id, config_from(base)).to_json()); },
        py::arg("id"), py::arg("base") = py::none());
    m.def("default_schedule", [] { return to_py(training::TrainSchedule{}.to_json()); });

    // Model.
    py::class_<PyModel>(m, "Model")
        .def(py::init([](const py::object& config, std::uint64_t seed) {
                 return PyModel{model::EduVqaModel::initialize(config_from(config), seed)};
             }),
             py::arg("config") = py::none(), py::arg("seed") = 0)
        .def_property_readonly("config", [](const PyModel& p) { return to_py(p.model.config().to_json()); })
        .def("parameter_names", [](const PyModel& p) { return p.model.params().names(); })
        .def("parameter", [](const PyModel& p, const std::string& name) { return to_array(p.model.params().at(name)); })
        .def("predict", &PyModel::predict, py::arg("vst"), py::arg("blip"), py::arg("word_mask") = py::none())
        .def("save", [](const PyModel& p, const std::filesystem::path& path) {
            ds::save_checkpoint(path, {p.model.config(), p.model.params(), std::nullopt});
        });
    m.def(
        "load_checkpoint",
        [](const std::filesystem::path& path) {
            ds::Checkpoint c = ds::load_checkpoint(path);
            return PyModel{model::EduVqaModel(c.config, std::move(c.params))};
        },
        py::arg("path"));

    // EDUT tensors.
    m.def("read_tensor", [](const std::filesystem::path& p) { return to_array(ds::read_tensor(p)); }, py::arg("path"));
    m.def(
        "write_tensor",
        [](const std::filesystem::path& p, const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
           const std::string& dtype) { ds::write_tensor(p, from_array(a, numerics::parse_dtype(dtype))); },
        py::arg("path"), py::arg("array"), py::arg("dtype") = "f64");

    // Metrics.
    using Vec = std::vector<double>;
    m.def("srcc", [](const Vec& p, const Vec& q) { return evaluation::srcc(p, q).value; });
    m.def("plcc", [](const Vec& p, const Vec& q) { return evaluation::plcc(p, q).value; });
    m.def("krcc", [](const Vec& p, const Vec& q) { return evaluation::krcc(p, q).value; });
    m.def("rmse", [](const Vec& p, const Vec& q) { return evaluation::rmse(p, q); });
    m.def(
        "compute_metrics",
        [](const Vec& p, const Vec& q, bool logistic) { return metrics_dict(evaluation::compute_metrics(p, q, logistic)); },
        py::arg("pred"), py::arg("mos"), py::arg("logistic") = false);
    m.def(
        "gmad_pairs",
        [](const evaluation::ScoreMap& a, const evaluation::ScoreMap& b, std::optional<double> eps, std::size_t top,
           bool swap) {
            const double e = eps ? *eps : evaluation::default_gmad_eps(swap ? b : a);
            py::list out;
            for (const auto& g : evaluation::gmad_pairs(a, b, e, top, swap)) {
                py::dict d;
                d["defender"] = g.defender;
                d["attacker"] = g.attacker;
                d["video_a"] = g.video_a;
                d["video_b"] = g.video_b;
                d["defender_delta"] = g.defender_delta;
                d["attacker_delta"] = g.attacker_delta;
                out.append(d);
            }
            return out;
        },
        py::arg("a"), py::arg("b"), py::arg("eps") = py::none(), py::arg("top") = 10, py::arg("swap") = false);

    // Subjective consolidation.
    m.def(
        "consolidate",
        [](const std::vector<std::tuple<std::string, std::string, std::string, double>>& rows, double reject_fraction) {
            std::vector<RatingRecord> ratings;
            for (const auto& [a, v, d, s] : rows) ratings.push_back({a, v, parse_dimension(d), s});
            return to_py(subjective::to_json(subjective::consolidate(ratings, reject_fraction)));
        },
        py::arg("ratings"), py::arg("reject_fraction") = 0.05,
        "ratings: (annotator_id, video_id, dimension, score) tuples");
    m.def(
        "consolidate_csv",
        [](const std::filesystem::path& p, double reject_fraction) {
            return to_py(subjective::to_json(subjective::consolidate(subjective::read_ratings_csv(p), reject_fraction)));
        },
        py::arg("path"), py::arg("reject_fraction") = 0.05);

    // Datasets and splits.
    m.def(
        "generate_synthetic",
        [](const std::filesystem::path& dir, const py::object& config, std::size_t videos, double noise,
           std::uint64_t seed) {
            ds::SyntheticOptions o;
            o.shape = config_from(config);
            o.videos = videos;
            o.noise = noise;
            o.seed = seed;
            const auto data = ds::gen_synthetic(o);
            ds::write_dataset(dir, data);
            return data.manifest.records.size();
        },
        py::arg("directory"), py::arg("config") = py::none(), py::arg("videos") = 400, py::arg("noise") = 0.1,
        py::arg("seed") = 0);
    m.def(
        "read_manifest",
        [](const std::filesystem::path& p) {
            py::list out;
            for (const auto& r : ds::read_manifest(p).records) out.append(to_py(ds::to_json(r)));
            return out;
        },
        py::arg("path"));
    m.def(
        "make_splits",
        [](const std::filesystem::path& manifest, std::size_t count, std::uint64_t seed,
           std::optional<std::filesystem::path> out) {
            const auto splits = ds::make_splits(ds::read_manifest(manifest).records, count, seed);
            if (out) ds::write_splits(*out, splits);
            py::list l;
            for (const auto& s : splits) l.append(to_py(ds::to_json(s)));
            return l;
        },
        py::arg("manifest"), py::arg("count") = 10, py::arg("seed") = 0, py::arg("out") = py::none());

    // Training.
    m.def(
        "train",
        [](const std::filesystem::path& manifest_path, const std::filesystem::path& splits_path,
           std::size_t split_index, const py::object& config, const py::object& schedule) {
            const auto manifest = ds::read_manifest(manifest_path);
            const auto splits = ds::read_splits(splits_path);
            if (split_index >= splits.size()) throw UsageError("split_index out of range");
            const auto cfg = config_from(config);
            nlohmann::json sj = training::TrainSchedule{}.to_json();
            const nlohmann::json overrides = to_cpp(schedule);
            for (const auto& [k, v] : overrides.items()) sj[k] = v;
            const auto sched = training::TrainSchedule::from_json(sj);
            const auto train_set = training::load_partition(manifest, splits[split_index], ds::Partition::train);
            const auto val_set = training::load_partition(manifest, splits[split_index], ds::Partition::val);
            training::TrainResult r;
            {
                py::gil_scoped_release release;
                r = training::train(cfg, sched, train_set, val_set);
            }
            py::list log;
            for (const auto& e : r.log) log.append(to_py(e.to_json()));
            py::dict out;
            out["model"] = PyModel{model::EduVqaModel(cfg, r.best)};
            out["best_epoch"] = r.best_epoch;
            out["best_val"] = r.best_val;
            out["log"] = log;
            out["aborted"] = r.aborted;
            out["abort_reason"] = r.abort_reason;
            return out;
        },
        py::arg("manifest"), py::arg("splits"), py::arg("split_index") = 0, py::arg("config") = py::none(),
        py::arg("schedule") = py::none());
    m.def(
        "gradient_check",
        [](const py::object& config, std::uint64_t seed, std::size_t batch, double step) {
            numerics::GradCheckReport r;
            const auto cfg = config_from(config);
            {
                py::gil_scoped_release release;
                r = training::gradient_check(cfg, seed, batch, {}, step);
            }
            py::dict d;
            d["checked"] = r.checked;
            d["max_rel_error"] = r.max_rel_error;
            d["worst"] = r.worst.parameter + "[" + std::to_string(r.worst.index) + "]";
            return d;
        },
        py::arg("config"), py::arg("seed") = 0, py::arg("batch") = 4, py::arg("step") = 1e-4);
}

#include "eduvqa/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include "eduvqa/errors.hpp"
#include "eduvqa/evaluation.hpp"

namespace eduvqa::datastore {

using numerics::DType;
using numerics::Shape;

// ---------------------------------------------------------------------------
// Byte helpers

namespace {

void put_le(std::string& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    std::uint64_t le(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    std::string_view take(std::size_t n) {
        need(n);
        std::string_view s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw TruncationError(what_ + ": truncated", pos_ + n, bytes_.size());
        }
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::string& what() const { return what_; }

private:
    std::string_view bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + path.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("write failed for " + path.string());
    }
    fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// EDUT

std::string encode_tensor(const Tensor& t) {
    if (t.rank() > 255) throw ShapeError("EDUT supports at most 255 dimensions");
    std::string out = "EDUT";
    out.push_back(static_cast<char>(kTensorVersion));
    out.push_back(static_cast<char>(t.dtype()));
    out.push_back(static_cast<char>(t.rank()));
    for (std::size_t d : t.shape()) put_le(out, d, 8);
    for (double v : t.values()) {
        if (t.dtype() == DType::f32) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_le(out, bits, 4);
        } else {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_le(out, bits, 8);
        }
    }
    return out;
}

Tensor decode_tensor(std::string_view bytes, const std::string& what) {
    Reader r(bytes, what);
    if (bytes.size() < 4 || bytes.substr(0, 4) != "EDUT") {
        throw BadMagicError(what + ": not an EDUT tensor (bad magic)");
    }
    r.take(4);
    const auto version = r.le(1);
    if (version != kTensorVersion) {
        throw UnsupportedVersionError(what + ": unsupported EDUT version " + std::to_string(version));
    }
    const auto dtype = r.le(1);
    if (dtype > 1) throw FormatError(what + ": unknown dtype code " + std::to_string(dtype));
    const auto ndim = r.le(1);
    Shape shape;
    for (std::uint64_t i = 0; i < ndim; ++i) {
        shape.push_back(r.le(8));
        if (shape.back() == 0) throw FormatError(what + ": zero extent in tensor header");
    }
    std::size_t count = 1;
    for (std::size_t d : shape) count *= d;
    const std::size_t width = dtype == 0 ? 4 : 8;
    const std::size_t expected = r.position() + count * width;
    if (bytes.size() < expected) throw TruncationError(what + ": payload truncated", expected, bytes.size());
    if (bytes.size() > expected) {
        throw FormatError(what + ": " + std::to_string(bytes.size() - expected) + " trailing bytes");
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        if (dtype == 0) {
            const auto bits = static_cast<std::uint32_t>(r.le(4));
            float f;
            std::memcpy(&f, &bits, 4);
            values[i] = f;
        } else {
            const std::uint64_t bits = r.le(8);
            std::memcpy(&values[i], &bits, 8);
        }
    }
    return Tensor(std::move(shape), std::move(values), static_cast<DType>(dtype));
}

void write_tensor(const fs::path& path, const Tensor& t) { write_file(path, encode_tensor(t)); }

Tensor read_tensor(const fs::path& path) { return decode_tensor(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Manifest

const std::array<std::string, 10> kGeneratorModels{
    "CogVideo", "Gen-3", "Hotshot-XL", "Dreamina", "Kling",
    "LaVie",    "LVDM",  "Show-1",     "Text2Video-Zero", "VideoCrafter"};
const std::array<std::string, 4> kCategories{"Numbers", "Geometry", "Measurement", "Probability"};

nlohmann::json to_json(const VideoRecord& r) {
    nlohmann::json word = nlohmann::json::array();
    for (std::size_t i = 0; i < r.labels.word.size(); ++i) {
        word.push_back(i < r.word_mask.size() && r.word_mask[i] ? nlohmann::json(r.labels.word[i])
                                                               : nlohmann::json(nullptr));
    }
    return {{"video_id", r.video_id},
            {"prompt", r.prompt},
            {"tokens", r.tokens},
            {"generator_model", r.generator_model},
            {"category", r.category},
            {"f_vst", r.f_vst},
            {"f_blip", r.f_blip},
            {"labels",
             {{"spatial", r.labels.spatial},
              {"temporal", r.labels.temporal},
              {"overall_percept", r.labels.overall_percept},
              {"word", word},
              {"sentence", r.labels.sentence}}},
            {"word_mask", r.word_mask}};
}

namespace {

template <typename T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw FormatError(where + ": field '" + key + "' has the wrong type");
    }
}

double label(const nlohmann::json& labels, const char* key, const std::string& where) {
    const double v = field<double>(labels, key, where + " labels");
    if (!(v >= 1.0 && v <= 5.0)) throw FormatError(where + ": label '" + key + "' outside [1, 5]");
    return v;
}

}  // namespace

VideoRecord record_from_json(const nlohmann::json& j, const std::string& where) {
    static const std::set<std::string> known{"video_id", "prompt",  "tokens", "generator_model",
                                             "category", "f_vst",   "f_blip", "labels",
                                             "word_mask"};
    if (!j.is_object()) throw FormatError(where + ": expected a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw FormatError(where + ": unknown field '" + key + "'");
    }
    VideoRecord r;
    r.video_id = field<std::string>(j, "video_id", where);
    if (r.video_id.empty()) throw FormatError(where + ": empty video_id");
    const std::string at = where + " (" + r.video_id + ")";
    r.prompt = field<std::string>(j, "prompt", at);
    r.tokens = field<std::vector<std::string>>(j, "tokens", at);
    if (r.tokens.size() < 2) throw FormatError(at + ": need the sentence slot and at least one word token");
    r.generator_model = field<std::string>(j, "generator_model", at);
    if (std::find(kGeneratorModels.begin(), kGeneratorModels.end(), r.generator_model) == kGeneratorModels.end()) {
        throw FormatError(at + ": unknown generator_model '" + r.generator_model + "'");
    }
    r.category = field<std::string>(j, "category", at);
    if (std::find(kCategories.begin(), kCategories.end(), r.category) == kCategories.end()) {
        throw FormatError(at + ": unknown category '" + r.category + "'");
    }
    r.f_vst = field<std::string>(j, "f_vst", at);
    r.f_blip = field<std::string>(j, "f_blip", at);
    const auto mask = field<std::vector<int>>(j, "word_mask", at);
    for (int m : mask) {
        if (m != 0 && m != 1) throw FormatError(at + ": word_mask entries must be 0 or 1");
        r.word_mask.push_back(static_cast<std::uint8_t>(m));
    }
    if (r.word_mask.size() != r.tokens.size() - 1) {
        throw FormatError(at + ": word_mask has " + std::to_string(r.word_mask.size()) +
                          " entries for " + std::to_string(r.tokens.size() - 1) + " word tokens");
    }
    const auto& labels = field<nlohmann::json>(j, "labels", at);
    r.labels.spatial = label(labels, "spatial", at);
    r.labels.temporal = label(labels, "temporal", at);
    r.labels.overall_percept = label(labels, "overall_percept", at);
    r.labels.sentence = label(labels, "sentence", at);
    const auto& word = field<nlohmann::json>(labels, "word", at + " labels");
    if (!word.is_array() || word.size() != r.word_mask.size()) {
        throw FormatError(at + ": word labels must have one entry per word token");
    }
    for (std::size_t i = 0; i < word.size(); ++i) {
        if (!r.word_mask[i]) {
            if (!word[i].is_null() && !word[i].is_number()) throw FormatError(at + ": bad masked word label");
            r.labels.word.push_back(0.0);
            continue;
        }
        if (!word[i].is_number()) throw FormatError(at + ": word label " + std::to_string(i + 1) + " missing");
        const double v = word[i].get<double>();
        if (!(v >= 1.0 && v <= 5.0)) throw FormatError(at + ": word label outside [1, 5]");
        r.labels.word.push_back(v);
    }
    return r;
}

std::string manifest_text(const Manifest& manifest) {
    std::string out;
    if (manifest.recipe) out += nlohmann::json{{"recipe", *manifest.recipe}}.dump() + "\n";
    for (const auto& r : manifest.records) out += to_json(r).dump() + "\n";
    return out;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
    write_file(path, manifest_text(manifest));
}

Manifest read_manifest(const fs::path& path) {
    Manifest m;
    m.directory = path.parent_path();
    std::istringstream in(read_file(path));
    std::string line;
    std::size_t line_no = 0;
    std::set<std::string> ids;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.filename().string() + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(where + ": invalid JSON (" + e.what() + ")");
        }
        if (j.is_object() && j.size() == 1 && j.contains("recipe")) {
            if (!m.records.empty() || m.recipe) throw FormatError(where + ": recipe must be the first line");
            m.recipe = j["recipe"];
            continue;
        }
        VideoRecord r = record_from_json(j, where);
        if (!ids.insert(r.video_id).second) throw FormatError(where + ": duplicate video_id " + r.video_id);
        m.records.push_back(std::move(r));
    }
    return m;
}

model::SampleFeatures load_features(const Manifest& manifest, const VideoRecord& record) {
    model::SampleFeatures s;
    s.vst = read_tensor(manifest.directory / record.f_vst);
    s.blip = read_tensor(manifest.directory / record.f_blip);
    s.word_mask = record.word_mask;
    if (s.vst.rank() != 4) throw FormatError(record.f_vst + ": expected a [T, H, W, C] tensor");
    if (s.blip.rank() != 3) throw FormatError(record.f_blip + ": expected a [T, L, C] tensor");
    if (s.blip.shape()[1] != record.token_count()) {
        throw FormatError(record.f_blip + ": token axis does not match the record's token count");
    }
    return s;
}

// ---------------------------------------------------------------------------
// Splits

std::string partition_name(Partition p) {
    switch (p) {
        case Partition::train: return "train";
        case Partition::val: return "val";
        case Partition::test: return "test";
    }
    return "?";
}

std::vector<std::string> SplitSpec::ids(Partition p) const {
    std::vector<std::string> out;
    for (const auto& [id, part] : assignment) {
        if (part == p) out.push_back(id);
    }
    return out;
}

std::array<std::size_t, 3> partition_counts(std::size_t n) {
    static constexpr std::size_t parts[3] = {6, 2, 2};
    std::array<std::size_t, 3> counts{};
    std::array<std::size_t, 3> remainder{};
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        counts[i] = n * parts[i] / 10;
        remainder[i] = n * parts[i] % 10;
        assigned += counts[i];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k]];
    return counts;
}

SplitSpec make_split(const std::vector<VideoRecord>& records, std::uint64_t seed) {
    std::map<std::pair<std::string, std::string>, std::vector<std::string>> strata;
    for (const auto& r : records) strata[{r.generator_model, r.category}].push_back(r.video_id);
    SplitSpec split;
    split.seed = seed;
    std::mt19937_64 rng(seed);
    for (auto& [key, ids] : strata) {
        std::sort(ids.begin(), ids.end());
        std::shuffle(ids.begin(), ids.end(), rng);
        if (ids.size() < 3) {
            spdlog::warn("stratum {}/{} has {} video(s); the 6:2:2 cut is proportional only", key.first,
                         key.second, ids.size());
        }
        const auto counts = partition_counts(ids.size());
        std::size_t pos = 0;
        for (int p = 0; p < 3; ++p) {
            for (std::size_t c = 0; c < counts[p]; ++c) {
                if (!split.assignment.emplace(ids[pos++], static_cast<Partition>(p)).second) {
                    throw FormatError("duplicate video_id in split input");
                }
            }
        }
    }
    return split;
}

std::vector<SplitSpec> make_splits(const std::vector<VideoRecord>& records, std::size_t seed_count,
                                   std::uint64_t base_seed) {
    if (records.empty()) throw DegenerateInputError("cannot split an empty corpus");
    std::vector<SplitSpec> out;
    for (std::size_t s = 0; s < seed_count; ++s) out.push_back(make_split(records, base_seed + s));
    return out;
}

nlohmann::json to_json(const SplitSpec& s) {
    nlohmann::json j{{"seed", s.seed}};
    for (Partition p : {Partition::train, Partition::val, Partition::test}) j[partition_name(p)] = s.ids(p);
    return j;
}

SplitSpec split_from_json(const nlohmann::json& j) {
    SplitSpec s;
    s.seed = field<std::uint64_t>(j, "seed", "split");
    for (Partition p : {Partition::train, Partition::val, Partition::test}) {
        for (const auto& id : field<std::vector<std::string>>(j, partition_name(p).c_str(), "split")) {
            if (!s.assignment.emplace(id, p).second) {
                throw FormatError("split " + std::to_string(s.seed) + ": video '" + id + "' assigned twice");
            }
        }
    }
    return s;
}

void write_splits(const fs::path& path, const std::vector<SplitSpec>& splits) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : splits) j.push_back(to_json(s));
    write_file(path, j.dump(1) + "\n");
}

std::vector<SplitSpec> read_splits(const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_array()) throw FormatError(path.string() + ": expected an array of splits");
    std::vector<SplitSpec> out;
    for (const auto& s : j) out.push_back(split_from_json(s));
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace {

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

void put_entry(std::string& out, const std::string& name, std::string_view data) {
    put_le(out, name.size(), 4);
    out += name;
    put_le(out, data.size(), 8);
    out += data;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
    std::vector<std::pair<std::string, std::string>> entries;
    const std::string config = c.config.to_json().dump();
    entries.push_back({"config.json", config});
    entries.push_back({"config.hash", hex64(fnv1a64(config))});
    for (const auto& [name, t] : c.params) entries.push_back({"param/" + name, encode_tensor(t)});
    if (c.state) {
        entries.push_back({"state.json", nlohmann::json{{"epoch", c.state->epoch},
                                                        {"step", c.state->step},
                                                        {"extra", c.state->extra}}
                                             .dump()});
        for (const auto& [name, t] : c.state->adam_m) entries.push_back({"adam_m/" + name, encode_tensor(t)});
        for (const auto& [name, t] : c.state->adam_v) entries.push_back({"adam_v/" + name, encode_tensor(t)});
    }
    std::string out = "EDUC";
    out.push_back(static_cast<char>(kCheckpointVersion));
    put_le(out, entries.size(), 4);
    for (const auto& [name, data] : entries) put_entry(out, name, data);
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what) {
    if (bytes.size() < 4 || bytes.substr(0, 4) != "EDUC") {
        throw BadMagicError(what + ": not an EDUC checkpoint (bad magic)");
    }
    Reader r(bytes, what);
    r.take(4);
    const auto version = r.le(1);
    if (version != kCheckpointVersion) {
        throw UnsupportedVersionError(what + ": unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = r.le(4);
    std::map<std::string, std::string_view> entries;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = r.le(4);
        std::string name(r.take(name_len));
        const auto size = r.le(8);
        if (!entries.emplace(name, r.take(size)).second) throw FormatError(what + ": duplicate entry " + name);
    }
    if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after the last entry");

    auto get = [&](const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw FormatError(what + ": missing entry " + name);
        return it->second;
    };
    const std::string_view config = get("config.json");
    if (get("config.hash") != hex64(fnv1a64(config))) {
        throw FormatError(what + ": config hash mismatch (file corrupted or edited)");
    }
    Checkpoint c;
    try {
        c.config = model::ModelConfig::from_json(nlohmann::json::parse(config));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(what + ": bad config.json (" + e.what() + ")");
    }
    std::optional<TrainingState> state;
    for (const auto& [name, data] : entries) {
        auto under = [&](const std::string& prefix) { return name.rfind(prefix, 0) == 0; };
        if (under("param/")) {
            c.params.add(name.substr(6), decode_tensor(data, what + ":" + name));
        } else if (under("adam_m/") || under("adam_v/")) {
            if (!state) state.emplace();
            auto& slot = under("adam_m/") ? state->adam_m : state->adam_v;
            slot.emplace(name.substr(7), decode_tensor(data, what + ":" + name));
        } else if (name == "state.json") {
            if (!state) state.emplace();
            const auto j = nlohmann::json::parse(data);
            state->epoch = j.at("epoch").get<std::size_t>();
            state->step = j.at("step").get<std::uint64_t>();
            state->extra = j.at("extra");
        } else if (name != "config.json" && name != "config.hash") {
            throw FormatError(what + ": unknown entry " + name);
        }
    }
    const ParameterSet expected = model::init_parameters(c.config, 0);
    if (expected.names() != c.params.names()) {
        throw FormatError(what + ": parameter names do not match the stored config");
    }
    for (const auto& [name, t] : expected) {
        if (t.shape() != c.params.at(name).shape()) {
            throw FormatError(what + ": parameter " + name + " has shape " +
                              numerics::shape_to_string(c.params.at(name).shape()) + ", expected " +
                              numerics::shape_to_string(t.shape()));
        }
    }
    c.state = std::move(state);
    return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }

Checkpoint load_checkpoint(const fs::path& path) {
    return decode_checkpoint(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

struct ChannelPlan {
    std::vector<double> baseline, gain;
};

ChannelPlan channel_plan(std::size_t channels, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> base(-0.5, 0.5), mag(0.5, 1.0);
    ChannelPlan p;
    for (std::size_t c = 0; c < channels; ++c) {
        p.baseline.push_back(base(rng));
        p.gain.push_back(mag(rng) * (rng() % 2 ? 1.0 : -1.0));
    }
    return p;
}

}  // namespace

SyntheticDataset gen_synthetic(const SyntheticOptions& o) {
    if (!(o.noise >= 0.0) || !std::isfinite(o.noise)) throw ConfigError("synthetic noise sigma must be >= 0");
    if (o.videos == 0) throw ConfigError("synthetic dataset needs at least one video");
    const auto& s = o.shape;
    if (s.channels < 4) throw ConfigError("synthetic features need at least 4 channels");
    if (s.tokens < 2) throw ConfigError("synthetic features need at least one word token");
    const std::size_t T = s.frames, H = s.height, W = s.width, D = s.tokens, C = s.channels;
    const std::size_t block = C / 4;

    std::mt19937_64 rng(o.seed);
    const ChannelPlan vst_plan = channel_plan(C, rng);
    const ChannelPlan blip_plan = channel_plan(C, rng);
    std::uniform_real_distribution<double> latent(1.0, 5.0);
    std::normal_distribution<double> unit(0.0, 1.0);
    const std::size_t min_words = std::min<std::size_t>(2, D - 1);

    SyntheticDataset data;
    nlohmann::json recipe{{"generator", "planted-linear"},
                          {"seed", o.seed},
                          {"noise_sigma", o.noise},
                          {"videos", o.videos},
                          {"shape", {{"frames", T}, {"height", H}, {"width", W}, {"tokens", D}, {"channels", C}}},
                          {"latents", "uniform [1, 5] per dimension, independent"},
                          {"value", "baseline[c] + gain[c] * (latent - 3) / 2 + N(0, noise_sigma^2)"},
                          {"vst_blocks",
                           {{"spatial", {0, block}}, {"temporal", {block, 2 * block}},
                            {"overall_percept", {2 * block, 3 * block}}, {"filler", {3 * block, C}}}},
                          {"blip_blocks",
                           {{"word", {0, block}}, {"sentence", {block, 2 * block}}, {"filler", {2 * block, C}}}},
                          {"blip_positions", "word channels tied at real word tokens; sentence channels at position 0"},
                          {"vst_baseline", vst_plan.baseline},
                          {"vst_gain", vst_plan.gain},
                          {"blip_baseline", blip_plan.baseline},
                          {"blip_gain", blip_plan.gain},
                          {"strata", "generator_model = i mod 10, category = (i / 10) mod 4"}};
    data.manifest.recipe = recipe;

    for (std::size_t i = 0; i < o.videos; ++i) {
        VideoRecord r;
        char id[32];
        std::snprintf(id, sizeof id, "vid%04zu", i);
        r.video_id = id;
        r.generator_model = kGeneratorModels[i % 10];
        r.category = kCategories[(i / 10) % 4];
        r.f_vst = "features/" + r.video_id + ".vst.edut";
        r.f_blip = "features/" + r.video_id + ".blip.edut";
        r.labels.spatial = latent(rng);
        r.labels.temporal = latent(rng);
        r.labels.overall_percept = latent(rng);
        r.labels.sentence = latent(rng);
        const std::size_t words = min_words + rng() % (D - min_words);
        r.tokens.push_back("[CLS]");
        r.prompt = r.category + " prompt " + std::to_string(i);
        for (std::size_t w = 1; w < D; ++w) {
            const bool real = w <= words;
            r.tokens.push_back(real ? "tok" + std::to_string(w) : "[PAD]");
            r.word_mask.push_back(real ? 1 : 0);
            r.labels.word.push_back(real ? latent(rng) : 0.0);
        }

        auto value = [&](const ChannelPlan& plan, std::size_t c, std::optional<double> q) {
            double v = plan.baseline[c] + o.noise * unit(rng);
            if (q) v += plan.gain[c] * (*q - 3.0) / 2.0;
            return v;
        };
        model::SampleFeatures f;
        f.word_mask = r.word_mask;
        std::vector<double> vst;
        vst.reserve(T * H * W * C);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t p = 0; p < H * W; ++p) {
                for (std::size_t c = 0; c < C; ++c) {
                    std::optional<double> q;
                    if (c < block) q = r.labels.spatial;
                    else if (c < 2 * block) q = r.labels.temporal;
                    else if (c < 3 * block) q = r.labels.overall_percept;
                    vst.push_back(value(vst_plan, c, q));
                }
            }
        }
        std::vector<double> blip;
        blip.reserve(T * D * C);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t d = 0; d < D; ++d) {
                for (std::size_t c = 0; c < C; ++c) {
                    std::optional<double> q;
                    if (d == 0 && c >= block && c < 2 * block) q = r.labels.sentence;
                    if (d > 0 && c < block && r.word_mask[d - 1]) q = r.labels.word[d - 1];
                    blip.push_back(value(blip_plan, c, q));
                }
            }
        }
        f.vst = Tensor({T, H, W, C}, std::move(vst), s.dtype);
        f.blip = Tensor({T, D, C}, std::move(blip), s.dtype);
        data.features.push_back(std::move(f));
        data.manifest.records.push_back(std::move(r));
    }
    return data;
}

void write_dataset(const fs::path& directory, const SyntheticDataset& data) {
    fs::create_directories(directory / "features");
    for (std::size_t i = 0; i < data.features.size(); ++i) {
        const VideoRecord& r = data.manifest.records[i];
        write_tensor(directory / r.f_vst, data.features[i].vst);
        write_tensor(directory / r.f_blip, data.features[i].blip);
    }
    write_manifest(directory / "manifest.jsonl", data.manifest);
}

// ---------------------------------------------------------------------------
// Ridge oracle

namespace {

std::vector<double> pooled(const Tensor& t, std::size_t channels) {
    std::vector<double> out(channels, 0.0);
    const std::size_t rows = t.size() / channels;
    for (std::size_t i = 0; i < t.size(); ++i) out[i % channels] += t[i] / static_cast<double>(rows);
    return out;
}

// Mean over frames of one token position of a [T, D, C] tensor.
std::vector<double> token(const Tensor& t, std::size_t position) {
    const std::size_t T = t.shape()[0], D = t.shape()[1], C = t.shape()[2];
    std::vector<double> out(C, 0.0);
    for (std::size_t f = 0; f < T; ++f) {
        for (std::size_t c = 0; c < C; ++c) out[c] += t[(f * D + position) * C + c] / static_cast<double>(T);
    }
    return out;
}

struct Samples {
    std::vector<std::vector<double>> x;
    std::vector<double> y;
};

double fit_and_score(const Samples& train, const Samples& test, double alpha) {
    const auto n = static_cast<Eigen::Index>(train.x.size());
    const auto p = static_cast<Eigen::Index>(train.x.at(0).size());
    Eigen::MatrixXd X(n, p);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) X(i, j) = train.x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        y(i) = train.y[static_cast<std::size_t>(i)];
    }
    const Eigen::RowVectorXd mx = X.colwise().mean();
    const double my = y.mean();
    const Eigen::MatrixXd Xc = X.rowwise() - mx;
    const Eigen::MatrixXd A = Xc.transpose() * Xc + alpha * static_cast<double>(n) *
                                                        Eigen::MatrixXd::Identity(p, p);
    const Eigen::VectorXd w = A.ldlt().solve(Xc.transpose() * (y.array() - my).matrix());
    std::vector<double> pred;
    for (const auto& row : test.x) {
        double v = my;
        for (std::size_t j = 0; j < row.size(); ++j) v += (row[j] - mx(static_cast<Eigen::Index>(j))) * w(static_cast<Eigen::Index>(j));
        pred.push_back(v);
    }
    return evaluation::srcc(pred, test.y).value;
}

}  // namespace

std::map<std::string, double> ridge_oracle(const std::vector<VideoRecord>& records,
                                           const std::vector<model::SampleFeatures>& features,
                                           const SplitSpec& split, double alpha) {
    if (records.size() != features.size()) throw ShapeError("ridge oracle: records and features differ in count");
    std::map<std::string, std::pair<Samples, Samples>> sets;  // dim -> (train, test)
    for (std::size_t i = 0; i < records.size(); ++i) {
        const VideoRecord& r = records[i];
        auto it = split.assignment.find(r.video_id);
        if (it == split.assignment.end() || it->second == Partition::val) continue;
        const bool is_train = it->second == Partition::train;
        const std::size_t C = features[i].vst.shape().back();
        auto add = [&](const std::string& dim, std::vector<double> x, double y) {
            Samples& s = is_train ? sets[dim].first : sets[dim].second;
            s.x.push_back(std::move(x));
            s.y.push_back(y);
        };
        const auto v = pooled(features[i].vst, C);
        add("spatial", v, r.labels.spatial);
        add("temporal", v, r.labels.temporal);
        add("overall_percept", v, r.labels.overall_percept);
        add("sentence", token(features[i].blip, 0), r.labels.sentence);
        for (std::size_t w = 0; w < r.word_mask.size(); ++w) {
            if (r.word_mask[w]) add("word", token(features[i].blip, w + 1), r.labels.word[w]);
        }
    }
    std::map<std::string, double> out;
    for (const auto& [dim, tt] : sets) {
        if (tt.first.x.size() < 2 || tt.second.x.size() < 2) continue;
        out[dim] = fit_and_score(tt.first, tt.second, alpha);
    }
    return out;
}

}  // namespace eduvqa::datastore

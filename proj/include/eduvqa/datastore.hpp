#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "eduvqa/model.hpp"
#include "eduvqa/types.hpp"

namespace eduvqa::datastore {

using numerics::ParameterSet;
using numerics::Tensor;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// EDUT tensor files:
//   "EDUT" | version u8 | dtype u8 (0 f32, 1 f64) | ndim u8 | dims u64 LE | payload LE

inline constexpr std::uint8_t kTensorVersion = 1;

std::string encode_tensor(const Tensor& t);
/// `what` names the source in error messages.
Tensor decode_tensor(std::string_view bytes, const std::string& what = "tensor");
void write_tensor(const fs::path& path, const Tensor& t);
Tensor read_tensor(const fs::path& path);

std::string read_file(const fs::path& path);
void write_file(const fs::path& path, std::string_view bytes);

// ---------------------------------------------------------------------------
// Manifest

extern const std::array<std::string, 10> kGeneratorModels;
extern const std::array<std::string, 4> kCategories;

/// One generated video. `tokens` has D entries with the sentence slot first;
/// word labels and mask cover positions 1..D-1.
struct VideoRecord {
    std::string video_id;
    std::string prompt;
    std::vector<std::string> tokens;
    std::string generator_model;
    std::string category;
    std::string f_vst;   // relative to the manifest directory
    std::string f_blip;
    QualityLabels labels;
    std::vector<std::uint8_t> word_mask;

    std::size_t token_count() const { return tokens.size(); }
};

nlohmann::json to_json(const VideoRecord& r);
/// Validates the schema; `where` prefixes error messages.
VideoRecord record_from_json(const nlohmann::json& j, const std::string& where = "record");

/// A JSONL manifest. An optional first line {"recipe": {...}} documents how
/// the data were produced; every other line is a VideoRecord.
struct Manifest {
    fs::path directory;
    std::optional<nlohmann::json> recipe;
    std::vector<VideoRecord> records;
};

Manifest read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const Manifest& manifest);
std::string manifest_text(const Manifest& manifest);

model::SampleFeatures load_features(const Manifest& manifest, const VideoRecord& record);

// ---------------------------------------------------------------------------
// Splits

enum class Partition : std::uint8_t { train = 0, val = 1, test = 2 };
std::string partition_name(Partition p);

struct SplitSpec {
    std::uint64_t seed = 0;
    std::map<std::string, Partition> assignment;

    std::vector<std::string> ids(Partition p) const;
};

/// Largest-remainder 6:2:2 cut of n items; leftover ties go train, val, test.
std::array<std::size_t, 3> partition_counts(std::size_t n);

/// Shuffles each (generator_model, category) stratum with `seed` and cuts it 6:2:2.
SplitSpec make_split(const std::vector<VideoRecord>& records, std::uint64_t seed);
/// Seeds base_seed, base_seed + 1, ...
std::vector<SplitSpec> make_splits(const std::vector<VideoRecord>& records,
                                   std::size_t seed_count = 10, std::uint64_t base_seed = 0);

nlohmann::json to_json(const SplitSpec& s);
SplitSpec split_from_json(const nlohmann::json& j);
void write_splits(const fs::path& path, const std::vector<SplitSpec>& splits);
std::vector<SplitSpec> read_splits(const fs::path& path);

// ---------------------------------------------------------------------------
// Checkpoints: "EDUC" | version u8 | u32 entry count | entries, each
// u32 name length | name | u64 size | bytes. Entries are config.json,
// config.hash (FNV-1a 64 of config.json, hex), param/<name> (EDUT) and
// optionally state.json, adam_m/<name>, adam_v/<name>.

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct TrainingState {
    std::size_t epoch = 0;
    std::uint64_t step = 0;
    std::map<std::string, Tensor> adam_m, adam_v;
    nlohmann::json extra = nlohmann::json::object();
};

struct Checkpoint {
    model::ModelConfig config;
    ParameterSet params;
    std::optional<TrainingState> state;
};

std::uint64_t fnv1a64(std::string_view bytes);
std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint");
void save_checkpoint(const fs::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const fs::path& path);

// ---------------------------------------------------------------------------
// Synthetic data with planted structure

struct SyntheticOptions {
    model::ModelConfig shape;  // frames, height, width, tokens, channels are used
    std::size_t videos = 400;
    double noise = 0.1;
    std::uint64_t seed = 0;
};

struct SyntheticDataset {
    Manifest manifest;  // feature paths are features/<id>.vst.edut and .blip.edut
    std::vector<model::SampleFeatures> features;
};

SyntheticDataset gen_synthetic(const SyntheticOptions& options);
/// Writes manifest.jsonl and the feature files under `directory`.
void write_dataset(const fs::path& directory, const SyntheticDataset& data);

/// Ridge regression on mean-pooled features, fitted on the train partition and
/// scored (SRCC) on the test partition, per dimension.
std::map<std::string, double> ridge_oracle(const std::vector<VideoRecord>& records,
                                           const std::vector<model::SampleFeatures>& features,
                                           const SplitSpec& split, double alpha = 1e-3);

}  // namespace eduvqa::datastore

#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <string>

#include "eduvqa/model.hpp"
#include "eduvqa/training.hpp"

namespace eduvqa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

/// Flat key/value settings mirroring ModelConfig, TrainSchedule and the
/// synthetic generator. Unknown keys are rejected.
class Settings {
public:
    Settings();

    void set(const std::string& key, const std::string& value);
    const std::string& get(const std::string& key) const;
    bool explicitly_set(const std::string& key) const { return explicit_.count(key) != 0; }

    /// Reads `key = value` lines; '#' starts a comment.
    void load_file(const std::filesystem::path& path);

    model::ModelConfig model_config() const;
    training::TrainSchedule schedule() const;
    std::uint64_t seed() const;

    /// Every key in sorted order, one `key = value` per line.
    std::string echo() const;

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> explicit_;
};

/// Parses a flat config document; exposed for tests.
std::map<std::string, std::string> parse_flat_config(const std::string& text);

/// Runs one subcommand and returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace eduvqa::cli

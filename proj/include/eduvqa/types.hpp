#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace eduvqa {

/// Quality dimensions. Word labels are addressed as "word[i]" with i the token
/// position (1..D-1); position 0 carries the sentence feature.
enum class Dimension { spatial, temporal, overall_percept, word, sentence };

inline constexpr Dimension kAllDimensions[] = {Dimension::spatial, Dimension::temporal,
                                               Dimension::overall_percept, Dimension::word,
                                               Dimension::sentence};

std::string dimension_name(Dimension d);

/// A parsed dimension key such as "spatial" or "word[3]".
struct DimensionKey {
    Dimension dimension = Dimension::overall_percept;
    std::size_t position = 0;  // token position, word only

    std::string to_string() const;
    bool operator==(const DimensionKey&) const = default;
    auto operator<=>(const DimensionKey&) const = default;
};

/// Throws UsageError on an unknown key.
DimensionKey parse_dimension(const std::string& text);

bool is_perceptual(Dimension d);

/// Ground-truth scores for one video; word[i] belongs to token position i + 1.
struct QualityLabels {
    double spatial = 0.0;
    double temporal = 0.0;
    double overall_percept = 0.0;
    std::vector<double> word;
    double sentence = 0.0;

    bool operator==(const QualityLabels&) const = default;
};

/// One human rating on the 5-point Likert scale.
struct RatingRecord {
    std::string annotator_id;
    std::string video_id;
    DimensionKey dimension;
    double score = 0.0;  // integral 1..5 in ratings files
};

}  // namespace eduvqa

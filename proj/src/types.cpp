#include "eduvqa/types.hpp"

#include <charconv>

#include "eduvqa/errors.hpp"

namespace eduvqa {

std::string dimension_name(Dimension d) {
    switch (d) {
        case Dimension::spatial: return "spatial";
        case Dimension::temporal: return "temporal";
        case Dimension::overall_percept: return "overall_percept";
        case Dimension::word: return "word";
        case Dimension::sentence: return "sentence";
    }
    return "?";
}

std::string DimensionKey::to_string() const {
    if (dimension == Dimension::word) return "word[" + std::to_string(position) + "]";
    return dimension_name(dimension);
}

DimensionKey parse_dimension(const std::string& text) {
    for (Dimension d : {Dimension::spatial, Dimension::temporal, Dimension::overall_percept,
                        Dimension::sentence}) {
        if (text == dimension_name(d)) return {d, 0};
    }
    if (text.size() > 6 && text.rfind("word[", 0) == 0 && text.back() == ']') {
        std::size_t pos = 0;
        const char* first = text.data() + 5;
        const char* last = text.data() + text.size() - 1;
        auto [ptr, ec] = std::from_chars(first, last, pos);
        if (ec == std::errc() && ptr == last && pos >= 1) return {Dimension::word, pos};
    }
    throw UsageError("unknown dimension '" + text +
                     "' (expected spatial, temporal, overall_percept, word[i] with i >= 1, sentence)");
}

bool is_perceptual(Dimension d) {
    return d == Dimension::spatial || d == Dimension::temporal || d == Dimension::overall_percept;
}

}  // namespace eduvqa

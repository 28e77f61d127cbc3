#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "eduvqa/errors.hpp"
#include "eduvqa/evaluation.hpp"
#include "eduvqa/subjective.hpp"

using namespace eduvqa;
using namespace eduvqa::subjective;

namespace {

const std::vector<double> kSixteen{1, 2, 2, 2, 3, 3, 3, 3, 3, 3, 3, 3, 4, 4, 4, 5};
const DimensionKey kOverall{Dimension::overall_percept, 0};

std::vector<RatingRecord> cell(const std::vector<double>& scores, const std::string& video = "v") {
    std::vector<RatingRecord> out;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out.push_back({"a" + std::to_string(i), video, kOverall, scores[i]});
    }
    return out;
}

// Honest raters: rounded latent + N(0, 0.6); one rater answers uniformly at random.
std::vector<RatingRecord> panel_with_adversary(std::uint64_t seed, std::size_t honest,
                                               std::size_t videos) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> latent(1.5, 4.5);
    std::normal_distribution<double> noise(0.0, 0.6);
    std::uniform_int_distribution<int> random_score(1, 5);
    std::vector<RatingRecord> out;
    const Dimension dims[] = {Dimension::spatial, Dimension::temporal, Dimension::overall_percept};
    for (std::size_t v = 0; v < videos; ++v) {
        for (Dimension d : dims) {
            const double truth = latent(rng);
            const std::string vid = "v" + std::to_string(v);
            for (std::size_t a = 0; a < honest; ++a) {
                const double s = std::clamp(std::round(truth + noise(rng)), 1.0, 5.0);
                out.push_back({"honest" + std::to_string(a), vid, {d, 0}, s});
            }
            out.push_back({"random", vid, {d, 0}, static_cast<double>(random_score(rng))});
        }
    }
    return out;
}

}  // namespace

TEST(Kurtosis, MomentFormulaOracles) {
    EXPECT_NEAR(kurtosis(std::vector<double>{1, 1, 1, 1, 5}), 3.25, 1e-12);
    EXPECT_NEAR(kurtosis(kSixteen), 3.1020408163265305, 1e-12);
    EXPECT_NEAR(kurtosis(std::vector<double>{3, 3, 3, 3, 3, 3, 3, 3, 1, 5}), 5.0, 1e-12);
}

TEST(SelectLambda, WindowAndDegenerateCases) {
    EXPECT_EQ(select_lambda(std::vector<double>{1, 1, 1, 1, 5}).lambda, 2.0);
    EXPECT_EQ(select_lambda(kSixteen).lambda, 2.0);
    EXPECT_EQ(select_lambda(std::vector<double>{3, 3, 3, 3, 3, 3, 3, 3, 1, 5}).lambda, std::sqrt(20.0));
    LambdaChoice flat = select_lambda(std::vector<double>{4, 4, 4, 4});
    EXPECT_TRUE(flat.degenerate);
    EXPECT_EQ(flat.lambda, 2.0);
    // Two-point symmetric spread has beta2 = 1, below the Gaussian window.
    EXPECT_EQ(select_lambda(std::vector<double>{1, 5, 1, 5}).lambda, std::sqrt(20.0));
    EXPECT_TRUE(select_lambda(std::vector<double>{1, 5, 3}).small_sample);
}

TEST(InlierSet, Fixtures) {
    EXPECT_EQ(inlier_set(std::vector<double>{2, 2, 2}, 2.0).size(), 3u);
    const std::vector<double> five{1, 1, 1, 1, 5};
    EXPECT_NEAR(sample_stddev(five), 1.7888543819998317, 1e-12);
    EXPECT_EQ(inlier_set(five, 2.0).size(), 5u);
    auto kept = inlier_set(kSixteen, 2.0);
    EXPECT_EQ(kept.size(), 14u);
    EXPECT_EQ(std::count(kept.begin(), kept.end(), 0u), 0);
    EXPECT_EQ(std::count(kept.begin(), kept.end(), 15u), 0);
}

TEST(Consolidate, SixteenRatingFixture) {
    ConsolidationReport r = consolidate(cell(kSixteen));
    ASSERT_EQ(r.first_pass.size(), 1u);
    const CellReport& c = r.first_pass[0];
    EXPECT_NEAR(c.kurtosis, 3.10204, 1e-5);
    EXPECT_EQ(c.lambda, 2.0);
    EXPECT_NEAR(c.lambda * c.sigma, 1.93218, 1e-5);
    EXPECT_EQ(c.excluded, (std::vector<std::size_t>{0, 15}));
    EXPECT_EQ(c.mos, 42.0 / 14.0);
    EXPECT_EQ(c.mos, 3.0);
    // The second pass drops the two rejected raters and keeps the same 14 ratings.
    EXPECT_EQ(r.cells[0].excluded, (std::vector<std::size_t>{0, 15}));
    EXPECT_EQ(r.cells[0].mos, 3.0);
    // Each of the two raters has one outlier in one rating: 100% > 5%.
    EXPECT_EQ(std::count_if(r.annotators.begin(), r.annotators.end(), [](const auto& a) { return a.rejected; }), 2);
}

TEST(Consolidate, NoExclusionsForFiveRatingFixture) {
    ConsolidationReport r = consolidate(cell({1, 1, 1, 1, 5}));
    EXPECT_TRUE(r.cells[0].excluded.empty());
    EXPECT_DOUBLE_EQ(r.cells[0].mos, 1.8);
}

TEST(Consolidate, SingleAnnotatorPanelIsRawMean) {
    std::vector<RatingRecord> ratings{{"solo", "v1", kOverall, 4}, {"solo", "v2", kOverall, 2}};
    ConsolidationReport r = consolidate(ratings);
    for (const auto& c : r.cells) {
        EXPECT_TRUE(c.excluded.empty());
        EXPECT_TRUE(c.degenerate);
    }
    EXPECT_EQ(r.cells[0].mos, 4.0);
    EXPECT_FALSE(r.annotators[0].rejected);
}

TEST(Consolidate, AdversarialAnnotatorIsRejected) {
    for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
        const auto ratings = panel_with_adversary(seed, 15, 20);
        ConsolidationReport r = consolidate(ratings);
        const auto adversary = std::find_if(r.annotators.begin(), r.annotators.end(),
                                            [](const auto& a) { return a.annotator_id == "random"; });
        ASSERT_NE(adversary, r.annotators.end());
        EXPECT_TRUE(adversary->rejected) << "seed " << seed << " fraction " << adversary->outlier_fraction;

        // Second pass never uses the adversary's ratings.
        for (const auto& c : r.cells) {
            if (c.fallback) continue;
            for (std::size_t i = 0; i < ratings.size(); ++i) {
                if (ratings[i].annotator_id == "random" && ratings[i].video_id == c.video_id &&
                    ratings[i].dimension == c.dimension) {
                    EXPECT_NE(std::find(c.excluded.begin(), c.excluded.end(), i), c.excluded.end());
                }
            }
        }

        evaluation::ConsistencyReport agreement = evaluation::annotator_consistency(ratings, r.mos());
        double worst_honest = 1.0, adversarial = 1.0;
        for (const auto& e : agreement.entries) {
            EXPECT_LE(e.srcc, 1.0);
            if (e.annotator_id == "random") adversarial = e.srcc;
            else worst_honest = std::min(worst_honest, e.srcc);
        }
        EXPECT_GE(worst_honest, adversarial) << "seed " << seed;
    }
}

TEST(Consolidate, AffineTransformKeepsInliersAndLambda) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> x(4 + rng() % 20);
        for (double& v : x) v = static_cast<double>(1 + rng() % 5);
        std::vector<double> y;
        for (double v : x) y.push_back(3.0 * v - 1.0);
        EXPECT_EQ(inlier_set(x, 2.0), inlier_set(y, 2.0));
        EXPECT_EQ(select_lambda(x).lambda, select_lambda(y).lambda);
    }
}

TEST(Consolidate, MosWithinSubmittedRange) {
    const auto ratings = panel_with_adversary(11, 6, 10);
    ConsolidationReport r = consolidate(ratings);
    for (const auto& c : r.cells) {
        double lo = 5, hi = 1;
        for (const auto& rt : ratings) {
            if (rt.video_id == c.video_id && rt.dimension == c.dimension) {
                lo = std::min(lo, rt.score);
                hi = std::max(hi, rt.score);
            }
        }
        EXPECT_GE(c.mos, lo);
        EXPECT_LE(c.mos, hi);
    }
}

TEST(Consolidate, IdempotentOnConsolidatedValues) {
    ConsolidationReport first = consolidate(panel_with_adversary(12, 8, 5));
    std::vector<RatingRecord> again;
    for (const auto& [key, mos] : first.mos()) again.push_back({"consolidated", key.first, key.second, mos});
    ConsolidationReport second = consolidate(again);
    EXPECT_EQ(second.mos(), first.mos());
}

TEST(Consolidate, AllRatersRejectedFallsBackToUnscreenedMean) {
    // Both raters are outliers elsewhere, so both are rejected; cell "v" keeps the raw mean.
    std::vector<RatingRecord> ratings{{"x", "v", kOverall, 2}, {"y", "v", kOverall, 4}};
    for (std::size_t i = 0; i < kSixteen.size(); ++i) {
        std::string who = i == 0 ? "x" : i + 1 == kSixteen.size() ? "y" : "p" + std::to_string(i);
        ratings.push_back({who, "w", kOverall, kSixteen[i]});
    }
    ConsolidationReport r = consolidate(ratings);
    const CellReport& v = r.cells.back().video_id == "v" ? r.cells.back() : r.cells.front();
    ASSERT_EQ(v.video_id, "v");
    EXPECT_TRUE(v.fallback);
    EXPECT_EQ(v.mos, 3.0);
}

TEST(RatingsCsv, ParsesAndRejectsBadRows) {
    auto rows = parse_ratings_csv("annotator_id,video_id,dimension,score\r\na,v,word[2],4\nb,v,sentence,1\n");
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].dimension, (DimensionKey{Dimension::word, 2}));
    EXPECT_EQ(rows[1].score, 1.0);
    EXPECT_THROW(parse_ratings_csv("a,b,c,d\n"), FormatError);
    EXPECT_THROW(parse_ratings_csv("annotator_id,video_id,dimension,score\na,v,sentence,6\n"), FormatError);
    EXPECT_THROW(parse_ratings_csv("annotator_id,video_id,dimension,score\na,v,sentence,2.5\n"), FormatError);
    EXPECT_THROW(parse_ratings_csv("annotator_id,video_id,dimension,score\na,v,color,3\n"), FormatError);
    EXPECT_THROW(parse_ratings_csv("annotator_id,video_id,dimension,score\na,v,word[0],3\n"), FormatError);
    EXPECT_THROW(parse_ratings_csv("annotator_id,video_id,dimension,score\na,v,sentence\n"), FormatError);
}

TEST(RatingsCsv, FixtureFileAndLabelsOutput) {
    auto rows = read_ratings_csv(EDUVQA_FIXTURE_DIR "/ratings16.csv");
    ASSERT_EQ(rows.size(), 16u);
    ConsolidationReport r = consolidate(rows);
    const auto j = to_json(r);
    EXPECT_EQ(j["cells"][0]["excluded"].size(), 2u);
    EXPECT_EQ(j["cells"][0]["mos"].get<double>(), 3.0);
    const auto line = nlohmann::json::parse(labels_jsonl(r));
    EXPECT_EQ(line["video_id"], "vid0001");
    EXPECT_EQ(line["labels"]["overall_percept"].get<double>(), 3.0);
}

TEST(LabelsJsonl, WordPositionsWithGaps) {
    std::vector<RatingRecord> ratings{{"a", "v", {Dimension::word, 1}, 4}, {"a", "v", {Dimension::word, 3}, 2},
                                      {"a", "v", {Dimension::sentence, 0}, 5}};
    const auto line = nlohmann::json::parse(labels_jsonl(consolidate(ratings)));
    EXPECT_EQ(line["labels"]["word"].size(), 3u);
    EXPECT_TRUE(line["labels"]["word"][1].is_null());
    EXPECT_EQ(line["word_mask"], (nlohmann::json{1, 0, 1}));
}

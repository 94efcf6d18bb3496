#include <filesystem>

#include <gtest/gtest.h>

#include "generators.hpp"

using namespace modhifi;

namespace {

SyntheticSource two_gaussians() {
    SyntheticSource s{{Layout::Image, {2, 1, 1}}, {}, 17};
    s.classes.push_back({{{1.0, {-5.0, 0.0}, 1.0}}});
    s.classes.push_back({{{1.0, {5.0, 1.0}, 4.0}}});
    return s;
}

}  // namespace

TEST(Sample, RestrictedClassOnly) {
    const auto d = sample(two_gaussians(), 5, {0});
    EXPECT_EQ(d.size(), 5u);
    for (int y : d.y) EXPECT_EQ(y, 0);
    EXPECT_EQ(d.class_count, 2u);
}

TEST(Sample, DeterministicGivenSeed) {
    const auto s = two_gaussians();
    EXPECT_EQ(sample(s, 20).x, sample(s, 20).x);
    EXPECT_EQ(sample(s, 20, {}, 3).x, sample(s, 20, {}, 3).x);
    EXPECT_NE(sample(s, 20, {}, 3).x, sample(s, 20, {}, 4).x);
}

TEST(Sample, EmpiricalMeansWithinThreeStandardErrors) {
    const auto s = two_gaussians();
    const auto d = sample(s, 1000);
    for (int k = 0; k < 2; ++k) {
        const auto& comp = s.classes[static_cast<std::size_t>(k)].components[0];
        const double se = 3.0 * std::sqrt(comp.scale) / std::sqrt(1000.0);
        for (std::size_t j = 0; j < 2; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < d.size(); ++i)
                if (d.y[i] == k) mean += d.x.at(i, j, 0) / 1000.0;
            EXPECT_NEAR(mean, comp.mean[j], se);
        }
    }
}

TEST(Sample, ClassSliceMatchesFullDraw) {
    const auto s = make_blob_source(3, {Layout::Image, {4, 1, 1}}, 2.0, 1.0, 5);
    const auto full = sample(s, 10);
    const auto only2 = sample(s, 10, {2});
    for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(only2.x.at(i, j, 0), full.x.at(20 + i, j, 0));
}

TEST(Sample, DisjointClassSetsShareNoLabels) {
    const auto s = make_blob_source(5, {Layout::Image, {3, 1, 1}}, 2.0, 1.0, 5);
    const auto a = sample(s, 7, {0, 3});
    const auto b = sample(s, 7, {1, 2, 4});
    for (int ya : a.y)
        for (int yb : b.y) EXPECT_NE(ya, yb);
}

TEST(Sample, Errors) {
    const auto s = two_gaussians();
    EXPECT_THROW(sample(s, 5, {2}), UnknownClass);
    EXPECT_THROW(sample(s, 0), InvalidArgument);
    auto bad = s;
    bad.classes[0].components.push_back({0.5, {0.0, 0.0}, 1.0});
    EXPECT_THROW(sample(bad, 1), InvalidArgument);
    bad = s;
    bad.classes[1].components[0].scale = 0.0;
    EXPECT_THROW(sample(bad, 1), InvalidArgument);
}

TEST(Sample, MixtureComponentsAreBothVisited) {
    SyntheticSource s{{Layout::Image, {1, 1, 1}}, {}, 1};
    s.classes.push_back({{{0.5, {-100.0}, 1.0}, {0.5, {100.0}, 1.0}}});
    const auto d = sample(s, 400);
    int neg = 0;
    for (std::size_t i = 0; i < d.size(); ++i) neg += d.x.at(i, 0, 0) < 0;
    EXPECT_GT(neg, 150);
    EXPECT_LT(neg, 250);
}

TEST(Degrade, InflatesScales) {
    const auto s = two_gaussians();
    const auto same = degrade(s, 0.0);
    const auto doubled = degrade(s, 1.0);
    for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(same.classes[k].components[0].scale, s.classes[k].components[0].scale);
        EXPECT_EQ(doubled.classes[k].components[0].scale, 2.0 * s.classes[k].components[0].scale);
        EXPECT_EQ(doubled.classes[k].components[0].mean, s.classes[k].components[0].mean);
    }
    EXPECT_THROW(degrade(s, -0.1), InvalidArgument);
}

TEST(DataFiles, RoundTrips) {
    const auto dir = std::filesystem::temp_directory_path() / "modhifi_data_io";
    std::filesystem::create_directories(dir);
    const auto tok = make_blob_source(3, {Layout::Tokens, {4, 3, 1}}, 2.0, 0.5, 8);
    save_source(tok, (dir / "s.json").string());
    const auto back = load_source((dir / "s.json").string());
    EXPECT_EQ(sample(back, 4).x, sample(tok, 4).x);

    const auto d = sample(tok, 6);
    save_dataset(d, (dir / "d.json").string());
    const auto e = load_dataset((dir / "d.json").string());
    EXPECT_EQ(e.x, d.x);
    EXPECT_EQ(e.y, d.y);
    EXPECT_EQ(e.layout, d.layout);
    std::filesystem::remove_all(dir);
}

TEST(DataFiles, TokensAreStoredRowMajorOverTokens) {
    LabeledDataset d{{Layout::Tokens, {2, 3, 1}}, 1, Tensor(1, {2, 3, 1}, Vector{1, 2, 3, 4, 5, 6}), {0}};
    // channel-major in memory (d=2 rows of T=3), T x d row-major in the file.
    const auto j = dataset_to_json(d);
    EXPECT_EQ(j["samples"][0]["x"].get<std::vector<double>>(), (std::vector<double>{1, 4, 2, 5, 3, 6}));
    EXPECT_EQ(dataset_from_json(j).x, d.x);
}

TEST(DataFiles, MalformedInputIsFormatError) {
    auto j = dataset_to_json(sample(two_gaussians(), 2));
    j["samples"][1]["x"].push_back(0.0);
    EXPECT_THROW(dataset_from_json(j), FormatError);
    j = dataset_to_json(sample(two_gaussians(), 2));
    j["samples"][0]["y"] = 7;
    EXPECT_THROW(dataset_from_json(j), FormatError);
    j = source_to_json(two_gaussians());
    j["classes"][0]["components"][0]["weight"] = 0.3;
    EXPECT_THROW(source_from_json(j), FormatError);
    EXPECT_THROW(load_dataset("/nonexistent/x.json"), FormatError);
}

// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

#include "dprobe/data.hpp"

using namespace dprobe;
using namespace dprobe::data;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "dprobe-test-data" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string pgm_bytes(std::size_t h, std::size_t w, float value) {
    return encode_pgm(std::vector<float>(h * w, value), h, w);
}

LabeledImageSet counted_set(const std::vector<std::size_t>& per_class, std::size_t size = 4) {
    LabeledImageSet s;
    s.height = s.width = size;
    for (std::size_t c = 0; c < per_class.size(); ++c) s.class_names.push_back("c" + std::to_string(c));
    std::int64_t id = 0;
    for (std::size_t c = 0; c < per_class.size(); ++c)
        for (std::size_t i = 0; i < per_class[c]; ++i, ++id) {
            std::vector<float> img(size * size, static_cast<float>((id % 10) / 10.0));
            s.push(img, static_cast<int>(c), Provenance::real, id, id);
        }
    return s;
}

std::vector<std::int64_t> sorted_ids(const LabeledImageSet& s) {
    auto v = s.ids;
    std::sort(v.begin(), v.end());
    return v;
}

}  // namespace

TEST(Resize, ConstantImageStaysConstant) {
    const std::vector<float> img(256 * 256, 0.5f);
    for (auto v : resize(img, 256, 256, 128, 128)) EXPECT_FLOAT_EQ(v, 0.5f);
    for (auto v : resize(std::vector<float>(5 * 7, 0.25f), 5, 7, 16, 16)) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Resize, HalvingAveragesBlocks) {
    std::vector<float> img(16);
    std::iota(img.begin(), img.end(), 0.0f);
    for (auto& v : img) v /= 16.0f;
    const auto out = resize(img, 4, 4, 2, 2);
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x) {
            const std::size_t i = 2 * y * 4 + 2 * x;
            EXPECT_NEAR(out[y * 2 + x], (img[i] + img[i + 1] + img[i + 4] + img[i + 5]) / 4.0f, 1e-6);
        }
}

TEST(Resize, SameSizeIsIdentity) {
    Rng rng(0);
    std::vector<float> img(6 * 5);
    for (auto& v : img) v = static_cast<float>(rng.uniform());
    EXPECT_EQ(resize(img, 6, 5, 6, 5), img);
}

TEST(Pnm, ColourIsConvertedToLuminance) {
    const std::vector<float> rgb{1.0f, 0.0f, 0.0f, 0.0f, 0.0f, 1.0f};
    const auto bytes = encode_ppm(rgb, 1, 2);
    const auto img = decode_pnm(std::vector<char>(bytes.begin(), bytes.end()), "ppm");
    ASSERT_EQ(img.pixels.size(), 2u);
    EXPECT_NEAR(img.pixels[0], 0.299f, 1e-6);
    EXPECT_NEAR(img.pixels[1], 0.114f, 1e-6);
    const std::string ascii = "P2\n# comment\n2 1\n4\n0 4\n";
    const auto g = decode_pnm(std::vector<char>(ascii.begin(), ascii.end()), "pgm");
    EXPECT_EQ(g.pixels, (std::vector<float>{0.0f, 1.0f}));
    const std::string bad = "P5\n2 2\n255\nx";
    EXPECT_THROW(decode_pnm(std::vector<char>(bad.begin(), bad.end()), "bad"), Error);
}

TEST(Ingest, SkipsBrokenFilesAndMergesLabels) {
    const auto root = fresh_dir("ingest");
    fs::create_directories(root / "alpha");
    fs::create_directories(root / "beta");
    fs::create_directories(root / "beta_old");
    io::write_file(root / "alpha" / "a0.pgm", pgm_bytes(64, 64, 0.5f));
    io::write_file(root / "alpha" / "a1.pgm", "");
    io::write_file(root / "alpha" / "a2.pgm", "P5\n9 9\n255\n");
    io::write_file(root / "beta" / "b0.pgm", pgm_bytes(8, 16, 1.0f));
    io::write_file(root / "beta_old" / "c0.pgm", pgm_bytes(32, 32, 0.0f));
    const auto map_path = root / "map.csv";
    io::write_file(map_path, "alpha,0\nbeta,1\nbeta_old,1\n");

    IngestReport rep;
    const auto set = ingest(root, 16, read_label_map(map_path), &rep);
    set.validate();
    EXPECT_EQ(set.size(), 3u);
    EXPECT_EQ(rep.loaded, 3u);
    EXPECT_EQ(rep.skipped_corrupt, 2u);
    EXPECT_EQ(set.labels, (std::vector<int>{0, 1, 1}));
    EXPECT_EQ(set.class_names, (std::vector<std::string>{"alpha", "beta"}));
    for (float v : set.image(0)) EXPECT_FLOAT_EQ(v, 128.0f / 255.0f);
    EXPECT_EQ(set.height, 16u);
}

TEST(Ingest, EmptyClassDirectoryIsNamed) {
    const auto root = fresh_dir("ingest-empty");
    fs::create_directories(root / "full");
    fs::create_directories(root / "hollow");
    io::write_file(root / "full" / "x.pgm", pgm_bytes(4, 4, 0.2f));
    try {
        ingest(root, 4, {});
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("hollow"), std::string::npos);
    }
}

TEST(Formats, RawTensorRoundTripIsPixelIdentical) {
    const auto set = synthesize(SyntheticSpec::fine_grained(3, 16), 4, 11);
    const auto dir = fresh_dir("roundtrip");
    write_set(dir, "all", set);
    const auto back = read_set(dir, "all");
    EXPECT_EQ(back.pixels, set.pixels);
    EXPECT_EQ(back.labels, set.labels);
    EXPECT_EQ(back.ids, set.ids);
    EXPECT_EQ(back.provenance, set.provenance);
    EXPECT_EQ(back.class_names, set.class_names);

    // the same bundle ingested from a class directory
    const auto root = fresh_dir("roundtrip-ingest");
    fs::create_directories(root / "only");
    io::write_file(root / "only" / "bundle.dpim", encode_dpim(set.size(), 16, 16, set.pixels));
    const auto again = ingest(root, 16, {});
    EXPECT_EQ(again.pixels, set.pixels);
}

TEST(Augment, FlipIsInvolutionAndScalingClamps) {
    Rng rng(1);
    std::vector<float> img(5 * 6);
    for (auto& v : img) v = static_cast<float>(rng.uniform());
    for (const char* t : {"hflip", "vflip", "rot180"})
        EXPECT_EQ(apply_transform(apply_transform(img, 5, 6, t), 5, 6, t), img) << t;
    EXPECT_EQ(apply_transform(std::vector<float>{0.95f}, 1, 1, "scale+0.10")[0], 1.0f);
    EXPECT_FLOAT_EQ(apply_transform(std::vector<float>{0.5f}, 1, 1, "scale-0.10")[0], 0.45f);
    EXPECT_THROW(apply_transform(img, 5, 6, "shear"), ConfigError);
}

TEST(Augment, QuotaCountingFollowsTransformBudget) {
    const auto train = counted_set({3, 1});
    AugmentReport rep;
    const auto out = augment(train, {AugmentMode::balanced, 12, 1, 5}, &rep);
    const auto counts = out.class_counts();
    EXPECT_EQ(counts[0], 3u + std::min<std::size_t>(9, 3 * 7));
    EXPECT_EQ(counts[1], 1u + std::min<std::size_t>(11, 1 * 7));
    EXPECT_EQ(rep.warnings.size(), 1u);
    std::set<std::pair<std::int64_t, std::string>> pairs;
    for (std::size_t i = train.size(); i < out.size(); ++i) {
        EXPECT_EQ(out.provenance[i], Provenance::augmented);
        EXPECT_TRUE(std::count(train.ids.begin(), train.ids.end(), out.parents[i]));
        EXPECT_TRUE(pairs.insert({out.parents[i], out.transforms[i]}).second);
    }
    EXPECT_THROW(augment(out, {}), ContractError);
}

TEST(Augment, LongTailMultiplier) {
    const auto train = counted_set({4, 2});
    const auto out = augment(train, {AugmentMode::long_tail, 0, 2, 0});
    EXPECT_EQ(out.class_counts(), (std::vector<std::size_t>{12, 6}));
    std::size_t real = 0;
    for (auto p : out.provenance) real += p == Provenance::real;
    EXPECT_EQ(real, train.size());
}

TEST(Split, SingleClassEightyTenTen) {
    const auto s = split(counted_set({100}), {});
    EXPECT_EQ(s.train.size(), 80u);
    EXPECT_EQ(s.val.size(), 10u);
    EXPECT_EQ(s.test.size(), 10u);
}

TEST(Split, StratificationPreservesRatio) {
    const auto s = split(counted_set({90, 10}), {});
    EXPECT_EQ(s.train.class_counts(), (std::vector<std::size_t>{72, 8}));
    EXPECT_EQ(s.val.class_counts(), (std::vector<std::size_t>{9, 1}));
    EXPECT_EQ(s.test.class_counts(), (std::vector<std::size_t>{9, 1}));
}

TEST(Split, DeterministicAndDisjoint) {
    const auto set = counted_set({30, 20, 10});
    SplitPlan plan;
    plan.seed = 9;
    const auto a = split(set, plan), b = split(set, plan);
    EXPECT_EQ(a.train.ids, b.train.ids);
    EXPECT_EQ(a.val.ids, b.val.ids);
    EXPECT_EQ(a.test.ids, b.test.ids);
    std::vector<std::int64_t> all;
    for (const auto* p : {&a.train, &a.val, &a.test}) all.insert(all.end(), p->ids.begin(), p->ids.end());
    std::sort(all.begin(), all.end());
    EXPECT_EQ(all, sorted_ids(set));
    plan.seed = 10;
    EXPECT_NE(split(set, plan).val.ids, a.val.ids);
}

TEST(Split, GroupsFollowParents) {
    auto set = counted_set({20});
    set = augment(set, {AugmentMode::long_tail, 0, 3, 1});
    const auto s = split(set, {});
    std::set<std::int64_t> train_parents(s.train.parents.begin(), s.train.parents.end());
    for (const auto* p : {&s.val, &s.test})
        for (auto parent : p->parents) EXPECT_FALSE(train_parents.count(parent));
}

TEST(Split, SmallClassesAreDroppedWithLog) {
    SplitPlan plan;
    plan.min_class_count = 5;
    const auto s = split(counted_set({50, 4, 2}), plan);
    EXPECT_EQ(s.log.size(), 2u);
    EXPECT_EQ(s.train.class_counts()[1], 0u);
    EXPECT_EQ(s.train.class_counts()[2], 0u);
    EXPECT_EQ(s.train.class_counts()[0], 40u);
    EXPECT_THROW(split(counted_set({5}), {0.5, 0.5, 0.5}), ConfigError);
}

TEST(Synthetic, FixedSeedIsBitIdentical) {
    const auto spec = SyntheticSpec::fine_grained(8, 32);
    const auto a = synthesize(spec, 3, 42), b = synthesize(spec, 3, 42), c = synthesize(spec, 3, 43);
    EXPECT_EQ(a.pixels, b.pixels);
    EXPECT_NE(a.pixels, c.pixels);
    a.validate();
    EXPECT_EQ(a.class_counts(), std::vector<std::size_t>(8, 3));
}

TEST(Synthetic, ClassesDifferInSomeParameter) {
    const auto spec = SyntheticSpec::fine_grained(16, 32);
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = i + 1; j < 16; ++j) {
            const auto &a = spec.classes[i], &b = spec.classes[j];
            EXPECT_TRUE(a.eccentricity != b.eccentricity || a.spines != b.spines || a.banding != b.banding ||
                        a.flagellum != b.flagellum)
                << i << " vs " << j;
        }
    const auto flat = SyntheticSpec::fine_grained(2, 32, 0.0);
    EXPECT_EQ(flat.classes[0].eccentricity, flat.classes[1].eccentricity);
}

TEST(Synthetic, NoiselessWideGapIsSeparableByNearestCentroid) {
    auto spec = SyntheticSpec::fine_grained(2, 32, 2.0);
    spec.noise = 0.0;
    const auto train = synthesize(spec, 100, 1), test = synthesize(spec, 100, 2);
    const std::size_t P = 32 * 32;
    std::vector<double> centroid(2 * P, 0.0);
    for (std::size_t i = 0; i < train.size(); ++i)
        for (std::size_t p = 0; p < P; ++p) centroid[train.labels[i] * P + p] += train.image(i)[p] / 100.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        double d[2] = {0.0, 0.0};
        for (int c = 0; c < 2; ++c)
            for (std::size_t p = 0; p < P; ++p) {
                const double e = test.image(i)[p] - centroid[c * P + p];
                d[c] += e * e;
            }
        correct += (d[1] < d[0] ? 1 : 0) == test.labels[i];
    }
    EXPECT_EQ(correct, test.size());
}

TEST(Sets, ValidateRejectsBadData) {
    auto s = counted_set({2});
    s.pixels[0] = 1.5f;
    EXPECT_THROW(s.validate(), DataError);
    s = counted_set({2});
    s.labels[0] = 3;
    EXPECT_THROW(s.validate(), DataError);
}

#include <gtest/gtest.h>

#include <set>

#include "fixtures.hpp"

using namespace dsfwsi;
using dsfwsi::testing::TempDir;

namespace {

SlideSource flat_slide(const std::string& id, int low, int ratio = 4) {
    SlideSource s;
    s.slide_id = id;
    s.image_low = cv::Mat(low, low, CV_8UC3, cv::Scalar(150, 100, 150));
    s.image_high = cv::Mat(low * ratio, low * ratio, CV_8UC3, cv::Scalar(150, 100, 150));
    s.magnification_low = 10.0;
    s.magnification_high = 10.0 * ratio;
    return s;
}

std::vector<ContextGroup> fake_groups(int slides, int per_slide) {
    std::vector<ContextGroup> out;
    for (int s = 0; s < slides; ++s)
        for (int g = 0; g < per_slide; ++g) {
            ContextGroup grp;
            grp.context.slide_id = "s" + std::to_string(s);
            grp.context.patch_id = grp.context.slide_id + "_g" + std::to_string(g);
            grp.context.group_id = grp.context.patch_id;
            out.push_back(grp);
        }
    return out;
}

}  // namespace

TEST(TissueMask, BoundaryInclusive) {
    cv::Mat px(1, 1, CV_8UC3, cv::Scalar(235, 210, 235));
    EXPECT_EQ(compute_tissue_mask(px).at<std::uint8_t>(0, 0), 1);
    cv::Mat white(1, 1, CV_8UC3, cv::Scalar(255, 255, 255));
    EXPECT_EQ(compute_tissue_mask(white).at<std::uint8_t>(0, 0), 0);
}

TEST(TissueMask, TwoByTwo) {
    cv::Mat img(2, 2, CV_8UC3);
    img.at<cv::Vec3b>(0, 0) = {0, 0, 0};
    img.at<cv::Vec3b>(0, 1) = {255, 255, 255};
    img.at<cv::Vec3b>(1, 0) = {236, 210, 235};
    img.at<cv::Vec3b>(1, 1) = {235, 211, 235};
    auto m = compute_tissue_mask(img);
    EXPECT_EQ(m.at<std::uint8_t>(0, 0), 1);
    EXPECT_EQ(m.at<std::uint8_t>(0, 1), 0);
    EXPECT_EQ(m.at<std::uint8_t>(1, 0), 0);
    EXPECT_EQ(m.at<std::uint8_t>(1, 1), 0);
}

TEST(TissueMask, NonRgbIsFormatError) {
    EXPECT_THROW(compute_tissue_mask(cv::Mat(2, 2, CV_8UC1, cv::Scalar(0))), FormatError);
}

TEST(Tiling, NineGroupsOfSixteenThatPartitionTheContext) {
    auto slide = flat_slide("a", 2048);
    TilingConfig cfg;
    auto groups = tile_slide(slide, cfg);
    ASSERT_EQ(groups.size(), 9u);
    std::set<std::pair<int, int>> origins;
    for (const auto& g : groups) {
        origins.insert({g.context.origin_x, g.context.origin_y});
        ASSERT_EQ(g.m(), 16);
        EXPECT_EQ(g.context.window, 1024);
        EXPECT_EQ(g.context.output_size, 224);
        // union of target low-level FOVs equals the context rect, no overlap
        const cv::Rect ctx = low_level_fov(g.context, 4);
        std::int64_t area = 0;
        for (int i = 0; i < 16; ++i) {
            const auto& t = g.targets[static_cast<std::size_t>(i)];
            EXPECT_EQ(t.slot_index, i);
            EXPECT_EQ(t.window, 1024);
            const cv::Rect r = low_level_fov(t, 4);
            EXPECT_EQ((r & ctx), r);
            area += r.area();
            for (int j = 0; j < i; ++j)
                EXPECT_EQ((r & low_level_fov(g.targets[static_cast<std::size_t>(j)], 4)).area(), 0);
            EXPECT_LE(t.origin_x + t.window, slide.image_high.cols);
        }
        EXPECT_EQ(area, ctx.area());
    }
    std::set<std::pair<int, int>> expected;
    for (int y : {0, 512, 1024})
        for (int x : {0, 512, 1024}) expected.insert({x, y});
    EXPECT_EQ(origins, expected);
}

TEST(Tiling, SingleGroupTargetOrigins) {
    auto groups = tile_slide(flat_slide("b", 1024), TilingConfig{});
    ASSERT_EQ(groups.size(), 1u);
    std::vector<std::pair<int, int>> got, want;
    for (const auto& t : groups[0].targets) got.push_back({t.origin_x, t.origin_y});
    for (int y : {0, 1024, 2048, 3072})
        for (int x : {0, 1024, 2048, 3072}) want.push_back({x, y});
    EXPECT_EQ(got, want);
}

TEST(Tiling, TooSmallGivesNoGroups) { EXPECT_TRUE(tile_slide(flat_slide("c", 1023), TilingConfig{}).empty()); }

TEST(Tiling, MismatchedLevelsArePrecondition) {
    auto s = flat_slide("d", 1024);
    s.image_high = cv::Mat(4000, 4096, CV_8UC3, cv::Scalar(0, 0, 0));
    EXPECT_THROW(tile_slide(s, TilingConfig{}), PreconditionError);
}

TEST(Tiling, PureAndFiltersBackground) {
    auto s = flat_slide("e", 1024);
    EXPECT_EQ(tile_slide(s, TilingConfig{}), tile_slide(s, TilingConfig{}));
    s.image_low.setTo(cv::Scalar(255, 255, 255));
    EXPECT_TRUE(tile_slide(s, TilingConfig{}).empty());
}

TEST(Folds, FiftySlidesTenPerFold) {
    auto groups = fake_groups(50, 3);
    auto f = split_folds(groups, 5, 0);
    for (int k = 0; k < 5; ++k) EXPECT_EQ(f.validation_slides(k).size(), 10u);
    EXPECT_EQ(f.assignments, split_folds(groups, 5, 0).assignments);
    EXPECT_NE(f.assignments, split_folds(groups, 5, 1).assignments);
    // slide-level: every group of a slide shares a fold
    for (const auto& g : groups) EXPECT_EQ(f.assignments.at(g.group_id()), f.slide_fold.at(g.slide_id()));
}

TEST(Folds, FiveSlidesOneEach) {
    auto f = split_folds(fake_groups(5, 2), 5, 4);
    for (int k = 0; k < 5; ++k) EXPECT_EQ(f.validation_slides(k).size(), 1u);
}

TEST(Folds, TooFewSlidesIsConfigError) { EXPECT_THROW(split_folds(fake_groups(4, 10), 5, 0), ConfigError); }

TEST(Folds, PartitionIsDisjointAndComplete) {
    auto groups = fake_groups(7, 3);
    auto f = split_folds(groups, 5, 2);
    std::set<std::string> seen;
    for (int k = 0; k < 5; ++k) {
        auto [train, val] = fold_partition(groups, f, k);
        EXPECT_EQ(train.size() + val.size(), groups.size());
        for (const auto& g : val) EXPECT_TRUE(seen.insert(g.group_id()).second);
    }
    EXPECT_EQ(seen.size(), groups.size());
}

TEST(Subsample, SizesNestingAndSeeds) {
    EXPECT_EQ(subsample_indices(1000, 0.1, 0).size(), 100u);
    auto all = subsample_indices(37, 1.0, 5);
    ASSERT_EQ(all.size(), 37u);
    for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto a = subsample_indices(1000, 0.01, seed), b = subsample_indices(1000, 0.1, seed),
             c = subsample_indices(1000, 0.5, seed);
        EXPECT_TRUE(std::includes(b.begin(), b.end(), a.begin(), a.end()));
        EXPECT_TRUE(std::includes(c.begin(), c.end(), b.begin(), b.end()));
    }
    auto s0 = subsample_indices(1000, 0.5, 0), s1 = subsample_indices(1000, 0.5, 1);
    EXPECT_NE(s0, s1);
    std::vector<std::size_t> inter;
    std::set_intersection(s0.begin(), s0.end(), s1.begin(), s1.end(), std::back_inserter(inter));
    EXPECT_GT(inter.size(), 0u);
    EXPECT_LT(inter.size(), 500u);
}

TEST(Subsample, BadFractionIsArgumentError) {
    EXPECT_THROW(subsample_indices(10, 0.0, 0), ArgumentError);
    EXPECT_THROW(subsample_indices(10, 1.5, 0), ArgumentError);
    EXPECT_THROW(subsample_indices(10, -0.1, 0), ArgumentError);
}

TEST(Manifest, RoundTripAndEmpty) {
    TempDir dir("manifest");
    auto groups = tile_slide(flat_slide("m1", 2048), TilingConfig{});
    groups[0].targets[3].label_path = "labels/x.png";
    write_manifest(groups, dir / "m.csv");
    EXPECT_EQ(read_manifest(dir / "m.csv"), groups);
    std::vector<ContextGroup> none;
    write_manifest(none, dir / "e.csv");
    EXPECT_TRUE(read_manifest(dir / "e.csv").empty());
}

TEST(Manifest, MissingTargetRowIsValidationError) {
    TempDir dir("manifest");
    auto groups = tile_slide(flat_slide("m2", 1024), TilingConfig{});
    write_manifest(groups, dir / "m.csv");
    auto text = dsfwsi::testing::slurp(dir / "m.csv");
    // drop the row of slot 5
    const auto id = groups[0].targets[5].patch_id + ",";
    const auto pos = text.find("\n" + id);
    ASSERT_NE(pos, std::string::npos);
    text.erase(pos, text.find('\n', pos + 1) - pos);
    atomic_write_text(dir / "m.csv", text);
    try {
        read_manifest(dir / "m.csv");
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("group references unknown patch"), std::string::npos)
            << e.what();
    }
}

TEST(Manifest, MalformedNamesLineAndField) {
    TempDir dir("manifest");
    auto groups = tile_slide(flat_slide("m3", 1024), TilingConfig{});
    write_manifest(groups, dir / "m.csv");
    auto text = dsfwsi::testing::slurp(dir / "m.csv");
    const auto line2 = text.find('\n') + 1;
    auto comma = line2;
    for (int i = 0; i < 3; ++i) comma = text.find(',', comma) + 1;  // origin_x
    text.replace(comma, text.find(',', comma) - comma, "abc");
    atomic_write_text(dir / "m.csv", text);
    try {
        read_manifest(dir / "m.csv");
        FAIL();
    } catch (const ParseError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
        EXPECT_NE(msg.find("origin_x"), std::string::npos) << msg;
    }
}

TEST(Synthetic, DeterministicBytes) {
    TempDir a("syn"), b("syn");
    SyntheticConfig cfg;
    cfg.slides = 2;
    cfg.low_size = 128;
    cfg.ratio = 2;
    cfg.seed = 7;
    generate_synthetic_dataset(cfg, a.path());
    generate_synthetic_dataset(cfg, b.path());
    for (const char* f : {"low.png", "high.png", "label_high.png"}) {
        auto pa = a.path() / "slides" / "slide0" / f;
        ASSERT_TRUE(fs::exists(pa)) << pa;
        EXPECT_EQ(dsfwsi::testing::slurp(pa), dsfwsi::testing::slurp(b.path() / "slides" / "slide0" / f));
    }
    EXPECT_EQ(dsfwsi::testing::slurp(a / "slides.csv").empty(), false);
}

TEST(Synthetic, SingleClassLabelsAreUniform) {
    SyntheticConfig cfg;
    cfg.slides = 1;
    cfg.low_size = 64;
    cfg.ratio = 2;
    cfg.classes = 1;
    auto s = render_synthetic_slide(cfg, 0);
    double mn, mx;
    cv::minMaxLoc(s.label_high, &mn, &mx);
    EXPECT_EQ(mn, 0.0);
    EXPECT_EQ(mx, 0.0);
    EXPECT_NO_THROW(s.validate());
}

TEST(Synthetic, ClassFractionsWithinFivePercent) {
    SyntheticConfig cfg;
    cfg.slides = 2;
    cfg.low_size = 256;
    cfg.ratio = 2;
    cfg.classes = 3;
    cfg.class_fractions = {0.5, 0.3, 0.2};
    for (int i = 0; i < cfg.slides; ++i) {
        auto s = render_synthetic_slide(cfg, i);
        const double total = static_cast<double>(s.label_high.total());
        for (int c = 0; c < 3; ++c) {
            const double frac = cv::countNonZero(s.label_high == c) / total;
            EXPECT_NEAR(frac, cfg.class_fractions[static_cast<std::size_t>(c)], 0.05) << "slide " << i << " class " << c;
        }
    }
}

TEST(Dataset, TinyDatasetExportsPatches) {
    TempDir dir("tiny");
    auto d = dsfwsi::testing::make_tiny_dataset(dir.path());
    ASSERT_FALSE(d.groups.empty());
    EXPECT_EQ(read_manifest(d.manifest), d.groups);
    const auto& g = d.groups.front();
    EXPECT_EQ(g.m(), 4);
    auto img = read_rgb(patch_image_path(d.dir, g.targets[0]));
    EXPECT_EQ(img.rows, 32);
    EXPECT_EQ(img.cols, 32);
    ASSERT_FALSE(g.targets[0].label_path.empty());
    auto lab = read_label(d.dir / g.targets[0].label_path);
    EXPECT_EQ(lab.rows, 32);
}

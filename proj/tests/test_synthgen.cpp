#include "diffspot/synthgen.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "diffspot/covergen.hpp"
#include "diffspot/dataset.hpp"
#include "diffspot/histogram.hpp"

namespace diffspot {
namespace {

namespace fs = std::filesystem;

// Identity pair (photo == design) so tests can recover the pre-paste pixel
// content of the modified image from the untouched one.
AlignedPair identity_pair(Rng& rng, int w, int h, const std::string& id) {
  AlignedPair pair;
  pair.design = make_cover(rng, w, h);
  pair.photo = pair.design;
  pair.transform = Affine::identity();
  pair.pair_id = id;
  return pair;
}

std::vector<AlignedPair> identity_pairs(std::uint64_t seed, int count, int w, int h) {
  Rng rng(seed);
  std::vector<AlignedPair> pairs;
  for (int i = 0; i < count; ++i)
    pairs.push_back(identity_pair(rng, w, h, "pair_" + std::to_string(i)));
  return pairs;
}

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("diffspot_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(SynthLocalPair, BoxWithinImageAndPatchRange) {
  const int W = 128, H = 160;
  Rng cover_rng(21);
  const AlignedPair pair = identity_pair(cover_rng, W, H, "p0");
  const GenConfig config;
  for (int trial = 0; trial < 30; ++trial) {
    Rng rng(100 + trial);
    const SynthSample s = synth_local_pair(pair, config, rng);
    ASSERT_EQ(s.boxes.size(), 1u);
    EXPECT_EQ(s.kind, SampleKind::kLocalPatch);
    const Box& b = s.boxes[0].box;
    EXPECT_TRUE(box_inside(b, W, H));
    EXPECT_GE(b.width(), config.patch_min_fraction * W * config.scale_min - 2.0);
    EXPECT_LE(b.width(), config.patch_max_fraction * W * config.scale_max + 2.0);
    EXPECT_GE(b.height(), config.patch_min_fraction * H * config.scale_min - 2.0);
    EXPECT_LE(b.height(), config.patch_max_fraction * H * config.scale_max + 2.0);
  }
}

TEST(SynthLocalPair, ModifiesExactlyOneImage) {
  Rng cover_rng(22);
  const AlignedPair pair = identity_pair(cover_rng, 96, 120, "p0");
  int design_hits = 0, photo_hits = 0;
  for (int trial = 0; trial < 24; ++trial) {
    Rng rng(300 + trial);
    const SynthSample s = synth_local_pair(pair, GenConfig{}, rng);
    const bool design_changed = s.pair.design.data != pair.design.data;
    const bool photo_changed = s.pair.photo.data != pair.photo.data;
    EXPECT_NE(design_changed, photo_changed);
    EXPECT_EQ(s.modified_branch, design_changed ? 0 : 1);
    design_hits += design_changed;
    photo_hits += photo_changed;
  }
  // Uniform choice between the two images: both sides must show up.
  EXPECT_GT(design_hits, 0);
  EXPECT_GT(photo_hits, 0);
}

TEST(SynthLocalPair, ChangeConfinedToAnnotatedBox) {
  Rng cover_rng(23);
  const AlignedPair pair = identity_pair(cover_rng, 96, 120, "p0");
  for (int trial = 0; trial < 10; ++trial) {
    Rng rng(500 + trial);
    const SynthSample s = synth_local_pair(pair, GenConfig{}, rng);
    const Image& before =
        s.modified_branch == 0 ? pair.design : pair.photo;
    const Image& after =
        s.modified_branch == 0 ? s.pair.design : s.pair.photo;
    const Box& b = s.boxes[0].box;
    for (int y = 0; y < before.height; ++y)
      for (int x = 0; x < before.width; ++x) {
        if (x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2) continue;
        for (int c = 0; c < 3; ++c)
          ASSERT_EQ(before.at(x, y, c), after.at(x, y, c))
              << "pixel (" << x << "," << y << ") outside the box changed";
      }
  }
}

TEST(SynthLocalPair, UniformColorExhaustsAttempts) {
  AlignedPair pair;
  pair.design = Image::filled(100, 100, 3, 137);
  pair.photo = pair.design;
  pair.pair_id = "flat";
  Rng rng(24);
  EXPECT_THROW(synth_local_pair(pair, GenConfig{}, rng), GenerationExhausted);
}

TEST(SynthLocalPair, CheckerboardRejectedByHistogramGate) {
  // 1px checkerboard: every window of the minimum patch size is within a
  // pixel of a 50/50 black-white mix, so all candidate pastes look like
  // their destination and the gate rejects them.
  const int W = 160, H = 160;
  Image board = Image::zeros(W, H, 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if ((x + y) % 2 == 0)
        for (int c = 0; c < 3; ++c) board.at(x, y, c) = 255;
  AlignedPair pair;
  pair.design = board;
  pair.photo = board;
  pair.pair_id = "checker";

  const GenConfig config;
  // Oracle: two same-phase cells have exactly equal histograms.
  const Image patch = crop_image(board, 0, 0, 32, 32);
  const Image destination = crop_image(board, 64, 96, 32, 32);
  const double d = histogram_distance(patch, destination, config.histogram_bins);
  EXPECT_EQ(d, 0.0);
  EXPECT_FALSE(d > config.histogram_threshold);

  Rng rng(25);
  EXPECT_THROW(synth_local_pair(pair, config, rng), GenerationExhausted);
}

TEST(SynthLocalPair, EmittedSamplesPassTheGateUnderReplay) {
  // The untouched image of an identity pair preserves both the source patch
  // and the pre-paste destination content, so the gate can be re-run.
  const GenConfig config;
  const auto pairs = identity_pairs(26, 8, 112, 144);
  int checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    Rng rng(900 + trial);
    const SynthSample s = synth_local_pair(pairs[trial % pairs.size()], config, rng);
    const Image& pristine =
        s.modified_branch == 0 ? s.pair.photo : s.pair.design;
    const Box& src = s.source_box;
    const Box& dst = s.boxes[0].box;
    const Image patch =
        crop_image(pristine, static_cast<int>(src.x1), static_cast<int>(src.y1),
                   static_cast<int>(src.width()), static_cast<int>(src.height()));
    const Image destination =
        crop_image(pristine, static_cast<int>(dst.x1), static_cast<int>(dst.y1),
                   static_cast<int>(dst.width()), static_cast<int>(dst.height()));
    EXPECT_GT(histogram_distance(patch, destination, config.histogram_bins),
              config.histogram_threshold);
    ++checked;
  }
  EXPECT_EQ(checked, 40);
}

TEST(SynthGlobalPair, ResizesDesignToPhotoDims) {
  Rng rng(27);
  for (int trial = 0; trial < 20; ++trial) {
    const int pw = rng.uniform_int(40, 200);
    const int ph = rng.uniform_int(40, 200);
    const int dw = rng.uniform_int(40, 200);
    const int dh = rng.uniform_int(40, 200);
    const Image photo = make_cover(rng, pw, ph);
    const Image design = make_cover(rng, dw, dh);
    const SynthSample s = synth_global_pair(photo, "a", design, "b");
    EXPECT_EQ(s.pair.design.width, pw);
    EXPECT_EQ(s.pair.design.height, ph);
    EXPECT_EQ(s.kind, SampleKind::kGlobalMismatch);
    ASSERT_EQ(s.boxes.size(), 1u);
    EXPECT_EQ(s.boxes[0].box.x1, 0.0);
    EXPECT_EQ(s.boxes[0].box.y1, 0.0);
    EXPECT_EQ(s.boxes[0].box.x2, pw);
    EXPECT_EQ(s.boxes[0].box.y2, ph);
  }
}

TEST(SynthGlobalPair, IdentityCollisionThrows) {
  Rng rng(28);
  const Image a = make_cover(rng, 50, 60);
  const Image b = make_cover(rng, 50, 60);
  EXPECT_THROW(synth_global_pair(a, "same_id", b, "same_id"), IdentityCollision);
}

TEST(BuildDataset, CountsMatchMagnificationAndSplit) {
  const auto pairs = identity_pairs(29, 30, 96, 120);
  GenConfig config;
  config.magnification = 2.0;
  const DatasetBuild build = build_dataset(pairs, config, 4242);
  EXPECT_EQ(build.report.skipped, 0);
  ASSERT_EQ(build.samples.size(), 60u);
  // round(60 * 2/3) locals.
  EXPECT_EQ(build.report.local_count, 40);
  EXPECT_EQ(build.report.global_count, 20);
  int locals = 0, globals = 0;
  for (const SynthSample& s : build.samples) {
    s.validate();
    locals += s.kind == SampleKind::kLocalPatch;
    globals += s.kind == SampleKind::kGlobalMismatch;
  }
  EXPECT_EQ(locals, 40);
  EXPECT_EQ(globals, 20);
}

TEST(BuildDataset, GlobalPairsUseDistinctIdentities) {
  const auto pairs = identity_pairs(30, 12, 64, 80);
  GenConfig config;
  config.magnification = 3.0;
  const DatasetBuild build = build_dataset(pairs, config, 7);
  for (const SynthSample& s : build.samples)
    if (s.kind == SampleKind::kGlobalMismatch) {
      ASSERT_EQ(s.source_ids.size(), 2u);
      EXPECT_NE(s.source_ids[0], s.source_ids[1]);
    }
}

TEST(BuildDataset, MagnificationZeroGivesEmptyDataset) {
  const auto pairs = identity_pairs(31, 3, 64, 80);
  GenConfig config;
  config.magnification = 0.0;
  const DatasetBuild build = build_dataset(pairs, config, 1);
  EXPECT_TRUE(build.samples.empty());
  EXPECT_EQ(build.report.local_count, 0);
  EXPECT_EQ(build.report.global_count, 0);
}

TEST(BuildDataset, SingleIdentitySkipsGlobals) {
  const auto pairs = identity_pairs(32, 1, 80, 100);
  GenConfig config;
  config.magnification = 6.0;
  const DatasetBuild build = build_dataset(pairs, config, 2);
  EXPECT_EQ(build.report.global_count, 0);
  EXPECT_EQ(build.report.skipped, 2);  // round(6*1/3) global slots, no partner
  EXPECT_EQ(build.report.local_count, 4);
}

TEST(BuildDataset, WorkerCountDoesNotChangeOutput) {
  const auto pairs = identity_pairs(33, 10, 80, 100);
  GenConfig config;
  config.magnification = 3.0;
  const DatasetBuild one = build_dataset(pairs, config, 99, 1);
  const DatasetBuild three = build_dataset(pairs, config, 99, 3);
  ASSERT_EQ(one.samples.size(), three.samples.size());
  for (size_t i = 0; i < one.samples.size(); ++i) {
    const SynthSample& a = one.samples[i];
    const SynthSample& b = three.samples[i];
    EXPECT_EQ(a.pair.pair_id, b.pair.pair_id);
    EXPECT_EQ(a.kind, b.kind);
    ASSERT_EQ(a.boxes.size(), b.boxes.size());
    for (size_t k = 0; k < a.boxes.size(); ++k) {
      EXPECT_EQ(a.boxes[k].box.x1, b.boxes[k].box.x1);
      EXPECT_EQ(a.boxes[k].box.y2, b.boxes[k].box.y2);
    }
    EXPECT_EQ(a.pair.design.data, b.pair.design.data);
    EXPECT_EQ(a.pair.photo.data, b.pair.photo.data);
  }
}

TEST(BuildDataset, SeedChangesBoxes) {
  const auto pairs = identity_pairs(34, 6, 80, 100);
  GenConfig config;
  config.magnification = 2.0;
  const DatasetBuild a = build_dataset(pairs, config, 1);
  const DatasetBuild b = build_dataset(pairs, config, 2);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  bool any_difference = false;
  for (size_t i = 0; i < a.samples.size(); ++i)
    if (a.samples[i].kind == SampleKind::kLocalPatch &&
        b.samples[i].kind == SampleKind::kLocalPatch &&
        (a.samples[i].boxes[0].box.x1 != b.samples[i].boxes[0].box.x1 ||
         a.samples[i].boxes[0].box.y1 != b.samples[i].boxes[0].box.y1))
      any_difference = true;
  EXPECT_TRUE(any_difference);
}

TEST(BuildDataset, SmallBoxesAreTheModalAreaBucket) {
  const auto pairs = identity_pairs(35, 40, 128, 160);
  GenConfig config;
  config.magnification = 5.0;
  const DatasetBuild build = build_dataset(pairs, config, 77);
  const auto& hist = build.report.local_area_hist;
  int total = 0;
  for (int v : hist) total += v;
  ASSERT_GT(total, 100);
  for (int b = 1; b < 10; ++b) EXPECT_GT(hist[0], hist[b]);
  // Global mismatches sit in the top bucket by construction.
  EXPECT_EQ(build.report.global_area_hist[9], build.report.global_count);
}

TEST(DatasetIo, RoundTripPreservesSamples) {
  const auto pairs = identity_pairs(36, 4, 64, 80);
  GenConfig config;
  config.magnification = 1.5;
  const DatasetBuild build = build_dataset(pairs, config, 5);
  ASSERT_FALSE(build.samples.empty());

  const fs::path root = temp_dir("roundtrip");
  write_dataset(root, build.samples, build.report);
  const std::vector<SynthSample> loaded = read_dataset(root);
  ASSERT_EQ(loaded.size(), build.samples.size());
  for (size_t i = 0; i < loaded.size(); ++i) {
    const SynthSample& w = build.samples[i];
    const SynthSample& r = loaded[i];
    EXPECT_EQ(r.pair.pair_id, w.pair.pair_id);
    EXPECT_EQ(r.kind, w.kind);
    ASSERT_EQ(r.boxes.size(), w.boxes.size());
    for (size_t k = 0; k < r.boxes.size(); ++k) {
      EXPECT_EQ(r.boxes[k].box.x1, w.boxes[k].box.x1);
      EXPECT_EQ(r.boxes[k].box.y1, w.boxes[k].box.y1);
      EXPECT_EQ(r.boxes[k].box.x2, w.boxes[k].box.x2);
      EXPECT_EQ(r.boxes[k].box.y2, w.boxes[k].box.y2);
    }
    EXPECT_EQ(r.pair.design.data, w.pair.design.data);  // png is lossless
    EXPECT_EQ(r.pair.photo.data, w.pair.photo.data);
  }
  fs::remove_all(root);
}

TEST(DatasetIo, AnnotationFileIsBitExactAcrossRuns) {
  const auto pairs = identity_pairs(37, 4, 64, 80);
  GenConfig config;
  config.magnification = 2.0;
  const fs::path a = temp_dir("bitexact_a");
  const fs::path b = temp_dir("bitexact_b");
  const DatasetBuild run1 = build_dataset(pairs, config, 12345);
  const DatasetBuild run2 = build_dataset(pairs, config, 12345, 2);
  write_dataset(a, run1.samples, run1.report);
  write_dataset(b, run2.samples, run2.report);

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  EXPECT_EQ(slurp(a / "annotations.jsonl"), slurp(b / "annotations.jsonl"));
  EXPECT_EQ(slurp(a / "report.json"), slurp(b / "report.json"));
  EXPECT_FALSE(slurp(a / "annotations.jsonl").empty());
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(DatasetIo, ReportCarriesSeedAndConfigEcho) {
  const auto pairs = identity_pairs(38, 3, 64, 80);
  GenConfig config;
  config.magnification = 2.0;
  config.histogram_threshold = 0.25;
  const DatasetBuild build = build_dataset(pairs, config, 987);
  const fs::path root = temp_dir("report");
  write_dataset(root, build.samples, build.report);

  std::ifstream in(root / "report.json");
  const json j = json::parse(in);
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 987u);
  EXPECT_EQ(j.at("local_area_hist").size(), 10u);
  EXPECT_DOUBLE_EQ(j.at("config").at("histogram_threshold").get<double>(), 0.25);
  EXPECT_DOUBLE_EQ(j.at("config").at("magnification").get<double>(), 2.0);
  EXPECT_EQ(j.at("local_count").get<int>() + j.at("global_count").get<int>() +
                j.at("skipped").get<int>(),
            static_cast<int>(std::llround(config.magnification * pairs.size())));
  fs::remove_all(root);
}

TEST(GenConfigValidate, RejectsBadRanges) {
  GenConfig c;
  c.local_fraction = 1.5;
  EXPECT_THROW(c.validate(), InvalidConfig);
  c = GenConfig{};
  c.patch_min_fraction = 0.5;
  c.patch_max_fraction = 0.4;
  EXPECT_THROW(c.validate(), InvalidConfig);
  c = GenConfig{};
  c.histogram_threshold = 0.0;
  EXPECT_THROW(c.validate(), InvalidConfig);
  c = GenConfig{};
  c.magnification = -1.0;
  EXPECT_THROW(c.validate(), InvalidConfig);
}

TEST(SampleKindNames, RoundTrip) {
  for (SampleKind k : {SampleKind::kLocalPatch, SampleKind::kGlobalMismatch,
                       SampleKind::kSame, SampleKind::kDifferent})
    EXPECT_EQ(sample_kind_from_name(sample_kind_name(k)), k);
  EXPECT_THROW(sample_kind_from_name("bogus"), InvalidConfig);
}

}  // namespace
}  // namespace diffspot

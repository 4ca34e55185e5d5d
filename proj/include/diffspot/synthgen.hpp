#ifndef DIFFSPOT_SYNTHGEN_HPP_
#define DIFFSPOT_SYNTHGEN_HPP_

#include <array>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "diffspot/histogram.hpp"
#include "diffspot/image.hpp"
#include "diffspot/rng.hpp"

namespace diffspot {

enum class SampleKind { kLocalPatch, kGlobalMismatch, kSame, kDifferent };

inline std::string sample_kind_name(SampleKind k) {
  switch (k) {
    case SampleKind::kLocalPatch: return "local";
    case SampleKind::kGlobalMismatch: return "global";
    case SampleKind::kSame: return "same";
    case SampleKind::kDifferent: return "different";
  }
  return "same";
}

inline SampleKind sample_kind_from_name(const std::string& s) {
  if (s == "local") return SampleKind::kLocalPatch;
  if (s == "global") return SampleKind::kGlobalMismatch;
  if (s == "same") return SampleKind::kSame;
  if (s == "different") return SampleKind::kDifferent;
  throw InvalidConfig("unknown sample kind: " + s);
}

// A weakly labeled pair turned into a box-annotated training sample.
struct SynthSample {
  AlignedPair pair;
  std::vector<DiffBox> boxes;  // ground truth, score 1
  SampleKind kind = SampleKind::kSame;
  std::vector<std::string> source_ids;

  // Provenance of the paste, kept for audits; not serialized.
  int modified_branch = -1;  // 0 = design, 1 = photo
  Box source_box;

  void validate() const {
    pair.validate();
    for (const DiffBox& d : boxes) {
      if (!d.box.valid() || !box_inside(d.box, pair.photo.width, pair.photo.height))
        throw InvalidConfig("ground-truth box violates bounds");
      if (d.score < 0.0 || d.score > 1.0)
        throw InvalidConfig("box score outside [0,1]");
    }
    if (kind == SampleKind::kLocalPatch && boxes.size() != 1)
      throw InvalidConfig("local-patch sample must carry exactly one box");
    if (kind == SampleKind::kGlobalMismatch) {
      if (boxes.size() != 1) throw InvalidConfig("global sample must carry one box");
      const Box& b = boxes[0].box;
      if (b.x1 != 0 || b.y1 != 0 || b.x2 != pair.photo.width ||
          b.y2 != pair.photo.height)
        throw InvalidConfig("global sample box must equal the image extent");
    }
  }
};

struct GenConfig {
  double magnification = 2.0;
  double local_fraction = 2.0 / 3.0;
  double patch_min_fraction = 0.05;  // of each image dimension
  double patch_max_fraction = 0.40;
  double feather_min_px = 2.0;  // margin blur on the paste border
  double feather_max_px = 5.0;
  double scale_min = 0.9;  // small-range scaling of the copied patch
  double scale_max = 1.1;
  double histogram_threshold = 0.3;
  int histogram_bins = 32;
  int max_attempts = 50;

  void validate() const {
    if (local_fraction < 0.0 || local_fraction > 1.0)
      throw InvalidConfig("local_fraction outside [0,1]");
    if (magnification < 0.0) throw InvalidConfig("negative magnification");
    if (patch_min_fraction >= patch_max_fraction)
      throw InvalidConfig("patch size range is empty");
    if (patch_min_fraction <= 0.0 || patch_max_fraction > 1.0)
      throw InvalidConfig("patch fractions outside (0,1]");
    if (histogram_threshold <= 0.0)
      throw InvalidConfig("histogram threshold must be positive");
    if (scale_min > scale_max || scale_min <= 0.0)
      throw InvalidConfig("bad scale range");
    if (max_attempts < 1) throw InvalidConfig("max_attempts must be >= 1");
  }
};

namespace detail {

// Feathered paste: the scaled patch is blended over the destination with an
// alpha mask that ramps to zero over `feather` pixels at the border.
inline void paste_feathered(Image& target, const Image& patch, int dx, int dy,
                            double feather) {
  const int w = patch.width;
  const int h = patch.height;
  cv::Mat mask = cv::Mat::zeros(h, w, CV_32F);
  const int inset = std::max(1, static_cast<int>(std::lround(feather)));
  const cv::Rect inner(std::min(inset, w / 2), std::min(inset, h / 2),
                       std::max(1, w - 2 * std::min(inset, w / 2)),
                       std::max(1, h - 2 * std::min(inset, h / 2)));
  mask(inner).setTo(1.0f);
  cv::GaussianBlur(mask, mask, cv::Size(0, 0), std::max(0.5, feather / 2.0));

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float a = mask.at<float>(y, x);
      for (int c = 0; c < 3; ++c) {
        const float src = patch.at(x, y, c);
        const float dst = target.at(x + dx, y + dy, c);
        target.at(x + dx, y + dy, c) =
            cv::saturate_cast<std::uint8_t>(a * src + (1.0f - a) * dst);
      }
    }
}

}  // namespace detail

// Copies a random patch of one of the two images somewhere else in the same
// image, disturbed by small scaling and a blurred margin. The paste is
// accepted only when the patch and the pre-paste destination differ in color
// histogram, which rejects pastes that would be wrongly labeled "different".
inline SynthSample synth_local_pair(const AlignedPair& same_pair,
                                    const GenConfig& config, Rng& rng) {
  config.validate();
  same_pair.validate();
  const int W = same_pair.photo.width;
  const int H = same_pair.photo.height;

  SynthSample sample;
  sample.pair = same_pair;
  sample.kind = SampleKind::kLocalPatch;
  sample.source_ids = {same_pair.pair_id};
  const int branch = rng.uniform_int(0, 1);  // either image, uniformly
  Image& target = branch == 0 ? sample.pair.design : sample.pair.photo;

  for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
    const int pw = std::max(
        3, static_cast<int>(std::lround(
               rng.uniform(config.patch_min_fraction, config.patch_max_fraction) * W)));
    const int ph = std::max(
        3, static_cast<int>(std::lround(
               rng.uniform(config.patch_min_fraction, config.patch_max_fraction) * H)));
    if (pw >= W || ph >= H) continue;
    const double scale = rng.uniform(config.scale_min, config.scale_max);
    const int dw = std::clamp(static_cast<int>(std::lround(pw * scale)), 3, W - 1);
    const int dh = std::clamp(static_cast<int>(std::lround(ph * scale)), 3, H - 1);

    const int sx = rng.uniform_int(0, W - pw);
    const int sy = rng.uniform_int(0, H - ph);
    const int dx = rng.uniform_int(0, W - dw);
    const int dy = rng.uniform_int(0, H - dh);
    // Keep the destination clear of the source in at least one axis, so the
    // paste cannot land (almost) on top of itself.
    if (std::abs(dx - sx) < pw && std::abs(dy - sy) < ph) continue;

    const Image patch = crop_image(target, sx, sy, pw, ph);
    const Image destination = crop_image(target, dx, dy, dw, dh);
    if (histogram_distance(patch, destination, config.histogram_bins) <=
        config.histogram_threshold)
      continue;  // looks the same as what it would cover

    const Image scaled = resize_image(patch, dw, dh);
    const double feather = rng.uniform(config.feather_min_px, config.feather_max_px);
    detail::paste_feathered(target, scaled, dx, dy, feather);

    sample.boxes = {DiffBox{Box{static_cast<double>(dx), static_cast<double>(dy),
                                static_cast<double>(dx + dw),
                                static_cast<double>(dy + dh)},
                            1.0}};
    sample.modified_branch = branch;
    sample.source_box = Box{static_cast<double>(sx), static_cast<double>(sy),
                            static_cast<double>(sx + pw),
                            static_cast<double>(sy + ph)};
    sample.validate();
    return sample;
  }
  throw GenerationExhausted("no acceptable paste after " +
                            std::to_string(config.max_attempts) + " attempts");
}

// Pairs a photo with a mismatched design resized to the photo's dimensions;
// the difference is the whole image.
inline SynthSample synth_global_pair(const Image& photo,
                                     const std::string& photo_id,
                                     const Image& wrong_design,
                                     const std::string& design_id) {
  if (photo_id == design_id)
    throw IdentityCollision("both images come from pair " + photo_id);
  SynthSample sample;
  sample.kind = SampleKind::kGlobalMismatch;
  sample.source_ids = {photo_id, design_id};
  sample.pair.photo = photo;
  sample.pair.design = resize_image(wrong_design, photo.width, photo.height);
  sample.pair.transform = Affine::identity();
  sample.pair.pair_id = photo_id + "_x_" + design_id;
  sample.boxes = {DiffBox{Box{0, 0, static_cast<double>(photo.width),
                              static_cast<double>(photo.height)},
                          1.0}};
  sample.validate();
  return sample;
}

// Box-area-fraction histogram in ten 10% buckets plus bookkeeping; echoes
// the seed and config so a run can be reproduced from its report.
struct DistributionReport {
  int local_count = 0;
  int global_count = 0;
  int skipped = 0;
  std::array<int, 10> local_area_hist{};
  std::array<int, 10> global_area_hist{};
  std::uint64_t seed = 0;
  GenConfig config;

  static int bucket(double area_fraction) {
    const int b = static_cast<int>(area_fraction * 10.0);
    return std::clamp(b, 0, 9);
  }

  void add(const SynthSample& s) {
    const double img_area =
        static_cast<double>(s.pair.photo.width) * s.pair.photo.height;
    for (const DiffBox& d : s.boxes) {
      const int b = bucket(d.box.area() / img_area);
      if (s.kind == SampleKind::kLocalPatch) ++local_area_hist[b];
      if (s.kind == SampleKind::kGlobalMismatch) ++global_area_hist[b];
    }
    if (s.kind == SampleKind::kLocalPatch) ++local_count;
    if (s.kind == SampleKind::kGlobalMismatch) ++global_count;
  }
};

struct DatasetBuild {
  std::vector<SynthSample> samples;
  DistributionReport report;
};

// Emits round(magnification * |same_pairs|) samples split per
// local_fraction. Each sample derives its private RNG from (seed, index),
// so worker count cannot change the output; exhausted samples are skipped
// and counted, not fatal.
inline DatasetBuild build_dataset(const std::vector<AlignedPair>& same_pairs,
                                  const GenConfig& config, std::uint64_t seed,
                                  int workers = 1) {
  config.validate();
  const int total = static_cast<int>(
      std::llround(config.magnification * static_cast<double>(same_pairs.size())));
  if (total > 0 && same_pairs.empty())
    throw InvalidConfig("cannot synthesize from an empty pair list");

  const int n_local =
      static_cast<int>(std::llround(total * config.local_fraction));
  DatasetBuild build;
  build.report.seed = seed;
  build.report.config = config;
  if (total == 0) return build;

  std::vector<std::optional<SynthSample>> slots(total);
  const int P = static_cast<int>(same_pairs.size());

  auto make_one = [&](int i) {
    Rng rng(sub_seed(seed, static_cast<std::uint64_t>(i)));
    if (i < n_local) {
      const int p = rng.uniform_int(0, P - 1);
      try {
        slots[i] = synth_local_pair(same_pairs[p], config, rng);
      } catch (const GenerationExhausted&) {
        slots[i] = std::nullopt;
      }
    } else {
      const int p = rng.uniform_int(0, P - 1);
      int q = p;
      while (q == p && P > 1) q = rng.uniform_int(0, P - 1);
      if (q == p) {
        slots[i] = std::nullopt;  // single identity: no mismatch possible
        return;
      }
      slots[i] = synth_global_pair(same_pairs[p].photo, same_pairs[p].pair_id,
                                   same_pairs[q].design, same_pairs[q].pair_id);
    }
  };

  if (workers <= 1) {
    for (int i = 0; i < total; ++i) make_one(i);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t)
      pool.emplace_back([&, t]() {
        for (int i = t; i < total; i += workers) make_one(i);
      });
    for (auto& th : pool) th.join();
  }

  for (int i = 0; i < total; ++i) {
    if (!slots[i]) {
      ++build.report.skipped;
      continue;
    }
    char name[32];
    std::snprintf(name, sizeof(name), "synth_%06d", i);
    slots[i]->pair.pair_id = name;  // slot-indexed, unique and seed-stable
    build.report.add(*slots[i]);
    build.samples.push_back(std::move(*slots[i]));
  }
  return build;
}

}  // namespace diffspot

#endif  // DIFFSPOT_SYNTHGEN_HPP_

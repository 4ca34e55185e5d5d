#ifndef DIFFSPOT_EVALKIT_HPP_
#define DIFFSPOT_EVALKIT_HPP_

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "diffspot/geometry.hpp"
#include "diffspot/synthgen.hpp"

namespace diffspot {

enum class PairLabel { kSame = 0, kDifferent = 1 };

inline const char* pair_label_name(PairLabel l) {
  return l == PairLabel::kSame ? "same" : "different";
}

inline PairLabel label_of(SampleKind kind) {
  return kind == SampleKind::kSame ? PairLabel::kSame : PairLabel::kDifferent;
}

// Verification score for one pair: larger distance means "more different".
struct PairScore {
  std::string pair_id;
  double distance = 0.0;
  PairLabel label = PairLabel::kSame;
};

// The pair statistic: the highest detection score; no detections reads as a
// confident "same".
inline double pair_distance(const std::vector<DiffBox>& detections) {
  double best = 0.0;
  for (const DiffBox& d : detections) best = std::max(best, d.score);
  return best;
}

struct RocPoint {
  double threshold = 0.0;  // accept Same when distance <= threshold
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocResult {
  std::vector<RocPoint> points;  // from (0,0) to (1,1), fpr/tpr nondecreasing
  double auc = 0.0;
};

// Same pairs are the positive class and low distance votes Same, so the
// sweep accepts everything up to each distinct distance value; tied
// distances collapse into a single operating point.
inline RocResult roc_curve(std::vector<PairScore> scores) {
  std::size_t n_pos = 0, n_neg = 0;
  for (const PairScore& s : scores) {
    if (s.distance < 0) throw InvalidConfig("negative pair distance");
    (s.label == PairLabel::kSame ? n_pos : n_neg) += 1;
  }
  if (n_pos == 0 || n_neg == 0)
    throw DegenerateLabels("roc needs both a Same and a Different pair");

  std::sort(scores.begin(), scores.end(),
            [](const PairScore& a, const PairScore& b) {
              return a.distance < b.distance;
            });
  RocResult roc;
  roc.points.push_back({-1.0, 0.0, 0.0});  // below any admissible distance
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < scores.size();) {
    const double d = scores[i].distance;
    for (; i < scores.size() && scores[i].distance == d; ++i)
      (scores[i].label == PairLabel::kSame ? tp : fp) += 1;
    roc.points.push_back({d, static_cast<double>(fp) / n_neg,
                          static_cast<double>(tp) / n_pos});
  }
  for (std::size_t k = 1; k < roc.points.size(); ++k)
    roc.auc += (roc.points[k].fpr - roc.points[k - 1].fpr) *
               (roc.points[k].tpr + roc.points[k - 1].tpr) / 2.0;
  return roc;
}

// Linear interpolation along the curve; vertical segments resolve to the
// higher true-positive rate.
inline double tpr_at_fpr(const RocResult& roc, double fpr_target) {
  if (roc.points.empty()) throw InvalidConfig("empty roc curve");
  const double t = std::clamp(fpr_target, 0.0, 1.0);
  const RocPoint* below = nullptr;
  const RocPoint* above = nullptr;
  for (const RocPoint& p : roc.points) {
    if (p.fpr <= t) below = &p;  // points are sorted, keep the last
    if (p.fpr > t) {
      above = &p;
      break;
    }
  }
  if (!below) return 0.0;
  if (!above || below->fpr == t) return below->tpr;
  const double f = (t - below->fpr) / (above->fpr - below->fpr);
  return below->tpr + f * (above->tpr - below->tpr);
}

// Occlusion sensitivity: slide a gray square over the photo and record the
// classifier's P(different) at every grid cell. Cells near the right/bottom
// edge clamp so the square stays inside the image.
struct OcclusionMap {
  int rows = 0, cols = 0;
  int square = 0, stride = 0;
  std::vector<double> values;  // row-major

  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

inline OcclusionMap occlusion_map(
    const std::function<double(const AlignedPair&)>& classifier,
    const AlignedPair& pair, int square = 64, int stride = 32) {
  pair.validate();
  const int W = pair.photo.width, H = pair.photo.height;
  if (square > std::min(W, H))
    throw SquareTooLarge("occlusion square " + std::to_string(square) +
                         " exceeds image " + std::to_string(W) + "x" +
                         std::to_string(H));
  if (square < 1 || stride < 1) throw InvalidConfig("square/stride must be positive");
  OcclusionMap map;
  map.square = square;
  map.stride = stride;
  map.rows = static_cast<int>(std::ceil(double(H - square) / stride)) + 1;
  map.cols = static_cast<int>(std::ceil(double(W - square) / stride)) + 1;
  map.values.reserve(static_cast<std::size_t>(map.rows) * map.cols);
  for (int r = 0; r < map.rows; ++r)
    for (int c = 0; c < map.cols; ++c) {
      const int y0 = std::min(r * stride, H - square);
      const int x0 = std::min(c * stride, W - square);
      AlignedPair occluded = pair;
      for (int y = y0; y < y0 + square; ++y)
        for (int x = x0; x < x0 + square; ++x)
          for (int ch = 0; ch < occluded.photo.channels; ++ch)
            occluded.photo.at(x, y, ch) = 128;
      map.values.push_back(classifier(occluded));
    }
  return map;
}

struct EvalReport {
  RocResult roc;
  std::vector<PairScore> pairs;  // sorted by pair_id
  std::map<double, double> tpr_at;  // fpr -> tpr at the reported points
  int skipped = 0;
};

inline constexpr double kReportFprPoints[] = {0.01, 0.05, 0.1};

// Scores every sample with `score` (distance, larger = more different),
// skipping pairs whose scoring throws; builds the ROC over the rest.
template <typename ScoreFn>
EvalReport evaluate_scores(const std::vector<SynthSample>& testset,
                           ScoreFn&& score) {
  EvalReport report;
  for (const SynthSample& s : testset) {
    try {
      PairScore ps;
      ps.pair_id = s.pair.pair_id;
      ps.label = label_of(s.kind);
      ps.distance = score(s);
      report.pairs.push_back(std::move(ps));
    } catch (const Error&) {
      ++report.skipped;
    }
  }
  if (report.pairs.empty())
    throw DegenerateLabels("no pairs could be scored");
  report.roc = roc_curve(report.pairs);
  std::sort(report.pairs.begin(), report.pairs.end(),
            [](const PairScore& a, const PairScore& b) {
              return a.pair_id < b.pair_id;
            });
  for (double f : kReportFprPoints) report.tpr_at[f] = tpr_at_fpr(report.roc, f);
  return report;
}

// Simple line plot of the ROC curve on a white canvas with the chance
// diagonal for reference.
inline Image render_roc_plot(const RocResult& roc, int size = 512) {
  Image img = Image::filled(size, size, 3, 255);
  cv::Mat canvas = mat_view(img);
  const auto to_px = [&](double fpr, double tpr) {
    const int margin = 32;
    const int span = size - 2 * margin;
    return cv::Point(margin + static_cast<int>(std::lround(fpr * span)),
                     size - margin - static_cast<int>(std::lround(tpr * span)));
  };
  cv::rectangle(canvas, to_px(0, 1), to_px(1, 0), cv::Scalar(0, 0, 0), 1);
  cv::line(canvas, to_px(0, 0), to_px(1, 1), cv::Scalar(190, 190, 190), 1);
  for (std::size_t k = 1; k < roc.points.size(); ++k)
    cv::line(canvas, to_px(roc.points[k - 1].fpr, roc.points[k - 1].tpr),
             to_px(roc.points[k].fpr, roc.points[k].tpr),
             cv::Scalar(180, 60, 20), 2);
  return img;
}

inline void write_eval_report(const std::string& out_dir, const EvalReport& report) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  char line[256];
  {
    std::ofstream roc_csv(fs::path(out_dir) / "roc.csv");
    if (!roc_csv) throw IoError("cannot write roc.csv under " + out_dir);
    roc_csv << "threshold,fpr,tpr\n";
    for (const RocPoint& p : report.roc.points) {
      std::snprintf(line, sizeof(line), "%.9g,%.9g,%.9g\n", p.threshold, p.fpr, p.tpr);
      roc_csv << line;
    }
  }
  {
    std::ofstream pairs_csv(fs::path(out_dir) / "pairs.csv");
    if (!pairs_csv) throw IoError("cannot write pairs.csv under " + out_dir);
    pairs_csv << "pair_id,label,distance\n";
    for (const PairScore& s : report.pairs) {
      std::snprintf(line, sizeof(line), "%s,%s,%.9g\n", s.pair_id.c_str(),
                    pair_label_name(s.label), s.distance);
      pairs_csv << line;
    }
  }
  {
    nlohmann::ordered_json summary;
    summary["auc"] = report.roc.auc;
    nlohmann::ordered_json tpr = nlohmann::ordered_json::object();
    for (const auto& [f, t] : report.tpr_at) {
      std::snprintf(line, sizeof(line), "fpr_%g", f);
      tpr[line] = t;
    }
    summary["tpr_at"] = tpr;
    summary["pairs"] = report.pairs.size();
    summary["skipped"] = report.skipped;
    std::ofstream out(fs::path(out_dir) / "summary.json");
    if (!out) throw IoError("cannot write summary.json under " + out_dir);
    out << summary.dump(2) << "\n";
  }
  save_image((fs::path(out_dir) / "roc.png").string(), render_roc_plot(report.roc));
}

}  // namespace diffspot

#endif  // DIFFSPOT_EVALKIT_HPP_

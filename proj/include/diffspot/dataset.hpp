#ifndef DIFFSPOT_DATASET_HPP_
#define DIFFSPOT_DATASET_HPP_

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffspot/synthgen.hpp"

namespace diffspot {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline json gen_config_to_json(const GenConfig& c) {
  return json{{"magnification", c.magnification},
              {"local_fraction", c.local_fraction},
              {"patch_min_fraction", c.patch_min_fraction},
              {"patch_max_fraction", c.patch_max_fraction},
              {"feather_min_px", c.feather_min_px},
              {"feather_max_px", c.feather_max_px},
              {"scale_min", c.scale_min},
              {"scale_max", c.scale_max},
              {"histogram_threshold", c.histogram_threshold},
              {"histogram_bins", c.histogram_bins},
              {"max_attempts", c.max_attempts}};
}

inline GenConfig gen_config_from_json(const json& j) {
  GenConfig c;
  c.magnification = j.value("magnification", c.magnification);
  c.local_fraction = j.value("local_fraction", c.local_fraction);
  c.patch_min_fraction = j.value("patch_min_fraction", c.patch_min_fraction);
  c.patch_max_fraction = j.value("patch_max_fraction", c.patch_max_fraction);
  c.feather_min_px = j.value("feather_min_px", c.feather_min_px);
  c.feather_max_px = j.value("feather_max_px", c.feather_max_px);
  c.scale_min = j.value("scale_min", c.scale_min);
  c.scale_max = j.value("scale_max", c.scale_max);
  c.histogram_threshold = j.value("histogram_threshold", c.histogram_threshold);
  c.histogram_bins = j.value("histogram_bins", c.histogram_bins);
  c.max_attempts = j.value("max_attempts", c.max_attempts);
  return c;
}

inline json report_to_json(const DistributionReport& r) {
  return json{{"local_count", r.local_count},
              {"global_count", r.global_count},
              {"skipped", r.skipped},
              {"local_area_hist", r.local_area_hist},
              {"global_area_hist", r.global_area_hist},
              {"seed", r.seed},
              {"config", gen_config_to_json(r.config)}};
}

// One record per sample; file layout:
//   pairs/<id>_design.png, pairs/<id>_photo.png
//   annotations.jsonl, report.json
inline void write_dataset(const fs::path& root, const std::vector<SynthSample>& samples,
                          const DistributionReport& report) {
  fs::create_directories(root / "pairs");
  std::ofstream ann(root / "annotations.jsonl");
  if (!ann) throw IoError("cannot open " + (root / "annotations.jsonl").string());
  int counter = 0;
  for (const SynthSample& s : samples) {
    const std::string id =
        s.pair.pair_id.empty() ? "sample_" + std::to_string(counter) : s.pair.pair_id;
    ++counter;
    save_image((root / "pairs" / (id + "_design.png")).string(), s.pair.design);
    save_image((root / "pairs" / (id + "_photo.png")).string(), s.pair.photo);
    json boxes = json::array();
    for (const DiffBox& d : s.boxes)
      boxes.push_back({d.box.x1, d.box.y1, d.box.x2, d.box.y2});
    const json record{{"id", id},
                      {"kind", sample_kind_name(s.kind)},
                      {"boxes", boxes},
                      {"width", s.pair.photo.width},
                      {"height", s.pair.photo.height}};
    ann << record.dump() << "\n";
  }
  std::ofstream rep(root / "report.json");
  if (!rep) throw IoError("cannot open " + (root / "report.json").string());
  rep << report_to_json(report).dump(2) << "\n";
}

inline std::vector<SynthSample> read_dataset(const fs::path& root) {
  std::ifstream ann(root / "annotations.jsonl");
  if (!ann) throw IoError("cannot open " + (root / "annotations.jsonl").string());
  std::vector<SynthSample> samples;
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    const json record = json::parse(line);
    SynthSample s;
    s.pair.pair_id = record.at("id").get<std::string>();
    s.kind = sample_kind_from_name(record.at("kind").get<std::string>());
    for (const auto& b : record.at("boxes"))
      s.boxes.push_back(DiffBox{Box{b.at(0).get<double>(), b.at(1).get<double>(),
                                    b.at(2).get<double>(), b.at(3).get<double>()},
                                1.0});
    s.pair.design =
        load_image((root / "pairs" / (s.pair.pair_id + "_design.png")).string());
    s.pair.photo =
        load_image((root / "pairs" / (s.pair.pair_id + "_photo.png")).string());
    const int w = record.at("width").get<int>();
    const int h = record.at("height").get<int>();
    if (w != s.pair.photo.width || h != s.pair.photo.height)
      throw IoError("annotation dims disagree with " + s.pair.pair_id + "_photo.png");
    s.source_ids = {s.pair.pair_id};
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace diffspot

#endif  // DIFFSPOT_DATASET_HPP_

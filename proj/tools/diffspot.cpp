// diffspot: single entry-point tool for the cover change-detection pipeline.
// Subcommands: gendata, align, synth, count, train, eval, detect, baseline,
// occlusion. Every command that writes files also writes a manifest.json
// describing the run (command, config echo, seed, paths, duration), so a run
// can be reproduced bit-exactly from its outputs.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "diffspot/baselines.hpp"
#include "diffspot/covergen.hpp"
#include "diffspot/dataset.hpp"
#include "diffspot/imaging.hpp"

namespace diffspot {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr const char* kVersion = "0.1.0";

std::vector<std::string> g_argv;

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_ =
      std::chrono::steady_clock::now();
};

void write_json_atomic(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

void write_manifest(const fs::path& out_dir, const std::string& command,
                    std::uint64_t seed, const json& config, const json& inputs,
                    const json& outputs, const Stopwatch& timer) {
  json m;
  m["command"] = command;
  m["version"] = kVersion;
  m["invocation"] = g_argv;
  m["seed"] = seed;
  m["config"] = config;
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  m["duration_seconds"] = timer.seconds();
  write_json_atomic(out_dir / "manifest.json", m);
}

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot read config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidConfig("config file is not valid JSON: " +
                        std::string(e.what()));
  }
}

json arch_to_json(const ArchConfig& a) {
  return {{"concat_index", a.concat_index},
          {"width_factor", a.width_factor},
          {"input_scale", a.input_scale},
          {"input_channels_per_branch", a.input_channels_per_branch}};
}

json schedule_to_json(const TrainSchedule& s) {
  return {{"base_lr", s.base_lr},
          {"drop_lr", s.drop_lr},
          {"epochs_at_base", s.epochs_at_base},
          {"epochs_at_drop", s.epochs_at_drop},
          {"momentum", s.momentum},
          {"weight_decay", s.weight_decay},
          {"clip_norm", s.clip_norm},
          {"input_scale", s.input_scale},
          {"max_side", s.max_side}};
}

TrainSchedule schedule_from_json(const json& j, TrainSchedule s = {}) {
  s.base_lr = j.value("base_lr", s.base_lr);
  s.drop_lr = j.value("drop_lr", s.drop_lr);
  s.epochs_at_base = j.value("epochs_at_base", s.epochs_at_base);
  s.epochs_at_drop = j.value("epochs_at_drop", s.epochs_at_drop);
  s.momentum = j.value("momentum", s.momentum);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.clip_norm = j.value("clip_norm", s.clip_norm);
  s.input_scale = j.value("input_scale", s.input_scale);
  s.max_side = j.value("max_side", s.max_side);
  return s;
}

int parse_merge_name(const std::string& s) {
  std::string digits = s;
  if (s.rfind("conv", 0) == 0) digits = s.substr(4);
  if (digits.size() != 1 || digits[0] < '1' || digits[0] > '5')
    throw InvalidConfig("unknown arch \"" + s + "\" (expected conv1..conv5)");
  return digits[0] - '0';
}

double parse_width_flag(const std::string& s) {
  try {
    return parse_width_fraction(s);
  } catch (const InvalidConfig&) {
    throw;
  } catch (const std::exception&) {
    throw InvalidConfig("bad width fraction: " + s);
  }
}

std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x != std::string::npos) {
      const int w = std::stoi(s.substr(0, x));
      const int h = std::stoi(s.substr(x + 1));
      if (w > 0 && h > 0) return {w, h};
    }
  } catch (const std::exception&) {
  }
  throw InvalidConfig("bad size \"" + s + "\" (expected WIDTHxHEIGHT)");
}

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const auto comma = csv.find(',', start);
    const std::string tok =
        csv.substr(start, comma == std::string::npos ? comma : comma - start);
    try {
      if (!tok.empty()) out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw InvalidConfig("bad number \"" + tok + "\" in list \"" + csv + "\"");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw InvalidConfig("empty number list");
  return out;
}

std::string csv_escape(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

// ---------------------------------------------------------------------------
// gendata: synthetic photo/design corpus for demos and pipeline tests.

struct GendataOpts {
  std::string out;
  int pairs = 6;
  int width = 480;
  int height = 360;
  std::uint64_t seed = 1;
};

void cmd_gendata(const GendataOpts& o) {
  Stopwatch timer;
  if (o.pairs < 1) throw InvalidConfig("--pairs must be at least 1");
  if (o.width < 64 || o.height < 64)
    throw InvalidConfig("cover size must be at least 64x64");
  const fs::path out(o.out);
  fs::create_directories(out / "designs");
  fs::create_directories(out / "photos");

  // One shared belt background; photos composite a warped cover onto it.
  const int cw = static_cast<int>(o.width * 1.6);
  const int ch = static_cast<int>(o.height * 1.6);
  Rng belt_rng(sub_seed(o.seed, 0));
  Image belt = Image::filled(cw, ch, 3, 30);
  for (auto& v : belt.data)
    v = static_cast<std::uint8_t>(
        std::clamp(30 + belt_rng.uniform_int(-6, 6), 0, 255));
  save_image((out / "background.png").string(), belt);

  for (int i = 0; i < o.pairs; ++i) {
    Rng rng(sub_seed(o.seed, static_cast<std::uint64_t>(i) + 1));
    char name[32];
    std::snprintf(name, sizeof(name), "pair_%04d", i);
    const Image cover = make_cover(rng, o.width, o.height);
    save_image((out / "designs" / (std::string(name) + ".png")).string(),
               cover);

    const double angle = rng.uniform(-12.0, 12.0) * CV_PI / 180.0;
    const double scale = rng.uniform(0.9, 1.05);
    Affine place{1, 0, (cw - o.width) / 2.0 + rng.uniform(-0.03, 0.03) * o.width,
                 0, 1, (ch - o.height) / 2.0 + rng.uniform(-0.03, 0.03) * o.height};
    place = place.compose(
        Affine::rotation_about(o.width / 2.0, o.height / 2.0, angle, scale));

    cv::Mat canvas = mat_view(belt).clone();
    cv::Mat warped;
    cv::warpAffine(mat_view(cover), warped, affine_to_mat(place),
                   cv::Size(cw, ch), cv::INTER_LINEAR, cv::BORDER_CONSTANT,
                   cv::Scalar(0, 0, 0));
    cv::Mat mask_src(o.height, o.width, CV_8UC1, cv::Scalar(255));
    cv::Mat mask;
    cv::warpAffine(mask_src, mask, affine_to_mat(place), cv::Size(cw, ch),
                   cv::INTER_NEAREST, cv::BORDER_CONSTANT, cv::Scalar(0));
    warped.copyTo(canvas, mask);
    const Image photo = photometric_jitter(from_mat(canvas), rng);
    save_image((out / "photos" / (std::string(name) + ".png")).string(), photo);
  }

  write_manifest(out, "gendata", o.seed,
                 {{"pairs", o.pairs},
                  {"cover_size", {o.width, o.height}},
                  {"photo_size", {cw, ch}}},
                 json::object(),
                 {{"designs", "designs/"},
                  {"photos", "photos/"},
                  {"background", "background.png"}},
                 timer);
  std::cout << "gendata: wrote " << o.pairs << " photo/design pairs to "
            << o.out << "\n";
}

// ---------------------------------------------------------------------------
// align: background subtraction, cover quad extraction, design registration.

struct AlignOpts {
  std::string photos, designs, background, out;
};

void cmd_align(const AlignOpts& o) {
  Stopwatch timer;
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(o.designs)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg")
      names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  if (names.empty())
    throw InvalidConfig("no design images found in " + o.designs);

  Image bg;
  if (!o.background.empty()) bg = load_image(o.background);

  const fs::path out(o.out);
  fs::create_directories(out);
  std::ofstream log(out / "align_log.csv");
  if (!log) throw IoError("cannot write " + (out / "align_log.csv").string());
  log << "pair_id,status,reason\n";

  int ok = 0;
  for (const std::string& name : names) {
    const std::string id = fs::path(name).stem().string();
    try {
      const fs::path photo_path = fs::path(o.photos) / name;
      if (!fs::exists(photo_path)) throw IoError("no matching photo");
      const Image design = load_image((fs::path(o.designs) / name).string());
      const Image photo = load_image(photo_path.string());
      const Image fg =
          bg.empty() ? photo : subtract_background(photo, bg);
      const Quad quad = extract_cover_quad(fg);
      const Box bb = clip_box(quad.bounding_box(), photo.width, photo.height);
      if (!bb.valid()) throw NoCoverFound("cover quad collapses after clipping");
      const Image crop = crop_image(
          photo, static_cast<int>(std::lround(bb.x1)),
          static_cast<int>(std::lround(bb.y1)),
          static_cast<int>(std::lround(bb.width())),
          static_cast<int>(std::lround(bb.height())));
      const AlignedPair pair = align_pair(design, crop, MatchParams{}, id);
      save_image((out / (id + "_design.png")).string(), pair.design);
      save_image((out / (id + "_photo.png")).string(), pair.photo);
      log << id << ",ok,\n";
      ++ok;
    } catch (const Error& e) {
      log << id << ",failed," << csv_escape(e.what()) << "\n";
    }
  }
  log.close();

  const int total = static_cast<int>(names.size());
  write_manifest(out, "align", 0,
                 {{"background", !o.background.empty()}},
                 {{"photos", o.photos},
                  {"designs", o.designs},
                  {"background", o.background}},
                 {{"aligned", ok}, {"failed", total - ok},
                  {"log", "align_log.csv"}},
                 timer);
  std::cout << "align: " << ok << "/" << total << " pairs aligned\n";
  if ((total - ok) * 2 > total)
    throw IoError("alignment failed for more than half of the pairs (" +
                  std::to_string(total - ok) + "/" + std::to_string(total) +
                  ")");
}

// ---------------------------------------------------------------------------
// synth: difference synthesis over a directory of aligned pairs.

std::vector<AlignedPair> read_aligned_pairs(const std::string& dir) {
  std::vector<fs::path> design_files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.size() > 11 && name.ends_with("_design.png"))
      design_files.push_back(entry.path());
  }
  std::sort(design_files.begin(), design_files.end());
  std::vector<AlignedPair> pairs;
  for (const fs::path& dpath : design_files) {
    const std::string fname = dpath.filename().string();
    const std::string id = fname.substr(0, fname.size() - 11);
    const fs::path ppath = dpath.parent_path() / (id + "_photo.png");
    if (!fs::exists(ppath))
      throw IoError("missing photo for aligned pair " + id);
    AlignedPair pair;
    pair.design = load_image(dpath.string());
    pair.photo = load_image(ppath.string());
    pair.transform = Affine::identity();
    pair.pair_id = id;
    pair.validate();
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

struct SynthOpts {
  std::string pairs, out, config;
  std::uint64_t seed = 1;
  int workers = 1;
  double magnification = -1;
  double local_fraction = -1;
  int same_count = 0;
};

void cmd_synth(const SynthOpts& o) {
  Stopwatch timer;
  const json cfg = load_config_file(o.config);
  GenConfig gen =
      gen_config_from_json(cfg.contains("gen") ? cfg["gen"] : cfg);
  if (o.magnification >= 0) gen.magnification = o.magnification;
  if (o.local_fraction >= 0) gen.local_fraction = o.local_fraction;
  gen.validate();
  if (o.workers < 1) throw InvalidConfig("--workers must be at least 1");

  const auto pairs = read_aligned_pairs(o.pairs);
  if (pairs.empty())
    throw InvalidConfig("no aligned pairs (\"<id>_design.png\") in " + o.pairs);

  DatasetBuild build = build_dataset(pairs, gen, o.seed, o.workers);
  // Unmodified aligned pairs double as the Same class for evaluation sets.
  for (int i = 0; i < o.same_count; ++i) {
    SynthSample s;
    s.pair = pairs[i % pairs.size()];
    s.source_ids = {s.pair.pair_id};
    char name[32];
    std::snprintf(name, sizeof(name), "same_%06d", i);
    s.pair.pair_id = name;
    s.kind = SampleKind::kSame;
    build.samples.push_back(std::move(s));
  }
  const fs::path out(o.out);
  fs::create_directories(out);
  write_dataset(out, build.samples, build.report);
  write_manifest(out, "synth", o.seed,
                 {{"gen", gen_config_to_json(gen)},
                  {"workers", o.workers},
                  {"same", o.same_count}},
                 {{"pairs", o.pairs}, {"source_pairs", pairs.size()}},
                 {{"samples", build.samples.size()},
                  {"local", build.report.local_count},
                  {"global", build.report.global_count},
                  {"same", o.same_count},
                  {"skipped", build.report.skipped},
                  {"annotations", "annotations.jsonl"},
                  {"report", "report.json"}},
                 timer);
  std::cout << "synth: " << build.samples.size() << " samples ("
            << build.report.local_count << " local, "
            << build.report.global_count << " global, " << o.same_count
            << " same, " << build.report.skipped << " skipped)\n";
}

// ---------------------------------------------------------------------------
// count: analytic parameter/MAC table row.

struct CountOpts {
  std::string arch = "conv1";
  std::string width = "1";
  std::string size = "1000x600";
  std::string out;
};

void cmd_count(const CountOpts& o) {
  Stopwatch timer;
  ArchConfig cfg;
  cfg.concat_index = parse_merge_name(o.arch);
  cfg.width_factor = parse_width_flag(o.width);
  cfg.validate();
  const auto [w, h] = parse_size(o.size);
  const CostReport rep = cost_report(cfg, h, w);
  const std::string row = cfg.display_name() + " @ " + o.size + ": " +
                          format_count(rep.params_per_branch) + " / " +
                          format_count(rep.mac);
  std::cout << row << "\n";
  if (!o.out.empty()) {
    const fs::path out(o.out);
    fs::create_directories(out);
    write_manifest(out, "count", 0,
                   {{"arch", arch_to_json(cfg)}, {"size", o.size}},
                   json::object(),
                   {{"row", row},
                    {"params", rep.params_per_branch},
                    {"params_shared_once", rep.params_unique},
                    {"mac", rep.mac}},
                   timer);
  }
}

// ---------------------------------------------------------------------------
// train: detector training.

struct TrainOpts {
  std::string dataset, out, config, pretrained;
  std::uint64_t seed = 1;
  std::string merge = "conv1";
  std::string width = "1";
  TrainSchedule schedule;
  std::string anchor_scales, anchor_ratios;
  double min_proposal_size = -1;
  double report_threshold = -1;
  bool no_augment = false;
  bool no_rescale = false;
  bool no_checkpoints = false;
};

void overlay_schedule_flags(const CLI::App& sub, const TrainSchedule& flags,
                            TrainSchedule& sched) {
  if (sub.count("--base-lr")) sched.base_lr = flags.base_lr;
  if (sub.count("--drop-lr")) sched.drop_lr = flags.drop_lr;
  if (sub.count("--epochs-base")) sched.epochs_at_base = flags.epochs_at_base;
  if (sub.count("--epochs-drop")) sched.epochs_at_drop = flags.epochs_at_drop;
  if (sub.count("--momentum")) sched.momentum = flags.momentum;
  if (sub.count("--weight-decay")) sched.weight_decay = flags.weight_decay;
  if (sub.count("--clip-norm")) sched.clip_norm = flags.clip_norm;
  if (sub.count("--input-scale")) sched.input_scale = flags.input_scale;
  if (sub.count("--max-side")) sched.max_side = flags.max_side;
}

void add_schedule_flags(CLI::App* sub, TrainSchedule& s) {
  sub->add_option("--base-lr", s.base_lr, "Phase-one learning rate");
  sub->add_option("--drop-lr", s.drop_lr, "Phase-two learning rate");
  sub->add_option("--epochs-base", s.epochs_at_base, "Epochs at the base rate");
  sub->add_option("--epochs-drop", s.epochs_at_drop,
                  "Epochs at the dropped rate");
  sub->add_option("--momentum", s.momentum, "SGD momentum");
  sub->add_option("--weight-decay", s.weight_decay, "L2 weight decay");
  sub->add_option("--clip-norm", s.clip_norm,
                  "Global gradient-norm clip (0 disables)");
  sub->add_option("--input-scale", s.input_scale,
                  "Shorter-side rescale target");
  sub->add_option("--max-side", s.max_side, "Longer-side cap after rescale");
}

double final_epoch_mean(const LossHistory& history) {
  if (history.empty()) return 0.0;
  const int last = history.back().epoch;
  double acc = 0;
  int n = 0;
  for (const StepRecord& r : history)
    if (r.epoch == last) {
      acc += r.total;
      ++n;
    }
  return acc / n;
}

void cmd_train(const TrainOpts& o, const CLI::App& sub) {
  Stopwatch timer;
  const json cfg = load_config_file(o.config);
  TrainSchedule sched = schedule_from_json(cfg.value("schedule", json::object()));
  overlay_schedule_flags(sub, o.schedule, sched);
  sched.validate();

  DetectParams dp = detect_params_from_json(cfg.value("detect", json::object()));
  if (!o.anchor_scales.empty())
    dp.anchors.scales = parse_double_list(o.anchor_scales);
  if (!o.anchor_ratios.empty())
    dp.anchors.ratios = parse_double_list(o.anchor_ratios);
  if (o.min_proposal_size >= 0) dp.min_proposal_size = o.min_proposal_size;
  if (o.report_threshold >= 0) dp.report_threshold = o.report_threshold;

  ArchConfig arch;
  arch.concat_index = parse_merge_name(o.merge);
  arch.width_factor = parse_width_flag(o.width);
  arch.input_scale = sched.input_scale;
  arch.validate();

  const auto dataset = read_dataset(o.dataset);
  const fs::path out(o.out);
  fs::create_directories(out);

  TrainOptions options;
  options.augment = !o.no_augment;
  options.rescale = !o.no_rescale;
  if (!o.no_checkpoints) options.checkpoint_dir = (out / "checkpoints").string();
  if (!o.pretrained.empty()) {
    options.init = InitMode::kPretrainedPreConcat;
    options.pretrained_path = o.pretrained;
  }

  TrainResult result = train_detector(dataset, arch, dp, sched, o.seed, options);
  result.model->save((out / "model.ckpt").string());
  write_history_csv((out / "history.csv").string(), result.history);

  write_manifest(out, "train", o.seed,
                 {{"arch", arch_to_json(arch)},
                  {"schedule", schedule_to_json(sched)},
                  {"detect", detect_params_to_json(dp)},
                  {"augment", options.augment},
                  {"rescale", options.rescale},
                  {"pretrained", o.pretrained}},
                 {{"dataset", o.dataset}, {"samples", dataset.size()}},
                 {{"model", "model.ckpt"},
                  {"history", "history.csv"},
                  {"checkpoints", o.no_checkpoints ? "" : "checkpoints/"}},
                 timer);
  std::printf("train: %d epochs over %zu samples, final-epoch mean loss %.4f\n",
              sched.total_epochs(), dataset.size(),
              final_epoch_mean(result.history));
}

// ---------------------------------------------------------------------------
// Scorer: checkpoint-kind dispatch shared by eval and occlusion.

struct Scorer {
  std::string kind;
  std::unique_ptr<DetectorModel<float>> detector;
  std::unique_ptr<SiameseModel<float>> siamese;
  std::unique_ptr<SixChannelClassifier<float>> classifier;

  double operator()(const AlignedPair& pair) {
    if (detector) return pair_distance(detector->detect(pair));
    if (siamese) return siamese->distance(pair);
    return classifier->classify(pair);
  }
};

std::string checkpoint_kind(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);
  const auto header = nn::read_checkpoint_header(in, path);
  if (header.manifest.contains("extra"))
    return header.manifest["extra"].value("kind", "detector");
  return "detector";
}

Scorer load_scorer(const std::string& path) {
  Scorer s;
  s.kind = checkpoint_kind(path);
  if (s.kind == "siamese") {
    s.siamese =
        std::make_unique<SiameseModel<float>>(SiameseModel<float>::load(path));
  } else if (s.kind == "classify6") {
    s.classifier = std::make_unique<SixChannelClassifier<float>>(
        SixChannelClassifier<float>::load(path));
  } else if (s.kind == "detector") {
    s.detector =
        std::make_unique<DetectorModel<float>>(DetectorModel<float>::load(path));
  } else {
    throw InvalidConfig("unknown checkpoint kind \"" + s.kind + "\"");
  }
  return s;
}

// Shorter side to the model's training scale before scoring; detections are
// mapped back to the native frame by the caller where boxes matter.
SynthSample rescaled_for_model(const AlignedPair& pair, int input_scale) {
  SynthSample s;
  s.pair = pair;
  s.kind = SampleKind::kSame;
  const int max_side =
      static_cast<int>(std::lround(input_scale * 1000.0 / 600.0));
  return rescale_to_s(s, input_scale, max_side);
}

// ---------------------------------------------------------------------------
// eval: ROC report over a labeled dataset for any model kind.

struct EvalOpts {
  std::string model, dataset, out;
  bool native_scale = false;
};

void cmd_eval(const EvalOpts& o) {
  Stopwatch timer;
  Scorer scorer = load_scorer(o.model);
  const int input_scale =
      scorer.detector   ? scorer.detector->arch().input_scale
      : scorer.siamese  ? scorer.siamese->arch().input_scale
                        : scorer.classifier->arch().input_scale;
  const auto testset = read_dataset(o.dataset);
  const EvalReport report = evaluate_scores(testset, [&](const SynthSample& s) {
    if (o.native_scale) return scorer(s.pair);
    return scorer(rescaled_for_model(s.pair, input_scale).pair);
  });
  const fs::path out(o.out);
  fs::create_directories(out);
  write_eval_report(out.string(), report);
  write_manifest(out, "eval", 0,
                 {{"model_kind", scorer.kind},
                  {"input_scale", input_scale},
                  {"native_scale", o.native_scale}},
                 {{"model", o.model},
                  {"dataset", o.dataset},
                  {"pairs", testset.size()}},
                 {{"auc", report.roc.auc},
                  {"skipped", report.skipped},
                  {"files", {"roc.csv", "pairs.csv", "summary.json", "roc.png"}}},
                 timer);
  std::printf("eval: auc %.4f over %zu pairs (%d skipped)\n", report.roc.auc,
              report.pairs.size(), report.skipped);
}

// ---------------------------------------------------------------------------
// detect: detections for one aligned pair, as JSON plus a box overlay.

struct DetectOpts {
  std::string model, design, photo, out;
  double threshold = -1;
  bool native_scale = false;
};

void cmd_detect(const DetectOpts& o) {
  Stopwatch timer;
  const std::string kind = checkpoint_kind(o.model);
  if (kind != "detector")
    throw InvalidConfig("detect needs a detector checkpoint, got \"" + kind +
                        "\"");
  DetectorModel<float> model = DetectorModel<float>::load(o.model);

  AlignedPair pair;
  pair.design = load_image(o.design);
  pair.photo = load_image(o.photo);
  pair.transform = Affine::identity();
  pair.pair_id = fs::path(o.photo).stem().string();
  pair.validate();

  std::vector<DiffBox> detections;
  if (o.native_scale) {
    detections = model.detect(pair);
  } else {
    const SynthSample scaled =
        rescaled_for_model(pair, model.arch().input_scale);
    detections = model.detect(scaled.pair);
    const double fx =
        static_cast<double>(pair.photo.width) / scaled.pair.photo.width;
    const double fy =
        static_cast<double>(pair.photo.height) / scaled.pair.photo.height;
    for (DiffBox& d : detections) {
      d.box.x1 *= fx;
      d.box.x2 *= fx;
      d.box.y1 *= fy;
      d.box.y2 *= fy;
    }
  }
  if (o.threshold >= 0) {
    detections.erase(std::remove_if(detections.begin(), detections.end(),
                                    [&](const DiffBox& d) {
                                      return d.score < o.threshold;
                                    }),
                     detections.end());
  }

  const fs::path out(o.out);
  fs::create_directories(out);
  json dets = json::array();
  for (const DiffBox& d : detections)
    dets.push_back({{"x1", d.box.x1},
                    {"y1", d.box.y1},
                    {"x2", d.box.x2},
                    {"y2", d.box.y2},
                    {"score", d.score}});
  write_json_atomic(out / "detections.json",
                    {{"pair_id", pair.pair_id},
                     {"design", o.design},
                     {"photo", o.photo},
                     {"detections", dets}});

  Image overlay = pair.photo;
  cv::Mat m = mat_view(overlay);
  for (const DiffBox& d : detections) {
    const cv::Point p1(static_cast<int>(std::lround(d.box.x1)),
                       static_cast<int>(std::lround(d.box.y1)));
    const cv::Point p2(static_cast<int>(std::lround(d.box.x2)),
                       static_cast<int>(std::lround(d.box.y2)));
    cv::rectangle(m, p1, p2, cv::Scalar(0, 0, 255), 2);
    char label[32];
    std::snprintf(label, sizeof(label), "%.2f", d.score);
    cv::putText(m, label, p1 + cv::Point(2, -4), cv::FONT_HERSHEY_SIMPLEX, 0.4,
                cv::Scalar(0, 0, 255), 1);
  }
  save_image((out / "overlay.png").string(), overlay);

  write_manifest(out, "detect", 0,
                 {{"threshold", o.threshold},
                  {"native_scale", o.native_scale}},
                 {{"model", o.model}, {"design", o.design}, {"photo", o.photo}},
                 {{"detections", detections.size()},
                  {"files", {"detections.json", "overlay.png"}}},
                 timer);
  std::cout << "detect: " << detections.size() << " detections\n";
}

// ---------------------------------------------------------------------------
// baseline: train (and optionally evaluate) the siamese or 6-channel model.

struct BaselineOpts {
  std::string kind = "siamese";
  std::string dataset, out, eval_dataset, config;
  std::uint64_t seed = 1;
  std::string width = "1/8";
  double margin = 1.0;
  TrainSchedule schedule;
  bool no_augment = false;
  bool no_rescale = false;
};

void cmd_baseline(const BaselineOpts& o, const CLI::App& sub) {
  Stopwatch timer;
  const json cfg = load_config_file(o.config);
  TrainSchedule sched = schedule_from_json(cfg.value("schedule", json::object()));
  overlay_schedule_flags(sub, o.schedule, sched);
  sched.validate();

  ArchConfig arch;
  arch.concat_index = 1;
  arch.width_factor = parse_width_flag(o.width);
  arch.input_scale = sched.input_scale;
  arch.validate();

  const auto dataset = read_dataset(o.dataset);
  const fs::path out(o.out);
  fs::create_directories(out);

  TrainOptions options;
  options.augment = !o.no_augment;
  options.rescale = !o.no_rescale;

  LossHistory history;
  std::function<double(const AlignedPair&)> score;
  std::unique_ptr<SiameseModel<float>> siamese;
  std::unique_ptr<SixChannelClassifier<float>> classifier;
  if (o.kind == "siamese") {
    auto result =
        train_siamese(dataset, arch, sched, o.seed, options, o.margin);
    history = std::move(result.history);
    siamese = std::move(result.model);
    siamese->save((out / "model.ckpt").string());
    score = [&](const AlignedPair& p) { return siamese->distance(p); };
  } else {
    auto result = train_classifier(dataset, arch, sched, o.seed, options);
    history = std::move(result.history);
    classifier = std::move(result.model);
    classifier->save((out / "model.ckpt").string());
    score = [&](const AlignedPair& p) { return classifier->classify(p); };
  }
  write_history_csv((out / "history.csv").string(), history);

  json eval_out = json::object();
  if (!o.eval_dataset.empty()) {
    const auto testset = read_dataset(o.eval_dataset);
    const EvalReport report =
        evaluate_scores(testset, [&](const SynthSample& s) {
          return score(rescaled_for_model(s.pair, sched.input_scale).pair);
        });
    fs::create_directories(out / "eval");
    write_eval_report((out / "eval").string(), report);
    eval_out = {{"auc", report.roc.auc}, {"skipped", report.skipped}};
    std::printf("baseline eval: auc %.4f over %zu pairs\n", report.roc.auc,
                report.pairs.size());
  }

  write_manifest(out, "baseline", o.seed,
                 {{"kind", o.kind},
                  {"arch", arch_to_json(arch)},
                  {"schedule", schedule_to_json(sched)},
                  {"margin", o.margin},
                  {"augment", options.augment},
                  {"rescale", options.rescale}},
                 {{"dataset", o.dataset},
                  {"samples", dataset.size()},
                  {"eval_dataset", o.eval_dataset}},
                 {{"model", "model.ckpt"},
                  {"history", "history.csv"},
                  {"eval", eval_out}},
                 timer);
  std::printf("baseline(%s): %d epochs over %zu samples, final-epoch mean "
              "loss %.4f\n",
              o.kind.c_str(), sched.total_epochs(), dataset.size(),
              final_epoch_mean(history));
}

// ---------------------------------------------------------------------------
// occlusion: sliding gray-square sensitivity map for any model kind.

struct OcclusionOpts {
  std::string model, design, photo, out;
  int square = 64;
  int stride = 32;
};

Image render_heatmap(const OcclusionMap& map, int cell = 16) {
  double lo = map.values[0], hi = map.values[0];
  for (double v : map.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi > lo ? hi - lo : 1.0;
  Image img = Image::zeros(map.cols * cell, map.rows * cell, 3);
  for (int r = 0; r < map.rows; ++r)
    for (int c = 0; c < map.cols; ++c) {
      const auto g = static_cast<std::uint8_t>(
          std::lround(255.0 * (map.at(r, c) - lo) / range));
      for (int y = r * cell; y < (r + 1) * cell; ++y)
        for (int x = c * cell; x < (c + 1) * cell; ++x)
          for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = g;
    }
  return img;
}

void cmd_occlusion(const OcclusionOpts& o) {
  Stopwatch timer;
  Scorer scorer = load_scorer(o.model);

  AlignedPair pair;
  pair.design = load_image(o.design);
  pair.photo = load_image(o.photo);
  pair.transform = Affine::identity();
  pair.pair_id = fs::path(o.photo).stem().string();
  pair.validate();

  const OcclusionMap map = occlusion_map(
      [&](const AlignedPair& p) { return scorer(p); }, pair, o.square,
      o.stride);

  const fs::path out(o.out);
  fs::create_directories(out);
  {
    std::ofstream csv(out / "heatmap.csv");
    if (!csv) throw IoError("cannot write " + (out / "heatmap.csv").string());
    for (int r = 0; r < map.rows; ++r) {
      for (int c = 0; c < map.cols; ++c) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.10g", map.at(r, c));
        csv << (c ? "," : "") << buf;
      }
      csv << "\n";
    }
  }
  save_image((out / "heatmap.png").string(), render_heatmap(map));

  write_manifest(out, "occlusion", 0,
                 {{"model_kind", scorer.kind},
                  {"square", o.square},
                  {"stride", o.stride}},
                 {{"model", o.model}, {"design", o.design}, {"photo", o.photo}},
                 {{"rows", map.rows},
                  {"cols", map.cols},
                  {"files", {"heatmap.csv", "heatmap.png"}}},
                 timer);
  std::printf("occlusion: %dx%d grid (square %d, stride %d)\n", map.rows,
              map.cols, o.square, o.stride);
}

}  // namespace
}  // namespace diffspot

int main(int argc, char** argv) {
  using namespace diffspot;
  for (int i = 0; i < argc; ++i) g_argv.emplace_back(argv[i]);

  CLI::App app{"diffspot: spot-the-difference detection for printed covers"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  auto gen = std::make_shared<GendataOpts>();
  CLI::App* gendata = app.add_subcommand(
      "gendata", "Generate a synthetic photo/design corpus");
  gendata->add_option("--out", gen->out, "Output directory")->required();
  gendata->add_option("--pairs", gen->pairs, "Number of cover pairs");
  gendata->add_option("--width", gen->width, "Cover width in pixels");
  gendata->add_option("--height", gen->height, "Cover height in pixels");
  gendata->add_option("--seed", gen->seed, "Random seed");
  gendata->callback([gen]() { cmd_gendata(*gen); });

  auto al = std::make_shared<AlignOpts>();
  CLI::App* align = app.add_subcommand(
      "align", "Extract and register covers from belt photos");
  align->add_option("--photos", al->photos, "Directory of belt photos")
      ->required();
  align->add_option("--designs", al->designs, "Directory of design images")
      ->required();
  align->add_option("--background", al->background,
                    "Belt background image to subtract");
  align->add_option("--out", al->out, "Output directory")->required();
  align->callback([al]() { cmd_align(*al); });

  auto sy = std::make_shared<SynthOpts>();
  CLI::App* synth = app.add_subcommand(
      "synth", "Synthesize a labeled difference dataset from aligned pairs");
  synth->add_option("--pairs", sy->pairs, "Directory of aligned pairs")
      ->required();
  synth->add_option("--out", sy->out, "Output dataset directory")->required();
  synth->add_option("--seed", sy->seed, "Random seed");
  synth->add_option("--workers", sy->workers, "Worker threads");
  synth->add_option("--config", sy->config, "Generation config JSON");
  synth->add_option("--magnification", sy->magnification,
                    "Samples per source pair");
  synth->add_option("--local-fraction", sy->local_fraction,
                    "Fraction of local-patch samples");
  synth->add_option("--same", sy->same_count,
                    "Append this many unmodified pairs labeled Same");
  synth->callback([sy]() { cmd_synth(*sy); });

  auto co = std::make_shared<CountOpts>();
  CLI::App* count = app.add_subcommand(
      "count", "Print the parameter/MAC table row for an architecture");
  count->add_option("--arch", co->arch, "Merge point (conv1..conv5)");
  count->add_option("--width", co->width, "Width factor (1, 1/2, ... 1/16)");
  count->add_option("--size", co->size, "Input size WIDTHxHEIGHT");
  count->add_option("--out", co->out, "Optional manifest directory");
  count->callback([co]() { cmd_count(*co); });

  auto tr = std::make_shared<TrainOpts>();
  CLI::App* train =
      app.add_subcommand("train", "Train the change detector on a dataset");
  train->add_option("--dataset", tr->dataset, "Training dataset directory")
      ->required();
  train->add_option("--out", tr->out, "Output directory")->required();
  train->add_option("--seed", tr->seed, "Random seed");
  train->add_option("--config", tr->config,
                    "JSON config with schedule/detect sections");
  train->add_option("--merge", tr->merge, "Merge point (conv1..conv5)");
  train->add_option("--width", tr->width, "Width factor (1, 1/2, ... 1/16)");
  add_schedule_flags(train, tr->schedule);
  train->add_option("--anchor-scales", tr->anchor_scales,
                    "Anchor scales in pixels, comma separated");
  train->add_option("--anchor-ratios", tr->anchor_ratios,
                    "Anchor aspect ratios, comma separated");
  train->add_option("--min-proposal-size", tr->min_proposal_size,
                    "Minimum proposal side in pixels");
  train->add_option("--report-threshold", tr->report_threshold,
                    "Detection score threshold");
  train->add_option("--pretrained", tr->pretrained,
                    "Checkpoint for pre-merge conv initialization");
  train->add_flag("--no-augment", tr->no_augment, "Disable flip augmentation");
  train->add_flag("--no-rescale", tr->no_rescale, "Train at native size");
  train->add_flag("--no-epoch-checkpoints", tr->no_checkpoints,
                  "Skip per-epoch checkpoints");
  train->callback([tr, train]() { cmd_train(*tr, *train); });

  auto ev = std::make_shared<EvalOpts>();
  CLI::App* eval =
      app.add_subcommand("eval", "ROC evaluation over a labeled dataset");
  eval->add_option("--model", ev->model, "Model checkpoint")->required();
  eval->add_option("--dataset", ev->dataset, "Labeled dataset directory")
      ->required();
  eval->add_option("--out", ev->out, "Report directory")->required();
  eval->add_flag("--native-scale", ev->native_scale,
                 "Score pairs at native resolution");
  eval->callback([ev]() { cmd_eval(*ev); });

  auto de = std::make_shared<DetectOpts>();
  CLI::App* detect =
      app.add_subcommand("detect", "Run the detector on one aligned pair");
  detect->add_option("--model", de->model, "Detector checkpoint")->required();
  detect->add_option("--design", de->design, "Design image")->required();
  detect->add_option("--photo", de->photo, "Photo image")->required();
  detect->add_option("--out", de->out, "Output directory")->required();
  detect->add_option("--threshold", de->threshold,
                     "Keep detections scoring at least this");
  detect->add_flag("--native-scale", de->native_scale,
                   "Detect at native resolution");
  detect->callback([de]() { cmd_detect(*de); });

  auto ba = std::make_shared<BaselineOpts>();
  CLI::App* baseline = app.add_subcommand(
      "baseline", "Train a whole-image baseline (siamese or classifier)");
  baseline->add_option("--kind", ba->kind, "Baseline kind")
      ->check(CLI::IsMember({"siamese", "classifier"}));
  baseline->add_option("--dataset", ba->dataset, "Training dataset directory")
      ->required();
  baseline->add_option("--out", ba->out, "Output directory")->required();
  baseline->add_option("--eval-dataset", ba->eval_dataset,
                       "Optional held-out dataset to evaluate");
  baseline->add_option("--config", ba->config,
                       "JSON config with a schedule section");
  baseline->add_option("--seed", ba->seed, "Random seed");
  baseline->add_option("--width", ba->width, "Width factor");
  baseline->add_option("--margin", ba->margin, "Contrastive margin (siamese)");
  add_schedule_flags(baseline, ba->schedule);
  baseline->add_flag("--no-augment", ba->no_augment,
                     "Disable flip augmentation");
  baseline->add_flag("--no-rescale", ba->no_rescale, "Train at native size");
  baseline->callback([ba, baseline]() { cmd_baseline(*ba, *baseline); });

  auto oc = std::make_shared<OcclusionOpts>();
  CLI::App* occlusion = app.add_subcommand(
      "occlusion", "Sliding-square sensitivity map for one pair");
  occlusion->add_option("--model", oc->model, "Model checkpoint")->required();
  occlusion->add_option("--design", oc->design, "Design image")->required();
  occlusion->add_option("--photo", oc->photo, "Photo image")->required();
  occlusion->add_option("--out", oc->out, "Output directory")->required();
  occlusion->add_option("--square", oc->square, "Occluder side in pixels");
  occlusion->add_option("--stride", oc->stride, "Occluder stride in pixels");
  occlusion->callback([oc]() { cmd_occlusion(*oc); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const InvalidConfig& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#ifndef DIFFSPOT_TRAINER_HPP_
#define DIFFSPOT_TRAINER_HPP_

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "diffspot/detector.hpp"

namespace diffspot {

struct TrainSchedule {
  double base_lr = 0.001;
  double drop_lr = 0.0001;
  int epochs_at_base = 10;
  int epochs_at_drop = 4;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double clip_norm = 10.0;
  int input_scale = 600;  // shorter side
  int max_side = 1000;

  int total_epochs() const { return epochs_at_base + epochs_at_drop; }

  double lr_at(int epoch) const {
    return epoch < epochs_at_base ? base_lr : drop_lr;
  }

  void validate() const {
    if (base_lr <= 0 || drop_lr <= 0) throw InvalidConfig("learning rates positive");
    if (epochs_at_base < 0 || epochs_at_drop < 0)
      throw InvalidConfig("epoch counts nonnegative");
    if (momentum < 0 || momentum >= 1) throw InvalidConfig("momentum in [0,1)");
    if (weight_decay < 0) throw InvalidConfig("weight decay nonnegative");
    if (input_scale < 1 || max_side < input_scale)
      throw InvalidConfig("input_scale must be positive and <= max_side");
  }
};

// SGD with momentum, weight decay and global-norm gradient clipping:
//   g   = clip(grad) + wd * w
//   v'  = mu * v - lr * g
//   w'  = w + v'
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<nn::ParamPtr<T>> params, double momentum,
               double weight_decay)
      : params_(std::move(params)), momentum_(momentum), decay_(weight_decay) {
    for (const auto& p : params_)
      velocity_.push_back(nn::Tensor<T>(p->value.shape));
  }

  double gradient_norm() const {
    double sq = 0;
    for (const auto& p : params_)
      for (const T& g : p->grad.data) sq += double(g) * double(g);
    return std::sqrt(sq);
  }

  void step(double lr, double clip_norm = 0.0) {
    double scale = 1.0;
    if (clip_norm > 0) {
      const double norm = gradient_norm();
      if (norm > clip_norm) scale = clip_norm / norm;
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& value = params_[i]->value.data;
      auto& grad = params_[i]->grad.data;
      auto& vel = velocity_[i].data;
      for (std::size_t k = 0; k < value.size(); ++k) {
        const double g = double(grad[k]) * scale + decay_ * double(value[k]);
        vel[k] = static_cast<T>(momentum_ * double(vel[k]) - lr * g);
        value[k] += vel[k];
      }
    }
  }

 private:
  std::vector<nn::ParamPtr<T>> params_;
  std::vector<nn::Tensor<T>> velocity_;
  double momentum_, decay_;
};

// Deterministic mirror of a sample: both images flipped horizontally, boxes
// remapped as (x1', x2') = (W - x2, W - x1). An involution.
inline SynthSample flip_sample(const SynthSample& sample) {
  SynthSample out = sample;
  out.pair.design = flip_horizontal(sample.pair.design);
  out.pair.photo = flip_horizontal(sample.pair.photo);
  const double W = sample.pair.photo.width;
  for (DiffBox& d : out.boxes) {
    const double x1 = d.box.x1, x2 = d.box.x2;
    d.box.x1 = W - x2;
    d.box.x2 = W - x1;
  }
  if (sample.source_box.valid()) {
    out.source_box.x1 = W - sample.source_box.x2;
    out.source_box.x2 = W - sample.source_box.x1;
  }
  return out;
}

inline SynthSample augment_flip(const SynthSample& sample, Rng& rng) {
  return rng.bernoulli(0.5) ? flip_sample(sample) : sample;
}

// Single-scale resize: shorter side to s, capped so the longer side stays
// within max_side; boxes scale by the same factor.
inline SynthSample rescale_to_s(const SynthSample& sample, int s, int max_side) {
  const int w = sample.pair.photo.width, h = sample.pair.photo.height;
  const int shorter = std::min(w, h), longer = std::max(w, h);
  double f = static_cast<double>(s) / shorter;
  if (longer * f > max_side) f = static_cast<double>(max_side) / longer;
  const int nw = static_cast<int>(std::lround(w * f));
  const int nh = static_cast<int>(std::lround(h * f));
  if (nw == w && nh == h) return sample;

  SynthSample out = sample;
  out.pair.design = resize_image(sample.pair.design, nw, nh);
  out.pair.photo = resize_image(sample.pair.photo, nw, nh);
  for (DiffBox& d : out.boxes)
    d.box = clip_box(Box{d.box.x1 * f, d.box.y1 * f, d.box.x2 * f, d.box.y2 * f},
                     nw, nh);
  // A global box is the image extent by definition; rounding of nw/nh must
  // not detach it from the resized frame.
  if (out.kind == SampleKind::kGlobalMismatch && !out.boxes.empty())
    out.boxes[0].box = Box{0.0, 0.0, static_cast<double>(nw),
                           static_cast<double>(nh)};
  return out;
}

struct StepRecord {
  int step = 0;
  int epoch = 0;
  double lr = 0;
  double rpn_cls = 0, rpn_reg = 0, head_cls = 0, head_reg = 0, total = 0;
};

using LossHistory = std::vector<StepRecord>;

inline void write_history_csv(const std::string& path, const LossHistory& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write loss history: " + path);
  out << "step,epoch,lr,rpn_cls,rpn_reg,head_cls,head_reg,total\n";
  char line[256];
  for (const StepRecord& r : history) {
    std::snprintf(line, sizeof(line), "%d,%d,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g\n",
                  r.step, r.epoch, r.lr, r.rpn_cls, r.rpn_reg, r.head_cls,
                  r.head_reg, r.total);
    out << line;
  }
}

enum class InitMode { kXavierAll, kPretrainedPreConcat };

struct TrainOptions {
  InitMode init = InitMode::kXavierAll;
  std::string pretrained_path;    // for kPretrainedPreConcat
  std::string checkpoint_dir;     // per-epoch checkpoints when nonempty
  bool rescale = true;            // apply rescale_to_s per sample
  bool augment = true;            // random horizontal flips
};

struct TrainResult {
  std::unique_ptr<DetectorModel<float>> model;
  LossHistory history;
};

// Approximate joint training: one image pair per SGD step, flip
// augmentation, the two-phase learning-rate schedule, per-epoch checkpoints.
inline TrainResult train_detector(const std::vector<SynthSample>& dataset,
                                  const ArchConfig& arch,
                                  const DetectParams& dparams,
                                  const TrainSchedule& schedule,
                                  std::uint64_t seed,
                                  const TrainOptions& options = {}) {
  schedule.validate();
  if (dataset.empty()) throw NoValidSamples("training dataset is empty");

  TrainResult result;
  result.model = std::make_unique<DetectorModel<float>>(arch, dparams);
  if (options.init == InitMode::kPretrainedPreConcat)
    result.model->init_weights_pretrained(options.pretrained_path,
                                          sub_seed(seed, 0));
  else
    result.model->init_weights(sub_seed(seed, 0));

  SgdOptimizer<float> opt(result.model->params(), schedule.momentum,
                          schedule.weight_decay);
  Rng rng(sub_seed(seed, 1));
  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  namespace fs = std::filesystem;
  if (!options.checkpoint_dir.empty()) fs::create_directories(options.checkpoint_dir);

  int step = 0;
  for (int epoch = 0; epoch < schedule.total_epochs(); ++epoch) {
    const double lr = schedule.lr_at(epoch);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (int idx : order) {
      SynthSample sample = dataset[idx];
      if (options.augment) sample = augment_flip(sample, rng);
      if (options.rescale)
        sample = rescale_to_s(sample, schedule.input_scale, schedule.max_side);
      result.model->zero_grads();
      LossBundle losses;
      try {
        losses = result.model->train_step(sample, rng);
      } catch (const NoValidSamples&) {
        continue;  // e.g. every anchor crosses the boundary at this size
      }
      if (!std::isfinite(losses.total()))
        throw DivergenceDetected("non-finite loss at step " + std::to_string(step));
      opt.step(lr, schedule.clip_norm);
      result.history.push_back({step, epoch, lr, losses.rpn_cls, losses.rpn_reg,
                                losses.head_cls, losses.head_reg, losses.total()});
      ++step;
    }
    if (!options.checkpoint_dir.empty()) {
      char name[64];
      std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch + 1);
      result.model->save((fs::path(options.checkpoint_dir) / name).string());
    }
  }
  return result;
}

// Mean per-sample loss of a frozen model; the rng consumed by target
// sampling is re-seeded per sample so the result is order-independent.
inline double frozen_loss(DetectorModel<float>& model,
                          const std::vector<SynthSample>& samples,
                          std::uint64_t seed) {
  if (samples.empty()) throw NoValidSamples("no samples to evaluate");
  double total = 0;
  for (const SynthSample& s : samples) {
    Rng rng(sub_seed(seed, std::hash<std::string>{}(s.pair.pair_id)));
    model.zero_grads();
    total += model.train_step(s, rng).total();
  }
  return total / static_cast<double>(samples.size());
}

}  // namespace diffspot

#endif  // DIFFSPOT_TRAINER_HPP_

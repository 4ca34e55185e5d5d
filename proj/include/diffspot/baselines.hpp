#ifndef DIFFSPOT_BASELINES_HPP_
#define DIFFSPOT_BASELINES_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "diffspot/evalkit.hpp"
#include "diffspot/trainer.hpp"

namespace diffspot {

// L = (1-y) d^2 + y max(0, m-d)^2 with y = 1 for a Different pair.
inline double contrastive_loss(double d, int y, double margin,
                               double* grad_d = nullptr) {
  const double hinge = std::max(0.0, margin - d);
  if (grad_d) *grad_d = y ? -2.0 * hinge : 2.0 * d;
  return y ? hinge * hinge : d * d;
}

// Shared-weight embedding tower: the full conv stack on a single 3-channel
// image, global average pooling, one linear projection, L2 normalization.
template <typename T>
class SiameseModel {
 public:
  explicit SiameseModel(const ArchConfig& arch, double margin = 1.0)
      : arch_(arch), margin_(margin) {
    arch.validate();
    int channels = arch.input_channels_per_branch;
    for (const LayerSpec& spec : backbone_layer_table()) {
      switch (spec.kind) {
        case LayerKind::kConv: {
          const int out_c = arch.scaled(spec.out_channels);
          tower_a_.add(nn::Conv2d<T>(spec.name, channels, out_c, spec.kernel,
                                     spec.stride, spec.pad));
          channels = out_c;
          break;
        }
        case LayerKind::kReLU:
          tower_a_.add(nn::ReLU<T>{});
          break;
        case LayerKind::kLRN:
          tower_a_.add(nn::LRN<T>{});
          break;
        case LayerKind::kMaxPool:
          tower_a_.add(nn::MaxPool2d<T>(spec.kernel, spec.stride));
          break;
        case LayerKind::kConcat:
          break;
      }
    }
    conv_channels_ = channels;
    tower_b_ = tower_a_.shared_twin();
    project_a_ = std::make_unique<nn::Linear<T>>("embed", conv_channels_,
                                                 arch.scaled(4096));
    project_b_ = std::make_unique<nn::Linear<T>>(*project_a_, true);
  }

  std::vector<nn::ParamPtr<T>> params() const {
    auto out = tower_a_.params();
    out.push_back(project_a_->weight);
    out.push_back(project_a_->bias);
    return out;
  }

  void init_weights(std::uint64_t seed) {
    Rng rng(seed);
    tower_a_.init_xavier(rng);
    project_a_->init_xavier(rng);
    initialized_ = true;
  }

  void zero_grads() {
    for (auto& p : params()) p->zero_grad();
  }

  bool initialized() const { return initialized_; }
  const ArchConfig& arch() const { return arch_; }
  double margin() const { return margin_; }

  double distance(const AlignedPair& pair) {
    if (!initialized_) throw ModelNotTrained("siamese weights not initialized");
    pair.validate();
    const auto ea = embed(pair.design, 0);
    const auto eb = embed(pair.photo, 1);
    double sq = 0;
    for (std::size_t i = 0; i < ea.size(); ++i) {
      const double diff = ea[i] - eb[i];
      sq += diff * diff;
    }
    return std::sqrt(sq);
  }

  // Contrastive step; gradients accumulate into the shared buffers.
  double train_step(const SynthSample& sample) {
    const int y = label_of(sample.kind) == PairLabel::kDifferent ? 1 : 0;
    const auto ea = embed(sample.pair.design, 0);
    const auto eb = embed(sample.pair.photo, 1);
    double sq = 0;
    for (std::size_t i = 0; i < ea.size(); ++i) {
      const double diff = ea[i] - eb[i];
      sq += diff * diff;
    }
    const double d = std::sqrt(sq);
    double gd = 0;
    const double loss = contrastive_loss(d, y, margin_, &gd);
    if (d > 1e-12) {
      std::vector<double> ga(ea.size()), gb(ea.size());
      for (std::size_t i = 0; i < ea.size(); ++i) {
        ga[i] = gd * (ea[i] - eb[i]) / d;
        gb[i] = -ga[i];
      }
      backprop_embedding(ga, 0);
      backprop_embedding(gb, 1);
    }
    return loss;
  }

  void save(const std::string& path) const {
    nn::save_checkpoint(path, arch_, params(),
                        {{"kind", "siamese"}, {"margin", margin_}});
  }

  static SiameseModel load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path);
    const auto header = nn::read_checkpoint_header(in, path);
    in.close();
    double margin = 1.0;
    if (header.manifest.contains("extra"))
      margin = header.manifest["extra"].value("margin", 1.0);
    SiameseModel model(header.arch, margin);
    nn::load_checkpoint(path, model.params());
    model.initialized_ = true;
    return model;
  }

 private:
  struct BranchCache {
    int hw = 0;
    std::vector<int> feat_shape;
    std::vector<double> raw;   // pre-normalization projection
    double norm = 0;
  };

  std::vector<double> embed(const Image& img, int branch) {
    auto& tower = branch == 0 ? tower_a_ : tower_b_;
    auto& project = branch == 0 ? *project_a_ : *project_b_;
    BranchCache& cache = cache_[branch];
    const nn::Tensor<T> feat = tower.forward(image_to_tensor<T>(img));
    const int C = feat.shape[0];
    cache.feat_shape = feat.shape;
    cache.hw = feat.shape[1] * feat.shape[2];
    nn::Tensor<T> pooled({1, C});
    for (int c = 0; c < C; ++c) {
      T acc = T(0);
      const T* base = &feat.data[static_cast<std::size_t>(c) * cache.hw];
      for (int i = 0; i < cache.hw; ++i) acc += base[i];
      pooled.at2(0, c) = acc / static_cast<T>(cache.hw);
    }
    const nn::Tensor<T> z = project.forward(pooled);
    cache.raw.assign(z.data.begin(), z.data.end());
    double sq = 0;
    for (double v : cache.raw) sq += v * v;
    cache.norm = std::sqrt(sq);
    std::vector<double> e(cache.raw.size(), 0.0);
    if (cache.norm > 0)
      for (std::size_t i = 0; i < e.size(); ++i) e[i] = cache.raw[i] / cache.norm;
    return e;
  }

  void backprop_embedding(const std::vector<double>& grad_e, int branch) {
    auto& tower = branch == 0 ? tower_a_ : tower_b_;
    auto& project = branch == 0 ? *project_a_ : *project_b_;
    const BranchCache& cache = cache_[branch];
    if (cache.norm <= 0) return;
    // e = r/|r|  =>  dr = (g - (g.e) e) / |r|
    double dot = 0;
    for (std::size_t i = 0; i < grad_e.size(); ++i)
      dot += grad_e[i] * cache.raw[i] / cache.norm;
    nn::Tensor<T> gz({1, static_cast<int>(grad_e.size())});
    for (std::size_t i = 0; i < grad_e.size(); ++i)
      gz.data[i] = static_cast<T>(
          (grad_e[i] - dot * cache.raw[i] / cache.norm) / cache.norm);
    const nn::Tensor<T> g_pooled = project.backward(gz);
    nn::Tensor<T> g_feat(cache.feat_shape);
    for (int c = 0; c < conv_channels_; ++c) {
      const T g = g_pooled.at2(0, c) / static_cast<T>(cache.hw);
      T* base = &g_feat.data[static_cast<std::size_t>(c) * cache.hw];
      for (int i = 0; i < cache.hw; ++i) base[i] = g;
    }
    tower.backward(g_feat);
  }

  ArchConfig arch_;
  double margin_;
  nn::Stack<T> tower_a_, tower_b_;
  std::unique_ptr<nn::Linear<T>> project_a_, project_b_;
  int conv_channels_ = 0;
  BranchCache cache_[2];
  bool initialized_ = false;
};

// Whole-pair classifier: both images concatenated into a 6-channel input,
// the K = 1 backbone, fixed-grid pooling, two fully connected layers and a
// 2-way softmax giving P(different).
template <typename T>
class SixChannelClassifier {
 public:
  explicit SixChannelClassifier(const ArchConfig& arch)
      : arch_(force_early_merge(arch)),
        backbone_(arch_),
        roi_pool_(6, 1.0 / kBackboneStride),
        fc6_("fc6", backbone_.out_channels() * 36, arch_.scaled(4096)),
        fc7_("fc7", arch_.scaled(4096), 2) {}

  std::vector<nn::ParamPtr<T>> params() const {
    auto out = backbone_.params();
    out.push_back(fc6_.weight);
    out.push_back(fc6_.bias);
    out.push_back(fc7_.weight);
    out.push_back(fc7_.bias);
    return out;
  }

  void init_weights(std::uint64_t seed) {
    Rng rng(seed);
    backbone_.init_xavier(rng);
    fc6_.init_xavier(rng);
    fc7_.init_xavier(rng);
    initialized_ = true;
  }

  void zero_grads() {
    for (auto& p : params()) p->zero_grad();
  }

  bool initialized() const { return initialized_; }
  const ArchConfig& arch() const { return arch_; }

  double classify(const AlignedPair& pair) {
    if (!initialized_) throw ModelNotTrained("classifier weights not initialized");
    pair.validate();
    return softmax_prob(forward(pair), 1)[0];
  }

  double train_step(const SynthSample& sample) {
    const int label = label_of(sample.kind) == PairLabel::kDifferent ? 1 : 0;
    const nn::Tensor<T> logits = forward(sample.pair);
    nn::Tensor<T> g_logits;
    const double loss = softmax_cross_entropy(logits, {label}, &g_logits);
    const nn::Tensor<T> g_h7 = fc7_.backward(g_logits);
    const nn::Tensor<T> g_pooled = fc6_.backward(relu6_.backward(g_h7));
    backbone_.backward(roi_pool_.backward(g_pooled));
    return loss;
  }

  void save(const std::string& path) const {
    nn::save_checkpoint(path, arch_, params(), {{"kind", "classify6"}});
  }

  static SixChannelClassifier load(const std::string& path) {
    SixChannelClassifier model(nn::peek_checkpoint_arch(path));
    nn::load_checkpoint(path, model.params());
    model.initialized_ = true;
    return model;
  }

 private:
  static ArchConfig force_early_merge(ArchConfig arch) {
    arch.concat_index = 1;
    arch.validate();
    return arch;
  }

  nn::Tensor<T> forward(const AlignedPair& pair) {
    const nn::Tensor<T> feat = backbone_.forward(
        image_to_tensor<T>(pair.design), image_to_tensor<T>(pair.photo));
    const Box full{0, 0, double(pair.photo.width), double(pair.photo.height)};
    const nn::Tensor<T> pooled = roi_pool_.forward(feat, {full});
    return fc7_.forward(relu6_.forward(fc6_.forward(pooled)));
  }

  ArchConfig arch_;
  nn::Backbone<T> backbone_;
  RoiPool<T> roi_pool_;
  nn::Linear<T> fc6_, fc7_;
  nn::ReLU<T> relu6_;
  bool initialized_ = false;
};

template <typename T>
double siamese_distance(SiameseModel<T>& model, const AlignedPair& pair) {
  return model.distance(pair);
}

template <typename T>
double sixchannel_classify(SixChannelClassifier<T>& model,
                           const AlignedPair& pair) {
  return model.classify(pair);
}

template <typename Model>
struct BaselineResult {
  std::unique_ptr<Model> model;
  LossHistory history;
};

namespace detail {

// Shared SGD loop for the two baselines; `step` runs forward+backward on one
// sample and returns its loss.
template <typename Model, typename StepFn>
BaselineResult<Model> train_baseline(std::unique_ptr<Model> model, StepFn&& step,
                                     const std::vector<SynthSample>& dataset,
                                     const TrainSchedule& schedule,
                                     std::uint64_t seed,
                                     const TrainOptions& options) {
  schedule.validate();
  if (dataset.empty()) throw NoValidSamples("training dataset is empty");
  BaselineResult<Model> result;
  result.model = std::move(model);
  result.model->init_weights(sub_seed(seed, 0));
  SgdOptimizer<float> opt(result.model->params(), schedule.momentum,
                          schedule.weight_decay);
  Rng rng(sub_seed(seed, 1));
  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  int step_idx = 0;
  for (int epoch = 0; epoch < schedule.total_epochs(); ++epoch) {
    const double lr = schedule.lr_at(epoch);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (int idx : order) {
      SynthSample sample = dataset[idx];
      if (options.augment) sample = augment_flip(sample, rng);
      if (options.rescale)
        sample = rescale_to_s(sample, schedule.input_scale, schedule.max_side);
      result.model->zero_grads();
      const double loss = step(*result.model, sample);
      if (!std::isfinite(loss))
        throw DivergenceDetected("non-finite loss at step " +
                                 std::to_string(step_idx));
      opt.step(lr, schedule.clip_norm);
      StepRecord rec;
      rec.step = step_idx++;
      rec.epoch = epoch;
      rec.lr = lr;
      rec.total = loss;
      result.history.push_back(rec);
    }
  }
  return result;
}

}  // namespace detail

inline BaselineResult<SiameseModel<float>> train_siamese(
    const std::vector<SynthSample>& dataset, const ArchConfig& arch,
    const TrainSchedule& schedule, std::uint64_t seed,
    const TrainOptions& options = {}, double margin = 1.0) {
  return detail::train_baseline(
      std::make_unique<SiameseModel<float>>(arch, margin),
      [](SiameseModel<float>& m, const SynthSample& s) { return m.train_step(s); },
      dataset, schedule, seed, options);
}

inline BaselineResult<SixChannelClassifier<float>> train_classifier(
    const std::vector<SynthSample>& dataset, const ArchConfig& arch,
    const TrainSchedule& schedule, std::uint64_t seed,
    const TrainOptions& options = {}) {
  return detail::train_baseline(
      std::make_unique<SixChannelClassifier<float>>(arch),
      [](SixChannelClassifier<float>& m, const SynthSample& s) {
        return m.train_step(s);
      },
      dataset, schedule, seed, options);
}

}  // namespace diffspot

#endif  // DIFFSPOT_BASELINES_HPP_

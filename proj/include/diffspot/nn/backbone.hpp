#ifndef DIFFSPOT_NN_BACKBONE_HPP_
#define DIFFSPOT_NN_BACKBONE_HPP_

#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "diffspot/arch.hpp"
#include "diffspot/nn/layers.hpp"

namespace diffspot::nn {

// Ordered run of backbone layers with per-instance activation caches.
template <typename T>
class Stack {
 public:
  using Layer = std::variant<Conv2d<T>, ReLU<T>, LRN<T>, MaxPool2d<T>>;

  Tensor<T> forward(Tensor<T> x) {
    for (Layer& l : layers_)
      x = std::visit([&x](auto& op) { return op.forward(x); }, l);
    return x;
  }

  Tensor<T> backward(Tensor<T> g) {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
      g = std::visit([&g](auto& op) { return op.backward(g); }, *it);
    return g;
  }

  void add(Layer l) { layers_.push_back(std::move(l)); }

  // Twin with shared conv parameters but private caches.
  Stack shared_twin() const {
    Stack twin;
    for (const Layer& l : layers_) {
      if (const auto* conv = std::get_if<Conv2d<T>>(&l))
        twin.add(Conv2d<T>(*conv, true));
      else
        twin.add(l);
    }
    return twin;
  }

  std::vector<ParamPtr<T>> params() const {
    std::vector<ParamPtr<T>> out;
    for (const Layer& l : layers_)
      if (const auto* conv = std::get_if<Conv2d<T>>(&l)) {
        out.push_back(conv->weight);
        out.push_back(conv->bias);
      }
    return out;
  }

  void init_xavier(Rng& rng) {
    for (Layer& l : layers_)
      if (auto* conv = std::get_if<Conv2d<T>>(&l)) conv->init_xavier(rng);
  }

  bool empty() const { return layers_.empty(); }

 private:
  std::vector<Layer> layers_;
};

// Merge-point backbone: branches run the pre-merge blocks with shared
// weights, feature maps concatenate, the trunk runs the rest. K = 1 merges
// the raw images into a 6-channel input instead.
template <typename T>
class Backbone {
 public:
  explicit Backbone(const ArchConfig& config) : config_(config) {
    config.validate();
    const std::string merge_before = "conv" + std::to_string(config.concat_index);
    int channels = config.input_channels_per_branch;
    bool merged = false;
    for (const LayerSpec& spec : backbone_layer_table()) {
      if (!merged && spec.name == merge_before) {
        merged = true;
        merge_channels_ = channels;
        channels *= 2;
      }
      Stack<T>& dst = merged ? trunk_ : branch_a_;
      switch (spec.kind) {
        case LayerKind::kConv: {
          const int out_c = config.scaled(spec.out_channels);
          dst.add(Conv2d<T>(spec.name, channels, out_c, spec.kernel, spec.stride,
                            spec.pad));
          channels = out_c;
          break;
        }
        case LayerKind::kReLU:
          dst.add(ReLU<T>{});
          break;
        case LayerKind::kLRN:
          dst.add(LRN<T>{});
          break;
        case LayerKind::kMaxPool:
          dst.add(MaxPool2d<T>(spec.kernel, spec.stride));
          break;
        case LayerKind::kConcat:
          break;
      }
    }
    out_channels_ = channels;
    branch_b_ = branch_a_.shared_twin();
  }

  // design, photo: [3,H,W] -> conv5 map [C5, H/16, W/16].
  Tensor<T> forward(const Tensor<T>& design, const Tensor<T>& photo) {
    if (!design.same_shape(photo))
      throw ShapeMismatch("backbone branch inputs differ in shape");
    if (branch_a_.empty()) return trunk_.forward(concat_channels(design, photo));
    Tensor<T> a = branch_a_.forward(design);
    Tensor<T> b = branch_b_.forward(photo);
    branch_out_channels_ = a.shape[0];
    return trunk_.forward(concat_channels(a, b));
  }

  void backward(const Tensor<T>& grad_conv5) {
    Tensor<T> g = trunk_.backward(grad_conv5);
    if (branch_a_.empty()) return;
    auto [ga, gb] = split_channels(g, branch_out_channels_);
    branch_a_.backward(std::move(ga));
    branch_b_.backward(std::move(gb));
  }

  // Shared branch parameters appear once.
  std::vector<ParamPtr<T>> params() const {
    std::vector<ParamPtr<T>> out = branch_a_.params();
    const auto trunk = trunk_.params();
    out.insert(out.end(), trunk.begin(), trunk.end());
    return out;
  }

  void init_xavier(Rng& rng) {
    branch_a_.init_xavier(rng);
    trunk_.init_xavier(rng);
  }

  int out_channels() const { return out_channels_; }
  const ArchConfig& config() const { return config_; }

 private:
  ArchConfig config_;
  Stack<T> branch_a_, branch_b_, trunk_;
  int merge_channels_ = 0;
  int branch_out_channels_ = 0;
  int out_channels_ = 0;
};

}  // namespace diffspot::nn

#endif  // DIFFSPOT_NN_BACKBONE_HPP_

#ifndef DIFFSPOT_RCNN_HPP_
#define DIFFSPOT_RCNN_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "diffspot/arch.hpp"
#include "diffspot/geometry.hpp"
#include "diffspot/nn/tensor.hpp"

namespace diffspot {

struct AnchorParams {
  std::vector<double> scales = {128.0, 256.0, 512.0};
  std::vector<double> ratios = {1.0, 2.0, 0.5};  // height / width
  int stride = kBackboneStride;

  int per_cell() const {
    return static_cast<int>(scales.size() * ratios.size());
  }
};

// Equal-area anchors: scale^2 = w*h with h/w = ratio. Order is row-major
// grid cells, then ratios x scales per cell, matching the RPN head's channel
// layout.
inline std::vector<Box> generate_anchors(int feat_h, int feat_w,
                                         const AnchorParams& p) {
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(feat_h) * feat_w * p.per_cell());
  for (int i = 0; i < feat_h; ++i)
    for (int j = 0; j < feat_w; ++j) {
      const double cx = j * p.stride + p.stride / 2.0;
      const double cy = i * p.stride + p.stride / 2.0;
      for (double ratio : p.ratios)
        for (double scale : p.scales) {
          const double w = scale / std::sqrt(ratio);
          const double h = scale * std::sqrt(ratio);
          anchors.push_back(Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
        }
    }
  return anchors;
}

// Greedy non-maximum suppression; returns kept indices in score-descending
// order. Ties break toward the lower index for determinism.
inline std::vector<int> nms(const std::vector<Box>& boxes,
                            const std::vector<double>& scores,
                            double threshold) {
  if (boxes.size() != scores.size())
    throw DimensionMismatch("nms boxes/scores length mismatch");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[a] > scores[b];
  });
  std::vector<int> kept;
  std::vector<char> dead(boxes.size(), 0);
  for (int idx : order) {
    if (dead[idx]) continue;
    kept.push_back(idx);
    for (int other : order)
      if (!dead[other] && other != idx &&
          iou(boxes[idx], boxes[other]) > threshold)
        dead[other] = 1;
  }
  return kept;
}

// Center/log-size box regression parameterization.
inline std::array<double, 4> encode_box(const Box& anchor, const Box& target) {
  const double aw = anchor.width(), ah = anchor.height();
  if (aw <= 0 || ah <= 0) throw InvalidConfig("encode against degenerate anchor");
  if (target.width() <= 0 || target.height() <= 0)
    throw InvalidConfig("encode of degenerate target box");
  return {(target.cx() - anchor.cx()) / aw, (target.cy() - anchor.cy()) / ah,
          std::log(target.width() / aw), std::log(target.height() / ah)};
}

inline Box decode_box(const Box& anchor, const std::array<double, 4>& t) {
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = t[0] * aw + anchor.cx();
  const double cy = t[1] * ah + anchor.cy();
  const double w = std::exp(t[2]) * aw;
  const double h = std::exp(t[3]) * ah;
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

enum class AnchorLabel : int { kNegative = 0, kPositive = 1, kIgnore = -1 };

struct RpnTargets {
  std::vector<AnchorLabel> labels;
  std::vector<std::array<double, 4>> offsets;  // valid where label is positive
  std::vector<int> matched_gt;                 // -1 where unmatched
};

// Positive: IoU >= pos_iou with some gt, or argmax-IoU anchor of a gt.
// Negative: max IoU < neg_iou. Anchors crossing the image boundary are
// ignored for training.
inline RpnTargets assign_rpn_labels(const std::vector<Box>& anchors,
                                    const std::vector<Box>& gt_boxes,
                                    double pos_iou, double neg_iou,
                                    int image_w, int image_h) {
  const std::size_t n = anchors.size();
  RpnTargets out;
  out.labels.assign(n, AnchorLabel::kIgnore);
  out.offsets.assign(n, {0, 0, 0, 0});
  out.matched_gt.assign(n, -1);

  std::vector<char> inside(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    inside[i] = box_inside(anchors[i], image_w, image_h) ? 1 : 0;

  std::vector<double> best_iou(n, 0.0);
  std::vector<double> gt_best(gt_boxes.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!inside[i]) continue;
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(anchors[i], gt_boxes[g]);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        out.matched_gt[i] = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (!inside[i]) continue;
    if (best_iou[i] < neg_iou) out.labels[i] = AnchorLabel::kNegative;
    if (!gt_boxes.empty() && best_iou[i] >= pos_iou)
      out.labels[i] = AnchorLabel::kPositive;
  }
  // Every gt claims its best-overlap anchors even below pos_iou.
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    if (gt_best[g] <= 0.0) continue;
    for (std::size_t i = 0; i < n; ++i)
      if (inside[i] && std::abs(iou(anchors[i], gt_boxes[g]) - gt_best[g]) < 1e-12) {
        out.labels[i] = AnchorLabel::kPositive;
        out.matched_gt[i] = static_cast<int>(g);
      }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (out.labels[i] == AnchorLabel::kPositive)
      out.offsets[i] = encode_box(anchors[i], gt_boxes[out.matched_gt[i]]);
  return out;
}

// Caps the RPN batch at `batch` anchors with at most half positive; surplus
// anchors of either class are ignored, chosen by shuffled order.
inline void sample_rpn_batch(RpnTargets& targets, int batch, Rng& rng) {
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < targets.labels.size(); ++i) {
    if (targets.labels[i] == AnchorLabel::kPositive) pos.push_back(static_cast<int>(i));
    if (targets.labels[i] == AnchorLabel::kNegative) neg.push_back(static_cast<int>(i));
  }
  std::shuffle(pos.begin(), pos.end(), rng.engine());
  std::shuffle(neg.begin(), neg.end(), rng.engine());
  const int keep_pos = std::min<int>(static_cast<int>(pos.size()), batch / 2);
  const int keep_neg =
      std::min<int>(static_cast<int>(neg.size()), batch - keep_pos);
  for (std::size_t k = keep_pos; k < pos.size(); ++k)
    targets.labels[pos[k]] = AnchorLabel::kIgnore;
  for (std::size_t k = keep_neg; k < neg.size(); ++k)
    targets.labels[neg[k]] = AnchorLabel::kIgnore;
}

// RoI max pooling of [C,H,W] features into [R, C*grid*grid] rows. Bins that
// project to an empty span are widened to one source pixel, so degenerate
// proposals still pool a value.
template <typename T>
class RoiPool {
 public:
  RoiPool(int grid, double spatial_scale)
      : grid_(grid), spatial_scale_(spatial_scale) {}

  nn::Tensor<T> forward(const nn::Tensor<T>& feat, const std::vector<Box>& rois) {
    const int C = feat.shape[0], H = feat.shape[1], W = feat.shape[2];
    feat_shape_ = feat.shape;
    const int cells = grid_ * grid_;
    nn::Tensor<T> out({static_cast<int>(rois.size()), C * cells});
    argmax_.assign(out.numel(), std::size_t(-1));
    for (std::size_t r = 0; r < rois.size(); ++r) {
      const double x1 = std::clamp(rois[r].x1 * spatial_scale_, 0.0, double(W));
      const double y1 = std::clamp(rois[r].y1 * spatial_scale_, 0.0, double(H));
      const double x2 = std::clamp(rois[r].x2 * spatial_scale_, 0.0, double(W));
      const double y2 = std::clamp(rois[r].y2 * spatial_scale_, 0.0, double(H));
      for (int gy = 0; gy < grid_; ++gy)
        for (int gx = 0; gx < grid_; ++gx) {
          int xs = static_cast<int>(std::floor(x1 + (x2 - x1) * gx / grid_));
          int xe = static_cast<int>(std::ceil(x1 + (x2 - x1) * (gx + 1) / grid_));
          int ys = static_cast<int>(std::floor(y1 + (y2 - y1) * gy / grid_));
          int ye = static_cast<int>(std::ceil(y1 + (y2 - y1) * (gy + 1) / grid_));
          xs = std::clamp(xs, 0, W - 1);
          ys = std::clamp(ys, 0, H - 1);
          xe = std::clamp(std::max(xe, xs + 1), 1, W);
          ye = std::clamp(std::max(ye, ys + 1), 1, H);
          for (int c = 0; c < C; ++c) {
            T best = feat.at3(c, ys, xs);
            std::size_t best_idx = (static_cast<std::size_t>(c) * H + ys) * W + xs;
            for (int y = ys; y < ye; ++y)
              for (int x = xs; x < xe; ++x) {
                const T v = feat.at3(c, y, x);
                if (v > best) {
                  best = v;
                  best_idx = (static_cast<std::size_t>(c) * H + y) * W + x;
                }
              }
            const std::size_t o =
                (r * C + c) * static_cast<std::size_t>(cells) + gy * grid_ + gx;
            out.data[o] = best;
            argmax_[o] = best_idx;
          }
        }
    }
    return out;
  }

  nn::Tensor<T> backward(const nn::Tensor<T>& grad_rows) {
    nn::Tensor<T> gx(feat_shape_);
    for (std::size_t i = 0; i < grad_rows.numel(); ++i)
      if (argmax_[i] != std::size_t(-1)) gx.data[argmax_[i]] += grad_rows.data[i];
    return gx;
  }

  int grid() const { return grid_; }

 private:
  int grid_;
  double spatial_scale_;
  std::vector<int> feat_shape_;
  std::vector<std::size_t> argmax_;
};

// ---- loss primitives ----

// smooth_l1_sigma(x): 0.5 (sigma x)^2 for |x| < 1/sigma^2, |x| - 0.5/sigma^2
// beyond.
inline double smooth_l1(double x, double sigma = 1.0) {
  const double s2 = sigma * sigma;
  const double ax = std::abs(x);
  if (ax < 1.0 / s2) return 0.5 * s2 * x * x;
  return ax - 0.5 / s2;
}

inline double smooth_l1_grad(double x, double sigma = 1.0) {
  const double s2 = sigma * sigma;
  if (std::abs(x) < 1.0 / s2) return s2 * x;
  return x > 0 ? 1.0 : -1.0;
}

// Mean softmax cross-entropy over rows whose label is >= 0; rows labeled -1
// contribute nothing. grad (if given) receives d(loss)/d(logits).
template <typename T>
double softmax_cross_entropy(const nn::Tensor<T>& logits,
                             const std::vector<int>& labels,
                             nn::Tensor<T>* grad = nullptr) {
  const int N = logits.shape[0], C = logits.shape[1];
  if (static_cast<int>(labels.size()) != N)
    throw DimensionMismatch("labels do not match logits rows");
  int active = 0;
  for (int l : labels) active += l >= 0;
  if (active == 0) throw NoValidSamples("softmax batch has no labeled rows");
  if (grad) *grad = nn::Tensor<T>(logits.shape);
  double loss = 0;
  for (int n = 0; n < N; ++n) {
    if (labels[n] < 0) continue;
    double mx = logits.at2(n, 0);
    for (int c = 1; c < C; ++c) mx = std::max<double>(mx, logits.at2(n, c));
    double z = 0;
    for (int c = 0; c < C; ++c) z += std::exp(double(logits.at2(n, c)) - mx);
    const double logz = std::log(z) + mx;
    loss += logz - double(logits.at2(n, labels[n]));
    if (grad)
      for (int c = 0; c < C; ++c) {
        const double p = std::exp(double(logits.at2(n, c)) - logz);
        grad->at2(n, c) =
            static_cast<T>((p - (c == labels[n] ? 1.0 : 0.0)) / active);
      }
  }
  return loss / active;
}

// Row-wise softmax probabilities (no gradient), for scoring.
template <typename T>
std::vector<double> softmax_prob(const nn::Tensor<T>& logits, int cls) {
  const int N = logits.shape[0], C = logits.shape[1];
  std::vector<double> out(N);
  for (int n = 0; n < N; ++n) {
    double mx = logits.at2(n, 0);
    for (int c = 1; c < C; ++c) mx = std::max<double>(mx, logits.at2(n, c));
    double z = 0;
    for (int c = 0; c < C; ++c) z += std::exp(double(logits.at2(n, c)) - mx);
    out[n] = std::exp(double(logits.at2(n, cls)) - mx) / z;
  }
  return out;
}

// Smooth-L1 over the rows selected by `active`, divided by `normalizer`.
template <typename T>
double smooth_l1_loss(const nn::Tensor<T>& pred, const nn::Tensor<T>& target,
                      const std::vector<char>& active, double sigma,
                      double normalizer, nn::Tensor<T>* grad = nullptr) {
  if (!pred.same_shape(target)) throw DimensionMismatch("smooth-l1 shape mismatch");
  const int N = pred.shape[0], D = pred.shape[1];
  if (static_cast<int>(active.size()) != N)
    throw DimensionMismatch("active mask does not match rows");
  if (normalizer <= 0) throw InvalidConfig("smooth-l1 normalizer must be positive");
  if (grad) *grad = nn::Tensor<T>(pred.shape);
  double loss = 0;
  for (int n = 0; n < N; ++n) {
    if (!active[n]) continue;
    for (int d = 0; d < D; ++d) {
      const double x = double(pred.at2(n, d)) - double(target.at2(n, d));
      loss += smooth_l1(x, sigma);
      if (grad) grad->at2(n, d) = static_cast<T>(smooth_l1_grad(x, sigma) / normalizer);
    }
  }
  return loss / normalizer;
}

struct LossBundle {
  double rpn_cls = 0, rpn_reg = 0, head_cls = 0, head_reg = 0;
  double total() const { return rpn_cls + rpn_reg + head_cls + head_reg; }
};

}  // namespace diffspot

#endif  // DIFFSPOT_RCNN_HPP_

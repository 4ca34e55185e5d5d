#ifndef DIFFSPOT_DETECTOR_HPP_
#define DIFFSPOT_DETECTOR_HPP_

#include <array>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "diffspot/image.hpp"
#include "diffspot/nn/backbone.hpp"
#include "diffspot/nn/checkpoint.hpp"
#include "diffspot/rcnn.hpp"
#include "diffspot/synthgen.hpp"

namespace diffspot {

struct DetectParams {
  AnchorParams anchors;
  double pos_iou = 0.7, neg_iou = 0.3;
  int rpn_batch = 256;
  int pre_nms_top_n = 6000;
  int post_nms_top_n = 300;        // test-time proposals
  int train_post_nms_top_n = 2000;
  double proposal_nms = 0.7;
  double detection_nms = 0.3;
  double min_proposal_size = 16.0;
  int head_batch = 128;
  double fg_fraction = 0.25;
  double fg_iou = 0.5;
  double bg_iou_low = 0.0;
  double rpn_sigma = 3.0;
  double head_sigma = 1.0;
  std::array<double, 4> bbox_stds = {0.1, 0.1, 0.2, 0.2};
  double report_threshold = 0.0;
  int roi_grid = 6;
};

inline nlohmann::ordered_json detect_params_to_json(const DetectParams& p) {
  return {{"anchor_scales", p.anchors.scales},
          {"anchor_ratios", p.anchors.ratios},
          {"stride", p.anchors.stride},
          {"pos_iou", p.pos_iou},
          {"neg_iou", p.neg_iou},
          {"rpn_batch", p.rpn_batch},
          {"pre_nms_top_n", p.pre_nms_top_n},
          {"post_nms_top_n", p.post_nms_top_n},
          {"train_post_nms_top_n", p.train_post_nms_top_n},
          {"proposal_nms", p.proposal_nms},
          {"detection_nms", p.detection_nms},
          {"min_proposal_size", p.min_proposal_size},
          {"head_batch", p.head_batch},
          {"fg_fraction", p.fg_fraction},
          {"fg_iou", p.fg_iou},
          {"bg_iou_low", p.bg_iou_low},
          {"rpn_sigma", p.rpn_sigma},
          {"head_sigma", p.head_sigma},
          {"bbox_stds", p.bbox_stds},
          {"report_threshold", p.report_threshold},
          {"roi_grid", p.roi_grid}};
}

inline DetectParams detect_params_from_json(const nlohmann::ordered_json& j) {
  DetectParams p;
  p.anchors.scales = j.value("anchor_scales", p.anchors.scales);
  p.anchors.ratios = j.value("anchor_ratios", p.anchors.ratios);
  p.anchors.stride = j.value("stride", p.anchors.stride);
  p.pos_iou = j.value("pos_iou", p.pos_iou);
  p.neg_iou = j.value("neg_iou", p.neg_iou);
  p.rpn_batch = j.value("rpn_batch", p.rpn_batch);
  p.pre_nms_top_n = j.value("pre_nms_top_n", p.pre_nms_top_n);
  p.post_nms_top_n = j.value("post_nms_top_n", p.post_nms_top_n);
  p.train_post_nms_top_n = j.value("train_post_nms_top_n", p.train_post_nms_top_n);
  p.proposal_nms = j.value("proposal_nms", p.proposal_nms);
  p.detection_nms = j.value("detection_nms", p.detection_nms);
  p.min_proposal_size = j.value("min_proposal_size", p.min_proposal_size);
  p.head_batch = j.value("head_batch", p.head_batch);
  p.fg_fraction = j.value("fg_fraction", p.fg_fraction);
  p.fg_iou = j.value("fg_iou", p.fg_iou);
  p.bg_iou_low = j.value("bg_iou_low", p.bg_iou_low);
  p.rpn_sigma = j.value("rpn_sigma", p.rpn_sigma);
  p.head_sigma = j.value("head_sigma", p.head_sigma);
  p.bbox_stds = j.value("bbox_stds", p.bbox_stds);
  p.report_threshold = j.value("report_threshold", p.report_threshold);
  p.roi_grid = j.value("roi_grid", p.roi_grid);
  return p;
}

// Pixels mapped to [-1, 1]; both branches share the mapping.
template <typename T>
nn::Tensor<T> image_to_tensor(const Image& img) {
  nn::Tensor<T> t({img.channels, img.height, img.width});
  std::size_t i = 0;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t.data[i++] = static_cast<T>((img.at(x, y, c) - 127.5) / 127.5);
  return t;
}

struct ProposalSet {
  std::vector<Box> boxes;
  std::vector<double> scores;
};

namespace detail {

// [D*A, H, W] map -> [H*W*A, D] rows matching anchor order.
template <typename T>
nn::Tensor<T> rows_from_map(const nn::Tensor<T>& map, int A, int D) {
  const int H = map.shape[1], W = map.shape[2];
  nn::Tensor<T> rows({H * W * A, D});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int a = 0; a < A; ++a)
        for (int d = 0; d < D; ++d)
          rows.at2((y * W + x) * A + a, d) = map.at3(a * D + d, y, x);
  return rows;
}

template <typename T>
nn::Tensor<T> map_from_rows(const nn::Tensor<T>& rows, int A, int D, int H, int W) {
  nn::Tensor<T> map({D * A, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int a = 0; a < A; ++a)
        for (int d = 0; d < D; ++d)
          map.at3(a * D + d, y, x) = rows.at2((y * W + x) * A + a, d);
  return map;
}

}  // namespace detail

template <typename T>
ProposalSet make_proposals(const std::vector<Box>& anchors,
                           const nn::Tensor<T>& cls_rows,
                           const nn::Tensor<T>& reg_rows, int img_w, int img_h,
                           int pre_n, int post_n, double nms_thr,
                           double min_size) {
  const std::vector<double> scores = softmax_prob(cls_rows, 1);
  std::vector<Box> boxes(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const std::array<double, 4> t = {
        double(reg_rows.at2(static_cast<int>(i), 0)),
        double(reg_rows.at2(static_cast<int>(i), 1)),
        double(reg_rows.at2(static_cast<int>(i), 2)),
        double(reg_rows.at2(static_cast<int>(i), 3))};
    boxes[i] = clip_box(decode_box(anchors[i], t), img_w, img_h);
  }
  std::vector<int> order;
  for (std::size_t i = 0; i < boxes.size(); ++i)
    if (boxes[i].width() >= min_size && boxes[i].height() >= min_size)
      order.push_back(static_cast<int>(i));
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  if (static_cast<int>(order.size()) > pre_n) order.resize(pre_n);

  std::vector<Box> cand;
  std::vector<double> cand_scores;
  for (int i : order) {
    cand.push_back(boxes[i]);
    cand_scores.push_back(scores[i]);
  }
  const std::vector<int> kept = nms(cand, cand_scores, nms_thr);
  ProposalSet out;
  for (int k : kept) {
    if (static_cast<int>(out.boxes.size()) >= post_n) break;
    out.boxes.push_back(cand[k]);
    out.scores.push_back(cand_scores[k]);
  }
  return out;
}

// Faster R-CNN style detector for the single "difference" class.
template <typename T>
class DetectorModel {
 public:
  DetectorModel(const ArchConfig& arch, const DetectParams& params = {})
      : arch_(arch),
        params_(params),
        backbone_(arch),
        rpn_conv_("rpn_conv", backbone_.out_channels(), arch.scaled(256), 3, 1, 1),
        rpn_cls_("rpn_cls", arch.scaled(256), 2 * params.anchors.per_cell(), 1, 1, 0),
        rpn_reg_("rpn_reg", arch.scaled(256), 4 * params.anchors.per_cell(), 1, 1, 0),
        roi_pool_(params.roi_grid, 1.0 / params.anchors.stride),
        fc6_("fc6", backbone_.out_channels() * params.roi_grid * params.roi_grid,
             arch.scaled(4096)),
        fc7_("fc7", arch.scaled(4096), arch.scaled(4096)),
        head_cls_("head_cls", arch.scaled(4096), 2),
        head_reg_("head_reg", arch.scaled(4096), 4) {}

  std::vector<nn::ParamPtr<T>> params() const {
    std::vector<nn::ParamPtr<T>> out = backbone_.params();
    for (const auto* conv : {&rpn_conv_, &rpn_cls_, &rpn_reg_}) {
      out.push_back(conv->weight);
      out.push_back(conv->bias);
    }
    for (const auto* fc : {&fc6_, &fc7_, &head_cls_, &head_reg_}) {
      out.push_back(fc->weight);
      out.push_back(fc->bias);
    }
    return out;
  }

  void init_weights(std::uint64_t seed) {
    Rng rng(seed);
    backbone_.init_xavier(rng);
    rpn_conv_.init_xavier(rng);
    rpn_cls_.init_xavier(rng);
    rpn_reg_.init_xavier(rng);
    fc6_.init_xavier(rng);
    fc7_.init_xavier(rng);
    head_cls_.init_xavier(rng);
    head_reg_.init_xavier(rng);
    initialized_ = true;
  }

  // Pre-merge weights from an external checkpoint, the rest xavier.
  void init_weights_pretrained(const std::string& path, std::uint64_t seed) {
    init_weights(seed);
    nn::load_checkpoint_subset(path, backbone_.params());
  }

  void zero_grads() {
    for (auto& p : params()) p->zero_grad();
  }

  bool initialized() const { return initialized_; }
  const ArchConfig& arch() const { return arch_; }
  const DetectParams& detect_params() const { return params_; }

  void save(const std::string& path) const {
    nn::save_checkpoint(path, arch_, params(),
                        {{"kind", "detector"},
                         {"detect_params", detect_params_to_json(params_)}});
  }

  static DetectorModel load(const std::string& path) {
    const ArchConfig arch = nn::peek_checkpoint_arch(path);
    std::ifstream in(path, std::ios::binary);
    const auto header = nn::read_checkpoint_header(in, path);
    in.close();
    DetectParams dp;
    if (header.manifest.contains("extra") &&
        header.manifest["extra"].contains("detect_params"))
      dp = detect_params_from_json(header.manifest["extra"]["detect_params"]);
    DetectorModel model(arch, dp);
    nn::load_checkpoint(path, model.params());
    model.initialized_ = true;
    return model;
  }

  // One forward+backward pass on a single sample; gradients accumulate into
  // the parameter buffers (call zero_grads first). Proposal coordinates are
  // treated as constants (approximate joint training).
  LossBundle train_step(const SynthSample& sample, Rng& rng) {
    sample.validate();
    const int img_w = sample.pair.photo.width;
    const int img_h = sample.pair.photo.height;
    std::vector<Box> gts;
    for (const DiffBox& d : sample.boxes) gts.push_back(d.box);

    // forward: backbone + rpn
    const nn::Tensor<T> design = image_to_tensor<T>(sample.pair.design);
    const nn::Tensor<T> photo = image_to_tensor<T>(sample.pair.photo);
    const nn::Tensor<T> feat = backbone_.forward(design, photo);
    const int fh = feat.shape[1], fw = feat.shape[2];
    const int A = params_.anchors.per_cell();

    const nn::Tensor<T> rpn_mid = rpn_relu_.forward(rpn_conv_.forward(feat));
    const nn::Tensor<T> cls_map = rpn_cls_.forward(rpn_mid);
    const nn::Tensor<T> reg_map = rpn_reg_.forward(rpn_mid);
    const nn::Tensor<T> cls_rows = detail::rows_from_map(cls_map, A, 2);
    const nn::Tensor<T> reg_rows = detail::rows_from_map(reg_map, A, 4);

    const std::vector<Box> anchors = generate_anchors(fh, fw, params_.anchors);
    RpnTargets targets =
        assign_rpn_labels(anchors, gts, params_.pos_iou, params_.neg_iou, img_w, img_h);
    sample_rpn_batch(targets, params_.rpn_batch, rng);

    std::vector<int> rpn_labels(anchors.size());
    std::vector<char> rpn_pos(anchors.size(), 0);
    int rpn_active = 0;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      rpn_labels[i] = static_cast<int>(targets.labels[i]);
      rpn_pos[i] = targets.labels[i] == AnchorLabel::kPositive;
      rpn_active += targets.labels[i] != AnchorLabel::kIgnore;
    }
    if (rpn_active == 0) throw NoValidSamples("no usable anchors for this sample");

    LossBundle losses;
    nn::Tensor<T> g_cls_rows, g_reg_rows;
    losses.rpn_cls = softmax_cross_entropy(cls_rows, rpn_labels, &g_cls_rows);
    nn::Tensor<T> rpn_reg_targets({static_cast<int>(anchors.size()), 4});
    for (std::size_t i = 0; i < anchors.size(); ++i)
      for (int d = 0; d < 4; ++d)
        rpn_reg_targets.at2(static_cast<int>(i), d) =
            static_cast<T>(targets.offsets[i][d]);
    losses.rpn_reg = smooth_l1_loss(reg_rows, rpn_reg_targets, rpn_pos,
                                    params_.rpn_sigma, rpn_active, &g_reg_rows);

    // proposals (constant coordinates) + gt appended for head training
    ProposalSet proposals = make_proposals(
        anchors, cls_rows, reg_rows, img_w, img_h, params_.pre_nms_top_n,
        params_.train_post_nms_top_n, params_.proposal_nms, params_.min_proposal_size);
    for (const Box& g : gts) {
      proposals.boxes.push_back(g);
      proposals.scores.push_back(1.0);
    }

    // sample the head batch
    std::vector<int> fg, bg;
    std::vector<int> match(proposals.boxes.size(), -1);
    for (std::size_t i = 0; i < proposals.boxes.size(); ++i) {
      double best = 0;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        const double v = iou(proposals.boxes[i], gts[g]);
        if (v > best) {
          best = v;
          match[i] = static_cast<int>(g);
        }
      }
      if (best >= params_.fg_iou)
        fg.push_back(static_cast<int>(i));
      else if (best >= params_.bg_iou_low)
        bg.push_back(static_cast<int>(i));
    }
    std::shuffle(fg.begin(), fg.end(), rng.engine());
    std::shuffle(bg.begin(), bg.end(), rng.engine());
    const int fg_cap = std::max(
        1, static_cast<int>(std::lround(params_.fg_fraction * params_.head_batch)));
    if (static_cast<int>(fg.size()) > fg_cap) fg.resize(fg_cap);
    const int bg_cap = params_.head_batch - static_cast<int>(fg.size());
    if (static_cast<int>(bg.size()) > bg_cap) bg.resize(bg_cap);
    if (fg.empty() && bg.empty())
      throw NoValidSamples("head batch is empty for this sample");

    std::vector<Box> rois;
    std::vector<int> head_labels;
    std::vector<char> fg_mask;
    nn::Tensor<T> head_targets({static_cast<int>(fg.size() + bg.size()), 4});
    int row = 0;
    for (int i : fg) {
      rois.push_back(proposals.boxes[i]);
      head_labels.push_back(1);
      fg_mask.push_back(1);
      const auto t = encode_box(proposals.boxes[i], gts[match[i]]);
      for (int d = 0; d < 4; ++d)
        head_targets.at2(row, d) = static_cast<T>(t[d] / params_.bbox_stds[d]);
      ++row;
    }
    for (int i : bg) {
      rois.push_back(proposals.boxes[i]);
      head_labels.push_back(0);
      fg_mask.push_back(0);
      ++row;
    }

    // head forward
    const nn::Tensor<T> pooled = roi_pool_.forward(feat, rois);
    const nn::Tensor<T> h6 = relu6_.forward(fc6_.forward(pooled));
    const nn::Tensor<T> h7 = relu7_.forward(fc7_.forward(h6));
    const nn::Tensor<T> head_cls_out = head_cls_.forward(h7);
    const nn::Tensor<T> head_reg_out = head_reg_.forward(h7);

    nn::Tensor<T> g_head_cls, g_head_reg;
    losses.head_cls = softmax_cross_entropy(head_cls_out, head_labels, &g_head_cls);
    losses.head_reg =
        smooth_l1_loss(head_reg_out, head_targets, fg_mask, params_.head_sigma,
                       static_cast<double>(rois.size()), &g_head_reg);

    // backward: head
    nn::Tensor<T> g_h7 = head_cls_.backward(g_head_cls);
    const nn::Tensor<T> g_h7_reg = head_reg_.backward(g_head_reg);
    for (std::size_t i = 0; i < g_h7.numel(); ++i) g_h7.data[i] += g_h7_reg.data[i];
    const nn::Tensor<T> g_pooled =
        fc6_.backward(relu6_.backward(fc7_.backward(relu7_.backward(g_h7))));
    nn::Tensor<T> g_feat = roi_pool_.backward(g_pooled);

    // backward: rpn
    const nn::Tensor<T> g_cls_map = detail::map_from_rows(g_cls_rows, A, 2, fh, fw);
    const nn::Tensor<T> g_reg_map = detail::map_from_rows(g_reg_rows, A, 4, fh, fw);
    nn::Tensor<T> g_mid = rpn_cls_.backward(g_cls_map);
    const nn::Tensor<T> g_mid_reg = rpn_reg_.backward(g_reg_map);
    for (std::size_t i = 0; i < g_mid.numel(); ++i) g_mid.data[i] += g_mid_reg.data[i];
    const nn::Tensor<T> g_feat_rpn = rpn_conv_.backward(rpn_relu_.backward(g_mid));
    for (std::size_t i = 0; i < g_feat.numel(); ++i)
      g_feat.data[i] += g_feat_rpn.data[i];

    backbone_.backward(g_feat);
    return losses;
  }

  std::vector<DiffBox> detect(const AlignedPair& pair) {
    if (!initialized_) throw ModelNotTrained("detector weights not initialized");
    pair.validate();
    const int img_w = pair.photo.width, img_h = pair.photo.height;
    const nn::Tensor<T> feat = backbone_.forward(image_to_tensor<T>(pair.design),
                                                 image_to_tensor<T>(pair.photo));
    const int A = params_.anchors.per_cell();
    const nn::Tensor<T> rpn_mid = rpn_relu_.forward(rpn_conv_.forward(feat));
    const nn::Tensor<T> cls_rows =
        detail::rows_from_map(rpn_cls_.forward(rpn_mid), A, 2);
    const nn::Tensor<T> reg_rows =
        detail::rows_from_map(rpn_reg_.forward(rpn_mid), A, 4);
    const std::vector<Box> anchors =
        generate_anchors(feat.shape[1], feat.shape[2], params_.anchors);

    const ProposalSet proposals = make_proposals(
        anchors, cls_rows, reg_rows, img_w, img_h, params_.pre_nms_top_n,
        params_.post_nms_top_n, params_.proposal_nms, params_.min_proposal_size);
    if (proposals.boxes.empty()) return {};

    const nn::Tensor<T> pooled = roi_pool_.forward(feat, proposals.boxes);
    const nn::Tensor<T> h6 = relu6_.forward(fc6_.forward(pooled));
    const nn::Tensor<T> h7 = relu7_.forward(fc7_.forward(h6));
    const nn::Tensor<T> cls_out = head_cls_.forward(h7);
    const nn::Tensor<T> reg_out = head_reg_.forward(h7);
    const std::vector<double> scores = softmax_prob(cls_out, 1);

    std::vector<Box> boxes(proposals.boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const std::array<double, 4> t = {
          double(reg_out.at2(static_cast<int>(i), 0)) * params_.bbox_stds[0],
          double(reg_out.at2(static_cast<int>(i), 1)) * params_.bbox_stds[1],
          double(reg_out.at2(static_cast<int>(i), 2)) * params_.bbox_stds[2],
          double(reg_out.at2(static_cast<int>(i), 3)) * params_.bbox_stds[3]};
      boxes[i] = clip_box(decode_box(proposals.boxes[i], t), img_w, img_h);
    }
    const std::vector<int> kept = nms(boxes, scores, params_.detection_nms);
    std::vector<DiffBox> detections;
    for (int k : kept)
      if (scores[k] >= params_.report_threshold && boxes[k].valid())
        detections.push_back(DiffBox{boxes[k], scores[k]});
    return detections;
  }

 private:
  ArchConfig arch_;
  DetectParams params_;
  nn::Backbone<T> backbone_;
  nn::Conv2d<T> rpn_conv_, rpn_cls_, rpn_reg_;
  nn::ReLU<T> rpn_relu_;
  RoiPool<T> roi_pool_;
  nn::Linear<T> fc6_, fc7_, head_cls_, head_reg_;
  nn::ReLU<T> relu6_, relu7_;
  bool initialized_ = false;
};

}  // namespace diffspot

#endif  // DIFFSPOT_DETECTOR_HPP_

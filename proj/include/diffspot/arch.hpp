#ifndef DIFFSPOT_ARCH_HPP_
#define DIFFSPOT_ARCH_HPP_

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "diffspot/common.hpp"

namespace diffspot {

enum class LayerKind { kConv, kReLU, kLRN, kMaxPool, kConcat };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::kConv;
  int out_channels = 0;  // Conv only; 0 means "same as input"
  int kernel = 0;
  int stride = 1;
  int pad = 0;
};

// Five-block backbone layer table. Channel counts are the base (w = 1)
// values; merge point and width scaling are applied by ArchConfig.
inline std::vector<LayerSpec> backbone_layer_table() {
  using K = LayerKind;
  return {
      {"conv1", K::kConv, 96, 7, 2, 3},
      {"relu1", K::kReLU},
      {"norm1", K::kLRN},
      {"pool1", K::kMaxPool, 0, 3, 2, 0},
      {"conv2", K::kConv, 256, 5, 2, 2},
      {"relu2", K::kReLU},
      {"norm2", K::kLRN},
      {"pool2", K::kMaxPool, 0, 3, 2, 0},
      {"conv3", K::kConv, 384, 3, 1, 1},
      {"relu3", K::kReLU},
      {"conv4", K::kConv, 384, 3, 1, 1},
      {"relu4", K::kReLU},
      {"conv5", K::kConv, 256, 3, 1, 1},
      {"relu5", K::kReLU},
  };
}

// Cumulative spatial downsampling of the table above (two stride-2 convs and
// two stride-2 pools).
constexpr int kBackboneStride = 16;

// Merge-point backbone configuration. Branches run conv1..conv(K-1) with
// shared weights, feature maps are channel-concatenated, and conv-K..conv5
// run on the merged map. K = 1 stacks the two images into a 6-channel input.
struct ArchConfig {
  int concat_index = 1;       // K in {1..5}
  double width_factor = 1.0;  // w in {1, 1/2, 1/4, 1/8, 1/16}
  int input_scale = 600;      // shorter-side target used by train/test rescale
  int input_channels_per_branch = 3;

  int scaled(int base_channels) const {
    return static_cast<int>(std::lround(base_channels * width_factor));
  }

  void validate() const {
    if (concat_index < 1 || concat_index > 5)
      throw InvalidConfig("concat_index must be in [1,5], got " +
                          std::to_string(concat_index));
    const double allowed[] = {1.0, 0.5, 0.25, 0.125, 0.0625};
    bool ok = false;
    for (double w : allowed) ok = ok || std::abs(width_factor - w) < 1e-12;
    if (!ok) throw InvalidConfig("width_factor must be 1/1,1/2,1/4,1/8,1/16");
    for (const LayerSpec& l : backbone_layer_table())
      if (l.kind == LayerKind::kConv && scaled(l.out_channels) < 1)
        throw InvalidConfig("width scaling leaves " + l.name +
                            " with zero channels");
    if (input_scale < 1) throw InvalidConfig("input_scale must be positive");
  }

  // "Arch-conv3" for merge variants, "Arch-1by8" for width variants of K=1.
  std::string display_name() const {
    if (width_factor < 1.0) {
      const int denom = static_cast<int>(std::lround(1.0 / width_factor));
      return "Arch-1by" + std::to_string(denom);
    }
    return "Arch-conv" + std::to_string(concat_index);
  }
};

inline double parse_width_fraction(const std::string& s) {
  const auto slash = s.find('/');
  if (slash == std::string::npos) return std::stod(s);
  const double num = std::stod(s.substr(0, slash));
  const double den = std::stod(s.substr(slash + 1));
  if (den == 0.0) throw InvalidConfig("width fraction has zero denominator");
  return num / den;
}

inline std::string width_fraction_string(double w) {
  if (std::abs(w - 1.0) < 1e-12) return "1";
  const int denom = static_cast<int>(std::lround(1.0 / w));
  return "1/" + std::to_string(denom);
}

// One row of the per-layer shape/cost trace. Branch rows describe a single
// branch and carry branches = 2; trunk rows carry branches = 1.
struct TraceRow {
  std::string name;
  LayerKind kind = LayerKind::kConv;
  int branches = 1;
  int in_channels = 0;
  int out_channels = 0;
  int out_h = 0;
  int out_w = 0;
  int kernel = 0;
  int stride = 1;
  int pad = 0;

  // Stored kernel weights, biases excluded.
  std::int64_t params() const {
    if (kind != LayerKind::kConv) return 0;
    return static_cast<std::int64_t>(kernel) * kernel * in_channels *
           out_channels;
  }

  // Multiply-accumulates for one branch pass at the traced resolution.
  std::int64_t mac() const {
    if (kind != LayerKind::kConv) return 0;
    return static_cast<std::int64_t>(out_h) * out_w * out_channels * kernel *
           kernel * in_channels;
  }
};

struct CostReport {
  std::int64_t params_unique = 0;      // shared branch weights counted once
  std::int64_t params_per_branch = 0;  // pre-merge layers counted per branch
  std::int64_t mac = 0;                // pre-merge layers computed per branch
};

inline int conv_out_size(int in, int kernel, int stride, int pad) {
  if (in + 2 * pad < kernel) return 0;  // avoid trunc-toward-zero on negatives
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

inline void trace_layer(const LayerSpec& l, int branches, int& c, int& h,
                        int& w, std::vector<TraceRow>& rows) {
  TraceRow row;
  row.name = l.name;
  row.kind = l.kind;
  row.branches = branches;
  row.in_channels = c;
  row.kernel = l.kernel;
  row.stride = l.stride;
  row.pad = l.pad;
  switch (l.kind) {
    case LayerKind::kConv:
      h = conv_out_size(h, l.kernel, l.stride, l.pad);
      w = conv_out_size(w, l.kernel, l.stride, l.pad);
      c = l.out_channels;
      break;
    case LayerKind::kMaxPool:
      h = conv_out_size(h, l.kernel, l.stride, l.pad);
      w = conv_out_size(w, l.kernel, l.stride, l.pad);
      break;
    case LayerKind::kReLU:
    case LayerKind::kLRN:
    case LayerKind::kConcat:
      break;
  }
  if (h < 1 || w < 1)
    throw InputTooSmall("layer " + l.name + " output is empty (" +
                        std::to_string(h) + "x" + std::to_string(w) + ")");
  row.out_channels = c;
  row.out_h = h;
  row.out_w = w;
  rows.push_back(row);
}

}  // namespace detail

// Per-layer (h, w, c) trace from the input image down to conv5. The first
// row is the data layer; for K > 1 the branch rows appear once with
// branches = 2.
inline std::vector<TraceRow> feature_shape(const ArchConfig& cfg, int input_h,
                                           int input_w) {
  cfg.validate();
  if (input_h < 1 || input_w < 1) throw InputTooSmall("empty input image");
  std::vector<TraceRow> rows;
  const int merge_branches = cfg.concat_index > 1 ? 2 : 1;
  const int data_channels = merge_branches == 1
                                ? 2 * cfg.input_channels_per_branch
                                : cfg.input_channels_per_branch;

  TraceRow data;
  data.name = "data";
  data.kind = LayerKind::kConcat;  // pure I/O row; kind unused downstream
  data.branches = merge_branches;
  data.in_channels = data_channels;
  data.out_channels = data_channels;
  data.out_h = input_h;
  data.out_w = input_w;
  rows.push_back(data);

  int c = data_channels;
  int h = input_h;
  int w = input_w;
  bool merged = merge_branches == 1;
  const std::string merge_before = "conv" + std::to_string(cfg.concat_index);
  for (const LayerSpec& base : backbone_layer_table()) {
    LayerSpec l = base;
    if (l.kind == LayerKind::kConv) l.out_channels = cfg.scaled(l.out_channels);
    if (!merged && l.name == merge_before) {
      TraceRow cat;
      cat.name = "concat";
      cat.kind = LayerKind::kConcat;
      cat.branches = 1;
      cat.in_channels = c;
      c *= 2;
      cat.out_channels = c;
      cat.out_h = h;
      cat.out_w = w;
      rows.push_back(cat);
      merged = true;
    }
    detail::trace_layer(l, merged ? 1 : 2, c, h, w, rows);
  }
  return rows;
}

// Analytic weight count, kernel weights only. params_per_branch doubles the
// pre-merge rows, matching the convention under which the published
// architecture table is reproducible.
inline CostReport count_params(const ArchConfig& cfg) {
  CostReport report;
  // Shape-independent; any size that survives all strides works.
  for (const TraceRow& row : feature_shape(cfg, 256, 256)) {
    report.params_unique += row.params();
    report.params_per_branch += row.params() * row.branches;
  }
  return report;
}

// Multiply-accumulate count at the given input size; branch layers run once
// per branch and are counted twice.
inline std::int64_t count_mac(const ArchConfig& cfg, int input_h,
                              int input_w) {
  std::int64_t mac = 0;
  for (const TraceRow& row : feature_shape(cfg, input_h, input_w))
    mac += row.mac() * row.branches;
  return mac;
}

inline CostReport cost_report(const ArchConfig& cfg, int input_h,
                              int input_w) {
  CostReport report = count_params(cfg);
  report.mac = count_mac(cfg, input_h, input_w);
  return report;
}

// 3739200 -> "3.74M", 941856 -> "941.86k", 17096908800 -> "17.10G".
inline std::string format_count(std::int64_t n) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  const double v = static_cast<double>(n);
  if (v >= 1e9)
    os << v / 1e9 << "G";
  else if (v >= 1e6)
    os << v / 1e6 << "M";
  else if (v >= 1e3)
    os << v / 1e3 << "k";
  else
    os << n;
  return os.str();
}

}  // namespace diffspot

#endif  // DIFFSPOT_ARCH_HPP_

#ifndef DIFFSPOT_HISTOGRAM_HPP_
#define DIFFSPOT_HISTOGRAM_HPP_

#include <cmath>
#include <vector>

#include "diffspot/image.hpp"

namespace diffspot {

// Per-channel color histogram, each channel normalized to sum 1 and
// concatenated. Regions of different sizes become comparable.
inline std::vector<double> color_histogram(const Image& region,
                                           int bins_per_channel = 32) {
  if (region.empty()) throw EmptyRegion("histogram of empty region");
  if (bins_per_channel < 1 || 256 % bins_per_channel != 0)
    throw InvalidConfig("bins_per_channel must divide 256");
  const int shift_div = 256 / bins_per_channel;
  const int c = region.channels;
  std::vector<double> hist(static_cast<size_t>(bins_per_channel) * c, 0.0);
  const size_t pixels = static_cast<size_t>(region.width) * region.height;
  for (size_t i = 0; i < pixels; ++i)
    for (int k = 0; k < c; ++k) {
      const int bin = region.data[i * c + k] / shift_div;
      hist[static_cast<size_t>(k) * bins_per_channel + bin] += 1.0;
    }
  for (auto& v : hist) v /= static_cast<double>(pixels);
  return hist;
}

// L1 distance between concatenated normalized histograms; 0 iff the color
// proportions agree exactly. Range [0, 2 * channels].
inline double histogram_distance(const Image& a, const Image& b,
                                 int bins_per_channel = 32) {
  if (a.channels != b.channels)
    throw DimensionMismatch("histogram regions differ in channel count");
  const std::vector<double> ha = color_histogram(a, bins_per_channel);
  const std::vector<double> hb = color_histogram(b, bins_per_channel);
  double d = 0.0;
  for (size_t i = 0; i < ha.size(); ++i) d += std::abs(ha[i] - hb[i]);
  return d;
}

}  // namespace diffspot

#endif  // DIFFSPOT_HISTOGRAM_HPP_

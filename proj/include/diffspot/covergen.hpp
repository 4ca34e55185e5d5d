#ifndef DIFFSPOT_COVERGEN_HPP_
#define DIFFSPOT_COVERGEN_HPP_

#include <string>

#include "diffspot/image.hpp"
#include "diffspot/rng.hpp"

namespace diffspot {

// Synthetic textured cover images. The real corpus (book covers photographed
// on a belt) is not distributable, so desk-scale runs use generated covers:
// a color gradient background with random rectangles, discs, bars and
// text-like tick rows, which gives keypoint detectors and the detector
// backbone plenty of structure to work with.
inline Image make_cover(Rng& rng, int width, int height) {
  cv::Mat canvas(height, width, CV_8UC3);
  const cv::Vec3b top(static_cast<uchar>(rng.uniform_int(60, 220)),
                      static_cast<uchar>(rng.uniform_int(60, 220)),
                      static_cast<uchar>(rng.uniform_int(60, 220)));
  const cv::Vec3b bottom(static_cast<uchar>(rng.uniform_int(60, 220)),
                         static_cast<uchar>(rng.uniform_int(60, 220)),
                         static_cast<uchar>(rng.uniform_int(60, 220)));
  for (int y = 0; y < height; ++y) {
    const double t = height > 1 ? static_cast<double>(y) / (height - 1) : 0.0;
    cv::Vec3b c;
    for (int k = 0; k < 3; ++k)
      c[k] = cv::saturate_cast<uchar>((1 - t) * top[k] + t * bottom[k]);
    canvas.row(y).setTo(c);
  }

  auto rand_color = [&rng]() {
    return cv::Scalar(rng.uniform_int(0, 255), rng.uniform_int(0, 255),
                      rng.uniform_int(0, 255));
  };

  const int shapes = rng.uniform_int(30, 50);
  for (int i = 0; i < shapes; ++i) {
    const int kind = rng.uniform_int(0, 3);
    const cv::Scalar color = rand_color();
    switch (kind) {
      case 0: {  // filled rectangle
        const int w = rng.uniform_int(width / 16, width / 4);
        const int h = rng.uniform_int(height / 16, height / 4);
        const int x = rng.uniform_int(0, std::max(0, width - w - 1));
        const int y = rng.uniform_int(0, std::max(0, height - h - 1));
        cv::rectangle(canvas, cv::Rect(x, y, w, h), color, cv::FILLED);
        break;
      }
      case 1: {  // disc
        const int r = rng.uniform_int(std::max(2, width / 40), width / 10);
        const int x = rng.uniform_int(r, std::max(r, width - r - 1));
        const int y = rng.uniform_int(r, std::max(r, height - r - 1));
        cv::circle(canvas, cv::Point(x, y), r, color, cv::FILLED);
        break;
      }
      case 2: {  // bar
        const cv::Point a(rng.uniform_int(0, width - 1),
                          rng.uniform_int(0, height - 1));
        const cv::Point b(rng.uniform_int(0, width - 1),
                          rng.uniform_int(0, height - 1));
        cv::line(canvas, a, b, color, rng.uniform_int(1, 3));
        break;
      }
      default: {  // text-like tick row
        const int glyph_h = std::max(3, height / 36);
        int x = rng.uniform_int(0, width / 2);
        const int y = rng.uniform_int(0, std::max(1, height - glyph_h - 1));
        const int glyphs = rng.uniform_int(4, 14);
        for (int g = 0; g < glyphs && x + 3 < width; ++g) {
          const int gw = rng.uniform_int(2, std::max(3, glyph_h));
          if (x + gw >= width) break;
          cv::rectangle(canvas, cv::Rect(x, y, gw, glyph_h), color,
                        cv::FILLED);
          x += gw + rng.uniform_int(1, 3);
        }
        break;
      }
    }
  }
  return from_mat(canvas);
}

struct JitterParams {
  double max_gain = 0.10;    // per-channel multiplicative range +-
  double max_bias = 10.0;    // additive offset range +-
  double max_noise_sigma = 2.5;
  double max_blur_sigma = 0.6;
};

// Photometric disturbance standing in for camera illumination, color cast
// and sensor noise. Geometry is untouched.
inline Image photometric_jitter(const Image& img, Rng& rng,
                                const JitterParams& p = JitterParams{}) {
  cv::Mat m = mat_view(img).clone();
  cv::Mat f;
  m.convertTo(f, CV_32FC3);

  double gain[3], bias[3];
  for (int k = 0; k < 3; ++k) {
    gain[k] = 1.0 + rng.uniform(-p.max_gain, p.max_gain);
    bias[k] = rng.uniform(-p.max_bias, p.max_bias);
  }
  std::vector<cv::Mat> ch;
  cv::split(f, ch);
  for (int k = 0; k < 3; ++k) ch[k] = ch[k] * gain[k] + bias[k];
  cv::merge(ch, f);

  const double noise_sigma = rng.uniform(0.5, p.max_noise_sigma);
  cv::Mat noise(f.size(), CV_32FC3);
  std::normal_distribution<float> gauss(0.0f, static_cast<float>(noise_sigma));
  for (int y = 0; y < noise.rows; ++y) {
    auto* row = noise.ptr<float>(y);
    for (int x = 0; x < noise.cols * 3; ++x) row[x] = gauss(rng.engine());
  }
  f += noise;

  const double blur = rng.uniform(0.0, p.max_blur_sigma);
  if (blur > 0.2) cv::GaussianBlur(f, f, cv::Size(0, 0), blur);

  cv::Mat out;
  f.convertTo(out, CV_8UC3);
  return from_mat(out);
}

// A weakly labeled "same" pair: the design is the clean cover, the photo is
// the same cover seen through photometric jitter.
inline AlignedPair make_same_pair(Rng& rng, int width, int height,
                                  const std::string& pair_id) {
  AlignedPair pair;
  pair.design = make_cover(rng, width, height);
  pair.photo = photometric_jitter(pair.design, rng);
  pair.transform = Affine::identity();
  pair.pair_id = pair_id;
  return pair;
}

}  // namespace diffspot

#endif  // DIFFSPOT_COVERGEN_HPP_

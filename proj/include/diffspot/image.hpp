#ifndef DIFFSPOT_IMAGE_HPP_
#define DIFFSPOT_IMAGE_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "diffspot/common.hpp"
#include "diffspot/geometry.hpp"

namespace diffspot {

// 8-bit interleaved image, RGB channel order for color. Channel count is
// 1, 3 or 6.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  static Image zeros(int w, int h, int c) {
    Image img;
    img.width = w;
    img.height = h;
    img.channels = c;
    img.data.assign(static_cast<size_t>(w) * h * c, 0);
    return img;
  }

  static Image filled(int w, int h, int c, std::uint8_t value) {
    Image img = zeros(w, h, c);
    std::fill(img.data.begin(), img.data.end(), value);
    return img;
  }

  bool empty() const { return width == 0 || height == 0 || data.empty(); }

  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  std::uint8_t& at(int x, int y, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
};

// Mutable cv::Mat view over the image buffer; no copy, the Image owns the
// memory and must outlive the view.
inline cv::Mat mat_view(Image& img) {
  return cv::Mat(img.height, img.width, CV_8UC(img.channels), img.data.data());
}

inline const cv::Mat mat_view(const Image& img) {
  return cv::Mat(img.height, img.width, CV_8UC(img.channels),
                 const_cast<std::uint8_t*>(img.data.data()));
}

inline Image from_mat(const cv::Mat& m) {
  if (m.depth() != CV_8U) throw InvalidConfig("expected 8-bit mat");
  Image img = Image::zeros(m.cols, m.rows, m.channels());
  if (m.isContinuous()) {
    std::copy(m.data, m.data + img.data.size(), img.data.begin());
  } else {
    cv::Mat dst = mat_view(img);
    m.copyTo(dst);
  }
  return img;
}

// Images are stored RGB; files go through OpenCV which is BGR.
inline Image load_image(const std::string& path) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image: " + path);
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return from_mat(rgb);
}

inline void save_image(const std::string& path, const Image& img) {
  cv::Mat out;
  if (img.channels == 3)
    cv::cvtColor(mat_view(img), out, cv::COLOR_RGB2BGR);
  else if (img.channels == 1)
    out = mat_view(img).clone();
  else
    throw InvalidConfig("can only save 1- or 3-channel images");
  if (!cv::imwrite(path, out)) throw IoError("cannot write image: " + path);
}

inline Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) throw InvalidConfig("to_gray expects 1 or 3 channels");
  cv::Mat gray;
  cv::cvtColor(mat_view(img), gray, cv::COLOR_RGB2GRAY);
  return from_mat(gray);
}

enum class Interp { kBilinear, kNearest };

inline Image resize_image(const Image& img, int w, int h,
                          Interp interp = Interp::kBilinear) {
  if (img.empty()) throw EmptyRegion("resize of empty image");
  if (w < 1 || h < 1) throw InvalidConfig("resize target must be positive");
  cv::Mat dst;
  cv::resize(mat_view(img), dst, cv::Size(w, h), 0, 0,
             interp == Interp::kBilinear ? cv::INTER_LINEAR
                                         : cv::INTER_NEAREST);
  return from_mat(dst);
}

// Integer crop, [x, x+w) x [y, y+h); must lie inside the image.
inline Image crop_image(const Image& img, int x, int y, int w, int h) {
  if (w < 1 || h < 1) throw EmptyRegion("crop region is empty");
  if (x < 0 || y < 0 || x + w > img.width || y + h > img.height)
    throw DimensionMismatch("crop region outside image bounds");
  return from_mat(mat_view(img)(cv::Rect(x, y, w, h)).clone());
}

inline Image gaussian_blur(const Image& img, double sigma) {
  cv::Mat dst;
  cv::GaussianBlur(mat_view(img), dst, cv::Size(0, 0), sigma);
  return from_mat(dst);
}

inline Image flip_horizontal(const Image& img) {
  cv::Mat dst;
  cv::flip(mat_view(img), dst, 1);
  return from_mat(dst);
}

// Two registered same-sized 3-channel images plus the affine transform that
// registered the design onto the photo's frame.
struct AlignedPair {
  Image design;
  Image photo;
  Affine transform;
  std::string pair_id;

  void validate() const {
    if (design.channels != 3 || photo.channels != 3)
      throw DimensionMismatch("aligned pair images must be 3-channel");
    if (!design.same_shape(photo))
      throw DimensionMismatch("aligned pair images must share dimensions");
  }
};

}  // namespace diffspot

#endif  // DIFFSPOT_IMAGE_HPP_

#ifndef DIFFSPOT_GEOMETRY_HPP_
#define DIFFSPOT_GEOMETRY_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "diffspot/common.hpp"

namespace diffspot {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Axis-aligned box in pixel coordinates, corners (x1,y1) top-left and
// (x2,y2) bottom-right exclusive of nothing: plain continuous coordinates.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }
};

// A difference region: box plus confidence score in [0,1]. Serves both as
// ground-truth annotation (score 1) and detector output.
struct DiffBox {
  Box box;
  double score = 1.0;
};

inline Box clip_box(const Box& b, double w, double h) {
  return Box{std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h),
             std::clamp(b.x2, 0.0, w), std::clamp(b.y2, 0.0, h)};
}

inline bool box_inside(const Box& b, double w, double h) {
  return b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w && b.y2 <= h;
}

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Quadrilateral, corners ordered clockwise starting from the top-left.
struct Quad {
  std::array<Point, 4> corners;

  Box bounding_box() const {
    Box b{corners[0].x, corners[0].y, corners[0].x, corners[0].y};
    for (const Point& p : corners) {
      b.x1 = std::min(b.x1, p.x);
      b.y1 = std::min(b.y1, p.y);
      b.x2 = std::max(b.x2, p.x);
      b.y2 = std::max(b.y2, p.y);
    }
    return b;
  }

  // Signed area via the shoelace formula (positive for clockwise order in
  // image coordinates, where y grows downward).
  double area() const {
    double s = 0.0;
    for (int i = 0; i < 4; ++i) {
      const Point& p = corners[i];
      const Point& q = corners[(i + 1) % 4];
      s += p.x * q.y - q.x * p.y;
    }
    return 0.5 * s;
  }
};

// 2x3 affine transform mapping source to destination coordinates:
//   [x']   [a b tx] [x]
//   [y'] = [c d ty] [y]
struct Affine {
  double a = 1.0, b = 0.0, tx = 0.0;
  double c = 0.0, d = 1.0, ty = 0.0;

  static Affine identity() { return Affine{}; }

  double det() const { return a * d - b * c; }

  Point apply(const Point& p) const {
    return Point{a * p.x + b * p.y + tx, c * p.x + d * p.y + ty};
  }

  Affine inverse() const {
    const double dt = det();
    if (dt == 0.0) throw InvalidConfig("affine transform is singular");
    Affine inv;
    inv.a = d / dt;
    inv.b = -b / dt;
    inv.c = -c / dt;
    inv.d = a / dt;
    inv.tx = -(inv.a * tx + inv.b * ty);
    inv.ty = -(inv.c * tx + inv.d * ty);
    return inv;
  }

  // this ∘ other: applies `other` first, then this.
  Affine compose(const Affine& o) const {
    Affine r;
    r.a = a * o.a + b * o.c;
    r.b = a * o.b + b * o.d;
    r.c = c * o.a + d * o.c;
    r.d = c * o.b + d * o.d;
    r.tx = a * o.tx + b * o.ty + tx;
    r.ty = c * o.tx + d * o.ty + ty;
    return r;
  }

  static Affine rotation_about(double cx, double cy, double radians,
                               double scale = 1.0) {
    const double ca = std::cos(radians) * scale;
    const double sa = std::sin(radians) * scale;
    Affine t;
    t.a = ca;
    t.b = -sa;
    t.c = sa;
    t.d = ca;
    t.tx = cx - ca * cx + sa * cy;
    t.ty = cy - sa * cx - ca * cy;
    return t;
  }
};

}  // namespace diffspot

#endif  // DIFFSPOT_GEOMETRY_HPP_

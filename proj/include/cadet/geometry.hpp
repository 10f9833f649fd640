#pragma once

#include <algorithm>
#include <string>

namespace cadet {

// Axis-aligned box in corner form, continuous pixel coordinates.
struct BoundingBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  BoundingBox() = default;
  BoundingBox(double x0, double y0, double x1, double y1)
      : x_min(x0), y_min(y0), x_max(x1), y_max(y1) {}

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return (x_min + x_max) / 2; }
  double center_y() const { return (y_min + y_max) / 2; }

  bool valid() const { return x_max >= x_min && y_max >= y_min; }

  static BoundingBox from_center(double cx, double cy, double w, double h) {
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  }

  bool operator==(const BoundingBox& o) const {
    return x_min == o.x_min && y_min == o.y_min && x_max == o.x_max &&
           y_max == o.y_max;
  }
};

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
  double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (w <= 0 || h <= 0) return 0;
  return w * h;
}

// Intersection over union. Degenerate boxes score 0 against everything;
// a fully degenerate pair (union area 0) also scores 0.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  double inter = intersection_area(a, b);
  double uni = a.area() + b.area() - inter;
  if (inter <= 0 || uni <= 0) return 0;
  return inter / uni;
}

enum class SizeBucket { kSmall, kMedium, kLarge };

// COCO-convention area thresholds 32^2 / 96^2.
inline SizeBucket size_bucket(const BoundingBox& box) {
  double a = box.area();
  if (a < 32.0 * 32.0) return SizeBucket::kSmall;
  if (a > 96.0 * 96.0) return SizeBucket::kLarge;
  return SizeBucket::kMedium;
}

inline std::string to_string(SizeBucket b) {
  switch (b) {
    case SizeBucket::kSmall: return "small";
    case SizeBucket::kMedium: return "medium";
    default: return "large";
  }
}

inline BoundingBox clip_box(const BoundingBox& box, double width,
                            double height) {
  auto clamp = [](double v, double lo, double hi) {
    return std::min(std::max(v, lo), hi);
  };
  return {clamp(box.x_min, 0.0, width), clamp(box.y_min, 0.0, height),
          clamp(box.x_max, 0.0, width), clamp(box.y_max, 0.0, height)};
}

}  // namespace cadet

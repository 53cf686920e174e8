#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

namespace mmcdet {

// Axis-aligned box in pixel coordinates, (x1, y1) inclusive corner and
// (x2, y2) exclusive corner.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }
  bool inside(double w, double h) const { return x1 >= 0 && y1 >= 0 && x2 <= w && y2 <= h; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Box clip_box(const Box& b, double w, double h) {
  return {std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h), std::clamp(b.x2, 0.0, w),
          std::clamp(b.y2, 0.0, h)};
}

// Faster R-CNN box parameterisation of `target` relative to `anchor`.
inline std::array<double, 4> encode_box_delta(const Box& anchor, const Box& target) {
  return {(target.cx() - anchor.cx()) / anchor.width(), (target.cy() - anchor.cy()) / anchor.height(),
          std::log(target.width() / anchor.width()), std::log(target.height() / anchor.height())};
}

inline Box decode_box_delta(const Box& anchor, const std::array<double, 4>& d) {
  constexpr double kMaxLog = 2.0;  // exp(2) ~ 7.4x scale clamp
  const double cx = anchor.cx() + d[0] * anchor.width();
  const double cy = anchor.cy() + d[1] * anchor.height();
  const double w = anchor.width() * std::exp(std::min(d[2], kMaxLog));
  const double h = anchor.height() * std::exp(std::min(d[3], kMaxLog));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// Greedy non-maximum suppression; returns kept indices in descending score
// order. Equal scores keep the lower index first.
inline std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                            double iou_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> keep;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int i : order) {
    if (suppressed[i]) continue;
    keep.push_back(i);
    for (int j : order) {
      if (!suppressed[j] && j != i && iou(boxes[i], boxes[j]) > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

}  // namespace mmcdet

#ifndef WEAKVOC_BOX_HPP
#define WEAKVOC_BOX_HPP

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace weakvoc {

/// Axis-aligned rectangle in pixel coordinates, (x1, y1) top-left, (x2, y2) bottom-right.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool valid() const { return width() > 0 && height() > 0; }

  friend bool operator==(const Box&, const Box&) = default;
};

double intersection_area(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);
/// |target ∩ region| / |target|; 0 for an empty target.
double intersection_over_area(const Box& target, const Box& region);

Box clip(const Box& b, double width, double height);
Box scale(const Box& b, double s);
Box hflip(const Box& b, double image_width);

/// Greedy non-maximum suppression. Candidates are visited by descending score,
/// ties broken by lower index; a candidate is suppressed when its IoU with an
/// already kept box exceeds `iou_thresh`. Returns kept indices in visit order.
std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_thresh,
                             std::size_t max_keep = std::numeric_limits<std::size_t>::max());

/// Indices sorting `scores` descending, ties by ascending index.
std::vector<std::size_t> argsort_descending(std::span<const double> scores);

}  // namespace weakvoc

#endif  // WEAKVOC_BOX_HPP

#include "weakvoc/box.hpp"

#include <algorithm>
#include <numeric>

namespace weakvoc {

double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double intersection_over_area(const Box& target, const Box& region) {
  const double area = target.area();
  return area > 0 ? intersection_area(target, region) / area : 0.0;
}

Box clip(const Box& b, double width, double height) {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
          std::clamp(b.y2, 0.0, height)};
}

Box scale(const Box& b, double s) { return {b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s}; }

Box hflip(const Box& b, double image_width) { return {image_width - b.x2, b.y1, image_width - b.x1, b.y2}; }

std::vector<std::size_t> argsort_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_thresh,
                             std::size_t max_keep) {
  std::vector<std::size_t> keep;
  std::vector<bool> suppressed(boxes.size(), false);
  for (std::size_t i : argsort_descending(scores)) {
    if (suppressed[i]) continue;
    keep.push_back(i);
    if (keep.size() >= max_keep) break;
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (!suppressed[j] && j != i && iou(boxes[i], boxes[j]) > iou_thresh) suppressed[j] = true;
    }
  }
  return keep;
}

}  // namespace weakvoc

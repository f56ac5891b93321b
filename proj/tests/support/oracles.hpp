#ifndef WEAKVOC_TESTS_ORACLES_HPP
#define WEAKVOC_TESTS_ORACLES_HPP

// Brute-force references, written without the library's algorithms.

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "weakvoc/box.hpp"

namespace weakvoc::testing {

// Repeatedly extract the best remaining box (lowest index on ties) and drop
// everything overlapping it by more than the threshold.
inline std::vector<std::size_t> nms_oracle(const std::vector<Box>& boxes, const std::vector<double>& scores,
                                           double thr) {
  std::vector<bool> alive(boxes.size(), true);
  std::vector<std::size_t> keep;
  while (true) {
    int best = -1;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (alive[i] && (best < 0 || scores[i] > scores[static_cast<std::size_t>(best)])) best = static_cast<int>(i);
    }
    if (best < 0) break;
    const auto b = static_cast<std::size_t>(best);
    keep.push_back(b);
    alive[b] = false;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (alive[i] && iou(boxes[i], boxes[b]) > thr) alive[i] = false;
    }
  }
  return keep;
}

// The DLWL peak set is the unique subset in which a proposal is a peak exactly
// when no higher-priority peak overlaps it; found by enumerating all subsets.
inline std::vector<std::size_t> dlwl_oracle(const std::vector<Box>& boxes, const std::vector<double>& s, double thr,
                                            int topk) {
  const std::size_t n = boxes.size();
  auto higher = [&](std::size_t a, std::size_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); };
  std::vector<std::size_t> found;
  int solutions = 0;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    bool ok = true;
    for (std::size_t j = 0; j < n && ok; ++j) {
      bool covered = false;
      for (std::size_t p = 0; p < n; ++p) {
        if ((mask >> p & 1u) && higher(p, j) && iou(boxes[p], boxes[j]) >= thr) covered = true;
      }
      const bool in = mask >> j & 1u;
      ok = in != covered;
    }
    if (!ok) continue;
    ++solutions;
    found.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (mask >> j & 1u) found.push_back(j);
    }
  }
  if (solutions != 1) throw std::logic_error("dlwl_oracle: peak set is not unique");
  std::sort(found.begin(), found.end(), higher);
  if (static_cast<int>(found.size()) > topk) found.resize(static_cast<std::size_t>(topk));
  return found;
}

struct OracleDet {
  int image;
  Box box;
  double score;
};

struct OracleGt {
  int image;
  Box box;
};

// AP by sweeping every score threshold. For each threshold t the detections
// scoring >= t are matched greedily (score order, best-IoU free gt of the same
// image); the interpolated precision at recall r is the best precision of any
// threshold reaching recall >= r, integrated exactly over the recall steps.
// Assumes distinct scores.
inline double ap_oracle(const std::vector<OracleDet>& dets, const std::vector<OracleGt>& gts, double thr) {
  std::set<double> thresholds;
  for (const auto& d : dets) thresholds.insert(d.score);
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  for (double t : thresholds) {
    std::vector<OracleDet> kept;
    for (const auto& d : dets) {
      if (d.score >= t) kept.push_back(d);
    }
    std::sort(kept.begin(), kept.end(), [](const OracleDet& a, const OracleDet& b) { return a.score > b.score; });
    std::vector<bool> used(gts.size(), false);
    int tp = 0;
    for (const auto& d : kept) {
      int best = -1;
      double best_iou = thr;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (used[g] || gts[g].image != d.image) continue;
        const double o = iou(d.box, gts[g].box);
        if (o >= best_iou && (best < 0 || o > best_iou)) {
          best = static_cast<int>(g);
          best_iou = o;
        }
      }
      if (best >= 0) {
        used[static_cast<std::size_t>(best)] = true;
        ++tp;
      }
    }
    pr.emplace_back(static_cast<double>(tp) / static_cast<double>(gts.size()),
                    kept.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(kept.size()));
  }
  std::set<double> recalls;
  for (const auto& [r, p] : pr) {
    if (r > 0) recalls.insert(r);
  }
  double ap = 0.0, prev = 0.0;
  for (double r : recalls) {
    double best = 0.0;
    for (const auto& [rr, p] : pr) {
      if (rr >= r) best = std::max(best, p);
    }
    ap += (r - prev) * best;
    prev = r;
  }
  return ap;
}

}  // namespace weakvoc::testing

#endif  // WEAKVOC_TESTS_ORACLES_HPP

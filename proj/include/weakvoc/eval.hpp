#ifndef WEAKVOC_EVAL_HPP
#define WEAKVOC_EVAL_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "weakvoc/losses.hpp"

namespace weakvoc::eval {

/// One detection of a single class, tagged with its image.
struct ScoredBox {
  int image = 0;
  Box box;
  double score = 0.0;
};

struct GtBox {
  int image = 0;
  Box box;
};

/// Greedy matching (score descending, stable; each detection takes the
/// highest-IoU unmatched gt of its image at IoU >= thresh, lowest index on
/// ties), then all-point interpolated AP over the precision envelope.
/// Returns nullopt when there is no gt.
std::optional<double> average_precision(std::span<const ScoredBox> dets, std::span<const GtBox> gts,
                                        double iou_thresh);
/// Mean AP over IoU thresholds 0.50:0.05:0.95.
std::optional<double> coco_ap(std::span<const ScoredBox> dets, std::span<const GtBox> gts);

struct GroupedMaps {
  double map_all = 0.0, map_base = 0.0, map_novel = 0.0;
  double ap50_all = 0.0, ap50_base = 0.0, ap50_novel = 0.0;
  /// Class id → AP (0.5:0.95) and AP50, for classes with test gt only.
  std::map<int, double> per_class_ap;
  std::map<int, double> per_class_ap50;
  /// Classes left out of every mean because the test split has none of them.
  std::vector<int> classes_without_gt;
};

/// Generalized evaluation: `dets[i]` holds every class scored on image i.
GroupedMaps map_breakdown(std::span<const std::vector<det::Detection>> dets,
                          std::span<const std::vector<data::SceneObject>> gts, const data::Vocabulary& vocab);

struct Recall {
  double recall = 0.0;
  int num_gt = 0;
};

/// Fraction of gt boxes of the selected classes hit by at least one of the
/// first k proposals at IoU >= iou. `classes` empty → all gt.
Recall proposal_recall(std::span<const std::vector<Box>> proposals,
                       std::span<const std::vector<data::SceneObject>> gts, int k, double iou_thresh,
                       std::span<const int> classes = {});

struct CoverStats {
  /// covered / total with IoA normalized by the gt box (primary).
  double rate = 0.0;
  /// Same test with IoA normalized by the assigned region.
  double rate_assigned_normalized = 0.0;
  int covered = 0;
  int total = 0;
  /// Records whose label has no gt instance in the image.
  int excluded = 0;
};

/// A label is covered when some gt box of that class in the image has
/// |gt ∩ assigned| / |gt| > 0.5. `images[image_id]` supplies the gt.
CoverStats cover_rate(std::span<const loss::AssignmentRecord> records,
                      std::span<const std::vector<data::SceneObject>> images);

struct ConsistencyStats {
  double mean_iou = 0.0;
  int pairs = 0;
  /// (image, label) pairs present in only one of the two logs.
  int missing = 0;
};

ConsistencyStats consistency(std::span<const loss::AssignmentRecord> half,
                             std::span<const loss::AssignmentRecord> final);

/// Records grouped by strategy name.
std::map<std::string, std::vector<loss::AssignmentRecord>> by_strategy(
    std::span<const loss::AssignmentRecord> records);

struct EvalConfig {
  std::vector<int> recall_ks = {1, 4, 8, 16, 32};
  double recall_iou = 0.5;
  int max_detections = 100;
  double score_thresh = 0.05;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

struct MetricsReport {
  GroupedMaps maps;
  /// group ("all" | "base" | "novel") → k → AR50@k.
  std::map<std::string, std::map<int, double>> ar;
  std::map<std::string, CoverStats> cover;
  std::map<std::string, ConsistencyStats> consistency;
  int test_images = 0;
  int gt_boxes = 0;
  int detections = 0;
};

/// Runs inference and proposal generation over `test`; parallel per image.
MetricsReport evaluate(const det::Detector& model, std::span<const data::Sample> test, const data::Vocabulary& vocab,
                       const EvalConfig& config);

/// Adds cover-rate and consistency for each strategy found in the logs.
/// `images` is the split the probe image ids index into.
void add_assignment_diagnostics(MetricsReport& report, std::span<const loss::AssignmentRecord> half,
                                std::span<const loss::AssignmentRecord> final,
                                std::span<const data::Sample> images);

nlohmann::json report_json(const MetricsReport& report, const data::Vocabulary& vocab);
/// One row per metric: name,group,value.
std::string metrics_csv(const MetricsReport& report, const data::Vocabulary& vocab);
void write_report(const std::filesystem::path& dir, const MetricsReport& report, const data::Vocabulary& vocab);

}  // namespace weakvoc::eval

#endif  // WEAKVOC_EVAL_HPP

#ifndef WEAKVOC_LOSSES_HPP
#define WEAKVOC_LOSSES_HPP

#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "weakvoc/detector.hpp"

namespace weakvoc::loss {

enum class WeakVariant {
  none,
  max_size,
  image_box,
  max_object_score,
  predicted,
  wsddn,
  dlwl,
  self_train,
  self_train_filtered,
  caption,
  caption_labels,
};

std::string variant_name(WeakVariant v);
/// Accepts the canonical names plus "max-obj-score".
WeakVariant parse_variant(const std::string& name);
std::vector<std::string> variant_names();
/// Variants that pick a proposal per label and therefore log assignments.
bool logs_assignments(WeakVariant v);

struct LossConfig {
  double lambda_weak = 0.1;
  /// Weight of the caption loss; negative means "same as lambda_weak".
  double lambda_caption = -1.0;
  int federated_sample = 10;
  bool federated = true;
  WeakVariant variant = WeakVariant::max_size;
  int dlwl_topk = 3;
  double dlwl_cluster_iou = 0.5;
  double self_train_thresh = 0.5;
  bool shared_classifier = true;
  double roi_match_iou = 0.5;

  double caption_weight() const { return lambda_caption < 0 ? lambda_weak : lambda_caption; }
  void validate(int num_classes) const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

/// One label-to-box assignment made by a weak loss.
struct AssignmentRecord {
  int image_id = 0;
  int label = 0;
  Box box;
  std::string strategy;
  int step = 0;
};

void to_json(nlohmann::json& j, const AssignmentRecord& r);
void from_json(const nlohmann::json& j, AssignmentRecord& r);

// ---------------------------------------------------------------------------
// Federated class sampling

/// `m` classes drawn uniformly without replacement, united with `positives`;
/// sorted. With m >= num_classes every class is returned.
std::vector<int> federated_classes(int num_classes, int m, std::span<const int> positives, std::mt19937_64& rng);
/// Draws only the shared uniform part of a step's federated sample.
std::vector<int> sample_classes(int num_classes, int m, std::mt19937_64& rng);
/// shared ∪ positives, sorted.
std::vector<int> with_positives(std::span<const int> shared, std::span<const int> positives);
/// `m` ids drawn uniformly without replacement from `vocabulary`; sorted.
std::vector<int> sample_from(std::span<const int> vocabulary, int m, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Selectors (ties → lowest proposal index)

std::size_t select_max_size(std::span<const Box> boxes);
std::size_t select_max_objectness(std::span<const double> objectness);
std::size_t select_predicted(std::span<const double> class_logits);
/// Greedy clustering by descending score: a proposal joins the best-scoring
/// existing peak it overlaps with IoU >= iou_thresh, otherwise it becomes a
/// new peak. Returns up to `topk` peaks, highest score first.
std::vector<std::size_t> dlwl_peaks(std::span<const Box> boxes, std::span<const double> class_logits,
                                    double iou_thresh, int topk);

// ---------------------------------------------------------------------------
// Weak losses

/// (row of the logit matrix, positive label, weight).
struct Assignment {
  Index row = 0;
  int label = 0;
  double weight = 1.0;
};

/// Σ_a w_a · BCE(S_row, label): the label is the positive; every class in
/// `class_set` outside `labels` is a negative; other image labels are ignored.
/// logits: n × |class_set|, columns ordered as class_set.
ad::Var assigned_bce(ad::Var logits, std::span<const int> class_set, std::span<const int> labels,
                     std::span<const Assignment> assignments);

struct WeakLoss {
  ad::Var loss;  // invalid when skipped
  std::vector<Assignment> assignments;
  bool skipped = false;
};

WeakLoss weak_max_size(std::span<const det::Proposal> proposals, ad::Var logits, std::span<const int> class_set,
                       std::span<const int> labels);
WeakLoss weak_max_objectness(std::span<const det::Proposal> proposals, ad::Var logits,
                             std::span<const int> class_set, std::span<const int> labels);
/// logits: 1 × |class_set| for the injected whole-image box.
WeakLoss weak_image_box(ad::Var image_box_logits, std::span<const int> class_set, std::span<const int> labels);
WeakLoss weak_predicted(std::span<const det::Proposal> proposals, ad::Var logits, std::span<const int> class_set,
                        std::span<const int> labels);
/// Image score per class Σ_j softmax_j(weighting)[j,c] · S[j,c], then BCE.
WeakLoss weak_wsddn(std::span<const det::Proposal> proposals, ad::Var logits, ad::Var weighting_logits,
                    std::span<const int> class_set, std::span<const int> labels);
/// Mean BCE over the top-k cluster peaks of each label.
WeakLoss weak_dlwl(std::span<const det::Proposal> proposals, ad::Var logits, std::span<const int> class_set,
                   std::span<const int> labels, int topk, double iou_thresh);

/// Σ_i BCE(τ · cos(f_i, caption_j), target j = i). Caption embeddings are
/// detached; B = 1 is allowed but has no in-batch negatives.
ad::Var caption_loss(ad::Var image_features, ad::Var caption_embeddings, double temperature);

/// Detections scoring above `thresh`; with `filtered`, only classes in `labels`.
std::vector<det::Detection> filter_pseudo_labels(const std::vector<det::Detection>& dets,
                                                 std::span<const int> labels, double thresh, bool filtered);
std::vector<det::Detection> self_train_pseudo(const det::Detector& teacher, const Tensor& image,
                                              std::span<const int> labels, double thresh, bool filtered);

// ---------------------------------------------------------------------------
// Supervised detection losses

struct RpnTargets {
  Tensor objectness;  // h×w, {0,1}
  Tensor distances;   // 4×h×w, stride units, zero at negatives
  Tensor mask;        // 4×h×w, 1 at positive cells
  int num_positive = 0;
};

/// Cell positive iff its centre lies strictly inside a box; the smallest such
/// box (lowest index on ties) supplies the side distances.
RpnTargets rpn_targets(std::span<const Box> gt, Index h, Index w, int stride);

/// Index of the highest-IoU gt with IoU >= thresh per RoI (lowest on ties), or -1.
std::vector<int> match_rois(std::span<const Box> rois, std::span<const Box> gt, double iou_thresh);

/// Σ |deltas − encode(roi, target)| / n over n RoIs.
ad::Var regression_l1(ad::Var deltas, std::span<const Box> rois, std::span<const Box> targets);

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> classes;
};

struct DetLosses {
  ad::Var rpn;
  ad::Var reg;
  ad::Var cls;
  int num_rois = 0;
  int num_positive_rois = 0;
};

/// L_rpn (objectness BCE averaged over cells + L1 over positive cells), L_reg
/// (L1 over RoIs matched at IoU >= roi_match_iou) and L_cls (BCE summed over
/// each image's federated classes, averaged over RoIs). RoIs are the decoded
/// proposals plus the gt boxes. Each term is averaged over the images.
DetLosses detection_losses(const det::Graph& graph, ad::Var featmaps, const det::RpnOutputs& rpn,
                           std::span<const GroundTruth> gts, std::span<const std::vector<int>> fed_classes,
                           double image_w, double image_h, const LossConfig& config);

// ---------------------------------------------------------------------------
// Step objective

struct BatchImage {
  Tensor image;  // 3×H×W
  int image_id = 0;
  data::SampleKind kind = data::SampleKind::detection;
  GroundTruth gt;           // detection images
  std::vector<int> labels;  // weak images (parsed from the caption for caption images)
  std::string caption;
  /// How `image` was derived from the stored sample, to map boxes back.
  double scale = 1.0;
  bool flipped = false;
};

struct StepBatch {
  std::vector<BatchImage> det;
  std::vector<BatchImage> weak;
  /// Shared uniform class samples for this step. Detection images only know
  /// the base vocabulary (empty → every base class); weak images the full one
  /// (empty → every class).
  std::vector<int> det_fed_sample;
  std::vector<int> weak_fed_sample;
};

struct StepLoss {
  ad::Var total;
  std::map<std::string, double> terms;
  std::vector<AssignmentRecord> assignments;
  int skipped_images = 0;
  int caption_batches_without_negatives = 0;
};

/// Detection images: L_rpn + L_reg + L_cls (mean over the det sub-batch).
/// Weak images: λ · mean weak loss, classification only. Self-training
/// variants turn the teacher's pseudo boxes into detection targets.
StepLoss total_loss(const det::Graph& graph, const StepBatch& batch, const LossConfig& config,
                    const data::Vocabulary& vocab, const det::Detector* teacher = nullptr, int step = 0);

}  // namespace weakvoc::loss

#endif  // WEAKVOC_LOSSES_HPP

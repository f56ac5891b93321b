#ifndef WEAKVOC_DETECTOR_HPP
#define WEAKVOC_DETECTOR_HPP

#include <array>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "weakvoc/autodiff.hpp"
#include "weakvoc/box.hpp"
#include "weakvoc/embeddings.hpp"
#include "weakvoc/params.hpp"
#include "weakvoc/synthdata.hpp"

namespace weakvoc::det {

struct DetectorConfig {
  std::array<int, 3> backbone_channels = {16, 32, 32};
  int stride = 8;
  int roi_grid = 3;
  int roi_hidden = 128;
  int top_n = 32;
  double proposal_nms = 0.7;
  double class_nms = 0.5;
  double score_thresh = 0.05;
  int max_detections = 100;
  /// Final score = sigmoid(logit) · objectness when true, sigmoid(logit) otherwise.
  bool multiply_objectness = true;
  embed::EmbeddingMode embedding = embed::EmbeddingMode::attribute;
  /// Feature dimension in trained mode; attribute mode uses |shapes| + |colors|.
  int trained_dim = 11;
  double temperature = 10.0;
  /// Initial proposal side distance, in units of the stride.
  double init_distance = 1.5;
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

/// Candidate region; `objectness` is post-sigmoid.
struct Proposal {
  Box box;
  double objectness = 0.0;
  Index cell = 0;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Two-stage detector parameters and architecture.
///
/// Backbone: three 3×3 stride-2 conv+relu stages (stride 8 overall).
/// Proposal head: 3×3 conv+relu, then a 1×1 conv to one objectness logit and
/// four relu side distances per cell. RoI head: bilinear P×P pooling, then a
/// two-layer MLP to the embedding dimension D. The classifier is the class
/// embedding matrix; box regression is one class-agnostic 4×D map.
class Detector {
 public:
  Detector(DetectorConfig config, const data::Vocabulary& vocab, std::uint64_t seed);

  const DetectorConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  Index feature_dim() const { return feature_dim_; }
  int num_classes() const { return num_classes_; }
  int feature_channels() const { return config_.backbone_channels[2]; }

 private:
  DetectorConfig config_;
  ParameterSet params_;
  Index feature_dim_;
  int num_classes_;
};

struct RpnOutputs {
  ad::Var objectness;  // N×1×h×w logits
  ad::Var distances;   // N×4×h×w, relu-activated, stride units
};

/// Detector forward pieces bound onto one tape.
class Graph {
 public:
  Graph(ad::Tape& tape, const Detector& model, bool track_grads);

  ad::Tape& tape() const { return *tape_; }
  const Detector& model() const { return *model_; }
  const BoundParameters& params() const { return params_; }

  /// images N×3×H×W (or 3×H×W) → N×Cf×H/8×W/8.
  ad::Var backbone(ad::Var images) const;
  RpnOutputs rpn(ad::Var featmaps) const;
  /// Pooled features of `boxes` on one C×h×w map → n×D (not normalized).
  ad::Var roi_features(ad::Var featmap, std::span<const Box> boxes) const;
  /// Same pooling routed through the independent weak-data head.
  ad::Var separate_roi_features(ad::Var featmap, std::span<const Box> boxes) const;
  /// τ · cos(f_j, W_c) for all classes or only `subset` columns.
  ad::Var classify(ad::Var features, std::optional<std::span<const int>> subset = std::nullopt) const;
  /// Class-agnostic deltas f · Bᵀ, n×4.
  ad::Var box_deltas(ad::Var features) const;
  /// n×|C| proposal weighting logits used by WSDDN, f · W'ᵀ.
  ad::Var wsddn_logits(ad::Var features) const;

 private:
  ad::Tape* tape_;
  const Detector* model_;
  BoundParameters params_;
};

/// Free-function form of the classifier: τ · normalize(f) · normalize(W[subset])ᵀ.
ad::Var classify(ad::Var features, ad::Var class_weights, double temperature,
                 std::optional<std::span<const int>> subset = std::nullopt);

/// Decodes one image's head outputs into at most `top_n` proposals after NMS.
/// objectness: h×w logits, distances: 4×h×w. Ties in objectness resolve to
/// the lower row-major cell index.
std::vector<Proposal> decode_proposals(std::span<const double> objectness_logits, std::span<const double> distances,
                                       Index h, Index w, int stride, double image_w, double image_h, int top_n,
                                       double nms_iou);

/// Runs backbone + proposal head on one image and decodes.
std::vector<Proposal> propose(const Detector& model, const Tensor& image, int top_n, double nms_iou);

/// The whole image as a box.
Box inject_image_box(double image_w, double image_h);

/// (dx, dy, dw, dh): centre offsets relative to size, log size ratios.
std::array<double, 4> encode_deltas(const Box& from, const Box& to);
Box apply_deltas(const Box& box, std::span<const double> deltas, double image_w, double image_h);

/// Class-wise greedy NMS over detections; returns survivors sorted by score.
std::vector<Detection> per_class_nms(const std::vector<Detection>& dets, double iou_thresh);

struct InferenceOptions {
  double score_thresh = 0.05;
  double class_nms = 0.5;
  int max_detections = 100;
};

/// propose → RoI head → classify all classes → regress → per-class NMS.
std::vector<Detection> infer(const Detector& model, const Tensor& image, const InferenceOptions& options);
std::vector<Detection> infer(const Detector& model, const Tensor& image);

}  // namespace weakvoc::det

#endif  // WEAKVOC_DETECTOR_HPP

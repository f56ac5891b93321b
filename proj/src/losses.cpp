#include "weakvoc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace weakvoc::loss {

namespace {

struct VariantName {
  WeakVariant variant;
  const char* name;
};

constexpr VariantName kVariants[] = {
    {WeakVariant::none, "none"},
    {WeakVariant::max_size, "max-size"},
    {WeakVariant::image_box, "image-box"},
    {WeakVariant::max_object_score, "max-object-score"},
    {WeakVariant::predicted, "predicted"},
    {WeakVariant::wsddn, "wsddn"},
    {WeakVariant::dlwl, "dlwl"},
    {WeakVariant::self_train, "self-train"},
    {WeakVariant::self_train_filtered, "self-train-filtered"},
    {WeakVariant::caption, "caption"},
    {WeakVariant::caption_labels, "caption+labels"},
};

ad::Var zero(ad::Tape& tape) { return tape.constant(Tensor::scalar(0.0)); }

std::vector<Index> column_index(std::span<const int> class_set) {
  std::vector<Index> cols;
  for (int c : class_set) cols.push_back(c);
  return cols;
}

Index column_of(std::span<const int> class_set, int label) {
  auto it = std::find(class_set.begin(), class_set.end(), label);
  if (it == class_set.end()) {
    throw ValidationError("label " + std::to_string(label) + " is not in the class set");
  }
  return static_cast<Index>(it - class_set.begin());
}

void check_weak_inputs(ad::Var logits, std::span<const int> class_set, std::size_t proposals) {
  if (logits.value().rank() != 2 || logits.dim(1) != static_cast<Index>(class_set.size())) {
    throw DimensionError("weak loss: logits " + shape_string(logits.shape()) + " do not match " +
                         std::to_string(class_set.size()) + " classes");
  }
  if (proposals != 0 && logits.dim(0) != static_cast<Index>(proposals)) {
    throw DimensionError("weak loss: " + std::to_string(logits.dim(0)) + " logit rows for " +
                         std::to_string(proposals) + " proposals");
  }
}

std::vector<double> column_values(ad::Var logits, Index col) {
  const auto m = logits.value().matrix();
  std::vector<double> v(static_cast<std::size_t>(m.rows()));
  for (Index j = 0; j < m.rows(); ++j) v[static_cast<std::size_t>(j)] = m(j, col);
  return v;
}

std::vector<Box> boxes_of(std::span<const det::Proposal> proposals) {
  std::vector<Box> boxes;
  for (const auto& p : proposals) boxes.push_back(p.box);
  return boxes;
}

WeakLoss single_row(std::size_t row, ad::Var logits, std::span<const int> class_set, std::span<const int> labels) {
  WeakLoss out;
  for (int c : labels) out.assignments.push_back({static_cast<Index>(row), c, 1.0});
  out.loss = assigned_bce(logits, class_set, labels, out.assignments);
  return out;
}

WeakLoss skipped() {
  WeakLoss out;
  out.skipped = true;
  return out;
}

// Priority order used by every selector: larger value first, lower index on ties.
bool before(const std::vector<double>& v, std::size_t a, std::size_t b) {
  return v[a] > v[b] || (v[a] == v[b] && a < b);
}

}  // namespace

std::string variant_name(WeakVariant v) {
  for (const auto& e : kVariants) {
    if (e.variant == v) return e.name;
  }
  throw ConfigError("unknown weak variant");
}

WeakVariant parse_variant(const std::string& name) {
  if (name == "max-obj-score") return WeakVariant::max_object_score;
  for (const auto& e : kVariants) {
    if (name == e.name) return e.variant;
  }
  std::string valid;
  for (const auto& n : variant_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown weak variant '" + name + "' (valid: " + valid + ")");
}

std::vector<std::string> variant_names() {
  std::vector<std::string> out;
  for (const auto& e : kVariants) out.emplace_back(e.name);
  return out;
}

bool logs_assignments(WeakVariant v) {
  switch (v) {
    case WeakVariant::max_size:
    case WeakVariant::image_box:
    case WeakVariant::max_object_score:
    case WeakVariant::predicted:
    case WeakVariant::dlwl:
    case WeakVariant::caption_labels:
      return true;
    default:
      return false;
  }
}

void LossConfig::validate(int num_classes) const {
  if (!(lambda_weak >= 0)) throw ConfigError("lambda_weak must be >= 0");
  if (federated_sample < 0 || federated_sample > num_classes) {
    throw ConfigError("federated_sample must lie in [0, " + std::to_string(num_classes) + "]");
  }
  if (dlwl_topk < 1) throw ConfigError("dlwl_topk must be >= 1");
  if (dlwl_cluster_iou < 0 || dlwl_cluster_iou > 1) throw ConfigError("dlwl_cluster_iou must lie in [0, 1]");
  if (roi_match_iou <= 0 || roi_match_iou > 1) throw ConfigError("roi_match_iou must lie in (0, 1]");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"lambda_weak", c.lambda_weak},
       {"lambda_caption", c.lambda_caption},
       {"federated_sample", c.federated_sample},
       {"federated", c.federated},
       {"weak_variant", variant_name(c.variant)},
       {"dlwl_topk", c.dlwl_topk},
       {"dlwl_cluster_iou", c.dlwl_cluster_iou},
       {"self_train_thresh", c.self_train_thresh},
       {"shared_classifier", c.shared_classifier},
       {"roi_match_iou", c.roi_match_iou}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  c.lambda_weak = j.value("lambda_weak", c.lambda_weak);
  c.lambda_caption = j.value("lambda_caption", c.lambda_caption);
  c.federated_sample = j.value("federated_sample", c.federated_sample);
  c.federated = j.value("federated", c.federated);
  if (j.contains("weak_variant")) c.variant = parse_variant(j.at("weak_variant").get<std::string>());
  c.dlwl_topk = j.value("dlwl_topk", c.dlwl_topk);
  c.dlwl_cluster_iou = j.value("dlwl_cluster_iou", c.dlwl_cluster_iou);
  c.self_train_thresh = j.value("self_train_thresh", c.self_train_thresh);
  c.shared_classifier = j.value("shared_classifier", c.shared_classifier);
  c.roi_match_iou = j.value("roi_match_iou", c.roi_match_iou);
}

void to_json(nlohmann::json& j, const AssignmentRecord& r) {
  j = {{"image_id", r.image_id},
       {"label", r.label},
       {"box", {r.box.x1, r.box.y1, r.box.x2, r.box.y2}},
       {"strategy", r.strategy},
       {"step", r.step}};
}

void from_json(const nlohmann::json& j, AssignmentRecord& r) {
  r.image_id = j.at("image_id").get<int>();
  r.label = j.at("label").get<int>();
  const auto b = j.at("box").get<std::vector<double>>();
  if (b.size() != 4) throw ValidationError("assignment box needs 4 coordinates");
  r.box = {b[0], b[1], b[2], b[3]};
  r.strategy = j.at("strategy").get<std::string>();
  r.step = j.at("step").get<int>();
}

// ---------------------------------------------------------------------------
// Federated sampling

std::vector<int> sample_classes(int num_classes, int m, std::mt19937_64& rng) {
  std::vector<int> all(static_cast<std::size_t>(num_classes));
  std::iota(all.begin(), all.end(), 0);
  if (m >= num_classes) return all;
  // Partial Fisher-Yates: the first m slots are a uniform m-subset.
  for (int i = 0; i < m; ++i) {
    std::uniform_int_distribution<int> pick(i, num_classes - 1);
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
  }
  all.resize(static_cast<std::size_t>(std::max(m, 0)));
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<int> with_positives(std::span<const int> shared, std::span<const int> positives) {
  std::set<int> s(shared.begin(), shared.end());
  s.insert(positives.begin(), positives.end());
  return {s.begin(), s.end()};
}

std::vector<int> sample_from(std::span<const int> vocabulary, int m, std::mt19937_64& rng) {
  const int n = static_cast<int>(vocabulary.size());
  std::vector<int> out;
  for (int i : sample_classes(n, std::min(m, n), rng)) out.push_back(vocabulary[static_cast<std::size_t>(i)]);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> federated_classes(int num_classes, int m, std::span<const int> positives, std::mt19937_64& rng) {
  for (int c : positives) {
    if (c < 0 || c >= num_classes) throw ValidationError("positive class " + std::to_string(c) + " out of range");
  }
  return with_positives(sample_classes(num_classes, m, rng), positives);
}

// ---------------------------------------------------------------------------
// Selectors

std::size_t select_max_size(std::span<const Box> boxes) {
  if (boxes.empty()) throw ValidationError("select_max_size: no proposals");
  std::vector<double> area;
  for (const auto& b : boxes) area.push_back(b.area());
  return argsort_descending(area).front();
}

std::size_t select_max_objectness(std::span<const double> objectness) {
  if (objectness.empty()) throw ValidationError("select_max_objectness: no proposals");
  return static_cast<std::size_t>(
      ad::argmax(Eigen::Map<const Eigen::VectorXd>(objectness.data(), static_cast<Index>(objectness.size()))));
}

std::size_t select_predicted(std::span<const double> class_logits) {
  if (class_logits.empty()) throw ValidationError("select_predicted: no proposals");
  return static_cast<std::size_t>(
      ad::argmax(Eigen::Map<const Eigen::VectorXd>(class_logits.data(), static_cast<Index>(class_logits.size()))));
}

std::vector<std::size_t> dlwl_peaks(std::span<const Box> boxes, std::span<const double> class_logits,
                                    double iou_thresh, int topk) {
  if (boxes.size() != class_logits.size()) throw DimensionError("dlwl_peaks: boxes and logits differ in length");
  const std::vector<double> score(class_logits.begin(), class_logits.end());
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return before(score, a, b); });
  // Peaks are created in descending score order, so the first overlapping
  // peak is the best-scoring one and later members never outrank it.
  std::vector<std::size_t> peaks;
  for (std::size_t j : order) {
    const bool attached = std::any_of(peaks.begin(), peaks.end(),
                                      [&](std::size_t p) { return iou(boxes[j], boxes[p]) >= iou_thresh; });
    if (!attached) peaks.push_back(j);
  }
  if (static_cast<int>(peaks.size()) > topk) peaks.resize(static_cast<std::size_t>(topk));
  return peaks;
}

// ---------------------------------------------------------------------------
// Weak losses

ad::Var assigned_bce(ad::Var logits, std::span<const int> class_set, std::span<const int> labels,
                     std::span<const Assignment> assignments) {
  const Index n = logits.dim(0), m = logits.dim(1);
  if (m != static_cast<Index>(class_set.size())) {
    throw DimensionError("assigned_bce: " + std::to_string(m) + " logit columns for " +
                         std::to_string(class_set.size()) + " classes");
  }
  std::vector<bool> is_label(static_cast<std::size_t>(m), false);
  for (int c : labels) is_label[static_cast<std::size_t>(column_of(class_set, c))] = true;

  Tensor targets(logits.shape(), 0.0), weights(logits.shape(), 0.0);
  auto t = targets.matrix();
  auto w = weights.matrix();
  for (const auto& a : assignments) {
    if (a.row < 0 || a.row >= n) throw ValidationError("assigned_bce: row " + std::to_string(a.row) + " out of range");
    const Index col = column_of(class_set, a.label);
    if (!is_label[static_cast<std::size_t>(col)]) throw ValidationError("assigned_bce: assignment to a non-label class");
    t(a.row, col) = 1.0;
    w(a.row, col) += a.weight;
    for (Index k = 0; k < m; ++k) {
      if (!is_label[static_cast<std::size_t>(k)]) w(a.row, k) += a.weight;
    }
  }
  return ad::bce_with_logits(logits, targets, &weights);
}

WeakLoss weak_max_size(std::span<const det::Proposal> proposals, ad::Var logits, std::span<const int> class_set,
                       std::span<const int> labels) {
  if (proposals.empty() || labels.empty()) return skipped();
  check_weak_inputs(logits, class_set, proposals.size());
  return single_row(select_max_size(boxes_of(proposals)), logits, class_set, labels);
}

WeakLoss weak_max_objectness(std::span<const det::Proposal> proposals, ad::Var logits,
                             std::span<const int> class_set, std::span<const int> labels) {
  if (proposals.empty() || labels.empty()) return skipped();
  check_weak_inputs(logits, class_set, proposals.size());
  std::vector<double> obj;
  for (const auto& p : proposals) obj.push_back(p.objectness);
  return single_row(select_max_objectness(obj), logits, class_set, labels);
}

WeakLoss weak_image_box(ad::Var image_box_logits, std::span<const int> class_set, std::span<const int> labels) {
  if (labels.empty()) return skipped();
  check_weak_inputs(image_box_logits, class_set, 1);
  return single_row(0, image_box_logits, class_set, labels);
}

WeakLoss weak_predicted(std::span<const det::Proposal> proposals, ad::Var logits, std::span<const int> class_set,
                        std::span<const int> labels) {
  if (proposals.empty() || labels.empty()) return skipped();
  check_weak_inputs(logits, class_set, proposals.size());
  WeakLoss out;
  for (int c : labels) {
    const auto col = column_values(logits, column_of(class_set, c));
    out.assignments.push_back({static_cast<Index>(select_predicted(col)), c, 1.0});
  }
  out.loss = assigned_bce(logits, class_set, labels, out.assignments);
  return out;
}

WeakLoss weak_wsddn(std::span<const det::Proposal> proposals, ad::Var logits, ad::Var weighting_logits,
                    std::span<const int> class_set, std::span<const int> labels) {
  if (proposals.empty() || labels.empty()) return skipped();
  check_weak_inputs(logits, class_set, proposals.size());
  if (weighting_logits.shape() != logits.shape()) {
    throw DimensionError("weak_wsddn: weighting " + shape_string(weighting_logits.shape()) + " vs logits " +
                         shape_string(logits.shape()));
  }
  ad::Var weights = ad::softmax(weighting_logits, 0);
  ad::Var image_score = ad::sum(ad::mul(weights, logits), 0);
  ad::Var row = ad::reshape(image_score, Shape{1, logits.dim(1)});
  WeakLoss out;
  for (int c : labels) out.assignments.push_back({0, c, 1.0});
  out.loss = assigned_bce(row, class_set, labels, out.assignments);
  out.assignments.clear();  // no proposal is singled out
  return out;
}

WeakLoss weak_dlwl(std::span<const det::Proposal> proposals, ad::Var logits, std::span<const int> class_set,
                   std::span<const int> labels, int topk, double iou_thresh) {
  if (proposals.empty() || labels.empty()) return skipped();
  check_weak_inputs(logits, class_set, proposals.size());
  const auto boxes = boxes_of(proposals);
  WeakLoss out;
  for (int c : labels) {
    const auto col = column_values(logits, column_of(class_set, c));
    const auto peaks = dlwl_peaks(boxes, col, iou_thresh, topk);
    const double w = 1.0 / static_cast<double>(peaks.size());
    for (std::size_t p : peaks) out.assignments.push_back({static_cast<Index>(p), c, w});
  }
  out.loss = assigned_bce(logits, class_set, labels, out.assignments);
  return out;
}

ad::Var caption_loss(ad::Var image_features, ad::Var caption_embeddings, double temperature) {
  const Index B = image_features.dim(0);
  if (caption_embeddings.value().rank() != 2 || caption_embeddings.dim(0) != B) {
    throw DimensionError("caption_loss: " + std::to_string(B) + " images vs captions " +
                         shape_string(caption_embeddings.shape()));
  }
  ad::Tape& tape = *image_features.tape();
  ad::Var frozen = tape.constant(caption_embeddings.value());
  ad::Var logits = det::classify(image_features, frozen, temperature);
  Tensor targets({B, B}, 0.0);
  targets.matrix().setIdentity();
  return ad::bce_with_logits(logits, targets);
}

std::vector<det::Detection> filter_pseudo_labels(const std::vector<det::Detection>& dets,
                                                 std::span<const int> labels, double thresh, bool filtered) {
  std::vector<det::Detection> out;
  for (const auto& d : dets) {
    if (!(d.score > thresh)) continue;
    if (filtered && std::find(labels.begin(), labels.end(), d.class_id) == labels.end()) continue;
    out.push_back(d);
  }
  return out;
}

std::vector<det::Detection> self_train_pseudo(const det::Detector& teacher, const Tensor& image,
                                              std::span<const int> labels, double thresh, bool filtered) {
  det::InferenceOptions opts{thresh, teacher.config().class_nms, teacher.config().max_detections};
  return filter_pseudo_labels(det::infer(teacher, image, opts), labels, thresh, filtered);
}

// ---------------------------------------------------------------------------
// Detection losses

RpnTargets rpn_targets(std::span<const Box> gt, Index h, Index w, int stride) {
  RpnTargets t{Tensor({h, w}, 0.0), Tensor({4, h, w}, 0.0), Tensor({4, h, w}, 0.0), 0};
  const Index cells = h * w;
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j < w; ++j) {
      const double cx = (static_cast<double>(j) + 0.5) * stride;
      const double cy = (static_cast<double>(i) + 0.5) * stride;
      int best = -1;
      for (std::size_t k = 0; k < gt.size(); ++k) {
        const Box& b = gt[k];
        if (!(b.x1 < cx && cx < b.x2 && b.y1 < cy && cy < b.y2)) continue;
        if (best < 0 || b.area() < gt[static_cast<std::size_t>(best)].area()) best = static_cast<int>(k);
      }
      if (best < 0) continue;
      const Box& b = gt[static_cast<std::size_t>(best)];
      const Index c = i * w + j;
      const double d[4] = {cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy};
      t.objectness[c] = 1.0;
      for (int s = 0; s < 4; ++s) {
        t.distances[s * cells + c] = d[s] / stride;
        t.mask[s * cells + c] = 1.0;
      }
      ++t.num_positive;
    }
  }
  return t;
}

std::vector<int> match_rois(std::span<const Box> rois, std::span<const Box> gt, double iou_thresh) {
  std::vector<int> out(rois.size(), -1);
  for (std::size_t r = 0; r < rois.size(); ++r) {
    double best = -1.0;
    for (std::size_t k = 0; k < gt.size(); ++k) {
      const double v = iou(rois[r], gt[k]);
      if (v >= iou_thresh && v > best) {
        best = v;
        out[r] = static_cast<int>(k);
      }
    }
  }
  return out;
}

ad::Var regression_l1(ad::Var deltas, std::span<const Box> rois, std::span<const Box> targets) {
  const Index n = static_cast<Index>(rois.size());
  if (targets.size() != rois.size() || deltas.value().rank() != 2 || deltas.dim(0) != n || deltas.dim(1) != 4) {
    throw DimensionError("regression_l1: deltas " + shape_string(deltas.shape()) + " for " + std::to_string(n) +
                         " RoIs and " + std::to_string(targets.size()) + " targets");
  }
  Tensor goal({n, 4});
  for (Index r = 0; r < n; ++r) {
    const auto d = det::encode_deltas(rois[static_cast<std::size_t>(r)], targets[static_cast<std::size_t>(r)]);
    for (int k = 0; k < 4; ++k) goal[r * 4 + k] = d[static_cast<std::size_t>(k)];
  }
  ad::Var residual = ad::sub(deltas, deltas.tape()->constant(std::move(goal)));
  return ad::scale(ad::sum(ad::abs(residual)), 1.0 / static_cast<double>(std::max<Index>(n, 1)));
}

DetLosses detection_losses(const det::Graph& graph, ad::Var featmaps, const det::RpnOutputs& rpn,
                           std::span<const GroundTruth> gts, std::span<const std::vector<int>> fed_classes,
                           double image_w, double image_h, const LossConfig& config) {
  ad::Tape& tape = graph.tape();
  const auto& cfg = graph.model().config();
  const Index N = featmaps.dim(0), C = featmaps.dim(1), h = featmaps.dim(2), w = featmaps.dim(3);
  if (static_cast<Index>(gts.size()) != N || static_cast<Index>(fed_classes.size()) != N) {
    throw DimensionError("detection_losses: " + std::to_string(N) + " feature maps, " + std::to_string(gts.size()) +
                         " annotations, " + std::to_string(fed_classes.size()) + " class sets");
  }
  const Index cells = h * w;

  // Proposal head.
  Tensor obj_t({N, 1, h, w}, 0.0), dist_t({N, 4, h, w}, 0.0), mask({N, 4, h, w}, 0.0);
  int positives = 0;
  for (Index n = 0; n < N; ++n) {
    const auto t = rpn_targets(gts[static_cast<std::size_t>(n)].boxes, h, w, cfg.stride);
    obj_t.data().segment(n * cells, cells) = t.objectness.data();
    dist_t.data().segment(n * 4 * cells, 4 * cells) = t.distances.data();
    mask.data().segment(n * 4 * cells, 4 * cells) = t.mask.data();
    positives += t.num_positive;
  }
  ad::Var rpn_cls = ad::scale(ad::bce_with_logits(rpn.objectness, obj_t), 1.0 / static_cast<double>(N * cells));
  ad::Var rpn_reg = zero(tape);
  if (positives > 0) {
    ad::Var residual = ad::mul(ad::sub(rpn.distances, tape.constant(dist_t)), tape.constant(mask));
    rpn_reg = ad::scale(ad::sum(ad::abs(residual)), 1.0 / positives);
  }

  // RoI head.
  DetLosses out;
  out.rpn = ad::add(rpn_cls, rpn_reg);
  std::vector<ad::Var> cls_terms, reg_terms;
  const Tensor& obj_v = rpn.objectness.value();
  const Tensor& dist_v = rpn.distances.value();
  for (Index n = 0; n < N; ++n) {
    const auto& gt = gts[static_cast<std::size_t>(n)];
    const auto& classes = fed_classes[static_cast<std::size_t>(n)];
    if (gt.boxes.size() != gt.classes.size()) throw DimensionError("detection_losses: boxes and classes differ");
    const auto proposals = det::decode_proposals(
        std::span<const double>(obj_v.ptr() + n * cells, static_cast<std::size_t>(cells)),
        std::span<const double>(dist_v.ptr() + n * 4 * cells, static_cast<std::size_t>(4 * cells)), h, w,
        cfg.stride, image_w, image_h, cfg.top_n, cfg.proposal_nms);
    std::vector<Box> rois;
    for (const auto& p : proposals) rois.push_back(p.box);
    rois.insert(rois.end(), gt.boxes.begin(), gt.boxes.end());
    if (rois.empty()) continue;

    ad::Var fmap = ad::reshape(ad::slice(featmaps, n, n + 1), Shape{C, h, w});
    ad::Var feats = graph.roi_features(fmap, rois);
    ad::Var logits = graph.classify(feats, std::span<const int>(classes));
    const auto match = match_rois(rois, gt.boxes, config.roi_match_iou);

    const Index R = static_cast<Index>(rois.size());
    Tensor targets({R, static_cast<Index>(classes.size())}, 0.0);
    std::vector<Index> pos_rows;
    std::vector<Box> pos_rois, pos_targets;
    for (Index r = 0; r < R; ++r) {
      const int k = match[static_cast<std::size_t>(r)];
      if (k < 0) continue;
      const int c = gt.classes[static_cast<std::size_t>(k)];
      targets.matrix()(r, column_of(classes, c)) = 1.0;
      pos_rows.push_back(r);
      pos_rois.push_back(rois[static_cast<std::size_t>(r)]);
      pos_targets.push_back(gt.boxes[static_cast<std::size_t>(k)]);
    }
    cls_terms.push_back(ad::scale(ad::bce_with_logits(logits, targets), 1.0 / static_cast<double>(R)));
    if (!pos_rows.empty()) {
      ad::Var deltas = graph.box_deltas(ad::gather_rows(feats, pos_rows));
      reg_terms.push_back(regression_l1(deltas, pos_rois, pos_targets));
    }
    out.num_rois += static_cast<int>(R);
    out.num_positive_rois += static_cast<int>(pos_rows.size());
  }
  auto mean_over_images = [&](const std::vector<ad::Var>& terms) {
    if (terms.empty()) return zero(tape);
    return ad::scale(ad::sum(ad::concat(std::vector<ad::Var>(terms.begin(), terms.end()))), 1.0 / static_cast<double>(N));
  };
  for (auto& t : cls_terms) t = ad::reshape(t, Shape{1});
  for (auto& t : reg_terms) t = ad::reshape(t, Shape{1});
  out.cls = mean_over_images(cls_terms);
  out.reg = mean_over_images(reg_terms);
  return out;
}

// ---------------------------------------------------------------------------
// Step objective

namespace {

Tensor stack_images(const std::vector<const BatchImage*>& images) {
  const Shape& s = images.front()->image.shape();
  const Index per = images.front()->image.size();
  Tensor out({static_cast<Index>(images.size()), s[0], s[1], s[2]});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->image.shape() != s) throw DimensionError("batch images differ in shape");
    out.data().segment(static_cast<Index>(i) * per, per) = images[i]->image.data();
  }
  return out;
}

// Sampled classes (or the whole vocabulary when nothing was sampled) plus the positives.
std::vector<int> class_set_for(std::span<const int> sample, std::span<const int> vocabulary,
                               std::span<const int> positives) {
  return with_positives(sample.empty() ? vocabulary : sample, positives);
}

std::vector<int> iota_ids(int n) {
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  return all;
}

ad::Var scalar_sum(const std::vector<ad::Var>& terms) {
  std::vector<ad::Var> flat;
  for (const auto& t : terms) flat.push_back(ad::reshape(t, Shape{1}));
  return ad::sum(ad::concat(flat));
}

struct SupervisedResult {
  ad::Var total;
  DetLosses parts;
};

SupervisedResult supervised(const det::Graph& graph, const std::vector<const BatchImage*>& images,
                            const std::vector<GroundTruth>& gts, std::span<const int> sample,
                            std::span<const int> vocabulary, const LossConfig& config) {
  ad::Tape& tape = graph.tape();
  const Tensor stacked = stack_images(images);
  ad::Var f = graph.backbone(tape.constant(stacked));
  det::RpnOutputs r = graph.rpn(f);
  std::vector<std::vector<int>> fed;
  for (const auto& gt : gts) fed.push_back(class_set_for(sample, vocabulary, gt.classes));
  DetLosses parts = detection_losses(graph, f, r, gts, fed, static_cast<double>(stacked.dim(3)),
                                     static_cast<double>(stacked.dim(2)), config);
  return {ad::add(ad::add(parts.rpn, parts.reg), parts.cls), parts};
}

}  // namespace

StepLoss total_loss(const det::Graph& graph, const StepBatch& batch, const LossConfig& config,
                    const data::Vocabulary& vocab, const det::Detector* teacher, int step) {
  ad::Tape& tape = graph.tape();
  const auto& cfg = graph.model().config();
  const std::vector<int> all_classes = iota_ids(graph.model().num_classes());
  StepLoss out;
  std::vector<ad::Var> terms;

  for (const auto* group : {&batch.det, &batch.weak}) {
    for (const auto& img : *group) {
      if (img.kind != data::SampleKind::detection && img.kind != data::SampleKind::weak &&
          img.kind != data::SampleKind::caption) {
        throw ValidationError("total_loss: sample kind '" + std::string(data::kind_name(img.kind)) +
                              "' cannot be trained on");
      }
    }
  }

  if (!batch.det.empty()) {
    std::vector<const BatchImage*> imgs;
    std::vector<GroundTruth> gts;
    for (const auto& b : batch.det) {
      if (b.kind != data::SampleKind::detection) throw ValidationError("total_loss: non-detection image in det batch");
      imgs.push_back(&b);
      gts.push_back(b.gt);
    }
    auto sup = supervised(graph, imgs, gts, batch.det_fed_sample, vocab.base_ids, config);
    out.terms["rpn"] = sup.parts.rpn.value().item();
    out.terms["reg"] = sup.parts.reg.value().item();
    out.terms["cls"] = sup.parts.cls.value().item();
    terms.push_back(sup.total);
  }

  const WeakVariant v = config.variant;
  if (!batch.weak.empty() && v != WeakVariant::none) {
    std::vector<const BatchImage*> imgs;
    for (const auto& b : batch.weak) {
      if (b.kind == data::SampleKind::detection) throw ValidationError("total_loss: detection image in weak batch");
      imgs.push_back(&b);
    }

    if (v == WeakVariant::self_train || v == WeakVariant::self_train_filtered) {
      if (teacher == nullptr) throw ConfigError("self-training needs a teacher model");
      std::vector<const BatchImage*> kept;
      std::vector<GroundTruth> gts;
      for (const auto* b : imgs) {
        const auto pseudo = self_train_pseudo(*teacher, b->image, b->labels, config.self_train_thresh,
                                              v == WeakVariant::self_train_filtered);
        if (pseudo.empty()) {
          ++out.skipped_images;
          continue;
        }
        GroundTruth gt;
        for (const auto& d : pseudo) {
          gt.boxes.push_back(d.box);
          gt.classes.push_back(d.class_id);
        }
        kept.push_back(b);
        gts.push_back(std::move(gt));
      }
      out.terms["self_train"] = 0.0;
      if (!kept.empty()) {
        auto sup = supervised(graph, kept, gts, batch.weak_fed_sample, all_classes, config);
        out.terms["self_train"] = sup.total.value().item();
        terms.push_back(sup.total);
      }
    } else {
      const Tensor stacked = stack_images(imgs);
      const double W = static_cast<double>(stacked.dim(3)), H = static_cast<double>(stacked.dim(2));
      ad::Var f = graph.backbone(tape.constant(stacked));
      const Index N = f.dim(0), C = f.dim(1), h = f.dim(2), w = f.dim(3), cells = h * w;
      const bool needs_proposals = v == WeakVariant::max_size || v == WeakVariant::max_object_score ||
                                   v == WeakVariant::predicted || v == WeakVariant::wsddn ||
                                   v == WeakVariant::dlwl || v == WeakVariant::caption_labels;
      det::RpnOutputs r;
      if (needs_proposals) r = graph.rpn(f);
      auto features = [&](ad::Var fmap, std::span<const Box> boxes) {
        return config.shared_classifier ? graph.roi_features(fmap, boxes) : graph.separate_roi_features(fmap, boxes);
      };

      std::vector<ad::Var> weak_terms, caption_feats;
      std::vector<Eigen::VectorXd> caption_vecs;
      for (Index n = 0; n < N; ++n) {
        const BatchImage& img = *imgs[static_cast<std::size_t>(n)];
        ad::Var fmap = ad::reshape(ad::slice(f, n, n + 1), Shape{C, h, w});
        const Box image_box = det::inject_image_box(W, H);

        if (v == WeakVariant::caption || v == WeakVariant::caption_labels) {
          if (img.kind != data::SampleKind::caption) throw ValidationError("caption variants need caption images");
          caption_feats.push_back(features(fmap, std::span<const Box>(&image_box, 1)));
          caption_vecs.push_back(embed::embed_caption(img.caption, vocab));
          if (v == WeakVariant::caption) continue;
        }

        const std::vector<int>& labels = img.labels;
        if (labels.empty()) {
          ++out.skipped_images;
          continue;
        }
        const auto classes = class_set_for(batch.weak_fed_sample, all_classes, labels);
        std::vector<det::Proposal> proposals;
        if (needs_proposals) {
          proposals = det::decode_proposals(
              std::span<const double>(r.objectness.value().ptr() + n * cells, static_cast<std::size_t>(cells)),
              std::span<const double>(r.distances.value().ptr() + n * 4 * cells, static_cast<std::size_t>(4 * cells)),
              h, w, cfg.stride, W, H, cfg.top_n, cfg.proposal_nms);
          if (proposals.empty()) {
            ++out.skipped_images;
            continue;
          }
        }
        const auto boxes = boxes_of(proposals);

        WeakLoss wl;
        std::vector<Box> row_boxes;  // box of each logit row
        if (v == WeakVariant::max_size || v == WeakVariant::caption_labels || v == WeakVariant::max_object_score) {
          std::size_t j = 0;
          if (v == WeakVariant::max_object_score) {
            std::vector<double> o;
            for (const auto& p : proposals) o.push_back(p.objectness);
            j = select_max_objectness(o);
          } else {
            j = select_max_size(boxes);
          }
          row_boxes = {boxes[j]};
          ad::Var logits = graph.classify(features(fmap, row_boxes), std::span<const int>(classes));
          wl = single_row(0, logits, classes, labels);
        } else if (v == WeakVariant::image_box) {
          row_boxes = {image_box};
          ad::Var logits = graph.classify(features(fmap, row_boxes), std::span<const int>(classes));
          wl = weak_image_box(logits, classes, labels);
        } else {
          row_boxes = boxes;
          ad::Var feats = features(fmap, boxes);
          ad::Var logits = graph.classify(feats, std::span<const int>(classes));
          if (v == WeakVariant::predicted) {
            wl = weak_predicted(proposals, logits, classes, labels);
          } else if (v == WeakVariant::dlwl) {
            wl = weak_dlwl(proposals, logits, classes, labels, config.dlwl_topk, config.dlwl_cluster_iou);
          } else {
            const auto cols = column_index(classes);
            ad::Var weighting = ad::gather_cols(graph.wsddn_logits(feats), cols);
            wl = weak_wsddn(proposals, logits, weighting, classes, labels);
          }
        }
        if (wl.skipped) {
          ++out.skipped_images;
          continue;
        }
        weak_terms.push_back(wl.loss);
        const std::string strategy = variant_name(v);
        for (const auto& a : wl.assignments) {
          out.assignments.push_back(
              {img.image_id, a.label, row_boxes[static_cast<std::size_t>(a.row)], strategy, step});
        }
      }

      if (!weak_terms.empty()) {
        ad::Var weak = ad::scale(scalar_sum(weak_terms), 1.0 / static_cast<double>(weak_terms.size()));
        out.terms["weak"] = weak.value().item();
        terms.push_back(ad::scale(weak, config.lambda_weak));
      } else if (v != WeakVariant::caption) {
        out.terms["weak"] = 0.0;
      }

      if (!caption_feats.empty()) {
        const Index B = static_cast<Index>(caption_feats.size());
        const Index D = static_cast<Index>(caption_vecs.front().size());
        if (D != graph.model().feature_dim()) {
          throw ConfigError("caption loss needs feature dim " + std::to_string(D) + ", detector has " +
                            std::to_string(graph.model().feature_dim()));
        }
        Tensor emb({B, D});
        for (Index i = 0; i < B; ++i) emb.matrix().row(i) = caption_vecs[static_cast<std::size_t>(i)].transpose();
        if (B == 1) ++out.caption_batches_without_negatives;
        ad::Var cap = ad::scale(caption_loss(ad::concat(caption_feats), tape.constant(std::move(emb)), cfg.temperature),
                                1.0 / static_cast<double>(B));
        out.terms["caption"] = cap.value().item();
        terms.push_back(ad::scale(cap, config.caption_weight()));
      }
    }
  }

  out.total = terms.empty() ? zero(tape) : scalar_sum(terms);
  out.terms["total"] = out.total.value().item();
  return out;
}

}  // namespace weakvoc::loss

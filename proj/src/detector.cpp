#include "weakvoc/detector.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace weakvoc::det {

namespace {

Tensor he_normal(Shape shape, Index fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

Tensor small_normal(Shape shape, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Proposals never collapse below this many strides per side.
constexpr double kMinSideDistance = 0.25;
// Largest log-size ratio applied when decoding regression deltas.
const double kMaxLogRatio = std::log(1000.0 / 16.0);

}  // namespace

void to_json(nlohmann::json& j, const DetectorConfig& c) {
  j = {{"backbone_channels", c.backbone_channels},
       {"stride", c.stride},
       {"roi_grid", c.roi_grid},
       {"roi_hidden", c.roi_hidden},
       {"top_n", c.top_n},
       {"proposal_nms", c.proposal_nms},
       {"class_nms", c.class_nms},
       {"score_thresh", c.score_thresh},
       {"max_detections", c.max_detections},
       {"multiply_objectness", c.multiply_objectness},
       {"embedding", embed::mode_name(c.embedding)},
       {"trained_dim", c.trained_dim},
       {"temperature", c.temperature},
       {"init_distance", c.init_distance}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
  c.backbone_channels = j.value("backbone_channels", c.backbone_channels);
  c.stride = j.value("stride", c.stride);
  c.roi_grid = j.value("roi_grid", c.roi_grid);
  c.roi_hidden = j.value("roi_hidden", c.roi_hidden);
  c.top_n = j.value("top_n", c.top_n);
  c.proposal_nms = j.value("proposal_nms", c.proposal_nms);
  c.class_nms = j.value("class_nms", c.class_nms);
  c.score_thresh = j.value("score_thresh", c.score_thresh);
  c.max_detections = j.value("max_detections", c.max_detections);
  c.multiply_objectness = j.value("multiply_objectness", c.multiply_objectness);
  if (j.contains("embedding")) c.embedding = embed::parse_mode(j.at("embedding").get<std::string>());
  c.trained_dim = j.value("trained_dim", c.trained_dim);
  c.temperature = j.value("temperature", c.temperature);
  c.init_distance = j.value("init_distance", c.init_distance);
}

// ---------------------------------------------------------------------------
// Detector

Detector::Detector(DetectorConfig config, const data::Vocabulary& vocab, std::uint64_t seed)
    : config_(std::move(config)), num_classes_(vocab.num_classes()) {
  if (config_.stride != 8) throw ConfigError("the backbone has three stride-2 stages; stride must be 8");
  if (config_.top_n < 1) throw ConfigError("top_n must be >= 1");
  if (config_.roi_grid < 1 || config_.roi_hidden < 1) throw ConfigError("RoI grid and hidden width must be >= 1");
  std::mt19937_64 rng(seed);

  const embed::ClassEmbeddingMatrix classifier =
      config_.embedding == embed::EmbeddingMode::attribute
          ? embed::attribute_embeddings(vocab, config_.temperature)
          : embed::trained_embeddings(vocab, config_.trained_dim, rng, config_.temperature);
  feature_dim_ = classifier.dim();

  int in = 3;
  for (int s = 0; s < 3; ++s) {
    const int out = config_.backbone_channels[static_cast<std::size_t>(s)];
    const std::string name = "backbone.conv" + std::to_string(s + 1);
    params_.add(name + ".weight", he_normal({out, in, 3, 3}, in * 9, rng));
    params_.add(name + ".bias", Tensor({out}, 0.0));
    in = out;
  }
  const int cf = in;
  params_.add("rpn.conv.weight", he_normal({cf, cf, 3, 3}, cf * 9, rng));
  params_.add("rpn.conv.bias", Tensor({cf}, 0.0));
  params_.add("rpn.obj.weight", small_normal({1, cf, 1, 1}, 0.01, rng));
  params_.add("rpn.obj.bias", Tensor({1}, -2.0));
  params_.add("rpn.box.weight", small_normal({4, cf, 1, 1}, 0.01, rng));
  params_.add("rpn.box.bias", Tensor({4}, config_.init_distance));

  const Index pooled = static_cast<Index>(cf) * config_.roi_grid * config_.roi_grid;
  for (const std::string head : {"roi", "sep"}) {
    params_.add(head + ".fc1.weight", he_normal({pooled, config_.roi_hidden}, pooled, rng));
    params_.add(head + ".fc1.bias", Tensor({config_.roi_hidden}, 0.0));
    params_.add(head + ".fc2.weight", he_normal({config_.roi_hidden, feature_dim_}, config_.roi_hidden, rng));
    params_.add(head + ".fc2.bias", Tensor({feature_dim_}, 0.0));
  }
  params_.add("box.weight", Tensor({4, feature_dim_}, 0.0));
  params_.add("cls.weight", classifier.weights, classifier.trainable());
  params_.add("wsddn.weight", small_normal({num_classes_, feature_dim_}, 0.01, rng));
}

// ---------------------------------------------------------------------------
// Graph

Graph::Graph(ad::Tape& tape, const Detector& model, bool track_grads)
    : tape_(&tape), model_(&model), params_(tape, model.params(), track_grads) {}

ad::Var Graph::backbone(ad::Var images) const {
  const Shape& s = images.shape();
  const Index H = s[s.size() - 2], W = s[s.size() - 1];
  if (H % 8 != 0 || W % 8 != 0) {
    throw ValidationError("image size " + std::to_string(H) + "x" + std::to_string(W) + " is not a multiple of 8");
  }
  ad::Var x = images;
  for (int i = 1; i <= 3; ++i) {
    const std::string name = "backbone.conv" + std::to_string(i);
    x = ad::relu(ad::conv2d(x, params_[name + ".weight"], params_[name + ".bias"], 2, 1));
  }
  return x;
}

RpnOutputs Graph::rpn(ad::Var featmaps) const {
  ad::Var h = ad::relu(ad::conv2d(featmaps, params_["rpn.conv.weight"], params_["rpn.conv.bias"], 1, 1));
  return {ad::conv2d(h, params_["rpn.obj.weight"], params_["rpn.obj.bias"], 1, 0),
          ad::relu(ad::conv2d(h, params_["rpn.box.weight"], params_["rpn.box.bias"], 1, 0))};
}

namespace {

ad::Var pooled_mlp(const BoundParameters& p, const std::string& head, ad::Var featmap, std::span<const Box> boxes,
                   const DetectorConfig& cfg) {
  ad::Var pooled = ad::roi_align(featmap, boxes, cfg.roi_grid, 1.0 / cfg.stride);
  const Index n = static_cast<Index>(boxes.size());
  ad::Var flat = ad::reshape(pooled, Shape{n, pooled.value().size() / std::max<Index>(n, 1)});
  ad::Var h = ad::relu(ad::add_rowwise(ad::matmul(flat, p[head + ".fc1.weight"]), p[head + ".fc1.bias"]));
  return ad::add_rowwise(ad::matmul(h, p[head + ".fc2.weight"]), p[head + ".fc2.bias"]);
}

}  // namespace

ad::Var Graph::roi_features(ad::Var featmap, std::span<const Box> boxes) const {
  if (boxes.empty()) throw ValidationError("roi_features needs at least one box");
  return pooled_mlp(params_, "roi", featmap, boxes, model_->config());
}

ad::Var Graph::separate_roi_features(ad::Var featmap, std::span<const Box> boxes) const {
  if (boxes.empty()) throw ValidationError("roi_features needs at least one box");
  return pooled_mlp(params_, "sep", featmap, boxes, model_->config());
}

ad::Var Graph::classify(ad::Var features, std::optional<std::span<const int>> subset) const {
  return det::classify(features, params_["cls.weight"], model_->config().temperature, subset);
}

ad::Var Graph::box_deltas(ad::Var features) const {
  return ad::matmul(features, ad::transpose(params_["box.weight"]));
}

ad::Var Graph::wsddn_logits(ad::Var features) const {
  return ad::matmul(features, ad::transpose(params_["wsddn.weight"]));
}

ad::Var classify(ad::Var features, ad::Var class_weights, double temperature,
                 std::optional<std::span<const int>> subset) {
  if (features.value().rank() != 2 || features.dim(1) != class_weights.dim(1)) {
    throw DimensionError("classify: features " + shape_string(features.shape()) + " vs class weights " +
                         shape_string(class_weights.shape()));
  }
  ad::Var w = class_weights;
  if (subset) {
    std::vector<Index> rows;
    for (int c : *subset) {
      if (c < 0 || c >= class_weights.dim(0)) {
        throw ValidationError("classify: class id " + std::to_string(c) + " outside the vocabulary");
      }
      rows.push_back(c);
    }
    w = ad::gather_rows(w, rows);
  }
  return ad::scale(ad::matmul(ad::l2_normalize(features), ad::transpose(ad::l2_normalize(w))), temperature);
}

// ---------------------------------------------------------------------------
// Proposals and boxes

std::vector<Proposal> decode_proposals(std::span<const double> objectness_logits, std::span<const double> distances,
                                       Index h, Index w, int stride, double image_w, double image_h, int top_n,
                                       double nms_iou) {
  const Index cells = h * w;
  if (static_cast<Index>(objectness_logits.size()) != cells || static_cast<Index>(distances.size()) != 4 * cells) {
    throw DimensionError("decode_proposals: head outputs do not match a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
  }
  std::vector<Box> boxes;
  std::vector<double> logits;
  std::vector<Index> cell_of;
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j < w; ++j) {
      const Index c = i * w + j;
      const double cx = (static_cast<double>(j) + 0.5) * stride;
      const double cy = (static_cast<double>(i) + 0.5) * stride;
      auto d = [&](int k) { return std::max(distances[static_cast<std::size_t>(k * cells + c)], kMinSideDistance) * stride; };
      const Box b = clip(Box{cx - d(0), cy - d(1), cx + d(2), cy + d(3)}, image_w, image_h);
      if (!b.valid()) continue;
      boxes.push_back(b);
      logits.push_back(objectness_logits[static_cast<std::size_t>(c)]);
      cell_of.push_back(c);
    }
  }
  std::vector<Proposal> out;
  for (std::size_t k : nms(boxes, logits, nms_iou, static_cast<std::size_t>(std::max(top_n, 0)))) {
    out.push_back({boxes[k], sigmoid(logits[k]), cell_of[k]});
  }
  return out;
}

std::vector<Proposal> propose(const Detector& model, const Tensor& image, int top_n, double nms_iou) {
  ad::Tape tape;
  Graph g(tape, model, false);
  const Tensor batch = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  ad::Var f = g.backbone(tape.constant(batch));
  RpnOutputs r = g.rpn(f);
  const Index h = f.dim(2), w = f.dim(3);
  const Tensor& obj = r.objectness.value();
  const Tensor& dist = r.distances.value();
  return decode_proposals(std::span<const double>(obj.ptr(), static_cast<std::size_t>(h * w)),
                          std::span<const double>(dist.ptr(), static_cast<std::size_t>(4 * h * w)), h, w,
                          model.config().stride, static_cast<double>(batch.dim(3)), static_cast<double>(batch.dim(2)),
                          top_n, nms_iou);
}

Box inject_image_box(double image_w, double image_h) {
  if (image_w <= 0 || image_h <= 0) throw ValidationError("image box needs positive dimensions");
  return {0.0, 0.0, image_w, image_h};
}

std::array<double, 4> encode_deltas(const Box& from, const Box& to) {
  return {(to.center_x() - from.center_x()) / from.width(), (to.center_y() - from.center_y()) / from.height(),
          std::log(to.width() / from.width()), std::log(to.height() / from.height())};
}

Box apply_deltas(const Box& box, std::span<const double> deltas, double image_w, double image_h) {
  const double w = box.width(), h = box.height();
  const double cx = box.center_x() + deltas[0] * w;
  const double cy = box.center_y() + deltas[1] * h;
  const double nw = w * std::exp(std::min(deltas[2], kMaxLogRatio));
  const double nh = h * std::exp(std::min(deltas[3], kMaxLogRatio));
  return clip(Box{cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh}, image_w, image_h);
}

std::vector<Detection> per_class_nms(const std::vector<Detection>& dets, double iou_thresh) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < dets.size(); ++i) by_class[dets[i].class_id].push_back(i);
  std::vector<std::size_t> keep;
  for (const auto& [cls, idx] : by_class) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (std::size_t i : idx) {
      boxes.push_back(dets[i].box);
      scores.push_back(dets[i].score);
    }
    for (std::size_t k : nms(boxes, scores, iou_thresh)) keep.push_back(idx[k]);
  }
  std::sort(keep.begin(), keep.end());
  std::vector<Detection> out;
  std::vector<double> scores;
  for (std::size_t i : keep) scores.push_back(dets[i].score);
  for (std::size_t k : argsort_descending(scores)) out.push_back(dets[keep[k]]);
  return out;
}

std::vector<Detection> infer(const Detector& model, const Tensor& image, const InferenceOptions& options) {
  const DetectorConfig& cfg = model.config();
  ad::Tape tape;
  Graph g(tape, model, false);
  const Tensor batch = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  const double W = static_cast<double>(batch.dim(3)), H = static_cast<double>(batch.dim(2));
  ad::Var f = g.backbone(tape.constant(batch));
  RpnOutputs r = g.rpn(f);
  const Index h = f.dim(2), w = f.dim(3);
  const auto proposals = decode_proposals(
      std::span<const double>(r.objectness.value().ptr(), static_cast<std::size_t>(h * w)),
      std::span<const double>(r.distances.value().ptr(), static_cast<std::size_t>(4 * h * w)), h, w, cfg.stride, W, H,
      cfg.top_n, cfg.proposal_nms);
  if (proposals.empty()) return {};
  std::vector<Box> boxes;
  for (const auto& p : proposals) boxes.push_back(p.box);
  ad::Var fmap = ad::reshape(f, Shape{f.dim(1), h, w});
  ad::Var feats = g.roi_features(fmap, boxes);
  const Tensor logits = g.classify(feats).value();
  const Tensor deltas = g.box_deltas(feats).value();

  std::vector<Detection> cands;
  for (std::size_t j = 0; j < proposals.size(); ++j) {
    const Index row = static_cast<Index>(j);
    const Box refined = apply_deltas(boxes[j], std::span<const double>(deltas.ptr() + row * 4, 4), W, H);
    if (!refined.valid()) continue;
    for (int c = 0; c < model.num_classes(); ++c) {
      double score = sigmoid(logits.matrix()(row, c));
      if (cfg.multiply_objectness) score *= proposals[j].objectness;
      if (score >= options.score_thresh) cands.push_back({refined, c, score});
    }
  }
  auto dets = per_class_nms(cands, options.class_nms);
  if (static_cast<int>(dets.size()) > options.max_detections) dets.resize(static_cast<std::size_t>(options.max_detections));
  return dets;
}

std::vector<Detection> infer(const Detector& model, const Tensor& image) {
  const auto& cfg = model.config();
  return infer(model, image, InferenceOptions{cfg.score_thresh, cfg.class_nms, cfg.max_detections});
}

}  // namespace weakvoc::det

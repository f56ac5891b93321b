#include "weakvoc/eval.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>

#include "weakvoc/binary_io.hpp"
#include "weakvoc/parallel.hpp"

namespace weakvoc::eval {

namespace {

double mean_over(const std::map<int, double>& values, std::span<const int> ids) {
  double sum = 0.0;
  int n = 0;
  for (int c : ids) {
    const auto it = values.find(c);
    if (it == values.end()) continue;
    sum += it->second;
    ++n;
  }
  return n == 0 ? 0.0 : sum / n;
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

std::optional<double> average_precision(std::span<const ScoredBox> dets, std::span<const GtBox> gts,
                                        double iou_thresh) {
  if (gts.empty()) return std::nullopt;
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<char> used(gts.size(), 0);
  std::vector<double> precision, recall;
  int tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const ScoredBox& d = dets[order[rank]];
    double best = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].image != d.image) continue;
      const double o = iou(d.box, gts[g].box);
      if (o >= iou_thresh && o > best) {
        best = o;
        best_g = g;
      }
    }
    if (best_g < gts.size()) {
      used[best_g] = 1;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return ap;
}

std::optional<double> coco_ap(std::span<const ScoredBox> dets, std::span<const GtBox> gts) {
  if (gts.empty()) return std::nullopt;
  double sum = 0.0;
  for (int t = 0; t < 10; ++t) sum += *average_precision(dets, gts, 0.5 + 0.05 * t);
  return sum / 10.0;
}

GroupedMaps map_breakdown(std::span<const std::vector<det::Detection>> dets,
                          std::span<const std::vector<data::SceneObject>> gts, const data::Vocabulary& vocab) {
  if (dets.size() != gts.size()) throw DimensionError("map_breakdown: detections and gt cover different image counts");
  const int C = vocab.num_classes();
  std::vector<std::vector<ScoredBox>> class_dets(static_cast<std::size_t>(C));
  std::vector<std::vector<GtBox>> class_gts(static_cast<std::size_t>(C));
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const int img = static_cast<int>(i);
    for (const auto& d : dets[i]) {
      if (d.class_id < 0 || d.class_id >= C) throw ValidationError("detection with invalid class id");
      class_dets[static_cast<std::size_t>(d.class_id)].push_back({img, d.box, d.score});
    }
    for (const auto& o : gts[i]) class_gts[static_cast<std::size_t>(o.class_id)].push_back({img, o.box});
  }

  GroupedMaps out;
  for (int c = 0; c < C; ++c) {
    const auto& cd = class_dets[static_cast<std::size_t>(c)];
    const auto& cg = class_gts[static_cast<std::size_t>(c)];
    if (cg.empty()) {
      out.classes_without_gt.push_back(c);
      continue;
    }
    out.per_class_ap[c] = *coco_ap(cd, cg);
    out.per_class_ap50[c] = *average_precision(cd, cg, 0.5);
  }
  std::vector<int> all(static_cast<std::size_t>(C));
  std::iota(all.begin(), all.end(), 0);
  out.map_all = mean_over(out.per_class_ap, all);
  out.map_base = mean_over(out.per_class_ap, vocab.base_ids);
  out.map_novel = mean_over(out.per_class_ap, vocab.novel_ids);
  out.ap50_all = mean_over(out.per_class_ap50, all);
  out.ap50_base = mean_over(out.per_class_ap50, vocab.base_ids);
  out.ap50_novel = mean_over(out.per_class_ap50, vocab.novel_ids);
  return out;
}

Recall proposal_recall(std::span<const std::vector<Box>> proposals,
                       std::span<const std::vector<data::SceneObject>> gts, int k, double iou_thresh,
                       std::span<const int> classes) {
  if (proposals.size() != gts.size()) throw DimensionError("proposal_recall: proposal and gt image counts differ");
  Recall r;
  int hit = 0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    const std::size_t top = std::min(proposals[i].size(), static_cast<std::size_t>(std::max(k, 0)));
    for (const auto& o : gts[i]) {
      if (!classes.empty() && std::find(classes.begin(), classes.end(), o.class_id) == classes.end()) continue;
      ++r.num_gt;
      for (std::size_t p = 0; p < top; ++p) {
        if (iou(proposals[i][p], o.box) >= iou_thresh) {
          ++hit;
          break;
        }
      }
    }
  }
  r.recall = r.num_gt == 0 ? 0.0 : static_cast<double>(hit) / r.num_gt;
  return r;
}

CoverStats cover_rate(std::span<const loss::AssignmentRecord> records,
                      std::span<const std::vector<data::SceneObject>> images) {
  CoverStats s;
  int covered_assigned = 0;
  for (const auto& r : records) {
    if (r.image_id < 0 || static_cast<std::size_t>(r.image_id) >= images.size()) {
      throw ValidationError("assignment references unknown image " + std::to_string(r.image_id));
    }
    bool any = false, gt_norm = false, region_norm = false;
    for (const auto& o : images[static_cast<std::size_t>(r.image_id)]) {
      if (o.class_id != r.label) continue;
      any = true;
      if (intersection_over_area(o.box, r.box) > 0.5) gt_norm = true;
      if (intersection_over_area(r.box, o.box) > 0.5) region_norm = true;
    }
    if (!any) {
      ++s.excluded;
      continue;
    }
    ++s.total;
    s.covered += gt_norm;
    covered_assigned += region_norm;
  }
  if (s.total > 0) {
    s.rate = static_cast<double>(s.covered) / s.total;
    s.rate_assigned_normalized = static_cast<double>(covered_assigned) / s.total;
  }
  return s;
}

ConsistencyStats consistency(std::span<const loss::AssignmentRecord> half,
                             std::span<const loss::AssignmentRecord> final) {
  std::map<std::pair<int, int>, Box> first;
  for (const auto& r : half) first.emplace(std::pair{r.image_id, r.label}, r.box);
  std::map<std::pair<int, int>, Box> second;
  for (const auto& r : final) second.emplace(std::pair{r.image_id, r.label}, r.box);

  ConsistencyStats s;
  double sum = 0.0;
  for (const auto& [key, box] : first) {
    const auto it = second.find(key);
    if (it == second.end()) {
      ++s.missing;
      continue;
    }
    sum += iou(box, it->second);
    ++s.pairs;
  }
  for (const auto& [key, box] : second) s.missing += first.count(key) == 0;
  s.mean_iou = s.pairs == 0 ? 0.0 : sum / s.pairs;
  return s;
}

std::map<std::string, std::vector<loss::AssignmentRecord>> by_strategy(
    std::span<const loss::AssignmentRecord> records) {
  std::map<std::string, std::vector<loss::AssignmentRecord>> out;
  for (const auto& r : records) out[r.strategy].push_back(r);
  return out;
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"recall_ks", c.recall_ks},
       {"recall_iou", c.recall_iou},
       {"max_detections", c.max_detections},
       {"score_thresh", c.score_thresh}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
  c.recall_ks = j.value("recall_ks", c.recall_ks);
  c.recall_iou = j.value("recall_iou", c.recall_iou);
  c.max_detections = j.value("max_detections", c.max_detections);
  c.score_thresh = j.value("score_thresh", c.score_thresh);
  if (c.recall_ks.empty()) throw ConfigError("eval.recall_ks must not be empty");
  for (int k : c.recall_ks) {
    if (k < 0) throw ConfigError("eval.recall_ks entries must be >= 0");
  }
  if (c.max_detections < 1) throw ConfigError("eval.max_detections must be >= 1");
}

MetricsReport evaluate(const det::Detector& model, std::span<const data::Sample> test, const data::Vocabulary& vocab,
                       const EvalConfig& config) {
  const std::size_t n = test.size();
  std::vector<std::vector<det::Detection>> dets(n);
  std::vector<std::vector<Box>> props(n);
  std::vector<std::vector<data::SceneObject>> gts(n);
  const int max_k = std::max(model.config().top_n, *std::max_element(config.recall_ks.begin(), config.recall_ks.end()));
  det::InferenceOptions opts;
  opts.score_thresh = config.score_thresh;
  opts.class_nms = model.config().class_nms;
  opts.max_detections = config.max_detections;

  parallel_for(n, [&](std::size_t i) {
    const Tensor img = test[i].image.to_tensor();
    dets[i] = det::infer(model, img, opts);
    for (const auto& p : det::propose(model, img, max_k, model.config().proposal_nms)) props[i].push_back(p.box);
    gts[i] = test[i].all_objects();
  });

  MetricsReport r;
  r.maps = map_breakdown(dets, gts, vocab);
  const std::vector<int> none;
  for (int k : config.recall_ks) {
    r.ar["all"][k] = proposal_recall(props, gts, k, config.recall_iou, none).recall;
    r.ar["base"][k] = proposal_recall(props, gts, k, config.recall_iou, vocab.base_ids).recall;
    r.ar["novel"][k] = proposal_recall(props, gts, k, config.recall_iou, vocab.novel_ids).recall;
  }
  r.test_images = static_cast<int>(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.gt_boxes += static_cast<int>(gts[i].size());
    r.detections += static_cast<int>(dets[i].size());
  }
  return r;
}

void add_assignment_diagnostics(MetricsReport& report, std::span<const loss::AssignmentRecord> half,
                                std::span<const loss::AssignmentRecord> final,
                                std::span<const data::Sample> images) {
  std::vector<std::vector<data::SceneObject>> gt;
  gt.reserve(images.size());
  for (const auto& s : images) gt.push_back(s.all_objects());
  const auto h = by_strategy(half);
  for (const auto& [name, recs] : by_strategy(final)) {
    report.cover[name] = cover_rate(recs, gt);
    const auto it = h.find(name);
    if (it != h.end()) report.consistency[name] = consistency(it->second, recs);
  }
}

nlohmann::json report_json(const MetricsReport& r, const data::Vocabulary& vocab) {
  nlohmann::json j;
  j["map_all"] = r.maps.map_all;
  j["map_base"] = r.maps.map_base;
  j["map_novel"] = r.maps.map_novel;
  j["ap50_all"] = r.maps.ap50_all;
  j["ap50_base"] = r.maps.ap50_base;
  j["ap50_novel"] = r.maps.ap50_novel;
  nlohmann::json per_class = nlohmann::json::object(), per_class50 = nlohmann::json::object();
  for (const auto& [c, v] : r.maps.per_class_ap) per_class[vocab.name(c)] = v;
  for (const auto& [c, v] : r.maps.per_class_ap50) per_class50[vocab.name(c)] = v;
  j["per_class_ap"] = per_class;
  j["per_class_ap50"] = per_class50;
  nlohmann::json ar = nlohmann::json::object();
  for (const auto& [group, ks] : r.ar) {
    for (const auto& [k, v] : ks) ar[group][std::to_string(k)] = v;
  }
  j["ar_at_k"] = ar;
  nlohmann::json cover = nlohmann::json::object(), cons = nlohmann::json::object();
  for (const auto& [name, s] : r.cover) {
    cover[name] = {{"rate", s.rate},
                   {"rate_assigned_normalized", s.rate_assigned_normalized},
                   {"covered", s.covered},
                   {"total", s.total},
                   {"excluded", s.excluded}};
  }
  for (const auto& [name, s] : r.consistency) {
    cons[name] = {{"mean_iou", s.mean_iou}, {"pairs", s.pairs}, {"missing", s.missing}};
  }
  j["cover_rate"] = cover;
  j["consistency"] = cons;
  std::vector<std::string> absent;
  for (int c : r.maps.classes_without_gt) absent.push_back(vocab.name(c));
  j["counts"] = {{"test_images", r.test_images},
                 {"gt_boxes", r.gt_boxes},
                 {"detections", r.detections},
                 {"classes_without_gt", absent}};
  return j;
}

std::string metrics_csv(const MetricsReport& r, const data::Vocabulary& vocab) {
  std::string out = "name,group,value\n";
  auto row = [&](const std::string& name, const std::string& group, double v) {
    out += name + "," + group + "," + fmt(v) + "\n";
  };
  row("map", "all", r.maps.map_all);
  row("map", "base", r.maps.map_base);
  row("map", "novel", r.maps.map_novel);
  row("ap50", "all", r.maps.ap50_all);
  row("ap50", "base", r.maps.ap50_base);
  row("ap50", "novel", r.maps.ap50_novel);
  for (const auto& [group, ks] : r.ar) {
    for (const auto& [k, v] : ks) row("ar50@" + std::to_string(k), group, v);
  }
  for (const auto& [name, s] : r.cover) {
    row("cover_rate", name, s.rate);
    row("cover_rate_assigned_normalized", name, s.rate_assigned_normalized);
  }
  for (const auto& [name, s] : r.consistency) row("consistency", name, s.mean_iou);
  for (const auto& [c, v] : r.maps.per_class_ap) row("ap", vocab.name(c), v);
  return out;
}

void write_report(const std::filesystem::path& dir, const MetricsReport& report, const data::Vocabulary& vocab) {
  std::filesystem::create_directories(dir);
  io::write_text(dir / "report.json", report_json(report, vocab).dump(2) + "\n");
  io::write_text(dir / "metrics.csv", metrics_csv(report, vocab));
}

}  // namespace weakvoc::eval

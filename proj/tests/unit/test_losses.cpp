#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "suites.hpp"
#include "weakvoc/losses.hpp"

using namespace weakvoc;
using weakvoc::testing::dlwl_oracle;
using weakvoc::testing::random_tensor;

namespace {

// −log σ(s) and −log(1 − σ(s)), written independently of the library.
double pos(double s) { return std::log1p(std::exp(-s)); }
double neg(double s) { return std::log1p(std::exp(s)); }

std::vector<det::Proposal> proposals_of(const std::vector<Box>& boxes, std::vector<double> obj = {}) {
  std::vector<det::Proposal> out;
  for (std::size_t i = 0; i < boxes.size(); ++i) out.push_back({boxes[i], obj.empty() ? 0.5 : obj[i], 0});
  return out;
}

data::SceneConfig small_scene() {
  data::SceneConfig cfg;
  cfg.image_size = 32;
  cfg.min_side = 9;
  cfg.max_side = 14;
  cfg.max_objects = 2;
  return cfg;
}

loss::BatchImage det_image(const data::Vocabulary& vocab, std::uint64_t seed, int id) {
  const auto scene = data::generate_scene(seed, small_scene(), vocab);
  loss::BatchImage b;
  b.image = scene.image.to_tensor();
  b.image_id = id;
  b.kind = data::SampleKind::detection;
  for (const auto& o : scene.objects) {
    b.gt.boxes.push_back(o.box);
    b.gt.classes.push_back(o.class_id);
  }
  return b;
}

loss::BatchImage weak_image(const data::Vocabulary& vocab, std::uint64_t seed, int id, bool caption = false) {
  const auto scene = data::generate_scene(seed, small_scene(), vocab);
  loss::BatchImage b;
  b.image = scene.image.to_tensor();
  b.image_id = id;
  b.kind = caption ? data::SampleKind::caption : data::SampleKind::weak;
  for (const auto& o : scene.objects) {
    if (std::find(b.labels.begin(), b.labels.end(), o.class_id) == b.labels.end()) b.labels.push_back(o.class_id);
  }
  std::sort(b.labels.begin(), b.labels.end());
  std::mt19937_64 rng(seed);
  b.caption = data::caption_of(b.labels, vocab, rng);
  return b;
}

struct Grads {
  loss::StepLoss step;
  std::vector<Tensor> grads;
};

Grads run_step(const det::Detector& model, const loss::StepBatch& batch, const loss::LossConfig& cfg,
               const data::Vocabulary& vocab, const det::Detector* teacher = nullptr) {
  ad::Tape tape;
  det::Graph g(tape, model, true);
  Grads out{loss::total_loss(g, batch, cfg, vocab, teacher), {}};
  tape.backward(out.step.total);
  out.grads = g.params().gradients();
  return out;
}

const Tensor& grad_of(const det::Detector& model, const Grads& g, const std::string& name) {
  const auto& e = model.params().entries();
  for (std::size_t k = 0; k < e.size(); ++k) {
    if (e[k].name == name) return g.grads[k];
  }
  FAIL("no parameter " << name);
  return g.grads.front();
}

}  // namespace

TEST_CASE("selectors") {
  SUBCASE("max size ties go to the lowest index") {
    const std::vector<Box> boxes = {{0, 0, 10, 10}, {5, 5, 15, 15}, {0, 0, 6, 6}};
    CHECK(loss::select_max_size(boxes) == 0);
    std::vector<Box> scaled;
    for (const auto& b : boxes) scaled.push_back(scale(b, 2.5));
    CHECK(loss::select_max_size(scaled) == 0);
  }
  SUBCASE("max objectness") {
    const std::vector<double> o = {0.2, 0.9, 0.9};
    CHECK(loss::select_max_objectness(o) == 1);
    std::vector<double> logit;
    for (double v : o) logit.push_back(std::log(v / (1 - v)));
    CHECK(loss::select_max_objectness(logit) == 1);
  }
  SUBCASE("predicted") {
    const std::vector<double> col = {0.1, 2.0};
    CHECK(loss::select_predicted(col) == 1);
  }
  SUBCASE("empty proposal sets are rejected") {
    CHECK_THROWS_AS(loss::select_max_size({}), ValidationError);
  }
}

TEST_CASE("weak losses: hand computations") {
  ad::Tape tape;
  const std::vector<int> classes = {0, 1, 2};

  SUBCASE("max-size uses the larger proposal") {
    const auto props = proposals_of({{0, 0, 6, 6}, {0, 0, 10, 10}});
    auto S = tape.leaf(Tensor({2, 3}, {1, 1, 1, 0.5, -1.0, 2.0}));
    const std::vector<int> labels = {1};
    const auto wl = loss::weak_max_size(props, S, classes, labels);
    CHECK(wl.loss.value().item() == doctest::Approx(pos(-1.0) + neg(0.5) + neg(2.0)).epsilon(1e-12));
    REQUIRE(wl.assignments.size() == 1);
    CHECK(wl.assignments[0].row == 1);
  }
  SUBCASE("other image labels are not negatives") {
    const auto props = proposals_of({{0, 0, 10, 10}});
    auto S = tape.leaf(Tensor({1, 3}, {0.3, -0.2, 0.7}));
    const std::vector<int> labels = {0, 2};
    const auto wl = loss::weak_max_size(props, S, classes, labels);
    const double expected = pos(0.3) + neg(-0.2) + pos(0.7) + neg(-0.2);
    CHECK(std::abs(wl.loss.value().item() - expected) < 1e-9);
  }
  SUBCASE("predicted picks a proposal per label") {
    const auto props = proposals_of({{0, 0, 4, 4}, {10, 10, 20, 20}, {5, 5, 9, 9}});
    const std::vector<int> two = {0, 1};
    auto S = tape.leaf(Tensor({3, 2}, {0.1, 1.5, 2.0, -1.0, 0.3, 0.4}));
    const auto wl = loss::weak_predicted(props, S, two, two);
    CHECK(std::abs(wl.loss.value().item() - (pos(2.0) + pos(1.5))) < 1e-9);
    REQUIRE(wl.assignments.size() == 2);
    CHECK(wl.assignments[0].row == 1);
    CHECK(wl.assignments[1].row == 0);
  }
  SUBCASE("wsddn with two proposals") {
    const auto props = proposals_of({{0, 0, 4, 4}, {10, 10, 20, 20}});
    const std::vector<int> two = {0, 1};
    const std::vector<int> labels = {0};
    auto S = tape.leaf(Tensor({2, 2}, {1.0, -1.0, 0.5, 2.0}));
    auto Wp = tape.leaf(Tensor({2, 2}, {0.0, 1.0, std::log(3.0), 0.0}));
    const auto wl = loss::weak_wsddn(props, S, Wp, two, labels);
    const double e = std::exp(1.0);
    const double agg0 = 0.25 * 1.0 + 0.75 * 0.5;
    const double agg1 = e / (e + 1) * -1.0 + 1 / (e + 1) * 2.0;
    CHECK(std::abs(wl.loss.value().item() - (pos(agg0) + neg(agg1))) < 1e-9);
  }
  SUBCASE("wsddn with one proposal is plain BCE") {
    const auto props = proposals_of({{0, 0, 4, 4}});
    const std::vector<int> labels = {2};
    auto S = tape.leaf(Tensor({1, 3}, {0.2, -0.4, 1.1}));
    auto Wp = tape.leaf(Tensor({1, 3}, {5.0, -3.0, 0.7}));
    const auto wl = loss::weak_wsddn(props, S, Wp, classes, labels);
    CHECK(std::abs(wl.loss.value().item() - (neg(0.2) + neg(-0.4) + pos(1.1))) < 1e-9);
  }
  SUBCASE("dlwl on identical boxes is BCE on the best proposal") {
    const auto props = proposals_of({{2, 2, 12, 12}, {2, 2, 12, 12}, {2, 2, 12, 12}});
    const std::vector<int> labels = {0};
    auto S = tape.leaf(Tensor({3, 3}, {0.1, 0, 0, 0.9, 0.5, -0.5, 0.4, 0, 0}));
    const auto wl = loss::weak_dlwl(props, S, classes, labels, 3, 0.5);
    CHECK(std::abs(wl.loss.value().item() - (pos(0.9) + neg(0.5) + neg(-0.5))) < 1e-9);
    const auto pred = loss::weak_predicted(props, S, classes, labels);
    CHECK(std::abs(wl.loss.value().item() - pred.loss.value().item()) < 1e-12);
  }
  SUBCASE("dlwl averages over fewer clusters than top-k") {
    const auto props = proposals_of({{0, 0, 8, 8}, {20, 20, 30, 30}});
    const std::vector<int> labels = {1};
    auto S = tape.leaf(Tensor({2, 3}, {0.0, 1.0, 0.0, 0.5, -1.0, 0.2}));
    const auto wl = loss::weak_dlwl(props, S, classes, labels, 3, 0.5);
    const double expected = 0.5 * (pos(1.0) + neg(0.0) + neg(0.0)) + 0.5 * (pos(-1.0) + neg(0.5) + neg(0.2));
    CHECK(std::abs(wl.loss.value().item() - expected) < 1e-9);
  }
  SUBCASE("image box equals max-size over the image box alone") {
    const auto props = proposals_of({det::inject_image_box(32, 32)});
    const std::vector<int> labels = {0, 1};
    auto S = tape.leaf(Tensor({1, 3}, {0.3, 0.6, -0.1}));
    CHECK(loss::weak_image_box(S, classes, labels).loss.value().item() ==
          loss::weak_max_size(props, S, classes, labels).loss.value().item());
  }
  SUBCASE("no proposals skips the image") {
    auto S = tape.leaf(Tensor({1, 3}, 0.0));
    const std::vector<int> labels = {0};
    CHECK(loss::weak_max_size({}, S, classes, labels).skipped);
    CHECK(loss::weak_dlwl({}, S, classes, labels, 3, 0.5).skipped);
  }
}

TEST_CASE("dlwl clustering matches the exhaustive reference") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> jitter(-3.0, 3.0), centre(6.0, 40.0), u(-2.0, 2.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + trial % 5;  // up to 6 proposals
    std::vector<std::pair<double, double>> seeds = {{centre(rng), centre(rng)}, {centre(rng), centre(rng)}};
    std::vector<Box> boxes;
    std::vector<double> s;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [cx, cy] = seeds[i % 2];
      boxes.push_back({cx - 6 + jitter(rng), cy - 6 + jitter(rng), cx + 6 + jitter(rng), cy + 6 + jitter(rng)});
      s.push_back(std::round(u(rng) * 4) / 4);
    }
    for (int k : {1, 2, 3}) CHECK(loss::dlwl_peaks(boxes, s, 0.5, k) == dlwl_oracle(boxes, s, 0.5, k));
  }
}

TEST_CASE("weak losses are finite and non-negative") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> big(-40.0, 40.0);
  std::uniform_int_distribution<int> count(1, 6);
  const std::vector<int> classes = {0, 1, 2, 3};
  for (int trial = 0; trial < 50; ++trial) {
    ad::Tape tape;
    const std::size_t n = static_cast<std::size_t>(count(rng));
    std::vector<Box> boxes;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = std::abs(big(rng)) / 2, y = std::abs(big(rng)) / 2;
      boxes.push_back({x, y, x + 1 + std::abs(big(rng)), y + 1 + std::abs(big(rng))});
    }
    const auto props = proposals_of(boxes);
    auto S = tape.leaf(random_tensor({static_cast<Index>(n), 4}, rng, -40, 40));
    auto Wp = tape.leaf(random_tensor({static_cast<Index>(n), 4}, rng, -40, 40));
    std::vector<int> labels = {trial % 4};
    if (trial % 3 == 0) labels.push_back((trial + 1) % 4);
    std::sort(labels.begin(), labels.end());
    for (const auto& wl : {loss::weak_max_size(props, S, classes, labels),
                           loss::weak_max_objectness(props, S, classes, labels),
                           loss::weak_predicted(props, S, classes, labels),
                           loss::weak_wsddn(props, S, Wp, classes, labels),
                           loss::weak_dlwl(props, S, classes, labels, 3, 0.5)}) {
      const double v = wl.loss.value().item();
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
    }
  }
}

TEST_CASE("worked formulas") {
  for (const auto& r : weakvoc::testing::formula_suite()) {
    INFO(r.name);
    CHECK(std::abs(r.got - r.expected) < 1e-9);
  }
}

TEST_CASE("caption loss") {
  SUBCASE("hand computed B = 2") {
    ad::Tape tape;
    auto C = tape.leaf(Tensor({2, 3}, {1, 0, 0, 0, 1, 0}));
    auto F = tape.leaf(Tensor({2, 3}, {1, 0, 0, 0, 1, 0}));
    auto L = loss::caption_loss(F, C, 10.0);
    CHECK(std::abs(L.value().item() - 2 * (pos(10.0) + neg(0.0))) < 1e-9);
    tape.backward(L);
    CHECK(tape.grad(C).data().isZero(0.0));
  }
  SUBCASE("invariant to batch order") {
    std::mt19937_64 rng(6);
    const Tensor F = random_tensor({3, 4}, rng), C = random_tensor({3, 4}, rng, 0, 1);
    Tensor Fp = F, Cp = C;
    const int perm[3] = {2, 0, 1};
    for (int i = 0; i < 3; ++i) {
      Fp.matrix().row(i) = F.matrix().row(perm[i]);
      Cp.matrix().row(i) = C.matrix().row(perm[i]);
    }
    ad::Tape tape;
    const double a = loss::caption_loss(tape.constant(F), tape.constant(C), 10.0).value().item();
    const double b = loss::caption_loss(tape.constant(Fp), tape.constant(Cp), 10.0).value().item();
    CHECK(std::abs(a - b) < 1e-12);
  }
}

TEST_CASE("pseudo labels") {
  const std::vector<det::Detection> dets = {{{0, 0, 5, 5}, 0, 0.7}, {{1, 1, 6, 6}, 1, 0.4}, {{2, 2, 9, 9}, 2, 0.6}};
  const std::vector<int> labels = {0};
  const auto filtered = loss::filter_pseudo_labels(dets, labels, 0.5, true);
  REQUIRE(filtered.size() == 1);
  CHECK(filtered[0] == dets[0]);
  const auto all = loss::filter_pseudo_labels(dets, labels, 0.5, false);
  REQUIRE(all.size() == 2);
  CHECK(all[1] == dets[2]);
  CHECK(loss::filter_pseudo_labels(dets, labels, 1.0, false).empty());
}

TEST_CASE("federated class sampling") {
  std::mt19937_64 rng(1);
  const int C = 30, m = 10, draws = 10000;
  const std::vector<int> positives = {3, 17};
  std::vector<int> hits(C, 0);
  for (int d = 0; d < draws; ++d) {
    const auto s = loss::federated_classes(C, m, positives, rng);
    CHECK(std::is_sorted(s.begin(), s.end()));
    for (int c : s) ++hits[static_cast<std::size_t>(c)];
  }
  const double p = static_cast<double>(m) / C;
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (int c = 0; c < C; ++c) {
    if (c == 3 || c == 17) {
      CHECK(hits[static_cast<std::size_t>(c)] == draws);
    } else {
      CHECK(std::abs(hits[static_cast<std::size_t>(c)] - draws * p) <= 3 * sigma);
    }
  }
  CHECK(loss::federated_classes(C, C, positives, rng).size() == 30);

  // The per-class bands above are 28 simultaneous 3σ tests; across many
  // seeds the squared z-scores must average to one.
  double z2 = 0.0;
  int n = 0;
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    std::mt19937_64 r(seed);
    std::vector<int> h(C, 0);
    for (int d = 0; d < draws; ++d) {
      for (int c : loss::federated_classes(C, m, positives, r)) ++h[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < C; ++c) {
      if (c == 3 || c == 17) continue;
      const double z = (h[static_cast<std::size_t>(c)] - draws * p) / sigma;
      z2 += z * z;
      ++n;
    }
  }
  CHECK(z2 / n == doctest::Approx(1.0).epsilon(0.2));
}

TEST_CASE("proposal-head targets") {
  const std::vector<Box> gt = {{0, 0, 16, 16}, {0, 0, 32, 32}};
  const auto t = loss::rpn_targets(gt, 4, 4, 8);
  CHECK(t.num_positive == 16);
  // Cell (0,0) sits inside both boxes and takes the smaller one.
  CHECK(t.distances[0] == 0.5);
  CHECK(t.distances[2 * 16] == 1.5);
  // Cell (3,3) is only inside the large box.
  CHECK(t.distances[2 * 16 + 15] == doctest::Approx(0.5));
  CHECK(t.distances[15] == doctest::Approx(3.5));

  const auto none = loss::rpn_targets({}, 4, 4, 8);
  CHECK(none.num_positive == 0);
  CHECK(none.objectness.data().isZero(0.0));
}

TEST_CASE("roi matching and regression") {
  const std::vector<Box> gt = {{0, 0, 10, 10}, {20, 20, 30, 30}};
  const std::vector<Box> rois = {{1, 1, 10, 10}, {40, 40, 50, 50}, {20, 21, 30, 30}};
  CHECK(loss::match_rois(rois, gt, 0.5) == std::vector<int>{0, -1, 1});

  ad::Tape tape;
  Tensor perfect({2, 4});
  const std::vector<Box> from = {rois[0], rois[2]}, to = {gt[0], gt[1]};
  for (int r = 0; r < 2; ++r) {
    const auto d = det::encode_deltas(from[static_cast<std::size_t>(r)], to[static_cast<std::size_t>(r)]);
    for (int k = 0; k < 4; ++k) perfect[r * 4 + k] = d[static_cast<std::size_t>(k)];
  }
  CHECK(loss::regression_l1(tape.constant(perfect), from, to).value().item() == 0.0);
}

TEST_CASE("step objective") {
  const auto vocab = data::default_vocabulary();
  det::DetectorConfig dcfg;
  dcfg.embedding = embed::EmbeddingMode::trained;
  det::Detector model(dcfg, vocab, 13);

  loss::StepBatch det_batch;
  det_batch.det = {det_image(vocab, 1, 0), det_image(vocab, 2, 1)};
  det_batch.det_fed_sample = {0, 4, 9};
  loss::LossConfig cfg;

  SUBCASE("detection images have no weak term") {
    const auto r = run_step(model, det_batch, cfg, vocab);
    CHECK(r.step.terms.count("weak") == 0);
    CHECK(r.step.terms.count("rpn") == 1);
    CHECK(std::isfinite(r.step.terms.at("total")));
  }
  SUBCASE("classes outside the federated set get no gradient") {
    const auto r = run_step(model, det_batch, cfg, vocab);
    std::vector<int> used(det_batch.det_fed_sample);
    for (const auto& b : det_batch.det) used.insert(used.end(), b.gt.classes.begin(), b.gt.classes.end());
    const Tensor& g = grad_of(model, r, "cls.weight");
    for (int c = 0; c < vocab.num_classes(); ++c) {
      const bool in = std::find(used.begin(), used.end(), c) != used.end();
      if (!in) CHECK(g.matrix().row(c).isZero(0.0));
    }
    CHECK_FALSE(g.matrix().isZero(0.0));
  }

  SUBCASE("novel rows get no gradient from detection images") {
    loss::StepBatch all_base = det_batch;
    all_base.det_fed_sample.clear();  // every base class
    const auto r = run_step(model, all_base, cfg, vocab);
    const Tensor& g = grad_of(model, r, "cls.weight");
    for (int c : vocab.novel_ids) CHECK(g.matrix().row(c).isZero(0.0));
    for (int c : vocab.base_ids) CHECK_FALSE(g.matrix().row(c).isZero(0.0));
  }

  loss::StepBatch weak_batch;
  weak_batch.weak = {weak_image(vocab, 5, 10), weak_image(vocab, 6, 11)};

  SUBCASE("weak images never train box regression") {
    for (auto v : {loss::WeakVariant::max_size, loss::WeakVariant::image_box, loss::WeakVariant::max_object_score,
                   loss::WeakVariant::predicted, loss::WeakVariant::wsddn, loss::WeakVariant::dlwl}) {
      cfg.variant = v;
      const auto r = run_step(model, weak_batch, cfg, vocab);
      CHECK(grad_of(model, r, "box.weight").data().isZero(0.0));
      CHECK(grad_of(model, r, "rpn.box.weight").data().isZero(0.0));
      CHECK(r.step.terms.at("total") > 0.0);
    }
  }
  SUBCASE("lambda zero removes every weak gradient") {
    cfg.lambda_weak = 0.0;
    const auto r = run_step(model, weak_batch, cfg, vocab);
    for (const auto& g : r.grads) CHECK(g.data().isZero(0.0));
  }
  SUBCASE("assignment records") {
    cfg.variant = loss::WeakVariant::max_size;
    const auto r = run_step(model, weak_batch, cfg, vocab);
    std::size_t labels = 0;
    for (const auto& b : weak_batch.weak) labels += b.labels.size();
    CHECK(r.step.assignments.size() == labels);
    for (const auto& a : r.step.assignments) {
      CHECK(a.box.valid());
      CHECK(a.strategy == "max-size");
    }
  }
  SUBCASE("separate head leaves the shared RoI head untouched by weak data") {
    cfg.shared_classifier = false;
    const auto r = run_step(model, weak_batch, cfg, vocab);
    CHECK(grad_of(model, r, "roi.fc2.weight").data().isZero(0.0));
    CHECK_FALSE(grad_of(model, r, "sep.fc2.weight").data().isZero(0.0));
  }
  SUBCASE("caption loss") {
    det::Detector attr({}, vocab, 13);
    loss::StepBatch cap;
    cap.weak = {weak_image(vocab, 7, 20, true), weak_image(vocab, 8, 21, true)};
    cfg.variant = loss::WeakVariant::caption;
    const auto r = run_step(attr, cap, cfg, vocab);
    CHECK(r.step.terms.count("caption") == 1);
    CHECK(r.step.caption_batches_without_negatives == 0);
    CHECK(grad_of(attr, r, "box.weight").data().isZero(0.0));
  }
  SUBCASE("test images cannot be trained on") {
    loss::StepBatch bad = det_batch;
    bad.det[0].kind = data::SampleKind::test;
    CHECK_THROWS_AS(run_step(model, bad, cfg, vocab), ValidationError);
  }
}

TEST_CASE("image-box loss reaches the backbone") {
  const auto vocab = data::default_vocabulary();
  det::Detector model({}, vocab, 21);
  loss::StepBatch batch;
  batch.weak = {weak_image(vocab, 30, 0)};
  loss::LossConfig cfg;
  cfg.variant = loss::WeakVariant::image_box;
  const auto r = run_step(model, batch, cfg, vocab);

  const std::string name = "backbone.conv1.weight";
  const Tensor& g = grad_of(model, r, name);
  for (Index i : {Index{0}, Index{37}, Index{211}}) {
    det::Detector probe = model;
    const double x0 = probe.params().at(name)[i], h = 1e-5;
    auto value = [&](double x) {
      probe.params().at(name)[i] = x;
      ad::Tape tape;
      det::Graph graph(tape, probe, false);
      return loss::total_loss(graph, batch, cfg, vocab).total.value().item();
    };
    const double numeric = (value(x0 + h) - value(x0 - h)) / (2 * h);
    CHECK(std::abs(g[i] - numeric) <= 1e-4 * std::max({std::abs(g[i]), std::abs(numeric), 1e-7}));
  }
}

#ifndef WEAKVOC_TESTS_SUITES_HPP
#define WEAKVOC_TESTS_SUITES_HPP

// Checks shared by the unit tests and the acceptance runner.

#include <cmath>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "weakvoc/losses.hpp"

namespace weakvoc::testing {

struct GradResult {
  std::string name;
  std::uint64_t seed;
  double error;
};

/// Finite-difference check of every differentiable op and every loss
/// variant on five seeded instances each.
inline std::vector<GradResult> gradient_suite() {
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    LossBuilder build;
  };
  // a weighted sum makes every output entry matter to the scalar loss
  auto probe = [](ad::Tape& t, ad::Var y) {
    Tensor w(y.shape());
    for (Index i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.37 * static_cast<double>(i));
    return ad::sum(y * t.constant(w));
  };
  ad::Var none;
  const std::vector<Case> ops = {
      {"add", {{3, 2}, {3, 2}}, [&](ad::Tape& t, auto& v) { return probe(t, v[0] + v[1]); }},
      {"sub", {{3, 2}, {3, 2}}, [&](ad::Tape& t, auto& v) { return probe(t, v[0] - v[1]); }},
      {"mul", {{3, 2}, {3, 2}}, [&](ad::Tape& t, auto& v) { return probe(t, v[0] * v[1]); }},
      {"scale", {{4}}, [&](ad::Tape& t, auto& v) { return probe(t, 2.5 * v[0]); }},
      {"add_rowwise", {{3, 4}, {4}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::add_rowwise(v[0], v[1])); }},
      {"relu", {{5, 3}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::relu(v[0])); }},
      {"sigmoid", {{5, 3}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::sigmoid(v[0])); }},
      {"abs", {{6}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::abs(v[0])); }},
      {"matmul", {{3, 4}, {4, 2}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::matmul(v[0], v[1])); }},
      {"transpose", {{3, 4}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::transpose(v[0])); }},
      {"softmax0", {{4, 3}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::softmax(v[0], 0)); }},
      {"softmax1", {{4, 3}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::softmax(v[0], 1)); }},
      {"sum_axis", {{4, 3}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::sum(v[0], 0)); }},
      {"mean", {{4, 3}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::mean(v[0] * v[0])); }},
      {"concat", {{2, 3}, {1, 3}}, [&](ad::Tape& t, auto& v) {
         std::vector<ad::Var> parts{v[0], v[1]};
         return probe(t, ad::concat(parts));
       }},
      {"slice", {{4, 2}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::slice(v[0], 1, 3)); }},
      {"gather", {{4, 3}}, [&](ad::Tape& t, auto& v) {
         std::vector<Index> rows{2, 0, 2}, cols{1, 2};
         return probe(t, ad::gather_cols(ad::gather_rows(v[0], rows), cols));
       }},
      {"l2_normalize", {{3, 4}}, [&](ad::Tape& t, auto& v) { return probe(t, ad::l2_normalize(v[0])); }},
      {"conv2d", {{2, 6, 6}, {3, 2, 3, 3}, {3}},
       [&](ad::Tape& t, auto& v) { return probe(t, ad::conv2d(v[0], v[1], v[2], 2, 1)); }},
      {"conv2d_batched", {{2, 2, 5, 5}, {2, 2, 3, 3}},
       [&](ad::Tape& t, auto& v) { return probe(t, ad::conv2d(v[0], v[1], none, 1, 1)); }},
      {"roi_align", {{2, 5, 6}}, [&](ad::Tape& t, auto& v) {
         std::vector<Box> boxes{{0.3, 0.2, 4.1, 3.9}, {2.0, 1.0, 7.5, 5.5}};
         return probe(t, ad::roi_align(v[0], boxes, 3, 1.0));
       }},
  };

  std::vector<GradResult> out;
  for (const Case& c : ops) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      std::mt19937_64 rng(seed * 977 + 13);
      std::vector<Tensor> inputs;
      for (const Shape& s : c.shapes) inputs.push_back(random_tensor(s, rng));
      out.push_back({c.name, seed, gradcheck(c.build, inputs)});
    }
  }
  // BCE needs fixed binary targets per instance
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor targets = random_targets({3, 4}, rng);
    const Tensor logits = random_tensor({3, 4}, rng, -4, 4);
    out.push_back({"bce_with_logits", seed,
                   gradcheck([&](ad::Tape&, auto& v) { return ad::bce_with_logits(v[0], targets); }, {logits})});
  }

  const std::vector<int> classes = {0, 1, 2, 3, 4};
  const std::vector<int> labels = {1, 3};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<Box> boxes;
    for (int i = 0; i < 5; ++i) {
      std::uniform_real_distribution<double> p(0, 20), sz(4, 14);
      const double x = p(rng), y = p(rng);
      boxes.push_back({x, y, x + sz(rng), y + sz(rng)});
    }
    const std::vector<double> obj = {0.1, 0.7, 0.3, 0.6, 0.2};
    std::vector<det::Proposal> props;
    for (std::size_t i = 0; i < boxes.size(); ++i) props.push_back({boxes[i], obj[i], 0});
    const Tensor S = random_tensor({5, 5}, rng, -3, 3);
    const Tensor Wp = random_tensor({5, 5}, rng, -3, 3);

    using Fn = std::function<loss::WeakLoss(ad::Var, ad::Var)>;
    const std::vector<std::pair<const char*, Fn>> variants = {
        {"max-size", [&](ad::Var s, ad::Var) { return loss::weak_max_size(props, s, classes, labels); }},
        {"max-obj-score", [&](ad::Var s, ad::Var) { return loss::weak_max_objectness(props, s, classes, labels); }},
        {"image-box", [&](ad::Var s, ad::Var) { return loss::weak_image_box(ad::slice(s, 0, 1), classes, labels); }},
        {"predicted", [&](ad::Var s, ad::Var) { return loss::weak_predicted(props, s, classes, labels); }},
        {"wsddn", [&](ad::Var s, ad::Var w) { return loss::weak_wsddn(props, s, w, classes, labels); }},
        {"dlwl", [&](ad::Var s, ad::Var) { return loss::weak_dlwl(props, s, classes, labels, 3, 0.5); }},
    };
    for (const auto& [name, fn] : variants) {
      out.push_back({name, seed,
                     gradcheck([&](ad::Tape&, const std::vector<ad::Var>& in) { return fn(in[0], in[1]).loss; },
                               {S, Wp})});
    }
    // Caption embeddings are data, so only F is checked.
    const Tensor F = random_tensor({3, 6}, rng);
    const Tensor C = random_tensor({3, 6}, rng, 0.1, 1.0);
    out.push_back({"caption", seed, gradcheck([&](ad::Tape& t, const std::vector<ad::Var>& in) {
                     return loss::caption_loss(in[0], t.constant(C), 10.0);
                   },
                                              {F})});
    const Tensor D = random_tensor({3, 4}, rng, -0.5, 0.5);
    const std::vector<Box> rois = {boxes[0], boxes[1], boxes[2]};
    const std::vector<Box> targets = {boxes[3], boxes[4], boxes[0]};
    out.push_back({"regression_l1", seed, gradcheck([&](ad::Tape&, const std::vector<ad::Var>& in) {
                     return loss::regression_l1(in[0], rois, targets);
                   },
                                                    {D})});
  }
  return out;
}

struct FormulaResult {
  std::string name;
  double got;
  double expected;
};

/// Worked examples with closed-form values.
inline std::vector<FormulaResult> formula_suite() {
  // −log σ(s) and −log(1 − σ(s)), written independently of the library.
  auto pos = [](double s) { return std::log1p(std::exp(-s)); };
  auto neg = [](double s) { return std::log1p(std::exp(s)); };
  auto props_of = [](const std::vector<Box>& boxes) {
    std::vector<det::Proposal> out;
    for (const Box& b : boxes) out.push_back({b, 0.5, 0});
    return out;
  };
  ad::Tape tape;
  const std::vector<int> three = {0, 1, 2}, two = {0, 1};
  std::vector<FormulaResult> out;

  out.push_back({"bce zero logits", ad::bce_with_logits(tape.leaf(Tensor({3}, 0.0)), Tensor({3}, {0, 1, 0})).value().item(),
                 3 * std::log(2.0)});

  {
    auto C = tape.leaf(Tensor({2, 3}, {1, 0, 0, 0, 1, 0}));
    auto F = tape.leaf(Tensor({2, 3}, {1, 0, 0, 0, 1, 0}));
    out.push_back({"caption B=2", loss::caption_loss(F, C, 10.0).value().item(), 2 * (pos(10.0) + neg(0.0))});
  }
  {
    auto S = tape.leaf(Tensor({2, 3}, {1, 1, 1, 0.5, -1.0, 2.0}));
    const std::vector<int> labels = {1};
    out.push_back({"max-size", loss::weak_max_size(props_of({{0, 0, 6, 6}, {0, 0, 10, 10}}), S, three, labels)
                                   .loss.value().item(),
                   pos(-1.0) + neg(0.5) + neg(2.0)});
  }
  {
    auto S = tape.leaf(Tensor({3, 2}, {0.1, 1.5, 2.0, -1.0, 0.3, 0.4}));
    const auto props = props_of({{0, 0, 4, 4}, {10, 10, 20, 20}, {5, 5, 9, 9}});
    out.push_back({"predicted", loss::weak_predicted(props, S, two, two).loss.value().item(), pos(2.0) + pos(1.5)});
  }
  {
    const std::vector<int> labels = {0};
    auto S = tape.leaf(Tensor({2, 2}, {1.0, -1.0, 0.5, 2.0}));
    auto Wp = tape.leaf(Tensor({2, 2}, {0.0, 1.0, std::log(3.0), 0.0}));
    const double e = std::exp(1.0);
    const double agg0 = 0.25 * 1.0 + 0.75 * 0.5;
    const double agg1 = e / (e + 1) * -1.0 + 1 / (e + 1) * 2.0;
    out.push_back({"wsddn", loss::weak_wsddn(props_of({{0, 0, 4, 4}, {10, 10, 20, 20}}), S, Wp, two, labels)
                                .loss.value().item(),
                   pos(agg0) + neg(agg1)});
  }
  {
    const std::vector<int> labels = {1};
    auto S = tape.leaf(Tensor({2, 3}, {0.0, 1.0, 0.0, 0.5, -1.0, 0.2}));
    out.push_back({"dlwl two clusters",
                   loss::weak_dlwl(props_of({{0, 0, 8, 8}, {20, 20, 30, 30}}), S, three, labels, 3, 0.5)
                       .loss.value().item(),
                   0.5 * (pos(1.0) + neg(0.0) + neg(0.0)) + 0.5 * (pos(-1.0) + neg(0.5) + neg(0.2))});
  }
  {
    const std::vector<int> labels = {0};
    auto S = tape.leaf(Tensor({3, 3}, {0.1, 0, 0, 0.9, 0.5, -0.5, 0.4, 0, 0}));
    const auto props = props_of({{2, 2, 12, 12}, {2, 2, 12, 12}, {2, 2, 12, 12}});
    out.push_back({"dlwl one cluster", loss::weak_dlwl(props, S, three, labels, 3, 0.5).loss.value().item(),
                   pos(0.9) + neg(0.5) + neg(-0.5)});
  }
  return out;
}

}  // namespace weakvoc::testing

#endif  // WEAKVOC_TESTS_SUITES_HPP

#include <doctest.h>

#include <cmath>

#include "suites.hpp"
#include "weakvoc/autodiff.hpp"

using namespace weakvoc;
using weakvoc::testing::random_tensor;

TEST_CASE("matmul") {
  ad::Tape tape;
  SUBCASE("identity") {
    auto a = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
    auto b = tape.constant(Tensor({2, 2}, {5, 6, 7, 8}));
    CHECK(ad::matmul(a, b).value() == Tensor({2, 2}, {5, 6, 7, 8}));
  }
  SUBCASE("hand computed") {
    auto a = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    auto b = tape.constant(Tensor({2, 1}, {5, 6}));
    CHECK(ad::matmul(a, b).value() == Tensor({2, 1}, {17, 39}));
  }
  SUBCASE("dimension error names both shapes") {
    auto a = tape.constant(Tensor({2, 3}));
    auto b = tape.constant(Tensor({2, 3}));
    try {
      ad::matmul(a, b);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      CHECK(std::string(e.what()).find("[2x3] and [2x3]") != std::string::npos);
    }
  }
}

TEST_CASE("conv2d") {
  ad::Tape tape;
  ad::Var none;
  SUBCASE("1x1 kernel scales") {
    auto x = tape.constant(Tensor({1, 3, 3}, 1.0));
    auto w = tape.constant(Tensor({1, 1, 1, 1}, {2.0}));
    CHECK(ad::conv2d(x, w, none, 1, 0).value() == Tensor({1, 3, 3}, 2.0));
  }
  SUBCASE("3x3 ones kernel sums") {
    auto x = tape.constant(Tensor({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
    auto w = tape.constant(Tensor({1, 1, 3, 3}, 1.0));
    auto y = ad::conv2d(x, w, none, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1});
    CHECK(y.value()[0] == 45.0);
  }
  SUBCASE("stride 2 shape") {
    auto x = tape.constant(Tensor({1, 4, 4}, 1.0));
    auto w = tape.constant(Tensor({1, 1, 2, 2}, 1.0));
    CHECK(ad::conv2d(x, w, none, 2, 0).shape() == Shape{1, 2, 2});
  }
  SUBCASE("non-positive stride is a configuration error") {
    auto x = tape.constant(Tensor({1, 4, 4}, 1.0));
    auto w = tape.constant(Tensor({1, 1, 2, 2}, 1.0));
    CHECK_THROWS_AS(ad::conv2d(x, w, none, 0, 0), ConfigError);
  }
  SUBCASE("batched input equals per-image calls") {
    std::mt19937_64 rng(3);
    Tensor xb = random_tensor({2, 2, 5, 5}, rng);
    auto w = tape.constant(random_tensor({3, 2, 3, 3}, rng));
    auto b = tape.constant(random_tensor({3}, rng));
    auto yb = ad::conv2d(tape.constant(xb), w, b, 2, 1);
    for (Index n = 0; n < 2; ++n) {
      auto xn = tape.constant(Tensor({2, 5, 5}, Eigen::VectorXd(xb.data().segment(n * 50, 50))));
      auto yn = ad::conv2d(xn, w, b, 2, 1);
      CHECK((yb.value().data().segment(n * yn.value().size(), yn.value().size()) - yn.value().data()).norm() < 1e-12);
    }
  }
}

TEST_CASE("bce_with_logits") {
  ad::Tape tape;
  SUBCASE("zero logits") {
    auto s = tape.constant(Tensor({3}, {0, 0, 0}));
    CHECK(ad::bce_with_logits(s, Tensor({3}, {0, 1, 0})).value().item() == doctest::Approx(3 * std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("positive logit") {
    auto s = tape.constant(Tensor({1}, {2.0}));
    CHECK(ad::bce_with_logits(s, Tensor({1}, {1.0})).value().item() == doctest::Approx(std::log1p(std::exp(-2.0))));
    CHECK(std::abs(ad::bce_with_logits(s, Tensor({1}, {1.0})).value().item() - 0.12693) < 1e-5);
  }
  SUBCASE("stable at |logit| = 100") {
    auto s = tape.leaf(Tensor({2}, {-100.0, 100.0}));
    auto l = ad::bce_with_logits(s, Tensor({2}, {0.0, 1.0}));
    CHECK(std::isfinite(l.value().item()));
    CHECK(l.value().item() < 1e-40);
    tape.backward(l);
    CHECK(tape.grad(s).all_finite());
    auto l2 = ad::bce_with_logits(s, Tensor({2}, {1.0, 0.0}));
    CHECK(l2.value().item() == doctest::Approx(200.0));
  }
  SUBCASE("non-binary target") {
    auto s = tape.constant(Tensor({1}, {0.0}));
    CHECK_THROWS_AS(ad::bce_with_logits(s, Tensor({1}, {0.5})), ValidationError);
  }
  SUBCASE("zero weight masks entry") {
    auto s = tape.leaf(Tensor({2}, {0.3, -0.7}));
    Tensor w({2}, {1.0, 0.0});
    auto l = ad::bce_with_logits(s, Tensor({2}, {1.0, 0.0}), &w);
    CHECK(l.value().item() == doctest::Approx(std::log1p(std::exp(-0.3))));
    tape.backward(l);
    CHECK(tape.grad(s)[1] == 0.0);
  }
}

TEST_CASE("roi_pool_bilinear") {
  ad::Tape tape;
  SUBCASE("constant field") {
    auto f = tape.constant(Tensor({2, 4, 4}, 7.0));
    for (const Box& b : {Box{0, 0, 4, 4}, Box{-3, 1, 2, 9}, Box{1.2, 0.4, 1.7, 3.3}}) {
      auto y = ad::roi_pool_bilinear(f, b, 3);
      CHECK(y.shape() == Shape{2, 3, 3});
      CHECK((y.value().data().array() - 7.0).abs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("centre of a 2x2 map") {
    auto f = tape.constant(Tensor({1, 2, 2}, {0, 1, 2, 3}));
    CHECK(ad::roi_pool_bilinear(f, Box{0, 0, 2, 2}, 1).value()[0] == doctest::Approx(1.5));
  }
  SUBCASE("linear ramp reproduced at sample x") {
    Tensor ramp({1, 6, 8});
    for (Index y = 0; y < 6; ++y)
      for (Index x = 0; x < 8; ++x) ramp[y * 8 + x] = static_cast<double>(x);
    auto f = tape.constant(ramp);
    const Box b{2.0, 1.0, 6.5, 5.0};
    const int P = 3;
    auto out = ad::roi_pool_bilinear(f, b, P);
    for (int py = 0; py < P; ++py) {
      for (int px = 0; px < P; ++px) {
        const double fx = b.x1 + (px + 0.5) * b.width() / P - 0.5;
        CHECK(out.value()[py * P + px] == doctest::Approx(fx).epsilon(1e-12));
      }
    }
  }
  SUBCASE("degenerate box") {
    auto f = tape.constant(Tensor({1, 4, 4}, 1.0));
    CHECK_THROWS_AS(ad::roi_pool_bilinear(f, Box{1, 1, 1, 3}, 2), ValidationError);
  }
}

TEST_CASE("l2_normalize") {
  ad::Tape tape;
  CHECK(ad::l2_normalize(tape.constant(Tensor({2}, {3, 4}))).value().data().isApprox(Eigen::Vector2d(0.6, 0.8)));
  CHECK(ad::l2_normalize(tape.constant(Tensor({2}, {0, 0}))).value() == Tensor({2}, {0, 0}));
  std::mt19937_64 rng(11);
  for (int i = 0; i < 20; ++i) {
    auto v = ad::l2_normalize(tape.constant(random_tensor({7}, rng, -50, 50)));
    CHECK(std::abs(v.value().data().norm() - 1.0) < 1e-9);
  }
}

TEST_CASE("backward") {
  SUBCASE("x*x at 3") {
    ad::Tape tape;
    auto x = tape.leaf(Tensor({1}, {3.0}));
    tape.backward(ad::sum(x * x));
    CHECK(tape.grad(x)[0] == 6.0);
  }
  SUBCASE("disconnected leaf gets exact zero") {
    ad::Tape tape;
    auto x = tape.leaf(Tensor({2}, {1.0, 2.0}));
    auto unused = tape.leaf(Tensor({3}, {1.0, 2.0, 3.0}));
    tape.backward(ad::sum(x));
    CHECK(tape.grad(unused) == Tensor({3}, 0.0));
  }
  SUBCASE("non-scalar loss") {
    ad::Tape tape;
    auto x = tape.leaf(Tensor({2}, {1.0, 2.0}));
    CHECK_THROWS_AS(tape.backward(x), ValidationError);
  }
  SUBCASE("repeat backward is idempotent") {
    ad::Tape tape;
    auto x = tape.leaf(Tensor({1}, {2.0}));
    auto l = ad::sum(x * x * x);
    tape.backward(l);
    tape.backward(l);
    CHECK(tape.grad(x)[0] == 12.0);
  }
}

TEST_CASE("softmax over each axis sums to one") {
  ad::Tape tape;
  std::mt19937_64 rng(5);
  auto x = tape.constant(random_tensor({3, 4}, rng, -100, 100));
  auto a0 = ad::softmax(x, 0).value().matrix().colwise().sum();
  auto a1 = ad::softmax(x, 1).value().matrix().rowwise().sum();
  CHECK((a0.array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK((a1.array() - 1.0).abs().maxCoeff() < 1e-12);
  CHECK(ad::softmax(x, 0).value().all_finite());
}

TEST_CASE("finite-difference agreement of every differentiable op and loss") {
  for (const auto& r : weakvoc::testing::gradient_suite()) {
    INFO(r.name << " seed " << r.seed);
    CHECK(r.error < 1e-4);
  }
}

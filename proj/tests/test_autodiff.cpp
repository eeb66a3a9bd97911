#include <doctest.h>

#include <cmath>

#include "kne/autodiff.hpp"
#include "test_support.hpp"

using namespace kne;
using kne::testing::random_tensor;

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("matmul of ones counts the inner dimension") {
  Tensor a = Tensor::full({2, 3}, 1.0);
  Tensor b = Tensor::full({3, 2}, 1.0);
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == std::vector<long>{2, 2});
  for (long i = 0; i < 4; ++i) CHECK(c.at(i) == doctest::Approx(3.0));
}

TEST_CASE("softmax of a constant row is uniform") {
  Tensor y = softmax(Tensor({3}, {0.0, 0.0, 0.0}));
  for (long i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("silu at zero and rms_normalize of an all-equal vector") {
  CHECK(silu(Tensor::scalar(0.0)).scalar_value() == 0.0);
  const double c = 2.5;
  Tensor gain({4}, {1.0, 2.0, 3.0, 4.0});
  Tensor y = rms_normalize(Tensor::full({4}, c), gain);
  const double expected_dir = c / std::sqrt(c * c + 1e-6);
  for (long i = 0; i < 4; ++i)
    CHECK(y.at(i) == doctest::Approx(expected_dir * gain.at(i)).epsilon(1e-9));
}

TEST_CASE("backward of sum is all-ones") {
  Rng rng(1);
  Tensor x = random_tensor({3, 5}, rng);
  Tape tape;
  Tensor xl = tape.leaf(x);
  Tensor s = reduce_sum(xl);
  GradientMap gm = tape.backward(s);
  Tensor g = gm.grad(xl);
  REQUIRE(g.shape() == x.shape());
  for (long i = 0; i < g.numel(); ++i) CHECK(g.at(i) == 1.0);
}

TEST_CASE("backward of a dot product swaps the operands") {
  Rng rng(2);
  Tensor x = random_tensor({6}, rng);
  Tensor y = random_tensor({6}, rng);
  Tape tape;
  Tensor xl = tape.leaf(x), yl = tape.leaf(y);
  GradientMap gm = tape.backward(reduce_sum(mul(xl, yl)));
  Tensor gx = gm.grad(xl), gy = gm.grad(yl);
  for (long i = 0; i < 6; ++i) {
    CHECK(gx.at(i) == doctest::Approx(y.at(i)));
    CHECK(gy.at(i) == doctest::Approx(x.at(i)));
  }
}

TEST_CASE("random chain of three primitives matches finite differences") {
  Rng rng(3);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor a = random_tensor({4, 4}, rng);
    Tensor b = random_tensor({4, 4}, rng);
    Tensor c = random_tensor({4, 4}, rng);
    auto f = [](const std::vector<Tensor>& in) {
      return reduce_sum(mul(silu(matmul(in[0], in[1])), in[2]));
    };
    CHECK(grad_check(f, {a, b, c}, 1e-5) < 1e-4);
  }
}

TEST_CASE("grad_check on a sum of squares is tight") {
  Rng rng(4);
  Tensor x = random_tensor({5}, rng);
  auto f = [](const std::vector<Tensor>& in) { return reduce_sum(mul(in[0], in[0])); };
  CHECK(grad_check(f, {x}, 1e-5) < 1e-6);
}

TEST_CASE("grad_check on a constant function is exactly zero") {
  Rng rng(5);
  Tensor x = random_tensor({3}, rng);
  auto f = [](const std::vector<Tensor>&) { return Tensor::scalar(7.0); };
  CHECK(grad_check(f, {x}, 1e-5) == 0.0);
}

// Weighted sums keep the per-primitive checks away from degenerate
// gradients (a plain sum of softmax outputs is constant, for instance).
TEST_CASE("every primitive passes finite-difference checks at random points") {
  Rng rng(6);
  const double tol = 1e-4;
  const double step = 1e-5;
  for (int rep = 0; rep < 20; ++rep) {
    Tensor w34 = random_tensor({3, 4}, rng);
    Tensor w33 = random_tensor({3, 3}, rng);
    Tensor w43 = random_tensor({4, 3}, rng);
    Tensor w24 = random_tensor({2, 4}, rng);
    Tensor w74 = random_tensor({7, 4}, rng);
    Tensor w38 = random_tensor({3, 8}, rng);
    Tensor w32 = random_tensor({3, 2}, rng);

    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 3}, rng);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(matmul(in[0], in[1]), w33));
          }, {a, b}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(transpose(in[0]), w43));
          }, {a}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(add(in[0], in[1]), w34));
          }, {a, random_tensor({3, 4}, rng)}, step) < tol);

    // Row-vector broadcast add.
    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(add(in[0], in[1]), w34));
          }, {a, random_tensor({4}, rng)}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(mul(in[0], in[1]), w34));
          }, {a, random_tensor({3, 4}, rng)}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(scale(in[0], -2.75), w34));
          }, {a}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(softmax(in[0]), w34));
          }, {a}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(log(in[0]), w34));
          }, {random_tensor({3, 4}, rng, 0.5, 2.0)}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(exp(in[0]), w34));
          }, {a}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(silu(in[0]), w34));
          }, {random_tensor({3, 4}, rng, -3.0, 3.0)}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(rms_normalize(in[0], in[1]), w34));
          }, {a, random_tensor({4}, rng, 0.5, 1.5)}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(rows(in[0], {3, 0, 3}), w34));
          }, {random_tensor({4, 4}, rng)}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(row_scatter(in[0], {2, 0}, 3), w34));
          }, {w24}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(concat({in[0], in[1]}, 0), w74));
          }, {a, random_tensor({4, 4}, rng)}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(concat({in[0], in[1]}, 1), w38));
          }, {a, random_tensor({3, 4}, rng)}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(slice(in[0], 0, 1, 2), w24));
          }, {a}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return reduce_sum(mul(slice(in[0], 1, 1, 2), w32));
          }, {a}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return scale(reduce_sum(in[0]), 0.37);
          }, {a}, step) < tol);

    CHECK(grad_check([&](const std::vector<Tensor>& in) {
            return cross_entropy_with_logits(in[0], {{0, 2}, {2, 0}});
          }, {random_tensor({3, 4}, rng, -2.0, 2.0)}, step) < tol);
  }
}

TEST_CASE("a leaf feeding two consumers accumulates gradient") {
  Tensor x = Tensor({2}, {1.5, -0.5});
  Tape tape;
  Tensor xl = tape.leaf(x);
  GradientMap gm = tape.backward(reduce_sum(add(xl, xl)));
  Tensor g = gm.grad(xl);
  CHECK(g.at(0) == 2.0);
  CHECK(g.at(1) == 2.0);
}

TEST_CASE("backward is pure: forward values unchanged, repeatable") {
  Rng rng(7);
  Tensor a = random_tensor({3, 3}, rng);
  Tape tape;
  Tensor al = tape.leaf(a);
  Tensor y = silu(matmul(al, transpose(al)));
  Tensor s = reduce_sum(y);
  std::vector<double> y_before = y.vec();
  double s_before = s.scalar_value();

  GradientMap g1 = tape.backward(s);
  CHECK(y.vec() == y_before);
  CHECK(s.scalar_value() == s_before);

  GradientMap g2 = tape.backward(s);
  CHECK(g1.grad(al).vec() == g2.grad(al).vec());
}

TEST_CASE("unreachable leaves get zero gradients") {
  Tape tape;
  Tensor used = tape.leaf(Tensor({2}, {1.0, 2.0}));
  Tensor unused = tape.leaf(Tensor({3}, {1.0, 2.0, 3.0}));
  GradientMap gm = tape.backward(reduce_sum(used));
  CHECK_FALSE(gm.reachable(unused));
  Tensor g = gm.grad(unused);
  REQUIRE(g.shape() == std::vector<long>{3});
  for (long i = 0; i < 3; ++i) CHECK(g.at(i) == 0.0);
}

TEST_CASE("shape errors name the op and both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected an error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
  CHECK_THROWS_AS(mul(a, Tensor::zeros({3, 2})), Error);
  CHECK_THROWS_AS(add(a, Tensor::zeros({4})), Error);
}

TEST_CASE("log rejects non-positive input") {
  CHECK_THROWS_AS(log(Tensor({2}, {1.0, 0.0})), Error);
  CHECK_THROWS_AS(log(Tensor({1}, {-3.0})), Error);
}

TEST_CASE("backward rejects non-scalar outputs and foreign tensors") {
  Tape tape;
  Tensor xl = tape.leaf(Tensor({2}, {1.0, 2.0}));
  Tensor y = scale(xl, 2.0);
  CHECK_THROWS_AS(tape.backward(y), Error);
  CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), Error);
}

TEST_CASE("primitive outputs stay finite on finite inputs") {
  Rng rng(8);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor a = random_tensor({4, 6}, rng, -50.0, 50.0);
    CHECK(softmax(a).all_finite());
    CHECK(silu(a).all_finite());
    CHECK(exp(scale(a, 0.1)).all_finite());
    CHECK(rms_normalize(a, random_tensor({6}, rng)).all_finite());
    CHECK(cross_entropy_with_logits(a, {{1, 2}}).all_finite());
  }
}

TEST_SUITE_END();

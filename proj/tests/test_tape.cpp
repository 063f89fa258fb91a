#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lapo/rng.hpp"
#include "lapo/tape.hpp"

using namespace lapo;

namespace {

TensorValue random_tensor(Shape s, Rng& rng, double scale = 0.5) {
  TensorValue t(std::move(s));
  for (auto& v : t.data) v = static_cast<float>(rng.gauss(0.0, scale));
  return t;
}

}  // namespace

TEST_CASE("shape rules and eager forward") {
  Rng rng(1);
  Tape t;
  const int x = t.leaf(random_tensor({2, 3}, rng));
  const int y = t.leaf(random_tensor({2, 3}, rng));
  const int z = t.add(x, y);
  CHECK(t.value(z).shape == Shape{2, 3});

  const int a = t.leaf(TensorValue({2, 3}));
  const int b = t.leaf(TensorValue({4, 5}));
  CHECK_THROWS_AS(t.matmul(a, b), ShapeError);
}

TEST_CASE("softmax of zeros is uniform") {
  Tape t;
  const int x = t.leaf(TensorValue({1, 4}));
  const int s = t.softmax(x);
  for (float v : t.value(s).data) CHECK(v == doctest::Approx(0.25).epsilon(1e-7));
}

TEST_CASE("x*x gradient is 2x") {
  Tape t;
  const int x = t.leaf(TensorValue::scalar(3.0f));
  const int loss = t.mul(x, x);
  t.backward(loss);
  CHECK(t.grad(x).data[0] == doctest::Approx(6.0f));
}

TEST_CASE("sum of softmax has zero gradient") {
  Rng rng(7);
  Tape t;
  const int v = t.leaf(random_tensor({1, 6}, rng));
  const int loss = t.sum(t.softmax(v));
  t.backward(loss);
  for (float g : t.grad(v).data) CHECK(std::abs(g) < 1e-6f);
}

TEST_CASE("non-scalar loss rejected") {
  Tape t;
  const int x = t.leaf(TensorValue({2, 2}));
  CHECK_THROWS_AS(t.backward(x), ShapeError);
}

TEST_CASE("gradient accumulation matches hand expansion") {
  // f(x) = x*x + 3x uses x twice; df/dx = 2x + 3.
  Tape t;
  const int x = t.leaf(TensorValue::scalar(1.75f));
  const int loss = t.add(t.mul(x, x), t.scale(x, 3.0f));
  t.backward(loss);
  CHECK(t.grad(x).data[0] == doctest::Approx(2.0f * 1.75f + 3.0f));
}

TEST_CASE("untouched nodes keep zero gradient") {
  Tape t;
  const int x = t.leaf(TensorValue::scalar(2.0f));
  const int orphan = t.leaf(TensorValue::scalar(5.0f));
  const int loss = t.mul(x, x);
  t.backward(loss);
  CHECK(t.grad(orphan).data[0] == 0.0f);
  CHECK(!t.has_grad(orphan));
}

TEST_CASE("backward is deterministic bit for bit") {
  auto build = [](Tape& t, std::vector<int>& leaves) {
    Rng rng(99);
    const int w = t.leaf(random_tensor({4, 4}, rng));
    const int x = t.leaf(random_tensor({2, 4}, rng));
    const int h = t.tanh_op(t.matmul(x, w));
    const int loss = t.mean(t.square(h));
    leaves = {w, x};
    return loss;
  };
  Tape t1, t2;
  std::vector<int> l1, l2;
  t1.backward(build(t1, l1));
  t2.backward(build(t2, l2));
  for (size_t i = 0; i < l1.size(); ++i) {
    const auto g1 = t1.grad(l1[i]).data;
    const auto g2 = t2.grad(l2[i]).data;
    REQUIRE(g1.size() == g2.size());
    for (size_t j = 0; j < g1.size(); ++j) CHECK(g1[j] == g2[j]);
  }
}

TEST_CASE("two-layer net gradient matches finite differences") {
  Rng rng(42);
  Tape t;
  const int w1 = t.leaf(random_tensor({6, 8}, rng));
  const int b1 = t.leaf(random_tensor({8}, rng, 0.1));
  const int w2 = t.leaf(random_tensor({8, 3}, rng));
  const int x = t.constant(random_tensor({4, 6}, rng));
  const int target = t.constant(random_tensor({4, 3}, rng));
  const int h = t.gelu(t.add(t.matmul(x, w1), b1));
  const int out = t.matmul(h, w2);
  const int loss = t.mse(out, target);
  const double err = tape_fd_check(t, loss, {w1, b1, w2}, 1e-4, 64, 1234);
  CHECK(err < 1e-3);
}

TEST_CASE("every op kind passes a 50-coordinate finite difference check") {
  Rng rng(5);

  auto check = [&](const char* name, auto&& build) {
    Tape t;
    std::vector<int> leaves;
    const int loss = build(t, leaves);
    const double err = tape_fd_check(t, loss, leaves, 1e-4, 50, 77);
    INFO(name);
    CHECK(err < 1e-3);
  };

  check("matmul", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({3, 5}, rng));
    const int b = t.leaf(random_tensor({5, 4}, rng));
    l = {a, b};
    return t.mean(t.square(t.matmul(a, b)));
  });
  check("matmul-nt", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({3, 5}, rng));
    const int b = t.leaf(random_tensor({4, 5}, rng));
    l = {a, b};
    return t.mean(t.square(t.matmul(a, b, false, true)));
  });
  check("matmul-tn", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({5, 3}, rng));
    const int b = t.leaf(random_tensor({5, 4}, rng));
    l = {a, b};
    return t.mean(t.square(t.matmul(a, b, true, false)));
  });
  check("add", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    const int b = t.leaf(random_tensor({4, 6}, rng));
    l = {a, b};
    return t.mean(t.square(t.add(a, b)));
  });
  check("add-bias", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    const int b = t.leaf(random_tensor({6}, rng));
    l = {a, b};
    return t.mean(t.square(t.add(a, b)));
  });
  check("mul", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    const int b = t.leaf(random_tensor({4, 6}, rng));
    l = {a, b};
    return t.mean(t.square(t.mul(a, b)));
  });
  check("mul-row-broadcast", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    const int b = t.leaf(random_tensor({6}, rng));
    l = {a, b};
    return t.mean(t.square(t.mul(a, b)));
  });
  check("mul-scalar", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    const int s = t.leaf(TensorValue::scalar(0.7f));
    l = {a, s};
    return t.mean(t.square(t.mul(a, s)));
  });
  check("scale", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    l = {a};
    return t.mean(t.square(t.scale(a, -1.5f)));
  });
  check("tanh", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    l = {a};
    return t.mean(t.square(t.tanh_op(a)));
  });
  check("gelu", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    l = {a};
    return t.mean(t.square(t.gelu(a)));
  });
  check("softmax", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    const int w = t.constant(random_tensor({4, 6}, rng));
    l = {a};
    return t.sum(t.mul(t.softmax(a), w));
  });
  check("log-softmax", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    const int w = t.constant(random_tensor({4, 6}, rng));
    l = {a};
    return t.sum(t.mul(t.log_softmax(a), w));
  });
  check("gather-rows", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({5, 4}, rng));
    l = {a};
    return t.mean(t.square(t.gather_rows(a, {0, 2, 2, 4})));
  });
  check("layer-norm", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 8}, rng));
    const int w = t.constant(random_tensor({4, 8}, rng));
    l = {a};
    return t.sum(t.mul(t.layer_norm(a), w));
  });
  check("rms-norm", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 8}, rng));
    const int w = t.constant(random_tensor({4, 8}, rng));
    l = {a};
    return t.sum(t.mul(t.layer_norm(a, 1e-8f, false), w));
  });
  check("concat-rows", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({2, 4}, rng));
    const int b = t.leaf(random_tensor({3, 4}, rng));
    l = {a, b};
    return t.mean(t.square(t.concat({a, b}, 0)));
  });
  check("concat-cols", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({2, 4}, rng));
    const int b = t.leaf(random_tensor({2, 3}, rng));
    l = {a, b};
    return t.mean(t.square(t.concat({a, b}, 1)));
  });
  check("sum", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    l = {a};
    return t.sum(t.square(a));
  });
  check("mean", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    l = {a};
    return t.mean(t.square(a));
  });
  check("mse", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    const int b = t.leaf(random_tensor({4, 6}, rng));
    l = {a, b};
    return t.mse(a, b);
  });
  check("square", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    l = {a};
    return t.mean(t.square(a));
  });
  check("exp", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng, 0.3));
    l = {a};
    return t.mean(t.exp_op(a));
  });
  check("neg", [&](Tape& t, std::vector<int>& l) {
    const int a = t.leaf(random_tensor({4, 6}, rng));
    l = {a};
    return t.mean(t.square(t.neg(a)));
  });
}

TEST_CASE("NaN fails fast at record time") {
  Tape t;
  const int big = t.leaf(TensorValue({1}, {100.0f}));
  // exp(100) overflows f32 storage -> inf -> NumericError at record time.
  CHECK_THROWS_AS(t.exp_op(big), NumericError);
}

TEST_CASE("finite_diff_check: quadratic is exact to rounding") {
  auto fn = [](const std::vector<double>& p) {
    double s = 0.0;
    for (size_t i = 0; i < p.size(); ++i) s += (static_cast<double>(i) + 1.0) * p[i] * p[i];
    return s;
  };
  std::vector<double> params = {0.3, -1.2, 2.0, 0.05};
  std::vector<double> analytic(params.size());
  for (size_t i = 0; i < params.size(); ++i)
    analytic[i] = 2.0 * (static_cast<double>(i) + 1.0) * params[i];
  for (double h : {1e-3, 1e-4, 1e-5}) {
    CHECK(finite_diff_check(fn, params, analytic, h, 4, 1) < 1e-6);
  }
}

TEST_CASE("finite_diff_check: unseeded RNG inside fn is rejected") {
  auto fn = [n = 0](const std::vector<double>& p) mutable {
    return p[0] + 1e-6 * (n++);
  };
  CHECK_THROWS_AS(finite_diff_check(fn, {1.0}, {1.0}, 1e-4, 1, 1), NumericError);
}

TEST_CASE("f64 replay matches f32 forward closely") {
  Rng rng(11);
  Tape t;
  const int a = t.leaf(random_tensor({3, 3}, rng));
  const int loss = t.mean(t.square(t.tanh_op(t.matmul(a, a))));
  Fd64Session fd(t, loss);
  CHECK(fd.base() == doctest::Approx(t.scalar_value(loss)).epsilon(1e-5));
}

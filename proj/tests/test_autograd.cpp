#include <doctest.h>

#include <cmath>
#include <functional>

#include "apattack/autograd.hpp"
#include "apattack/errors.hpp"
#include "apattack/rng.hpp"
#include "oracles.hpp"

using namespace apattack;
using ag::Shape;
using ag::Tensor;
using ag::Var;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

// Projects f(inputs) onto fixed random weights and compares autodiff with
// central differences for every input.
double gradient_error(std::vector<Tensor> inputs, const std::function<Var(const std::vector<Var>&)>& f,
                      std::uint64_t seed = 7) {
  Rng rng(seed);
  std::vector<double> probe;
  auto scalar = [&](const std::vector<Var>& vars) {
    Var out = f(vars);
    if (probe.empty()) {
      probe.resize(out.numel());
      for (auto& p : probe) p = rng.normal();
    }
    return ag::weighted_sum(out, probe);
  };
  std::vector<Var> leaves;
  for (auto& t : inputs) leaves.push_back(Var::leaf(t, true));
  ag::backward(scalar(leaves));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto eval = [&] {
      std::vector<Var> vs;
      for (auto& t : inputs) vs.push_back(Var::constant(t));
      return scalar(vs).item();
    };
    const auto numeric = oracle::numeric_gradient(inputs[k].data, eval);
    worst = std::max(worst, oracle::relative_error(numeric, leaves[k].grad()));
  }
  return worst;
}

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("elementwise ops match finite differences") {
    Rng rng(1);
    const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4});
    CHECK(gradient_error({a, b}, [](auto& v) { return ag::add(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({a, b}, [](auto& v) { return ag::sub(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({a, b}, [](auto& v) { return ag::mul(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto& v) { return ag::scale(v[0], -2.5); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto& v) { return ag::add_scalar(v[0], 0.3); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto& v) { return ag::tanh(v[0]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto& v) { return ag::silu(v[0]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto& v) { return ag::relu(v[0]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto& v) { return ag::clamp(v[0], -0.5, 0.5); }) < 1e-6);
  }

  TEST_CASE("reductions and shape ops match finite differences") {
    Rng rng(2);
    const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 5});
    CHECK(gradient_error({a}, [](auto& v) { return ag::sum(v[0]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto& v) { return ag::mean(v[0]); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto& v) { return ag::reshape(v[0], {2, 6}); }) < 1e-6);
    CHECK(gradient_error({a}, [](auto& v) { return ag::transpose(v[0]); }) < 1e-6);
    CHECK(gradient_error({a, b}, [](auto& v) { return ag::matmul(v[0], v[1]); }) < 1e-6);
  }

  TEST_CASE("linear, bias and row ops match finite differences") {
    Rng rng(3);
    const Tensor x = random_tensor(rng, {4, 3}), w = random_tensor(rng, {5, 3}), bias = random_tensor(rng, {5});
    CHECK(gradient_error({x, w, bias}, [](auto& v) { return ag::linear(v[0], v[1], v[2]); }) < 1e-6);
    CHECK(gradient_error({x, w}, [](auto& v) { return ag::linear(v[0], v[1], Var()); }) < 1e-6);
    const Tensor rb = random_tensor(rng, {3});
    CHECK(gradient_error({x, rb}, [](auto& v) { return ag::add_row_bias(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto& v) { return ag::l2_normalize_rows(v[0]); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto& v) { return ag::log_softmax_rows(v[0]); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto& v) { return ag::row_norms(v[0]); }) < 1e-6);
    const std::vector<std::size_t> rows{2, 0, 2};
    CHECK(gradient_error({x}, [&](auto& v) { return ag::gather_rows(v[0], rows); }) < 1e-6);
  }

  TEST_CASE("image ops match finite differences") {
    Rng rng(4);
    const Tensor x = random_tensor(rng, {2, 3, 4, 4}), w = random_tensor(rng, {2, 3, 3, 3}, 0.3),
                 b = random_tensor(rng, {2});
    CHECK(gradient_error({x, w, b}, [](auto& v) { return ag::conv2d(v[0], v[1], v[2], 1, 1); }) < 1e-6);
    CHECK(gradient_error({x, w, b}, [](auto& v) { return ag::conv2d(v[0], v[1], v[2], 2, 1); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto& v) { return ag::upsample_nearest2x(v[0]); }) < 1e-6);
    CHECK(gradient_error({x}, [](auto& v) { return ag::avg_pool2d(v[0], 2, 2); }) < 1e-6);
    const std::vector<ag::PixelBox> boxes{{0, 2, 0, 4}, {1, 4, 2, 3}};
    CHECK(gradient_error({x}, [&](auto& v) { return ag::box_means(v[0], boxes); }) < 1e-6);
  }

  TEST_CASE("sequence ops match finite differences") {
    Rng rng(5);
    const Tensor base = random_tensor(rng, {4, 3});
    const Tensor p0 = random_tensor(rng, {2, 3}), p1 = random_tensor(rng, {2, 3});
    const std::vector<std::size_t> pos{1, 3};
    CHECK(gradient_error({p0, p1}, [&](auto& v) {
            std::vector<Var> parts{v[0], v[1]};
            return ag::assemble_sequence(base, pos, parts);
          }) < 1e-6);
    const Tensor seq = random_tensor(rng, {2, 4, 3}), proj = random_tensor(rng, {6, 5, 3}),
                 rows = random_tensor(rng, {6, 3});
    CHECK(gradient_error({seq}, [](auto& v) { return ag::mean_over_sequence(v[0]); }) < 1e-6);
    CHECK(gradient_error({seq, proj}, [](auto& v) { return ag::positional_project(v[0], v[1]); }) < 1e-6);
    CHECK(gradient_error({seq, rows}, [](auto& v) { return ag::add_sequence_rows(v[0], v[1]); }) < 1e-6);
  }

  TEST_CASE("forward values of hand-sized examples") {
    const Var a = Var::constant(Tensor({2, 2}, {1, 2, 3, 4}));
    const Var b = Var::constant(Tensor({2, 2}, {5, 6, 7, 8}));
    CHECK(ag::matmul(a, b).value().data == std::vector<double>{19, 22, 43, 50});
    CHECK(ag::transpose(a).value().data == std::vector<double>{1, 3, 2, 4});
    CHECK(ag::sum(a).item() == 10.0);
    CHECK(ag::clamp(a, 1.5, 3.5).value().data == std::vector<double>{1.5, 2, 3, 3.5});
    const auto n = ag::row_norms(Var::constant(Tensor({1, 2}, {3, 4}))).value().data;
    CHECK(n[0] == doctest::Approx(5.0));
    const auto ls = ag::log_softmax_rows(Var::constant(Tensor({1, 2}, {0, 0}))).value().data;
    CHECK(ls[0] == doctest::Approx(-std::log(2.0)));
    const auto up = ag::upsample_nearest2x(Var::constant(Tensor({1, 1, 1, 2}, {1, 2}))).value();
    CHECK(up.shape == Shape{1, 1, 2, 4});
    CHECK(up.data == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2});
  }

  TEST_CASE("clamp passes no gradient outside the open interval") {
    Var x = Var::leaf(Tensor({3}, {-1.0, 0.2, 2.0}), true);
    ag::backward(ag::sum(ag::clamp(x, 0.0, 1.0)));
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{0, 1, 0});
  }

  TEST_CASE("gradients accumulate through shared subexpressions") {
    Var x = Var::leaf(Tensor({1}, {3.0}), true);
    const Var y = ag::mul(x, x);
    ag::backward(ag::sum(ag::add(y, y)));
    CHECK(x.grad()[0] == doctest::Approx(12.0));
  }

  TEST_CASE("errors") {
    const Var a = Var::constant(Tensor({2, 2}));
    const Var b = Var::constant(Tensor({2, 3}));
    CHECK_THROWS_AS(ag::add(a, b), InputError);
    CHECK_THROWS_AS(ag::backward(a), InputError);
    CHECK_THROWS_AS(ag::l2_normalize_rows(a), NormalizationError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), InputError);
    CHECK_THROWS_AS(Var().value(), InputError);
  }
}

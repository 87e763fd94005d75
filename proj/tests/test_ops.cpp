#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"

#include "essd/gradcheck.hpp"
#include "essd/ops.hpp"
#include "essd/tape.hpp"

using namespace essd;
using test::random_tensor;

namespace {

// Direct nested-loop convolution.
TensorD naive_conv(const TensorD& x, const TensorD& w, const TensorD& b, std::size_t stride, std::size_t pad,
                   std::size_t dil = 1) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  const std::size_t ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  TensorD y({n, cout, oh, ow});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
          double s = b[o];
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t kr = 0; kr < k; ++kr)
              for (std::size_t kc = 0; kc < k; ++kc) {
                const long ir = static_cast<long>(r * stride + kr * dil) - static_cast<long>(pad);
                const long ic = static_cast<long>(c * stride + kc * dil) - static_cast<long>(pad);
                if (ir < 0 || ic < 0 || ir >= static_cast<long>(h) || ic >= static_cast<long>(wd)) continue;
                s += x.at(i, ci, static_cast<std::size_t>(ir), static_cast<std::size_t>(ic)) * w.at(o, ci, kr, kc);
              }
          y.at(i, o, r, c) = s;
        }
  return y;
}

// Every input pixel scatters its kernel-weighted contribution to the output.
TensorD naive_deconv(const TensorD& x, const TensorD& w, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(1), k = w.dim(2);
  const std::size_t oh = (h - 1) * stride + k - 2 * pad, ow = (wd - 1) * stride + k - 2 * pad;
  TensorD y({n, cout, oh, ow});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < wd; ++c)
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t kr = 0; kr < k; ++kr)
              for (std::size_t kc = 0; kc < k; ++kc) {
                const long yr = static_cast<long>(r * stride + kr) - static_cast<long>(pad);
                const long yc = static_cast<long>(c * stride + kc) - static_cast<long>(pad);
                if (yr < 0 || yc < 0 || yr >= static_cast<long>(oh) || yc >= static_cast<long>(ow)) continue;
                y.at(i, o, static_cast<std::size_t>(yr), static_cast<std::size_t>(yc)) +=
                    x.at(i, ci, r, c) * w.at(ci, o, kr, kc);
              }
  return y;
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
  Tensor s(Shape{}, std::vector<float>{5});
  CHECK(s.rank() == 0);
  CHECK(s.size() == 1);
}

TEST_CASE("conv2d output shape for the 38 to 19 step") {
  Tensor x({1, 3, 38, 38}), w({4, 3, 3, 3});
  const Tensor y = ops::conv2d(x, w, static_cast<const Tensor*>(nullptr), 2, 1);
  CHECK(y.shape() == Shape{1, 4, 19, 19});
}

TEST_CASE("conv2d with a 1x1 kernel is affine scaling") {
  const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor w({1, 1, 1, 1}, {2});
  const Tensor b({1}, {1});
  const Tensor y = ops::conv2d(x, w, &b, 1, 0);
  CHECK(y.storage() == std::vector<float>{3, 5, 7, 9});
}

TEST_CASE("conv2d matches the nested-loop reference") {
  std::mt19937_64 rng(1);
  struct Cfg { std::size_t k, stride, pad, dil; };
  for (const Cfg c : {Cfg{3, 1, 1, 1}, Cfg{3, 2, 1, 1}, Cfg{1, 1, 0, 1}, Cfg{3, 1, 2, 2}, Cfg{2, 2, 0, 1}}) {
    const TensorD x = random_tensor({1, 2, 5, 5}, rng), w = random_tensor({3, 2, c.k, c.k}, rng);
    const TensorD b = random_tensor({3}, rng);
    const TensorD y = ops::conv2d(x, w, &b, c.stride, c.pad, c.dil);
    const TensorD ref = naive_conv(x, w, b, c.stride, c.pad, c.dil);
    REQUIRE(y.shape() == ref.shape());
    CHECK(test::max_abs_diff(y, ref) <= 1e-6);
  }
}

TEST_CASE("conv2d shape errors") {
  CHECK_THROWS_AS(ops::conv2d(Tensor({1, 3, 5, 5}), Tensor({4, 2, 3, 3}), static_cast<const Tensor*>(nullptr), 1, 1),
                  ShapeError);
  CHECK_THROWS(ops::conv2d(Tensor({1, 1, 2, 2}), Tensor({1, 1, 5, 5}), static_cast<const Tensor*>(nullptr), 1, 0));
}

TEST_CASE("output extent formulas hold over a parameter sweep") {
  for (std::size_t in = 1; in <= 12; ++in)
    for (std::size_t k = 1; k <= 4; ++k)
      for (std::size_t s = 1; s <= 3; ++s)
        for (std::size_t p = 0; p <= 2; ++p) {
          const ops::ConvGeometry g{k, s, p, 1};
          if (k > in + 2 * p) {
            CHECK_THROWS(ops::conv_output_extent(in, g));
            continue;
          }
          CHECK(ops::conv_output_extent(in, g) == (in + 2 * p - k) / s + 1);
          const long d = static_cast<long>((in - 1) * s + k) - 2 * static_cast<long>(p);
          if (d > 0) {
            CHECK(ops::deconv_output_extent(in, g) == static_cast<std::size_t>(d));
          } else {
            CHECK_THROWS(ops::deconv_output_extent(in, g));
          }
        }
}

TEST_CASE("deconv2d doubles 19 to 38 with k2 s2") {
  const Tensor y = ops::deconv2d(Tensor({1, 8, 19, 19}), Tensor({8, 5, 2, 2}), static_cast<const Tensor*>(nullptr), 2, 0);
  CHECK(y.shape() == Shape{1, 5, 38, 38});
}

TEST_CASE("deconv2d with an identity 1x1 kernel is the identity") {
  std::mt19937_64 rng(2);
  const TensorD x = random_tensor({1, 3, 4, 4}, rng);
  TensorD w({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1;
  CHECK(ops::deconv2d(x, w, static_cast<const TensorD*>(nullptr), 1, 0) == x);
}

TEST_CASE("deconv2d matches the scatter-accumulate reference") {
  std::mt19937_64 rng(3);
  for (auto [k, s, p] : {std::tuple<std::size_t, std::size_t, std::size_t>{2, 2, 0}, {3, 2, 1}, {3, 1, 1}}) {
    const TensorD x = random_tensor({1, 1, 3, 3}, rng), w = random_tensor({1, 2, k, k}, rng);
    const TensorD y = ops::deconv2d(x, w, static_cast<const TensorD*>(nullptr), s, p);
    const TensorD ref = naive_deconv(x, w, s, p);
    REQUIRE(y.shape() == ref.shape());
    CHECK(test::max_abs_diff(y, ref) <= 1e-6);
  }
}

TEST_CASE("conv2d and deconv2d are adjoint") {
  std::mt19937_64 rng(4);
  // Sizes chosen so deconv maps the conv output back to the input size.
  using Cfg = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>;
  for (auto [k, s, p, h] : {Cfg{3, 1, 1, 8}, Cfg{3, 2, 1, 7}, Cfg{2, 2, 0, 8}, Cfg{4, 2, 1, 8}}) {
    const TensorD x = random_tensor({2, 3, h, h}, rng), w = random_tensor({4, 3, k, k}, rng);
    const TensorD cx = ops::conv2d(x, w, static_cast<const TensorD*>(nullptr), s, p);
    const TensorD y = random_tensor(cx.shape(), rng);
    // deconv weight layout is [Cin_of_deconv = conv Cout, conv Cin, k, k], the same tensor.
    const TensorD dy = ops::deconv2d(y, w, static_cast<const TensorD*>(nullptr), s, p);
    REQUIRE(dy.shape() == x.shape());
    CHECK(std::abs(test::dot(cx, y) - test::dot(x, dy)) <= 1e-6 * std::max(1.0, std::abs(test::dot(cx, y))));
  }
}

TEST_CASE("batch norm examples") {
  SUBCASE("two values normalize to -1 and +1") {
    const TensorD x({2, 1, 1, 1}, {1, 3});
    const auto r = ops::batch_norm(x, TensorD({1}, {1}), TensorD({1}, {0}), 1e-12, ops::BatchNormMode::train);
    CHECK(r.output[0] == doctest::Approx(-1).epsilon(1e-9));
    CHECK(r.output[1] == doctest::Approx(1).epsilon(1e-9));
    CHECK(r.state.var[0] == doctest::Approx(1));  // population variance
  }
  SUBCASE("zero gamma gives beta everywhere") {
    std::mt19937_64 rng(5);
    const TensorD x = random_tensor({2, 2, 3, 3}, rng);
    const auto r = ops::batch_norm(x, TensorD({2}, {0, 0}), TensorD({2}, {0.25, -3}), 1e-5, ops::BatchNormMode::train);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(r.output[i] == (i % 18 < 9 ? 0.25 : -3.0));
  }
  SUBCASE("eval mode without running statistics is an error") {
    CHECK_THROWS(ops::batch_norm(TensorD({1, 1, 2, 2}), TensorD({1}, {1}), TensorD({1}), 1e-5, ops::BatchNormMode::eval));
  }
  SUBCASE("running statistics follow an exponential moving average") {
    const TensorD x({2, 1, 1, 1}, {1, 3});
    const auto r = ops::batch_norm(x, TensorD({1}, {1}), TensorD({1}), 1e-5, ops::BatchNormMode::train);
    TensorD rm({1}, {0}), rv({1}, {1});
    ops::update_running_stats(rm, rv, r.state, 0.9);
    CHECK(rm[0] == doctest::Approx(0.2));
    CHECK(rv[0] == doctest::Approx(1.0));
  }
}

TEST_CASE("relu and max pool examples") {
  CHECK(ops::relu(TensorD({3}, {-1, 0, 2})).storage() == std::vector<double>{0, 0, 2});
  CHECK(ops::relu_backward(TensorD({3}, {-1, 0, 2}), TensorD({3}, {1, 1, 1})).storage() == std::vector<double>{0, 0, 1});
  const auto p = ops::max_pool2d(TensorD({1, 1, 2, 2}, {1, 2, 3, 4}), {2, 2, 0, false});
  CHECK(p.output.storage() == std::vector<double>{4});
  CHECK_THROWS(ops::max_pool2d(TensorD({1, 1, 2, 2}), {3, 1, 0, false}));
}

TEST_CASE("max pool gradient goes to the first tied position") {
  // Window values 5 7 / 7 1: the max 7 appears at window offsets 1 and 2.
  const TensorD x({1, 1, 2, 2}, {5, 7, 7, 1});
  const auto p = ops::max_pool2d(x, {2, 2, 0, false});
  const TensorD g = ops::max_pool2d_backward(x.shape(), p.argmax, TensorD({1, 1, 1, 1}, {1}));
  CHECK(g.storage() == std::vector<double>{0, 1, 0, 0});

  // All equal: the earliest position wins.
  const TensorD flat({1, 1, 2, 2}, {3, 3, 3, 3});
  const auto q = ops::max_pool2d(flat, {2, 2, 0, false});
  CHECK(ops::max_pool2d_backward(flat.shape(), q.argmax, TensorD({1, 1, 1, 1}, {2})).storage() ==
        std::vector<double>{2, 0, 0, 0});
}

TEST_CASE("pool ceil mode keeps the partial window") {
  CHECK(ops::pool_output_extent(75, {2, 2, 0, true}) == 38);
  CHECK(ops::pool_output_extent(75, {2, 2, 0, false}) == 37);
  CHECK(ops::pool_output_extent(19, {3, 1, 1, false}) == 19);
}

TEST_CASE("concat_channels") {
  const TensorD a({1, 4, 3, 3}, 1.0), b({1, 6, 3, 3}, 2.0);
  const TensorD* both[] = {&a, &b};
  const TensorD c = ops::concat_channels<double>(both);
  CHECK(c.shape() == Shape{1, 10, 3, 3});
  const TensorD* one[] = {&a};
  CHECK(ops::concat_channels<double>(one) == a);

  const TensorD bad({1, 2, 4, 3});
  const TensorD* mismatched[] = {&a, &bad};
  try {
    ops::concat_channels<double>(mismatched);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("input 1") != std::string::npos);
  }

  GradTape<double> tape;
  const Var va = tape.leaf(a, true), vb = tape.leaf(b, true);
  const Var vs[] = {va, vb};
  const auto grads = tape.backward(tape.sum(tape.concat_channels(vs)));
  CHECK(grads.of(va) == TensorD::ones(a.shape()));
  CHECK(grads.of(vb) == TensorD::ones(b.shape()));
}

TEST_CASE("eltwise") {
  CHECK(ops::eltwise(TensorD({2}, {1, 2}), TensorD({2}, {3, 4}), ops::EltwiseMode::sum).storage() ==
        std::vector<double>{4, 6});
  std::mt19937_64 rng(6);
  const TensorD x = random_tensor({2, 3}, rng);
  CHECK(ops::eltwise(x, TensorD::ones({2, 3}), ops::EltwiseMode::prod) == x);
  CHECK_THROWS_AS(ops::eltwise(TensorD({2, 3}), TensorD({3, 2}), ops::EltwiseMode::sum), ShapeError);
}

TEST_CASE("backward accumulation") {
  SUBCASE("a value read twice gets both partials") {
    GradTape<double> tape;
    const Var x = tape.leaf(TensorD({3}, {1, -2, 5}), true);
    const auto g = tape.backward(tape.sum(tape.eltwise(x, x, ops::EltwiseMode::sum)));
    CHECK(g.of(x).storage() == std::vector<double>{2, 2, 2});
  }
  SUBCASE("two identical consumers double the single-consumer gradient") {
    std::mt19937_64 rng(7);
    const TensorD xv = random_tensor({4}, rng), r = random_tensor({4}, rng);
    GradTape<double> once;
    const Var x1 = once.leaf(xv, true), r1 = once.leaf(r);
    const TensorD g1 = once.backward(once.sum(once.eltwise(x1, r1, ops::EltwiseMode::prod))).of(x1);
    GradTape<double> twice;
    const Var x2 = twice.leaf(xv, true), r2 = twice.leaf(r);
    const Var a = twice.eltwise(x2, r2, ops::EltwiseMode::prod), b = twice.eltwise(x2, r2, ops::EltwiseMode::prod);
    const TensorD g2 = twice.backward(twice.sum(twice.add(a, b))).of(x2);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g2[i] == doctest::Approx(2 * g1[i]));
  }
  SUBCASE("a constant loss gives zero gradients") {
    GradTape<double> tape;
    const Var x = tape.leaf(TensorD({2}, {1, 2}), true);
    const Var c = tape.leaf(TensorD(Shape{}, std::vector<double>{3}));
    tape.relu(x);
    const auto g = tape.backward(c);
    CHECK(g.of(x) == TensorD({2}));
  }
  SUBCASE("non-scalar loss is an error") {
    GradTape<double> tape;
    const Var x = tape.leaf(TensorD({2}, {1, 2}), true);
    CHECK_THROWS(tape.backward(tape.relu(x)));
  }
}

TEST_CASE("a layer feeding both extension branches gets the summed gradient") {
  // x is layer n; its stride-2 conv plays layer n+1. The high branch
  // upsamples n+1, the low branch convolves x twice, and both are summed.
  std::mt19937_64 rng(8);
  ScalarFn fn = [](GradTape<double>& t, const std::vector<Var>& v) {
    const Var n1 = t.relu(t.conv2d(v[0], v[1], std::nullopt, 2, 1));
    const Var high = t.relu(t.conv2d(t.deconv2d(n1, v[2], std::nullopt, 2, 0), v[3], std::nullopt, 1, 1));
    const Var low = t.relu(t.conv2d(t.relu(t.conv2d(v[0], v[4], std::nullopt, 1, 1)), v[5], std::nullopt, 1, 1));
    const Var fused = t.eltwise(high, low, ops::EltwiseMode::sum);
    return t.add(t.sum(t.eltwise(fused, fused, ops::EltwiseMode::prod)), t.sum(n1));
  };
  const std::vector<TensorD> inputs{random_tensor({1, 2, 4, 4}, rng), random_tensor({3, 2, 3, 3}, rng),
                                    random_tensor({3, 3, 2, 2}, rng), random_tensor({2, 3, 3, 3}, rng),
                                    random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 2, 3, 3}, rng)};
  CHECK(gradient_error(fn, inputs) <= 1e-4);
}

TEST_CASE("gradient check examples") {
  std::mt19937_64 rng(9);
  SUBCASE("relu away from zero is exact") {
    TensorD x = random_tensor({2, 8}, rng, 0.05, 1.0);
    for (std::size_t i = 0; i < x.size(); i += 2) x[i] = -x[i];
    ScalarFn fn = [](GradTape<double>& t, const std::vector<Var>& v) {
      return t.sum(t.eltwise(t.relu(v[0]), v[0], ops::EltwiseMode::prod));
    };
    CHECK(gradient_error(fn, {x}) <= 1e-6);
  }
  SUBCASE("conv2d on 1x2x4x4") {
    ScalarFn fn = [](GradTape<double>& t, const std::vector<Var>& v) {
      const Var y = t.conv2d(v[0], v[1], v[2], 1, 1);
      return t.sum(t.eltwise(y, y, ops::EltwiseMode::prod));
    };
    CHECK(gradient_error(fn, {random_tensor({1, 2, 4, 4}, rng), random_tensor({3, 2, 3, 3}, rng),
                              random_tensor({3}, rng)}) <= 1e-4);
  }
  SUBCASE("batch norm in train mode") {
    ScalarFn fn = [](GradTape<double>& t, const std::vector<Var>& v) {
      const Var y = t.batch_norm(v[0], v[1], v[2], 1e-5, ops::BatchNormMode::train);
      return t.sum(t.eltwise(y, t.relu(y), ops::EltwiseMode::prod));
    };
    CHECK(gradient_error(fn, {random_tensor({2, 3, 4, 4}, rng), random_tensor({3}, rng, 0.5, 1.5),
                              random_tensor({3}, rng)}) <= 1e-4);
  }
}

TEST_CASE("full op suite passes over five seeds") {
  const auto results = run_gradcheck_suite(5, 1e-4);
  CHECK(results.size() >= 5 * 15);
  for (const auto& r : results) {
    INFO(r.name << " seed " << r.seed << " error " << r.rel_error);
    CHECK(r.passed);
  }
}

TEST_CASE("flatten_head orders rows by cell then box") {
  // 2 boxes x 3 values per box on a 1x2 grid.
  TensorD x({1, 6, 1, 2});
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t w = 0; w < 2; ++w) x.at(0, c, 0, w) = static_cast<double>(100 * w + c);
  const TensorD y = ops::flatten_head(x, 3);
  CHECK(y.shape() == Shape{1, 4, 3});
  CHECK(y.storage() == std::vector<double>{0, 1, 2, 3, 4, 5, 100, 101, 102, 103, 104, 105});
}

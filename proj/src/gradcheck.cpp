#include "essd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "essd/anchors.hpp"
#include "essd/loss.hpp"

namespace essd {

double gradient_error(const ScalarFn& fn, const std::vector<TensorD>& inputs, double h) {
  GradTape<double> tape(true);
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
  const auto grads = tape.backward(fn(tape, leaves));

  auto eval = [&](const std::vector<TensorD>& xs) {
    GradTape<double> t(false);
    std::vector<Var> ls;
    for (const auto& x : xs) ls.push_back(t.leaf(x));
    return t.value(fn(t, ls))[0];
  };

  double worst = 0;
  std::vector<TensorD> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const TensorD analytic = grads.of(leaves[i]);
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double x = inputs[i][j];
      probe[i][j] = x + h;
      const double up = eval(probe);
      probe[i][j] = x - h;
      const double down = eval(probe);
      probe[i][j] = x;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
    }
  }
  return worst;
}

namespace {

struct Case {
  std::string name;
  std::function<std::pair<ScalarFn, std::vector<TensorD>>(std::mt19937_64&)> make;
};

TensorD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  TensorD t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.storage()) v = d(rng);
  return t;
}

// Values bounded away from zero, for the relu kink.
TensorD away_from_zero(Shape shape, std::mt19937_64& rng) {
  TensorD t = random_tensor(std::move(shape), rng, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.storage())
    if (sign(rng)) v = -v;
  return t;
}

// Contracts an output with fixed random weights so every element matters.
Var contract(GradTape<double>& t, Var out, std::uint64_t salt) {
  std::mt19937_64 rng(salt);
  Var r = t.leaf(random_tensor(t.value(out).shape(), rng));
  return t.sum(t.eltwise(out, r, ops::EltwiseMode::prod));
}

std::vector<Case> cases() {
  std::vector<Case> out;
  auto conv = [](std::size_t stride, std::size_t pad, std::size_t dil) {
    return [=](std::mt19937_64& rng) {
      ScalarFn fn = [=](GradTape<double>& t, const std::vector<Var>& v) {
        return contract(t, t.conv2d(v[0], v[1], v[2], stride, pad, dil), 11);
      };
      return std::pair{fn, std::vector<TensorD>{random_tensor({2, 3, 6, 6}, rng), random_tensor({4, 3, 3, 3}, rng),
                                                random_tensor({4}, rng)}};
    };
  };
  out.push_back({"conv2d s1 p1", conv(1, 1, 1)});
  out.push_back({"conv2d s2 p1", conv(2, 1, 1)});
  out.push_back({"conv2d dilation2 p2", conv(1, 2, 2)});
  auto deconv = [](std::size_t k, std::size_t stride, std::size_t pad) {
    return [=](std::mt19937_64& rng) {
      ScalarFn fn = [=](GradTape<double>& t, const std::vector<Var>& v) {
        return contract(t, t.deconv2d(v[0], v[1], v[2], stride, pad), 12);
      };
      return std::pair{fn, std::vector<TensorD>{random_tensor({2, 3, 4, 4}, rng), random_tensor({3, 2, k, k}, rng),
                                                random_tensor({2}, rng)}};
    };
  };
  out.push_back({"deconv2d k2 s2", deconv(2, 2, 0)});
  out.push_back({"deconv2d k3 s2 p1", deconv(3, 2, 1)});
  auto bn = [](ops::BatchNormMode mode) {
    return [=](std::mt19937_64& rng) {
      auto rm = std::make_shared<TensorD>(random_tensor({3}, rng));
      auto rv = std::make_shared<TensorD>(random_tensor({3}, rng, 0.5, 2.0));
      ScalarFn fn = [=](GradTape<double>& t, const std::vector<Var>& v) {
        return contract(t, t.batch_norm(v[0], v[1], v[2], 1e-5, mode, rm.get(), rv.get()), 13);
      };
      return std::pair{fn, std::vector<TensorD>{random_tensor({2, 3, 4, 4}, rng), random_tensor({3}, rng, 0.5, 1.5),
                                                random_tensor({3}, rng)}};
    };
  };
  out.push_back({"batch_norm train", bn(ops::BatchNormMode::train)});
  out.push_back({"batch_norm eval", bn(ops::BatchNormMode::eval)});
  out.push_back({"relu", [](std::mt19937_64& rng) {
                   ScalarFn fn = [](GradTape<double>& t, const std::vector<Var>& v) {
                     return contract(t, t.relu(v[0]), 14);
                   };
                   return std::pair{fn, std::vector<TensorD>{away_from_zero({2, 3, 4, 4}, rng)}};
                 }});
  auto pool = [](ops::PoolGeometry g) {
    return [=](std::mt19937_64& rng) {
      ScalarFn fn = [=](GradTape<double>& t, const std::vector<Var>& v) {
        return contract(t, t.max_pool2d(v[0], g), 15);
      };
      return std::pair{fn, std::vector<TensorD>{random_tensor({2, 2, 5, 5}, rng)}};
    };
  };
  out.push_back({"max_pool2d 2/2", pool({2, 2, 0, false})});
  out.push_back({"max_pool2d 2/2 ceil", pool({2, 2, 0, true})});
  out.push_back({"max_pool2d 3/1/1", pool({3, 1, 1, false})});
  out.push_back({"concat_channels", [](std::mt19937_64& rng) {
                   ScalarFn fn = [](GradTape<double>& t, const std::vector<Var>& v) {
                     return contract(t, t.concat_channels(v), 16);
                   };
                   return std::pair{fn, std::vector<TensorD>{random_tensor({2, 2, 3, 3}, rng),
                                                             random_tensor({2, 3, 3, 3}, rng)}};
                 }});
  auto elt = [](ops::EltwiseMode mode) {
    return [=](std::mt19937_64& rng) {
      ScalarFn fn = [=](GradTape<double>& t, const std::vector<Var>& v) {
        return contract(t, t.eltwise(v[0], v[1], mode), 17);
      };
      return std::pair{fn, std::vector<TensorD>{random_tensor({2, 3, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)}};
    };
  };
  out.push_back({"eltwise sum", elt(ops::EltwiseMode::sum)});
  out.push_back({"eltwise prod", elt(ops::EltwiseMode::prod)});
  out.push_back({"flatten_head + concat_rows", [](std::mt19937_64& rng) {
                   ScalarFn fn = [](GradTape<double>& t, const std::vector<Var>& v) {
                     const Var parts[] = {t.flatten_head(v[0], 4), t.flatten_head(v[1], 4)};
                     return contract(t, t.concat_rows(parts), 18);
                   };
                   return std::pair{fn, std::vector<TensorD>{random_tensor({2, 8, 3, 3}, rng),
                                                             random_tensor({2, 12, 2, 2}, rng)}};
                 }});
  out.push_back({"scale", [](std::mt19937_64& rng) {
                   ScalarFn fn = [](GradTape<double>& t, const std::vector<Var>& v) {
                     return contract(t, t.scale(v[0], -0.7), 19);
                   };
                   return std::pair{fn, std::vector<TensorD>{random_tensor({3, 4}, rng)}};
                 }});
  out.push_back({"softmax_ce_sum", [](std::mt19937_64& rng) {
                   std::vector<std::size_t> rows{0, 2, 3, 5}, labels;
                   std::uniform_int_distribution<std::size_t> lab(0, 3);
                   for (std::size_t i = 0; i < rows.size(); ++i) labels.push_back(lab(rng));
                   ScalarFn fn = [=](GradTape<double>& t, const std::vector<Var>& v) {
                     return t.softmax_ce_sum(v[0], rows, labels);
                   };
                   return std::pair{fn, std::vector<TensorD>{random_tensor({6, 4}, rng, -3, 3)}};
                 }});
  out.push_back({"smooth_l1_sum", [](std::mt19937_64& rng) {
                   std::vector<std::size_t> rows{1, 2, 4};
                   const TensorD tgt = random_tensor({12}, rng, -2, 2);
                   std::vector<double> targets(tgt.storage().begin(), tgt.storage().end());
                   ScalarFn fn = [=](GradTape<double>& t, const std::vector<Var>& v) {
                     return t.smooth_l1_sum(v[0], rows, targets);
                   };
                   return std::pair{fn, std::vector<TensorD>{random_tensor({5, 4}, rng, -2, 2)}};
                 }});
  out.push_back({"multibox loss", [](std::mt19937_64& rng) {
                   const ScaleSpec scales[] = {{0.3, {1.0, 2.0, 0.5}, 3, 3}, {0.6, {1.0, 2.0, 0.5}, 2, 2}};
                   const AnchorSet anchors = generate_anchors(scales);
                   std::uniform_real_distribution<double> u(0.3, 0.7), s(0.15, 0.5);
                   std::vector<MatchResult> matches;
                   for (std::size_t img = 0; img < 2; ++img) {
                     std::vector<GroundTruth> gts;
                     // The second image has no objects, exercising the fallback mining.
                     const std::size_t n = img == 0 ? 2 : 0;
                     for (std::size_t g = 0; g < n; ++g) gts.push_back({{u(rng), u(rng), s(rng), s(rng)}, g % 3});
                     matches.push_back(match(anchors, gts));
                   }
                   const std::size_t a = anchors.size();
                   ScalarFn fn = [=](GradTape<double>& t, const std::vector<Var>& v) {
                     return multibox(t, v[0], v[1], std::span<const MatchResult>(matches)).total;
                   };
                   return std::pair{fn, std::vector<TensorD>{random_tensor({2, a, 4}, rng, -2, 2),
                                                             random_tensor({2, a, 4}, rng, -0.9, 0.9)}};
                 }});
  return out;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(std::size_t seeds, double tol) {
  std::vector<GradCheckResult> results;
  for (const auto& c : cases()) {
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      std::mt19937_64 rng(seed * 7919 + 1);
      auto [fn, inputs] = c.make(rng);
      const double err = gradient_error(fn, inputs);
      results.push_back({c.name, seed, err, err <= tol});
    }
  }
  return results;
}

}  // namespace essd

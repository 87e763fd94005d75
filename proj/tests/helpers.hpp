#pragma once

#include <random>

#include "essd/tensor.hpp"

namespace test {

template <typename T = double>
essd::BasicTensor<T> random_tensor(essd::Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  essd::BasicTensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.storage()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T>
double max_abs_diff(const essd::BasicTensor<T>& a, const essd::BasicTensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i] - b[i])));
  return m;
}

template <typename T>
double dot(const essd::BasicTensor<T>& a, const essd::BasicTensor<T>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace test

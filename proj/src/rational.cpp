#include "essd/rational.hpp"

#include <cmath>

namespace essd {

Rational Rational::from_double(double v) {
  if (!std::isfinite(v)) throw std::domain_error("cannot convert non-finite value to rational");
  std::int64_t den = 1;
  double scaled = v;
  // 2^40 bounds the denominator; every dyadic weight we emit is far coarser.
  for (int i = 0; i < 40 && scaled != std::floor(scaled); ++i) {
    scaled *= 2.0;
    den *= 2;
  }
  if (scaled != std::floor(scaled)) {
    throw std::domain_error("value " + std::to_string(v) + " has no exact dyadic representation");
  }
  return {static_cast<std::int64_t>(scaled), den};
}

Rational Rational::parse(const std::string& text) {
  const auto slash = text.find('/');
  try {
    std::size_t used = 0;
    if (slash == std::string::npos) {
      const std::int64_t n = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return {n};
    }
    const std::string a = text.substr(0, slash), b = text.substr(slash + 1);
    const std::int64_t n = std::stoll(a, &used);
    if (used != a.size()) throw std::invalid_argument(text);
    const std::int64_t d = std::stoll(b, &used);
    if (used != b.size()) throw std::invalid_argument(text);
    return {n, d};
  } catch (const std::logic_error&) {
    throw std::invalid_argument("malformed rational '" + text + "'");
  }
}

std::string Rational::str() const {
  if (den_ == 1) return std::to_string(num_);
  return std::to_string(num_) + "/" + std::to_string(den_);
}

}  // namespace essd

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>

#include "mhex/errors.hpp"

namespace mhex {

namespace detail {

// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15, kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// I_x(a, b)
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw DomainError("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw DomainError("incomplete_beta: x must lie in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * detail::beta_cf(a, b, x) / a;
  return 1.0 - bt * detail::beta_cf(b, a, 1.0 - x) / b;
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
inline double student_t_two_sided(double t, double df) {
  if (!(df > 0.0)) throw DomainError("student_t_two_sided: df must be positive");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct Correlation {
  double r = 0.0;
  double t = 0.0;
  double p = 1.0;
  std::size_t n = 0;
};

inline Correlation pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("pearson: samples differ in length");
  const std::size_t n = x.size();
  if (n < 3) throw UndefinedCorrelation("pearson: need at least 3 pairs, got " + std::to_string(n));
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw UndefinedCorrelation("pearson: zero variance in one sample");
  Correlation c;
  c.n = n;
  c.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = static_cast<double>(n - 2);
  if (std::abs(c.r) == 1.0) {
    c.t = std::copysign(std::numeric_limits<double>::infinity(), c.r);
    c.p = 0.0;
  } else {
    c.t = c.r * std::sqrt(df / (1.0 - c.r * c.r));
    c.p = student_t_two_sided(c.t, df);
  }
  return c;
}

/// One-sided exact sign test: P(X >= wins) for X ~ Binomial(n, 1/2).
inline double sign_test_p(std::size_t wins, std::size_t n) {
  if (wins > n) throw DomainError("sign_test_p: wins exceed trials");
  if (n == 0) return 1.0;
  double p = 0.0;
  for (std::size_t k = wins; k <= n; ++k) {
    const double lc = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(static_cast<double>(n - k) + 1.0);
    p += std::exp(lc - static_cast<double>(n) * std::log(2.0));
  }
  return std::min(p, 1.0);
}

}  // namespace mhex

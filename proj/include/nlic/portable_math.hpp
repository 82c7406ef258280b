#pragma once

// Transcendental functions built only from IEEE-754 add/sub/mul/div, floor and
// ldexp. Every platform that honours IEEE double arithmetic (and does not fuse
// multiply-adds) produces the same bits, which is what lets an encoder on one
// machine and a decoder on another build identical probability tables. The
// C library's exp/log/erfc carry no such guarantee.

#include <cmath>
#include <cstdint>
#include <limits>

namespace nlic::pm {

inline constexpr double kLn2Hi = 6.93147180369123816490e-01;
inline constexpr double kLn2Lo = 1.90821492927058770002e-10;
inline constexpr double kLog2e = 1.44269504088896338700e+00;
inline constexpr double kLn2 = 0.69314718055994530942;
inline constexpr double kTwoOverSqrtPi = 1.12837916709551257390;
inline constexpr double kInvSqrtPi = 0.56418958354775628695;
inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// Gaussian tails beyond this many standard deviations are treated as empty.
// Phi(-12) ~ 1.8e-33, far below any probability the codec can represent.
inline constexpr double kNormalCutoff = 12.0;

inline double exp(double x) {
  if (std::isnan(x)) return x;
  if (x > 709.782712893384) return std::numeric_limits<double>::infinity();
  if (x < -745.2) return 0.0;
  const double n = std::floor(x * kLog2e + 0.5);
  const double r = (x - n * kLn2Hi) - n * kLn2Lo;
  // Taylor series of e^r for |r| <= ln2/2; the truncation term is < 5e-18.
  double p = 1.0 / 6227020800.0;  // 1/13!
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  return std::ldexp(p, static_cast<int>(n));
}

inline double log(double x) {
  if (std::isnan(x) || x < 0.0) return std::numeric_limits<double>::quiet_NaN();
  if (x == 0.0) return -std::numeric_limits<double>::infinity();
  if (std::isinf(x)) return x;
  int e = 0;
  double m = std::frexp(x, &e);
  if (m < 0.70710678118654752440) {
    m *= 2.0;
    e -= 1;
  }
  const double f = (m - 1.0) / (m + 1.0);
  const double s = f * f;
  // atanh series: log(m) = 2 f (1 + s/3 + s^2/5 + ...), s <= 0.0295.
  double p = 1.0 / 25.0;
  p = p * s + 1.0 / 23.0;
  p = p * s + 1.0 / 21.0;
  p = p * s + 1.0 / 19.0;
  p = p * s + 1.0 / 17.0;
  p = p * s + 1.0 / 15.0;
  p = p * s + 1.0 / 13.0;
  p = p * s + 1.0 / 11.0;
  p = p * s + 1.0 / 9.0;
  p = p * s + 1.0 / 7.0;
  p = p * s + 1.0 / 5.0;
  p = p * s + 1.0 / 3.0;
  const double log_m = 2.0 * f + 2.0 * f * s * p;
  const double de = static_cast<double>(e);
  return de * kLn2Hi + (log_m + de * kLn2Lo);
}

inline double log1p(double x) {
  const double y = 1.0 + x;
  if (y == 1.0) return x;
  return log(y) * (x / (y - 1.0));
}

inline double log2(double x) { return log(x) / kLn2; }

inline double erfc(double x) {
  if (std::isnan(x)) return x;
  if (x < 0.0) return 2.0 - erfc(-x);
  if (x < 2.0) {
    // erf(x) = 2/sqrt(pi) e^{-x^2} sum 2^n x^{2n+1} / (2n+1)!!; every term
    // is positive so there is no cancellation.
    const double x2 = x * x;
    double term = x;
    double sum = x;
    for (int n = 1; n < 400; ++n) {
      term *= 2.0 * x2 / static_cast<double>(2 * n + 1);
      sum += term;
      if (term <= 1e-17 * sum) break;
    }
    return 1.0 - kTwoOverSqrtPi * exp(-x2) * sum;
  }
  if (x > 27.3) return 0.0;
  // Continued fraction erfc(x) = e^{-x^2} / (sqrt(pi) K),
  // K = x + (1/2)/(x + 1/(x + (3/2)/(x + ...))), modified Lentz evaluation.
  constexpr double kTiny = 1e-300;
  double f = x;
  double c = f;
  double d = 0.0;
  for (int n = 1; n < 5000; ++n) {
    const double a = 0.5 * static_cast<double>(n);
    d = x + a * d;
    if (d == 0.0) d = kTiny;
    c = x + a / c;
    if (c == 0.0) c = kTiny;
    d = 1.0 / d;
    const double delta = c * d;
    f *= delta;
    if (std::fabs(delta - 1.0) < 1e-16) break;
  }
  return kInvSqrtPi * exp(-x * x) / f;
}

// Standard normal cumulative, truncated at +-kNormalCutoff.
inline double normal_cdf(double t) {
  if (t < -kNormalCutoff) return 0.0;
  if (t > kNormalCutoff) return 1.0;
  return 0.5 * erfc(-t * kInvSqrt2);
}

// Upper tail 1 - normal_cdf(t), computed without cancellation.
inline double normal_sf(double t) { return normal_cdf(-t); }

inline double normal_pdf(double t) {
  if (t < -kNormalCutoff || t > kNormalCutoff) return 0.0;
  return kInvSqrt2Pi * exp(-0.5 * t * t);
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + exp(-x));
  const double e = exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  if (x > 0.0) return x + log1p(exp(-x));
  return log1p(exp(x));
}

inline double tanh(double x) {
  if (x > 20.0) return 1.0;
  if (x < -20.0) return -1.0;
  if (std::fabs(x) < 1e-3) {
    const double x2 = x * x;
    return x * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0)));
  }
  return 1.0 - 2.0 / (exp(2.0 * x) + 1.0);
}

inline constexpr double kLeakySlope = 0.2;

inline double leaky_relu(double x) { return x > 0.0 ? x : kLeakySlope * x; }

// Round half away from zero.
inline double round_half_away(double x) { return std::round(x); }

}  // namespace nlic::pm

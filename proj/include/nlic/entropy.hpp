#pragma once

// Discretized likelihoods over integer symbol grids: the Gaussian-mixture
// model used for latents and pixels, the per-channel factorized prior used for
// the hyper-latent, quantization surrogates, and fixed-point CDF tables for
// the range coder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <random>
#include <span>
#include <vector>

#include "nlic/errors.hpp"
#include "nlic/ops.hpp"
#include "nlic/portable_math.hpp"
#include "nlic/tensor.hpp"

namespace nlic {

// Integer support [lo, hi] mapped onto a normalized axis: symbol s sits at
// value(s) = lo_value + (s - lo) * step.
struct SymbolGrid {
  int lo = 0;
  int hi = 0;
  double lo_value = 0.0;
  double step = 1.0;

  static SymbolGrid latent() { return {-127, 127, -127.0, 1.0}; }
  static SymbolGrid pixel() { return {0, 255, -1.0, 2.0 / 255.0}; }

  std::size_t size() const { return static_cast<std::size_t>(hi - lo + 1); }
  double value(int s) const { return lo_value + static_cast<double>(s - lo) * step; }
  // Lower bin edge of symbol s. Adjacent bins share this exact value.
  double edge(int s) const { return lo_value + (static_cast<double>(s - lo) - 0.5) * step; }
  double span() const { return static_cast<double>(hi - lo) * step; }

  // Nearest symbol to a normalized value, clamped to the support.
  int nearest(double v) const {
    const double s = pm::round_half_away((v - lo_value) / step) + lo;
    return static_cast<int>(std::clamp(s, static_cast<double>(lo), static_cast<double>(hi)));
  }

  void validate() const {
    NLIC_REQUIRE(lo < hi && step > 0.0, ConfigError, "invalid symbol grid [", lo, ", ", hi,
                 "] step ", step);
  }
};

// Mixture parameters at one location.
struct Mixture {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> scales;

  std::size_t size() const { return weights.size(); }
};

namespace detail {

// Mass of one Gaussian between two standardized edges. Uses upper tails when
// both edges sit right of the mean so the difference does not cancel.
inline double normal_interval(double t_lo, double t_hi) {
  if (t_lo > 0.0) return pm::normal_sf(t_lo) - pm::normal_sf(t_hi);
  return pm::normal_cdf(t_hi) - pm::normal_cdf(t_lo);
}

inline constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace detail

// Cumulative of the mixture at x.
inline double gmm_cdf(double x, const Mixture& m) {
  double c = 0.0;
  for (std::size_t k = 0; k < m.size(); ++k) {
    c += m.weights[k] * pm::normal_cdf((x - m.means[k]) / m.scales[k]);
  }
  return c;
}

inline double gmm_pmf(int symbol, const Mixture& m, const SymbolGrid& grid) {
  NLIC_REQUIRE(symbol >= grid.lo && symbol <= grid.hi, ContractViolation, "symbol ", symbol,
               " outside grid [", grid.lo, ", ", grid.hi, "]");
  const double e_lo = symbol == grid.lo ? -detail::kInf : grid.edge(symbol);
  const double e_hi = symbol == grid.hi ? detail::kInf : grid.edge(symbol + 1);
  double p = 0.0;
  for (std::size_t k = 0; k < m.size(); ++k) {
    const double t_lo = (e_lo - m.means[k]) / m.scales[k];
    const double t_hi = (e_hi - m.means[k]) / m.scales[k];
    p += m.weights[k] * detail::normal_interval(t_lo, t_hi);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Factorized prior. Each channel owns 8 parameters
//   (h1, b1, a1, h2, b2, a2, h3, b3)
// and the cumulative is sigmoid(l(x)) with
//   u_i = softplus(h_i) g_{i-1} + b_i,  g_i = u_i + tanh(a_i) tanh(u_i),
//   l   = softplus(h3) g_2 + b3,        g_0 = x.
// Each layer has positive slope, so the cumulative is monotone.

inline constexpr std::size_t kPriorParams = 8;

struct PriorEval {
  double logit = 0.0;
  double dlogit_dx = 0.0;
  double dlogit_dpsi[kPriorParams] = {};
};

inline PriorEval prior_logit(double x, const double* psi) {
  const double s1 = pm::softplus(psi[0]), s2 = pm::softplus(psi[3]), s3 = pm::softplus(psi[6]);
  const double ta1 = pm::tanh(psi[2]), ta2 = pm::tanh(psi[5]);
  const double u1 = s1 * x + psi[1];
  const double tu1 = pm::tanh(u1);
  const double g1 = u1 + ta1 * tu1;
  const double u2 = s2 * g1 + psi[4];
  const double tu2 = pm::tanh(u2);
  const double g2 = u2 + ta2 * tu2;
  PriorEval r;
  r.logit = s3 * g2 + psi[7];
  const double dg2 = 1.0 + ta2 * (1.0 - tu2 * tu2);
  const double dg1 = 1.0 + ta1 * (1.0 - tu1 * tu1);
  const double d_u2 = s3 * dg2;
  const double d_u1 = d_u2 * s2 * dg1;
  r.dlogit_dx = d_u1 * s1;
  r.dlogit_dpsi[0] = d_u1 * x * pm::sigmoid(psi[0]);
  r.dlogit_dpsi[1] = d_u1;
  r.dlogit_dpsi[2] = d_u2 * s2 * (1.0 - ta1 * ta1) * tu1;
  r.dlogit_dpsi[3] = d_u2 * g1 * pm::sigmoid(psi[3]);
  r.dlogit_dpsi[4] = d_u2;
  r.dlogit_dpsi[5] = s3 * (1.0 - ta2 * ta2) * tu2;
  r.dlogit_dpsi[6] = g2 * pm::sigmoid(psi[6]);
  r.dlogit_dpsi[7] = 1.0;
  return r;
}

inline double prior_cdf(double x, const double* psi) {
  return pm::sigmoid(prior_logit(x, psi).logit);
}

// psi: [C, 8] parameter tensor.
inline double factorized_pmf(int symbol, std::size_t channel, const Tensor& psi,
                             const SymbolGrid& grid) {
  NLIC_REQUIRE(psi.ndim() == 2 && psi.dim(1) == kPriorParams && channel < psi.dim(0),
               ContractViolation, "factorized prior needs [C, 8] parameters and channel < C");
  NLIC_REQUIRE(symbol >= grid.lo && symbol <= grid.hi, ContractViolation, "symbol ", symbol,
               " outside grid [", grid.lo, ", ", grid.hi, "]");
  const double* p = psi.data().data() + channel * kPriorParams;
  const bool has_lo = symbol > grid.lo, has_hi = symbol < grid.hi;
  const double l_lo = has_lo ? prior_logit(grid.edge(symbol), p).logit : -detail::kInf;
  const double l_hi = has_hi ? prior_logit(grid.edge(symbol + 1), p).logit : detail::kInf;
  if (!has_lo) return pm::sigmoid(l_hi);
  if (!has_hi) return pm::sigmoid(-l_lo);
  if (l_lo + l_hi > 0.0) return pm::sigmoid(-l_lo) - pm::sigmoid(-l_hi);
  return pm::sigmoid(l_hi) - pm::sigmoid(l_lo);
}

// ---------------------------------------------------------------------------
// Training-time rate terms. Bits are computed from log masses so that far-off
// predictions keep a finite rate and a nonzero gradient.

namespace detail {

// Bin around a continuous value on the grid; bins at or beyond the support
// ends are open.
struct Bin {
  double lo;
  double hi;
};

inline Bin bin_around(double v, const SymbolGrid& grid) {
  const double s = pm::round_half_away((v - grid.lo_value) / grid.step) + grid.lo;
  const double half = 0.5 * grid.step;
  return {s <= grid.lo ? -kInf : v - half, s >= grid.hi ? kInf : v + half};
}

inline constexpr double kLogInvSqrt2Pi = -0.91893853320467274178;

// Standardized edges at or beyond this use the asymptotic tail series.
inline constexpr double kTailSwitch = 10.0;

inline double log_phi(double t) { return -0.5 * t * t + kLogInvSqrt2Pi; }

// log of the upper tail for t >= kTailSwitch:
// phi(t)/t * (1 - 1/t^2 + 3/t^4 - 15/t^6 + 105/t^8 - 945/t^10).
inline double log_normal_sf_tail(double t) {
  const double u = 1.0 / (t * t);
  const double s = 1.0 - u * (1.0 - 3.0 * u * (1.0 - 5.0 * u * (1.0 - 7.0 * u * (1.0 - 9.0 * u))));
  return log_phi(t) - pm::log(t) + pm::log(s);
}

// log of a Gaussian interval mass and its derivatives w.r.t. both edges.
struct LogMass {
  double value;
  double d_lo;
  double d_hi;
};

inline LogMass log_normal_interval(double t_lo, double t_hi) {
  if (t_hi < 0.0) {
    const LogMass m = log_normal_interval(-t_hi, -t_lo);
    return {m.value, -m.d_hi, -m.d_lo};
  }
  LogMass m{};
  if (t_lo >= kTailSwitch) {
    const double a = log_normal_sf_tail(t_lo);
    const double b = std::isinf(t_hi) ? -kInf : log_normal_sf_tail(t_hi);
    m.value = a + pm::log1p(-pm::exp(b - a));
  } else {
    m.value = pm::log(normal_interval(t_lo, t_hi));
  }
  m.d_lo = std::isinf(t_lo) ? 0.0 : -pm::exp(log_phi(t_lo) - m.value);
  m.d_hi = std::isinf(t_hi) ? 0.0 : pm::exp(log_phi(t_hi) - m.value);
  return m;
}

// log(sigmoid(x))
inline double log_sigmoid(double x) { return -pm::softplus(-x); }

// log of sigmoid(l_hi) - sigmoid(l_lo) and its derivatives; infinite logits
// mark open ends.
inline LogMass log_logistic_interval(double l_lo, double l_hi) {
  LogMass m{};
  if (std::isinf(l_lo) && std::isinf(l_hi)) return m;
  if (std::isinf(l_lo)) {
    m.value = log_sigmoid(l_hi);
  } else if (std::isinf(l_hi)) {
    m.value = log_sigmoid(-l_lo);
  } else if (l_lo + l_hi > 0.0) {
    const double a = log_sigmoid(-l_lo);
    m.value = a + pm::log1p(-pm::exp(log_sigmoid(-l_hi) - a));
  } else {
    const double a = log_sigmoid(l_hi);
    m.value = a + pm::log1p(-pm::exp(log_sigmoid(l_lo) - a));
  }
  // sigmoid'(l) = sigmoid(l) sigmoid(-l)
  if (!std::isinf(l_lo)) m.d_lo = -pm::exp(log_sigmoid(l_lo) + log_sigmoid(-l_lo) - m.value);
  if (!std::isinf(l_hi)) m.d_hi = pm::exp(log_sigmoid(l_hi) + log_sigmoid(-l_hi) - m.value);
  return m;
}

}  // namespace detail

// Total bits, sum over elements of -log2 pmf(target). weights/means/scales are
// [B, K*C, ...] with channel index k*C + c; target is [B, C, ...] on the
// grid's normalized axis (continuous values allowed during training).
// Differentiable w.r.t. all four inputs.
inline Tensor gmm_bits(const Tensor& weights, const Tensor& means, const Tensor& scales,
                       const Tensor& target, std::size_t mixtures, const SymbolGrid& grid) {
  detail::require_same_shape(weights, means, "gmm_bits");
  detail::require_same_shape(weights, scales, "gmm_bits");
  NLIC_REQUIRE(target.ndim() >= 2 && weights.ndim() == target.ndim() &&
                   weights.dim(0) == target.dim(0) &&
                   weights.dim(1) == mixtures * target.dim(1) &&
                   weights.numel() == mixtures * target.numel(),
               ContractViolation, "gmm_bits: params ", shape_str(weights.shape()),
               " do not match target ", shape_str(target.shape()), " with K=", mixtures);
  const std::size_t batch = target.dim(0);
  const std::size_t per_batch = target.numel() / batch;
  const std::size_t K = mixtures;

  // log p(target) per element, as log-sum-exp over components.
  auto log_p = std::make_shared<std::vector<double>>(target.numel());
  auto mass = std::make_shared<std::vector<detail::LogMass>>(weights.numel());
  double total = 0.0;
  const double* w = weights.data().data();
  const double* mu = means.data().data();
  const double* sg = scales.data().data();
  const double* tv = target.data().data();
  std::vector<double> terms(K);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < per_batch; ++j) {
      const std::size_t ti = b * per_batch + j;
      const detail::Bin bin = detail::bin_around(tv[ti], grid);
      double top = -detail::kInf;
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t pi = (b * K + k) * per_batch + j;
        const double t_lo = (bin.lo - mu[pi]) / sg[pi];
        const double t_hi = (bin.hi - mu[pi]) / sg[pi];
        (*mass)[pi] = detail::log_normal_interval(t_lo, t_hi);
        terms[k] = pm::log(w[pi]) + (*mass)[pi].value;
        top = std::max(top, terms[k]);
      }
      double s = 0.0;
      for (double t : terms) s += pm::exp(t - top);
      (*log_p)[ti] = top + pm::log(s);
      total -= (*log_p)[ti] / pm::kLn2;
    }
  }

  auto wi = weights.impl(), mi = means.impl(), si = scales.impl(), xi = target.impl();
  return detail::make_result(
      Shape{1}, {total}, "gmm_bits", {&weights, &means, &scales, &target},
      [wi, mi, si, xi, log_p, mass, batch, per_batch, K, grid](const detail::TensorImpl& o) {
        const double g = -o.grad[0] / pm::kLn2;  // d bits / d log p
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < per_batch; ++j) {
            const std::size_t ti = b * per_batch + j;
            const detail::Bin bin = detail::bin_around(xi->data[ti], grid);
            const double lp = (*log_p)[ti];
            double dv = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
              const std::size_t pi = (b * K + k) * per_batch + j;
              const double wk = wi->data[pi], sk = si->data[pi];
              const double t_lo = (bin.lo - mi->data[pi]) / sk;
              const double t_hi = (bin.hi - mi->data[pi]) / sk;
              const detail::LogMass& m = (*mass)[pi];
              // d log p / d w_k = mass_k / p; the responsibility is w_k mass_k / p.
              // A component with w_k = 0 can still hold most of the mass, so
              // m.value - lp is capped before exponentiating.
              const double dw = pm::exp(std::min(m.value - lp, 700.0));
              const double r = wk > 0.0 ? pm::exp(pm::log(wk) + m.value - lp) : 0.0;
              const double dt = r * (m.d_lo + m.d_hi);
              if (wi->requires_grad) wi->ensure_grad()[pi] += g * dw;
              if (mi->requires_grad) mi->ensure_grad()[pi] -= g * dt / sk;
              if (si->requires_grad) {
                double tdt = 0.0;
                if (m.d_lo != 0.0) tdt += m.d_lo * t_lo;
                if (m.d_hi != 0.0) tdt += m.d_hi * t_hi;
                si->ensure_grad()[pi] -= g * r * tdt / sk;
              }
              dv += dt / sk;
            }
            if (xi->requires_grad) xi->ensure_grad()[ti] += g * dv;
          }
        }
      });
}

// Total bits of target [B, C, ...] under the factorized prior psi [C, 8].
// Differentiable w.r.t. target and psi.
inline Tensor factorized_bits(const Tensor& target, const Tensor& psi, const SymbolGrid& grid) {
  NLIC_REQUIRE(target.ndim() >= 2 && psi.ndim() == 2 && psi.dim(1) == kPriorParams &&
                   psi.dim(0) == target.dim(1),
               ContractViolation, "factorized_bits: prior ", shape_str(psi.shape()),
               " does not match target ", shape_str(target.shape()));
  const std::size_t batch = target.dim(0), channels = target.dim(1);
  const std::size_t plane = target.numel() / (batch * channels);

  struct Term {
    PriorEval lo, hi;
    bool has_lo, has_hi;
    detail::LogMass mass;
  };
  auto terms = std::make_shared<std::vector<Term>>(target.numel());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* pp = psi.data().data() + c * kPriorParams;
      for (std::size_t j = 0; j < plane; ++j) {
        const std::size_t i = (b * channels + c) * plane + j;
        const detail::Bin bin = detail::bin_around(target.data()[i], grid);
        Term& t = (*terms)[i];
        t.has_lo = !std::isinf(bin.lo);
        t.has_hi = !std::isinf(bin.hi);
        if (t.has_lo) t.lo = prior_logit(bin.lo, pp);
        if (t.has_hi) t.hi = prior_logit(bin.hi, pp);
        t.mass = detail::log_logistic_interval(t.has_lo ? t.lo.logit : -detail::kInf,
                                               t.has_hi ? t.hi.logit : detail::kInf);
        total -= t.mass.value / pm::kLn2;
      }
    }
  }

  auto xi = target.impl(), qi = psi.impl();
  return detail::make_result(
      Shape{1}, {total}, "factorized_bits", {&target, &psi},
      [xi, qi, terms, batch, channels, plane](const detail::TensorImpl& o) {
        const double g = -o.grad[0] / pm::kLn2;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t j = 0; j < plane; ++j) {
              const std::size_t i = (b * channels + c) * plane + j;
              const Term& t = (*terms)[i];
              const double d_hi = t.mass.d_hi, d_lo = t.mass.d_lo;
              if (xi->requires_grad) {
                xi->ensure_grad()[i] +=
                    g * (d_hi * (t.has_hi ? t.hi.dlogit_dx : 0.0) +
                         d_lo * (t.has_lo ? t.lo.dlogit_dx : 0.0));
              }
              if (qi->requires_grad) {
                auto& gq = qi->ensure_grad();
                for (std::size_t q = 0; q < kPriorParams; ++q) {
                  double d = 0.0;
                  if (t.has_hi) d += d_hi * t.hi.dlogit_dpsi[q];
                  if (t.has_lo) d += d_lo * t.lo.dlogit_dpsi[q];
                  gq[c * kPriorParams + q] += g * d;
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Quantization.

// y + iid uniform noise in (-0.5, 0.5) latent steps; gradient passes through.
template <class Rng>
Tensor noisy_quantize(const Tensor& y, Rng& rng, double step = 1.0) {
  Tensor noise(y.shape());
  for (auto& v : noise.mutable_data()) {
    const double u = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
    v = (u - 0.5) * step;
  }
  return add(y, noise);
}

struct Quantized {
  Tensor values;  // integer-valued, on the grid
  std::size_t clamped = 0;
};

// Round half away from zero, then clamp to the latent grid.
inline Quantized round_quantize(const Tensor& y, const SymbolGrid& grid = SymbolGrid::latent()) {
  std::vector<double> out(y.numel());
  std::size_t clamped = 0;
  const double lo = grid.lo_value, hi = grid.value(grid.hi);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double r = pm::round_half_away(y.data()[i] / grid.step) * grid.step;
    if (r < lo || r > hi || std::isnan(r)) {
      ++clamped;
      r = std::isnan(r) ? 0.0 : std::clamp(r, lo, hi);
    }
    out[i] = r;
  }
  return {Tensor(y.shape(), std::move(out)), clamped};
}

// Sum of -log2 p.
inline double rate_bits(std::span<const double> probabilities) {
  double bits = 0.0;
  for (double p : probabilities) {
    NLIC_REQUIRE(p > 0.0 && p <= 1.0, ContractViolation, "probability ", p,
                 " outside (0, 1]");
    bits -= pm::log2(p);
  }
  return bits;
}

// ---------------------------------------------------------------------------
// Fixed-point CDF tables.

inline constexpr unsigned kCdfPrecision = 16;
inline constexpr std::uint32_t kCdfTotal = 1u << kCdfPrecision;

struct QuantizedCdf {
  int lo = 0;
  std::vector<std::uint32_t> cum;  // size() + 1 entries, cum[0] = 0, back() = total

  std::size_t size() const { return cum.size() - 1; }
  int hi() const { return lo + static_cast<int>(size()) - 1; }
  std::uint32_t start(int s) const { return cum[static_cast<std::size_t>(s - lo)]; }
  std::uint32_t freq(int s) const {
    const auto i = static_cast<std::size_t>(s - lo);
    return cum[i + 1] - cum[i];
  }
  double probability(int s) const { return static_cast<double>(freq(s)) / kCdfTotal; }

  // Symbol whose interval contains v (0 <= v < total).
  int find(std::uint32_t v) const {
    auto it = std::upper_bound(cum.begin() + 1, cum.end(), v);
    return lo + static_cast<int>(it - cum.begin()) - 1;
  }
};

// Floors total * C(edge) at every interior edge, then repairs symbols left
// with zero frequency by giving them one count each and taking the same number
// of counts, one at a time, from whichever symbol currently has the most
// (lowest index on ties).
template <class Cumulative>
QuantizedCdf quantize_cdf(const SymbolGrid& grid, Cumulative&& cumulative) {
  const std::size_t n = grid.size();
  NLIC_REQUIRE(n <= kCdfTotal / 2, PrecisionError, "support of ", n,
               " symbols exceeds half of the ", kCdfTotal, " CDF total");
  std::vector<std::int64_t> freq(n);
  std::int64_t prev = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::int64_t next = kCdfTotal;
    if (i + 1 < n) {
      const double c = cumulative(grid.edge(grid.lo + static_cast<int>(i) + 1));
      const double scaled = std::floor(std::clamp(c, 0.0, 1.0) * kCdfTotal);
      next = std::max(prev, static_cast<std::int64_t>(scaled));
    }
    freq[i] = next - prev;
    prev = next;
  }
  std::int64_t deficit = 0;
  for (auto& f : freq) {
    if (f == 0) {
      f = 1;
      ++deficit;
    }
  }
  if (deficit > 0) {
    std::size_t top = 0, second = n;
    for (std::size_t i = 1; i < n; ++i) {
      if (freq[i] > freq[top]) {
        second = top;
        top = i;
      } else if (second == n || freq[i] > freq[second]) {
        second = i;
      }
    }
    if (second == n || freq[top] - deficit >= freq[second]) {
      freq[top] -= deficit;
    } else {
      auto cmp = [&](std::size_t a, std::size_t b) {
        return freq[a] != freq[b] ? freq[a] < freq[b] : a > b;
      };
      std::priority_queue<std::size_t, std::vector<std::size_t>, decltype(cmp)> heap(cmp);
      for (std::size_t i = 0; i < n; ++i) heap.push(i);
      for (std::int64_t d = 0; d < deficit; ++d) {
        const std::size_t i = heap.top();
        heap.pop();
        NLIC_REQUIRE(freq[i] > 1, PrecisionError, "cannot repair CDF: no mass left to steal");
        --freq[i];
        heap.push(i);
      }
    }
  }
  QuantizedCdf cdf;
  cdf.lo = grid.lo;
  cdf.cum.resize(n + 1);
  cdf.cum[0] = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cdf.cum[i + 1] = cdf.cum[i] + static_cast<std::uint32_t>(freq[i]);
  }
  return cdf;
}

inline QuantizedCdf build_cdf(const Mixture& m, const SymbolGrid& grid) {
  return quantize_cdf(grid, [&m](double e) { return gmm_cdf(e, m); });
}

inline QuantizedCdf build_prior_cdf(const Tensor& psi, std::size_t channel,
                                    const SymbolGrid& grid) {
  NLIC_REQUIRE(psi.ndim() == 2 && psi.dim(1) == kPriorParams && channel < psi.dim(0),
               ContractViolation, "factorized prior needs [C, 8] parameters and channel < C");
  const double* p = psi.data().data() + channel * kPriorParams;
  return quantize_cdf(grid, [p](double e) { return prior_cdf(e, p); });
}

}  // namespace nlic

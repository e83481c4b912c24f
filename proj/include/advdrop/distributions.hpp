#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "common.hpp"

namespace advdrop {

inline double std_normal_pdf(double z) {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * kPi);
}

inline double normal_pdf(double x, double mu, double sigma) {
  return std_normal_pdf((x - mu) / sigma) / sigma;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Computed as ln(m) - ln(1-m) with the argument clamped away from the
// endpoints, where the transform is singular.
inline double logit(double p) {
  if (!(p > 0.0) || !(p < 1.0))
    throw std::domain_error("logit: argument outside (0,1)");
  const double c = std::min(std::max(p, 1e-12), 1.0 - 1e-12);
  return std::log(c) - std::log(1.0 - c);
}

// Composite Simpson over [a,b] with an odd number of points.
template <class F>
double simpson(F f, double a, double b, std::size_t points) {
  if (points < 3 || points % 2 == 0)
    throw std::invalid_argument("simpson: need an odd point count >= 3");
  const double h = (b - a) / static_cast<double>(points - 1);
  double acc = f(a) + f(b);
  for (std::size_t i = 1; i + 1 < points; ++i)
    acc += f(a + h * static_cast<double>(i)) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

// ---- mask distribution -------------------------------------------------------
// mask = sigmoid(r) with r ~ N(mu, sigma^2). The mean uses the probit-style
// variance correction sigmoid(mu / sqrt(1 + (pi/8) sigma^2)); its intrinsic
// error stays under 0.0066 for sigma <= 3 and under 0.0165 for sigma <= 6.

struct LogitNormal {
  double mu = 0.0;
  double sigma = 1.0;

  LogitNormal() = default;
  LogitNormal(double mu_, double sigma_) : mu(mu_), sigma(sigma_) {
    if (!(sigma > 0.0)) throw std::domain_error("LogitNormal: sigma <= 0");
  }

  double pdf(double m) const {
    if (!(m > 0.0) || !(m < 1.0))
      throw std::domain_error("LogitNormal::pdf: mask outside (0,1)");
    return normal_pdf(logit(m), mu, sigma) / (m * (1.0 - m));
  }

  double mean() const {
    return advdrop::sigmoid(mu / std::sqrt(1.0 + (kPi / 8.0) * sigma * sigma));
  }

  double rate() const { return 1.0 - mean(); }

  double sample(Rng& rng) const {
    return advdrop::sigmoid(mu + sigma * rng.normal());
  }

  double mean_mc(Rng& rng, std::size_t n) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += sample(rng);
    return acc / static_cast<double>(n);
  }

  // High-accuracy mean via quadrature in seed space (test oracle, not the
  // training-path approximation).
  double mean_quadrature() const {
    return simpson(
        [&](double z) {
          return advdrop::sigmoid(mu + sigma * z) * std_normal_pdf(z);
        },
        -12.0, 12.0, 20001);
  }
};

// mu giving a target dropout rate at fixed sigma under the corrected-mean
// approximation: rate = 1 - sigmoid(mu / sqrt(1 + (pi/8) sigma^2)).
inline double mu_for_rate(double rate, double sigma) {
  if (!(rate > 0.0) || !(rate < 1.0))
    throw std::domain_error("mu_for_rate: rate outside (0,1)");
  return logit(1.0 - rate) * std::sqrt(1.0 + (kPi / 8.0) * sigma * sigma);
}

// ---- reference densities -----------------------------------------------------

// pdf(x) = scale^shape / Gamma(shape) * x^(-shape-1) * exp(-scale/x), x > 0.
struct InverseGamma {
  double shape = 1.0;
  double scale = 1.0;

  InverseGamma() = default;
  InverseGamma(double k, double theta) : shape(k), scale(theta) {
    if (!(shape > 0.0) || !(scale > 0.0))
      throw std::domain_error("InverseGamma: parameters must be positive");
  }

  double log_pdf(double x) const {
    return shape * std::log(scale) - std::lgamma(shape) -
           (shape + 1.0) * std::log(x) - scale / x;
  }

  double pdf(double x) const {
    if (!(x > 0.0)) return 0.0;
    return std::exp(log_pdf(x));
  }

  double mode() const { return scale / (shape + 1.0); }
  bool has_mean() const { return shape > 1.0; }
  double mean() const {
    if (!has_mean()) throw std::domain_error("InverseGamma: mean needs shape > 1");
    return scale / (shape - 1.0);
  }
  bool has_var() const { return shape > 2.0; }
  double var() const {
    if (!has_var()) throw std::domain_error("InverseGamma: var needs shape > 2");
    return scale * scale / ((shape - 1.0) * (shape - 1.0) * (shape - 2.0));
  }
};

struct LogNormal {
  double m = 0.0;
  double s = 1.0;

  LogNormal() = default;
  LogNormal(double m_, double s_) : m(m_), s(s_) {
    if (!(s > 0.0)) throw std::domain_error("LogNormal: s <= 0");
  }

  double log_pdf(double x) const {
    const double z = (std::log(x) - m) / s;
    return -0.5 * z * z - std::log(s) - 0.5 * std::log(2.0 * kPi) -
           std::log(x);
  }

  double pdf(double x) const {
    if (!(x > 0.0)) return 0.0;
    return std::exp(log_pdf(x));
  }

  double mode() const { return std::exp(m - s * s); }
  double peak() const { return pdf(mode()); }

  static LogNormal fit_moments(double mean, double var) {
    if (!(mean > 0.0) || !(var > 0.0))
      throw std::domain_error("LogNormal::fit_moments: need positive targets");
    const double s2 = std::log(1.0 + var / (mean * mean));
    return LogNormal(std::log(mean) - 0.5 * s2, std::sqrt(s2));
  }

  // mode = exp(m - s^2), pdf(mode) = exp(s^2/2 - m) / (s sqrt(2 pi)); solving
  // gives s e^{s^2/2} = 1 / (mode peak sqrt(2 pi)), monotone in s.
  static LogNormal fit_mode_peak(double mode, double peak) {
    if (!(mode > 0.0) || !(peak > 0.0))
      throw std::domain_error("LogNormal::fit_mode_peak: need positive targets");
    const double rhs = 1.0 / (mode * peak * std::sqrt(2.0 * kPi));
    double lo = 1e-12, hi = 1.0;
    auto g = [](double s) { return s * std::exp(0.5 * s * s); };
    while (g(hi) < rhs) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (g(mid) < rhs ? lo : hi) = mid;
    }
    const double s = 0.5 * (lo + hi);
    return LogNormal(std::log(mode) + s * s, s);
  }
};

// Pushforward of N(m, s^2) through softplus: y = softplus(x). Gaussian-like
// right tail, lognormal-like spike near zero when mass sits at negative x.
struct SoftplusGaussian {
  double m = 0.0;
  double s = 1.0;

  SoftplusGaussian() = default;
  SoftplusGaussian(double m_, double s_) : m(m_), s(s_) {
    if (!(s > 0.0)) throw std::domain_error("SoftplusGaussian: s <= 0");
  }

  // -ln sigmoid(x) = softplus(-x), stable where sigmoid underflows.
  double log_pdf(double y) const {
    const double x = softplus_inv(y);
    const double z = (x - m) / s;
    return -0.5 * z * z - std::log(s) - 0.5 * std::log(2.0 * kPi) +
           advdrop::softplus(-x);
  }

  double pdf(double y) const {
    if (!(y > 0.0))
      throw std::domain_error("SoftplusGaussian::pdf: y <= 0");
    return std::exp(log_pdf(y));
  }

  double mean() const {
    return simpson(
        [&](double z) {
          return advdrop::softplus(m + s * z) * std_normal_pdf(z);
        },
        -12.0, 12.0, 4001);
  }

  double var() const {
    const double mu1 = mean();
    const double mu2 = simpson(
        [&](double z) {
          const double y = advdrop::softplus(m + s * z);
          return y * y * std_normal_pdf(z);
        },
        -12.0, 12.0, 4001);
    return mu2 - mu1 * mu1;
  }

  // Global maximum of the density. In seed coordinates the stationarity
  // condition -(x-m)/s^2 - 1 + sigmoid(x) = 0 can have several roots (a spike
  // near y=0 plus a Gaussian lobe), so scan densely, then Newton-polish.
  std::pair<double, double> mode_peak() const {
    auto log_density_at_seed = [&](double x) {
      const double z = (x - m) / s;
      return -0.5 * z * z - std::log(s) - 0.5 * std::log(2.0 * kPi) +
             advdrop::softplus(-x);
    };
    const double lo = m - s * s - 10.0 * std::max(s, 1.0);
    const double hi = m + 6.0 * s + 10.0;
    const std::size_t kScan = 8192;
    double best_x = lo, best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < kScan; ++i) {
      const double x =
          lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(kScan - 1);
      const double v = log_density_at_seed(x);
      if (v > best_v) {
        best_v = v;
        best_x = x;
      }
    }
    double x = best_x;
    for (int it = 0; it < 60; ++it) {
      const double sig = advdrop::sigmoid(x);
      const double g = -(x - m) / (s * s) - (1.0 - sig);
      const double h = -1.0 / (s * s) + sig * (1.0 - sig);
      if (h >= 0.0) break;  // not locally concave; keep the scan argmax
      const double step = g / h;
      x -= step;
      if (std::abs(step) < 1e-14 * std::max(1.0, std::abs(x))) break;
    }
    if (log_density_at_seed(x) < best_v) x = best_x;
    const double mode = advdrop::softplus(x);
    return {mode, pdf(mode)};
  }

  struct Fit;  // defined below, once this type is complete

  static Fit fit_moments(double target_mean, double target_var);
  static Fit fit_mode_peak(double target_mode, double target_peak);

 private:
  template <class F>
  static Fit solve2(double m0, double t0, F residuals);
};

struct SoftplusGaussian::Fit {
  SoftplusGaussian dist;
  bool converged = false;
  double residual = std::numeric_limits<double>::infinity();
};

// Damped Newton with forward-difference Jacobian on (m, ln s).
template <class F>
SoftplusGaussian::Fit SoftplusGaussian::solve2(double m0, double t0,
                                               F residuals) {
  auto norm2 = [](std::pair<double, double> r) {
    return r.first * r.first + r.second * r.second;
  };
  double m = m0, t = t0;
  auto r = residuals(m, std::exp(t));
  double best = norm2(r);
  double best_m = m, best_t = t;
  for (int it = 0; it < 120 && best > 1e-20; ++it) {
    const double hm = 1e-6 * std::max(1.0, std::abs(m));
    const double ht = 1e-6 * std::max(1.0, std::abs(t));
    const auto rm = residuals(m + hm, std::exp(t));
    const auto rt = residuals(m, std::exp(t + ht));
    const double j11 = (rm.first - r.first) / hm;
    const double j21 = (rm.second - r.second) / hm;
    const double j12 = (rt.first - r.first) / ht;
    const double j22 = (rt.second - r.second) / ht;
    const double det = j11 * j22 - j12 * j21;
    if (std::abs(det) < 1e-300) break;
    const double dm = (r.first * j22 - r.second * j12) / det;
    const double dt = (r.second * j11 - r.first * j21) / det;
    double step = 1.0;
    bool improved = false;
    for (int bt = 0; bt < 25; ++bt, step *= 0.5) {
      const double mn = m - step * dm;
      const double tn = t - step * dt;
      if (tn < -320.0 || tn > 300.0 || !std::isfinite(mn)) continue;
      auto rn = residuals(mn, std::exp(tn));
      if (norm2(rn) < norm2(r)) {
        m = mn;
        t = tn;
        r = rn;
        improved = true;
        break;
      }
    }
    if (!improved) break;
    if (norm2(r) < best) {
      best = norm2(r);
      best_m = m;
      best_t = t;
    }
  }
  Fit fit;
  fit.dist = SoftplusGaussian(best_m, std::exp(best_t));
  fit.residual = std::sqrt(best);
  fit.converged = fit.residual < 1e-8;
  return fit;
}

inline SoftplusGaussian::Fit SoftplusGaussian::fit_moments(double target_mean,
                                                           double target_var) {
  if (!(target_mean > 0.0) || !(target_var > 0.0))
    throw std::domain_error(
        "SoftplusGaussian::fit_moments: need positive targets");
  const double target_sd = std::sqrt(target_var);
  const double m0 = softplus_inv(target_mean);
  const double s0 = target_sd / advdrop::sigmoid(m0);
  auto residuals = [&](double mm, double ss) {
    SoftplusGaussian d(mm, ss);
    return std::pair<double, double>{
        (d.mean() - target_mean) / std::max(1.0, std::abs(target_mean)),
        (std::sqrt(std::max(d.var(), 0.0)) - target_sd) /
            std::max(1.0, target_sd)};
  };
  return solve2(m0, std::log(s0), residuals);
}

inline SoftplusGaussian::Fit SoftplusGaussian::fit_mode_peak(
    double target_mode, double target_peak) {
  if (!(target_mode > 0.0) || !(target_peak > 0.0))
    throw std::domain_error(
        "SoftplusGaussian::fit_mode_peak: need positive targets");
  const LogNormal init = LogNormal::fit_mode_peak(target_mode, target_peak);
  auto residuals = [&](double mm, double ss) {
    const auto [mode, peak] = SoftplusGaussian(mm, ss).mode_peak();
    return std::pair<double, double>{std::log(mode / target_mode),
                                     std::log(peak / target_peak)};
  };
  return solve2(init.m, std::log(init.s), residuals);
}

// Moment matching demands both analytic inverse-gamma moments (shape > 2).
inline LogNormal moment_match_lognormal(const InverseGamma& ig) {
  if (!ig.has_var())
    throw std::domain_error(
        "moment_match: inverse gamma moments undefined (shape <= 2)");
  return LogNormal::fit_moments(ig.mean(), ig.var());
}

inline SoftplusGaussian::Fit moment_match_softplus_gaussian(
    const InverseGamma& ig) {
  if (!ig.has_var())
    throw std::domain_error(
        "moment_match: inverse gamma moments undefined (shape <= 2)");
  return SoftplusGaussian::fit_moments(ig.mean(), ig.var());
}

// ---- divergence quadrature ---------------------------------------------------

inline std::vector<double> log_grid(double lo, double hi, std::size_t n) {
  if (!(lo > 0.0) || !(hi > lo) || n < 2)
    throw std::invalid_argument("log_grid: need 0 < lo < hi and n >= 2");
  std::vector<double> g(n);
  const double llo = std::log(lo), lhi = std::log(hi);
  for (std::size_t i = 0; i < n; ++i)
    g[i] = std::exp(llo + (lhi - llo) * static_cast<double>(i) /
                              static_cast<double>(n - 1));
  g.front() = lo;
  g.back() = hi;
  return g;
}

// Interval where pdf >= rel * pdf(mode) for a unimodal density on (0, inf).
inline std::pair<double, double> support_bounds(
    const std::function<double(double)>& pdf, double mode, double rel = 1e-12) {
  const double target = pdf(mode) * rel;
  if (!(target > 0.0))
    throw std::domain_error("support_bounds: density peak not positive");
  double lo = mode;
  while (pdf(lo) >= target && lo > 1e-300) lo /= 2.0;
  double lo_hi = mode;
  for (int it = 0; it < 200; ++it) {
    const double mid = std::sqrt(lo * lo_hi);
    (pdf(mid) < target ? lo : lo_hi) = mid;
  }
  double hi = mode;
  while (pdf(hi) >= target && hi < 1e300) hi *= 2.0;
  double hi_lo = mode;
  for (int it = 0; it < 200; ++it) {
    const double mid = std::sqrt(hi * hi_lo);
    (pdf(mid) < target ? hi : hi_lo) = mid;
  }
  return {lo, hi};
}

// Trapezoid of p ln(p/q) over the given grid. Zero-density points of p
// contribute nothing; q vanishing where p has mass is an error. Small
// negative totals (quadrature noise) clip to 0.
inline double kl_trapezoid(const std::vector<double>& grid,
                           const std::function<double(double)>& p,
                           const std::function<double(double)>& q) {
  auto f = [&](double x) {
    const double pv = p(x);
    if (pv <= 0.0) return 0.0;
    const double qv = q(x);
    if (qv <= 0.0)
      throw std::domain_error(
          "kl_trapezoid: q vanishes where p > 0 (divergence)");
    return pv * std::log(pv / qv);
  };
  double acc = 0.0;
  double prev = f(grid[0]);
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double cur = f(grid[i]);
    acc += 0.5 * (prev + cur) * (grid[i] - grid[i - 1]);
    prev = cur;
  }
  return acc < 0.0 ? 0.0 : acc;
}

// Same integral with q supplied in log space, so far-tail underflow of q
// cannot masquerade as a support violation.
inline double kl_trapezoid_logq(const std::vector<double>& grid,
                                const std::function<double(double)>& p,
                                const std::function<double(double)>& log_q) {
  auto f = [&](double x) {
    const double pv = p(x);
    if (pv <= 0.0) return 0.0;
    return pv * (std::log(pv) - log_q(x));
  };
  double acc = 0.0;
  double prev = f(grid[0]);
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double cur = f(grid[i]);
    acc += 0.5 * (prev + cur) * (grid[i] - grid[i - 1]);
    prev = cur;
  }
  return acc < 0.0 ? 0.0 : acc;
}

// The divergence-comparison recipe used by the distribution check: fit both
// approximating families to an inverse gamma and integrate forward KL on a
// 4096-point log-spaced grid truncated at 1e-12 of the target's peak.
struct ApproxComparison {
  InverseGamma target;
  LogNormal ln;
  SoftplusGaussian spg;
  bool used_moments = false;   // else mode/peak matching
  bool spg_feasible = true;    // mode/peak fit converged
  double kl_ln = 0.0;
  double kl_spg = 0.0;
  double grid_lo = 0.0, grid_hi = 0.0;
};

inline ApproxComparison compare_approximations(const InverseGamma& ig,
                                               std::size_t grid_points = 4096) {
  ApproxComparison out;
  out.target = ig;
  if (ig.has_var()) {
    out.used_moments = true;
    out.ln = moment_match_lognormal(ig);
    auto fit = moment_match_softplus_gaussian(ig);
    out.spg = fit.dist;
    out.spg_feasible = fit.converged;
  } else {
    const double mode = ig.mode();
    const double peak = ig.pdf(mode);
    out.ln = LogNormal::fit_mode_peak(mode, peak);
    auto fit = SoftplusGaussian::fit_mode_peak(mode, peak);
    out.spg = fit.dist;
    out.spg_feasible = fit.converged;
  }
  auto ig_pdf = [&](double x) { return ig.pdf(x); };
  const auto [lo, hi] = support_bounds(ig_pdf, ig.mode());
  out.grid_lo = lo;
  out.grid_hi = hi;
  const auto grid = log_grid(lo, hi, grid_points);
  out.kl_ln = kl_trapezoid_logq(grid, ig_pdf,
                                [&](double x) { return out.ln.log_pdf(x); });
  out.kl_spg = kl_trapezoid_logq(grid, ig_pdf,
                                 [&](double x) { return out.spg.log_pdf(x); });
  return out;
}

}  // namespace advdrop

#pragma once

#include "offgrid_refine.hpp"
#include "sbl_core.hpp"
#include "types.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace offgrid {

struct L1Config {
  double epsilon = -1.0;  // residual ball radius, must be set > 0
  int max_inner = 1500;   // FISTA iterations per lambda
  double rel_tol = 1e-7;  // relative objective change stopping rule
  int bisect_steps = 20;  // outer bisection steps on lambda
  int power_iters = 50;   // Lipschitz estimate
};

// Radius for ||y - D t|| <= eps matching the noise ball: E||n||^2 = T sigma^2
// with standard deviation sigma^2 sqrt(T), taken two deviations out.
inline double default_epsilon(int t, double noise_var) {
  if (t < 1 || !(noise_var >= 0.0)) throw std::invalid_argument("default_epsilon: bad arguments");
  return std::sqrt(static_cast<double>(t) * noise_var) *
         std::sqrt(1.0 + 2.0 / std::sqrt(static_cast<double>(t)));
}

struct L1Result {
  CVec t;
  bool feasible = false;  // residual constraint met
  int iterations = 0;     // total inner iterations across the lambda path
  double resid_norm = 0.0;
  double lambda = 0.0;    // final regularization weight
};

namespace detail {

inline double lipschitz_estimate(const CMat& d, int iters) {
  const auto rows = static_cast<std::uint64_t>(d.rows());
  const auto cols = static_cast<std::uint64_t>(d.cols());
  CVec v = CVec::Constant(d.cols(), cplx(1.0 / std::sqrt(static_cast<double>(d.cols())), 0.0));
  double lam = 0.0;
  for (int i = 0; i < iters; ++i) {
    opcount::add(rows, 1, cols);
    opcount::add(cols, 1, rows);
    CVec w = d.adjoint() * (d * v);
    lam = w.norm();
    if (!(lam > 0.0)) return 0.0;
    v = w / lam;
  }
  return lam;
}

inline CVec soft_threshold(const CVec& z, double kappa) {
  CVec out(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double m = std::abs(z[i]);
    out[i] = m > kappa ? z[i] * ((m - kappa) / m) : cplx(0.0, 0.0);
  }
  return out;
}

struct LassoSolution {
  CVec t;
  double resid_norm;
  int iterations;
};

// FISTA on 0.5 ||y - D t||^2 + lambda ||t||_1 with adaptive restart: a step
// that would raise the objective is retaken from the previous iterate without
// momentum, which keeps the objective monotone at step <= 1/L.
inline LassoSolution fista(const CVec& y, const CMat& d, double lambda, double step,
                           const L1Config& cfg, CVec warm) {
  const auto rows = static_cast<std::uint64_t>(d.rows());
  const auto cols = static_cast<std::uint64_t>(d.cols());
  auto objective = [&](const CVec& t, const CVec& resid) {
    return 0.5 * resid.squaredNorm() + lambda * t.cwiseAbs().sum();
  };
  auto prox_from = [&](const CVec& point) {
    opcount::add(rows, 1, cols);
    opcount::add(cols, 1, rows);
    const CVec grad = d.adjoint() * (d * point - y);
    return soft_threshold(point - step * grad, lambda * step);
  };

  CVec t = std::move(warm);
  CVec extra = t;
  CVec resid = y - d * t;
  double obj = objective(t, resid);
  double theta = 1.0;
  int it = 0;
  for (; it < cfg.max_inner; ++it) {
    CVec next = prox_from(extra);
    CVec next_resid = y - d * next;
    opcount::add(rows, 1, cols);
    double next_obj = objective(next, next_resid);
    if (next_obj > obj) {  // restart momentum, plain step from t
      theta = 1.0;
      next = prox_from(t);
      next_resid = y - d * next;
      opcount::add(rows, 1, cols);
      next_obj = objective(next, next_resid);
    }
    const double theta_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * theta * theta));
    extra = next + ((theta - 1.0) / theta_next) * (next - t);
    const bool done = std::abs(obj - next_obj) <= cfg.rel_tol * std::max(1.0, std::abs(obj));
    t = std::move(next);
    resid = std::move(next_resid);
    obj = next_obj;
    theta = theta_next;
    if (done) {
      ++it;
      break;
    }
  }
  return {std::move(t), resid.norm(), it};
}

}  // namespace detail

// Basis-pursuit denoising via a lambda path: log-space bisection for the
// largest lambda whose LASSO solution stays inside the epsilon ball, each
// solve warm-started from the previous one. If even a tiny lambda cannot
// reach the ball the best residual found is returned with feasible = false.
inline L1Result l1_recover(const CVec& y, const CMat& d, const L1Config& cfg) {
  if (!(cfg.epsilon > 0.0)) throw std::invalid_argument("l1_recover: epsilon must be positive");
  if (d.rows() != y.size()) throw std::invalid_argument("l1_recover: dimension mismatch");

  L1Result res;
  res.t = CVec::Zero(d.cols());
  res.resid_norm = y.norm();
  const auto rows = static_cast<std::uint64_t>(d.rows());
  const auto cols = static_cast<std::uint64_t>(d.cols());
  opcount::add(cols, 1, rows);
  const double lambda_max = (d.adjoint() * y).cwiseAbs().maxCoeff();
  res.lambda = lambda_max;
  if (res.resid_norm <= cfg.epsilon || !(lambda_max > 0.0)) {
    res.feasible = res.resid_norm <= cfg.epsilon;
    return res;
  }

  const double lip = detail::lipschitz_estimate(d, cfg.power_iters);
  if (!(lip > 0.0)) return res;
  const double step = 1.0 / (1.02 * lip);

  // Walk lambda down until feasible.
  double lam_infeas = lambda_max;
  double lam = 1e-4 * lambda_max;
  CVec warm = res.t;
  detail::LassoSolution best{res.t, res.resid_norm, 0};
  while (true) {
    auto sol = detail::fista(y, d, lam, step, cfg, warm);
    res.iterations += sol.iterations;
    warm = sol.t;
    const bool feasible = sol.resid_norm <= cfg.epsilon;
    if (sol.resid_norm < best.resid_norm) best = sol;
    if (feasible) {
      best = std::move(sol);
      break;
    }
    lam_infeas = lam;
    if (lam <= 1e-12 * lambda_max) {
      res.t = std::move(best.t);
      res.resid_norm = best.resid_norm;
      res.lambda = lam;
      res.feasible = false;
      return res;
    }
    lam *= 1e-2;
  }

  // Largest feasible lambda in [lam, lam_infeas].
  double lam_feas = lam;
  for (int b = 0; b < cfg.bisect_steps; ++b) {
    const double mid = std::sqrt(lam_feas * lam_infeas);
    auto sol = detail::fista(y, d, mid, step, cfg, warm);
    res.iterations += sol.iterations;
    warm = sol.t;
    if (sol.resid_norm <= cfg.epsilon) {
      lam_feas = mid;
      best = std::move(sol);
    } else {
      lam_infeas = mid;
    }
  }
  res.t = std::move(best.t);
  res.resid_norm = best.resid_norm;
  res.lambda = lam_feas;
  res.feasible = true;
  return res;
}

// Sparse recovery in the unitary DFT basis: y = (X F) s + n, h = F s.
inline CVec dft_estimate(const CVec& y, const CMat& x, const L1Config& cfg,
                         L1Result* info = nullptr) {
  const int n = static_cast<int>(x.cols());
  const CMat f = dft_basis(n);
  opcount::add(static_cast<std::uint64_t>(x.rows()), static_cast<std::uint64_t>(n),
               static_cast<std::uint64_t>(n));
  auto sol = l1_recover(y, x * f, cfg);
  const CVec h = f * sol.t;
  if (info) *info = std::move(sol);
  return h;
}

// Sparse recovery over the dictionary grid, optionally LS-refit on the
// detected support (strongest coefficients with power >= threshold * max,
// capped at T columns so the refit stays overdetermined).
inline CVec overcomplete_dft_estimate(const CVec& y, const CMat& x, const OffGridDictionary& dict,
                                      const L1Config& cfg, double support_threshold = 1e-2,
                                      bool refit = true, L1Result* info = nullptr) {
  const RVec beta = RVec::Zero(dict.size());
  const CMat a = dict.steering(beta);
  opcount::add(static_cast<std::uint64_t>(x.rows()), static_cast<std::uint64_t>(dict.size()),
               static_cast<std::uint64_t>(x.cols()));
  auto sol = l1_recover(y, x * a, cfg);
  CVec h;
  if (!refit || sol.t.cwiseAbs().maxCoeff() <= 0.0) {
    h = a * sol.t;
  } else {
    const auto support =
        select_support(sol.t.cwiseAbs2(), support_threshold, static_cast<int>(y.size()));
    h = ls_refit(dict, x, y, beta, dict.phi_fixed, support);
  }
  if (info) *info = std::move(sol);
  return h;
}

// Grid-locked variant of the evidence loop (offsets frozen at zero).
inline EstimateResult ongrid_sbl_estimate(const CVec& y, const CMat& x,
                                          const OffGridDictionary& dict,
                                          const Hyperpriors& priors = {}, RefineConfig cfg = {}) {
  cfg.refine_beta = false;
  cfg.refine_phi = false;
  return estimate_offgrid_linear(y, x, dict, priors, cfg);
}

}  // namespace offgrid

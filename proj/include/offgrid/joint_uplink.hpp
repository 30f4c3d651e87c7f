#pragma once

#include "offgrid_refine.hpp"
#include "sbl_core.hpp"
#include "types.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace offgrid {

// Joint downlink/uplink model: both links share the path angles (grid +
// offsets) and the per-component precisions gamma; the uplink weights carry
// an extra per-component precision scaling tau to absorb the independent
// gains. The uplink observation is the LS channel estimate itself, so its
// design matrix is the identity and the dictionary is the steering matrix
// at the uplink wavelength.
struct JointState {
  double alpha = 1.0;      // downlink noise precision
  double alpha_bar = 1.0;  // uplink (LS estimate) noise precision
  RVec gamma;
  RVec tau;
  RVec beta;
  CVec mu;
  CVec mu_bar;
  CMat sigma;
  CMat sigma_bar;
  int iteration = 0;
};

struct JointEstimateResult {
  CVec h;  // downlink channel estimate
  std::vector<int> support;
  JointState state;
  std::vector<TraceRow> trace;
  int iterations = 0;
  bool stalled = false;
  bool hit_max_iters = false;
};

// Same grid and geometry, carrier swapped to the uplink band.
inline OffGridDictionary assemble_uplink_dictionary(const OffGridDictionary& dict,
                                                    Wavelength wl_up) {
  OffGridDictionary up = dict;
  up.wl = wl_up;
  return up;
}

// gamma'_l = (a + 2) / (b + Xi_d,ll + tau_l Xi_u,ll) with Xi_ll the posterior
// second moment of link weight l. Both stats must be current at the state the
// update is applied to.
inline RVec update_gamma_joint(const PosteriorStats& st_d, const PosteriorStats& st_u,
                               const RVec& tau, const Hyperpriors& pr, double ceiling = 1e12) {
  const Eigen::Index count = st_d.mu.size();
  if (st_u.mu.size() != count || tau.size() != count)
    throw std::invalid_argument("update_gamma_joint: dimension mismatch");
  RVec out(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    double xi_d = st_d.sigma_diag[i] + std::norm(st_d.mu[i]);
    double xi_u = st_u.sigma_diag[i] + std::norm(st_u.mu[i]);
    if (xi_d < -1e-10 || xi_u < -1e-10)
      throw std::runtime_error("update_gamma_joint: negative posterior second moment");
    xi_d = std::max(xi_d, 0.0);
    xi_u = std::max(xi_u, 0.0);
    out[i] = std::min((pr.a + 2.0) / (pr.b + xi_d + tau[i] * xi_u), ceiling);
  }
  return out;
}

// tau'_l = 1 / (gamma_l Xi_u,ll), flat prior. st_u must be refreshed at the
// new gamma before this update.
inline RVec update_tau(const RVec& gamma, const PosteriorStats& st_u, double lo = 1e-12,
                       double hi = 1e12) {
  const Eigen::Index count = gamma.size();
  if (st_u.mu.size() != count) throw std::invalid_argument("update_tau: dimension mismatch");
  RVec out(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    const double xi_u = std::max(st_u.sigma_diag[i] + std::norm(st_u.mu[i]), 0.0);
    out[i] = std::clamp(1.0 / (gamma[i] * xi_u), lo, hi);
  }
  return out;
}

struct JointPosterior {
  PosteriorStats down;
  PosteriorStats up;
};

// The two links are conditionally independent given the hyperparameters, so
// the joint posterior factors into two per-link Gaussians. The uplink prior
// precision on component l is gamma_l tau_l.
inline JointPosterior compute_joint_posterior(const CVec& y, const CMat& phi_d,
                                              const CVec& h_bar, const CMat& a_u, double alpha,
                                              double alpha_bar, const RVec& gamma,
                                              const RVec& tau) {
  JointPosterior jp;
  jp.down = posterior_stats(y, phi_d, alpha, gamma);
  jp.up = posterior_stats(h_bar, a_u, alpha_bar, gamma.cwiseProduct(tau));
  return jp;
}

// Offset gradient of the joint surrogate: the downlink term plus the uplink
// term, each in the frozen-posterior form used by refine_gradient.
inline RVec joint_beta_gradient(const JointPosterior& jp, double alpha, double alpha_bar,
                                const CMat& dphi_d, const CMat& da_u) {
  return refine_gradient(alpha, jp.down.mu, jp.down.resid, jp.down.phi_sigma, dphi_d) +
         refine_gradient(alpha_bar, jp.up.mu, jp.up.resid, jp.up.phi_sigma, da_u);
}

// ln p(y | .) + ln p(h_bar | .) + priors on alpha, alpha_bar, gamma. tau has
// a flat prior and beta a uniform one; both contribute constants.
inline double joint_log_evidence(const JointPosterior& jp, int t, int n, double alpha,
                                 double alpha_bar, const RVec& gamma, const Hyperpriors& pr) {
  double ev = -static_cast<double>(t) * std::log(pi) - jp.down.logdet_cov - jp.down.quad -
              static_cast<double>(n) * std::log(pi) - jp.up.logdet_cov - jp.up.quad +
              log_gamma_prior(alpha, pr) + log_gamma_prior(alpha_bar, pr);
  for (Eigen::Index i = 0; i < gamma.size(); ++i) ev += log_gamma_prior(gamma[i], pr);
  return ev;
}

// Block MM loop over (alpha, alpha_bar, gamma, tau, beta), posterior refreshed
// before every closed-form update so each block is applied at the state it was
// derived from. Returns the downlink channel estimate.
inline JointEstimateResult estimate_uplink_aided(const CVec& y, const CMat& x, const CVec& h_bar,
                                                 const OffGridDictionary& dict, Wavelength wl_up,
                                                 const Hyperpriors& priors = {},
                                                 const RefineConfig& cfg = {}) {
  const int t = static_cast<int>(y.size());
  const int n = dict.geom.size();
  const int count = dict.size();
  if (x.rows() != t || x.cols() != n)
    throw std::invalid_argument("estimate_uplink_aided: dimension mismatch");
  if (h_bar.size() != n)
    throw std::invalid_argument("estimate_uplink_aided: uplink estimate length != array size");

  const OffGridDictionary dict_up = assemble_uplink_dictionary(dict, wl_up);
  double alpha = 1.0, alpha_bar = 1.0;
  RVec gamma = RVec::Ones(count);
  RVec tau = RVec::Ones(count);
  RVec beta = RVec::Zero(count);
  opcount::add(static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(count),
               static_cast<std::uint64_t>(n));
  CMat phi_d = x * dict.steering(beta);
  CMat a_u = dict_up.steering(beta);

  auto refresh_down = [&]() { return posterior_stats(y, phi_d, alpha, gamma); };
  auto refresh_up = [&]() { return posterior_stats(h_bar, a_u, alpha_bar, gamma.cwiseProduct(tau)); };

  JointEstimateResult res;
  JointPosterior jp;
  bool fresh = false;
  double prev_ev = 0.0;
  double last_step = 0.0;
  int iter = 0;
  for (; iter < cfg.max_iters; ++iter) {
    jp.down = refresh_down();
    jp.up = refresh_up();
    fresh = true;
    const double ev = joint_log_evidence(jp, t, n, alpha, alpha_bar, gamma, priors);
    res.trace.push_back(
        {iter, ev, last_step, detail::count_active(jp.down.mu, cfg.support_threshold)});
    if (iter > 0 && std::abs(ev - prev_ev) / std::max(1.0, std::abs(prev_ev)) < cfg.evidence_tol)
      break;
    prev_ev = ev;

    alpha = update_alpha(jp.down, t, priors);
    alpha_bar = update_alpha(jp.up, n, priors);
    jp.down = refresh_down();
    jp.up = refresh_up();
    gamma = update_gamma_joint(jp.down, jp.up, tau, priors, cfg.gamma_ceiling);
    jp.up = refresh_up();
    tau = update_tau(gamma, jp.up);
    jp.down = refresh_down();
    jp.up = refresh_up();

    last_step = 0.0;
    if (cfg.refine_beta) {
      opcount::add(static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(count),
                   static_cast<std::uint64_t>(n));
      const CMat dphi_d = x * dict.deriv_theta(beta);
      const CMat da_u = dict_up.deriv_theta(beta);
      RVec zeta = joint_beta_gradient(jp, alpha, alpha_bar, dphi_d, da_u);
      detail::mask_pruned(zeta, gamma, cfg.gamma_ceiling);
      RVec next;
      if (cfg.step_mode == StepMode::fixed) {
        next = beta_step_fixed(beta, zeta, dict.r_theta, cfg.beta_clip);
      } else {
        const CMat sigma_d = jp.down.full_sigma();
        const CMat sigma_u = jp.up.full_sigma();
        const CVec mu_d = jp.down.mu;
        const CVec mu_u = jp.up.mu;
        const double al = alpha, al_bar = alpha_bar;
        const CMat eye = CMat::Identity(n, n);
        auto objective = [&](const RVec& b) {
          return surrogate_objective(y, x, dict.steering(b), al, mu_d, sigma_d) +
                 surrogate_objective(h_bar, eye, dict_up.steering(b), al_bar, mu_u, sigma_u);
        };
        auto ls = beta_step_linesearch(beta, zeta, dict.r_theta, cfg, objective);
        res.stalled = res.stalled || ls.stalled;
        next = std::move(ls.beta);
      }
      last_step = (next - beta).lpNorm<Eigen::Infinity>();
      if (last_step > 0.0) {
        beta = std::move(next);
        opcount::add(static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(count),
                     static_cast<std::uint64_t>(n));
        phi_d = x * dict.steering(beta);
        a_u = dict_up.steering(beta);
        fresh = false;
      }
    }
  }
  res.hit_max_iters = iter == cfg.max_iters;
  res.iterations = iter;
  if (!fresh) {
    jp.down = refresh_down();
    jp.up = refresh_up();
  }

  res.state.alpha = alpha;
  res.state.alpha_bar = alpha_bar;
  res.state.gamma = gamma;
  res.state.tau = std::move(tau);
  res.state.beta = beta;
  res.state.mu = jp.down.mu;
  res.state.mu_bar = jp.up.mu;
  res.state.sigma = jp.down.full_sigma();
  res.state.sigma_bar = jp.up.full_sigma();
  res.state.iteration = iter;

  // Support comes from the shared gamma (prior variance 1/gamma), the one
  // vector both views shape, then the downlink LS refit as in extract_channel.
  res.support = select_support(gamma.cwiseInverse(), cfg.support_threshold, t);
  res.h = ls_refit(dict, x, y, beta, dict.phi_fixed, res.support);
  return res;
}

}  // namespace offgrid

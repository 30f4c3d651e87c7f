#pragma once

#include "array_model.hpp"
#include "types.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace offgrid {

// Gamma(shape 1 + a, rate b) hyperpriors shared by every precision variable.
struct Hyperpriors {
  double a = 1e-4;
  double b = 1e-4;
};

inline double log_gamma_prior(double x, const Hyperpriors& pr) {
  return (1.0 + pr.a) * std::log(pr.b) - std::lgamma(1.0 + pr.a) + pr.a * std::log(x) - pr.b * x;
}

enum class SteeringModel {
  linear,  // columns exp(-j 2 pi (d_n/lambda) sin(theta)), elevation ignored
  planar   // columns a(theta, phi) of the full planar model
};

// Fixed azimuth grid plus per-column refinement state (beta offsets, and for
// the planar model per-column elevations). The uniform factories place the L
// points at cell centers so each one owns a +-r_theta/2 cell.
class OffGridDictionary {
 public:
  ArrayGeometry geom;
  Wavelength wl;
  SteeringModel model = SteeringModel::linear;
  RVec grid;       // ascending azimuth grid (radians)
  double r_theta;  // grid interval (mean spacing for explicit grids)
  RVec phi_fixed;  // elevation used when no phi_hat is supplied (planar model)

  OffGridDictionary(ArrayGeometry g, Wavelength w) : geom(std::move(g)), wl(w), r_theta(0.0) {
    geom.validate();
  }

  static OffGridDictionary uniform_linear(ArrayGeometry g, Wavelength w, int count,
                                          double lo = -pi / 2, double hi = pi / 2) {
    OffGridDictionary d(std::move(g), w);
    d.model = SteeringModel::linear;
    d.fill_uniform(count, lo, hi);
    return d;
  }

  // Full-circle azimuth grid for planar geometries.
  static OffGridDictionary uniform_azimuth(ArrayGeometry g, Wavelength w, int count,
                                           double lo = -pi, double hi = pi) {
    OffGridDictionary d(std::move(g), w);
    d.model = SteeringModel::planar;
    d.fill_uniform(count, lo, hi);
    return d;
  }

  static OffGridDictionary explicit_grid(ArrayGeometry g, Wavelength w, RVec points,
                                         SteeringModel m = SteeringModel::linear,
                                         RVec phis = RVec()) {
    OffGridDictionary d(std::move(g), w);
    d.model = m;
    if (points.size() < 1) throw std::invalid_argument("dictionary: empty grid");
    for (Eigen::Index i = 1; i < points.size(); ++i)
      if (!(points[i] > points[i - 1]))
        throw std::invalid_argument("dictionary: grid must be strictly increasing");
    d.grid = std::move(points);
    d.r_theta = d.grid.size() > 1
                    ? (d.grid[d.grid.size() - 1] - d.grid[0]) / static_cast<double>(d.grid.size() - 1)
                    : 0.0;
    if (phis.size() != 0 && phis.size() != d.grid.size())
      throw std::invalid_argument("dictionary: phi list length mismatch");
    d.phi_fixed = phis.size() ? std::move(phis) : RVec::Zero(d.grid.size());
    return d;
  }

  int size() const { return static_cast<int>(grid.size()); }

  CVec column(int l, double beta_l, double phi_l) const {
    const double theta = grid[l] + beta_l;
    return model == SteeringModel::linear ? steering_linear(geom, theta, wl)
                                          : steering_2d(geom, theta, phi_l, wl);
  }

  CVec column_deriv_theta(int l, double beta_l, double phi_l) const {
    const double theta = grid[l] + beta_l;
    return model == SteeringModel::linear ? steering_deriv_linear(geom, theta, wl)
                                          : steering_deriv_theta(geom, theta, phi_l, wl);
  }

  // A(beta) with the stored per-column elevations.
  CMat steering(const RVec& beta) const { return steering(beta, phi_fixed); }

  CMat steering(const RVec& beta, const RVec& phi_hat) const {
    check(beta, phi_hat);
    CMat a(geom.size(), size());
    for (int l = 0; l < size(); ++l) a.col(l) = column(l, beta[l], phi_hat[l]);
    return a;
  }

  CMat deriv_theta(const RVec& beta) const { return deriv_theta(beta, phi_fixed); }

  CMat deriv_theta(const RVec& beta, const RVec& phi_hat) const {
    check(beta, phi_hat);
    CMat a(geom.size(), size());
    for (int l = 0; l < size(); ++l) a.col(l) = column_deriv_theta(l, beta[l], phi_hat[l]);
    return a;
  }

  CMat deriv_phi(const RVec& beta, const RVec& phi_hat) const {
    if (model != SteeringModel::planar)
      throw std::logic_error("dictionary: elevation derivative needs the planar model");
    check(beta, phi_hat);
    CMat a(geom.size(), size());
    for (int l = 0; l < size(); ++l)
      a.col(l) = steering_deriv_phi(geom, grid[l] + beta[l], phi_hat[l], wl);
    return a;
  }

 private:
  void fill_uniform(int count, double lo, double hi) {
    if (count < 1) throw std::invalid_argument("dictionary: grid size must be >= 1");
    if (!(hi > lo)) throw std::invalid_argument("dictionary: empty angular domain");
    r_theta = (hi - lo) / count;
    grid.resize(count);
    for (int l = 0; l < count; ++l) grid[l] = lo + (l + 0.5) * r_theta;
    phi_fixed = RVec::Zero(count);
  }

  void check(const RVec& beta, const RVec& phi_hat) const {
    if (beta.size() != grid.size() || phi_hat.size() != grid.size())
      throw std::invalid_argument("dictionary: refinement vector length mismatch");
  }
};

// Posterior of the component weights given (alpha, gamma):
//   Sigma = (alpha Phi^H Phi + diag(gamma))^-1,   mu = alpha Sigma Phi^H y.
struct Posterior {
  CVec mu;
  CMat sigma;
};

enum class PosteriorRoute { automatic, direct, woodbury };

// Per-iteration view of the posterior. Carries exactly what the updates and
// gradients consume (mu, diag Sigma, Phi Sigma, traces, residual) plus the
// log-evidence byproducts, without materializing the L x L covariance when
// the Woodbury route is active. full_sigma() materializes it on demand.
struct PosteriorStats {
  CVec mu;
  RVec sigma_diag;
  CMat phi_sigma;  // Phi * Sigma, T x L
  double tr_phi_sigma_phiH = 0.0;
  CVec resid;  // y - Phi mu
  double resid_sq = 0.0;
  // ln det(C) and y^H C^-1 y for C = alpha^-1 I + Phi diag(gamma)^-1 Phi^H
  double logdet_cov = 0.0;
  double quad = 0.0;

  bool woodbury = false;
  CMat sigma;  // direct route only
  RVec inv_d;  // Woodbury factors: Sigma = diag(inv_d) - wk w^H
  CMat w;      // L x T
  CMat wk;     // L x T

  CMat full_sigma() const {
    if (!woodbury) return sigma;
    opcount::add(static_cast<std::uint64_t>(w.rows()), static_cast<std::uint64_t>(w.rows()),
                 static_cast<std::uint64_t>(w.cols()));
    CMat s = CMat(inv_d.asDiagonal());
    s.noalias() -= wk * w.adjoint();
    return ((s + s.adjoint()) * 0.5).eval();
  }
};

namespace detail {

inline void validate_posterior_inputs(const CVec& y, const CMat& phi, double alpha,
                                      const RVec& gamma) {
  if (phi.rows() != y.size() || phi.cols() != gamma.size())
    throw std::invalid_argument("posterior: dimension mismatch");
  if (!std::isfinite(alpha) || !(alpha > 0.0))
    throw std::invalid_argument("posterior: alpha must be finite and positive");
  if (!y.allFinite() || !phi.allFinite())
    throw std::invalid_argument("posterior: non-finite measurement or dictionary");
  for (Eigen::Index l = 0; l < gamma.size(); ++l)
    if (!std::isfinite(gamma[l]) || !(gamma[l] > 0.0))
      throw std::invalid_argument("posterior: gamma must be finite and positive");
}

// Cholesky with one jitter retry (1e-12 * max diagonal), throws when the
// system stays indefinite.
inline Eigen::LLT<CMat> chol_with_jitter(CMat m, const char* what) {
  Eigen::LLT<CMat> llt(m);
  if (llt.info() == Eigen::Success) return llt;
  const double jitter = 1e-12 * m.diagonal().real().maxCoeff();
  m.diagonal().array() += jitter;
  llt.compute(m);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error(std::string(what) + ": system singular after jitter");
  return llt;
}

inline double logdet_from_llt(const Eigen::LLT<CMat>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().real().array().log().sum();
}

}  // namespace detail

inline PosteriorStats posterior_stats(const CVec& y, const CMat& phi, double alpha,
                                      const RVec& gamma,
                                      PosteriorRoute route = PosteriorRoute::automatic) {
  detail::validate_posterior_inputs(y, phi, alpha, gamma);
  const auto t = static_cast<std::uint64_t>(phi.rows());
  const auto l = static_cast<std::uint64_t>(phi.cols());
  const bool use_woodbury = route == PosteriorRoute::woodbury ||
                            (route == PosteriorRoute::automatic && phi.rows() < phi.cols());
  PosteriorStats st;
  st.woodbury = use_woodbury;

  if (!use_woodbury) {
    opcount::add(l, l, t);
    CMat p = alpha * (phi.adjoint() * phi);
    p.diagonal() += gamma.cast<cplx>();
    p = ((p + p.adjoint()) * 0.5).eval();
    const auto llt = detail::chol_with_jitter(std::move(p), "posterior");
    opcount::add_factorization(l);
    opcount::add_solve(l, l);
    st.sigma = llt.solve(CMat::Identity(phi.cols(), phi.cols()));
    st.sigma = ((st.sigma + st.sigma.adjoint()) * 0.5).eval();
    opcount::add(l, 1, t);
    const CVec phih_y = phi.adjoint() * y;
    opcount::add(l, 1, l);
    st.mu = alpha * (st.sigma * phih_y);
    st.sigma_diag = st.sigma.diagonal().real();
    opcount::add(t, l, l);
    st.phi_sigma.noalias() = phi * st.sigma;
    // ln det C via det(C) = alpha^-T det(P) / det(diag(gamma))
    st.logdet_cov = -static_cast<double>(t) * std::log(alpha) + detail::logdet_from_llt(llt) -
                    gamma.array().log().sum();
    opcount::add_solve(l, 1);
    const CVec pinv_z = llt.solve(phih_y);
    st.quad = alpha * y.squaredNorm() - alpha * alpha * phih_y.dot(pinv_z).real();
  } else {
    st.inv_d = gamma.cwiseInverse();
    st.w = st.inv_d.asDiagonal() * phi.adjoint();
    opcount::add(t, t, l);
    CMat g;
    g.noalias() = phi * st.w;
    g = ((g + g.adjoint()) * 0.5).eval();
    CMat s = g;
    s.diagonal().array() += 1.0 / alpha;
    const auto llt = detail::chol_with_jitter(std::move(s), "posterior");
    opcount::add_factorization(t);
    opcount::add_solve(t, t);
    CMat k = llt.solve(CMat::Identity(phi.rows(), phi.rows()));
    k = ((k + k.adjoint()) * 0.5).eval();
    opcount::add(t, t, t);
    CMat gk;
    gk.noalias() = g * k;
    opcount::add(t, l, t);
    st.phi_sigma = st.w.adjoint();
    st.phi_sigma.noalias() -= gk * st.w.adjoint();
    opcount::add(l, 1, t);
    st.mu = alpha * (st.phi_sigma.adjoint() * y);
    opcount::add(l, t, t);
    st.wk.noalias() = st.w * k;
    st.sigma_diag =
        st.inv_d - st.wk.cwiseProduct(st.w.conjugate()).rowwise().sum().real();
    // C = alpha^-1 I + Phi diag(gamma)^-1 Phi^H is exactly the factored S
    st.logdet_cov = detail::logdet_from_llt(llt);
    opcount::add_solve(t, 1);
    st.quad = y.dot(llt.solve(y)).real();
  }

  st.tr_phi_sigma_phiH = st.phi_sigma.cwiseProduct(phi.conjugate()).sum().real();
  opcount::add(t, 1, l);
  st.resid = y - phi * st.mu;
  st.resid_sq = st.resid.squaredNorm();
  return st;
}

// Contract form: dense route, full covariance.
inline Posterior compute_posterior(const CVec& y, const CMat& phi, double alpha,
                                   const RVec& gamma) {
  auto st = posterior_stats(y, phi, alpha, gamma, PosteriorRoute::direct);
  return {std::move(st.mu), std::move(st.sigma)};
}

// alpha' = (T + a) / (b + eta), eta = tr(Phi Sigma Phi^H) + ||y - Phi mu||^2.
inline double update_alpha(const PosteriorStats& st, int t, const Hyperpriors& pr) {
  double eta = st.tr_phi_sigma_phiH + st.resid_sq;
  if (eta < -1e-12) throw std::runtime_error("update_alpha: negative posterior energy");
  eta = std::max(eta, 0.0);
  return (t + pr.a) / (pr.b + eta);
}

// gamma'_l = (a + 1) / (b + Sigma_ll + |mu_l|^2), capped at `ceiling`.
// Components at the ceiling are pruned but keep their slot (shapes stay
// static across iterations).
inline RVec update_gamma(const PosteriorStats& st, const Hyperpriors& pr, double ceiling = 1e12) {
  const Eigen::Index count = st.mu.size();
  RVec out(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    double xi = st.sigma_diag[i] + std::norm(st.mu[i]);
    if (xi < -1e-10) throw std::runtime_error("update_gamma: negative posterior second moment");
    xi = std::max(xi, 0.0);
    out[i] = std::min((pr.a + 1.0) / (pr.b + xi), ceiling);
  }
  return out;
}

// ln CN(y; 0, alpha^-1 I + Phi diag(prior_prec)^-1 Phi^H), the Gaussian part
// of the evidence.
inline double log_gaussian_marginal(const CVec& y, const CMat& phi, double alpha,
                                    const RVec& prior_prec) {
  detail::validate_posterior_inputs(y, phi, alpha, prior_prec);
  const auto t = static_cast<std::uint64_t>(phi.rows());
  const auto l = static_cast<std::uint64_t>(phi.cols());
  opcount::add(t, t, l);
  CMat c = phi * prior_prec.cwiseInverse().asDiagonal() * phi.adjoint();
  c = ((c + c.adjoint()) * 0.5).eval();
  c.diagonal().array() += 1.0 / alpha;
  Eigen::LLT<CMat> llt(c);
  if (llt.info() != Eigen::Success) {
    c.diagonal().array() += 1e-12 * c.diagonal().real().maxCoeff();
    llt.compute(c);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("log_gaussian_marginal: indefinite covariance");
  }
  opcount::add_factorization(t);
  opcount::add_solve(t, 1);
  return -static_cast<double>(y.size()) * std::log(pi) - detail::logdet_from_llt(llt) -
         y.dot(llt.solve(y)).real();
}

// Monotone objective of the evidence-maximization loop:
// ln p(y | alpha, gamma, beta) + ln p(alpha) + sum_l ln p(gamma_l).
inline double log_evidence(const CVec& y, const CMat& phi, double alpha, const RVec& gamma,
                           const Hyperpriors& pr) {
  double ev = log_gaussian_marginal(y, phi, alpha, gamma) + log_gamma_prior(alpha, pr);
  for (Eigen::Index i = 0; i < gamma.size(); ++i) ev += log_gamma_prior(gamma[i], pr);
  return ev;
}

// Same quantity assembled from posterior byproducts (identical up to
// factorization rounding; the estimation loops use this form).
inline double log_evidence_from_stats(const PosteriorStats& st, int t, double alpha,
                                      const RVec& gamma, const Hyperpriors& pr) {
  double ev = -static_cast<double>(t) * std::log(pi) - st.logdet_cov - st.quad +
              log_gamma_prior(alpha, pr);
  for (Eigen::Index i = 0; i < gamma.size(); ++i) ev += log_gamma_prior(gamma[i], pr);
  return ev;
}

// Snapshot of the estimation loop.
struct SblState {
  double alpha = 1.0;
  RVec gamma;
  RVec beta;
  RVec phi_hat;  // empty unless the planar model is active
  CVec mu;
  CMat sigma;
  int iteration = 0;
};

struct SupportEstimate {
  CVec h;
  std::vector<int> support;
};

// Indices with power >= threshold * max power, capped at `cap` strongest.
inline std::vector<int> select_support(const RVec& power, double threshold, int cap) {
  const double pmax = power.size() ? power.maxCoeff() : 0.0;
  if (!(pmax > 0.0)) throw std::runtime_error("extract_channel: no active components");
  std::vector<int> idx;
  for (Eigen::Index i = 0; i < power.size(); ++i)
    if (power[i] >= threshold * pmax) idx.push_back(static_cast<int>(i));
  if (idx.empty()) throw std::runtime_error("extract_channel: no active components");
  if (static_cast<int>(idx.size()) > cap) {
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return power[a] > power[b]; });
    idx.resize(static_cast<size_t>(cap));
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

// h = A_Omega (X A_Omega)^+ y for a chosen support.
inline CVec ls_refit(const OffGridDictionary& dict, const CMat& x, const CVec& y, const RVec& beta,
                     const RVec& phi_hat, const std::vector<int>& support) {
  CMat a_sub(dict.geom.size(), static_cast<Eigen::Index>(support.size()));
  for (size_t c = 0; c < support.size(); ++c) {
    const int l = support[c];
    a_sub.col(static_cast<Eigen::Index>(c)) =
        dict.column(l, beta[l], phi_hat.size() ? phi_hat[l] : 0.0);
  }
  const CMat phi_sub = x * a_sub;
  Eigen::CompleteOrthogonalDecomposition<CMat> cod(phi_sub);
  return a_sub * cod.solve(y);
}

// Support thresholding on |mu|^2 (relative to the strongest component,
// capped at T for LS solvability) followed by an LS refit of the kept
// columns.
inline SupportEstimate extract_channel(const OffGridDictionary& dict, const CMat& x, const CVec& y,
                                       const SblState& state, double support_threshold = 1e-2) {
  const RVec power = state.mu.cwiseAbs2();
  auto support = select_support(power, support_threshold, static_cast<int>(y.size()));
  CVec h = ls_refit(dict, x, y, state.beta, state.phi_hat, support);
  return {std::move(h), std::move(support)};
}

}  // namespace offgrid

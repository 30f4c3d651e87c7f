#pragma once

#include "array_model.hpp"
#include "rng.hpp"
#include "types.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

namespace offgrid {

// Clustered geometric channel: n_clusters cluster centers drawn uniformly in
// the azimuth range, n_subpaths rays per cluster spread uniformly within
// +-angular_spread/2 of the center, i.i.d. complex Gaussian gains. With
// two_dim set, each cluster also draws an elevation center and spreads
// sub-path elevations the same way (clamped to [-pi/2, pi/2]).
struct ClusterChannelConfig {
  int n_clusters = 1;
  int n_subpaths = 1;
  double azimuth_lo = -pi / 2;
  double azimuth_hi = pi / 2;
  double angular_spread = 0.0;
  double elevation_lo = 0.0;
  double elevation_hi = 0.0;
  bool two_dim = false;
  double gain_variance = 0.0;  // <= 0 selects 1/L so E||h||^2 = N

  void validate() const {
    if (n_clusters < 1 || n_subpaths < 1)
      throw std::invalid_argument("channel config: cluster and sub-path counts must be >= 1");
    if (!(angular_spread >= 0.0))
      throw std::invalid_argument("channel config: angular spread must be nonnegative");
    if (azimuth_hi < azimuth_lo || elevation_hi < elevation_lo)
      throw std::invalid_argument("channel config: angle ranges must be well ordered");
  }
};

struct PathComponent {
  cplx xi;      // complex gain
  double theta; // azimuth, radians
  double phi;   // elevation, radians (0 in the linear model)
};

struct ChannelRealization {
  std::vector<PathComponent> paths;
  CVec h;  // sum over paths of xi * a(theta, phi)
};

namespace detail {

inline CVec assemble_channel(const std::vector<PathComponent>& paths, const ArrayGeometry& geom,
                             const Wavelength& wl) {
  CVec h = CVec::Zero(geom.size());
  for (const auto& p : paths) h += p.xi * steering_2d(geom, p.theta, p.phi, wl);
  return h;
}

}  // namespace detail

inline ChannelRealization generate_channel(const ClusterChannelConfig& cfg, const ArrayGeometry& geom,
                                           const Wavelength& wl, std::uint64_t seed) {
  cfg.validate();
  geom.validate();
  Rng rng(seed);
  const int total = cfg.n_clusters * cfg.n_subpaths;
  const double gv = cfg.gain_variance > 0.0 ? cfg.gain_variance : 1.0 / total;
  ChannelRealization out;
  out.paths.reserve(static_cast<size_t>(total));
  for (int c = 0; c < cfg.n_clusters; ++c) {
    const double center = rng.uniform(cfg.azimuth_lo, cfg.azimuth_hi);
    const double el_center = cfg.two_dim ? rng.uniform(cfg.elevation_lo, cfg.elevation_hi) : 0.0;
    for (int s = 0; s < cfg.n_subpaths; ++s) {
      PathComponent p;
      p.theta = center + rng.uniform(-cfg.angular_spread / 2, cfg.angular_spread / 2);
      p.phi = cfg.two_dim
                  ? std::clamp(el_center + rng.uniform(-cfg.angular_spread / 2, cfg.angular_spread / 2),
                               -pi / 2, pi / 2)
                  : 0.0;
      p.xi = rng.cgaussian(gv);
      out.paths.push_back(p);
    }
  }
  out.h = detail::assemble_channel(out.paths, geom, wl);
  return out;
}

// Companion realization sharing the path angles of `base` but with fresh
// gains, evaluated at another carrier. angle_perturb (radians) optionally
// jitters each angle uniformly in +-angle_perturb to stress the shared-angle
// assumption.
inline ChannelRealization reciprocal_channel(const ChannelRealization& base,
                                             const ArrayGeometry& geom, const Wavelength& wl,
                                             std::uint64_t seed, double gain_variance = 0.0,
                                             double angle_perturb = 0.0) {
  Rng rng(seed);
  const double gv =
      gain_variance > 0.0 ? gain_variance : 1.0 / static_cast<double>(base.paths.size());
  ChannelRealization out;
  out.paths = base.paths;
  for (auto& p : out.paths) {
    p.xi = rng.cgaussian(gv);
    if (angle_perturb > 0.0) {
      p.theta += rng.uniform(-angle_perturb, angle_perturb);
      p.phi = std::clamp(p.phi + rng.uniform(-angle_perturb, angle_perturb), -pi / 2, pi / 2);
    }
  }
  out.h = detail::assemble_channel(out.paths, geom, wl);
  return out;
}

// T pilot symbols across N antennas, complex Gaussian entries rescaled so
// trace(X X^H) = P * T * N holds exactly.
struct PilotMatrix {
  CMat X;        // T x N
  double power;  // P
};

inline PilotMatrix generate_pilots(int t, int n, double power, std::uint64_t seed) {
  if (t < 1 || n < 1) throw std::invalid_argument("pilots: T and N must be >= 1");
  if (!(power > 0.0)) throw std::invalid_argument("pilots: power must be positive");
  Rng rng(seed);
  CMat x = rng.cgaussian_mat(t, n);
  const double cur = x.squaredNorm();
  x *= std::sqrt(power * t * n / cur);
  return {std::move(x), power};
}

// y = X h + n with i.i.d. CN(0, noise_var) entries.
inline CVec observe_downlink(const PilotMatrix& pilots, const CVec& h, double noise_var,
                             std::uint64_t seed) {
  if (pilots.X.cols() != h.size())
    throw std::invalid_argument("observe_downlink: pilot/channel dimension mismatch");
  if (noise_var < 0.0) throw std::invalid_argument("observe_downlink: negative noise variance");
  Rng rng(seed);
  return pilots.X * h + rng.cgaussian_vec(pilots.X.rows(), noise_var);
}

// Y_bar = H_bar S + N_bar observed at the base station; S is the K x T_bar
// user pilot matrix.
struct UplinkObservation {
  CMat Y_bar;       // N x T_bar
  CMat S;           // K x T_bar
  double noise_var; // per-entry variance of N_bar
};

inline UplinkObservation observe_uplink(const CMat& h_bar, const CMat& s, double noise_var,
                                        std::uint64_t seed) {
  if (h_bar.cols() != s.rows())
    throw std::invalid_argument("observe_uplink: channel/pilot dimension mismatch");
  if (s.cols() < s.rows())
    throw std::invalid_argument("observe_uplink: need T_bar >= K for LS solvability");
  if (noise_var < 0.0) throw std::invalid_argument("observe_uplink: negative noise variance");
  Rng rng(seed);
  return {h_bar * s + rng.cgaussian_mat(h_bar.rows(), s.cols(), noise_var), s, noise_var};
}

// LS estimate Y_bar S^+ of the uplink channel matrix. Requires S full row
// rank; with orthogonal pilots the residual error is i.i.d. Gaussian.
inline CMat ls_uplink_estimate(const UplinkObservation& obs) {
  const Eigen::Index k = obs.S.rows();
  Eigen::CompleteOrthogonalDecomposition<CMat> cod(obs.S);
  if (cod.rank() < k)
    throw std::runtime_error("ls_uplink_estimate: pilot matrix S has rank " +
                             std::to_string(cod.rank()) + " < K = " + std::to_string(k));
  return obs.Y_bar * cod.pseudoInverse();
}

inline double nmse(const CVec& h_est, const CVec& h_true) {
  const double ref = h_true.squaredNorm();
  if (ref == 0.0) throw std::invalid_argument("nmse: reference channel has zero norm");
  return (h_est - h_true).squaredNorm() / ref;
}

inline double nmse_mean(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("nmse_mean: empty list");
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc / static_cast<double>(values.size());
}

}  // namespace offgrid

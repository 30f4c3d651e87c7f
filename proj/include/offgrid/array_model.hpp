#pragma once

#include "types.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace offgrid {

// Carrier wavelength in meters.
struct Wavelength {
  double lambda;

  explicit Wavelength(double meters) : lambda(meters) {
    if (!(meters > 0.0)) throw std::invalid_argument("wavelength must be positive");
  }

  static Wavelength from_mhz(double f_mhz) {
    return Wavelength(299792458.0 / (f_mhz * 1e6));
  }
};

// Planar sensor layout in polar coordinates: sensor n sits at distance d[n]
// (meters) along direction phi[n] (radians) in the array plane. Sensor 1 is
// the phase reference and must sit at the origin.
struct ArrayGeometry {
  std::vector<double> d;
  std::vector<double> phi;

  int size() const { return static_cast<int>(d.size()); }

  void validate() const {
    if (d.size() != phi.size()) throw std::invalid_argument("geometry: d and phi length mismatch");
    if (size() < 2) throw std::invalid_argument("geometry: need at least 2 sensors");
    if (d[0] != 0.0) throw std::invalid_argument("geometry: first sensor must sit at the origin (d_1 = 0)");
    for (double dn : d)
      if (!(dn >= 0.0) || !std::isfinite(dn))
        throw std::invalid_argument("geometry: sensor distances must be finite and nonnegative");
    for (double p : phi)
      if (!std::isfinite(p)) throw std::invalid_argument("geometry: sensor angles must be finite");
  }

  // Collinear array along the phi = 0 axis, spacing in meters.
  static ArrayGeometry ula(int n, double spacing) {
    if (n < 2) throw std::invalid_argument("geometry: need at least 2 sensors");
    ArrayGeometry g;
    g.d.resize(static_cast<size_t>(n));
    g.phi.assign(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) g.d[static_cast<size_t>(i)] = i * spacing;
    g.validate();
    return g;
  }

  // nx x ny rectangular lattice in the array plane, element (0,0) at the
  // origin, column-fastest ordering.
  static ArrayGeometry planar_grid(int nx, int ny, double dx, double dy) {
    ArrayGeometry g;
    if (nx < 1 || ny < 1) throw std::invalid_argument("geometry: lattice dimensions must be positive");
    g.d.reserve(static_cast<size_t>(nx) * ny);
    g.phi.reserve(static_cast<size_t>(nx) * ny);
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        const double x = i * dx;
        const double y = j * dy;
        g.d.push_back(std::hypot(x, y));
        g.phi.push_back((x == 0.0 && y == 0.0) ? 0.0 : std::atan2(y, x));
      }
    g.validate();
    return g;
  }

  // Plain-text format: one sensor per line, "d_n phi_n" (meters, radians),
  // '#' starts a comment. Line 1 must read "0 0".
  static ArrayGeometry from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("geometry: cannot open '" + path + "'");
    ArrayGeometry g;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      double dn, pn;
      if (!(ls >> dn)) continue;  // blank or comment-only line
      if (!(ls >> pn))
        throw std::runtime_error("geometry: " + path + ":" + std::to_string(lineno) +
                                 ": expected 'd_n phi_n'");
      if (g.d.empty() && (dn != 0.0 || pn != 0.0))
        throw std::runtime_error("geometry: " + path + ":" + std::to_string(lineno) +
                                 ": first sensor line must be '0 0'");
      g.d.push_back(dn);
      g.phi.push_back(pn);
    }
    g.validate();
    return g;
  }
};

// a(theta, phi): entry n = exp(-j 2 pi (d_n / lambda) cos(phi) sin(theta - phi_n)).
// Unit modulus per entry, leading entry exactly 1.
inline CVec steering_2d(const ArrayGeometry& geom, double theta, double phi, const Wavelength& wl) {
  const int n = geom.size();
  const double k = 2.0 * pi / wl.lambda * std::cos(phi);
  CVec a(n);
  a[0] = cplx(1.0, 0.0);  // d_1 = 0 by construction
  for (int i = 1; i < n; ++i)
    a[i] = std::polar(1.0, -k * geom.d[static_cast<size_t>(i)] *
                               std::sin(theta - geom.phi[static_cast<size_t>(i)]));
  return a;
}

// Linear-array specialization: entry n = exp(-j 2 pi (d_n / lambda) sin(theta)).
// Ignores the in-plane sensor angles; equals steering_2d at phi = 0 on a
// collinear (phi_n = 0) geometry.
inline CVec steering_linear(const ArrayGeometry& geom, double theta, const Wavelength& wl) {
  const int n = geom.size();
  const double k = 2.0 * pi / wl.lambda * std::sin(theta);
  CVec a(n);
  a[0] = cplx(1.0, 0.0);
  for (int i = 1; i < n; ++i) a[i] = std::polar(1.0, -k * geom.d[static_cast<size_t>(i)]);
  return a;
}

// d a(theta, phi) / d theta, entry-wise: multiply by -j 2 pi (d_n/lambda) cos(phi) cos(theta - phi_n).
inline CVec steering_deriv_theta(const ArrayGeometry& geom, double theta, double phi,
                                 const Wavelength& wl) {
  const int n = geom.size();
  const double k = 2.0 * pi / wl.lambda * std::cos(phi);
  CVec da(n);
  da[0] = cplx(0.0, 0.0);
  for (int i = 1; i < n; ++i) {
    const double dn = geom.d[static_cast<size_t>(i)];
    const double rel = theta - geom.phi[static_cast<size_t>(i)];
    da[i] = std::polar(1.0, -k * dn * std::sin(rel)) * cplx(0.0, -k * dn * std::cos(rel));
  }
  return da;
}

// d a(theta, phi) / d phi, entry-wise: multiply by +j 2 pi (d_n/lambda) sin(phi) sin(theta - phi_n).
inline CVec steering_deriv_phi(const ArrayGeometry& geom, double theta, double phi,
                               const Wavelength& wl) {
  const int n = geom.size();
  const double kc = 2.0 * pi / wl.lambda * std::cos(phi);
  const double ks = 2.0 * pi / wl.lambda * std::sin(phi);
  CVec da(n);
  da[0] = cplx(0.0, 0.0);
  for (int i = 1; i < n; ++i) {
    const double dn = geom.d[static_cast<size_t>(i)];
    const double s = std::sin(theta - geom.phi[static_cast<size_t>(i)]);
    da[i] = std::polar(1.0, -kc * dn * s) * cplx(0.0, ks * dn * s);
  }
  return da;
}

// d steering_linear / d theta: multiply by -j 2 pi (d_n/lambda) cos(theta).
inline CVec steering_deriv_linear(const ArrayGeometry& geom, double theta, const Wavelength& wl) {
  const int n = geom.size();
  const double k = 2.0 * pi / wl.lambda;
  CVec da(n);
  da[0] = cplx(0.0, 0.0);
  for (int i = 1; i < n; ++i) {
    const double dn = geom.d[static_cast<size_t>(i)];
    da[i] = std::polar(1.0, -k * dn * std::sin(theta)) * cplx(0.0, -k * dn * std::cos(theta));
  }
  return da;
}

// Unitary N x N basis with column n sampling the spatial frequency
// x_n = -1/2 + (n-1)/N: entry (k, n) = exp(-j 2 pi k x_n) / sqrt(N).
inline CMat dft_basis(int n) {
  if (n < 1) throw std::invalid_argument("dft_basis: N must be >= 1");
  CMat f(n, n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (int c = 0; c < n; ++c) {
    const double x = -0.5 + static_cast<double>(c) / n;
    for (int k = 0; k < n; ++k) f(k, c) = std::polar(scale, -2.0 * pi * k * x);
  }
  return f;
}

// |v_n(theta)| = |sin(pi rho N) / sin(pi rho)| / sqrt(N) with
// rho = (n-1)/N - 1/2 - (d/lambda) sin(theta): the energy a unit path at
// theta leaks into DFT bin n of a half-wavelength-style ULA. The argument is
// reduced to frac = rho - round(rho) before evaluating, which keeps the ratio
// accurate near the removable singularity; |frac| < 1e-12 returns the limit
// sqrt(N).
inline double leakage_coefficient(int n, double theta, int count, double d_over_lambda) {
  if (count < 1) throw std::invalid_argument("leakage_coefficient: N must be >= 1");
  if (n < 1 || n > count) throw std::out_of_range("leakage_coefficient: bin index out of [1, N]");
  const double rho = (n - 1) / static_cast<double>(count) - 0.5 - d_over_lambda * std::sin(theta);
  const double frac = rho - std::round(rho);
  const double root = std::sqrt(static_cast<double>(count));
  if (std::abs(frac) < 1e-12) return root;
  return std::abs(std::sin(pi * count * frac) / std::sin(pi * frac)) / root;
}

}  // namespace offgrid

#pragma once

#include <Eigen/Dense>

#include <complex>
#include <cstdint>

namespace offgrid {

using cplx = std::complex<double>;
using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;
using RVec = Eigen::VectorXd;
using RMat = Eigen::MatrixXd;

inline constexpr double pi = 3.141592653589793238462643383279502884;

inline double deg2rad(double deg) { return deg * (pi / 180.0); }
inline double rad2deg(double rad) { return rad * (180.0 / pi); }

// sign with sign(0) = 0, so converged coordinates stop moving under
// fixed-step refinement.
inline double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// Cost accounting for the complexity assertions. Every dense matrix product,
// factorization or inversion on the estimation path reports its m*n*k
// multiply-accumulate count here. Thread-local so concurrent trials do not
// race.
namespace opcount {

inline thread_local std::uint64_t mac_count = 0;

inline void add(std::uint64_t m, std::uint64_t n, std::uint64_t k) { mac_count += m * n * k; }
// Cholesky factorization of an n x n matrix.
inline void add_factorization(std::uint64_t n) { mac_count += n * n * n / 3; }
// Triangular solve with an n x n factor against k right-hand sides.
inline void add_solve(std::uint64_t n, std::uint64_t k) { mac_count += n * n * k; }
inline void reset() { mac_count = 0; }
inline std::uint64_t value() { return mac_count; }

}  // namespace opcount

}  // namespace offgrid

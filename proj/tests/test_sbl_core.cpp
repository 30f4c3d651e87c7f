#include <catch2/catch_amalgamated.hpp>

#include <offgrid/rng.hpp>
#include <offgrid/sbl_core.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace offgrid;
using Catch::Approx;

namespace {

ArrayGeometry test_ula(int n = 16) {
  return ArrayGeometry::ula(n, Wavelength::from_mhz(2000.0).lambda / 2.0);
}

struct Instance {
  CVec y;
  CMat phi;
  double alpha;
  RVec gamma;
};

Instance random_instance(Rng& rng, int t, int l) {
  Instance ins;
  ins.phi = rng.cgaussian_mat(t, l);
  CVec w = rng.cgaussian_vec(l);
  ins.y = ins.phi * w + rng.cgaussian_vec(t, 0.1);
  ins.alpha = 0.5 + 3.0 * rng.uniform();
  ins.gamma = RVec::NullaryExpr(l, [&](Eigen::Index) { return 0.5 + 2.0 * rng.uniform(); });
  return ins;
}

// Independent dense references, assembled with plain Eigen inverses.
CMat dense_sigma(const Instance& ins) {
  CMat p = ins.alpha * (ins.phi.adjoint() * ins.phi);
  p += CMat(ins.gamma.cast<cplx>().asDiagonal());
  return p.inverse();
}

CVec dense_mu(const Instance& ins) {
  return ins.alpha * (dense_sigma(ins) * (ins.phi.adjoint() * ins.y));
}

CMat dense_cov(const Instance& ins) {
  CMat c = ins.phi * ins.gamma.cwiseInverse().asDiagonal() * ins.phi.adjoint();
  c.diagonal().array() += 1.0 / ins.alpha;
  return ((c + c.adjoint()) * 0.5).eval();
}

double dense_logdet(const CMat& c) {
  Eigen::SelfAdjointEigenSolver<CMat> es(c);
  return es.eigenvalues().array().log().sum();
}

double log_gamma_prior_oracle(double x, const Hyperpriors& pr) {
  return (1.0 + pr.a) * std::log(pr.b) - std::lgamma(1.0 + pr.a) + pr.a * std::log(x) -
         pr.b * x;
}

double rel_err(const CMat& got, const CMat& want) {
  return (got - want).norm() / (1.0 + want.norm());
}

}  // namespace

TEST_CASE("uniform linear dictionary places cell centers") {
  const auto geom = test_ula();
  const auto wl = Wavelength::from_mhz(2170.0);
  const auto d = OffGridDictionary::uniform_linear(geom, wl, 8);
  REQUIRE(d.size() == 8);
  CHECK(d.model == SteeringModel::linear);
  CHECK(d.r_theta == Approx(pi / 8));
  CHECK(d.grid[0] == Approx(-pi / 2 + 0.5 * pi / 8));
  CHECK(d.grid[7] == Approx(pi / 2 - 0.5 * pi / 8));
  for (int l = 1; l < 8; ++l) CHECK(d.grid[l] - d.grid[l - 1] == Approx(pi / 8));
  CHECK(d.phi_fixed.size() == 8);
  CHECK(d.phi_fixed.norm() == 0.0);

  const auto narrow = OffGridDictionary::uniform_linear(geom, wl, 5, -0.4, 0.6);
  CHECK(narrow.r_theta == Approx(0.2));
  CHECK(narrow.grid[0] == Approx(-0.3));
  CHECK(narrow.grid[4] == Approx(0.5));

  CHECK_THROWS_AS(OffGridDictionary::uniform_linear(geom, wl, 0), std::invalid_argument);
  CHECK_THROWS_AS(OffGridDictionary::uniform_linear(geom, wl, 4, 0.5, 0.5), std::invalid_argument);
}

TEST_CASE("azimuth dictionary uses the planar model over the full circle") {
  const auto geom = ArrayGeometry::planar_grid(4, 3, 0.07, 0.07);
  const auto wl = Wavelength::from_mhz(2170.0);
  const auto d = OffGridDictionary::uniform_azimuth(geom, wl, 12);
  CHECK(d.model == SteeringModel::planar);
  CHECK(d.r_theta == Approx(2 * pi / 12));
  CHECK(d.grid[0] == Approx(-pi + 0.5 * 2 * pi / 12));
  CHECK(d.grid[11] == Approx(pi - 0.5 * 2 * pi / 12));
}

TEST_CASE("explicit grid dictionary") {
  const auto geom = test_ula();
  const auto wl = Wavelength::from_mhz(2170.0);
  RVec pts(3);
  pts << 0.0, 0.1, 0.3;
  const auto d = OffGridDictionary::explicit_grid(geom, wl, pts);
  CHECK(d.size() == 3);
  CHECK(d.r_theta == Approx(0.15));

  RVec one(1);
  one << 0.2;
  CHECK(OffGridDictionary::explicit_grid(geom, wl, one).r_theta == 0.0);

  RVec bad(3);
  bad << 0.0, 0.2, 0.2;
  CHECK_THROWS_AS(OffGridDictionary::explicit_grid(geom, wl, bad), std::invalid_argument);
  CHECK_THROWS_AS(OffGridDictionary::explicit_grid(geom, wl, RVec()), std::invalid_argument);
  RVec phis(2);
  phis << 0.1, 0.2;
  CHECK_THROWS_AS(OffGridDictionary::explicit_grid(geom, wl, pts, SteeringModel::planar, phis),
                  std::invalid_argument);
}

TEST_CASE("dictionary columns are steering vectors at shifted angles") {
  const auto geom = test_ula();
  const auto wl = Wavelength::from_mhz(2170.0);
  const auto d = OffGridDictionary::uniform_linear(geom, wl, 6);
  const double beta = 0.01;
  for (int l = 0; l < 6; ++l) {
    CHECK((d.column(l, beta, 0.0) - steering_linear(geom, d.grid[l] + beta, wl)).norm() == 0.0);
    CHECK((d.column_deriv_theta(l, beta, 0.0) - steering_deriv_linear(geom, d.grid[l] + beta, wl))
              .norm() == 0.0);
  }
  RVec betas = RVec::Constant(6, beta);
  const CMat a = d.steering(betas);
  for (int l = 0; l < 6; ++l) CHECK((a.col(l) - d.column(l, beta, 0.0)).norm() == 0.0);

  const auto pg = ArrayGeometry::planar_grid(3, 3, 0.07, 0.07);
  const auto dp = OffGridDictionary::uniform_azimuth(pg, wl, 5);
  CHECK((dp.column(2, 0.02, 0.3) - steering_2d(pg, dp.grid[2] + 0.02, 0.3, wl)).norm() == 0.0);

  CHECK_THROWS_AS(d.deriv_phi(betas, RVec::Zero(6)), std::logic_error);
  CHECK_THROWS_AS(d.steering(RVec::Zero(5)), std::invalid_argument);
}

TEST_CASE("posterior with a zero dictionary is the prior") {
  Rng rng(12);
  const int t = 6, l = 9;
  const CVec y = rng.cgaussian_vec(t);
  const CMat phi = CMat::Zero(t, l);
  RVec gamma(l);
  for (int i = 0; i < l; ++i) gamma[i] = 0.5 + i * 0.25;
  for (auto route : {PosteriorRoute::direct, PosteriorRoute::woodbury}) {
    const auto st = posterior_stats(y, phi, 2.0, gamma, route);
    CHECK(st.mu.norm() == 0.0);
    CHECK((st.sigma_diag - gamma.cwiseInverse()).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(st.tr_phi_sigma_phiH == 0.0);
    CHECK((st.resid - y).norm() == 0.0);
    CHECK(st.resid_sq == Approx(y.squaredNorm()));
    const CMat sig = st.full_sigma();
    CHECK(rel_err(sig, CMat(gamma.cwiseInverse().cast<cplx>().asDiagonal())) < 1e-14);
  }
}

TEST_CASE("posterior matches the dense normal-equations reference on both routes") {
  Rng rng(34);
  for (int rep = 0; rep < 20; ++rep) {
    const bool wide = rep % 2 == 0;
    const auto ins = random_instance(rng, wide ? 8 : 12, wide ? 12 : 8);
    const CMat sig_ref = dense_sigma(ins);
    const CVec mu_ref = dense_mu(ins);
    const CMat cov = dense_cov(ins);

    for (auto route : {PosteriorRoute::direct, PosteriorRoute::woodbury}) {
      const auto st = posterior_stats(ins.y, ins.phi, ins.alpha, ins.gamma, route);
      CHECK(st.woodbury == (route == PosteriorRoute::woodbury));
      CHECK((st.mu - mu_ref).norm() / (1.0 + mu_ref.norm()) < 1e-9);
      CHECK(rel_err(st.full_sigma(), sig_ref) < 1e-9);
      CHECK((st.sigma_diag - sig_ref.diagonal().real()).cwiseAbs().maxCoeff() < 1e-9);
      CHECK(rel_err(st.phi_sigma, ins.phi * sig_ref) < 1e-9);
      CHECK(st.tr_phi_sigma_phiH ==
            Approx((ins.phi * sig_ref * ins.phi.adjoint()).trace().real()).margin(1e-9));
      CHECK((st.resid - (ins.y - ins.phi * mu_ref)).norm() < 1e-9);
      CHECK(st.resid_sq == Approx((ins.y - ins.phi * mu_ref).squaredNorm()).margin(1e-9));
      CHECK(st.logdet_cov == Approx(dense_logdet(cov)).margin(1e-8));
      CHECK(st.quad == Approx(ins.y.dot(cov.inverse() * ins.y).real()).margin(1e-8));

      // covariance stays Hermitian positive semidefinite
      const CMat sig = st.full_sigma();
      CHECK((sig - sig.adjoint()).norm() < 1e-12);
      Eigen::SelfAdjointEigenSolver<CMat> es(sig);
      CHECK(es.eigenvalues().minCoeff() > -1e-10);
    }

    // automatic route selection: Woodbury exactly when T < L
    const auto st_auto = posterior_stats(ins.y, ins.phi, ins.alpha, ins.gamma);
    CHECK(st_auto.woodbury == (ins.phi.rows() < ins.phi.cols()));
  }
}

TEST_CASE("huge noise precision recovers the least-squares solution") {
  Rng rng(56);
  const int t = 12, l = 8;
  const CMat phi = rng.cgaussian_mat(t, l);
  const CVec y = rng.cgaussian_vec(t);
  const auto st = posterior_stats(y, phi, 1e12, RVec::Ones(l));
  const CVec ls = phi.completeOrthogonalDecomposition().solve(y);
  CHECK((st.mu - ls).norm() / ls.norm() < 1e-4);
}

TEST_CASE("compute_posterior returns the dense-route posterior") {
  Rng rng(78);
  const auto ins = random_instance(rng, 10, 7);
  const auto p = compute_posterior(ins.y, ins.phi, ins.alpha, ins.gamma);
  const auto st = posterior_stats(ins.y, ins.phi, ins.alpha, ins.gamma, PosteriorRoute::direct);
  CHECK((p.mu - st.mu).norm() == 0.0);
  CHECK((p.sigma - st.sigma).norm() == 0.0);
}

TEST_CASE("posterior input validation") {
  Rng rng(90);
  const CMat phi = rng.cgaussian_mat(4, 3);
  const CVec y = rng.cgaussian_vec(4);
  const RVec gamma = RVec::Ones(3);
  CHECK_THROWS_AS(posterior_stats(rng.cgaussian_vec(5), phi, 1.0, gamma), std::invalid_argument);
  CHECK_THROWS_AS(posterior_stats(y, phi, 1.0, RVec::Ones(4)), std::invalid_argument);
  CHECK_THROWS_AS(posterior_stats(y, phi, 0.0, gamma), std::invalid_argument);
  CHECK_THROWS_AS(posterior_stats(y, phi, -1.0, gamma), std::invalid_argument);
  CHECK_THROWS_AS(posterior_stats(y, phi, std::nan(""), gamma), std::invalid_argument);
  RVec bad_gamma = gamma;
  bad_gamma[1] = 0.0;
  CHECK_THROWS_AS(posterior_stats(y, phi, 1.0, bad_gamma), std::invalid_argument);
  CVec bad_y = y;
  bad_y[0] = cplx(std::nan(""), 0.0);
  CHECK_THROWS_AS(posterior_stats(bad_y, phi, 1.0, gamma), std::invalid_argument);
}

TEST_CASE("noise precision update") {
  Rng rng(101);
  const Hyperpriors pr;

  SECTION("closed form against the stats it consumes") {
    const auto ins = random_instance(rng, 8, 5);
    const auto st = posterior_stats(ins.y, ins.phi, ins.alpha, ins.gamma);
    const double eta = st.tr_phi_sigma_phiH + st.resid_sq;
    CHECK(update_alpha(st, 8, pr) == Approx((8 + pr.a) / (pr.b + eta)));
  }

  SECTION("negative posterior energy is rejected") {
    PosteriorStats st;
    st.resid_sq = -1.0;
    st.tr_phi_sigma_phiH = 0.0;
    CHECK_THROWS_AS(update_alpha(st, 4, pr), std::runtime_error);
  }

  SECTION("the update is the maximizer of its frozen-posterior objective") {
    const auto ins = random_instance(rng, 9, 6);
    const auto st = posterior_stats(ins.y, ins.phi, ins.alpha, ins.gamma);
    const double eta = st.tr_phi_sigma_phiH + st.resid_sq;
    const auto s = [&](double a) { return (9 + pr.a) * std::log(a) - a * (pr.b + eta); };
    const double a_star = update_alpha(st, 9, pr);
    CHECK(s(a_star) > s(a_star * 1.01));
    CHECK(s(a_star) > s(a_star * 0.99));
  }

  SECTION("log evidence never decreases across the update") {
    for (int rep = 0; rep < 50; ++rep) {
      const auto ins = random_instance(rng, rep % 2 ? 6 : 9, rep % 2 ? 9 : 6);
      const auto st = posterior_stats(ins.y, ins.phi, ins.alpha, ins.gamma);
      const double a_new = update_alpha(st, static_cast<int>(ins.y.size()), pr);
      const double before = log_evidence(ins.y, ins.phi, ins.alpha, ins.gamma, pr);
      const double after = log_evidence(ins.y, ins.phi, a_new, ins.gamma, pr);
      CHECK(after >= before - 1e-9 * (1.0 + std::abs(before)));
    }
  }
}

TEST_CASE("component precision update") {
  Rng rng(112);
  const Hyperpriors pr;

  SECTION("closed form against the stats it consumes") {
    const auto ins = random_instance(rng, 8, 5);
    const auto st = posterior_stats(ins.y, ins.phi, ins.alpha, ins.gamma);
    const RVec g = update_gamma(st, pr);
    for (int i = 0; i < 5; ++i) {
      const double xi = st.sigma_diag[i] + std::norm(st.mu[i]);
      CHECK(g[i] == Approx((pr.a + 1.0) / (pr.b + xi)));
    }
  }

  SECTION("vanishing second moment lands on the prior mode, subject to the ceiling") {
    PosteriorStats st;
    st.mu = CVec::Zero(2);
    st.sigma_diag = RVec::Zero(2);
    const RVec g = update_gamma(st, pr);
    CHECK(g[0] == Approx((pr.a + 1.0) / pr.b));  // ~1e4, below the default ceiling
    Hyperpriors tight;
    tight.a = 1e-4;
    tight.b = 1e-16;
    CHECK(update_gamma(st, tight)[0] == 1e12);
    CHECK(update_gamma(st, tight, 1e6)[0] == 1e6);
  }

  SECTION("negative second moment is rejected") {
    PosteriorStats st;
    st.mu = CVec::Zero(1);
    st.sigma_diag = RVec::Constant(1, -1.0);
    CHECK_THROWS_AS(update_gamma(st, pr), std::runtime_error);
  }

  SECTION("update commutes with a column permutation") {
    const auto ins = random_instance(rng, 7, 6);
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937 shuffler(44);
    std::shuffle(perm.begin(), perm.end(), shuffler);
    CMat phi_p(7, 6);
    RVec gamma_p(6);
    for (int i = 0; i < 6; ++i) {
      phi_p.col(i) = ins.phi.col(perm[i]);
      gamma_p[i] = ins.gamma[perm[i]];
    }
    const RVec g = update_gamma(posterior_stats(ins.y, ins.phi, ins.alpha, ins.gamma), pr);
    const RVec g_p = update_gamma(posterior_stats(ins.y, phi_p, ins.alpha, gamma_p), pr);
    for (int i = 0; i < 6; ++i) CHECK(g_p[i] == Approx(g[perm[i]]).epsilon(1e-10));
  }

  SECTION("log evidence never decreases across the update") {
    for (int rep = 0; rep < 50; ++rep) {
      const auto ins = random_instance(rng, rep % 2 ? 6 : 9, rep % 2 ? 9 : 6);
      const auto st = posterior_stats(ins.y, ins.phi, ins.alpha, ins.gamma);
      const RVec g_new = update_gamma(st, pr);
      const double before = log_evidence(ins.y, ins.phi, ins.alpha, ins.gamma, pr);
      const double after = log_evidence(ins.y, ins.phi, ins.alpha, g_new, pr);
      CHECK(after >= before - 1e-9 * (1.0 + std::abs(before)));
    }
  }
}

TEST_CASE("log evidence") {
  Rng rng(123);
  const Hyperpriors pr;

  SECTION("gamma prior density formula") {
    for (double x : {0.3, 1.0, 7.5}) CHECK(log_gamma_prior(x, pr) == Approx(log_gamma_prior_oracle(x, pr)));
  }

  SECTION("zero dictionary closed form") {
    const int t = 5, l = 4;
    const CVec y = rng.cgaussian_vec(t);
    const CMat phi = CMat::Zero(t, l);
    RVec gamma(l);
    for (int i = 0; i < l; ++i) gamma[i] = 0.7 + 0.2 * i;
    const double alpha = 1.7;
    double expected = -t * std::log(pi) + t * std::log(alpha) - alpha * y.squaredNorm() +
                      log_gamma_prior_oracle(alpha, pr);
    for (int i = 0; i < l; ++i) expected += log_gamma_prior_oracle(gamma[i], pr);
    CHECK(log_evidence(y, phi, alpha, gamma, pr) == Approx(expected).epsilon(1e-10));
  }

  SECTION("invariant under a column permutation") {
    const auto ins = random_instance(rng, 6, 8);
    CMat phi_p(6, 8);
    RVec gamma_p(8);
    for (int i = 0; i < 8; ++i) {
      phi_p.col(i) = ins.phi.col((i + 3) % 8);
      gamma_p[i] = ins.gamma[(i + 3) % 8];
    }
    const double a = log_evidence(ins.y, ins.phi, ins.alpha, ins.gamma, pr);
    const double b = log_evidence(ins.y, phi_p, ins.alpha, gamma_p, pr);
    CHECK(a == Approx(b).epsilon(1e-10));
  }

  SECTION("matches a dense eigendecomposition reference") {
    for (int rep = 0; rep < 10; ++rep) {
      const auto ins = random_instance(rng, 6, 8);
      const CMat cov = dense_cov(ins);
      double expected = -6 * std::log(pi) - dense_logdet(cov) -
                        ins.y.dot(cov.inverse() * ins.y).real() +
                        log_gamma_prior_oracle(ins.alpha, pr);
      for (int i = 0; i < 8; ++i) expected += log_gamma_prior_oracle(ins.gamma[i], pr);
      CHECK(log_evidence(ins.y, ins.phi, ins.alpha, ins.gamma, pr) ==
            Approx(expected).margin(1e-8 * (1.0 + std::abs(expected))));
    }
  }

  SECTION("stats form agrees with the direct form on both routes") {
    for (int rep = 0; rep < 10; ++rep) {
      const auto ins = random_instance(rng, rep % 2 ? 6 : 9, rep % 2 ? 9 : 6);
      const double direct = log_evidence(ins.y, ins.phi, ins.alpha, ins.gamma, pr);
      for (auto route : {PosteriorRoute::direct, PosteriorRoute::woodbury}) {
        const auto st = posterior_stats(ins.y, ins.phi, ins.alpha, ins.gamma, route);
        const double from_stats =
            log_evidence_from_stats(st, static_cast<int>(ins.y.size()), ins.alpha, ins.gamma, pr);
        CHECK(from_stats == Approx(direct).margin(1e-8 * (1.0 + std::abs(direct))));
      }
    }
  }
}

TEST_CASE("support selection") {
  RVec power(4);
  power << 0.001, 5.0, 0.002, 0.04;

  SECTION("relative threshold keeps components near the strongest") {
    const auto sup = select_support(power, 1e-2, 10);
    REQUIRE(sup.size() == 1);
    CHECK(sup[0] == 1);
    const auto loose = select_support(power, 1e-3, 10);
    CHECK(loose == std::vector<int>{1, 3});
  }

  SECTION("cap keeps the strongest and reports ascending indices") {
    const auto sup = select_support(power, 0.0, 3);
    CHECK(sup == std::vector<int>{1, 2, 3});
    const auto all = select_support(power, 0.0, 10);
    CHECK(all == std::vector<int>{0, 1, 2, 3});
  }

  SECTION("all-zero power is an error") {
    CHECK_THROWS_WITH(select_support(RVec::Zero(3), 1e-2, 10),
                      Catch::Matchers::ContainsSubstring("no active components"));
  }
}

TEST_CASE("least-squares refit and channel extraction") {
  const auto geom = test_ula();
  const auto wl = Wavelength::from_mhz(2170.0);
  const auto dict = OffGridDictionary::uniform_linear(geom, wl, 10);
  Rng rng(134);
  const CMat x = rng.cgaussian_mat(12, geom.size());
  const CVec truth = 2.0 * dict.column(2, 0.0, 0.0) + cplx(0.0, 3.0) * dict.column(7, 0.0, 0.0);
  const CVec y = x * truth;

  SECTION("refit reproduces an exactly representable channel") {
    const CVec h = ls_refit(dict, x, y, RVec::Zero(10), RVec(), {2, 7});
    CHECK((h - truth).norm() / truth.norm() < 1e-10);
  }

  SECTION("extraction thresholds the posterior mean then refits") {
    SblState state;
    state.beta = RVec::Zero(10);
    state.mu = CVec::Zero(10);
    state.mu[2] = 1.0;
    state.mu[7] = 0.5;
    state.mu[4] = 1e-3;  // below the relative threshold, must be dropped
    const auto est = extract_channel(dict, x, y, state, 1e-2);
    CHECK(est.support == std::vector<int>{2, 7});
    CHECK((est.h - truth).norm() / truth.norm() < 1e-10);
  }

  SECTION("an all-zero posterior mean is an error") {
    SblState state;
    state.beta = RVec::Zero(10);
    state.mu = CVec::Zero(10);
    CHECK_THROWS_WITH(extract_channel(dict, x, y, state, 1e-2),
                      Catch::Matchers::ContainsSubstring("no active components"));
  }
}

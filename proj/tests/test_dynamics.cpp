#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "cislunar/dynamics.hpp"

using namespace cislunar;

namespace {
const SystemParams kParams{};  // mu = 0.01215

StateVector near_l1_state(std::mt19937_64& rng) {
    const double l1x = libration_point(LibrationIndex::L1, kParams).position[0];
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    StateVector s;
    s << l1x + u(rng), u(rng), u(rng), u(rng), u(rng), u(rng);
    return s;
}
}  // namespace

TEST_CASE("jacobi constant matches a frozen high-precision value") {
    StateVector s;
    s << 0.5, 0.1, 0.05, 0.02, -0.3, 0.01;
    // computed independently at 30-digit precision
    CHECK(jacobi_constant(s, kParams) == Catch::Approx(3.98695083426172361207).epsilon(1e-14));
}

TEST_CASE("jacobi constant is conserved along the flow") {
    StateVector s;
    s << 0.83, 0.0, 0.01, 0.0, 0.12, 0.0;
    const double c0 = jacobi_constant(s, kParams);
    const StateVector s1 = propagate(s, 2.0, 4000, kParams);
    CHECK(std::abs(jacobi_constant(s1, kParams) - c0) < 1e-10);
}

TEST_CASE("libration points match the bisection oracle values") {
    const double l1 = libration_point(LibrationIndex::L1, kParams).position[0];
    const double l2 = libration_point(LibrationIndex::L2, kParams).position[0];
    CHECK(l1 == Catch::Approx(0.836918007316930).margin(1e-12));
    CHECK(l2 == Catch::Approx(1.155679913094735).margin(1e-12));
    // the points are equilibria: zero acceleration at zero velocity
    for (double x : {l1, l2}) {
        StateVector s = StateVector::Zero();
        s[0] = x;
        CHECK(eom(s, kParams).tail<3>().norm() < 1e-12);
    }
}

TEST_CASE("eom jacobian matches central finite differences") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const StateVector s = near_l1_state(rng);
        const Mat6 A = eom_jacobian(s, kParams);
        const double eps = 1e-7;
        for (int j = 0; j < 6; ++j) {
            StateVector sp = s, sm = s;
            sp[j] += eps;
            sm[j] -= eps;
            const Vec6 fd = (eom(sp, kParams) - eom(sm, kParams)) / (2 * eps);
            CHECK((fd - A.col(j)).cwiseAbs().maxCoeff() < 1e-6);
        }
    }
}

TEST_CASE("STM matches central finite differences of the flow") {
    std::mt19937_64 rng(7);
    const double dt = 0.3;
    for (int trial = 0; trial < 5; ++trial) {
        const StateVector s = near_l1_state(rng);
        const auto [xf, phi] = propagate_with_stm(s, dt, 64, kParams);
        CHECK((propagate(s, dt, 64, kParams) - xf).cwiseAbs().maxCoeff() < 1e-13);
        const double eps = 1e-6;
        for (int j = 0; j < 6; ++j) {
            StateVector sp = s, sm = s;
            sp[j] += eps;
            sm[j] -= eps;
            const Vec6 fd =
                (propagate(sp, dt, 64, kParams) - propagate(sm, dt, 64, kParams)) / (2 * eps);
            const double scale = std::max(1.0, phi.col(j).cwiseAbs().maxCoeff());
            CHECK((fd - phi.col(j)).cwiseAbs().maxCoeff() / scale < 1e-4);
        }
    }
}

TEST_CASE("RK4 exhibits fourth-order step-halving convergence") {
    std::mt19937_64 rng(11);
    const StateVector s = near_l1_state(rng);
    const double dt = 0.5;
    const StateVector ref = propagate(s, dt, 4096, kParams);
    const double e1 = (propagate(s, dt, 32, kParams) - ref).norm();
    const double e2 = (propagate(s, dt, 64, kParams) - ref).norm();
    const double ratio = e1 / e2;
    CHECK(ratio > 12.0);
    CHECK(ratio < 20.0);
}

TEST_CASE("step scale shrinks near the Moon and clamps") {
    StateVector far = StateVector::Zero();
    far[0] = 0.2;
    CHECK(step_scale(far, kParams) == Catch::Approx(1.0));
    StateVector close = StateVector::Zero();
    close.head<3>() = kParams.moon_pos() + Vec3(1e-4, 0, 0);
    CHECK(step_scale(close, kParams) == Catch::Approx(1e-3));
    StateVector mid = StateVector::Zero();
    mid.head<3>() = kParams.moon_pos() + Vec3(0.05, 0, 0);
    CHECK(step_scale(mid, kParams) == Catch::Approx(std::pow(0.5, 1.5)));
}

TEST_CASE("adaptive propagation agrees with the fixed-step integrator") {
    StateVector s;
    s << 0.83, 0.0, 0.01, 0.0, 0.12, 0.0;
    const StateVector a = propagate_adaptive(s, 1.0, 1e-3, kParams);
    const StateVector b = propagate(s, 1.0, 1000, kParams);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("impulse step reduces to a coast for zero impulse") {
    StateVector s;
    s << 0.83, 0.0, 0.01, 0.0, 0.12, 0.0;
    const StateVector a = step_with_impulse(s, Vec3::Zero(), 0.1, 0.01, kParams);
    const StateVector b = propagate(s, 0.1, 10, kParams);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("impulse enters the velocity before the coast") {
    StateVector s;
    s << 0.83, 0.0, 0.01, 0.0, 0.12, 0.0;
    const Vec3 dv(1e-3, -2e-3, 5e-4);
    StateVector kicked = s;
    kicked.tail<3>() += dv;
    const StateVector a = step_with_impulse(s, dv, 0.1, 0.01, kParams);
    const StateVector b = propagate(kicked, 0.1, 10, kParams);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("configuration and singularity guards throw") {
    StateVector s = StateVector::Zero();
    s[0] = 0.5;
    CHECK_THROWS_AS(propagate(s, 1.0, 0, kParams), ConfigError);
    CHECK_THROWS_AS(step_with_impulse(s, Vec3::Zero(), 0.1, 0.03, kParams), ConfigError);
    CHECK_THROWS_AS(SystemParams{0.7}.validate(), ConfigError);

    StateVector at_moon = StateVector::Zero();
    at_moon.head<3>() = kParams.moon_pos();
    CHECK_THROWS_AS(eom(at_moon, kParams), SingularityError);
    CHECK_THROWS_AS(jacobi_constant(at_moon, kParams), SingularityError);

    StateVector bad = s;
    bad[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(eom(bad, kParams), SingularityError);
}

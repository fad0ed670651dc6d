#include <catch2/catch_amalgamated.hpp>

#include "cislunar/family.hpp"

using namespace cislunar;

namespace {
const SystemParams kParams{};
}

TEST_CASE("family tags round-trip through strings") {
    for (const char* s : {"l1-lyapunov", "l2-lyapunov", "l1-halo-north", "l2-halo-south",
                          "l1-nrho-south", "l2-nrho-north"}) {
        CHECK(to_string(parse_family_tag(s)) == s);
    }
    CHECK_THROWS_AS(parse_family_tag("l3-halo-north"), ConfigError);
    CHECK_THROWS_AS(parse_family_tag("l1-lyapunov-north-extra"), ConfigError);
}

TEST_CASE("wrap_angle maps into [-pi, pi)") {
    CHECK(wrap_angle(0.0) == Catch::Approx(0.0).margin(1e-15));
    CHECK(wrap_angle(3 * M_PI) == Catch::Approx(-M_PI).margin(1e-12));
    CHECK(wrap_angle(-0.1) == Catch::Approx(-0.1));
    for (double a : {-10.0, -1.0, 2.0, 15.0, 100.0}) {
        const double w = wrap_angle(a);
        CHECK(w >= -M_PI);
        CHECK(w < M_PI);
        CHECK(std::remainder(a - w, 2 * M_PI) == Catch::Approx(0.0).margin(1e-9));
    }
}

TEST_CASE("differential correction produces a closed periodic orbit") {
    const FamilyTag tag = parse_family_tag("l1-lyapunov");
    const PeriodicOrbit orb =
        differential_correction(initial_guess(tag, 0.01, kParams), tag, kParams);

    // perpendicular xz-plane crossing
    CHECK(orb.x0[1] == Catch::Approx(0.0).margin(1e-12));
    CHECK(orb.x0[3] == Catch::Approx(0.0).margin(1e-12));
    CHECK(orb.period > 0.0);

    CHECK(closure_residual(orb, kParams) < 1e-10);

    // Jacobi drift over one period
    const double c0 = jacobi_constant(orb.x0, kParams);
    const StateVector xT = propagate_adaptive(orb.x0, orb.period, 1e-3, kParams);
    CHECK(std::abs(jacobi_constant(xT, kParams) - c0) < 1e-9);
}

TEST_CASE("continuation walks a monotone chi branch with closed members") {
    const FamilyTag tag = parse_family_tag("l1-lyapunov");
    const PeriodicOrbit seed =
        differential_correction(initial_guess(tag, 0.01, kParams), tag, kParams);
    FamilyCatalog cat = pac_continue(seed, 5e-3, 8, kParams);
    REQUIRE(cat.members.size() == 8);
    for (size_t i = 0; i < cat.members.size(); ++i) {
        CHECK(closure_residual(cat.members[i], kParams) < 1e-10);
        if (i > 0) CHECK(cat.members[i].chi > cat.members[i - 1].chi);
    }
}

TEST_CASE("the geometric phase sweeps one full turn per revolution") {
    const FamilyTag tag = parse_family_tag("l1-lyapunov");
    const PeriodicOrbit orb =
        differential_correction(initial_guess(tag, 0.01, kParams), tag, kParams);
    const LibrationPoint L = libration_point(tag.point, kParams);
    double prev = nu_of_state(orb.x0, tag, L);
    double swept = 0.0;
    StateVector s = orb.x0;
    const int n = 400;
    for (int i = 0; i < n; ++i) {
        s = propagate_adaptive(s, orb.period / n, 1e-3, kParams);
        const double nu = nu_of_state(s, tag, L);
        swept += wrap_angle(nu - prev);
        prev = nu;
    }
    CHECK(std::abs(swept) == Catch::Approx(2 * M_PI).margin(1e-6));
}

TEST_CASE("catalog JSON round trip preserves every member bit-exactly") {
    const FamilyTag tag = parse_family_tag("l1-lyapunov");
    const PeriodicOrbit seed =
        differential_correction(initial_guess(tag, 0.01, kParams), tag, kParams);
    FamilyCatalog cat = pac_continue(seed, 5e-3, 4, kParams);
    const FamilyCatalog back = catalog_from_json(catalog_to_json(cat));
    REQUIRE(back.members.size() == cat.members.size());
    CHECK(back.mu == cat.mu);
    CHECK(to_string(back.tag) == to_string(cat.tag));
    for (size_t i = 0; i < cat.members.size(); ++i) {
        CHECK(back.members[i].x0 == cat.members[i].x0);
        CHECK(back.members[i].period == cat.members[i].period);
        CHECK(back.members[i].chi == cat.members[i].chi);
    }
}

TEST_CASE("generate_family front end returns the requested Lyapunov count") {
    FamilyCatalog cat = generate_family(parse_family_tag("l1-lyapunov"), 6, kParams);
    REQUIRE(cat.members.size() == 6);
    for (const auto& m : cat.members) CHECK(closure_residual(m, kParams) < 1e-10);
}

TEST_CASE("chi increases with orbit size along the continuation branch") {
    const FamilyTag tag = parse_family_tag("l1-lyapunov");
    const PeriodicOrbit seed =
        differential_correction(initial_guess(tag, 0.01, kParams), tag, kParams);
    FamilyCatalog cat = pac_continue(seed, 5e-3, 4, kParams);
    CHECK(orbit_chi(cat.members.back(), kParams) > orbit_chi(cat.members.front(), kParams));
}

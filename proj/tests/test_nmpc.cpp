#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "cislunar/nmpc.hpp"

using namespace cislunar;

namespace {

const SystemParams kParams{};

const FamilyCatalog& test_catalog() {
    static const FamilyCatalog cat =
        generate_family(parse_family_tag("l1-lyapunov"), 24, kParams);
    return cat;
}

const MprModel& test_model() {
    static const MprModel model = [] {
        FitOptions opt;
        opt.degree = 12;
        opt.parts = 2;
        opt.samples_per_orbit = 150;
        return fit_family_model(test_catalog(), kParams, opt);
    }();
    return model;
}

NmpcConfig base_config() {
    const auto& orb = test_catalog().members[12];
    const auto& sub = test_model().select(orb.chi);
    NmpcConfig cfg;
    cfg.Ts = orb.period / 20.0;
    cfg.Ts_hat = cfg.Ts / 10.0;
    cfg.chi_min = sub.chi_lo;
    cfg.chi_max = sub.chi_hi;
    return cfg;
}

// Straight-line reimplementation of the horizon cost for oracle comparison:
// re-propagates the trajectory step by step and adds every term explicitly.
double naive_cost(const StateVector& x0, const std::vector<Vec3>& dv,
                  const std::vector<double>& chi, const std::vector<double>& nu,
                  const MprModel& model, const NmpcConfig& cfg, const SystemParams& p) {
    double J = 0.0;
    StateVector s = x0;
    for (int i = 1; i <= cfg.Np + 1; ++i) {
        const Vec3 impulse = dv[std::min<int>(i, static_cast<int>(dv.size())) - 1];
        s = step_with_impulse(s, impulse, cfg.Ts, cfg.Ts_hat, p, cfg.rk4_substeps);
        const double c = chi.size() == 1 ? chi[0] : chi[std::min(i, cfg.Np) - 1];
        const StateVector ref = eval_mpr(model, {c, nu[i - 1]});
        const StateVector r = s - ref;
        const Mat6& W = i <= cfg.Np ? cfg.Q : cfg.Qt;
        J += (r.transpose() * W * r).value();
    }
    for (const auto& d : dv) J += (d.transpose() * cfg.R * d).value();
    return J;
}

}  // namespace

TEST_CASE("configuration validation rejects inconsistent setups") {
    NmpcConfig cfg = base_config();
    CHECK_NOTHROW(cfg.validate());

    NmpcConfig bad = cfg;
    bad.Nc = bad.Np + 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.Ts_hat = bad.Ts / 7.3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.R = -1e-3 * Mat3::Identity();
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.chi_min = bad.chi_max;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = cfg;
    bad.mode = ControlMode::FixedOrbit;
    bad.chi_ref = bad.chi_max + 0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("control mode names round trip") {
    for (const char* s : {"fixed-chi", "variable-chi", "fixed-orbit"})
        CHECK(to_string(parse_control_mode(s)) == s);
    CHECK_THROWS_AS(parse_control_mode("free-chi"), ConfigError);
}

TEST_CASE("cost matches an independent term-by-term implementation") {
    const MprModel& model = test_model();
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int trial = 0; trial < 25; ++trial) {
        NmpcConfig cfg = base_config();
        cfg.Np = 1 + static_cast<int>(u(rng) * 4);  // Np <= 4
        cfg.Nc = 1 + static_cast<int>(u(rng) * cfg.Np);
        cfg.Nc = std::min(cfg.Nc, cfg.Np);
        const int which = trial % 3;
        cfg.mode = which == 0 ? ControlMode::FixedChi
                              : which == 1 ? ControlMode::VariableChi : ControlMode::FixedOrbit;
        cfg.chi_ref = 0.5 * (cfg.chi_min + cfg.chi_max);

        const auto& orb = test_catalog().members[10 + trial % 8];
        StateVector x0 = orb.x0;
        for (int i = 0; i < 6; ++i) x0[i] += 1e-4 * g(rng);

        std::vector<Vec3> dv(cfg.Nc);
        for (auto& d : dv) d = 1e-3 * Vec3(g(rng), g(rng), g(rng));
        const int m = std::max(1, cfg.chi_vars());
        std::vector<double> chi(m);
        for (auto& c : chi) c = cfg.chi_min + (cfg.chi_max - cfg.chi_min) * u(rng);
        if (cfg.mode == ControlMode::FixedOrbit) chi = {cfg.chi_ref};
        std::vector<double> nu(cfg.Np + 1);
        for (auto& n : nu) n = -M_PI + 2 * M_PI * u(rng);

        const double a = cost_eval(x0, dv, chi, nu, model, cfg, kParams);
        const double b = naive_cost(x0, dv, chi, nu, model, cfg, kParams);
        CHECK(std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b)));
    }
}

TEST_CASE("analytic gradient matches finite differences at interior points") {
    const MprModel& model = test_model();
    NmpcConfig cfg = base_config();
    cfg.Np = 3;
    cfg.Nc = 2;
    cfg.mode = ControlMode::VariableChi;

    const auto& orb = test_catalog().members[12];
    StateVector x0 = orb.x0;
    x0[1] += 2e-4;

    // interior, feasible decision point
    std::vector<Vec3> dv{Vec3(1e-3, -5e-4, 2e-4), Vec3(-2e-4, 1e-4, 3e-4)};
    const double mid = 0.5 * (cfg.chi_min + cfg.chi_max);
    std::vector<double> chi{mid, mid + 1e-3, mid - 1e-3};
    const double rate = model.select(mid).nu_rate;
    std::vector<double> nu;
    const LibrationPoint L = libration_point(model.tag.point, kParams);
    double nu0 = nu_of_state(x0, model.tag, L);
    for (int i = 1; i <= cfg.Np + 1; ++i) nu.push_back(nu0 + rate * cfg.Ts * i);

    Eigen::VectorXd z = detail::pack_decision(dv, chi, nu, cfg);
    Eigen::VectorXd grad;
    const double J = detail::cost_and_grad(x0, z, model, cfg, kParams, grad);
    CHECK(std::isfinite(J));
    for (int j = 0; j < z.size(); ++j) {
        Eigen::VectorXd zp = z, zm = z;
        const double eps = 1e-7;
        zp[j] += eps;
        zm[j] -= eps;
        const double fd = (detail::cost_eval_only(x0, zp, model, cfg, kParams) -
                           detail::cost_eval_only(x0, zm, model, cfg, kParams)) /
                          (2 * eps);
        CHECK(std::abs(fd - grad[j]) < 1e-5 * std::max(1.0, std::abs(grad[j])));
    }
}

TEST_CASE("stage conventions: held chi and held impulse indices") {
    std::vector<double> chi{0.1, 0.2, 0.3};
    CHECK(detail::stage_chi(chi, 1, 3) == 0.1);
    CHECK(detail::stage_chi(chi, 3, 3) == 0.3);
    CHECK(detail::stage_chi(chi, 4, 3) == 0.3);  // terminal stage holds the last chi
    std::vector<double> single{0.5};
    CHECK(detail::stage_chi(single, 4, 3) == 0.5);

    std::vector<Vec3> dv{Vec3(1, 0, 0), Vec3(0, 1, 0)};
    CHECK(detail::applied_dv(dv, 1) == Vec3(1, 0, 0));
    CHECK(detail::applied_dv(dv, 2) == Vec3(0, 1, 0));
    CHECK(detail::applied_dv(dv, 5) == Vec3(0, 1, 0));  // held beyond Nc
}

TEST_CASE("solver finds a near-zero-cost plan on a member state") {
    const auto& orb = test_catalog().members[12];
    NmpcConfig cfg = base_config();
    const HorizonSolution sol = solve_horizon(orb.x0, test_model(), cfg, kParams);
    CHECK(sol.converged);
    CHECK(sol.cost < 1e-5);
    CHECK(sol.dv_sequence.front().norm() < 1e-3);
    REQUIRE(static_cast<int>(sol.nu_sequence.size()) == cfg.Np + 1);
    for (double n : sol.nu_sequence) {
        CHECK(n >= -M_PI);
        CHECK(n < M_PI);
    }
}

TEST_CASE("a chi box spanning two sub-manifolds is rejected") {
    NmpcConfig cfg = base_config();
    cfg.chi_min = test_model().chi_min();
    cfg.chi_max = test_model().chi_max();  // spans both subs
    CHECK_THROWS_AS(solve_horizon(test_catalog().members[12].x0, test_model(), cfg, kParams),
                    ConfigError);
}

TEST_CASE("controller step returns a consistently shifted warm start") {
    const auto& orb = test_catalog().members[12];
    NmpcConfig cfg = base_config();
    const ControllerStep step = controller_step(orb.x0, test_model(), cfg, kParams);
    CHECK(step.dv == step.solution.dv_sequence.front());
    REQUIRE(step.warm_next.dv_sequence.size() == step.solution.dv_sequence.size());
    CHECK(step.warm_next.dv_sequence.front() == step.solution.dv_sequence[1]);
    REQUIRE(step.warm_next.nu_sequence.size() == step.solution.nu_sequence.size());
    CHECK(step.warm_next.nu_sequence.front() == step.solution.nu_sequence[1]);
}

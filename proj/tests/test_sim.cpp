#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "cislunar/sim.hpp"

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

// Small closed-loop scenario: one revolution on a catalog member with mild
// disturbance, coarse control grid to keep runtime down.
Scenario small_scenario() {
    const auto& orb = test_catalog().members[12];
    const auto& sub = test_model().select(orb.chi);
    Scenario scn;
    scn.family = to_string(test_catalog().tag);
    scn.initial_truth = orb.x0;
    scn.chi_nominal = orb.chi;
    scn.revolution_period = orb.period;
    scn.revolutions = 1.0;
    scn.nmpc.Ts = orb.period / 10.0;
    scn.nmpc.Ts_hat = scn.nmpc.Ts / 5.0;
    scn.nmpc.Np = 3;
    scn.nmpc.Nc = 1;
    scn.nmpc.multi_start = 2;
    scn.nmpc.chi_min = sub.chi_lo;
    scn.nmpc.chi_max = sub.chi_hi;
    scn.seed = 11;
    return scn;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("scenario validation catches inconsistent setups") {
    Scenario scn = small_scenario();
    CHECK_NOTHROW(scn.validate());

    Scenario bad = scn;
    bad.revolutions = 0.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = scn;
    bad.chi_nominal = bad.nmpc.chi_max + 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = scn;
    bad.sigma_range = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = scn;
    bad.initial_covariance = -1e-6 * Mat6::Identity();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("percentile and median helpers") {
    CHECK(detail::median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(detail::median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK(detail::median({}) == 0.0);
    CHECK(detail::percentile({1, 2, 3, 4, 5}, 0.0) == 1.0);
    CHECK(detail::percentile({1, 2, 3, 4, 5}, 1.0) == 5.0);
    CHECK(detail::percentile({1, 2, 3, 4, 5}, 0.5) == 3.0);
    CHECK(detail::percentile({0.0, 10.0}, 0.95) == Catch::Approx(9.5));
}

TEST_CASE("convergence detector on synthetic delta-chi series") {
    // settles right after the initial offset sample (band = 5e-5)
    std::vector<double> flat(40, 1e-8);
    flat[0] = 1e-3;
    CHECK(detail::convergence_step(flat, 10) == 1);

    // decays to zero halfway through
    std::vector<double> decay;
    for (int k = 0; k < 40; ++k) decay.push_back(k < 20 ? 1e-3 * (1.0 - k / 20.0) : 0.0);
    const int step = detail::convergence_step(decay, 10);
    CHECK(step > 0);
    CHECK(step <= 20);

    // oscillates outside the band forever
    std::vector<double> osc;
    for (int k = 0; k < 40; ++k) osc.push_back(1e-3 * (k % 2 ? 1.0 : -1.0));
    CHECK(detail::convergence_step(osc, 10) == -1);

    // shorter than one revolution: undecidable
    CHECK(detail::convergence_step({1.0, 1.0, 1.0}, 10) == -1);
    CHECK(detail::convergence_step({}, 10) == -1);

    // tiny initial offset: the absolute band floor keeps noise from blocking
    std::vector<double> tiny(40, 5e-7);
    tiny[0] = 1e-9;
    CHECK(detail::convergence_step(tiny, 10) == 0);
}

TEST_CASE("closed-loop run is deterministic and fills the log") {
    const Scenario scn = small_scenario();
    const RunResult a = run_closed_loop(scn, test_model(), kParams);
    const RunResult b = run_closed_loop(scn, test_model(), kParams);

    const int expected_rows = 10 * 5;  // steps_per_rev * substeps, one revolution
    REQUIRE(static_cast<int>(a.log.size()) == expected_rows);
    CHECK_FALSE(a.metrics.aborted);
    CHECK(a.metrics.solver_failures == 0);
    CHECK(a.metrics.delta_chi.size() == 10);
    CHECK(a.metrics.est_pos_error.size() == a.log.size());
    CHECK(a.metrics.total_dv == Catch::Approx(std::accumulate(
                                    a.metrics.impulse_dv.begin(), a.metrics.impulse_dv.end(), 0.0)));
    CHECK(a.metrics.total_dv_mps == Catch::Approx(a.metrics.total_dv * kVelUnitMps));

    // bitwise repeatability of every numeric channel except wall-clock timing
    REQUIRE(b.log.size() == a.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].t == b.log[i].t);
        CHECK(a.log[i].truth == b.log[i].truth);
        CHECK(a.log[i].estimate == b.log[i].estimate);
        CHECK(a.log[i].reference == b.log[i].reference);
        CHECK(a.log[i].dv == b.log[i].dv);
        CHECK(a.log[i].cost == b.log[i].cost);
    }
    CHECK(a.metrics.final_chi == b.metrics.final_chi);

    // a different seed produces a different noise realization
    Scenario other = scn;
    other.seed = 12;
    const RunResult c = run_closed_loop(other, test_model(), kParams);
    CHECK(c.log.back().truth != a.log.back().truth);
}

TEST_CASE("estimate stays near the truth through the run") {
    const RunResult res = run_closed_loop(small_scenario(), test_model(), kParams);
    double worst = 0.0;
    for (double e : res.metrics.est_pos_error) worst = std::max(worst, e);
    CHECK(worst < 1e-3);
}

TEST_CASE("monte carlo with one run reproduces the dispersed single run") {
    const Scenario base = small_scenario();
    const MonteCarloSummary mc = monte_carlo(base, test_model(), kParams, 1, 1e-4);
    REQUIRE(mc.runs.size() == 1);
    CHECK(mc.runs[0].seed == base.seed);
    CHECK_FALSE(mc.runs[0].failed);
    CHECK(mc.failure_fraction == 0.0);

    // rebuild the same dispersion by hand and compare the metrics
    Scenario scn = base;
    std::mt19937_64 drng(base.seed ^ 0x5851f42d4c957f2dULL);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int j = 0; j < 6; ++j) scn.initial_truth[j] += 1e-4 * gauss(drng);
    const RunResult single = run_closed_loop(scn, test_model(), kParams);
    CHECK(mc.runs[0].metrics.total_dv == single.metrics.total_dv);
    CHECK(mc.runs[0].metrics.final_chi == single.metrics.final_chi);
    CHECK(mc.mean_total_dv == single.metrics.total_dv);

    CHECK_THROWS_AS(monte_carlo(base, test_model(), kParams, 0), ConfigError);
}

TEST_CASE("horizon sweep marks infeasible cells and fills feasible ones") {
    const Scenario base = small_scenario();
    const auto cells = horizon_sweep(base, test_model(), kParams, {2, 3}, {1, 3});
    REQUIRE(cells.size() == 4);
    for (const auto& c : cells) {
        if (c.Nc > c.Np) {
            CHECK(c.skipped);
            CHECK_FALSE(c.failed);
        } else {
            CHECK_FALSE(c.skipped);
            CHECK(c.mean_dv >= 0.0);
            CHECK(c.mean_solver_ms > 0.0);
            CHECK(c.total_dv >= c.mean_dv);
        }
    }
    // cells enumerate Np-major
    CHECK(cells[0].Np == 2);
    CHECK(cells[0].Nc == 1);
    CHECK(cells[3].Np == 3);
    CHECK(cells[3].Nc == 3);
}

TEST_CASE("mode comparison runs all three controllers on the same scenario") {
    Scenario scn = small_scenario();
    const ModeComparison cmp = compare_modes(scn, test_model(), kParams);
    for (const RunMetrics* m : {&cmp.variable_chi, &cmp.fixed_chi, &cmp.fixed_orbit}) {
        CHECK_FALSE(m->aborted);
        CHECK(m->total_dv > 0.0);
        CHECK(m->delta_chi.size() == 10);
    }
    // fixed-orbit pins the command to chi_nominal exactly
    for (double d : cmp.fixed_orbit.delta_chi) CHECK(d == 0.0);
}

TEST_CASE("trajectory CSV has the documented header and one line per row") {
    const RunResult res = run_closed_loop(small_scenario(), test_model(), kParams);
    const std::string path = "test_sim_traj.csv";
    write_trajectory_csv(path, res.log);
    const std::string text = slurp(path);
    std::remove(path.c_str());
    std::stringstream ss(text);
    std::string header;
    std::getline(ss, header);
    CHECK(header ==
          "t,truth_x,truth_y,truth_z,truth_vx,truth_vy,truth_vz,"
          "est_x,est_y,est_z,est_vx,est_vy,est_vz,"
          "ref_x,ref_y,ref_z,ref_vx,ref_vy,ref_vz,"
          "dv_x,dv_y,dv_z,dv_x_mps,dv_y_mps,dv_z_mps,cost,solver_iters,solver_ms");
    size_t lines = 0;
    for (std::string line; std::getline(ss, line);) {
        ++lines;
        CHECK(std::count(line.begin(), line.end(), ',') == 27);
    }
    CHECK(lines == res.log.size());
}

TEST_CASE("sweep and monte carlo CSV writers emit their headers") {
    std::vector<SweepCell> cells(1);
    cells[0].Np = 3;
    cells[0].Nc = 1;
    cells[0].mean_dv = 1e-4;
    write_sweep_csv("test_sim_sweep.csv", cells);
    std::string text = slurp("test_sim_sweep.csv");
    std::remove("test_sim_sweep.csv");
    CHECK(text.rfind("Np,Nc,skipped,failed,mean_dv,mean_dv_mps,total_dv,total_dv_mps,"
                     "mean_solver_ms\n", 0) == 0);

    MonteCarloSummary mc;
    mc.runs.resize(1);
    write_montecarlo_csv("test_sim_mc.csv", mc);
    text = slurp("test_sim_mc.csv");
    std::remove("test_sim_mc.csv");
    CHECK(text.rfind("run,seed,failed,total_dv,total_dv_mps,converged,convergence_revs,"
                     "mean_solver_ms,final_chi\n", 0) == 0);
}

TEST_CASE("metrics serialize to JSON with the expected keys") {
    RunMetrics m;
    m.total_dv = 0.5;
    m.converged = true;
    m.convergence_revs = 1.25;
    const nlohmann::json j = metrics_to_json(m);
    for (const char* key : {"total_dv", "total_dv_mps", "impulse_dv", "delta_chi",
                            "est_pos_error", "converged", "convergence_revs", "mean_solver_ms",
                            "p95_solver_ms", "mean_solver_iters", "solver_failures", "ekf_skips",
                            "final_chi", "aborted"}) {
        CHECK(j.contains(key));
    }
    CHECK(j["total_dv"] == 0.5);
    CHECK(j["converged"] == true);
}

#pragma once

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cislunar/ekf.hpp"
#include "cislunar/mpr.hpp"
#include "cislunar/nmpc.hpp"

namespace cislunar {

struct DisturbanceSpec {
    Vec3 bias = Vec3(1e-4, 0.0, 0.0);  // constant acceleration, rotating frame
    double sigma_q = 1e-3;             // white acceleration noise
};

struct Scenario {
    std::string family;  // label carried into metrics output
    StateVector initial_truth = StateVector::Zero();
    double chi_nominal = 0.0;          // station-keeping target used for delta-chi
    double revolution_period = 0.0;    // duration of one revolution; 0 = take from model
    double revolutions = 5.0;
    DisturbanceSpec disturbance;
    NmpcConfig nmpc;
    EkfConfig ekf;
    Mat6 initial_covariance = 1e-6 * Mat6::Identity();
    double sigma_range = 1e-6;
    double sigma_los = 1e-5;
    std::uint64_t seed = 0;

    void validate() const {
        nmpc.validate();
        if (!(revolutions >= 1.0)) throw ConfigError("Scenario: revolutions must be >= 1");
        if (!initial_truth.allFinite()) throw ConfigError("Scenario: non-finite initial state");
        if (chi_nominal < nmpc.chi_min || chi_nominal > nmpc.chi_max)
            throw ConfigError("Scenario: chi_nominal outside chi bounds");
        if (sigma_range < 0.0 || sigma_los < 0.0)
            throw ConfigError("Scenario: measurement sigmas must be non-negative");
        Eigen::SelfAdjointEigenSolver<Mat6> es(0.5 * (initial_covariance +
                                                      initial_covariance.transpose()));
        if (es.eigenvalues().minCoeff() < 0.0)
            throw ConfigError("Scenario: initial covariance must be PSD");
    }
};

struct LogRow {
    double t = 0.0;
    StateVector truth = StateVector::Zero();
    StateVector estimate = StateVector::Zero();
    StateVector reference = StateVector::Zero();
    Vec3 dv = Vec3::Zero();  // nonzero only on impulse rows
    double cost = 0.0;
    int solver_iters = 0;
    double solver_ms = 0.0;
    bool solver_failed = false;
    bool ekf_skipped = false;
};

struct RunMetrics {
    double total_dv = 0.0;      // dimensionless, sum of ||dv_k||
    double total_dv_mps = 0.0;
    std::vector<double> impulse_dv;     // per-impulse magnitudes
    std::vector<double> delta_chi;      // per control step, commanded chi - chi_nominal
    std::vector<double> est_pos_error;  // per substep, ||estimate - truth|| position
    double convergence_revs = -1.0;     // -1 while unconverged
    bool converged = false;
    double mean_solver_ms = 0.0;
    double p95_solver_ms = 0.0;
    double mean_solver_iters = 0.0;
    int solver_failures = 0;
    int ekf_skips = 0;
    double final_chi = 0.0;
    bool aborted = false;  // truth hit a singularity; partial log
};

struct RunResult {
    RunMetrics metrics;
    std::vector<LogRow> log;
};

namespace detail {

inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = q * (static_cast<double>(v.size()) - 1.0);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// First control step after which |delta_chi - median(final revolution)| stays
// inside the band for one full revolution; -1 if that never happens.
inline int convergence_step(const std::vector<double>& delta_chi, int steps_per_rev) {
    const int n = static_cast<int>(delta_chi.size());
    if (n == 0 || steps_per_rev < 1 || n < steps_per_rev) return -1;
    std::vector<double> tail(delta_chi.end() - steps_per_rev, delta_chi.end());
    const double center = median(std::move(tail));
    const double band = std::max(0.05 * std::abs(delta_chi.front()), 1e-6);
    for (int k = 0; k + steps_per_rev <= n; ++k) {
        bool ok = true;
        for (int j = k; j < k + steps_per_rev && ok; ++j)
            ok = std::abs(delta_chi[j] - center) <= band;
        if (ok) return k;
    }
    return -1;
}

}  // namespace detail

inline RunResult run_closed_loop(const Scenario& scn, const MprModel& model,
                                 const SystemParams& p) {
    scn.validate();
    const double period =
        scn.revolution_period > 0.0
            ? scn.revolution_period
            : model.select(std::clamp(scn.chi_nominal, model.chi_min(), model.chi_max()))
                  .mean_period;
    const int n_steps =
        static_cast<int>(std::ceil(scn.revolutions * period / scn.nmpc.Ts - 1e-9));
    const int n_sub = scn.nmpc.n_substeps();
    const int steps_per_rev =
        std::max(1, static_cast<int>(std::lround(period / scn.nmpc.Ts)));

    std::mt19937_64 rng(scn.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    RunResult out;
    out.log.reserve(static_cast<size_t>(n_steps) * n_sub);
    RunMetrics& m = out.metrics;

    StateVector truth = scn.initial_truth;
    EstimatorState est;
    est.mean = scn.initial_truth;
    est.covariance = scn.initial_covariance;

    std::optional<HorizonSolution> warm;
    std::vector<double> solver_ms, solver_iters;
    const double nu_rate =
        model.select(std::clamp(scn.chi_nominal, model.chi_min(), model.chi_max())).nu_rate;

    for (int k = 0; k < n_steps; ++k) {
        const double t0 = k * scn.nmpc.Ts;
        Vec3 dv = Vec3::Zero();
        double chi_cmd = scn.chi_nominal;
        double nu_ref0 = 0.0;
        double cost = 0.0;
        int iters = 0;
        double wall = 0.0;
        bool failed = false;
        try {
            ControllerStep step = controller_step(est.mean, model, scn.nmpc, p, warm);
            dv = step.dv;
            chi_cmd = std::clamp(step.solution.chi.front(), model.chi_min(), model.chi_max());
            nu_ref0 = step.solution.nu_sequence.front() - nu_rate * scn.nmpc.Ts;
            cost = step.solution.cost;
            iters = step.solution.iterations;
            wall = step.solution.wall_ms;
            warm = step.warm_next;
        } catch (const std::exception&) {
            // solver failure: coast this step and start cold next time
            failed = true;
            warm.reset();
            ++m.solver_failures;
        }
        if (!failed) {
            solver_ms.push_back(wall);
            solver_iters.push_back(static_cast<double>(iters));
            m.impulse_dv.push_back(dv.norm());
            m.total_dv += dv.norm();
        }

        truth.tail<3>() += dv;
        bool aborted = false;
        for (int j = 0; j < n_sub; ++j) {
            // advance truth one substep with the disturbance kicks, then filter
            try {
                truth = propagate(truth, scn.nmpc.Ts_hat, scn.nmpc.rk4_substeps, p);
            } catch (const SingularityError&) {
                aborted = true;
                break;
            }
            const double sdt = std::sqrt(scn.nmpc.Ts_hat);
            truth.tail<3>() += scn.disturbance.bias * scn.nmpc.Ts_hat;
            for (int i = 0; i < 3; ++i)
                truth[3 + i] += scn.disturbance.sigma_q * sdt * gauss(rng);

            EkfConfig ekf = scn.ekf;
            est = ekf_predict(est, scn.nmpc.Ts_hat, j == 0 ? dv : Vec3::Zero(), ekf, p);
            const Measurement z =
                simulate_measurement(truth, rng, ekf, p, scn.sigma_range, scn.sigma_los);
            const EkfUpdateResult upd = ekf_update(est, z, ekf, p);
            if (upd.skipped) ++m.ekf_skips;
            est = upd.state;

            LogRow row;
            row.t = t0 + (j + 1) * scn.nmpc.Ts_hat;
            row.truth = truth;
            row.estimate = est.mean;
            row.reference = eval_mpr(
                model, ParamPair{chi_cmd, nu_ref0 + nu_rate * (j + 1) * scn.nmpc.Ts_hat});
            row.dv = j == 0 ? dv : Vec3::Zero();
            row.cost = cost;
            row.solver_iters = iters;
            row.solver_ms = wall;
            row.solver_failed = failed;
            row.ekf_skipped = upd.skipped;
            out.log.push_back(row);
            m.est_pos_error.push_back((est.mean - truth).head<3>().norm());
        }
        if (aborted) {
            m.aborted = true;
            break;
        }
        m.delta_chi.push_back(chi_cmd - scn.chi_nominal);
    }

    m.total_dv_mps = m.total_dv * kVelUnitMps;
    m.mean_solver_ms =
        solver_ms.empty()
            ? 0.0
            : std::accumulate(solver_ms.begin(), solver_ms.end(), 0.0) / solver_ms.size();
    m.p95_solver_ms = detail::percentile(solver_ms, 0.95);
    m.mean_solver_iters = solver_iters.empty()
                              ? 0.0
                              : std::accumulate(solver_iters.begin(), solver_iters.end(), 0.0) /
                                    solver_iters.size();
    m.final_chi = estimate_chi(model, est.mean, p);  // instantaneous best-fit chi
    const int conv = detail::convergence_step(m.delta_chi, steps_per_rev);
    if (!m.aborted && conv >= 0) {
        m.converged = true;
        m.convergence_revs = conv * scn.nmpc.Ts / period;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Campaigns

struct MonteCarloRun {
    int index = 0;
    std::uint64_t seed = 0;
    bool failed = false;  // threw or aborted
    RunMetrics metrics;
};

struct MonteCarloSummary {
    std::vector<MonteCarloRun> runs;
    double failure_fraction = 0.0;
    double converged_fraction = 0.0;  // of non-failed runs
    double mean_total_dv = 0.0;
    double mean_convergence_revs = 0.0;  // over converged runs
    double mean_solver_ms = 0.0;
};

inline MonteCarloSummary monte_carlo(const Scenario& base, const MprModel& model,
                                     const SystemParams& p, int runs,
                                     double dispersion_sigma = 1e-3) {
    if (runs < 1) throw ConfigError("monte_carlo: runs must be >= 1");
    MonteCarloSummary out;
    out.runs.reserve(runs);
    int failures = 0, converged = 0;
    double dv_sum = 0.0, conv_sum = 0.0, ms_sum = 0.0;
    for (int i = 0; i < runs; ++i) {
        MonteCarloRun r;
        r.index = i;
        r.seed = base.seed + static_cast<std::uint64_t>(i);
        Scenario scn = base;
        scn.seed = r.seed;
        // disperse the initial state with an independent stream so the in-run
        // noise sequence is unaffected by the dispersion draw count
        std::mt19937_64 drng(r.seed ^ 0x5851f42d4c957f2dULL);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (int j = 0; j < 6; ++j) scn.initial_truth[j] += dispersion_sigma * gauss(drng);
        try {
            RunResult res = run_closed_loop(scn, model, p);
            r.metrics = res.metrics;
            r.failed = res.metrics.aborted;
        } catch (const std::exception&) {
            r.failed = true;
        }
        if (r.failed) {
            ++failures;
        } else {
            dv_sum += r.metrics.total_dv;
            ms_sum += r.metrics.mean_solver_ms;
            if (r.metrics.converged) {
                ++converged;
                conv_sum += r.metrics.convergence_revs;
            }
        }
        out.runs.push_back(std::move(r));
    }
    const int ok = runs - failures;
    out.failure_fraction = static_cast<double>(failures) / runs;
    out.converged_fraction = ok > 0 ? static_cast<double>(converged) / ok : 0.0;
    out.mean_total_dv = ok > 0 ? dv_sum / ok : 0.0;
    out.mean_convergence_revs = converged > 0 ? conv_sum / converged : -1.0;
    out.mean_solver_ms = ok > 0 ? ms_sum / ok : 0.0;
    return out;
}

struct SweepCell {
    int Np = 0;
    int Nc = 0;
    bool skipped = false;  // infeasible (Nc > Np) or run failure
    bool failed = false;   // run failure specifically (skipped is also set)
    double mean_dv = 0.0;  // mean impulse magnitude
    double mean_solver_ms = 0.0;
    double total_dv = 0.0;
};

inline std::vector<SweepCell> horizon_sweep(const Scenario& base, const MprModel& model,
                                            const SystemParams& p,
                                            const std::vector<int>& np_range,
                                            const std::vector<int>& nc_range) {
    std::vector<SweepCell> cells;
    for (int np : np_range) {
        for (int nc : nc_range) {
            SweepCell cell;
            cell.Np = np;
            cell.Nc = nc;
            if (nc > np || np < 1 || nc < 1) {
                cell.skipped = true;
                cells.push_back(cell);
                continue;
            }
            Scenario scn = base;
            scn.nmpc.Np = np;
            scn.nmpc.Nc = nc;
            try {
                RunResult res = run_closed_loop(scn, model, p);
                if (res.metrics.aborted || res.metrics.impulse_dv.empty()) {
                    cell.skipped = true;
                    cell.failed = true;
                } else {
                    const auto& dv = res.metrics.impulse_dv;
                    cell.mean_dv = std::accumulate(dv.begin(), dv.end(), 0.0) / dv.size();
                    cell.total_dv = res.metrics.total_dv;
                    cell.mean_solver_ms = res.metrics.mean_solver_ms;
                }
            } catch (const std::exception&) {
                cell.skipped = true;
                cell.failed = true;
            }
            cells.push_back(cell);
        }
    }
    return cells;
}

struct ModeComparison {
    RunMetrics variable_chi;
    RunMetrics fixed_chi;
    RunMetrics fixed_orbit;
};

inline ModeComparison compare_modes(const Scenario& scn, const MprModel& model,
                                    const SystemParams& p) {
    ModeComparison out;
    auto run_mode = [&](ControlMode mode) {
        Scenario s = scn;
        s.nmpc.mode = mode;
        if (mode == ControlMode::FixedOrbit) s.nmpc.chi_ref = s.chi_nominal;
        return run_closed_loop(s, model, p).metrics;
    };
    out.variable_chi = run_mode(ControlMode::VariableChi);
    out.fixed_chi = run_mode(ControlMode::FixedChi);
    out.fixed_orbit = run_mode(ControlMode::FixedOrbit);
    return out;
}

// ---------------------------------------------------------------------------
// Artifact writers

namespace detail {

inline std::string fmt_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline void write_trajectory_csv(const std::string& path, const std::vector<LogRow>& log) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open for writing: " + path);
    f << "t,truth_x,truth_y,truth_z,truth_vx,truth_vy,truth_vz,"
         "est_x,est_y,est_z,est_vx,est_vy,est_vz,"
         "ref_x,ref_y,ref_z,ref_vx,ref_vy,ref_vz,"
         "dv_x,dv_y,dv_z,dv_x_mps,dv_y_mps,dv_z_mps,cost,solver_iters,solver_ms\n";
    for (const LogRow& r : log) {
        f << detail::fmt_g(r.t);
        for (int i = 0; i < 6; ++i) f << ',' << detail::fmt_g(r.truth[i]);
        for (int i = 0; i < 6; ++i) f << ',' << detail::fmt_g(r.estimate[i]);
        for (int i = 0; i < 6; ++i) f << ',' << detail::fmt_g(r.reference[i]);
        for (int i = 0; i < 3; ++i) f << ',' << detail::fmt_g(r.dv[i]);
        for (int i = 0; i < 3; ++i) f << ',' << detail::fmt_g(r.dv[i] * kVelUnitMps);
        f << ',' << detail::fmt_g(r.cost) << ',' << r.solver_iters << ','
          << detail::fmt_g(r.solver_ms) << '\n';
    }
}

inline nlohmann::json metrics_to_json(const RunMetrics& m) {
    nlohmann::json j;
    j["total_dv"] = m.total_dv;
    j["total_dv_mps"] = m.total_dv_mps;
    j["impulse_dv"] = m.impulse_dv;
    j["delta_chi"] = m.delta_chi;
    j["est_pos_error"] = m.est_pos_error;
    j["converged"] = m.converged;
    j["convergence_revs"] = m.convergence_revs;
    j["mean_solver_ms"] = m.mean_solver_ms;
    j["p95_solver_ms"] = m.p95_solver_ms;
    j["mean_solver_iters"] = m.mean_solver_iters;
    j["solver_failures"] = m.solver_failures;
    j["ekf_skips"] = m.ekf_skips;
    j["final_chi"] = m.final_chi;
    j["aborted"] = m.aborted;
    return j;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& cells) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open for writing: " + path);
    f << "Np,Nc,skipped,failed,mean_dv,mean_dv_mps,total_dv,total_dv_mps,mean_solver_ms\n";
    for (const SweepCell& c : cells) {
        f << c.Np << ',' << c.Nc << ',' << (c.skipped ? 1 : 0) << ',' << (c.failed ? 1 : 0) << ','
          << detail::fmt_g(c.mean_dv) << ',' << detail::fmt_g(c.mean_dv * kVelUnitMps)
          << ',' << detail::fmt_g(c.total_dv) << ','
          << detail::fmt_g(c.total_dv * kVelUnitMps) << ','
          << detail::fmt_g(c.mean_solver_ms) << '\n';
    }
}

inline void write_montecarlo_csv(const std::string& path, const MonteCarloSummary& mc) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open for writing: " + path);
    f << "run,seed,failed,total_dv,total_dv_mps,converged,convergence_revs,"
         "mean_solver_ms,final_chi\n";
    for (const MonteCarloRun& r : mc.runs) {
        f << r.index << ',' << r.seed << ',' << (r.failed ? 1 : 0) << ','
          << detail::fmt_g(r.metrics.total_dv) << ',' << detail::fmt_g(r.metrics.total_dv_mps)
          << ',' << (r.metrics.converged ? 1 : 0) << ','
          << detail::fmt_g(r.metrics.convergence_revs) << ','
          << detail::fmt_g(r.metrics.mean_solver_ms) << ','
          << detail::fmt_g(r.metrics.final_chi) << '\n';
    }
}

}  // namespace cislunar

#pragma once

#include <chrono>
#include <limits>
#include <optional>

#include "cislunar/mpr.hpp"

namespace cislunar {

enum class ControlMode { FixedChi, VariableChi, FixedOrbit };

inline std::string to_string(ControlMode m) {
    switch (m) {
        case ControlMode::FixedChi: return "fixed-chi";
        case ControlMode::VariableChi: return "variable-chi";
        case ControlMode::FixedOrbit: return "fixed-orbit";
    }
    throw ConfigError("unknown control mode");
}

inline ControlMode parse_control_mode(const std::string& s) {
    if (s == "fixed-chi") return ControlMode::FixedChi;
    if (s == "variable-chi") return ControlMode::VariableChi;
    if (s == "fixed-orbit") return ControlMode::FixedOrbit;
    throw ConfigError("unknown control mode: " + s);
}

struct NmpcConfig {
    int Np = 5;  // prediction horizon (steps)
    int Nc = 2;  // control horizon (steps)
    Mat6 Q = Vec6(1, 1, 1, 0, 0, 0).asDiagonal();
    Mat6 Qt = Vec6(1, 1, 1, 0, 0, 0).asDiagonal();
    Mat3 R = 1e-2 * Mat3::Identity();
    double Ts = 0.1;             // control sampling time
    double Ts_hat = 0.01;        // propagation substep; Ts / Ts_hat must be integer
    Vec3 dv_min = Vec3::Constant(-0.1);
    Vec3 dv_max = Vec3::Constant(0.1);
    double chi_min = 0.0, chi_max = 0.0;
    ControlMode mode = ControlMode::FixedChi;
    double chi_ref = 0.0;  // FixedOrbit only
    int rk4_substeps = 1;  // RK4 steps per Ts_hat
    int max_iter = 200;
    double tol = 1e-8;     // projected-gradient infinity norm
    int multi_start = 8;   // chi grid size for cold starts

    void validate() const {
        if (Np < 1 || Nc < 1 || Nc > Np) throw ConfigError("NmpcConfig: need 1 <= Nc <= Np");
        if (!(Ts > 0.0 && Ts_hat > 0.0 && Ts_hat <= Ts))
            throw ConfigError("NmpcConfig: need 0 < Ts_hat <= Ts");
        const double ratio = Ts / Ts_hat;
        if (std::abs(ratio - std::lround(ratio)) > 1e-9)
            throw ConfigError("NmpcConfig: Ts/Ts_hat must be an integer");
        Eigen::SelfAdjointEigenSolver<Mat6> eq(0.5 * (Q + Q.transpose()));
        Eigen::SelfAdjointEigenSolver<Mat6> eqt(0.5 * (Qt + Qt.transpose()));
        if (eq.eigenvalues().minCoeff() < -1e-12 || eqt.eigenvalues().minCoeff() < -1e-12)
            throw ConfigError("NmpcConfig: Q and Qt must be positive semi-definite");
        Eigen::SelfAdjointEigenSolver<Mat3> er(0.5 * (R + R.transpose()));
        if (er.eigenvalues().minCoeff() <= 0.0)
            throw ConfigError("NmpcConfig: R must be positive definite");
        if (!(chi_min < chi_max)) throw ConfigError("NmpcConfig: need chi_min < chi_max");
        if ((dv_max - dv_min).minCoeff() < 0.0)
            throw ConfigError("NmpcConfig: need dv_min <= dv_max componentwise");
        if (mode == ControlMode::FixedOrbit && (chi_ref < chi_min || chi_ref > chi_max))
            throw ConfigError("NmpcConfig: chi_ref outside chi bounds");
        if (max_iter < 1 || multi_start < 1) throw ConfigError("NmpcConfig: bad iteration limits");
    }
    int n_substeps() const { return static_cast<int>(std::lround(Ts / Ts_hat)); }
    // Number of chi decision variables.
    int chi_vars() const {
        switch (mode) {
            case ControlMode::FixedChi: return 1;
            case ControlMode::VariableChi: return Np;
            case ControlMode::FixedOrbit: return 0;
        }
        return 0;
    }
};

struct HorizonSolution {
    std::vector<Vec3> dv_sequence;   // Nc impulses
    std::vector<double> chi;         // 1 (FixedChi), Np (VariableChi) or 1 = chi_ref (FixedOrbit)
    std::vector<double> nu_sequence; // Np+1 angles for steps k+1 .. k+Np+1
    double cost = std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
    double wall_ms = 0.0;
};

namespace detail {

// chi used by stage i (1-based; i = Np+1 is the terminal step).
inline double stage_chi(const std::vector<double>& chi, int i, int Np) {
    if (chi.size() == 1) return chi[0];
    return chi[std::min(i, Np) - 1];
}

// Impulse applied at step i: per-step inside the control horizon, the last
// control impulse re-applied at every later step (held-impulse convention).
inline const Vec3& applied_dv(const std::vector<Vec3>& dv, int i) {
    return dv[std::min<size_t>(i, dv.size()) - 1];
}

struct HorizonRollout {
    std::vector<StateVector> x;  // X_{k+1} .. X_{k+Np+1}
    std::vector<Stm> phi;        // per-step STM (post-impulse state to end of step)
    bool singular = false;
};

// One control step: impulse, then N_T coast substeps of Ts_hat; STM over the
// coast (the impulse enters additively, so dX_end/d dv = phi * [0; I]).
inline HorizonRollout rollout_horizon(const StateVector& x0, const std::vector<Vec3>& dv,
                                      const NmpcConfig& cfg, const SystemParams& p) {
    HorizonRollout out;
    const int n = cfg.Np + 1;
    out.x.reserve(n);
    out.phi.reserve(n);
    StateVector s = x0;
    const int nt = cfg.n_substeps();
    try {
        for (int i = 1; i <= n; ++i) {
            s.tail<3>() += applied_dv(dv, i);
            Stm phi = Stm::Identity();
            for (int j = 0; j < nt; ++j) {
                auto [sn, ph] = propagate_with_stm(s, cfg.Ts_hat, cfg.rk4_substeps, p);
                s = sn;
                phi = ph * phi;
            }
            out.x.push_back(s);
            out.phi.push_back(phi);
        }
    } catch (const SingularityError&) {
        out.singular = true;
    }
    return out;
}

}  // namespace detail

// Horizon cost: stage tracking + impulse penalty over the control
// horizon, held-impulse stages beyond it, and a terminal term one step past Np.
// Propagation singularities yield an infinite-cost sentinel.
inline double cost_eval(const StateVector& x0, const std::vector<Vec3>& dv_seq,
                        const std::vector<double>& chi, const std::vector<double>& nu_seq,
                        const MprModel& model, const NmpcConfig& cfg, const SystemParams& p) {
    if (static_cast<int>(dv_seq.size()) != cfg.Nc) throw ConfigError("cost_eval: dv_seq size != Nc");
    if (static_cast<int>(nu_seq.size()) != cfg.Np + 1)
        throw ConfigError("cost_eval: nu_seq size != Np + 1");
    if (chi.size() != 1 && static_cast<int>(chi.size()) != cfg.Np)
        throw ConfigError("cost_eval: chi must hold 1 or Np values");
    auto roll = detail::rollout_horizon(x0, dv_seq, cfg, p);
    if (roll.singular) return std::numeric_limits<double>::infinity();
    double J = 0.0;
    for (int i = 1; i <= cfg.Np + 1; ++i) {
        const Mat6& W = (i <= cfg.Np) ? cfg.Q : cfg.Qt;
        const Vec6 r =
            roll.x[i - 1] - eval_mpr(model, {detail::stage_chi(chi, i, cfg.Np), nu_seq[i - 1]});
        J += r.dot(W * r);
    }
    for (const auto& dv : dv_seq) J += dv.dot(cfg.R * dv);
    return J;
}

namespace detail {

// Cost plus analytic gradient over the stacked decision vector
// z = [dv (3 Nc); chi (cfg.chi_vars()); nu (Np+1)], via one backward adjoint
// pass over the per-step STMs.
inline double cost_and_grad(const StateVector& x0, const Eigen::VectorXd& z, const MprModel& model,
                            const NmpcConfig& cfg, const SystemParams& p, Eigen::VectorXd& grad) {
    const int nc = cfg.Nc, np = cfg.Np, m = cfg.chi_vars();
    std::vector<Vec3> dv(nc);
    for (int i = 0; i < nc; ++i) dv[i] = z.segment<3>(3 * i);
    std::vector<double> chi;
    if (m == 0)
        chi = {cfg.chi_ref};
    else
        for (int i = 0; i < m; ++i) chi.push_back(z[3 * nc + i]);
    const double* nu = z.data() + 3 * nc + m;

    grad = Eigen::VectorXd::Zero(z.size());
    auto roll = rollout_horizon(x0, dv, cfg, p);
    if (roll.singular) return std::numeric_limits<double>::infinity();

    double J = 0.0;
    for (const auto& d : dv) {
        J += d.dot(cfg.R * d);
    }
    for (int i = 0; i < nc; ++i) grad.segment<3>(3 * i) = 2.0 * cfg.R * dv[i];

    // Backward pass: lambda_i = dJ/dX_{k+i} accumulated from stage i upward.
    Vec6 lambda = Vec6::Zero();
    for (int i = np + 1; i >= 1; --i) {
        const Mat6& W = (i <= np) ? cfg.Q : cfg.Qt;
        const double ci = stage_chi(chi, i, np);
        const MprEval pe = eval_mpr_grad(model, {ci, nu[i - 1]});
        const Vec6 r = roll.x[i - 1] - pe.x;
        const Vec6 wr2 = 2.0 * (W * r);
        J += r.dot(W * r);
        grad[3 * nc + m + (i - 1)] = -pe.dnu.dot(wr2);
        if (m == 1)
            grad[3 * nc] -= pe.dchi.dot(wr2);
        else if (m > 1)
            grad[3 * nc + std::min(i, np) - 1] -= pe.dchi.dot(wr2);
        lambda += wr2;
        const Vec6 pre = roll.phi[i - 1].transpose() * lambda;  // dJ/d(post-impulse state at step i)
        grad.segment<3>(3 * (std::min(i, nc) - 1)) += pre.tail<3>();
        lambda = pre;  // becomes dJ/dX_{k+i-1} once stage i-1's residual is added
    }
    return J;
}

inline void project_box(Eigen::VectorXd& z, const NmpcConfig& cfg) {
    const int nc = cfg.Nc, m = cfg.chi_vars();
    for (int i = 0; i < nc; ++i)
        z.segment<3>(3 * i) =
            z.segment<3>(3 * i).cwiseMax(cfg.dv_min).cwiseMin(cfg.dv_max);
    for (int i = 0; i < m; ++i)
        z[3 * nc + i] = std::clamp(z[3 * nc + i], cfg.chi_min, cfg.chi_max);
    // nu is unconstrained during iteration (the cost is 2 pi periodic); the
    // [-pi, pi) range is enforced by wrapping on return.
}

struct BfgsResult {
    Eigen::VectorXd z;
    double cost = std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
};

// Cost without gradient work (line search helper).
inline double cost_eval_only(const StateVector& x0, const Eigen::VectorXd& z, const MprModel& model,
                             const NmpcConfig& cfg, const SystemParams& p) {
    const int nc = cfg.Nc, m = cfg.chi_vars();
    std::vector<Vec3> dv(nc);
    for (int i = 0; i < nc; ++i) dv[i] = z.segment<3>(3 * i);
    std::vector<double> chi;
    if (m == 0)
        chi = {cfg.chi_ref};
    else
        for (int i = 0; i < m; ++i) chi.push_back(z[3 * nc + i]);
    std::vector<double> nu(z.data() + 3 * nc + m, z.data() + z.size());
    return cost_eval(x0, dv, chi, nu, model, cfg, p);
}

// Projected BFGS with backtracking line search over the box-projected step.
inline BfgsResult projected_bfgs(const StateVector& x0, Eigen::VectorXd z, const MprModel& model,
                                 const NmpcConfig& cfg, const SystemParams& p) {
    project_box(z, cfg);
    const int n = static_cast<int>(z.size());
    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
    bool h_is_fresh = true;
    Eigen::VectorXd g(n);
    double f = cost_and_grad(x0, z, model, cfg, p, g);
    BfgsResult best{z, f, 0, false};
    if (!std::isfinite(f)) return best;
    for (int it = 1; it <= cfg.max_iter; ++it) {
        // Projected-gradient optimality measure.
        Eigen::VectorXd pg = z - g;
        project_box(pg, cfg);
        pg -= z;
        if (pg.lpNorm<Eigen::Infinity>() < cfg.tol) {
            best = {z, f, it, true};
            return best;
        }
        Eigen::VectorXd zn;
        double fn = std::numeric_limits<double>::infinity();
        bool accepted = false;
        for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
            Eigen::VectorXd dir = attempt == 0 ? Eigen::VectorXd(-H * g) : Eigen::VectorXd(-g);
            if (dir.dot(g) >= 0.0) continue;  // not a descent direction
            double alpha =
                attempt == 0 ? 1.0 : 1.0 / std::max(1.0, g.lpNorm<Eigen::Infinity>());
            for (int ls = 0; ls < 40; ++ls) {
                zn = z + alpha * dir;
                project_box(zn, cfg);
                const Eigen::VectorXd step = zn - z;
                if (step.lpNorm<Eigen::Infinity>() < 1e-16) break;
                fn = cost_eval_only(x0, zn, model, cfg, p);
                if (std::isfinite(fn) && fn <= f + 1e-4 * g.dot(step)) {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if (!accepted) {
            best.z = z;
            best.cost = f;
            best.iterations = it;
            return best;
        }
        Eigen::VectorXd gn(n);
        const double fcheck = cost_and_grad(x0, zn, model, cfg, p, gn);
        (void)fcheck;
        const Eigen::VectorXd s = zn - z;
        const Eigen::VectorXd y = gn - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (h_is_fresh) {
                // Scale the seed Hessian to the observed curvature before the
                // first update; an unscaled identity wrecks the line search
                // when the decision blocks live on very different scales.
                H *= sy / y.squaredNorm();
                h_is_fresh = false;
            }
            const Eigen::VectorXd Hy = H * y;
            const double yHy = y.dot(Hy);
            H += ((sy + yHy) / (sy * sy)) * (s * s.transpose()) -
                 (Hy * s.transpose() + s * Hy.transpose()) / sy;
        } else {
            H.setIdentity();
            h_is_fresh = true;
        }
        z = zn;
        f = fn;
        g = gn;
        best.z = z;
        best.cost = f;
        best.iterations = it;
    }
    return best;
}

inline HorizonSolution unpack_solution(const BfgsResult& r, const NmpcConfig& cfg) {
    HorizonSolution sol;
    const int nc = cfg.Nc, m = cfg.chi_vars();
    for (int i = 0; i < nc; ++i) sol.dv_sequence.push_back(r.z.segment<3>(3 * i));
    if (m == 0)
        sol.chi = {cfg.chi_ref};
    else
        for (int i = 0; i < m; ++i) sol.chi.push_back(r.z[3 * nc + i]);
    for (int i = 0; i <= cfg.Np; ++i) sol.nu_sequence.push_back(wrap_angle(r.z[3 * nc + m + i]));
    sol.cost = r.cost;
    sol.iterations = r.iterations;
    sol.converged = r.converged;
    return sol;
}

inline Eigen::VectorXd pack_decision(const std::vector<Vec3>& dv, const std::vector<double>& chi,
                                     const std::vector<double>& nu, const NmpcConfig& cfg) {
    const int m = cfg.chi_vars();
    Eigen::VectorXd z(3 * cfg.Nc + m + cfg.Np + 1);
    for (int i = 0; i < cfg.Nc; ++i) z.segment<3>(3 * i) = dv[i];
    for (int i = 0; i < m; ++i) z[3 * cfg.Nc + i] = chi.size() == 1 ? chi[0] : chi[i];
    for (int i = 0; i <= cfg.Np; ++i) z[3 * cfg.Nc + m + i] = nu[i];
    return z;
}

}  // namespace detail

// Solve the receding-horizon problem. Cold starts sweep a coarse chi grid to
// defeat local minima; a warm start (shifted previous solution) runs a single
// descent.
inline HorizonSolution solve_horizon(const StateVector& x0, const MprModel& model,
                                     const NmpcConfig& cfg, const SystemParams& p,
                                     const std::optional<HorizonSolution>& warm_start = {}) {
    cfg.validate();
    if (!x0.allFinite()) throw ConfigError("solve_horizon: non-finite state");
    // The chi box must live inside a single sub-manifold (the tracked orbit
    // never leaves the sub-manifold it started in).
    if (cfg.chi_min < model.chi_min() - 1e-12 || cfg.chi_max > model.chi_max() + 1e-12)
        throw ConfigError("solve_horizon: chi bounds outside the fitted family range");
    const auto& box_sub = model.select(0.5 * (cfg.chi_min + cfg.chi_max));
    if (cfg.chi_min < box_sub.chi_lo - 1e-12 || cfg.chi_max > box_sub.chi_hi + 1e-12)
        throw ConfigError("solve_horizon: chi bounds must lie within one sub-manifold");
    const auto t0 = std::chrono::steady_clock::now();
    const LibrationPoint L = libration_point(model.tag.point, p);
    const int m = cfg.chi_vars();

    detail::BfgsResult best;
    bool warm_tried = false;
    if (warm_start && static_cast<int>(warm_start->dv_sequence.size()) == cfg.Nc &&
        static_cast<int>(warm_start->nu_sequence.size()) == cfg.Np + 1) {
        best = detail::projected_bfgs(
            x0, detail::pack_decision(warm_start->dv_sequence, warm_start->chi,
                                      warm_start->nu_sequence, cfg),
            model, cfg, p);
        warm_tried = true;
    }
    // Cold start from scratch when no (usable) warm start was given, and also
    // as a rescue when the warm-started descent stalled: a poor warm start
    // otherwise re-seeds the next step and the degradation persists.
    if (!warm_tried || !best.converged) {
        // nu initialization: the geometric phase of a zero-impulse coast
        // through the horizon, unwrapped for continuity. This lands the nu
        // variables in the right basin even where the phase rate is far from
        // uniform; the surrogate's mean rate extends the sequence if the coast
        // hits a singularity.
        std::vector<double> nu;
        {
            const double rate0 =
                model.select(std::clamp(estimate_chi(model, x0, p), model.chi_min(), model.chi_max()))
                    .nu_rate;
            double prev = nu_of_state(x0, model.tag, L);
            StateVector s = x0;
            for (int i = 1; i <= cfg.Np + 1; ++i) {
                double ni;
                try {
                    s = step_with_impulse(s, Vec3::Zero(), cfg.Ts, cfg.Ts_hat, p,
                                          cfg.rk4_substeps);
                    ni = prev + wrap_angle(nu_of_state(s, model.tag, L) - prev);
                } catch (const SingularityError&) {
                    ni = prev + rate0 * cfg.Ts;
                }
                nu.push_back(ni);
                prev = ni;
            }
        }
        std::vector<double> chi_grid;
        if (m == 0) {
            chi_grid = {cfg.chi_ref};
        } else {
            for (int k = 0; k < cfg.multi_start; ++k)
                chi_grid.push_back(cfg.chi_min + (cfg.chi_max - cfg.chi_min) *
                                                     (cfg.multi_start == 1
                                                          ? 0.5
                                                          : double(k) / (cfg.multi_start - 1)));
        }
        for (double chi0 : chi_grid) {
            std::vector<Vec3> dv(cfg.Nc, Vec3::Zero());
            std::vector<double> chi(std::max(m, 1), chi0);
            auto r = detail::projected_bfgs(x0, detail::pack_decision(dv, chi, nu, cfg), model,
                                            cfg, p);
            if (r.cost < best.cost) best = r;
        }
    }
    HorizonSolution sol = detail::unpack_solution(best, cfg);
    sol.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return sol;
}

// Receding-horizon step: solve, apply the first impulse, and return a shifted
// warm start for the next call.
struct ControllerStep {
    Vec3 dv;
    HorizonSolution solution;   // as returned by the solver
    HorizonSolution warm_next;  // shift-by-one initialization for the next step
};

inline ControllerStep controller_step(const StateVector& x0_estimate, const MprModel& model,
                                      const NmpcConfig& cfg, const SystemParams& p,
                                      const std::optional<HorizonSolution>& warm_start = {}) {
    ControllerStep out;
    out.solution = solve_horizon(x0_estimate, model, cfg, p, warm_start);
    out.dv = out.solution.dv_sequence.front();
    out.warm_next = out.solution;
    auto& dv = out.warm_next.dv_sequence;
    dv.erase(dv.begin());
    dv.push_back(dv.empty() ? Vec3::Zero() : dv.back());
    auto& nu = out.warm_next.nu_sequence;
    // Extend the phase sequence by extrapolating the spacing the solver just
    // chose; the local rate beats the sub-manifold mean where the phase speed
    // is non-uniform.
    const int nn = static_cast<int>(nu.size());
    const double spacing = nn >= 2 ? wrap_angle(nu[nn - 1] - nu[nn - 2])
                                   : model.select(std::clamp(out.solution.chi.front(),
                                                             model.chi_min(), model.chi_max()))
                                             .nu_rate *
                                         cfg.Ts;
    nu.erase(nu.begin());
    nu.push_back(nu.back() + spacing);
    return out;
}

}  // namespace cislunar

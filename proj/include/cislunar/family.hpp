#pragma once

#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "cislunar/dynamics.hpp"

namespace cislunar {

enum class FamilyKind { Lyapunov, Halo, Nrho };
enum class Branch { North, South };

struct FamilyTag {
    FamilyKind kind = FamilyKind::Lyapunov;
    LibrationIndex point = LibrationIndex::L1;
    Branch branch = Branch::North;  // halo/NRHO only

    bool planar() const { return kind == FamilyKind::Lyapunov; }
    bool operator==(const FamilyTag&) const = default;
};

inline std::string to_string(const FamilyTag& t) {
    std::string s = t.point == LibrationIndex::L1 ? "l1-" : "l2-";
    switch (t.kind) {
        case FamilyKind::Lyapunov: return s + "lyapunov";
        case FamilyKind::Halo: s += "halo"; break;
        case FamilyKind::Nrho: s += "nrho"; break;
    }
    return s + (t.branch == Branch::North ? "-north" : "-south");
}

inline FamilyTag parse_family_tag(const std::string& s) {
    FamilyTag t;
    if (s.rfind("l1-", 0) == 0)
        t.point = LibrationIndex::L1;
    else if (s.rfind("l2-", 0) == 0)
        t.point = LibrationIndex::L2;
    else
        throw ConfigError("bad family tag '" + s + "': expected l1-/l2- prefix");
    std::string rest = s.substr(3);
    std::string branch;
    if (auto pos = rest.find('-'); pos != std::string::npos) {
        branch = rest.substr(pos + 1);
        rest = rest.substr(0, pos);
    }
    if (rest == "lyapunov")
        t.kind = FamilyKind::Lyapunov;
    else if (rest == "halo")
        t.kind = FamilyKind::Halo;
    else if (rest == "nrho")
        t.kind = FamilyKind::Nrho;
    else
        throw ConfigError("bad family tag '" + s + "': unknown kind '" + rest + "'");
    if (!branch.empty()) {
        if (branch == "north")
            t.branch = Branch::North;
        else if (branch == "south")
            t.branch = Branch::South;
        else
            throw ConfigError("bad family tag '" + s + "': unknown branch '" + branch + "'");
    }
    return t;
}

struct PeriodicOrbit {
    FamilyTag tag;
    StateVector x0 = StateVector::Zero();  // perpendicular xz-plane crossing
    double period = 0.0;
    double chi = 0.0;
};

struct FamilyCatalog {
    FamilyTag tag;
    double mu = 0.01215;
    double correction_tol = 1e-13;
    double closure_tol = 1e-10;
    std::string generated_at;
    std::vector<PeriodicOrbit> members;
};

// ---------------------------------------------------------------------------
// (chi, nu) parameterization geometry
// ---------------------------------------------------------------------------

// +1 if the Moon lies in the +x direction from the libration point.
inline double moon_direction(LibrationIndex idx) {
    return idx == LibrationIndex::L1 ? 1.0 : -1.0;
}

inline double branch_sign(const FamilyTag& t) { return t.branch == Branch::North ? 1.0 : -1.0; }

// Location angle nu in [-pi, pi). Lyapunov: planar angle of (position - L)
// from the X-direction pointing toward the Moon. Halo/NRHO: angle of the
// (y, z) projection of (position - L) from the branch's Z-direction.
inline double nu_of_state(const StateVector& s, const FamilyTag& tag, const LibrationPoint& L) {
    if (tag.planar()) {
        const double m = moon_direction(tag.point);
        const double dx = s[0] - L.position[0];
        const double dy = s[1];
        if (std::hypot(dx, dy) < 1e-14) throw ConfigError("nu undefined: state at libration point");
        return std::atan2(m * dy, m * dx);
    }
    const double zs = branch_sign(tag);
    const double dy = s[1], dz = s[2];
    if (std::hypot(dy, dz) < 1e-14) throw ConfigError("nu undefined: zero (y,z) projection");
    return std::atan2(dy, zs * dz);
}

inline double wrap_angle(double a) {
    a = std::fmod(a + M_PI, 2.0 * M_PI);
    if (a < 0.0) a += 2.0 * M_PI;
    return a - M_PI;
}

// ---------------------------------------------------------------------------
// Sampling and orbit-level measures
// ---------------------------------------------------------------------------

struct SamplePoint {
    double t;
    StateVector x;
};

// n states at uniformly spaced times in [0, period).
inline std::vector<SamplePoint> sample_orbit(const PeriodicOrbit& orbit, int n, const SystemParams& p,
                                             double base_step = 1e-3) {
    if (n < 2) throw ConfigError("sample_orbit: n must be >= 2");
    std::vector<SamplePoint> out;
    out.reserve(n);
    const double dt = orbit.period / n;
    StateVector s = orbit.x0;
    out.push_back({0.0, s});
    for (int i = 1; i < n; ++i) {
        s = propagate_adaptive(s, dt, base_step, p);
        out.push_back({i * dt, s});
    }
    return out;
}

inline double perilune_radius(const PeriodicOrbit& orbit, const SystemParams& p, int n = 1000) {
    double best = std::numeric_limits<double>::max();
    for (const auto& sp : sample_orbit(orbit, n, p))
        best = std::min(best, (sp.x.head<3>() - p.moon_pos()).norm());
    return best;
}

// chi of an orbit. Lyapunov: distance from the libration point to the orbit's
// Moon-side x-axis crossing (the nu = 0 point). Halo/NRHO: distance from the
// orbit's highest point (branch sense) to the libration point; the highest
// point is taken over a dense sampling.
inline double orbit_chi(const PeriodicOrbit& orbit, const SystemParams& p, int n = 1000) {
    const LibrationPoint L = libration_point(orbit.tag.point, p);
    if (orbit.tag.planar()) {
        const double m = moon_direction(orbit.tag.point);
        const StateVector half = propagate_adaptive(orbit.x0, 0.5 * orbit.period, 1e-3, p);
        const double c1 = orbit.x0[0] - L.position[0];
        const double c2 = half[0] - L.position[0];
        const double moonside = (m * c1 > m * c2) ? c1 : c2;
        return std::abs(moonside);
    }
    const double zs = branch_sign(orbit.tag);
    const auto samples = sample_orbit(orbit, n, p);
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (zs * samples[i].x[2] > zs * samples[best].x[2]) best = i;
    // Parabolic refinement of the highest point; the raw sample grid is too
    // coarse for strict chi ordering near the HO/NRHO fold.
    StateVector s = samples[best].x;
    double h = orbit.period / n;
    for (int pass = 0; pass < 3; ++pass) {
        const double zm = zs * propagate_adaptive(s, -h, 1e-3, p)[2];
        const double z0 = zs * s[2];
        const double zp = zs * propagate_adaptive(s, h, 1e-3, p)[2];
        const double denom = zm - 2.0 * z0 + zp;
        if (std::abs(denom) < 1e-300) break;
        double off = 0.5 * h * (zm - zp) / denom;
        off = std::clamp(off, -h, h);
        s = propagate_adaptive(s, off, 1e-3, p);
        h *= 0.1;
    }
    return (s.head<3>() - L.position).norm();
}

// ---------------------------------------------------------------------------
// Linearized seed
// ---------------------------------------------------------------------------

// Approximate periodic initial state from the CR3BP linearized about the
// libration point (planar center mode).
inline StateVector initial_guess(const FamilyTag& tag, double amplitude, const SystemParams& p) {
    if (!(amplitude >= 0.0 && amplitude < 0.1))
        throw ConfigError("initial_guess: amplitude outside validity range [0, 0.1)");
    const LibrationPoint L = libration_point(tag.point, p);
    StateVector s = StateVector::Zero();
    s[0] = L.position[0];
    if (amplitude == 0.0) return s;
    // c2 = (1-mu)/|xL+mu|^3 + mu/|xL-1+mu|^3
    const double xL = L.position[0];
    const double d1 = std::abs(xL + p.mu), d2 = std::abs(xL - 1.0 + p.mu);
    const double c2 = (1.0 - p.mu) / (d1 * d1 * d1) + p.mu / (d2 * d2 * d2);
    // In-plane oscillation frequency from the linearized characteristic equation.
    const double b = 2.0 - c2;
    const double disc = std::sqrt(b * b - 4.0 * (1.0 + 2.0 * c2) * (1.0 - c2));
    const double w = std::sqrt(0.5 * (2.0 - c2 + disc));
    const double kappa = (w * w + 1.0 + 2.0 * c2) / (2.0 * w);
    s[0] = xL + amplitude;
    s[4] = -amplitude * kappa * w;
    return s;
}

// Linearized period estimate, used to bound crossing searches.
inline double linear_period_estimate(const FamilyTag& tag, const SystemParams& p) {
    const LibrationPoint L = libration_point(tag.point, p);
    const double xL = L.position[0];
    const double d1 = std::abs(xL + p.mu), d2 = std::abs(xL - 1.0 + p.mu);
    const double c2 = (1.0 - p.mu) / (d1 * d1 * d1) + p.mu / (d2 * d2 * d2);
    const double b = 2.0 - c2;
    const double disc = std::sqrt(b * b - 4.0 * (1.0 + 2.0 * c2) * (1.0 - c2));
    const double w = std::sqrt(0.5 * (2.0 - c2 + disc));
    return 2.0 * M_PI / w;
}

// ---------------------------------------------------------------------------
// xz-plane crossing location
// ---------------------------------------------------------------------------

struct Crossing {
    double t = 0.0;
    StateVector x = StateVector::Zero();
    Stm phi = Stm::Identity();
};

// First return to y = 0 starting from a state on the plane, with STM.
inline Crossing find_crossing(const StateVector& x0, const SystemParams& p, double base_step,
                              double t_max) {
    detail::StateAndStm s{x0, Stm::Identity()};
    double t = 0.0;
    detail::StateAndStm prev = s;
    double t_prev = 0.0;
    bool bracketed = false;
    while (t < t_max) {
        const double h = base_step * step_scale(s.x, p);
        prev = s;
        t_prev = t;
        s = detail::rk4_step_stm(s, h, p);
        t += h;
        if (t_prev > 0.0 && prev.x[1] != 0.0 && prev.x[1] * s.x[1] < 0.0) {
            bracketed = true;
            break;
        }
    }
    if (!bracketed) throw ConvergenceError("find_crossing: no y = 0 crossing before t_max");
    // Bisection on tau within [0, h] from prev, then Newton polish on the time.
    double lo = 0.0, hi = t - t_prev;
    double ylo = prev.x[1];
    for (int i = 0; i < 80 && (hi - lo) > 1e-15; ++i) {
        const double mid = 0.5 * (lo + hi);
        const double ym = propagate(prev.x, mid, 2, p)[1];
        if (ym == 0.0) {
            lo = hi = mid;
            break;
        }
        if (ym * ylo < 0.0)
            hi = mid;
        else {
            lo = mid;
            ylo = ym;
        }
    }
    double tau = 0.5 * (lo + hi);
    for (int i = 0; i < 4; ++i) {
        const StateVector xc = propagate(prev.x, tau, 2, p);
        if (std::abs(xc[4]) < 1e-14) break;
        const double dtau = -xc[1] / xc[4];
        tau += dtau;
        if (std::abs(dtau) < 1e-16) break;
    }
    Crossing c;
    c.t = t_prev + tau;
    auto [xf, phif] = propagate_with_stm(prev.x, tau, 4, p);
    c.x = xf;
    c.phi = phif * prev.phi;
    return c;
}

// ---------------------------------------------------------------------------
// Differential correction (single shooting, mirror-symmetry targeting)
// ---------------------------------------------------------------------------

struct CorrectionOptions {
    double tol = 1e-13;        // on (vx, vz) at the crossing
    int max_iter = 50;
    double base_step = 1e-3;
    bool fix_x0 = false;       // 3-D: free (z0, vy0) instead of (x0, vy0)
};

// Refine a near-periodic perpendicular-crossing state into a periodic orbit.
// Planar: Newton on vy0 driving vx to zero at the next crossing. 3-D: Newton
// on (x0, vy0) (or (z0, vy0)) driving (vx, vz) to zero. Period is twice the
// crossing time.
inline PeriodicOrbit differential_correction(StateVector guess, const FamilyTag& tag,
                                             const SystemParams& p, const CorrectionOptions& opt = {}) {
    guess[1] = 0.0;
    guess[3] = 0.0;
    guess[5] = 0.0;
    if (tag.planar()) {
        guess[2] = 0.0;
    }
    const double t_max = 2.0 * linear_period_estimate(tag, p) * 4.0;
    Crossing c;
    for (int it = 0; it <= opt.max_iter; ++it) {
        c = find_crossing(guess, p, opt.base_step, t_max);
        const Vec6 fc = eom(c.x, p);
        const double vy = c.x[4];
        if (std::abs(vy) < 1e-10) throw ConvergenceError("differential_correction: tangential crossing");
        auto reduced = [&](int row, int col) {
            return c.phi(row, col) - fc[row] / vy * c.phi(1, col);
        };
        if (tag.planar()) {
            const double r = c.x[3];
            if (std::abs(r) < opt.tol) break;
            if (it == opt.max_iter)
                throw ConvergenceError("differential_correction: planar Newton did not converge");
            const double d = reduced(3, 4);
            guess[4] -= r / d;
        } else {
            const Eigen::Vector2d r(c.x[3], c.x[5]);
            if (r.cwiseAbs().maxCoeff() < opt.tol) break;
            if (it == opt.max_iter)
                throw ConvergenceError("differential_correction: 3-D Newton did not converge");
            const int pcol = opt.fix_x0 ? 2 : 0;  // free z0 or x0
            Eigen::Matrix2d J;
            J << reduced(3, pcol), reduced(3, 4), reduced(5, pcol), reduced(5, 4);
            const Eigen::Vector2d du = J.colPivHouseholderQr().solve(r);
            guess[pcol] -= du[0];
            guess[4] -= du[1];
        }
    }
    PeriodicOrbit orbit;
    orbit.tag = tag;
    orbit.x0 = guess;
    orbit.period = 2.0 * c.t;
    orbit.chi = orbit_chi(orbit, p);
    return orbit;
}

inline double closure_residual(const PeriodicOrbit& orbit, const SystemParams& p,
                               double base_step = 1e-4) {
    const StateVector xT = propagate_adaptive(orbit.x0, orbit.period, base_step, p);
    return (xT - orbit.x0).cwiseAbs().maxCoeff();
}

// Gauss-Newton on the full-period closure residual X(T) - X(0) over
// (x0[, z0], vy0, T), keeping y0 = vx0 = vz0 = 0. Unlike the half-period
// symmetric targeting this also removes the closure components amplified by
// the monodromy matrix, which matters for the strongly unstable members.
inline PeriodicOrbit polish_closure(PeriodicOrbit orbit, const SystemParams& p,
                                    double base_step = 1e-4, int max_iter = 6,
                                    double tol = 1e-12, double* out_residual = nullptr) {
    const bool planar = orbit.tag.planar();
    const int cols3[3] = {0, 2, 4};
    const int cols2[2] = {0, 4};
    const int* cols = planar ? cols2 : cols3;
    const int nc = planar ? 2 : 3;
    auto residual = [&](const PeriodicOrbit& o) {
        return (propagate_adaptive(o.x0, o.period, base_step, p) - o.x0).eval();
    };
    double best = residual(orbit).cwiseAbs().maxCoeff();
    if (out_residual) *out_residual = best;
    for (int it = 0; it < max_iter && best >= tol; ++it) {
        auto [xT, phi] = propagate_adaptive_with_stm(orbit.x0, orbit.period, base_step, p);
        const Vec6 r = xT - orbit.x0;
        Eigen::MatrixXd J(6, nc + 1);
        for (int j = 0; j < nc; ++j) {
            J.col(j) = phi.col(cols[j]);
            J(cols[j], j) -= 1.0;
        }
        J.col(nc) = eom(xT, p);
        // Thresholded SVD keeps the step off the near-null family/phase
        // directions of the monodromy matrix.
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(J, Eigen::ComputeThinU | Eigen::ComputeThinV);
        svd.setThreshold(1e-9);
        Eigen::VectorXd du = svd.solve((-r).eval());
        if (!du.allFinite()) break;
        if (du.norm() > 1e-3) du *= 1e-3 / du.norm();
        bool improved = false;
        for (int bt = 0; bt < 5; ++bt) {
            PeriodicOrbit trial = orbit;
            for (int j = 0; j < nc; ++j) trial.x0[cols[j]] += du[j];
            trial.period += du[nc];
            if (trial.period > 0.0) {
                const double rn = residual(trial).cwiseAbs().maxCoeff();
                if (rn < best) {
                    orbit = trial;
                    best = rn;
                    improved = true;
                    break;
                }
            }
            du *= 0.5;
        }
        if (!improved) break;
    }
    if (out_residual) *out_residual = best;
    return orbit;
}

// ---------------------------------------------------------------------------
// Pseudo-arclength continuation
// ---------------------------------------------------------------------------

struct PacOptions {
    double step = 5e-3;
    double min_step_factor = 1.0 / 64.0;
    double max_step = 0.05;
    int max_newton = 15;
    double tol = 1e-12;
    double base_step = 1e-3;
    double polish_step = 1e-4;  // corrector step for the post-acceptance polish
    int sample_n = 1000;
    double closure_tol = 1e-10;  // reject members whose polished closure exceeds this
    // Strict chi ordering along the catalog. Disabled when continuing through
    // the HO/NRHO fold, where chi reverses direction.
    bool enforce_chi_monotone = true;
    // Optional early-stop predicate evaluated on each accepted member.
    std::function<bool(const PeriodicOrbit&)> stop_when;
};

namespace detail {

// Reduced unknown vector for half-period shooting: planar (x0, vy0, T/2),
// 3-D (x0, z0, vy0, T/2).
inline Eigen::VectorXd pack_unknowns(const PeriodicOrbit& o) {
    if (o.tag.planar()) {
        Eigen::VectorXd u(3);
        u << o.x0[0], o.x0[4], 0.5 * o.period;
        return u;
    }
    Eigen::VectorXd u(4);
    u << o.x0[0], o.x0[2], o.x0[4], 0.5 * o.period;
    return u;
}

inline StateVector unpack_state(const Eigen::VectorXd& u, bool planar) {
    StateVector s = StateVector::Zero();
    if (planar) {
        s[0] = u[0];
        s[4] = u[1];
    } else {
        s[0] = u[0];
        s[2] = u[1];
        s[4] = u[2];
    }
    return s;
}

// Residual F(u) = (y, vx[, vz]) at T/2 and its Jacobian.
inline void shooting_system(const Eigen::VectorXd& u, bool planar, const SystemParams& p,
                            double base_step, Eigen::VectorXd& F, Eigen::MatrixXd& J) {
    const StateVector s0 = unpack_state(u, planar);
    const double T2 = u[u.size() - 1];
    auto [xf, phi] = propagate_adaptive_with_stm(s0, T2, base_step, p);
    const Vec6 fc = eom(xf, p);
    const int nr = planar ? 2 : 3;
    F.resize(nr);
    J.resize(nr, u.size());
    const int rows2[2] = {1, 3};
    const int rows3[3] = {1, 3, 5};
    const int* rows = planar ? rows2 : rows3;
    const int cols2[2] = {0, 4};
    const int cols3[3] = {0, 2, 4};
    const int* cols = planar ? cols2 : cols3;
    for (int i = 0; i < nr; ++i) {
        F[i] = xf[rows[i]];
        for (int j = 0; j < static_cast<int>(u.size()) - 1; ++j) J(i, j) = phi(rows[i], cols[j]);
        J(i, u.size() - 1) = fc[rows[i]];
    }
}

}  // namespace detail

// Continue a corrected seed along its family; produces up to `count` members
// (including the seed) ordered by strictly increasing chi.
inline FamilyCatalog pac_continue(const PeriodicOrbit& seed, double step, int count,
                                  const SystemParams& p, const PacOptions& opt_in = {}) {
    PacOptions opt = opt_in;
    opt.step = step;
    const bool planar = seed.tag.planar();
    FamilyCatalog cat;
    cat.tag = seed.tag;
    cat.mu = p.mu;
    cat.correction_tol = opt.tol;
    PeriodicOrbit seed_p = polish_closure(seed, p, opt.polish_step);
    seed_p.chi = orbit_chi(seed_p, p, opt.sample_n);
    cat.members.push_back(seed_p);
    if (count <= 1) return cat;

    Eigen::VectorXd u = detail::pack_unknowns(seed_p);
    const int n = static_cast<int>(u.size());
    Eigen::VectorXd F;
    Eigen::MatrixXd J;
    detail::shooting_system(u, planar, p, opt.base_step, F, J);

    // Initial tangent: null vector of the shooting Jacobian, oriented to grow
    // the family amplitude (x away from the libration point for planar, z in
    // the branch sense otherwise).
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(J, Eigen::ComputeFullV);
    Eigen::VectorXd tangent = svd.matrixV().col(n - 1);
    double orient;
    if (planar) {
        const LibrationPoint L = libration_point(seed.tag.point, p);
        orient = tangent[0] * (seed.x0[0] - L.position[0]);
    } else {
        orient = tangent[1] * branch_sign(seed.tag);
        if (std::abs(tangent[1]) < 1e-12) orient = tangent[0];  // near-planar fallback
    }
    if (orient < 0.0) tangent = -tangent;

    double ds = opt.step;
    int easy_streak = 0;
    while (static_cast<int>(cat.members.size()) < count) {
        bool accepted = false;
        while (!accepted) {
            Eigen::VectorXd v = u + ds * tangent;  // predictor
            bool converged = false;
            int iters = 0;
            for (; iters < opt.max_newton; ++iters) {
                detail::shooting_system(v, planar, p, opt.base_step, F, J);
                Eigen::VectorXd rhs(n);
                rhs.head(F.size()) = F;
                rhs[n - 1] = tangent.dot(v - u) - ds;
                if (rhs.cwiseAbs().maxCoeff() < opt.tol) {
                    converged = true;
                    break;
                }
                Eigen::MatrixXd A(n, n);
                A.topRows(F.size()) = J;
                A.row(n - 1) = tangent.transpose();
                const Eigen::VectorXd dv = A.colPivHouseholderQr().solve(rhs);
                v -= dv;
                if (!dv.allFinite() || dv.norm() > 1.0) break;
            }
            if (converged) {
                PeriodicOrbit m;
                m.tag = seed.tag;
                m.x0 = detail::unpack_state(v, planar);
                m.period = 2.0 * v[n - 1];
                // Polish at the verification step size so closure holds there.
                try {
                    double res = 0.0;
                    m = polish_closure(m, p, opt.polish_step, 6, 1e-12, &res);
                    if (res > opt.closure_tol) converged = false;
                    v = detail::pack_unknowns(m);
                } catch (const ConvergenceError&) {
                    converged = false;
                }
                if (converged) m.chi = orbit_chi(m, p, opt.sample_n);
                if (std::getenv("CISLUNAR_PAC_DEBUG") && converged)
                    std::fprintf(stderr,
                                 "pac: cand chi=%.6f prev=%.6f T=%.4f x0=%.5f z0=%.5f iters=%d\n",
                                 m.chi, cat.members.back().chi, m.period, m.x0[0], m.x0[2], iters);
                const bool chi_ok = !opt.enforce_chi_monotone || m.chi > cat.members.back().chi;
                if (!converged || m.period <= 0.0 || !chi_ok ||
                    (v - u).norm() < 1e-13) {
                    // fold, duplicate, or non-monotone chi: shrink and retry
                    converged = false;
                } else {
                    // new tangent, oriented for continuity
                    Eigen::MatrixXd A(n, n);
                    detail::shooting_system(v, planar, p, opt.base_step, F, J);
                    A.topRows(F.size()) = J;
                    A.row(n - 1) = tangent.transpose();
                    Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
                    e[n - 1] = 1.0;
                    Eigen::VectorXd tnew = A.colPivHouseholderQr().solve(e);
                    tnew.normalize();
                    if (tnew.dot(tangent) < 0.0) tnew = -tnew;
                    tangent = tnew;
                    u = v;
                    cat.members.push_back(m);
                    accepted = true;
                    if (opt.stop_when && opt.stop_when(m)) return cat;
                    if (iters <= 3) {
                        if (++easy_streak >= 3) {
                            ds = std::min(2.0 * ds, opt.max_step);
                            easy_streak = 0;
                        }
                    } else {
                        easy_streak = 0;
                    }
                }
            }
            if (!accepted) {
                easy_streak = 0;
                ds *= 0.5;
                if (std::getenv("CISLUNAR_PAC_DEBUG"))
                    std::fprintf(stderr, "pac: member %zu rejected, ds -> %.3e\n",
                                 cat.members.size(), ds);
                if (ds < opt.step * opt.min_step_factor) return cat;  // partial catalog
            }
        }
    }
    return cat;
}

// ---------------------------------------------------------------------------
// Catalog JSON round trip
// ---------------------------------------------------------------------------

inline nlohmann::json catalog_to_json(const FamilyCatalog& cat) {
    nlohmann::json j;
    j["mu"] = cat.mu;
    j["tag"] = to_string(cat.tag);
    j["tolerances"] = {{"correction", cat.correction_tol}, {"closure", cat.closure_tol}};
    j["generated_at"] = cat.generated_at;
    nlohmann::json members = nlohmann::json::array();
    for (const auto& m : cat.members) {
        nlohmann::json e;
        e["x0"] = {m.x0[0], m.x0[1], m.x0[2], m.x0[3], m.x0[4], m.x0[5]};
        e["period"] = m.period;
        e["chi"] = m.chi;
        members.push_back(e);
    }
    j["members"] = std::move(members);
    return j;
}

inline FamilyCatalog catalog_from_json(const nlohmann::json& j) {
    FamilyCatalog cat;
    cat.mu = j.at("mu").get<double>();
    cat.tag = parse_family_tag(j.at("tag").get<std::string>());
    cat.correction_tol = j.at("tolerances").at("correction").get<double>();
    cat.closure_tol = j.at("tolerances").at("closure").get<double>();
    cat.generated_at = j.value("generated_at", "");
    for (const auto& e : j.at("members")) {
        PeriodicOrbit m;
        m.tag = cat.tag;
        for (int i = 0; i < 6; ++i) m.x0[i] = e.at("x0").at(i).get<double>();
        m.period = e.at("period").get<double>();
        m.chi = e.at("chi").get<double>();
        cat.members.push_back(m);
    }
    return cat;
}

// ---------------------------------------------------------------------------
// Family generation front end
// ---------------------------------------------------------------------------

struct GenerateOptions {
    double seed_amplitude = 0.01;
    double pac_step = 5e-3;
    double halo_seed_z = 0.02;
    double nrho_perilune = 0.03;   // perilune radius below which a halo member is an NRHO
    double halo_min_aspect = 0.5;  // minimum z amplitude relative to y amplitude for halo members
    // Lyapunov members closer to the Moon than this are excluded: near the
    // family's end the orbits whip past the Moon and chi crowds toward a fold,
    // which poisons downstream surrogate fits.
    double lyapunov_min_perilune = 0.035;
    double lyapunov_max_step = 8e-3;  // keeps the catalog dense enough to fit high chi orders
    PacOptions pac;
    CorrectionOptions corr;
};

namespace detail {

// Walk the Lyapunov family and return the first member from which a fixed-z
// out-of-plane correction converges to a genuine 3-D orbit.
inline PeriodicOrbit find_halo_seed(const FamilyTag& halo_tag, const SystemParams& p,
                                    const GenerateOptions& opt) {
    FamilyTag lyap_tag{FamilyKind::Lyapunov, halo_tag.point, Branch::North};
    PeriodicOrbit lo = differential_correction(initial_guess(lyap_tag, opt.seed_amplitude, p),
                                               lyap_tag, p, opt.corr);
    FamilyCatalog lyap = pac_continue(lo, opt.pac_step, 120, p, opt.pac);
    const double zs = branch_sign(halo_tag);
    for (size_t i = 4; i < lyap.members.size(); i += 3) {
        StateVector g = lyap.members[i].x0;
        g[2] = zs * opt.halo_seed_z;
        CorrectionOptions c = opt.corr;
        c.max_iter = 12;
        try {
            FamilyTag t = halo_tag;
            t.kind = FamilyKind::Halo;
            PeriodicOrbit h = differential_correction(g, t, p, c);
            if (std::abs(h.x0[2]) > 0.5 * opt.halo_seed_z && closure_residual(h, p) < 1e-9) return h;
        } catch (const ConvergenceError&) {
            continue;
        }
    }
    throw ConvergenceError("find_halo_seed: no halo bifurcation found along the Lyapunov family");
}

}  // namespace detail

// Generate `count` members of the requested family. Halo/NRHO share one
// continuation branch split by the perilune threshold.
inline FamilyCatalog generate_family(const FamilyTag& tag, int count, const SystemParams& p,
                                     const GenerateOptions& opt = {}) {
    if (tag.kind == FamilyKind::Lyapunov) {
        PeriodicOrbit seed = differential_correction(initial_guess(tag, opt.seed_amplitude, p), tag,
                                                     p, opt.corr);
        PacOptions pac = opt.pac;
        pac.max_step = std::min(pac.max_step, opt.lyapunov_max_step);
        const auto user_stop = pac.stop_when;
        pac.stop_when = [&p, &opt, user_stop](const PeriodicOrbit& m) {
            if (user_stop && user_stop(m)) return true;
            return perilune_radius(m, p, 400) < opt.lyapunov_min_perilune;
        };
        return pac_continue(seed, opt.pac_step, count, p, pac);
    }
    FamilyTag halo_tag = tag;
    halo_tag.kind = FamilyKind::Halo;
    PeriodicOrbit seed = detail::find_halo_seed(halo_tag, p, opt);
    // Continue one branch through the chi fold at the HO/NRHO transition,
    // stopping once enough members of the requested kind have appeared.
    PacOptions pac = opt.pac;
    pac.enforce_chi_monotone = false;
    pac.max_step = 6e-3;
    int matched = 0;
    // Halo requests run long so that the near-planar members trimmed below do
    // not eat into the requested count.
    const int target = tag.kind == FamilyKind::Halo ? count + 25 : count;
    pac.stop_when = [&](const PeriodicOrbit& m) {
        const bool is_nrho = perilune_radius(m, p) < opt.nrho_perilune;
        if (tag.kind == FamilyKind::Halo && is_nrho) return true;  // past the whole HO range
        if (is_nrho == (tag.kind == FamilyKind::Nrho)) ++matched;
        return matched >= target;
    };
    const int budget = count * 8 + 400;
    FamilyCatalog branch = pac_continue(seed, 2e-3, budget, p, pac);

    // Split by perilune, then keep the longest strictly monotone chi run and
    // normalize to increasing order.
    std::vector<PeriodicOrbit> picked;
    for (auto& m : branch.members) {
        const bool is_nrho = perilune_radius(m, p) < opt.nrho_perilune;
        if (is_nrho == (tag.kind == FamilyKind::Nrho)) {
            m.tag = tag;
            picked.push_back(m);
        }
    }
    FamilyCatalog cat;
    cat.tag = tag;
    cat.mu = p.mu;
    cat.correction_tol = pac.tol;
    if (picked.empty()) return cat;
    size_t best_lo = 0, best_len = 1, start = 0;
    int dir = 0;
    auto consider = [&](size_t s, size_t e) {
        if (e - s > best_len) {
            best_len = e - s;
            best_lo = s;
        }
    };
    for (size_t i = 1; i < picked.size(); ++i) {
        const double d = picked[i].chi - picked[i - 1].chi;
        const int sg = d > 0.0 ? 1 : (d < 0.0 ? -1 : 0);
        if (sg == 0) {
            consider(start, i);
            start = i;
            dir = 0;
        } else if (dir == 0) {
            dir = sg;
        } else if (sg != dir) {
            consider(start, i);
            start = i - 1;
            dir = sg;
        }
    }
    consider(start, picked.size());
    cat.members.assign(picked.begin() + best_lo, picked.begin() + best_lo + best_len);
    if (cat.members.size() > 1 && cat.members.front().chi > cat.members.back().chi)
        std::reverse(cat.members.begin(), cat.members.end());
    if (tag.kind == FamilyKind::Halo) {
        // Drop the nearly planar members just past the bifurcation: their
        // flattened (y, z) projections have slowly decaying angular harmonics
        // that degrade downstream surrogate fits.
        auto flat = [&](const PeriodicOrbit& o) {
            double ymax = 0.0, zmax = 0.0;
            for (const auto& s : sample_orbit(o, 200, p)) {
                ymax = std::max(ymax, std::abs(s.x[1]));
                zmax = std::max(zmax, std::abs(s.x[2]));
            }
            return zmax < opt.halo_min_aspect * ymax;
        };
        while (!cat.members.empty() && flat(cat.members.front()))
            cat.members.erase(cat.members.begin());
    }
    if (cat.members.size() > static_cast<size_t>(count)) cat.members.resize(count);
    return cat;
}

}  // namespace cislunar

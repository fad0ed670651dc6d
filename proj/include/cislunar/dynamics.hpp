#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace cislunar {

using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;

// Dimensionless rotating-frame state: (x, y, z, vx, vy, vz).
using StateVector = Vec6;
// 6x6 state transition matrix dX(t)/dX(0).
using Stm = Mat6;

struct SingularityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConvergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Canonical Earth-Moon units.
inline constexpr double kLengthUnitKm = 384400.0;
inline constexpr double kTimeUnitSec = 375190.0;
// Dimensionless velocity -> m/s.
inline constexpr double kVelUnitMps = kLengthUnitKm * 1000.0 / kTimeUnitSec;

struct SystemParams {
    double mu = 0.01215;  // dimensionless Moon mass ratio

    void validate() const {
        if (!(mu > 0.0 && mu < 0.5))
            throw ConfigError("SystemParams: mu must be in (0, 0.5), got " + std::to_string(mu));
    }
    Vec3 earth_pos() const { return Vec3(-mu, 0.0, 0.0); }
    Vec3 moon_pos() const { return Vec3(1.0 - mu, 0.0, 0.0); }
};

inline constexpr double kSingularityRadius = 1e-9;

enum class LibrationIndex { L1, L2 };

struct LibrationPoint {
    LibrationIndex index;
    Vec3 position;  // y = z = 0
};

namespace detail {

inline void check_finite(const StateVector& s) {
    for (int i = 0; i < 6; ++i)
        if (!std::isfinite(s[i])) throw SingularityError("non-finite state component");
}

}  // namespace detail

// Right-hand side of the dimensionless CR3BP equations of motion.
inline Vec6 eom(const StateVector& s, const SystemParams& p) {
    detail::check_finite(s);
    const double mu = p.mu;
    const double x = s[0], y = s[1], z = s[2];
    const double vx = s[3], vy = s[4], vz = s[5];
    const double dx1 = x + mu, dx2 = x - (1.0 - mu);
    const double r1 = std::sqrt(dx1 * dx1 + y * y + z * z);
    const double r2 = std::sqrt(dx2 * dx2 + y * y + z * z);
    if (r1 < kSingularityRadius || r2 < kSingularityRadius)
        throw SingularityError("state within singularity guard radius of a primary");
    const double r13 = r1 * r1 * r1;
    const double r23 = r2 * r2 * r2;
    const double c1 = (1.0 - mu) / r13;
    const double c2 = mu / r23;
    Vec6 d;
    d[0] = vx;
    d[1] = vy;
    d[2] = vz;
    d[3] = 2.0 * vy + x - c1 * dx1 - c2 * dx2;
    d[4] = -2.0 * vx + y - c1 * y - c2 * y;
    d[5] = -c1 * z - c2 * z;
    return d;
}

// Jacobian A = d(eom)/d(state), used by the variational equations and the EKF.
inline Mat6 eom_jacobian(const StateVector& s, const SystemParams& p) {
    const double mu = p.mu;
    const Vec3 pos = s.head<3>();
    const Vec3 d1 = pos - p.earth_pos();
    const Vec3 d2 = pos - p.moon_pos();
    const double r1 = d1.norm(), r2 = d2.norm();
    if (r1 < kSingularityRadius || r2 < kSingularityRadius)
        throw SingularityError("state within singularity guard radius of a primary");
    const double r13 = r1 * r1 * r1, r15 = r13 * r1 * r1;
    const double r23 = r2 * r2 * r2, r25 = r23 * r2 * r2;
    Mat3 G = Mat3::Zero();
    G(0, 0) = 1.0;
    G(1, 1) = 1.0;
    G -= (1.0 - mu) * (Mat3::Identity() / r13 - 3.0 * d1 * d1.transpose() / r15);
    G -= mu * (Mat3::Identity() / r23 - 3.0 * d2 * d2.transpose() / r25);
    Mat6 A = Mat6::Zero();
    A.block<3, 3>(0, 3) = Mat3::Identity();
    A.block<3, 3>(3, 0) = G;
    A(3, 4) = 2.0;
    A(4, 3) = -2.0;
    return A;
}

// Jacobi integral C = (x^2 + y^2) + 2(1-mu)/r1 + 2 mu/r2 - v^2.
inline double jacobi_constant(const StateVector& s, const SystemParams& p) {
    detail::check_finite(s);
    const Vec3 pos = s.head<3>();
    const double r1 = (pos - p.earth_pos()).norm();
    const double r2 = (pos - p.moon_pos()).norm();
    if (r1 < kSingularityRadius || r2 < kSingularityRadius)
        throw SingularityError("state within singularity guard radius of a primary");
    const double x = s[0], y = s[1];
    return x * x + y * y + 2.0 * (1.0 - p.mu) / r1 + 2.0 * p.mu / r2 - s.tail<3>().squaredNorm();
}

inline LibrationPoint libration_point(LibrationIndex idx, const SystemParams& p) {
    p.validate();
    const double mu = p.mu;
    auto residual = [mu](double x) {
        const double d1 = x + mu;
        const double d2 = x - (1.0 - mu);
        const double a1 = std::abs(d1);
        const double a2 = std::abs(d2);
        return x - (1.0 - mu) * d1 / (a1 * a1 * a1) - mu * d2 / (a2 * a2 * a2);
    };
    double lo, hi;
    if (idx == LibrationIndex::L1) {
        lo = 1e-6;
        hi = 1.0 - mu - 1e-9;
    } else {
        lo = 1.0 - mu + 1e-9;
        hi = 2.0;
    }
    double flo = residual(lo);
    if (residual(hi) * flo > 0.0) throw ConvergenceError("libration_point: bracket does not straddle root");
    // Bisect to interval width below 1e-14.
    for (int i = 0; i < 200 && (hi - lo) > 1e-15; ++i) {
        const double mid = 0.5 * (lo + hi);
        const double fm = residual(mid);
        if (fm == 0.0) {
            lo = hi = mid;
            break;
        }
        if (fm * flo < 0.0) {
            hi = mid;
        } else {
            lo = mid;
            flo = fm;
        }
    }
    LibrationPoint L;
    L.index = idx;
    L.position = Vec3(0.5 * (lo + hi), 0.0, 0.0);
    return L;
}

// One classical RK4 step of width h.
inline StateVector rk4_step(const StateVector& s, double h, const SystemParams& p) {
    const Vec6 k1 = eom(s, p);
    const Vec6 k2 = eom(s + 0.5 * h * k1, p);
    const Vec6 k3 = eom(s + 0.5 * h * k2, p);
    const Vec6 k4 = eom(s + h * k3, p);
    return s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Fixed-step RK4 over dt split into `substeps` equal steps.
inline StateVector propagate(const StateVector& s0, double dt, int substeps, const SystemParams& p) {
    if (substeps < 1) throw ConfigError("propagate: substeps must be >= 1");
    if (!std::isfinite(dt)) throw ConfigError("propagate: dt must be finite");
    if (dt == 0.0) return s0;
    const double h = dt / substeps;
    StateVector s = s0;
    for (int i = 0; i < substeps; ++i) s = rk4_step(s, h, p);
    return s;
}

namespace detail {

struct StateAndStm {
    StateVector x;
    Stm phi;
};

inline StateAndStm variational_rhs(const StateAndStm& s, const SystemParams& p) {
    StateAndStm d;
    d.x = eom(s.x, p);
    d.phi = eom_jacobian(s.x, p) * s.phi;
    return d;
}

inline StateAndStm rk4_step_stm(const StateAndStm& s, double h, const SystemParams& p) {
    auto add = [](const StateAndStm& a, double c, const StateAndStm& b) {
        return StateAndStm{a.x + c * b.x, a.phi + c * b.phi};
    };
    const StateAndStm k1 = variational_rhs(s, p);
    const StateAndStm k2 = variational_rhs(add(s, 0.5 * h, k1), p);
    const StateAndStm k3 = variational_rhs(add(s, 0.5 * h, k2), p);
    const StateAndStm k4 = variational_rhs(add(s, h, k3), p);
    StateAndStm out;
    out.x = s.x + (h / 6.0) * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x);
    out.phi = s.phi + (h / 6.0) * (k1.phi + 2.0 * k2.phi + 2.0 * k3.phi + k4.phi);
    return out;
}

}  // namespace detail

// Propagate state and STM (variational equations integrated alongside the flow).
inline std::pair<StateVector, Stm> propagate_with_stm(const StateVector& s0, double dt, int substeps,
                                                      const SystemParams& p) {
    if (substeps < 1) throw ConfigError("propagate_with_stm: substeps must be >= 1");
    detail::StateAndStm s{s0, Stm::Identity()};
    if (dt == 0.0) return {s.x, s.phi};
    const double h = dt / substeps;
    for (int i = 0; i < substeps; ++i) s = detail::rk4_step_stm(s, h, p);
    return {s.x, s.phi};
}

// Step size shrink factor near the Moon; keeps fixed-step RK4 accurate through
// NRHO perilune passes while remaining deterministic.
inline double step_scale(const StateVector& s, const SystemParams& p) {
    const double r2 = (s.head<3>() - p.moon_pos()).norm();
    const double f = std::pow(r2 / 0.1, 1.5);
    return std::clamp(f, 1e-3, 1.0);
}

// Fixed-base-step RK4 with local refinement near the Moon.
inline StateVector propagate_adaptive(const StateVector& s0, double dt, double base_step,
                                      const SystemParams& p) {
    if (dt == 0.0) return s0;
    const double dir = dt > 0.0 ? 1.0 : -1.0;
    double t = 0.0;
    StateVector s = s0;
    while (std::abs(t) < std::abs(dt)) {
        double h = base_step * step_scale(s, p);
        h = std::min(h, std::abs(dt) - std::abs(t));
        s = rk4_step(s, dir * h, p);
        t += dir * h;
    }
    return s;
}

inline std::pair<StateVector, Stm> propagate_adaptive_with_stm(const StateVector& s0, double dt,
                                                               double base_step,
                                                               const SystemParams& p) {
    detail::StateAndStm s{s0, Stm::Identity()};
    if (dt == 0.0) return {s.x, s.phi};
    const double dir = dt > 0.0 ? 1.0 : -1.0;
    double t = 0.0;
    while (std::abs(t) < std::abs(dt)) {
        double h = base_step * step_scale(s.x, p);
        h = std::min(h, std::abs(dt) - std::abs(t));
        s = detail::rk4_step_stm(s, dir * h, p);
        t += dir * h;
    }
    return {s.x, s.phi};
}

// Impulse-then-coast transition over one control sampling time Ts:
// add dv to velocity, take one Ts_hat step, then coast N_T - 1 further steps.
// rk4_substeps refines each Ts_hat step internally.
inline StateVector step_with_impulse(const StateVector& s0, const Vec3& dv, double Ts, double Ts_hat,
                                     const SystemParams& p, int rk4_substeps = 1) {
    if (!dv.allFinite()) throw ConfigError("step_with_impulse: non-finite impulse");
    if (!(Ts_hat > 0.0 && Ts_hat <= Ts)) throw ConfigError("step_with_impulse: need 0 < Ts_hat <= Ts");
    const double ratio = Ts / Ts_hat;
    const long n = std::lround(ratio);
    if (n < 1 || std::abs(ratio - static_cast<double>(n)) > 1e-9)
        throw ConfigError("step_with_impulse: Ts/Ts_hat must be a positive integer");
    StateVector s = s0;
    s.tail<3>() += dv;
    for (long i = 0; i < n; ++i) s = propagate(s, Ts_hat, rk4_substeps, p);
    return s;
}

}  // namespace cislunar

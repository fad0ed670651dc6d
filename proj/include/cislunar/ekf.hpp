#pragma once

#include <random>

#include "cislunar/dynamics.hpp"

namespace cislunar {

enum class ReferenceBody { Moon, Earth, L1, L2 };

inline std::string to_string(ReferenceBody b) {
    switch (b) {
        case ReferenceBody::Moon: return "moon";
        case ReferenceBody::Earth: return "earth";
        case ReferenceBody::L1: return "l1";
        case ReferenceBody::L2: return "l2";
    }
    throw ConfigError("unknown reference body");
}

inline ReferenceBody parse_reference_body(const std::string& s) {
    if (s == "moon") return ReferenceBody::Moon;
    if (s == "earth") return ReferenceBody::Earth;
    if (s == "l1") return ReferenceBody::L1;
    if (s == "l2") return ReferenceBody::L2;
    throw ConfigError("unknown reference body: " + s);
}

inline Vec3 reference_position(ReferenceBody b, const SystemParams& p) {
    switch (b) {
        case ReferenceBody::Moon: return p.moon_pos();
        case ReferenceBody::Earth: return p.earth_pos();
        case ReferenceBody::L1: return libration_point(LibrationIndex::L1, p).position;
        case ReferenceBody::L2: return libration_point(LibrationIndex::L2, p).position;
    }
    throw ConfigError("unknown reference body");
}

struct EstimatorState {
    StateVector mean = StateVector::Zero();
    Mat6 covariance = 1e-6 * Mat6::Identity();
    double epoch = 0.0;
};

struct Measurement {
    double range = 0.0;  // distance to the reference body
    Vec3 los = Vec3::UnitX();  // unit vector from reference body to spacecraft
    double sigma_range = 1e-6;
    double sigma_los = 1e-5;

    void validate() const {
        if (!(range > 0.0)) throw ConfigError("Measurement: range must be positive");
        if (std::abs(los.norm() - 1.0) > 1e-12)
            throw ConfigError("Measurement: los must be a unit vector");
    }
};

struct EkfConfig {
    double sigma_q = 1e-3;  // process noise (velocity channels)
    ReferenceBody reference = ReferenceBody::Moon;
    int rk4_substeps = 1;
};

// Measurement model h(x) = (||r_rel||, r_rel / ||r_rel||) stacked as a
// 4-vector, r_rel = position - reference body position.
inline Eigen::Vector4d measurement_model(const StateVector& x, ReferenceBody ref,
                                         const SystemParams& p) {
    const Vec3 r = x.head<3>() - reference_position(ref, p);
    const double rho = r.norm();
    if (rho < kSingularityRadius) throw SingularityError("measurement at reference body center");
    Eigen::Vector4d h;
    h[0] = rho;
    h.tail<3>() = r / rho;
    return h;
}

// Analytic measurement Jacobian dh/dx (4x6): d||r||/dr = u^T and
// du/dr = (I - u u^T) / ||r||; velocity columns are zero.
inline Eigen::Matrix<double, 4, 6> measurement_jacobian(const StateVector& x, ReferenceBody ref,
                                                        const SystemParams& p) {
    const Vec3 r = x.head<3>() - reference_position(ref, p);
    const double rho = r.norm();
    if (rho < kSingularityRadius) throw SingularityError("measurement at reference body center");
    const Vec3 u = r / rho;
    Eigen::Matrix<double, 4, 6> H = Eigen::Matrix<double, 4, 6>::Zero();
    H.block<1, 3>(0, 0) = u.transpose();
    H.block<3, 3>(1, 0) = (Mat3::Identity() - u * u.transpose()) / rho;
    return H;
}

// Time update: the applied impulse is a known input; process noise excites the
// velocity channels, Q_proc = sigma_q^2 diag(0,0,0,1,1,1) dt.
inline EstimatorState ekf_predict(const EstimatorState& est, double dt, const Vec3& applied_dv,
                                  const EkfConfig& cfg, const SystemParams& p) {
    if (!(dt > 0.0)) throw ConfigError("ekf_predict: dt must be positive");
    EstimatorState out;
    StateVector s = est.mean;
    s.tail<3>() += applied_dv;
    auto [mean, phi] = propagate_with_stm(s, dt, cfg.rk4_substeps, p);
    out.mean = mean;
    Mat6 Q = Mat6::Zero();
    Q.block<3, 3>(3, 3) = cfg.sigma_q * cfg.sigma_q * dt * Mat3::Identity();
    out.covariance = phi * est.covariance * phi.transpose() + Q;
    out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
    out.epoch = est.epoch + dt;
    return out;
}

struct EkfUpdateResult {
    EstimatorState state;
    bool skipped = false;  // innovation covariance numerically singular
    Eigen::Vector4d innovation = Eigen::Vector4d::Zero();
};

// Measurement update, Joseph form.
inline EkfUpdateResult ekf_update(const EstimatorState& est, const Measurement& z,
                                  const EkfConfig& cfg, const SystemParams& p) {
    z.validate();
    EkfUpdateResult out;
    out.state = est;
    const Eigen::Vector4d h = measurement_model(est.mean, cfg.reference, p);
    const Eigen::Matrix<double, 4, 6> H = measurement_jacobian(est.mean, cfg.reference, p);
    Eigen::Vector4d y;
    y[0] = z.range - h[0];
    y.tail<3>() = z.los - h.tail<3>();
    out.innovation = y;
    Eigen::Matrix4d Rm = Eigen::Vector4d(z.sigma_range * z.sigma_range, z.sigma_los * z.sigma_los,
                                         z.sigma_los * z.sigma_los, z.sigma_los * z.sigma_los)
                             .asDiagonal();
    const Eigen::Matrix4d S = H * est.covariance * H.transpose() + Rm;
    Eigen::LDLT<Eigen::Matrix4d> ldlt(S);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() < 1e-14 * ldlt.vectorD().maxCoeff()) {
        out.skipped = true;
        return out;
    }
    const Eigen::Matrix<double, 6, 4> K = ldlt.solve(H * est.covariance).transpose();
    out.state.mean = est.mean + K * y;
    const Mat6 IKH = Mat6::Identity() - K * H;
    Mat6 P = IKH * est.covariance * IKH.transpose() + K * Rm * K.transpose();
    out.state.covariance = 0.5 * (P + P.transpose());
    return out;
}

// Synthetic sensor: h(truth) plus Gaussian range noise and a small-angle
// Gaussian tilt of the line-of-sight direction, renormalized to unit length.
inline Measurement simulate_measurement(const StateVector& truth, std::mt19937_64& rng,
                                        const EkfConfig& cfg, const SystemParams& p,
                                        double sigma_range = 1e-6, double sigma_los = 1e-5) {
    if (!truth.allFinite()) throw ConfigError("simulate_measurement: non-finite truth state");
    const Eigen::Vector4d h = measurement_model(truth, cfg.reference, p);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Measurement z;
    z.sigma_range = sigma_range;
    z.sigma_los = sigma_los;
    z.range = h[0] + sigma_range * gauss(rng);
    const Vec3 u = h.tail<3>();
    // Orthonormal frame about the true direction for the tilt.
    const Vec3 a = std::abs(u[0]) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    const Vec3 e1 = u.cross(a).normalized();
    const Vec3 e2 = u.cross(e1);
    z.los = (u + sigma_los * gauss(rng) * e1 + sigma_los * gauss(rng) * e2).normalized();
    if (z.range <= 0.0) z.range = h[0];  // absurd draw; keep the measurement usable
    return z;
}

}  // namespace cislunar

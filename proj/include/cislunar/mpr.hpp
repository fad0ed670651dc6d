#pragma once

#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "cislunar/family.hpp"

namespace cislunar {

struct FitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParamPair {
    double chi = 0.0;
    double nu = 0.0;  // [-pi, pi)
};

struct TrainingPoint {
    ParamPair p;
    StateVector x;
};

// Monomial exponents (n_chi, n_cos_nu, n_sin_nu), total order capped.
using ExponentTriple = std::array<int, 3>;

// All exponent triples with n_chi + n_cos + n_sin <= degree and n_sin <=
// max_sin. The full basis (max_sin unbounded) is redundant because
// cos^2 + sin^2 = 1; capping the sin exponent at 1 selects a non-redundant
// subset spanning exactly the same function space.
inline std::vector<ExponentTriple> monomial_basis(int degree, int max_sin = 1 << 20) {
    std::vector<ExponentTriple> basis;
    for (int a = 0; a <= degree; ++a)
        for (int b = 0; a + b <= degree; ++b)
            for (int c = 0; c <= max_sin && a + b + c <= degree; ++c) basis.push_back({a, b, c});
    return basis;
}

// Polynomial surrogate for one contiguous chi slice of a family manifold.
// chi is affinely normalized to [-1, 1] before evaluation to condition the
// high-order monomials.
struct SubManifoldModel {
    double chi_lo = 0.0, chi_hi = 0.0;
    int degree = 0;
    double chi_center = 0.0, chi_scale = 1.0;
    std::vector<ExponentTriple> exponents;
    Eigen::MatrixXd coeff;  // n_terms x 6
    double max_residual = 0.0;
    double rms_residual = 0.0;
    double nu_rate = 0.0;    // mean d(nu)/dt over the training orbits
    double mean_period = 0.0;

    double normalize_chi(double chi) const { return (chi - chi_center) / chi_scale; }
};

struct MprModel {
    FamilyTag tag;
    double mu = 0.01215;
    std::vector<SubManifoldModel> subs;  // contiguous, ordered by chi

    double chi_min() const { return subs.front().chi_lo; }
    double chi_max() const { return subs.back().chi_hi; }

    // Boundary ties go to the lower-range model.
    const SubManifoldModel& select(double chi) const {
        if (subs.empty()) throw ConfigError("MprModel: empty model");
        if (chi < chi_min() - 1e-12 || chi > chi_max() + 1e-12)
            throw ConfigError("MprModel: chi outside family range");
        for (const auto& s : subs)
            if (chi <= s.chi_hi) return s;
        return subs.back();
    }
};

namespace detail {

inline Eigen::RowVectorXd monomial_row(const SubManifoldModel& m, double chi, double nu) {
    Eigen::RowVectorXd row(m.exponents.size());
    const double u = m.normalize_chi(chi);
    const double c = std::cos(nu), s = std::sin(nu);
    const int deg = m.degree;
    // power tables
    double up[25], cp[25], sp[25];
    up[0] = cp[0] = sp[0] = 1.0;
    for (int i = 1; i <= deg; ++i) {
        up[i] = up[i - 1] * u;
        cp[i] = cp[i - 1] * c;
        sp[i] = sp[i - 1] * s;
    }
    for (size_t k = 0; k < m.exponents.size(); ++k) {
        const auto& e = m.exponents[k];
        row[k] = up[e[0]] * cp[e[1]] * sp[e[2]];
    }
    return row;
}

}  // namespace detail

// Least-squares fit over the monomial basis {chi^a cos(nu)^b sin(nu)^c},
// total order <= degree, all six state components sharing one factorization.
// Fitting uses the non-redundant sin-exponent <= 1 subset of the basis, which
// spans the same function space and keeps the least-squares system full rank.
// max_chi_order additionally caps the chi exponent; a sub-manifold trained on
// k distinct orbits can only support chi orders below k, while the angular
// direction is sampled densely and tolerates much higher orders.
inline SubManifoldModel fit_mpr(const std::vector<TrainingPoint>& training, int degree,
                                int max_chi_order = -1) {
    if (degree < 1 || degree > 24) throw FitError("fit_mpr: degree out of range [1, 24]");
    if (max_chi_order < 0) max_chi_order = degree;
    SubManifoldModel m;
    m.degree = degree;
    for (const auto& e : monomial_basis(degree, 1))
        if (e[0] <= max_chi_order) m.exponents.push_back(e);
    const int terms = static_cast<int>(m.exponents.size());
    const int rows = static_cast<int>(training.size());
    if (rows < terms)
        throw FitError("fit_mpr: need at least " + std::to_string(terms) + " training points, got " +
                       std::to_string(rows));
    double lo = training.front().p.chi, hi = lo;
    for (const auto& t : training) {
        lo = std::min(lo, t.p.chi);
        hi = std::max(hi, t.p.chi);
    }
    m.chi_lo = lo;
    m.chi_hi = hi;
    m.chi_center = 0.5 * (lo + hi);
    m.chi_scale = hi > lo ? 0.5 * (hi - lo) : 1.0;

    Eigen::MatrixXd A(rows, terms);
    Eigen::MatrixXd B(rows, 6);
    for (int i = 0; i < rows; ++i) {
        A.row(i) = detail::monomial_row(m, training[i].p.chi, training[i].p.nu);
        B.row(i) = training[i].x.transpose();
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    qr.setThreshold(1e-10);
    if (qr.rank() < terms)
        throw FitError("fit_mpr: rank-deficient normal system (rank " + std::to_string(qr.rank()) +
                       " of " + std::to_string(terms) + "); add data or lower the degree");
    m.coeff = qr.solve(B);
    if (!m.coeff.allFinite()) throw FitError("fit_mpr: ill-conditioned normal system");

    const Eigen::MatrixXd R = A * m.coeff - B;
    m.max_residual = R.cwiseAbs().maxCoeff();
    m.rms_residual = std::sqrt(R.squaredNorm() / R.size());
    return m;
}

inline StateVector eval_sub(const SubManifoldModel& m, double chi, double nu) {
    return (detail::monomial_row(m, chi, nu) * m.coeff).transpose();
}

// Evaluate the family surrogate at (chi, nu); reference map of the controller.
inline StateVector eval_mpr(const MprModel& model, const ParamPair& p) {
    return eval_sub(model.select(p.chi), p.chi, p.nu);
}

// Evaluation with analytic partials w.r.t. chi and nu.
struct MprEval {
    StateVector x;
    StateVector dchi;
    StateVector dnu;
};

inline MprEval eval_mpr_grad(const MprModel& model, const ParamPair& p) {
    const SubManifoldModel& m = model.select(p.chi);
    const double u = m.normalize_chi(p.chi);
    const double c = std::cos(p.nu), s = std::sin(p.nu);
    const int deg = m.degree;
    double up[25], cp[25], sp[25];
    up[0] = cp[0] = sp[0] = 1.0;
    for (int i = 1; i <= deg; ++i) {
        up[i] = up[i - 1] * u;
        cp[i] = cp[i - 1] * c;
        sp[i] = sp[i - 1] * s;
    }
    const int terms = static_cast<int>(m.exponents.size());
    Eigen::RowVectorXd row(terms), drow_u(terms), drow_nu(terms);
    for (int k = 0; k < terms; ++k) {
        const auto& e = m.exponents[k];
        const double pu = up[e[0]], pc = cp[e[1]], ps = sp[e[2]];
        row[k] = pu * pc * ps;
        drow_u[k] = e[0] > 0 ? e[0] * up[e[0] - 1] * pc * ps : 0.0;
        // d/dnu (cos^b sin^c) = -b cos^{b-1} sin^{c+1} + c cos^{b+1} sin^{c-1}
        double d = 0.0;
        if (e[1] > 0) d -= e[1] * cp[e[1] - 1] * ps * s;
        if (e[2] > 0) d += e[2] * pc * c * sp[e[2] - 1];
        drow_nu[k] = pu * d;
    }
    MprEval out;
    out.x = (row * m.coeff).transpose();
    out.dchi = (drow_u * m.coeff).transpose() / m.chi_scale;
    out.dnu = (drow_nu * m.coeff).transpose();
    return out;
}

// ---------------------------------------------------------------------------
// Training data and family-level fitting
// ---------------------------------------------------------------------------

// Contiguous chi-range partition of a catalog; adjacent parts share their
// boundary member so evaluation stays continuous across the split.
inline std::vector<FamilyCatalog> split_submanifolds(const FamilyCatalog& catalog, int parts) {
    if (parts < 1) throw ConfigError("split_submanifolds: parts must be >= 1");
    const int n = static_cast<int>(catalog.members.size());
    if (parts > n) throw ConfigError("split_submanifolds: more parts than members");
    std::vector<FamilyCatalog> out;
    for (int k = 0; k < parts; ++k) {
        FamilyCatalog sub = catalog;
        sub.members.clear();
        const int lo = k * (n - 1) / parts;
        const int hi = (k + 1 == parts) ? n - 1 : (k + 1) * (n - 1) / parts;
        for (int i = lo; i <= hi; ++i) sub.members.push_back(catalog.members[i]);
        out.push_back(std::move(sub));
    }
    return out;
}

// Training samples for one orbit: nu from the parameterization geometry, chi
// from the member, states from propagation. nu advances very unevenly in time
// (fastest through an NRHO perilune pass), so time-uniform sampling leaves nu
// gaps that a high-order angular fit oscillates through. Oversample in time,
// then thin to a near-uniform nu grid.
inline std::vector<TrainingPoint> orbit_training(const PeriodicOrbit& orbit, int samples,
                                                 const SystemParams& p, const LibrationPoint& L) {
    const auto dense = sample_orbit(orbit, 8 * samples, p);
    std::vector<TrainingPoint> out;
    out.reserve(samples);
    const double spacing = 2.0 * M_PI / samples;
    double last_nu = 0.0;
    double travelled = spacing;  // always take the first sample
    for (const auto& sp : dense) {
        const double nu = nu_of_state(sp.x, orbit.tag, L);
        if (!out.empty()) travelled += std::abs(wrap_angle(nu - last_nu));
        last_nu = nu;
        if (travelled + 1e-12 >= spacing) {
            out.push_back({{orbit.chi, nu}, sp.x});
            travelled = 0.0;
        }
    }
    return out;
}

// Signed mean angular rate d(nu)/dt of one orbit (+-2 pi / period).
inline double orbit_nu_rate(const PeriodicOrbit& orbit, int samples, const SystemParams& p,
                            const LibrationPoint& L) {
    auto pts = sample_orbit(orbit, samples, p);
    double sweep = 0.0;
    double prev = nu_of_state(pts[0].x, orbit.tag, L);
    for (size_t i = 1; i < pts.size(); ++i) {
        const double nu = nu_of_state(pts[i].x, orbit.tag, L);
        sweep += wrap_angle(nu - prev);
        prev = nu;
    }
    // close the loop
    sweep += wrap_angle(nu_of_state(pts[0].x, orbit.tag, L) - prev);
    return sweep / orbit.period;
}

struct FitOptions {
    int degree = 18;
    int max_chi_order = 10;
    int parts = 4;
    int samples_per_orbit = 300;
};

// Fit the whole family: split into sub-manifolds, sample every member, fit one
// polynomial model per part.
inline MprModel fit_family_model(const FamilyCatalog& catalog, const SystemParams& p,
                                 const FitOptions& opt = {}) {
    if (catalog.members.size() < 2) throw FitError("fit_family_model: catalog too small");
    MprModel model;
    model.tag = catalog.tag;
    model.mu = catalog.mu;
    const LibrationPoint L = libration_point(catalog.tag.point, p);
    for (const auto& sub : split_submanifolds(catalog, opt.parts)) {
        std::vector<TrainingPoint> training;
        double rate = 0.0, period = 0.0;
        for (const auto& m : sub.members) {
            auto pts = orbit_training(m, opt.samples_per_orbit, p, L);
            training.insert(training.end(), pts.begin(), pts.end());
            rate += orbit_nu_rate(m, 64, p, L);
            period += m.period;
        }
        SubManifoldModel fitted = fit_mpr(training, opt.degree, opt.max_chi_order);
        fitted.chi_lo = sub.members.front().chi;
        fitted.chi_hi = sub.members.back().chi;
        fitted.nu_rate = rate / sub.members.size();
        fitted.mean_period = period / sub.members.size();
        model.subs.push_back(std::move(fitted));
    }
    return model;
}

// ---------------------------------------------------------------------------
// JSON round trip
// ---------------------------------------------------------------------------

inline nlohmann::json mpr_to_json(const MprModel& model) {
    nlohmann::json j;
    j["tag"] = to_string(model.tag);
    j["mu"] = model.mu;
    nlohmann::json subs = nlohmann::json::array();
    for (const auto& s : model.subs) {
        nlohmann::json e;
        e["chi_range"] = {s.chi_lo, s.chi_hi};
        e["degree"] = s.degree;
        e["normalization"] = {{"center", s.chi_center}, {"scale", s.chi_scale}};
        e["nu_rate"] = s.nu_rate;
        e["mean_period"] = s.mean_period;
        nlohmann::json coeffs = nlohmann::json::array();
        for (size_t k = 0; k < s.exponents.size(); ++k)
            for (int i = 0; i < 6; ++i) {
                if (s.coeff(k, i) == 0.0) continue;
                coeffs.push_back({{"exponents", s.exponents[k]},
                                  {"alpha", s.coeff(k, i)},
                                  {"component", i}});
            }
        e["coefficients"] = std::move(coeffs);
        subs.push_back(std::move(e));
    }
    j["sub_manifolds"] = std::move(subs);
    j["diagnostics"] = nlohmann::json::array();
    for (const auto& s : model.subs)
        j["diagnostics"].push_back(
            {{"max_residual", s.max_residual}, {"rms_residual", s.rms_residual}});
    return j;
}

inline MprModel mpr_from_json(const nlohmann::json& j) {
    MprModel model;
    model.tag = parse_family_tag(j.at("tag").get<std::string>());
    model.mu = j.at("mu").get<double>();
    size_t idx = 0;
    for (const auto& e : j.at("sub_manifolds")) {
        SubManifoldModel s;
        s.chi_lo = e.at("chi_range").at(0).get<double>();
        s.chi_hi = e.at("chi_range").at(1).get<double>();
        s.degree = e.at("degree").get<int>();
        s.chi_center = e.at("normalization").at("center").get<double>();
        s.chi_scale = e.at("normalization").at("scale").get<double>();
        s.nu_rate = e.at("nu_rate").get<double>();
        s.mean_period = e.at("mean_period").get<double>();
        // Basis = the distinct exponent triples actually present in the file.
        std::vector<std::array<double, 6>> rows;
        auto term_index = [&](const ExponentTriple& t) {
            if (t[0] < 0 || t[1] < 0 || t[2] < 0 || t[0] + t[1] + t[2] > s.degree)
                throw ConfigError("mpr_from_json: exponent triple outside basis");
            for (size_t k = 0; k < s.exponents.size(); ++k)
                if (s.exponents[k] == t) return k;
            s.exponents.push_back(t);
            rows.push_back({0, 0, 0, 0, 0, 0});
            return s.exponents.size() - 1;
        };
        for (const auto& c : e.at("coefficients")) {
            ExponentTriple t{c.at("exponents").at(0).get<int>(), c.at("exponents").at(1).get<int>(),
                             c.at("exponents").at(2).get<int>()};
            rows[term_index(t)][c.at("component").get<int>()] = c.at("alpha").get<double>();
        }
        s.coeff = Eigen::MatrixXd::Zero(s.exponents.size(), 6);
        for (size_t k = 0; k < rows.size(); ++k)
            for (int i = 0; i < 6; ++i) s.coeff(k, i) = rows[k][i];
        if (idx < j.at("diagnostics").size()) {
            s.max_residual = j.at("diagnostics").at(idx).at("max_residual").get<double>();
            s.rms_residual = j.at("diagnostics").at(idx).at("rms_residual").get<double>();
        }
        ++idx;
        model.subs.push_back(std::move(s));
    }
    return model;
}

// Geometric chi estimate of an arbitrary state: the chi whose surrogate orbit
// passes closest (in position) to the state at its geometric nu.
inline double estimate_chi(const MprModel& model, const StateVector& x, const SystemParams& p) {
    const LibrationPoint L = libration_point(model.tag.point, p);
    const double nu = nu_of_state(x, model.tag, L);
    auto dist = [&](double chi) {
        return (eval_mpr(model, {chi, nu}).head<3>() - x.head<3>()).norm();
    };
    const double lo = model.chi_min(), hi = model.chi_max();
    const int n = 64;
    double best_chi = lo, best_d = dist(lo);
    for (int i = 1; i <= n; ++i) {
        const double chi = lo + (hi - lo) * i / n;
        const double d = dist(chi);
        if (d < best_d) {
            best_d = d;
            best_chi = chi;
        }
    }
    // golden-section refinement around the best grid cell
    double a = std::max(lo, best_chi - (hi - lo) / n);
    double b = std::min(hi, best_chi + (hi - lo) / n);
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double c1 = b - gr * (b - a), c2 = a + gr * (b - a);
    double f1 = dist(c1), f2 = dist(c2);
    for (int i = 0; i < 40; ++i) {
        if (f1 < f2) {
            b = c2;
            c2 = c1;
            f2 = f1;
            c1 = b - gr * (b - a);
            f1 = dist(c1);
        } else {
            a = c1;
            c1 = c2;
            f1 = f2;
            c2 = a + gr * (b - a);
            f2 = dist(c2);
        }
    }
    return 0.5 * (a + b);
}

}  // namespace cislunar

// cislunar: command-line front end for family generation, surrogate fitting,
// and station-keeping simulation campaigns.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "cislunar/family.hpp"
#include "cislunar/mpr.hpp"
#include "cislunar/sim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cislunar;

namespace {

// Exit-code contract: 0 success, 1 usage/config error, 2 partial computational
// failure.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitPartial = 2;

json load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open file: " + path);
    try {
        return json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

void save_json(const std::string& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open for writing: " + path);
    f << j.dump(2) << '\n';
}

// Reject unknown fields so misspelled keys fail loudly instead of being
// silently ignored.
void check_fields(const json& j, const std::string& path,
                  const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(path + ": expected an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) throw ConfigError("unknown config field: " + path + "." + key);
}

Vec3 vec3_of(const json& j, const std::string& path) {
    if (!j.is_array() || j.size() != 3) throw ConfigError(path + ": expected a 3-array");
    return Vec3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>());
}

struct GlobalFlags {
    std::uint64_t seed = 0;
    bool seed_given = false;
    double mu = 0.01215;
    bool mu_given = false;
    std::string out_dir = ".";
    std::string config;
};

// A fully-resolved scenario: the config file plus the model/catalog artifacts
// it references.
struct LoadedScenario {
    Scenario scn;
    MprModel model;
    SystemParams params;
    // campaign settings
    std::vector<int> sweep_np{2, 3, 4, 5};
    std::vector<int> sweep_nc{1, 2, 3};
    int mc_runs = 50;
    double mc_dispersion = 1e-3;
};

LoadedScenario load_scenario(const GlobalFlags& gf) {
    if (gf.config.empty()) throw ConfigError("this subcommand requires --config <scenario.json>");
    const json cfg = load_json(gf.config);
    check_fields(cfg, "scenario",
                 {"model", "catalog", "member_index", "start_member_index", "position_offset",
                  "velocity_offset", "revolutions", "seed", "mode", "disturbance", "nmpc", "ekf",
                  "sigma_range", "sigma_los", "initial_covariance_scale", "sweep", "montecarlo"});

    LoadedScenario out;
    const std::string model_path = cfg.at("model").get<std::string>();
    out.model = mpr_from_json(load_json(model_path));
    out.params.mu = gf.mu_given ? gf.mu : out.model.mu;

    const std::string catalog_path = cfg.at("catalog").get<std::string>();
    FamilyCatalog cat = catalog_from_json(load_json(catalog_path));
    if (cat.members.empty()) throw ConfigError(catalog_path + ": empty catalog");

    Scenario& scn = out.scn;
    scn.family = to_string(cat.tag);

    const int n = static_cast<int>(cat.members.size());
    int member = cfg.value("member_index", n / 2);
    int start = cfg.value("start_member_index", member);
    if (member < 0 || member >= n || start < 0 || start >= n)
        throw ConfigError("scenario.member_index/start_member_index out of catalog range");
    const PeriodicOrbit& target = cat.members[member];

    scn.initial_truth = cat.members[start].x0;
    if (cfg.contains("position_offset"))
        scn.initial_truth.head<3>() += vec3_of(cfg["position_offset"], "scenario.position_offset");
    if (cfg.contains("velocity_offset"))
        scn.initial_truth.tail<3>() += vec3_of(cfg["velocity_offset"], "scenario.velocity_offset");

    scn.chi_nominal = target.chi;
    scn.revolution_period = target.period;
    scn.revolutions = cfg.value("revolutions", 5.0);
    scn.seed = gf.seed_given ? gf.seed : cfg.value("seed", std::uint64_t{0});
    scn.sigma_range = cfg.value("sigma_range", 1e-6);
    scn.sigma_los = cfg.value("sigma_los", 1e-5);
    scn.initial_covariance = cfg.value("initial_covariance_scale", 1e-6) * Mat6::Identity();

    if (cfg.contains("disturbance")) {
        const json& d = cfg["disturbance"];
        check_fields(d, "scenario.disturbance", {"bias", "sigma_q"});
        if (d.contains("bias")) scn.disturbance.bias = vec3_of(d["bias"], "scenario.disturbance.bias");
        scn.disturbance.sigma_q = d.value("sigma_q", scn.disturbance.sigma_q);
    }

    // NMPC: timing is stated per revolution so scenarios stay family-agnostic.
    int steps_per_rev = 20, substeps = 10;
    if (cfg.contains("nmpc")) {
        const json& c = cfg["nmpc"];
        check_fields(c, "scenario.nmpc",
                     {"Np", "Nc", "steps_per_rev", "substeps", "r_weight", "dv_limit", "max_iter",
                      "tol", "multi_start", "rk4_substeps"});
        scn.nmpc.Np = c.value("Np", scn.nmpc.Np);
        scn.nmpc.Nc = c.value("Nc", scn.nmpc.Nc);
        steps_per_rev = c.value("steps_per_rev", steps_per_rev);
        substeps = c.value("substeps", substeps);
        const double r = c.value("r_weight", 1e-2);
        scn.nmpc.R = r * Mat3::Identity();
        const double dv_limit = c.value("dv_limit", 0.1);
        scn.nmpc.dv_min = Vec3::Constant(-dv_limit);
        scn.nmpc.dv_max = Vec3::Constant(dv_limit);
        scn.nmpc.max_iter = c.value("max_iter", scn.nmpc.max_iter);
        scn.nmpc.tol = c.value("tol", scn.nmpc.tol);
        scn.nmpc.multi_start = c.value("multi_start", scn.nmpc.multi_start);
        scn.nmpc.rk4_substeps = c.value("rk4_substeps", scn.nmpc.rk4_substeps);
    }
    if (steps_per_rev < 1 || substeps < 1)
        throw ConfigError("scenario.nmpc: steps_per_rev and substeps must be >= 1");
    scn.nmpc.Ts = target.period / steps_per_rev;
    scn.nmpc.Ts_hat = scn.nmpc.Ts / substeps;
    scn.nmpc.mode = parse_control_mode(cfg.value("mode", "fixed-chi"));

    // The chi box is the sub-manifold that contains the target member.
    const SubManifoldModel& sub = out.model.select(target.chi);
    scn.nmpc.chi_min = sub.chi_lo;
    scn.nmpc.chi_max = sub.chi_hi;
    if (scn.nmpc.mode == ControlMode::FixedOrbit) scn.nmpc.chi_ref = target.chi;

    if (cfg.contains("ekf")) {
        const json& e = cfg["ekf"];
        check_fields(e, "scenario.ekf", {"sigma_q", "reference"});
        scn.ekf.sigma_q = e.value("sigma_q", scn.ekf.sigma_q);
        if (e.contains("reference"))
            scn.ekf.reference = parse_reference_body(e["reference"].get<std::string>());
    }

    if (cfg.contains("sweep")) {
        const json& s = cfg["sweep"];
        check_fields(s, "scenario.sweep", {"np", "nc"});
        if (s.contains("np")) out.sweep_np = s["np"].get<std::vector<int>>();
        if (s.contains("nc")) out.sweep_nc = s["nc"].get<std::vector<int>>();
        if (out.sweep_np.empty() || out.sweep_nc.empty())
            throw ConfigError("scenario.sweep: np and nc must be non-empty");
    }
    if (cfg.contains("montecarlo")) {
        const json& mc = cfg["montecarlo"];
        check_fields(mc, "scenario.montecarlo", {"runs", "dispersion_sigma"});
        out.mc_runs = mc.value("runs", out.mc_runs);
        out.mc_dispersion = mc.value("dispersion_sigma", out.mc_dispersion);
        if (out.mc_runs < 1) throw ConfigError("scenario.montecarlo.runs must be >= 1");
    }

    scn.validate();
    return out;
}

fs::path out_path(const GlobalFlags& gf, const std::string& name) {
    fs::create_directories(gf.out_dir);
    return fs::path(gf.out_dir) / name;
}

int cmd_families_generate(const GlobalFlags& gf, const std::string& tag_str, int count,
                          double step, std::string out_file) {
    SystemParams p{gf.mu};
    const FamilyTag tag = parse_family_tag(tag_str);
    GenerateOptions opt;
    opt.pac_step = step;
    FamilyCatalog cat = generate_family(tag, count, p, opt);
    double worst_closure = 0.0;
    for (const auto& m : cat.members)
        worst_closure = std::max(worst_closure, closure_residual(m, p));
    if (out_file.empty()) out_file = tag_str + "-catalog.json";
    const fs::path path = out_path(gf, out_file);
    save_json(path.string(), catalog_to_json(cat));
    std::cout << "family " << tag_str << ": " << cat.members.size() << " members, chi ["
              << cat.members.front().chi << ", " << cat.members.back().chi
              << "], worst closure " << worst_closure << "\n"
              << "wrote " << path.string() << "\n";
    if (static_cast<int>(cat.members.size()) < count) {
        std::cerr << "warning: continuation stopped early (" << cat.members.size() << " of "
                  << count << " requested members)\n";
        return kExitPartial;
    }
    return kExitOk;
}

int cmd_model_fit(const GlobalFlags& gf, const std::string& catalog_path, int degree, int parts,
                  int samples, double holdout, std::string out_file) {
    FamilyCatalog cat = catalog_from_json(load_json(catalog_path));
    SystemParams p{gf.mu_given ? gf.mu : cat.mu};
    FitOptions opt;
    opt.degree = degree;
    opt.parts = parts;
    opt.samples_per_orbit = samples;

    FamilyCatalog train = cat;
    std::vector<PeriodicOrbit> held;
    if (holdout > 0.0) {
        if (holdout >= 0.5) throw ConfigError("--holdout must be in (0, 0.5)");
        const int stride = std::max(2, static_cast<int>(std::lround(1.0 / holdout)));
        train.members.clear();
        for (size_t i = 0; i < cat.members.size(); ++i) {
            // keep the extremes in the training set so held-out members interpolate
            if (i % stride == stride / 2 && i + 1 < cat.members.size() && i > 0)
                held.push_back(cat.members[i]);
            else
                train.members.push_back(cat.members[i]);
        }
    }

    MprModel model = fit_family_model(train, p, opt);
    for (size_t i = 0; i < model.subs.size(); ++i)
        std::cout << "sub " << i << ": chi [" << model.subs[i].chi_lo << ", "
                  << model.subs[i].chi_hi << "] max residual " << model.subs[i].max_residual
                  << " rms " << model.subs[i].rms_residual << "\n";

    if (!held.empty()) {
        const LibrationPoint L = libration_point(cat.tag.point, p);
        double pos_err = 0.0, vel_err = 0.0;
        for (const auto& orb : held) {
            for (const auto& tp : orbit_training(orb, 173, p, L)) {
                const StateVector err = eval_mpr(model, tp.p) - tp.x;
                pos_err = std::max(pos_err, err.head<3>().cwiseAbs().maxCoeff());
                vel_err = std::max(vel_err, err.tail<3>().cwiseAbs().maxCoeff());
            }
        }
        std::cout << "holdout (" << held.size() << " members): max position error " << pos_err
                  << ", max velocity error " << vel_err << "\n";
    }

    if (out_file.empty()) out_file = to_string(cat.tag) + "-model.json";
    const fs::path path = out_path(gf, out_file);
    save_json(path.string(), mpr_to_json(model));
    std::cout << "wrote " << path.string() << "\n";
    return kExitOk;
}

int cmd_simulate(const GlobalFlags& gf) {
    LoadedScenario ls = load_scenario(gf);
    RunResult res = run_closed_loop(ls.scn, ls.model, ls.params);
    write_trajectory_csv(out_path(gf, "trajectory.csv").string(), res.log);
    json j = metrics_to_json(res.metrics);
    j["family"] = ls.scn.family;
    j["seed"] = ls.scn.seed;
    save_json(out_path(gf, "metrics.json").string(), j);
    std::cout << "total dv " << res.metrics.total_dv << " (" << res.metrics.total_dv_mps
              << " m/s), converged " << (res.metrics.converged ? "yes" : "no")
              << ", solver failures " << res.metrics.solver_failures << "\n";
    return res.metrics.aborted || res.metrics.solver_failures > 0 ? kExitPartial : kExitOk;
}

int cmd_sweep(const GlobalFlags& gf) {
    LoadedScenario ls = load_scenario(gf);
    auto cells = horizon_sweep(ls.scn, ls.model, ls.params, ls.sweep_np, ls.sweep_nc);
    write_sweep_csv(out_path(gf, "sweep.csv").string(), cells);
    int run = 0, failed = 0;
    for (const auto& c : cells) {
        run += c.skipped ? 0 : 1;
        failed += c.failed ? 1 : 0;
    }
    std::cout << "sweep: " << run << " cells run, " << failed << " failed, "
              << cells.size() - run - failed << " infeasible\n";
    return failed > 0 ? kExitPartial : kExitOk;
}

int cmd_montecarlo(const GlobalFlags& gf) {
    LoadedScenario ls = load_scenario(gf);
    MonteCarloSummary mc = monte_carlo(ls.scn, ls.model, ls.params, ls.mc_runs, ls.mc_dispersion);
    write_montecarlo_csv(out_path(gf, "montecarlo.csv").string(), mc);
    json j;
    j["runs"] = ls.mc_runs;
    j["failure_fraction"] = mc.failure_fraction;
    j["converged_fraction"] = mc.converged_fraction;
    j["mean_total_dv"] = mc.mean_total_dv;
    j["mean_convergence_revs"] = mc.mean_convergence_revs;
    j["mean_solver_ms"] = mc.mean_solver_ms;
    save_json(out_path(gf, "metrics.json").string(), j);
    std::cout << "montecarlo: " << ls.mc_runs << " runs, failure fraction "
              << mc.failure_fraction << ", converged fraction " << mc.converged_fraction << "\n";
    return mc.failure_fraction > 0.0 ? kExitPartial : kExitOk;
}

int cmd_compare(const GlobalFlags& gf) {
    LoadedScenario ls = load_scenario(gf);
    ModeComparison cmp = compare_modes(ls.scn, ls.model, ls.params);
    json j;
    j["variable-chi"] = metrics_to_json(cmp.variable_chi);
    j["fixed-chi"] = metrics_to_json(cmp.fixed_chi);
    j["fixed-orbit"] = metrics_to_json(cmp.fixed_orbit);
    save_json(out_path(gf, "metrics.json").string(), j);
    std::cout << "total dv: variable-chi " << cmp.variable_chi.total_dv << ", fixed-chi "
              << cmp.fixed_chi.total_dv << ", fixed-orbit " << cmp.fixed_orbit.total_dv << "\n";
    const bool partial = cmp.variable_chi.aborted || cmp.fixed_chi.aborted ||
                         cmp.fixed_orbit.aborted;
    return partial ? kExitPartial : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Periodic-orbit families, surrogate models, and NMPC station-keeping in the "
                 "Earth-Moon CR3BP"};
    app.require_subcommand(1);

    GlobalFlags gf;
    auto* seed_opt = app.add_option("--seed", gf.seed, "RNG seed (overrides the config file)");
    auto* mu_opt = app.add_option("--mu", gf.mu, "CR3BP mass parameter")
                       ->check(CLI::Range(1e-6, 0.499999));
    app.add_option("--out-dir", gf.out_dir, "output directory")->capture_default_str();
    app.add_option("--config", gf.config, "scenario config JSON");

    // families generate
    auto* families = app.add_subcommand("families", "periodic-orbit family catalogs");
    families->require_subcommand(1);
    families->fallthrough();
    auto* fgen = families->add_subcommand("generate", "generate a family catalog");
    fgen->fallthrough();
    std::string tag_str = "l1-lyapunov";
    int count = 50;
    double step = 5e-3;
    std::string out_file;
    fgen->add_option("--tag", tag_str,
                     "family tag: {l1,l2}-{lyapunov,halo-north,halo-south,nrho-north,nrho-south}")
        ->required();
    fgen->add_option("--count", count, "members to generate")->check(CLI::PositiveNumber);
    fgen->add_option("--step", step, "continuation step")->check(CLI::PositiveNumber);
    fgen->add_option("--out", out_file, "output file name (default <tag>-catalog.json)");

    // model fit
    auto* model_cmd = app.add_subcommand("model", "surrogate models");
    model_cmd->require_subcommand(1);
    model_cmd->fallthrough();
    auto* mfit = model_cmd->add_subcommand("fit", "fit a surrogate model to a catalog");
    mfit->fallthrough();
    std::string catalog_path;
    int degree = 18, parts = 4, samples = 300;
    double holdout = 0.0;
    std::string model_out;
    mfit->add_option("--catalog", catalog_path, "input catalog JSON")->required();
    mfit->add_option("--degree", degree, "polynomial degree")->check(CLI::PositiveNumber);
    mfit->add_option("--parts", parts, "number of sub-manifolds")->check(CLI::PositiveNumber);
    mfit->add_option("--samples", samples, "training samples per orbit")
        ->check(CLI::PositiveNumber);
    mfit->add_option("--holdout", holdout, "fraction of members held out for validation");
    mfit->add_option("--out", model_out, "output file name (default <tag>-model.json)");

    auto* simulate = app.add_subcommand("simulate", "closed-loop station-keeping run");
    auto* sweep = app.add_subcommand("sweep", "horizon (Np, Nc) grid sweep");
    auto* montecarlo = app.add_subcommand("montecarlo", "Monte Carlo campaign");
    auto* compare = app.add_subcommand("compare", "run all three control modes");
    for (CLI::App* s : {simulate, sweep, montecarlo, compare}) s->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }
    gf.seed_given = seed_opt->count() > 0;
    gf.mu_given = mu_opt->count() > 0;

    try {
        if (fgen->parsed()) return cmd_families_generate(gf, tag_str, count, step, out_file);
        if (mfit->parsed())
            return cmd_model_fit(gf, catalog_path, degree, parts, samples, holdout, model_out);
        if (simulate->parsed()) return cmd_simulate(gf);
        if (sweep->parsed()) return cmd_sweep(gf);
        if (montecarlo->parsed()) return cmd_montecarlo(gf);
        if (compare->parsed()) return cmd_compare(gf);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const FitError& e) {
        std::cerr << "fit failed: " << e.what() << "\n";
        return kExitPartial;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitPartial;
    }
    return kExitConfig;
}

#include <fstream>
#include <set>

#include "cli.hpp"

namespace bem::cli {

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) { throw ValidationError(where + ": " + msg); }

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) fail(where, "expected an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) fail(where, "unknown key '" + k + "'");
}

double get_number(const json& j, const std::string& where) {
    if (!j.is_number()) fail(where, "expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) fail(where, "must be finite");
    return v;
}

double positive(const json& j, const std::string& where) {
    const double v = get_number(j, where);
    if (!(v > 0.0)) fail(where, "must be positive");
    return v;
}

int get_int(const json& j, const std::string& where) {
    if (!j.is_number_integer()) fail(where, "expected an integer");
    return j.get<int>();
}

// 1-based index list to zero-based
std::vector<int> index_list(const json& j, const std::string& where) {
    if (!j.is_array()) fail(where, "expected an array of 1-based indices");
    std::vector<int> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const int v = get_int(j[i], where + "[" + std::to_string(i) + "]");
        if (v < 1) fail(where, "indices are 1-based");
        out.push_back(v - 1);
    }
    return out;
}

std::vector<MatrixXd> matrix_list(const json& j, const std::string& where) {
    if (!j.is_array()) fail(where, "expected an array of matrices");
    std::vector<MatrixXd> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(matrix_from_json(j[i], where + "[" + std::to_string(i) + "]"));
    return out;
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path q(p);
    return q.is_absolute() ? q : base / q;
}

ForceSpec parse_force(const json& j, const std::string& where) {
    check_keys(j, where, {"kind", "input", "std", "t0", "amplitude", "width", "f_lo", "f_hi"});
    ForceSpec f;
    const std::string kind = j.value("kind", "gwn");
    if (kind == "gwn")
        f.kind = ForceKind::gwn;
    else if (kind == "impact")
        f.kind = ForceKind::impact;
    else if (kind == "narrowband")
        f.kind = ForceKind::narrowband;
    else
        fail(where + ".kind", "unknown force kind '" + kind + "'");
    if (!j.contains("input")) fail(where, "missing 'input'");
    f.input = get_int(j["input"], where + ".input") - 1;
    if (j.contains("std")) f.std = get_number(j["std"], where + ".std");
    if (j.contains("t0")) f.t0 = get_number(j["t0"], where + ".t0");
    if (j.contains("amplitude")) f.amplitude = get_number(j["amplitude"], where + ".amplitude");
    if (j.contains("width")) f.width = get_number(j["width"], where + ".width");
    if (j.contains("f_lo")) f.f_lo = get_number(j["f_lo"], where + ".f_lo");
    if (j.contains("f_hi")) f.f_hi = get_number(j["f_hi"], where + ".f_hi");
    return f;
}

Scenario parse_scenario(const json& j, const StructuralModel& m, const std::string& where) {
    check_keys(j, where, {"theta", "forces", "schedule", "duration", "noise_percent", "z0"});
    Scenario sc;
    sc.theta = j.contains("theta") ? vector_from_json(j["theta"], where + ".theta") : m.theta_nominal();
    if (j.contains("duration")) sc.duration = positive(j["duration"], where + ".duration");
    if (j.contains("noise_percent")) sc.noise_percent = get_number(j["noise_percent"], where + ".noise_percent");
    if (j.contains("forces")) {
        if (!j["forces"].is_array()) fail(where + ".forces", "expected an array");
        for (std::size_t i = 0; i < j["forces"].size(); ++i)
            sc.forces.push_back(parse_force(j["forces"][i], where + ".forces[" + std::to_string(i) + "]"));
    }
    if (j.contains("schedule")) {
        if (!j["schedule"].is_array()) fail(where + ".schedule", "expected an array");
        for (std::size_t i = 0; i < j["schedule"].size(); ++i) {
            const std::string w = where + ".schedule[" + std::to_string(i) + "]";
            const json& c = j["schedule"][i];
            check_keys(c, w, {"t", "index", "value"});
            if (!c.contains("t") || !c.contains("index") || !c.contains("value"))
                fail(w, "needs 't', 'index' and 'value'");
            sc.schedule.push_back({get_number(c["t"], w + ".t"), get_int(c["index"], w + ".index") - 1,
                                   get_number(c["value"], w + ".value")});
        }
    }
    if (j.contains("z0")) sc.z0 = vector_from_json(j["z0"], where + ".z0");
    try {
        sc.validate(m);
    } catch (const ValidationError& e) {
        fail(where, e.what());
    }
    return sc;
}

DefaultHyperOptions parse_hyper(const json& j, const std::string& where) {
    check_keys(j, where, {"gamma", "q_theta", "q_z", "q_p", "r_pd_factor", "p0_z", "p0_theta_rel", "p0_p"});
    DefaultHyperOptions o;
    if (j.contains("gamma")) o.gamma = positive(j["gamma"], where + ".gamma");
    if (j.contains("q_theta")) o.q_theta = positive(j["q_theta"], where + ".q_theta");
    if (j.contains("q_z")) o.q_z = positive(j["q_z"], where + ".q_z");
    if (j.contains("q_p")) o.q_p = positive(j["q_p"], where + ".q_p");
    if (j.contains("r_pd_factor")) o.r_pd_factor = positive(j["r_pd_factor"], where + ".r_pd_factor");
    if (j.contains("p0_z")) o.p0_z = positive(j["p0_z"], where + ".p0_z");
    if (j.contains("p0_theta_rel")) o.p0_theta_rel = positive(j["p0_theta_rel"], where + ".p0_theta_rel");
    if (j.contains("p0_p")) o.p0_p = positive(j["p0_p"], where + ".p0_p");
    return o;
}

JacobianStrategy parse_strategy(const std::string& s, const std::string& where) {
    if (s == "series_sensitivity") return JacobianStrategy::series_sensitivity;
    if (s == "finite_difference") return JacobianStrategy::finite_difference;
    if (s == "finite_difference_action") return JacobianStrategy::finite_difference_action;
    fail(where, "unknown Jacobian strategy '" + s + "'");
}

}  // namespace

MatrixXd matrix_from_json(const json& j, const std::string& where) {
    if (!j.is_array() || j.empty()) fail(where, "expected a non-empty array of rows");
    const std::size_t rows = j.size();
    if (!j[0].is_array()) fail(where, "expected an array of rows");
    const std::size_t cols = j[0].size();
    MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r) {
        if (!j[r].is_array() || j[r].size() != cols) fail(where, "rows must all have " + std::to_string(cols) + " entries");
        for (std::size_t c = 0; c < cols; ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                get_number(j[r][c], where + "[" + std::to_string(r) + "][" + std::to_string(c) + "]");
    }
    return m;
}

VectorXd vector_from_json(const json& j, const std::string& where) {
    if (!j.is_array()) fail(where, "expected an array of numbers");
    VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i)
        v(static_cast<Eigen::Index>(i)) = get_number(j[i], where + "[" + std::to_string(i) + "]");
    return v;
}

json matrix_to_json(const MatrixXd& m) {
    json out = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        out.push_back(std::move(row));
    }
    return out;
}

json vector_to_json(const VectorXd& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError(path.string() + ": invalid JSON: " + e.what());
    }
}

StructuralModel parse_model(const json& j, const std::string& where) {
    check_keys(j, where, {"mass", "k0", "c0", "k_sub", "c_sub", "s_p", "force_dofs", "strain_map", "stress_map", "dt",
                          "theta_nominal", "sensors", "description"});
    ModelParts p;
    if (!j.contains("mass")) fail(where, "missing 'mass'");
    const json& jm = j["mass"];
    if (jm.is_array() && !jm.empty() && jm[0].is_number())
        p.mass = vector_from_json(jm, where + ".mass").asDiagonal();
    else
        p.mass = matrix_from_json(jm, where + ".mass");
    const int nd = static_cast<int>(p.mass.rows());
    if (j.contains("k0")) p.k0 = matrix_from_json(j["k0"], where + ".k0");
    if (j.contains("c0")) p.c0 = matrix_from_json(j["c0"], where + ".c0");
    if (j.contains("k_sub")) {
        if (j["k_sub"].is_string()) {
            const std::string s = j["k_sub"];
            if (s != "chain") fail(where + ".k_sub", "unknown generator '" + s + "'");
            p.k_sub = chain_substructures(nd);
        } else {
            p.k_sub = matrix_list(j["k_sub"], where + ".k_sub");
        }
    }
    if (j.contains("theta_nominal")) p.theta_nominal = vector_from_json(j["theta_nominal"], where + ".theta_nominal");
    if (j.contains("c_sub")) {
        if (j["c_sub"].is_string()) {
            const std::string s = j["c_sub"];
            if (s == "chain") {
                p.c_sub = chain_substructures(nd);
            } else if (s == "modal") {
                const auto nk = static_cast<Eigen::Index>(p.k_sub.size());
                if (p.theta_nominal.size() < nk) fail(where + ".c_sub", "modal damping needs theta_nominal");
                MatrixXd k = p.k0.size() ? p.k0 : MatrixXd::Zero(nd, nd);
                for (Eigen::Index s2 = 0; s2 < nk; ++s2) k += p.theta_nominal(s2) * p.k_sub[static_cast<std::size_t>(s2)];
                p.c_sub = modal_damping_substructures(p.mass, k);
            } else {
                fail(where + ".c_sub", "unknown generator '" + s + "'");
            }
        } else {
            p.c_sub = matrix_list(j["c_sub"], where + ".c_sub");
        }
    }
    if (j.contains("s_p") && j.contains("force_dofs")) fail(where, "give either 's_p' or 'force_dofs', not both");
    if (j.contains("s_p")) {
        if (j["s_p"].is_string()) {
            if (j["s_p"] != "base") fail(where + ".s_p", "unknown generator");
            p.s_p = -(p.mass * VectorXd::Ones(nd));
        } else {
            p.s_p = matrix_from_json(j["s_p"], where + ".s_p");
        }
    } else if (j.contains("force_dofs")) {
        const std::vector<int> dofs = index_list(j["force_dofs"], where + ".force_dofs");
        p.s_p = MatrixXd::Zero(nd, static_cast<Eigen::Index>(dofs.size()));
        for (std::size_t c = 0; c < dofs.size(); ++c) {
            if (dofs[c] >= nd) fail(where + ".force_dofs", "DOF " + std::to_string(dofs[c] + 1) + " out of range");
            p.s_p(dofs[c], static_cast<Eigen::Index>(c)) = 1.0;
        }
    } else {
        p.s_p = MatrixXd::Zero(nd, 0);
    }
    if (j.contains("strain_map")) p.strain_map = matrix_from_json(j["strain_map"], where + ".strain_map");
    if (j.contains("stress_map")) p.stress_map = matrix_from_json(j["stress_map"], where + ".stress_map");
    if (!j.contains("dt")) fail(where, "missing 'dt'");
    p.dt = positive(j["dt"], where + ".dt");
    try {
        return StructuralModel(std::move(p));
    } catch (const ValidationError& e) {
        fail(where, e.what());
    }
}

SensorConfig parse_sensors(const json& j, const std::string& where) {
    check_keys(j, where, {"strain", "disp", "vel", "acc", "n_pseudo"});
    SensorConfig c;
    if (j.contains("strain")) c.strain = index_list(j["strain"], where + ".strain");
    if (j.contains("disp")) c.disp = index_list(j["disp"], where + ".disp");
    if (j.contains("vel")) c.vel = index_list(j["vel"], where + ".vel");
    if (j.contains("acc")) c.acc = index_list(j["acc"], where + ".acc");
    if (j.contains("n_pseudo")) c.n_pseudo = get_int(j["n_pseudo"], where + ".n_pseudo");
    return c;
}

RunConfig load_run_config(const fs::path& path, const Overrides& ov) {
    const json j = read_json(path);
    const std::string where = path.string();
    check_keys(j, where, {"model", "sensors", "theta0", "seed", "scenario", "data", "hyper", "em", "initializer",
                          "observability", "description"});
    RunConfig rc;
    rc.path = path;
    const fs::path base = path.parent_path();
    if (!j.contains("model") || !j["model"].is_string()) fail(where, "'model' must name a model file");
    rc.model_path = resolve(base, j["model"].get<std::string>());
    if (!fs::exists(rc.model_path)) fail(where + ".model", "model file not found: " + rc.model_path.string());
    rc.model_json = read_json(rc.model_path);
    rc.model = parse_model(rc.model_json, rc.model_path.string());

    if (j.contains("sensors"))
        rc.sensors = parse_sensors(j["sensors"], where + ".sensors");
    else if (rc.model_json.contains("sensors"))
        rc.sensors = parse_sensors(rc.model_json["sensors"], rc.model_path.string() + ".sensors");
    else
        fail(where, "no sensor configuration in the run config or the model");
    try {
        rc.sensors.validate(rc.model);
    } catch (const ValidationError& e) {
        fail(where + ".sensors", e.what());
    }

    rc.theta0 = j.contains("theta0") ? vector_from_json(j["theta0"], where + ".theta0") : rc.model.theta_nominal();
    if (rc.theta0.size() != rc.model.n_theta())
        fail(where + ".theta0", "length " + std::to_string(rc.theta0.size()) + ", model has " +
                                    std::to_string(rc.model.n_theta()) + " parameters");

    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned()) fail(where + ".seed", "expected a non-negative integer");
        rc.seed = j["seed"].get<std::uint64_t>();
    }
    if (ov.seed) rc.seed = *ov.seed;

    if (j.contains("scenario")) {
        rc.scenario = parse_scenario(j["scenario"], rc.model, where + ".scenario");
    } else {
        rc.scenario.theta = rc.model.theta_nominal();
    }
    if (j.contains("data")) {
        if (!j["data"].is_string()) fail(where + ".data", "expected a file path");
        rc.data = resolve(base, j["data"].get<std::string>());
    }
    if (j.contains("hyper")) rc.hyper = parse_hyper(j["hyper"], where + ".hyper");

    if (j.contains("em")) {
        const json& e = j["em"];
        const std::string w = where + ".em";
        check_keys(e, w, {"tol", "itrmax", "project_blockdiag", "jacobian"});
        if (e.contains("tol")) rc.em.tol = positive(e["tol"], w + ".tol");
        if (e.contains("itrmax")) rc.em.itrmax = get_int(e["itrmax"], w + ".itrmax");
        if (e.contains("project_blockdiag")) {
            if (!e["project_blockdiag"].is_boolean()) fail(w + ".project_blockdiag", "expected a boolean");
            rc.em.project_blockdiag = e["project_blockdiag"];
        }
        if (e.contains("jacobian")) {
            if (!e["jacobian"].is_string()) fail(w + ".jacobian", "expected a string");
            rc.em.strategy = parse_strategy(e["jacobian"], w + ".jacobian");
        }
    }
    if (j.contains("initializer")) {
        const json& e = j["initializer"];
        const std::string w = where + ".initializer";
        check_keys(e, w, {"tol", "itrmax"});
        if (e.contains("tol")) rc.init.tol = positive(e["tol"], w + ".tol");
        if (e.contains("itrmax")) rc.init.itrmax = get_int(e["itrmax"], w + ".itrmax");
    }
    if (ov.tol) rc.em.tol = rc.init.tol = *ov.tol;
    if (ov.itrmax) rc.em.itrmax = rc.init.itrmax = *ov.itrmax;
    if (!(rc.em.tol > 0.0)) fail("--tol", "must be positive");
    if (rc.em.itrmax < 1 || rc.init.itrmax < 1) fail(where, "itrmax must be at least 1");

    if (j.contains("observability")) {
        const json& o = j["observability"];
        const std::string w = where + ".observability";
        check_keys(o, w, {"k_max", "z0", "trials", "formulation"});
        if (o.contains("k_max")) rc.obs.k_max = get_int(o["k_max"], w + ".k_max");
        if (o.contains("z0")) {
            if (o["z0"].is_string()) {
                rc.obs.z0 = o["z0"];
                if (rc.obs.z0 != "ones" && rc.obs.z0 != "random") fail(w + ".z0", "expected 'ones', 'random' or a vector");
            } else {
                rc.obs.z0 = "given";
                rc.obs.z0_values = vector_from_json(o["z0"], w + ".z0");
                if (rc.obs.z0_values->size() != 2 * rc.model.n_dof()) fail(w + ".z0", "wrong length");
            }
        }
        if (o.contains("trials")) rc.obs.trials = get_int(o["trials"], w + ".trials");
        if (o.contains("formulation")) {
            const std::string f = o.value("formulation", "bilinear");
            if (f == "bilinear")
                rc.obs.formulation = OrcFormulation::bilinear;
            else if (f == "literal")
                rc.obs.formulation = OrcFormulation::literal;
            else
                fail(w + ".formulation", "unknown formulation '" + f + "'");
        }
    }
    return rc;
}

}  // namespace bem::cli

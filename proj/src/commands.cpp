#include <cstdio>
#include <iostream>
#include <sstream>

#include "cli.hpp"

namespace bem::cli {

namespace {

void note(const Overrides& ov, const std::string& msg) {
    if (!ov.quiet) std::cerr << msg << "\n";
}

json layout_json(const StructuralModel& m, const SensorConfig& cfg) {
    return {{"n_dof", m.n_dof()}, {"n_theta", m.n_theta()}, {"n_input", m.n_input()}, {"n_meas", cfg.n_meas()},
            {"n_pseudo", cfg.n_pseudo}};
}

json sensors_json(const SensorConfig& cfg) {
    auto one_based = [](const std::vector<int>& v) {
        json a = json::array();
        for (int i : v) a.push_back(i + 1);
        return a;
    };
    return {{"strain", one_based(cfg.strain)}, {"disp", one_based(cfg.disp)}, {"vel", one_based(cfg.vel)},
            {"acc", one_based(cfg.acc)}, {"n_pseudo", cfg.n_pseudo}};
}

json scenario_json(const Scenario& sc) {
    json j;
    j["theta"] = vector_to_json(sc.theta);
    j["duration"] = sc.duration;
    j["noise_percent"] = sc.noise_percent;
    json forces = json::array();
    for (const auto& f : sc.forces) {
        json fj = {{"kind", to_string(f.kind)}, {"input", f.input + 1}};
        switch (f.kind) {
            case ForceKind::gwn: fj["std"] = f.std; break;
            case ForceKind::impact:
                fj["t0"] = f.t0;
                fj["amplitude"] = f.amplitude;
                fj["width"] = f.width;
                break;
            case ForceKind::narrowband:
                fj["std"] = f.std;
                fj["f_lo"] = f.f_lo;
                fj["f_hi"] = f.f_hi;
                break;
        }
        forces.push_back(fj);
    }
    j["forces"] = forces;
    json sched = json::array();
    for (const auto& c : sc.schedule) sched.push_back({{"t", c.t}, {"index", c.index + 1}, {"value", c.value}});
    j["schedule"] = sched;
    if (sc.z0.size()) j["z0"] = vector_to_json(sc.z0);
    return j;
}

MatrixXd load_data(const RunConfig& rc, const std::optional<fs::path>& arg, std::optional<std::size_t> max_steps) {
    const std::optional<fs::path> path = arg ? arg : rc.data;
    if (!path) throw ValidationError("no data file: pass --data or set 'data' in " + rc.path.string());
    const Table t = read_csv(*path);
    MatrixXd y = select_measurements(t, rc.sensors, rc.model.dt(), path->string());
    if (max_steps) {
        if (*max_steps == 0) throw ValidationError("--max-steps must be positive");
        if (static_cast<Eigen::Index>(*max_steps) < y.rows()) y.conservativeResize(static_cast<Eigen::Index>(*max_steps), Eigen::NoChange);
    }
    return y;
}

// time, then one mean/std pair per requested row of a (rows x n+1) trajectory
Table trajectory_table(const MatrixXd& mean, const MatrixXd& var, int first, int count,
                       const std::vector<std::string>& labels, double dt) {
    Table t;
    t.header.push_back("time");
    for (const auto& l : labels) {
        t.header.push_back(l + "_mean");
        t.header.push_back(l + "_std");
    }
    const Eigen::Index n1 = mean.cols();
    t.values.resize(n1, 1 + 2 * count);
    for (Eigen::Index k = 0; k < n1; ++k) {
        t.values(k, 0) = static_cast<double>(k) * dt;
        for (int i = 0; i < count; ++i) {
            t.values(k, 1 + 2 * i) = mean(first + i, k);
            t.values(k, 2 + 2 * i) = std::sqrt(std::max(var(first + i, k), 0.0));
        }
    }
    return t;
}

std::vector<std::string> labels(const char* kind, int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back(std::string(kind) + "_" + std::to_string(i + 1));
    return out;
}

json trace_json(const std::vector<TracePoint>& trace) {
    json a = json::array();
    for (const auto& p : trace)
        a.push_back({{"iteration", p.iteration}, {"L", p.surrogate}, {"CON", std::isfinite(p.con) ? json(p.con) : json()}});
    return a;
}

HyperParams starting_phi(const RunConfig& rc, const MatrixXd& y) {
    return default_hyperparams(y, rc.model, rc.sensors, rc.theta0, rc.hyper);
}

}  // namespace

int cmd_simulate(const RunConfig& rc, const SimulateArgs& a, const Overrides& ov) {
    const Dataset clean = simulate(rc.model, rc.sensors, rc.scenario, rc.seed);
    const Dataset ds = add_noise(clean, rc.scenario.noise_percent, rc.seed);
    Table data, truth;
    data.header.push_back("time");
    truth.header.push_back("time");
    std::vector<Eigen::Index> dcols, tcols;
    for (std::size_t c = 0; c < ds.channels.size(); ++c) {
        (ds.channels[c].truth ? truth : data).header.push_back(ds.channels[c].name());
        (ds.channels[c].truth ? tcols : dcols).push_back(static_cast<Eigen::Index>(c));
    }
    const Eigen::Index n = ds.values.rows();
    data.values.resize(n, static_cast<Eigen::Index>(dcols.size()) + 1);
    truth.values.resize(n, static_cast<Eigen::Index>(tcols.size()) + 1);
    for (Eigen::Index k = 0; k < n; ++k) {
        const double t = static_cast<double>(k + 1) * ds.dt;
        data.values(k, 0) = t;
        truth.values(k, 0) = t;
    }
    for (std::size_t i = 0; i < dcols.size(); ++i) data.values.col(static_cast<Eigen::Index>(i) + 1) = ds.values.col(dcols[i]);
    for (std::size_t i = 0; i < tcols.size(); ++i) truth.values.col(static_cast<Eigen::Index>(i) + 1) = ds.values.col(tcols[i]);

    json prov;
    prov["seed"] = rc.seed;
    prov["config"] = rc.path.string();
    prov["model_file"] = rc.model_path.string();
    prov["model"] = rc.model_json;
    prov["dt"] = rc.model.dt();
    prov["steps"] = n;
    prov["sensors"] = sensors_json(rc.sensors);
    prov["scenario"] = scenario_json(rc.scenario);
    prov["rng"] = "splitmix64 counter, streams per force and per noise channel";

    write_text_atomic(a.out / "data.csv", format_csv(data));
    write_text_atomic(a.out / "truth.csv", format_csv(truth));
    write_json_atomic(a.out / "scenario.json", prov);
    note(ov, "wrote " + std::to_string(n) + " samples to " + a.out.string());
    return ok;
}

int cmd_observability(const RunConfig& rc, const ObservabilityArgs& a, const Overrides& ov) {
    const int k_max = a.k_max.value_or(rc.obs.k_max.value_or(default_k_max(rc.model)));
    const std::string mode = a.z0.value_or(rc.obs.z0);
    const int trials = a.trials.value_or(rc.obs.trials);
    OrcOptions opts;
    opts.formulation = rc.obs.formulation;
    const int nz = 2 * rc.model.n_dof();

    json report;
    VectorXd z0;
    std::optional<int> verdict;
    if (mode == "ones" || mode == "given") {
        z0 = mode == "given" ? *rc.obs.z0_values : VectorXd::Ones(nz);
    } else if (mode == "random") {
        if (trials < 1) throw ValidationError("--trials must be positive");
        const ModalScan ms = modal_first_order(rc.model, rc.sensors, k_max, trials, rc.seed, opts);
        int pick = 0;
        for (std::size_t t = 0; t < ms.firsts.size(); ++t)
            if (ms.firsts[t] == ms.modal) {
                pick = static_cast<int>(t);
                break;
            }
        z0 = random_z0(nz, rc.seed, pick);
        if (ms.modal >= 0) verdict = ms.modal;
        report["trials"] = {{"count", trials}, {"first_observable", ms.firsts}, {"modal", ms.modal},
                            {"disagreement", ms.disagreement}, {"table_trial", pick}};
        if (ms.disagreement) {
            std::ostringstream w;
            w << "warning: random z0 draws disagree on the first observable order:";
            for (int f : ms.firsts) w << " " << f;
            w << "; reporting the modal value " << ms.modal;
            std::cerr << w.str() << "\n";
        }
    } else {
        throw ValidationError("--z0 must be 'ones' or 'random'");
    }

    const ScanResult scan = scan_orders(rc.model, rc.sensors, z0, k_max, opts);
    if (mode != "random") verdict = scan.first_observable;

    if (!ov.quiet) {
        std::printf("%4s %8s %7s %10s\n", "k", "rank_OG", "rank_H", "observable");
        for (const auto& r : scan.rows)
            std::printf("%4d %8d %7d %10s\n", r.k, r.rank_og, r.rank_h, r.observable ? "yes" : "no");
    }
    if (verdict)
        std::printf("first observable order: %d\n", *verdict);
    else
        std::printf("not observable up to order %d\n", k_max);
    std::fflush(stdout);

    json rows = json::array();
    for (const auto& r : scan.rows)
        rows.push_back({{"k", r.k}, {"rank_OG", r.rank_og}, {"rank_H", r.rank_h}, {"observable", r.observable}});
    report["rows"] = rows;
    report["k_max"] = k_max;
    report["z0_mode"] = mode;
    report["z0"] = vector_to_json(z0);
    report["first_observable"] = verdict ? json(*verdict) : json();
    report["monotone"] = scan.monotone;
    report["per_component"] = scan.per_component;
    report["layout"] = layout_json(rc.model, rc.sensors);
    report["formulation"] = rc.obs.formulation == OrcFormulation::bilinear ? "bilinear" : "literal";
    write_json_atomic(a.out / "report.json", report);
    if (!scan.monotone) std::cerr << "warning: observability lost at a higher order\n";
    return ok;
}

int cmd_init_noise(const RunConfig& rc, const InitNoiseArgs& a, const Overrides& ov) {
    const MatrixXd y = load_data(rc, a.data, std::nullopt);
    const HyperParams phi = starting_phi(rc, y);
    const MatrixXd q0 = reduced_process_noise(phi.layout, rc.hyper.q_z, rc.hyper.q_p);
    const InitializerResult res = run_initializer(y, rc.model, rc.sensors, rc.theta0, q0, phi.r_a, rc.init);

    json j;
    j["source"] = "steady_state";
    j["converged"] = res.converged;
    j["iterations"] = res.iterations;
    j["failure"] = res.failure;
    j["layout"] = layout_json(rc.model, rc.sensors);
    j["theta0"] = vector_to_json(rc.theta0);
    j["Q_zeta"] = matrix_to_json(res.q_hat);
    j["R_a"] = matrix_to_json(res.r_hat);
    j["mu0_zeta"] = vector_to_json(res.mu0);
    j["P0_zeta"] = matrix_to_json(res.p0);
    j["trace"] = trace_json(res.trace);
    write_json_atomic(a.out / "noise_init.json", j);
    if (!res.failure.empty()) {
        std::cerr << "error: steady-state initializer failed: " << res.failure << "\n";
        return numerical_failure;
    }
    if (!res.converged) std::cerr << "warning: steady-state initializer hit itrmax without converging\n";
    note(ov, "initializer: " + std::to_string(res.iterations) + " iterations");
    return ok;
}

int cmd_identify(const RunConfig& rc, const IdentifyArgs& a, const Overrides& ov) {
    const MatrixXd y = load_data(rc, a.data, a.max_steps);
    HyperParams phi = starting_phi(rc, y);
    const StateLayout& L = phi.layout;
    if (a.noise_init) {
        const json j = read_json(*a.noise_init);
        const std::string w = a.noise_init->string();
        if (j.value("source", "") != "steady_state") throw ValidationError(w + ": 'source' must be 'steady_state'");
        if (j.value("layout", json()) != layout_json(rc.model, rc.sensors))
            throw ValidationError(w + ": layout does not match the model and sensors of " + rc.path.string());
        InitializerResult init;
        init.q_hat = matrix_from_json(j.at("Q_zeta"), w + ".Q_zeta");
        init.r_hat = matrix_from_json(j.at("R_a"), w + ".R_a");
        init.mu0 = vector_from_json(j.at("mu0_zeta"), w + ".mu0_zeta");
        init.p0 = matrix_from_json(j.at("P0_zeta"), w + ".P0_zeta");
        const int nzeta = L.nz() + L.np;
        if (init.q_hat.rows() != nzeta || init.q_hat.cols() != nzeta || init.p0.rows() != nzeta ||
            init.p0.cols() != nzeta || init.mu0.size() != nzeta || init.r_hat.rows() != phi.n_obs() ||
            init.r_hat.cols() != phi.n_obs())
            throw ValidationError(w + ": matrix sizes do not match the layout");
        phi = embed_initializer(init, phi);
        phi.validate();
    }

    BemOptions opts = rc.em;
    if (!ov.quiet)
        opts.on_iteration = [](int it, double l, double con, const HyperParams&) {
            std::fprintf(stderr, "iteration %3d  L = %.10g  CON = %.3e\n", it, l, con);
        };
    const BemResult res = run_bem(y, rc.model, rc.sensors, phi, opts);
    const double dt = rc.model.dt();

    Table trace;
    trace.header = {"iteration", "L", "CON"};
    trace.values.resize(static_cast<Eigen::Index>(res.trace.size()), 3);
    for (std::size_t i = 0; i < res.trace.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        trace.values(r, 0) = res.trace[i].iteration;
        trace.values(r, 1) = res.trace[i].surrogate;
        trace.values(r, 2) = res.trace[i].con;
    }
    write_text_atomic(a.out / "surrogate_trace.csv", format_csv(trace));

    Table hist;
    hist.header.push_back("iteration");
    const json names = hyper_to_json(phi, rc.sensors)["observation_labels"];
    for (const auto& nm : names) hist.header.push_back("R_" + nm.get<std::string>());
    for (int j = 0; j < L.np; ++j) hist.header.push_back("Q_p_" + std::to_string(j + 1));
    for (int s = 0; s < L.ntheta; ++s) hist.header.push_back("Q_theta_" + std::to_string(s + 1));
    hist.header.push_back("trace_Q_z");
    hist.values.resize(static_cast<Eigen::Index>(res.history.size()), static_cast<Eigen::Index>(hist.header.size()));
    for (std::size_t i = 0; i < res.history.size(); ++i) {
        const HyperParams& h = res.history[i];
        const auto r = static_cast<Eigen::Index>(i);
        Eigen::Index c = 0;
        hist.values(r, c++) = static_cast<double>(i + 1);
        for (int o = 0; o < h.n_obs(); ++o) hist.values(r, c++) = h.r_a(o, o);
        for (int j = 0; j < L.np; ++j) hist.values(r, c++) = h.q_a(L.p0() + j, L.p0() + j);
        for (int s = 0; s < L.ntheta; ++s) hist.values(r, c++) = h.q_a(L.theta0() + s, L.theta0() + s);
        hist.values(r, c++) = h.q_a.topLeftCorner(L.nz(), L.nz()).trace();
    }
    write_text_atomic(a.out / "hyper_history.csv", format_csv(hist));

    json noise = hyper_to_json(res.phi, rc.sensors);
    noise["source"] = "bem";
    noise["converged"] = res.converged;
    noise["iterations"] = res.iterations;
    noise["failure"] = res.failure;
    noise["failed_step"] = res.failed_step ? json(*res.failed_step) : json();
    noise["tol"] = opts.tol;
    noise["itrmax"] = opts.itrmax;
    noise["steps"] = y.rows();
    noise["initialized_from"] = a.noise_init ? json(a.noise_init->string()) : json("defaults");
    write_json_atomic(a.out / "noise.json", noise);

    if (res.smoothed_mean.size()) {
        const MatrixXd& m = res.smoothed_mean;
        const MatrixXd& v = res.smoothed_var;
        std::vector<std::string> zl = labels("disp", L.nd);
        for (const auto& s : labels("vel", L.nd)) zl.push_back(s);
        write_text_atomic(a.out / "states.csv", format_csv(trajectory_table(m, v, 0, L.nz(), zl, dt)));
        write_text_atomic(a.out / "params.csv",
                          format_csv(trajectory_table(m, v, L.theta0(), L.ntheta, labels("theta", L.ntheta), dt)));
        write_text_atomic(a.out / "input.csv",
                          format_csv(trajectory_table(m, v, L.p0(), L.np, labels("input", L.np), dt)));
    }
    if (!res.failure.empty()) {
        std::cerr << "error: identification failed: " << res.failure << "\n";
        return numerical_failure;
    }
    if (!res.converged)
        std::cerr << "warning: not converged after " << res.iterations << " iterations\n";
    else
        note(ov, "converged after " + std::to_string(res.iterations) + " iterations");
    return ok;
}

int cmd_virtual_sense(const RunConfig& rc, const VirtualArgs& a, const Overrides& ov) {
    const std::vector<VirtualChannel> channels = parse_channels(a.channels);
    for (const auto& ch : channels) {
        try {
            virtual_row(rc.model, ch);
        } catch (const ValidationError& e) {
            throw ValidationError(std::string("--channels: ") + e.what());
        }
    }
    const MatrixXd y = load_data(rc, a.data, a.max_steps);
    const fs::path noise_path = fs::is_directory(a.posterior) ? a.posterior / "noise.json" : a.posterior;
    const json j = read_json(noise_path);
    const HyperParams phi = hyper_from_json(j, starting_phi(rc, y), noise_path.string());
    if (j.contains("steps") && j["steps"].is_number_integer() && j["steps"].get<Eigen::Index>() != y.rows())
        std::cerr << "warning: posterior was identified on " << j["steps"].get<Eigen::Index>()
                  << " samples, data has " << y.rows() << "\n";
    const VirtualSeries vs = emit_virtual(y, rc.model, rc.sensors, phi, channels, rc.em.strategy);

    Table t;
    t.header.push_back("time");
    for (const auto& ch : channels) {
        t.header.push_back(channel_label(ch) + "_mean");
        t.header.push_back(channel_label(ch) + "_std");
    }
    const auto nc = static_cast<Eigen::Index>(channels.size());
    t.values.resize(vs.mean.rows(), 1 + 2 * nc);
    for (Eigen::Index k = 0; k < vs.mean.rows(); ++k) {
        t.values(k, 0) = static_cast<double>(k) * rc.model.dt();
        for (Eigen::Index c = 0; c < nc; ++c) {
            t.values(k, 1 + 2 * c) = vs.mean(k, c);
            t.values(k, 2 + 2 * c) = vs.std(k, c);
        }
    }
    write_text_atomic(a.out / "virtual.csv", format_csv(t));
    note(ov, "wrote " + std::to_string(channels.size()) + " virtual channels");
    return ok;
}

}  // namespace bem::cli

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "cli.hpp"

namespace bem::cli {

int run(int argc, char** argv) {
    CLI::App app{"Joint input, state, parameter and noise identification for linear structures", "bem_sysid"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config;
    std::string out = ".";
    std::optional<std::uint64_t> seed;
    std::optional<double> tol;
    std::optional<int> itrmax;
    bool quiet = false;
    app.add_option("--config", config, "run configuration (JSON)");
    app.add_option("--out", out, "output directory");
    app.add_option("--seed", seed, "random seed (overrides the config)");
    app.add_option("--tol", tol, "convergence tolerance on the surrogate");
    app.add_option("--itrmax", itrmax, "maximum EM iterations");
    app.add_flag("--quiet", quiet, "suppress progress output");

    auto* sim = app.add_subcommand("simulate", "generate data.csv, truth.csv and scenario.json");

    ObservabilityArgs oa;
    auto* obs = app.add_subcommand("observability", "rank test of the Lie-derivative matrix over orders 0..k_max");
    obs->add_option("--k-max", oa.k_max, "highest order (default 2 N_xi)");
    obs->add_option("--z0", oa.z0, "linearization state: ones or random")->check(CLI::IsMember({"ones", "random"}));
    obs->add_option("--trials", oa.trials, "random z0 draws when --z0 random");

    InitNoiseArgs ia;
    auto* init = app.add_subcommand("init-noise", "steady-state noise initializer, writes noise_init.json");
    init->add_option("--data", ia.data, "measurement CSV (default: config 'data')");

    IdentifyArgs da;
    auto* ident = app.add_subcommand("identify", "run BEM and write the posterior directory");
    ident->add_option("--data", da.data, "measurement CSV (default: config 'data')");
    ident->add_option("--noise-init", da.noise_init, "noise_init.json from init-noise");
    ident->add_option("--max-steps", da.max_steps, "use only the first N samples");

    VirtualArgs va;
    auto* virt = app.add_subcommand("virtual-sense", "posterior mean and std of unmeasured channels");
    virt->add_option("--data", va.data, "measurement CSV (default: config 'data')");
    virt->add_option("--posterior", va.posterior, "identify output directory or noise.json")->required();
    virt->add_option("--channels", va.channels, "comma list of kind:dof, e.g. disp:6,vel:6,acc:6")->required();
    virt->add_option("--max-steps", va.max_steps, "use only the first N samples");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : validation_failure;
    }

    try {
        if (config.empty()) throw ValidationError("--config is required");
        Overrides ov;
        ov.seed = seed;
        ov.tol = tol;
        ov.itrmax = itrmax;
        ov.quiet = quiet;
        if (const char* th = std::getenv("BEM_SYSID_THREADS"); th && !quiet)
            std::cerr << "note: BEM_SYSID_THREADS=" << th << " is informational; running single-threaded\n";
        const RunConfig rc = load_run_config(config, ov);
        const fs::path dir(out);
        if (sim->parsed()) return cmd_simulate(rc, {dir}, ov);
        if (obs->parsed()) {
            oa.out = dir;
            return cmd_observability(rc, oa, ov);
        }
        if (init->parsed()) {
            ia.out = dir;
            return cmd_init_noise(rc, ia, ov);
        }
        if (ident->parsed()) {
            da.out = dir;
            return cmd_identify(rc, da, ov);
        }
        if (virt->parsed()) {
            va.out = dir;
            return cmd_virtual_sense(rc, va, ov);
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return validation_failure;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << config << ": " << e.what() << "\n";
        return validation_failure;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return validation_failure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return numerical_failure;
    }
    return validation_failure;
}

int run(const std::vector<std::string>& args) {
    std::vector<std::string> storage = {"bem_sysid"};
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());
    return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace bem::cli

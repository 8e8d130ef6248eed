#include "smplab/experiments.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"Spike-variation and adjoint experiments for linear SPDEs driven by a Hilbert-space martingale"};
    app.set_version_flag("--version", smplab::version_string());
    app.require_subcommand(1);

    std::string config_path, out_dir = "runs";
    std::optional<std::size_t> paths;
    std::optional<std::uint64_t> seed;
    unsigned threads = 0;

    auto add_run = [&](const std::string& name, const std::string& help) {
        auto* cmd = app.add_subcommand(name, help);
        cmd->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
        cmd->add_option("--out", out_dir, "output root; results go to <out>/<config hash>/");
        cmd->add_option("--paths", paths, "override the number of Monte Carlo paths");
        cmd->add_option("--seed", seed, "override the seed");
        cmd->add_option("--threads", threads, "worker threads (default: SMPLAB_THREADS or all cores)");
        return cmd;
    };
    auto* simulate = add_run("simulate", "forward ensemble, cost and moment envelopes");
    auto* adjoint = add_run("adjoint", "adjoint solve and duality identities");
    auto* check_mp = add_run("check-mp", "optimise the control and check the pointwise Hamiltonian condition");
    auto* sweep = add_run("spike-sweep", "eps scaling of the variation and the variational inequality");
    auto* report = app.add_subcommand("report", "summarise every run under a directory");
    report->add_option("--out", out_dir, "directory holding run folders")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (report->parsed()) {
            std::cout << smplab::cmd_report(out_dir);
            return 0;
        }
        const auto cfg = smplab::load_config(config_path, paths, seed);
        std::string name = app.get_subcommands().front()->get_name();
        smplab::RunContext run(cfg, out_dir, name, threads);
        bool ok = false;
        if (simulate->parsed()) ok = smplab::cmd_simulate(run);
        if (adjoint->parsed()) ok = smplab::cmd_adjoint(run);
        if (check_mp->parsed()) ok = smplab::cmd_check_mp(run);
        if (sweep->parsed()) ok = smplab::cmd_spike_sweep(run);
        for (const auto& [check, c] : run.record().checks.items()) {
            std::cout << (c.at("pass").get<bool>() ? "PASS " : "FAIL ") << check << '\n';
        }
        std::cout << run.dir().string() << '\n';
        return ok ? 0 : 1;
    } catch (const smplab::ConfigError& e) {
        std::cerr << "invalid config: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
}

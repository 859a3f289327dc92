// vehids: command-line front end for the image-based intrusion detection
// pipeline. Exit codes: 0 success, 1 configuration error, 2 data error,
// 3 numeric failure.

#include "vehids/error.hpp"
#include "vehids/ingest.hpp"
#include "vehids/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

namespace {

struct StageOptions {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    bool skip_hpo = false;
    bool quiet = false;
};

void add_stage_options(CLI::App* cmd, StageOptions& o)
{
    cmd->add_option("-c,--config", o.config, "Run configuration (JSON)")->required();
    cmd->add_option("-o,--out", o.out, "Output directory (overrides the config)");
    cmd->add_option("--seed", o.seed, "Run seed (overrides the config and VEHIDS_SEED)");
    cmd->add_option("-j,--jobs", o.jobs, "Parallel objective evaluations during tuning");
    cmd->add_flag("--skip-hpo", o.skip_hpo, "Use fixed hyperparameters instead of the swarm search");
    cmd->add_flag("-q,--quiet", o.quiet, "Suppress progress output");
}

vehids::RunConfig load_config(const StageOptions& o)
{
    auto c = vehids::RunConfig::load(o.config);
    if (!o.out.empty())
        c.output_dir = o.out;
    if (o.seed)
        c.seed = *o.seed;
    if (o.jobs)
        c.jobs = *o.jobs;
    if (o.skip_hpo)
        c.skip_hpo = true;
    return c;
}

int run(int argc, char** argv)
{
    CLI::App app{"Image-based intrusion detection for vehicular networks"};
    app.require_subcommand(1);
    app.set_version_flag("--version", vehids::tool_version);

    std::string synth_config, synth_out;
    std::size_t synth_records = 50000;
    std::uint64_t synth_seed = 0;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic labeled CAN log");
    synth->add_option("-c,--config", synth_config, "Synthetic traffic configuration (JSON)");
    synth->add_option("-n,--records", synth_records, "Record count when no config is given");
    synth->add_option("--seed", synth_seed, "Generator seed when no config is given");
    synth->add_option("-o,--out", synth_out, "Output log file")->required();

    StageOptions opts;
    struct Stage {
        const char* name;
        const char* help;
    };
    const Stage stages[] = {
        {"transform", "Fit the quantile map and write the image set"},
        {"tune", "Search hyperparameters with particle swarm optimization"},
        {"train", "Train every model variant"},
        {"ensemble", "Build and evaluate ensembles of the top variants"},
        {"evaluate", "Stratified cross-validation of variants and ensembles"},
        {"run", "transform, tune, train and ensemble in sequence"},
    };
    std::vector<CLI::App*> stage_cmds;
    for (const auto& s : stages) {
        auto* cmd = app.add_subcommand(s.name, s.help);
        add_stage_options(cmd, opts);
        stage_cmds.push_back(cmd);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : vehids::exit_code_for(vehids::ConfigError(e.what()));
    }

    if (synth->parsed()) {
        auto cfg = synth_config.empty()
                       ? vehids::default_synth_config(synth_records, synth_seed)
                       : vehids::parse_synth_config(vehids::read_text_file(synth_config));
        const auto records = vehids::generate_synthetic_can(cfg);
        std::ofstream out(synth_out);
        if (!out)
            throw vehids::DataError("cannot write " + synth_out);
        vehids::write_can_log(out, records, cfg.class_names());
        std::cout << "synth: wrote " << records.size() << " records to " << synth_out << "\n";
        return 0;
    }

    std::ofstream null_sink;
    const auto config = load_config(opts);
    std::ostream& log = opts.quiet ? static_cast<std::ostream&>(null_sink) : std::cerr;
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "transform" || name == "run")
        vehids::cmd_transform(config, log);
    if (name == "tune" || name == "run")
        vehids::cmd_tune(config, log);
    if (name == "train" || name == "run")
        vehids::cmd_train(config, log);
    if (name == "ensemble" || name == "run") {
        const auto e = vehids::cmd_ensemble(config, log);
        if (!opts.quiet)
            vehids::write_summary_table(std::cout, e.rows);
    }
    if (name == "evaluate") {
        const auto cv = vehids::cmd_evaluate(config, log);
        if (!opts.quiet)
            vehids::write_summary_table(std::cout, cv.rows);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    try {
        return run(argc, argv);
    } catch (const vehids::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return vehids::exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return vehids::exit_code_for(vehids::DataError(e.what()));
    }
}

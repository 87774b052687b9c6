// thresher: pipeline for detecting non-linear and threshold effects of
// explanatory variables on a continuous travel outcome. Ensemble learners
// produce partial-dependence curves, curves yield knots, knots yield
// piecewise bases, and a nested random-intercept model yields significance,
// magnitudes, and elasticities.
#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "thresher/config.hpp"
#include "thresher/pipeline.hpp"

namespace {

struct StageArgs {
    std::string config_path;
    std::string out_dir;
    unsigned jobs = 0;        // 0 = use the config's value
    long long seed = -1;      // <0 = use the config's value
};

thresher::pipeline::RunConfig load_run_config(const StageArgs& args) {
    auto config = thresher::pipeline::load_config(args.config_path);
    if (args.jobs > 0) config.jobs = args.jobs;
    if (args.seed >= 0) config.ml.seed = static_cast<std::uint64_t>(args.seed);
    return config;
}

void add_stage_options(CLI::App* cmd, StageArgs& args) {
    cmd->add_option("-c,--config", args.config_path, "Run configuration (JSON)")->required();
    cmd->add_option("-o,--out", args.out_dir, "Output directory")->required();
    cmd->add_option("-j,--jobs", args.jobs, "Worker threads (default: config value)");
    cmd->add_option("--seed", args.seed, "Override the ML seed from the config");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"thresher: threshold effects of explanatory variables on travel outcomes"};
    app.require_subcommand(1);

    StageArgs synth_args, run_args, ml_args, pdp_args, knots_args, mlm_args, elasticity_args;

    auto* synth_cmd =
        app.add_subcommand("synth", "Generate synthetic waves and a ready-to-run config");
    synth_cmd->add_option("-c,--config", synth_args.config_path, "Synth job (JSON)")->required();
    synth_cmd->add_option("-o,--out", synth_args.out_dir, "Output directory")->required();

    auto* run_cmd = app.add_subcommand("run-all", "Run the full pipeline for every wave");
    add_stage_options(run_cmd, run_args);
    auto* ml_cmd = app.add_subcommand("ml", "Clean, screen, grid-search and fit the ensembles");
    add_stage_options(ml_cmd, ml_args);
    auto* pdp_cmd = app.add_subcommand("pdp", "Partial-dependence curves from persisted models");
    add_stage_options(pdp_cmd, pdp_args);
    auto* knots_cmd = app.add_subcommand("knots", "Detect and consolidate knots from PDP curves");
    add_stage_options(knots_cmd, knots_args);
    auto* mlm_cmd = app.add_subcommand("mlm", "Stepwise multilevel models from detected knots");
    add_stage_options(mlm_cmd, mlm_args);
    auto* elasticity_cmd =
        app.add_subcommand("elasticity", "Elasticity tables from persisted coefficients");
    add_stage_options(elasticity_cmd, elasticity_args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth_cmd->parsed()) {
            const auto job = thresher::pipeline::load_synth_job(synth_args.config_path);
            const auto path = thresher::pipeline::run_synth_job(job, synth_args.out_dir);
            std::printf("wrote %s\n", path.c_str());
        } else if (run_cmd->parsed()) {
            const auto config = load_run_config(run_args);
            thresher::pipeline::run_all(config, run_args.out_dir);
            std::printf("pipeline complete: %s\n", run_args.out_dir.c_str());
        } else if (ml_cmd->parsed()) {
            thresher::pipeline::run_ml(load_run_config(ml_args), ml_args.out_dir);
        } else if (pdp_cmd->parsed()) {
            thresher::pipeline::run_pdp(load_run_config(pdp_args), pdp_args.out_dir);
        } else if (knots_cmd->parsed()) {
            thresher::pipeline::run_knots(load_run_config(knots_args), knots_args.out_dir);
        } else if (mlm_cmd->parsed()) {
            thresher::pipeline::run_mlm(load_run_config(mlm_args), mlm_args.out_dir);
        } else if (elasticity_cmd->parsed()) {
            thresher::pipeline::run_elasticity(load_run_config(elasticity_args),
                                               elasticity_args.out_dir);
        }
    } catch (const thresher::pipeline::StageError& e) {
        std::fprintf(stderr, "error in %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

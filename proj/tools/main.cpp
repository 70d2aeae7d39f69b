#include "commands.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace flars;
using namespace flars::cli;

int main(int argc, char** argv) {
    CLI::App app{"Functional least angle regression: selection, mixed-model fitting and prediction"};
    app.require_subcommand(1);

    std::string config_path, out_dir = ".";
    std::optional<std::uint64_t> seed;
    int threads = 1;
    app.add_option("--config", config_path, "JSON project config (simulation config for simulate)");
    app.add_option("--seed", seed, "seed overriding the config");
    app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    app.add_option("--out", out_dir, "output directory");

    std::string manifest, model, selected, trace;
    double threshold = 0.10;
    auto* sel = app.add_subcommand("select", "run fLARS and export the path trace");
    sel->add_option("--manifest", manifest, "data manifest")->required();
    auto* fit = app.add_subcommand("fit", "fit fixed effects (and the GP part) on selected variables");
    fit->add_option("--manifest", manifest, "data manifest")->required();
    fit->add_option("--selected", selected, "comma-separated ids or a selection.json")->required();
    auto* pred = app.add_subcommand("predict", "predict with a saved model");
    pred->add_option("--model", model, "model.json written by fit")->required();
    pred->add_option("--manifest", manifest, "data manifest")->required();
    auto* simc = app.add_subcommand("simulate", "run the replicated simulation study");
    auto* rep = app.add_subcommand("report", "stopping analysis and plot data from a trace");
    rep->add_option("--trace", trace, "trace.csv written by select")->required();
    rep->add_option("--threshold", threshold, "CD threshold fraction")->check(CLI::Range(0.0, 1.0));
    for (auto* sub : {sel, fit, pred, simc, rep}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : Usage;
    }

    try {
        if (*simc) {
            if (config_path.empty()) throw CLI::ValidationError("simulate needs --config");
            return cmd_simulate(config_path, seed, threads, out_dir);
        }
        if (*rep) return cmd_report(trace, threshold, out_dir);

        ProjectConfig cfg = load_config(config_path);
        if (seed) {
            cfg.seed = *seed;
            cfg.flars.penalty.seed = *seed;
        }
        cfg.flars.threads = threads;
        if (*sel) return cmd_select(manifest, cfg, out_dir);
        if (*fit) return cmd_fit(manifest, cfg, parse_selected(selected), out_dir);
        if (*pred) return cmd_predict(model, manifest, cfg, out_dir);
    } catch (const CLI::Error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return Usage;
    } catch (const io::SchemaError& e) {
        std::cerr << "schema mismatch: " << e.what() << "\n";
        return SchemaMismatch;
    } catch (const OptimizationFailed& e) {
        std::cerr << "did not converge: " << e.what() << "\n";
        return NonConvergence;
    } catch (const std::exception& e) {
        // data errors: malformed files, degenerate or singular data
        std::cerr << "data error: " << e.what() << "\n";
        return DataFailure;
    }
    return Usage;
}

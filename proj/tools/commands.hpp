#pragma once

// The five flars commands. Each returns the process exit code and writes its
// outputs under out_dir; errors propagate as exceptions mapped in main.

#include "project.hpp"

#include "flars/serialize.hpp"

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace flars::cli {

enum ExitCode { Ok = 0, Usage = 1, DataFailure = 2, NonConvergence = 3, SchemaMismatch = 4 };

namespace detail {

inline std::string join(const std::vector<std::string>& v, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
    return out;
}

inline json nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline std::string out_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir.empty() ? "." : dir) / name).string();
}

} // namespace detail

struct SelectOutput {
    FlarsResult result;
    LoadedData data;
};

/// Runs the selection exactly as the in-process API would.
inline SelectOutput run_select(const DataManifest& manifest, const ProjectConfig& cfg, std::ostream& log) {
    LoadRequest req;
    req.candidates = cfg.candidates;
    if (cfg.gp.enabled) req.phi_columns = cfg.gp.phi_columns;
    SelectOutput out;
    out.data = load_data(manifest, cfg, req, log);
    out.result = run_flars(out.data.y, out.data.cands, cfg.flars);
    return out;
}

inline int cmd_select(const std::string& manifest_path, const ProjectConfig& cfg, const std::string& out_dir,
                      std::ostream& log = std::cerr) {
    const DataManifest manifest = load_manifest(manifest_path);
    const SelectOutput so = run_select(manifest, cfg, log);
    const FlarsResult& r = so.result;
    io::write_atomic(detail::out_path(out_dir, "trace.csv"), io::trace_csv(r.trace));

    json j;
    j["selected"] = r.selected;
    j["stop_index"] = r.diagnostics.stop_index;
    j["stop_rule"] = to_string(r.diagnostics.stop_rule);
    j["df_star"] = r.diagnostics.df_star;
    j["cp"] = detail::nullable(r.diagnostics.cp);
    j["sigma2"] = r.diagnostics.sigma2;
    j["cd_trace"] = json::array();
    for (double v : r.state.cd_history) j["cd_trace"].push_back(detail::nullable(v));
    j["n_samples"] = so.data.y.size();
    j["n_dropped"] = so.data.n_dropped;
    io::write_atomic(detail::out_path(out_dir, "selection.json"), j.dump(1) + "\n");

    std::ostringstream txt;
    txt << "samples used: " << so.data.y.size() << " (dropped " << so.data.n_dropped << ")\n";
    txt << "iterations computed: " << r.state.iteration << "\n";
    txt << "stopping rule: " << to_string(r.diagnostics.stop_rule) << ", stop index " << r.diagnostics.stop_index
        << "\n";
    txt << "selected (" << r.selected.size() << "): " << detail::join(r.selected, ", ") << "\n";
    txt << "iteration  variable  alpha  rho*  CD\n";
    for (const auto& rec : r.trace)
        txt << rec.iteration << "  " << rec.selected_id << "  " << io::format_double(rec.alpha) << "  "
            << (std::isfinite(rec.rho_star) ? io::format_double(rec.rho_star) : "-") << "  "
            << (std::isfinite(rec.cd) ? io::format_double(rec.cd) : "-") << "\n";
    io::write_atomic(detail::out_path(out_dir, "selection.txt"), txt.str());
    log << txt.str();
    return Ok;
}

/// Selected ids from a comma list or from a selection.json written by select.
inline std::vector<std::string> parse_selected(const std::string& spec) {
    if (spec.size() > 5 && spec.substr(spec.size() - 5) == ".json") {
        const json j = read_json_file(spec);
        if (!j.contains("selected")) throw io::SchemaError(spec + ": no 'selected' list");
        return j["selected"].get<std::vector<std::string>>();
    }
    std::vector<std::string> out;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!io::detail::trim(item).empty()) out.push_back(io::detail::trim(item));
    return out;
}

struct FitOutput {
    io::SavedModel model;
    LoadedData data;
    std::vector<double> rss_history;
    std::vector<double> objective_history;
};

inline FitOutput run_fit(const DataManifest& manifest, const ProjectConfig& cfg, const std::vector<std::string>& selected,
                         std::ostream& log) {
    if (selected.empty()) throw io::SchemaError("fit: no selected variables given");
    LoadRequest req;
    req.candidates = selected;
    if (cfg.gp.enabled) req.phi_columns = cfg.gp.phi_columns;
    FitOutput out;
    out.data = load_data(manifest, cfg, req, log);
    const auto& d = out.data;
    if (cfg.gp.enabled) {
        gp::BackfitOptions bo;
        bo.flars = cfg.flars;
        bo.hyper.restarts = cfg.gp.restarts;
        bo.hyper.seed = cfg.seed;
        bo.max_sweeps = cfg.gp.max_sweeps;
        bo.tol = cfg.gp.tol;
        const gp::SubjectIndex subjects = manifest.subject_column.empty()
                                              ? gp::SubjectIndex::single(d.y.size())
                                              : gp::SubjectIndex::from_labels(d.subject);
        const gp::MixedFit mf = gp::backfit(d.y, d.cands, selected, d.phi, subjects, bo);
        out.model.fixed = mf.fixed;
        out.model.gp = mf.gp;
        out.model.phi_columns = cfg.gp.phi_columns;
        out.model.converged = mf.converged;
        out.model.n_backfit_iters = mf.n_backfit_iters;
        out.rss_history = mf.rss_history;
        out.objective_history = mf.objective_history;
        const Vector g = gp::fit_g(mf.gp).first;
        out.model.residual_sd = stats::sd(d.y - mf.fixed.predict(d.cands) - g);
    } else {
        out.model.fixed = fit_fixed_effects(d.y, d.cands, selected, cfg.flars);
        out.model.residual_sd = stats::sd(d.y - out.model.fixed.predict(d.cands));
    }
    return out;
}

inline int cmd_fit(const std::string& manifest_path, const ProjectConfig& cfg, const std::vector<std::string>& selected,
                   const std::string& out_dir, std::ostream& log = std::cerr) {
    const DataManifest manifest = load_manifest(manifest_path);
    const FitOutput fo = run_fit(manifest, cfg, selected, log);
    io::write_atomic(detail::out_path(out_dir, "model.json"), io::model_to_json(fo.model));
    json diag;
    diag["gp_enabled"] = fo.model.gp.has_value();
    diag["converged"] = fo.model.converged;
    diag["n_backfit_iters"] = fo.model.n_backfit_iters;
    diag["rss_history"] = fo.rss_history;
    diag["objective_history"] = fo.objective_history;
    diag["residual_sd"] = fo.model.residual_sd;
    diag["n_samples"] = fo.data.y.size();
    diag["n_dropped"] = fo.data.n_dropped;
    io::write_atomic(detail::out_path(out_dir, "fit_diagnostics.json"), diag.dump(1) + "\n");
    if (fo.model.gp)
        log << "backfit sweeps: " << fo.model.n_backfit_iters << (fo.model.converged ? " (converged)\n" : " (not converged)\n");
    log << "model written to " << detail::out_path(out_dir, "model.json") << "\n";
    return fo.model.converged ? Ok : NonConvergence;
}

struct PredictionRow {
    std::string subject;
    std::string visit;
    double mean = 0.0;
    double sd = 0.0;
};

inline std::vector<PredictionRow> run_predict(const io::SavedModel& model, const DataManifest& manifest,
                                              const ProjectConfig& cfg, std::ostream& log) {
    LoadRequest req;
    req.need_response = false;
    req.candidates = model.fixed.ids();
    req.phi_columns = model.phi_columns;
    ProjectConfig c = cfg;
    if (model.fixed.rep) c.representation = model.fixed.rep->config;
    const LoadedData d = load_data(manifest, c, req, log);
    if (model.fixed.rep && !d.cands.functional.empty()) {
        const TimeGrid& g = d.cands.functional.front().data.grid;
        if (g.points() != model.fixed.rep->grid.points())
            throw io::SchemaError("predict: functional grid differs from the grid the model was fitted on");
    }
    const Index n = static_cast<Index>(d.subject.size());
    std::vector<PredictionRow> rows;
    if (n == 0) return rows;
    const Vector fixed = model.fixed.predict(d.cands);
    const auto weights = gp::new_subject_weights_from_string(cfg.gp.new_subject_weights);
    for (Index i = 0; i < n; ++i) {
        PredictionRow r;
        r.subject = d.subject[static_cast<std::size_t>(i)];
        r.visit = d.visit[static_cast<std::size_t>(i)];
        if (model.gp) {
            const Vector phi = d.phi.row(i).transpose();
            const bool known = !manifest.subject_column.empty() ? model.gp->subjects.find(r.subject).has_value()
                                                                 : model.gp->subjects.ids.size() == 1;
            const gp::Prediction p = known ? gp::predict_within_subject(
                                                 *model.gp, manifest.subject_column.empty() ? model.gp->subjects.ids[0]
                                                                                            : r.subject,
                                                 fixed(i), phi)
                                           : gp::predict_new(*model.gp, fixed(i), phi, weights);
            r.mean = p.mean;
            r.sd = std::sqrt(p.var);
        } else {
            r.mean = fixed(i);
            r.sd = model.residual_sd;
        }
        rows.push_back(r);
    }
    return rows;
}

inline std::string predictions_csv(const std::vector<PredictionRow>& rows) {
    std::ostringstream out;
    out << "subject,visit,mean,sd\n";
    for (const auto& r : rows)
        out << r.subject << ',' << r.visit << ',' << io::format_double(r.mean) << ',' << io::format_double(r.sd) << '\n';
    return out.str();
}

inline io::SavedModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io::DataError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return io::model_from_json(ss.str());
}

inline int cmd_predict(const std::string& model_path, const std::string& manifest_path, const ProjectConfig& cfg,
                       const std::string& out_dir, std::ostream& log = std::cerr) {
    const io::SavedModel model = load_model(model_path);
    const DataManifest manifest = load_manifest(manifest_path);
    const auto rows = run_predict(model, manifest, cfg, log);
    io::write_atomic(detail::out_path(out_dir, "predictions.csv"), predictions_csv(rows));
    log << "wrote " << rows.size() << " predictions\n";
    return Ok;
}

struct SimulationOutput {
    std::vector<std::pair<std::string, sim::AggregateReport>> variants;
};

inline SimulationOutput run_simulation(const SimulationConfig& sc, int threads) {
    SimulationOutput out;
    if (sc.paired_modification) {
        FlarsOptions plain = sc.flars, modified = sc.flars;
        plain.modification2 = false;
        modified.modification2 = true;
        out.variants.emplace_back("unmodified", sim::run_replications(sc.scenario, plain, sc.reps, threads));
        out.variants.emplace_back("modified", sim::run_replications(sc.scenario, modified, sc.reps, threads));
    } else {
        out.variants.emplace_back(sc.flars.modification2 ? "modified" : "unmodified",
                                  sim::run_replications(sc.scenario, sc.flars, sc.reps, threads));
    }
    return out;
}

inline int cmd_simulate(const std::string& config_path, std::optional<std::uint64_t> seed, int threads,
                        const std::string& out_dir, std::ostream& log = std::cerr) {
    SimulationConfig sc = parse_simulation_config(read_json_file(config_path));
    if (seed) sc.scenario.seed = *seed;
    const SimulationOutput so = run_simulation(sc, threads);

    std::ostringstream reps, summary, timing;
    reps << "variant,replication,seed,rmse,true_pct,false_pct,stop_iteration,n_selected,selected_ids,failed,error\n";
    summary << "variant,reps,n_failed,mean_rmse,mean_true_pct,mean_false_pct\n";
    timing << "variant,replication,elapsed_seconds\n";
    json sj;
    sj["scenario"] = sc.which;
    sj["reps"] = sc.reps;
    sj["seed"] = sc.scenario.seed;
    sj["representation"] = to_string(sc.scenario.representation.kind);
    sj["normalization"] = to_string(sc.flars.norm);
    sj["variants"] = json::object();
    for (const auto& [name, agg] : so.variants) {
        for (const auto& r : agg.replications) {
            reps << name << ',' << r.replication << ',' << r.seed << ',' << io::format_double(r.rmse) << ','
                 << io::format_double(r.true_pct) << ',' << io::format_double(r.false_pct) << ',' << r.stop_iteration
                 << ',' << r.selected_ids.size() << ',' << detail::join(r.selected_ids, ";") << ','
                 << (r.failed ? 1 : 0) << ",\"" << r.error << "\"\n";
            timing << name << ',' << r.replication << ',' << io::format_double(r.elapsed_seconds) << '\n';
        }
        summary << name << ',' << sc.reps << ',' << agg.n_failed << ',' << io::format_double(agg.mean_rmse) << ','
                << io::format_double(agg.mean_true_pct) << ',' << io::format_double(agg.mean_false_pct) << '\n';
        sj["variants"][name] = {{"n_failed", agg.n_failed},
                                {"mean_rmse", agg.mean_rmse},
                                {"mean_true_pct", agg.mean_true_pct},
                                {"mean_false_pct", agg.mean_false_pct}};
        log << name << ": mean RMSE " << agg.mean_rmse << ", true " << agg.mean_true_pct << "%, false "
            << agg.mean_false_pct << "%, mean time " << agg.mean_elapsed_seconds << " s\n";
    }
    io::write_atomic(detail::out_path(out_dir, "replications.csv"), reps.str());
    io::write_atomic(detail::out_path(out_dir, "summary.csv"), summary.str());
    io::write_atomic(detail::out_path(out_dir, "summary.json"), sj.dump(1) + "\n");
    io::write_atomic(detail::out_path(out_dir, "timing.csv"), timing.str());
    return Ok;
}

/// Stopping analysis and plot data recomputed from an exported trace.
inline int cmd_report(const std::string& trace_path, double threshold, const std::string& out_dir,
                      std::ostream& log = std::cerr) {
    const auto trace = io::read_trace_csv(trace_path);
    if (trace.empty()) throw io::DataError(trace_path + ": empty trace");
    std::vector<double> cd;
    for (const auto& r : trace) cd.push_back(r.cd);
    const int stop = stopping_cd(cd, threshold);
    double mx = 0.0;
    for (double v : cd)
        if (std::isfinite(v)) mx = std::max(mx, v);

    std::ostringstream plot;
    plot << "iteration,alpha,rho_star,cd,threshold,df_star,cp\n";
    for (const auto& r : trace)
        plot << r.iteration << ',' << io::format_double(r.alpha) << ',' << io::format_double(r.rho_star) << ','
             << io::format_double(r.cd) << ',' << io::format_double(threshold * mx) << ','
             << io::format_double(r.df_star) << ',' << io::format_double(r.cp) << '\n';
    std::vector<std::string> selected;
    for (int k = 0; k < stop; ++k) selected.push_back(trace[static_cast<std::size_t>(k)].selected_id);
    json j;
    j["stop_index"] = stop;
    j["threshold_frac"] = threshold;
    j["max_cd"] = mx;
    j["entered_by_stop"] = selected;
    io::write_atomic(detail::out_path(out_dir, "cd_plot.csv"), plot.str());
    io::write_atomic(detail::out_path(out_dir, "report.json"), j.dump(1) + "\n");
    log << "CD stop index " << stop << " (threshold " << threshold << " x max CD " << mx << ")\n";
    log << "variables entered by then: " << detail::join(selected, ", ") << "\n";
    return Ok;
}

} // namespace flars::cli

#pragma once

// Project configuration, data manifest and ingestion for the flars CLI.

#include "flars/flars.hpp"
#include "flars/gpmix.hpp"
#include "flars/io.hpp"
#include "flars/simgen.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace flars::cli {

using nlohmann::json;
namespace fs = std::filesystem;

struct GpConfig {
    bool enabled = false;
    std::vector<std::string> phi_columns;
    int restarts = 5;
    int max_sweeps = 50;
    double tol = 1e-6;
    std::string new_subject_weights = "uniform";
};

struct ProjectConfig {
    RepresentationConfig representation;
    FlarsOptions flars;
    GpConfig gp;
    std::vector<std::string> candidates; // empty: all columns and curves
    std::uint64_t seed = 0;
};

struct FunctionalEntry {
    std::string id;
    std::string curve_file;
    std::string grid_file;
    std::optional<std::pair<double, double>> domain;
};

struct DataManifest {
    std::string response_file;
    std::string response_column = "y";
    std::string scalar_file;
    std::vector<FunctionalEntry> functional;
    std::string subject_column;
    std::string visit_column;
};

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io::DataError("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw io::SchemaError(path + ": invalid JSON: " + e.what());
    }
}

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw io::SchemaError(where + " must be an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw io::SchemaError(where + ": unknown key '" + k + "'");
}

inline std::optional<double> auto_or_value(const json& j, const std::string& where) {
    if (j.is_string()) {
        if (j.get<std::string>() == "auto") return std::nullopt;
        throw io::SchemaError(where + " must be \"auto\" or a number");
    }
    if (!j.is_number()) throw io::SchemaError(where + " must be \"auto\" or a number");
    const double v = j.get<double>();
    if (!(v >= 0)) throw io::SchemaError(where + " must be >= 0");
    return v;
}

inline std::string resolve(const fs::path& base, const std::string& p) {
    if (p.empty()) return p;
    const fs::path q(p);
    return q.is_absolute() ? q.string() : (base / q).string();
}

} // namespace detail

inline ProjectConfig parse_config(const json& j) {
    ProjectConfig c;
    detail::check_keys(j, {"representation", "normalization", "penalties", "stopping", "modification2", "gp",
                           "candidates", "seed", "threads"},
                       "config");
    try {
        if (j.contains("representation")) {
            const json& r = j["representation"];
            detail::check_keys(r, {"kind", "Q", "n_basis"}, "config.representation");
            c.representation.kind = representation_kind_from_string(r.value("kind", "GQ"));
            c.representation.quadrature_points = r.value("Q", 18);
            c.representation.n_basis = r.value("n_basis", 18);
        }
        if (j.contains("normalization")) c.flars.norm = normalization_from_string(j["normalization"].get<std::string>());
        if (j.contains("penalties")) {
            const json& p = j["penalties"];
            detail::check_keys(p, {"lambda1", "lambda2", "lambda1_grid", "lambda2_grid", "cv_folds"}, "config.penalties");
            if (p.contains("lambda1")) c.flars.penalty.lambda1 = detail::auto_or_value(p["lambda1"], "penalties.lambda1");
            if (p.contains("lambda2")) c.flars.penalty.lambda2 = detail::auto_or_value(p["lambda2"], "penalties.lambda2");
            if (p.contains("lambda1_grid")) c.flars.penalty.lambda1_grid = p["lambda1_grid"].get<std::vector<double>>();
            if (p.contains("lambda2_grid")) c.flars.penalty.lambda2_grid = p["lambda2_grid"].get<std::vector<double>>();
            if (p.contains("cv_folds")) c.flars.penalty.cv_folds = p["cv_folds"].get<int>();
        }
        if (j.contains("stopping")) {
            const json& s = j["stopping"];
            detail::check_keys(s, {"rule", "cd_threshold_frac", "max_iter"}, "config.stopping");
            c.flars.stop = stop_rule_from_string(s.value("rule", "cd"));
            c.flars.cd_threshold = s.value("cd_threshold_frac", 0.10);
            c.flars.max_iter = s.value("max_iter", 0);
        }
        if (j.contains("modification2")) {
            const json& m = j["modification2"];
            detail::check_keys(m, {"enabled", "kappa"}, "config.modification2");
            c.flars.modification2 = m.value("enabled", false);
            c.flars.kappa = m.value("kappa", 0.05);
        }
        if (j.contains("gp")) {
            const json& g = j["gp"];
            detail::check_keys(g, {"enabled", "phi_columns", "restarts", "max_sweeps", "tol", "new_subject_weights"},
                               "config.gp");
            c.gp.enabled = g.value("enabled", false);
            c.gp.phi_columns = g.value("phi_columns", std::vector<std::string>{});
            c.gp.restarts = g.value("restarts", 5);
            c.gp.max_sweeps = g.value("max_sweeps", 50);
            c.gp.tol = g.value("tol", 1e-6);
            c.gp.new_subject_weights = g.value("new_subject_weights", "uniform");
            gp::new_subject_weights_from_string(c.gp.new_subject_weights);
            if (c.gp.enabled && c.gp.phi_columns.empty())
                throw io::SchemaError("config.gp: phi_columns must be given when gp is enabled");
            if (c.gp.restarts < 1 || c.gp.max_sweeps < 1 || !(c.gp.tol > 0))
                throw io::SchemaError("config.gp: restarts, max_sweeps and tol must be positive");
        }
        if (j.contains("candidates")) c.candidates = j["candidates"].get<std::vector<std::string>>();
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("threads")) c.flars.threads = j["threads"].get<int>();
        c.flars.penalty.seed = c.seed;
        c.flars.validate();
    } catch (const json::exception& e) {
        throw io::SchemaError(std::string("config: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw io::SchemaError(std::string("config: ") + e.what());
    }
    return c;
}

inline ProjectConfig load_config(const std::string& path) {
    if (path.empty()) return {};
    return parse_config(read_json_file(path));
}

inline DataManifest parse_manifest(const json& j, const fs::path& base) {
    DataManifest m;
    detail::check_keys(j, {"response_file", "response_column", "scalar_file", "functional", "subject_column",
                           "visit_column"},
                       "manifest");
    try {
        m.response_file = detail::resolve(base, j.value("response_file", ""));
        m.response_column = j.value("response_column", "y");
        m.scalar_file = detail::resolve(base, j.value("scalar_file", ""));
        m.subject_column = j.value("subject_column", "");
        m.visit_column = j.value("visit_column", "");
        std::set<std::string> seen;
        for (const auto& f : j.value("functional", json::array())) {
            detail::check_keys(f, {"id", "curve_file", "grid_file", "domain"}, "manifest.functional");
            FunctionalEntry e;
            e.id = f.at("id").get<std::string>();
            e.curve_file = detail::resolve(base, f.at("curve_file").get<std::string>());
            e.grid_file = detail::resolve(base, f.at("grid_file").get<std::string>());
            if (f.contains("domain")) {
                const auto d = f["domain"].get<std::vector<double>>();
                if (d.size() != 2) throw io::SchemaError("manifest.functional.domain must have two numbers");
                e.domain = std::make_pair(d[0], d[1]);
            }
            if (!seen.insert(e.id).second) throw io::SchemaError("manifest: duplicate functional id '" + e.id + "'");
            m.functional.push_back(e);
        }
    } catch (const json::exception& e) {
        throw io::SchemaError(std::string("manifest: ") + e.what());
    }
    return m;
}

inline DataManifest load_manifest(const std::string& path) {
    return parse_manifest(read_json_file(path), fs::path(path).parent_path());
}

/// Everything read from a manifest, after dropping incomplete rows.
struct LoadedData {
    CandidateSet cands;
    Vector y;
    bool has_response = false;
    std::vector<std::string> subject;
    std::vector<std::string> visit;
    Matrix phi;
    std::vector<std::string> phi_columns;
    std::size_t n_dropped = 0;
    std::size_t n_rows = 0;
};

struct LoadRequest {
    bool need_response = true;
    std::vector<std::string> phi_columns;
    std::vector<std::string> candidates; // empty: all
};

/**
 * Reads every file in the manifest. Rows with a missing value in any used
 * column are dropped (the count is reported); non-finite values are errors.
 */
inline LoadedData load_data(const DataManifest& m, const ProjectConfig& cfg, const LoadRequest& req,
                            std::ostream& log = std::cerr) {
    LoadedData d;
    std::optional<io::CsvTable> resp, scal;
    if (!m.response_file.empty()) resp = io::read_csv(m.response_file, true);
    if (!m.scalar_file.empty()) scal = io::read_csv(m.scalar_file, true);
    if (req.need_response && !resp) throw io::SchemaError("manifest: response_file is required for this command");

    std::optional<std::size_t> n_rows;
    auto check_rows = [&](std::size_t n, const std::string& what) {
        if (!n_rows) n_rows = n;
        else if (*n_rows != n)
            throw io::DataError(what + " has " + std::to_string(n) + " rows, expected " + std::to_string(*n_rows));
    };
    if (resp) check_rows(resp->rows.size(), m.response_file);
    if (scal) check_rows(scal->rows.size(), m.scalar_file);

    // id-like columns may live in either table
    auto find_text_column = [&](const std::string& name) -> std::optional<std::vector<std::string>> {
        for (const auto* t : {scal ? &*scal : nullptr, resp ? &*resp : nullptr}) {
            if (!t) continue;
            if (const auto c = t->column(name)) {
                std::vector<std::string> out;
                for (const auto& r : t->rows) out.push_back(r[*c]);
                return out;
            }
        }
        return std::nullopt;
    };
    auto find_numeric_column = [&](const std::string& name) -> std::optional<Vector> {
        for (const auto* t : {scal ? &*scal : nullptr, resp ? &*resp : nullptr}) {
            if (!t) continue;
            if (const auto c = t->column(name)) return io::numeric_matrix(*t, {*c}).col(0);
        }
        return std::nullopt;
    };

    std::vector<std::string> missing;
    Vector y;
    if (resp) {
        const auto c = resp->column(m.response_column);
        if (c) {
            y = io::numeric_matrix(*resp, {*c}).col(0);
            d.has_response = true;
        } else if (req.need_response) {
            missing.push_back(m.response_column);
        }
    }

    const std::set<std::string> reserved = {m.subject_column, m.visit_column, m.response_column};
    const std::set<std::string> phi_set(req.phi_columns.begin(), req.phi_columns.end());
    const std::set<std::string> wanted(req.candidates.begin(), req.candidates.end());
    auto use = [&](const std::string& id) { return wanted.empty() || wanted.count(id) > 0; };

    std::vector<std::pair<std::string, Vector>> scalars;
    if (scal) {
        for (std::size_t c = 0; c < scal->header.size(); ++c) {
            const auto& name = scal->header[c];
            if (reserved.count(name) || phi_set.count(name) || !use(name)) continue;
            scalars.emplace_back(name, io::numeric_matrix(*scal, {c}).col(0));
        }
    }
    std::vector<std::pair<FunctionalEntry, Matrix>> curves;
    std::vector<TimeGrid> grids;
    for (const auto& f : m.functional) {
        if (!use(f.id)) continue;
        const io::CsvTable ct = io::read_csv(f.curve_file, false);
        const io::CsvTable gt = io::read_csv(f.grid_file, false);
        Matrix g = io::numeric_matrix(gt);
        if (g.cols() != 1) throw io::DataError(f.grid_file + ": grid file must have a single column");
        if (!g.allFinite()) throw io::DataError(f.grid_file + ": grid has missing values");
        try {
            grids.push_back(f.domain ? TimeGrid(g.col(0), f.domain->first, f.domain->second) : TimeGrid(g.col(0)));
        } catch (const InvalidArgument& e) {
            throw io::DataError(f.grid_file + ": " + e.what());
        }
        Matrix x = io::numeric_matrix(ct);
        if (ct.rows.empty()) x.resize(0, grids.back().size());
        if (x.cols() != grids.back().size())
            throw io::DataError(f.curve_file + ": " + std::to_string(x.cols()) + " columns but the grid has " +
                                std::to_string(grids.back().size()) + " points");
        check_rows(static_cast<std::size_t>(x.rows()), f.curve_file);
        curves.emplace_back(f, std::move(x));
    }
    for (const auto& id : req.candidates) {
        const bool found = std::any_of(scalars.begin(), scalars.end(), [&](const auto& s) { return s.first == id; }) ||
                           std::any_of(curves.begin(), curves.end(), [&](const auto& c) { return c.first.id == id; });
        if (!found) missing.push_back(id);
    }
    std::vector<Vector> phi_cols;
    for (const auto& name : req.phi_columns) {
        auto v = find_numeric_column(name);
        if (!v) missing.push_back(name);
        else phi_cols.push_back(*v);
    }
    std::optional<std::vector<std::string>> subj, vis;
    if (!m.subject_column.empty()) {
        subj = find_text_column(m.subject_column);
        if (!subj) missing.push_back(m.subject_column);
    }
    if (!m.visit_column.empty()) {
        vis = find_text_column(m.visit_column);
        if (!vis) missing.push_back(m.visit_column);
    }
    if (!missing.empty()) {
        std::string msg = "missing columns:";
        for (const auto& s : missing) msg += " " + s;
        throw io::SchemaError(msg);
    }

    const std::size_t n = n_rows.value_or(0);
    std::vector<Index> keep;
    for (std::size_t i = 0; i < n; ++i) {
        const Index r = static_cast<Index>(i);
        bool ok = !d.has_response || std::isfinite(y(r));
        for (const auto& s : scalars) ok = ok && std::isfinite(s.second(r));
        for (const auto& c : curves) ok = ok && c.second.row(r).allFinite();
        for (const auto& p : phi_cols) ok = ok && std::isfinite(p(r));
        if (subj) ok = ok && !io::is_missing((*subj)[i]);
        if (ok) keep.push_back(r);
    }
    d.n_rows = n;
    d.n_dropped = n - keep.size();
    if (d.n_dropped > 0) log << "dropped " << d.n_dropped << " of " << n << " rows with missing values\n";

    if (d.has_response) d.y = y(keep);
    for (std::size_t k = 0; k < curves.size(); ++k)
        d.cands.functional.push_back({curves[k].first.id, FunctionalSample(curves[k].second(keep, Eigen::all), grids[k])});
    for (auto& s : scalars) d.cands.scalar.push_back({s.first, s.second(keep)});
    d.cands.representation = cfg.representation;
    d.phi.resize(static_cast<Index>(keep.size()), static_cast<Index>(phi_cols.size()));
    for (std::size_t c = 0; c < phi_cols.size(); ++c) d.phi.col(static_cast<Index>(c)) = phi_cols[c](keep);
    d.phi_columns = req.phi_columns;
    for (Index r : keep) {
        d.subject.push_back(subj ? (*subj)[static_cast<std::size_t>(r)] : std::string());
        d.visit.push_back(vis ? (*vis)[static_cast<std::size_t>(r)] : std::to_string(r + 1));
    }
    for (std::size_t k = 1; k < d.cands.functional.size(); ++k)
        if (d.cands.functional[k].data.grid.points() != d.cands.functional[0].data.grid.points())
            throw io::DataError("functional variables must share one grid ('" + d.cands.functional[k].id + "' differs)");
    return d;
}

/// Simulation settings for the simulate command.
struct SimulationConfig {
    sim::ScenarioConfig scenario;
    int which = 1;
    int reps = 100;
    FlarsOptions flars;
    bool paired_modification = false; // run with and without Modification II
};

inline SimulationConfig parse_simulation_config(const json& j) {
    SimulationConfig s;
    detail::check_keys(j, {"scenario", "reps", "seed", "n_train", "n_test", "noise_sd", "grid_q", "n_functional",
                           "n_scalar", "representation", "normalization", "modification2", "paired", "stopping"},
                       "simulation config");
    try {
        s.which = j.value("scenario", 1);
        s.scenario = sim::ScenarioConfig::scenario(s.which);
        s.reps = j.value("reps", 100);
        s.scenario.seed = j.value("seed", std::uint64_t{1});
        s.scenario.n_train = j.value("n_train", s.scenario.n_train);
        s.scenario.n_test = j.value("n_test", s.scenario.n_test);
        s.scenario.noise_sd = j.value("noise_sd", s.scenario.noise_sd);
        s.scenario.grid_q = j.value("grid_q", s.scenario.grid_q);
        s.scenario.n_functional = j.value("n_functional", s.scenario.n_functional);
        s.scenario.n_scalar = j.value("n_scalar", s.scenario.n_scalar);
        if (j.contains("representation")) {
            const json& r = j["representation"];
            detail::check_keys(r, {"kind", "Q", "n_basis"}, "simulation config.representation");
            s.scenario.representation.kind = representation_kind_from_string(r.value("kind", "GQ"));
            s.scenario.representation.quadrature_points = r.value("Q", 18);
            s.scenario.representation.n_basis = r.value("n_basis", 18);
        }
        if (j.contains("normalization")) s.flars.norm = normalization_from_string(j["normalization"].get<std::string>());
        if (j.contains("modification2")) {
            const json& m = j["modification2"];
            detail::check_keys(m, {"enabled", "kappa"}, "simulation config.modification2");
            s.flars.modification2 = m.value("enabled", false);
            s.flars.kappa = m.value("kappa", 0.05);
        }
        if (j.contains("stopping")) {
            const json& st = j["stopping"];
            detail::check_keys(st, {"rule", "cd_threshold_frac", "max_iter"}, "simulation config.stopping");
            s.flars.stop = stop_rule_from_string(st.value("rule", "cd"));
            s.flars.cd_threshold = st.value("cd_threshold_frac", 0.10);
            s.flars.max_iter = st.value("max_iter", 0);
        }
        s.paired_modification = j.value("paired", false);
        if (s.reps < 1) throw io::SchemaError("simulation config: reps must be >= 1");
        s.scenario.validate();
        s.flars.validate();
    } catch (const json::exception& e) {
        throw io::SchemaError(std::string("simulation config: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw io::SchemaError(std::string("simulation config: ") + e.what());
    }
    return s;
}

} // namespace flars::cli

#pragma once

#include "flars/flars.hpp"
#include "flars/gpmix.hpp"
#include "flars/io.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace flars::io {

inline constexpr const char* model_format = "flars-model";
inline constexpr int model_version = 1;

/// Everything needed to predict with a fitted model.
struct SavedModel {
    FittedModel fixed;
    std::optional<gp::GpModel> gp;
    std::vector<std::string> phi_columns;
    bool converged = true;
    int n_backfit_iters = 0;
    double residual_sd = 0.0; // training residual SD, the predictive SD without a GP part
};

namespace detail {

using nlohmann::json;

inline json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector json_vec(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Vector::Map(v.data(), static_cast<Index>(v.size()));
}

inline json mat_json(const Matrix& m) {
    json rows = json::array();
    for (Index i = 0; i < m.rows(); ++i) rows.push_back(vec_json(m.row(i).transpose()));
    return rows;
}

inline Matrix json_mat(const json& j, Index cols) {
    Matrix m(static_cast<Index>(j.size()), cols);
    for (std::size_t i = 0; i < j.size(); ++i) {
        const Vector r = json_vec(j[i]);
        if (r.size() != cols) throw SchemaError("model file: ragged matrix");
        m.row(static_cast<Index>(i)) = r.transpose();
    }
    return m;
}

} // namespace detail

/// Versioned JSON text. Doubles are written in round-trip precision.
inline std::string model_to_json(const SavedModel& m) {
    using detail::json;
    json j;
    j["format"] = model_format;
    j["version"] = model_version;
    json fixed;
    fixed["intercept"] = m.fixed.intercept;
    if (m.fixed.rep) {
        const auto& rep = *m.fixed.rep;
        fixed["representation"] = {{"kind", to_string(rep.config.kind)},
                                   {"quadrature_points", rep.config.quadrature_points},
                                   {"n_basis", rep.config.n_basis}};
        fixed["grid"] = {{"points", detail::vec_json(rep.grid.points())},
                         {"lower", rep.grid.lower()},
                         {"upper", rep.grid.upper()}};
    } else {
        fixed["representation"] = nullptr;
        fixed["grid"] = nullptr;
    }
    fixed["functional"] = json::array();
    for (const auto& f : m.fixed.functional) fixed["functional"].push_back({{"id", f.id}, {"coef", detail::vec_json(f.coef)}});
    fixed["scalar"] = json::array();
    for (const auto& s : m.fixed.scalar) fixed["scalar"].push_back({{"id", s.id}, {"coef", s.coef}});
    j["fixed"] = fixed;
    j["converged"] = m.converged;
    j["n_backfit_iters"] = m.n_backfit_iters;
    j["residual_sd"] = m.residual_sd;
    if (m.gp) {
        const auto& g = *m.gp;
        json gj;
        gj["phi_columns"] = m.phi_columns;
        gj["kernel"] = {{"v1", g.kernel.v1}, {"w", detail::vec_json(g.kernel.w)}, {"sigma", g.kernel.sigma}};
        gj["scaler"] = {{"mean", detail::vec_json(g.scaler.mean)}, {"sd", detail::vec_json(g.scaler.sd)}};
        gj["train_phi"] = detail::mat_json(g.train_phi);
        gj["train_resid"] = detail::vec_json(g.train_resid);
        gj["subjects"] = json::array();
        for (std::size_t s = 0; s < g.subjects.ids.size(); ++s)
            gj["subjects"].push_back({{"id", g.subjects.ids[s]}, {"rows", g.subjects.rows[s]}});
        j["gp"] = gj;
    } else {
        j["gp"] = nullptr;
    }
    return j.dump(1) + "\n";
}

inline SavedModel model_from_json(const std::string& text) {
    using detail::json;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("model file is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || j.value("format", "") != model_format)
        throw SchemaError("model file: unexpected format tag");
    if (j.value("version", 0) != model_version)
        throw SchemaError("model file: unsupported version " + std::to_string(j.value("version", 0)));
    try {
        SavedModel m;
        const json& fx = j.at("fixed");
        m.fixed.intercept = fx.at("intercept").get<double>();
        if (!fx.at("representation").is_null()) {
            RepresentationConfig cfg;
            cfg.kind = representation_kind_from_string(fx["representation"].at("kind").get<std::string>());
            cfg.quadrature_points = fx["representation"].at("quadrature_points").get<int>();
            cfg.n_basis = fx["representation"].at("n_basis").get<int>();
            const TimeGrid grid(detail::json_vec(fx.at("grid").at("points")), fx["grid"].at("lower").get<double>(),
                                fx["grid"].at("upper").get<double>());
            m.fixed.rep = build_representation(cfg, grid);
        }
        for (const auto& f : fx.at("functional"))
            m.fixed.functional.push_back({f.at("id").get<std::string>(), detail::json_vec(f.at("coef"))});
        for (const auto& s : fx.at("scalar")) m.fixed.scalar.push_back({s.at("id").get<std::string>(), s.at("coef").get<double>()});
        if (!m.fixed.functional.empty() && !m.fixed.rep) throw SchemaError("model file: functional terms without a grid");
        m.converged = j.value("converged", true);
        m.n_backfit_iters = j.value("n_backfit_iters", 0);
        m.residual_sd = j.value("residual_sd", 0.0);
        if (!j.at("gp").is_null()) {
            const json& gj = j["gp"];
            gp::GpModel g;
            m.phi_columns = gj.at("phi_columns").get<std::vector<std::string>>();
            g.kernel.v1 = gj.at("kernel").at("v1").get<double>();
            g.kernel.w = detail::json_vec(gj["kernel"].at("w"));
            g.kernel.sigma = gj["kernel"].at("sigma").get<double>();
            g.kernel.validate();
            g.scaler.mean = detail::json_vec(gj.at("scaler").at("mean"));
            g.scaler.sd = detail::json_vec(gj["scaler"].at("sd"));
            g.train_phi = detail::json_mat(gj.at("train_phi"), g.kernel.dim());
            g.train_resid = detail::json_vec(gj.at("train_resid"));
            for (const auto& s : gj.at("subjects")) {
                g.subjects.ids.push_back(s.at("id").get<std::string>());
                g.subjects.rows.push_back(s.at("rows").get<std::vector<Index>>());
            }
            if (g.train_phi.rows() != g.train_resid.size() || g.subjects.total() != g.train_resid.size())
                throw SchemaError("model file: GP training data sizes disagree");
            m.gp = std::move(g);
        }
        return m;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("model file: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw SchemaError(std::string("model file: ") + e.what());
    }
}

} // namespace flars::io

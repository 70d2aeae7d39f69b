#pragma once

#include "flars/common.hpp"
#include "flars/flars.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flars::io {

/// Malformed or non-finite input data, with its location.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Input that does not match what a model or manifest expects.
struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CsvTable {
    std::vector<std::string> header; // empty without a header row
    std::vector<std::vector<std::string>> rows;
    std::string source;

    std::optional<std::size_t> column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        return std::nullopt;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Splits one line; double quotes group commas, "" escapes a quote.
inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(trim(cur));
    return out;
}

} // namespace detail

inline CsvTable parse_csv(std::istream& in, bool header, const std::string& source = "<stream>") {
    CsvTable t;
    t.source = source;
    std::string line;
    std::size_t lineno = 0;
    std::size_t width = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        auto cells = detail::split_line(line);
        if (header && t.header.empty()) {
            t.header = std::move(cells);
            width = t.header.size();
            continue;
        }
        if (width == 0) width = cells.size();
        if (cells.size() != width)
            throw DataError(source + ": line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                            " fields, expected " + std::to_string(width));
        t.rows.push_back(std::move(cells));
    }
    if (header && t.header.empty()) throw DataError(source + ": missing header row");
    return t;
}

inline CsvTable read_csv(const std::string& path, bool header) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    return parse_csv(in, header, path);
}

inline bool is_missing(const std::string& cell) { return cell.empty() || cell == "NA" || cell == "na" || cell == "NaN"; }

/// Parses a numeric cell; empty/NA is missing, infinities and text are errors.
inline std::optional<double> parse_number(const std::string& cell, const std::string& where) {
    if (is_missing(cell)) return std::nullopt;
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(cell, &used);
    } catch (const std::exception&) {
        throw DataError(where + ": '" + cell + "' is not a number");
    }
    if (used != cell.size()) throw DataError(where + ": '" + cell + "' is not a number");
    if (!std::isfinite(v)) throw DataError(where + ": non-finite value '" + cell + "'");
    return v;
}

inline std::string location(const CsvTable& t, std::size_t row, std::size_t col) {
    const std::size_t line = row + 1 + (t.header.empty() ? 0 : 1);
    std::string s = t.source + ": line " + std::to_string(line) + ", column " + std::to_string(col + 1);
    if (col < t.header.size()) s += " ('" + t.header[col] + "')";
    return s;
}

/// Numeric matrix with NaN marking missing cells.
inline Matrix numeric_matrix(const CsvTable& t, const std::vector<std::size_t>& cols) {
    Matrix m(static_cast<Index>(t.rows.size()), static_cast<Index>(cols.size()));
    for (std::size_t r = 0; r < t.rows.size(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c) {
            const auto v = parse_number(t.rows[r][cols[c]], location(t, r, cols[c]));
            m(static_cast<Index>(r), static_cast<Index>(c)) = v.value_or(std::numeric_limits<double>::quiet_NaN());
        }
    return m;
}

inline Matrix numeric_matrix(const CsvTable& t) {
    std::vector<std::size_t> cols(t.rows.empty() ? t.header.size() : t.rows.front().size());
    for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = i;
    return numeric_matrix(t, cols);
}

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "";
    char buf[32];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

/// Writes through a temporary file in the same directory, then renames.
inline void write_atomic(const std::string& path, const std::string& content) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    const std::filesystem::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
        out << content;
        out.flush();
        if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, p);
}

inline const char* trace_header() { return "iteration,selected_id,alpha,rho_star,cd,df_star,cp,rss"; }

/// Path trace as CSV; undefined values are empty cells.
inline std::string trace_csv(const std::vector<IterationRecord>& trace) {
    std::ostringstream out;
    out << trace_header() << '\n';
    for (const auto& r : trace)
        out << r.iteration << ',' << r.selected_id << ',' << format_double(r.alpha) << ','
            << format_double(r.rho_star) << ',' << format_double(r.cd) << ',' << format_double(r.df_star) << ','
            << format_double(r.cp) << ',' << format_double(r.rss) << '\n';
    return out.str();
}

inline std::vector<IterationRecord> parse_trace_csv(std::istream& in, const std::string& source = "<trace>") {
    const CsvTable t = parse_csv(in, true, source);
    const std::vector<std::string> expected = {"iteration", "selected_id", "alpha", "rho_star",
                                               "cd",        "df_star",     "cp",    "rss"};
    if (t.header != expected) throw SchemaError(source + ": header must be '" + trace_header() + "'");
    std::vector<IterationRecord> out;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        auto num = [&](std::size_t c) { return parse_number(row[c], location(t, r, c)).value_or(nan); };
        IterationRecord rec;
        rec.iteration = static_cast<int>(num(0));
        rec.selected_id = row[1];
        rec.alpha = num(2);
        rec.rho_star = num(3);
        rec.cd = num(4);
        rec.df_star = num(5);
        rec.cp = num(6);
        rec.rss = num(7);
        out.push_back(rec);
    }
    return out;
}

inline std::vector<IterationRecord> read_trace_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    return parse_trace_csv(in, path);
}

} // namespace flars::io

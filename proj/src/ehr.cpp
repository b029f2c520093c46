#include "oncokit/ehr.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "oncokit/error.hpp"

namespace oncokit {

namespace {

// Splits one CSV record; double quotes delimit fields and "" escapes a quote.
std::vector<std::string> split_csv(const std::string& line, std::size_t row) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (quoted) throw ParseError("unterminated quoted field", row);
    out.push_back(std::move(cur));
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::optional<double> parse_number(const std::string& s) {
    if (s.empty()) return std::nullopt;
    double v = 0.0;
    const char* first = s.data();
    if (*first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

}  // namespace

nlohmann::json stats_to_json(const NormStats& s) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, st] : s) j[name] = {{"mean", st.mean}, {"std", st.std}};
    return j;
}

NormStats stats_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("normalization stats must be a JSON object");
    NormStats s;
    for (const auto& [name, v] : j.items()) {
        if (!v.is_object() || !v.contains("mean") || !v.contains("std"))
            throw ConfigError("normalization stats for '" + name + "' need mean and std");
        s[name] = {v.at("mean").get<double>(), v.at("std").get<double>()};
    }
    return s;
}

void Cohort::validate() const {
    std::unordered_set<std::string> ids;
    for (const auto& s : subjects) {
        if (!ids.insert(s.id).second) throw DataError("duplicate subject id '" + s.id + "'");
        if (s.covariates.size() != feature_names.size())
            throw DataError("subject '" + s.id + "' has " + std::to_string(s.covariates.size()) +
                            " covariates, cohort width is " + std::to_string(feature_names.size()));
        if (!(s.time > 0.0) || !std::isfinite(s.time)) throw DataError("subject '" + s.id + "' has non-positive time");
        if (s.event != 0 && s.event != 1) throw DataError("subject '" + s.id + "' has event outside {0,1}");
    }
}

std::vector<double> Cohort::times() const {
    std::vector<double> t;
    t.reserve(subjects.size());
    for (const auto& s : subjects) t.push_back(s.time);
    return t;
}

std::vector<int> Cohort::events() const {
    std::vector<int> e;
    e.reserve(subjects.size());
    for (const auto& s : subjects) e.push_back(s.event);
    return e;
}

Cohort Cohort::subset(const std::vector<std::size_t>& idx) const {
    Cohort c;
    c.feature_names = feature_names;
    c.time_unit = time_unit;
    for (auto i : idx) {
        if (i >= subjects.size()) throw ContractError("Cohort::subset: index out of range");
        c.subjects.push_back(subjects[i]);
    }
    return c;
}

NormStats fit_stats(const Cohort& c) {
    NormStats st;
    const double n = static_cast<double>(c.size());
    for (std::size_t f = 0; f < c.width(); ++f) {
        double mean = 0.0, var = 0.0;
        for (const auto& s : c.subjects) mean += s.covariates[f];
        mean /= n;
        for (const auto& s : c.subjects) var += (s.covariates[f] - mean) * (s.covariates[f] - mean);
        var /= n;
        st[c.feature_names[f]] = {mean, std::sqrt(var)};
    }
    return st;
}

void apply_stats(Cohort& c, const NormStats& stats) {
    for (std::size_t f = 0; f < c.width(); ++f) {
        const auto it = stats.find(c.feature_names[f]);
        if (it == stats.end()) continue;
        const double sd = it->second.std > 0.0 ? it->second.std : 1.0;
        for (auto& s : c.subjects) s.covariates[f] = (s.covariates[f] - it->second.mean) / sd;
    }
}

EhrTable parse_ehr(const std::string& csv_text, const EhrOptions& opt) {
    std::istringstream in(csv_text);
    std::string line;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> row_numbers;  // 1-based line numbers for messages
    std::size_t lineno = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
        if (trim(line).empty()) continue;
        auto fields = split_csv(line, lineno);
        for (auto& f : fields) f = trim(f);
        if (header.empty()) {
            header = std::move(fields);
            continue;
        }
        rows.push_back(std::move(fields));
        row_numbers.push_back(lineno);
    }
    if (header.empty()) throw ParseError("missing header", 1);
    const char* required[4] = {"id", "time", "event", "center"};
    for (std::size_t i = 0; i < 4; ++i)
        if (header.size() <= i || header[i] != required[i])
            throw ParseError(std::string("header column ") + std::to_string(i + 1) + " must be '" + required[i] + "'", 1);

    std::vector<std::size_t> feature_cols;
    std::optional<std::size_t> ct_col, pet_col, mask_col;
    for (std::size_t c = 4; c < header.size(); ++c) {
        if (header[c] == "ct_path") ct_col = c;
        else if (header[c] == "pet_path") pet_col = c;
        else if (header[c] == "mask_path") mask_col = c;
        else feature_cols.push_back(c);
    }

    for (std::size_t r = 0; r < rows.size(); ++r)
        if (rows[r].size() != header.size())
            throw ParseError("expected " + std::to_string(header.size()) + " columns, found " +
                                 std::to_string(rows[r].size()) + " (missing column)",
                             row_numbers[r]);

    // Column typing: a feature column is categorical if any value is non-numeric.
    struct Column {
        std::size_t index;
        bool categorical = false;
        std::vector<std::string> levels;
    };
    std::vector<Column> columns;
    EhrTable table;
    for (auto c : feature_cols) {
        Column col{c, false, {}};
        std::set<std::string> levels;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r][c].empty()) throw ParseError("missing value in column '" + header[c] + "'", row_numbers[r]);
            if (!parse_number(rows[r][c])) col.categorical = true;
            levels.insert(rows[r][c]);
        }
        if (col.categorical) {
            col.levels.assign(levels.begin(), levels.end());
            for (const auto& l : col.levels) table.cohort.feature_names.push_back(header[c] + "=" + l);
        } else {
            table.cohort.feature_names.push_back(header[c]);
        }
        columns.push_back(std::move(col));
    }

    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& f = rows[r];
        Subject s;
        s.id = f[0];
        if (s.id.empty()) throw ParseError("empty id", row_numbers[r]);
        const auto t = parse_number(f[1]);
        if (!t) throw ParseError("time '" + f[1] + "' is not numeric", row_numbers[r]);
        if (!(*t > 0.0) || !std::isfinite(*t)) throw ParseError("time must be finite and positive", row_numbers[r]);
        s.time = *t;
        if (f[2] == "0") s.event = 0;
        else if (f[2] == "1") s.event = 1;
        else throw ParseError("event '" + f[2] + "' must be 0 or 1", row_numbers[r]);
        s.center = f[3];
        if (ct_col && !f[*ct_col].empty()) s.ct_path = f[*ct_col];
        if (pet_col && !f[*pet_col].empty()) s.pet_path = f[*pet_col];
        if (mask_col && !f[*mask_col].empty()) s.mask_path = f[*mask_col];
        for (const auto& col : columns) {
            const auto& cell = f[col.index];
            if (col.categorical) {
                for (const auto& l : col.levels) s.covariates.push_back(cell == l ? 1.0 : 0.0);
            } else {
                s.covariates.push_back(*parse_number(cell));
            }
        }
        table.cohort.subjects.push_back(std::move(s));
    }
    {
        std::unordered_set<std::string> ids;
        for (std::size_t r = 0; r < table.cohort.subjects.size(); ++r)
            if (!ids.insert(table.cohort.subjects[r].id).second)
                throw ParseError("duplicate id '" + table.cohort.subjects[r].id + "'", row_numbers[r]);
    }

    if (opt.zscore) {
        if (opt.stats) {
            table.stats = *opt.stats;
        } else {
            const NormStats all = fit_stats(table.cohort);
            for (const auto& col : columns)
                if (!col.categorical) table.stats[header[col.index]] = all.at(header[col.index]);
        }
        apply_stats(table.cohort, table.stats);
    }
    return table;
}

EhrTable load_ehr(const std::filesystem::path& path, const EhrOptions& opt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open EHR file '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_ehr(ss.str(), opt);
}

void write_ehr(const Cohort& c, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write EHR file '" + path.string() + "'");
    const bool refs = std::any_of(c.subjects.begin(), c.subjects.end(),
                                  [](const Subject& s) { return s.ct_path || s.pet_path || s.mask_path; });
    out << "id,time,event,center";
    for (const auto& n : c.feature_names) out << ',' << n;
    if (refs) out << ",ct_path,pet_path,mask_path";
    out << '\n';
    out.precision(17);
    for (const auto& s : c.subjects) {
        out << s.id << ',' << s.time << ',' << s.event << ',' << s.center;
        for (double x : s.covariates) out << ',' << x;
        if (refs)
            out << ',' << s.ct_path.value_or("") << ',' << s.pet_path.value_or("") << ',' << s.mask_path.value_or("");
        out << '\n';
    }
    if (!out) throw DataError("failed writing EHR file '" + path.string() + "'");
}

}  // namespace oncokit

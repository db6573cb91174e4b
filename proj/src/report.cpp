#include <algorithm>
#include <charconv>
#include <cstdio>
#include <map>
#include <sstream>

#include "attnlab/errors.hpp"
#include "attnlab/harness.hpp"

namespace attnlab {

namespace {

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string hex(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string short_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

constexpr const char* kQuarterNames[] = {"q1", "q2", "q3", "q4"};

std::vector<std::string> split(std::string_view line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t at = line.find(sep, start);
        out.emplace_back(line.substr(start, at == std::string_view::npos ? at : at - start));
        if (at == std::string_view::npos) return out;
        start = at + 1;
    }
}

double parse_double(const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) throw FormatError("bad number '" + s + "'");
    return v;
}

std::uint64_t parse_u64(const std::string& s, int base) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw FormatError("bad integer '" + s + "'");
    }
    return v;
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

std::string signed_pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%+.2f", v);
    return buf;
}

std::string relative(double value, double reference) {
    if (reference == 0.0) return " (n/a)";
    return " (" + signed_pct(100.0 * (value / reference - 1.0)) + ")";
}

}  // namespace

const ReportCell& EvalReport::cell(std::string_view dataset, std::string_view intervention) const {
    for (const ReportCell& c : cells) {
        if (c.dataset == dataset && c.intervention == intervention) return c;
    }
    throw FormatError("report has no cell for " + std::string(dataset) + " / " +
                      std::string(intervention));
}

std::string describe(const InterventionSpec& spec) {
    std::string scope;
    switch (spec.scope.selector) {
        case LayerSelector::Global: scope = "global"; break;
        case LayerSelector::Quarter: scope = "Q" + std::to_string(spec.scope.quarter); break;
        case LayerSelector::LayerRange:
            scope = "layers " + std::to_string(spec.scope.lo) + ".." + std::to_string(spec.scope.hi);
            break;
    }
    if (!spec.scope.heads.empty()) {
        scope += " heads";
        for (std::size_t h : spec.scope.heads) scope += " " + std::to_string(h);
    }
    const std::string src(to_string(spec.source));
    switch (spec.kind) {
        case InterventionKind::None: return "no intervention";
        case InterventionKind::ProportionalRedistribution:
            return "proportional " + src + " p=" + short_num(spec.fraction) + " " + scope;
        case InterventionKind::PairwiseTransfer:
            return "pairwise " + src + "->" + std::string(to_string(spec.recipient)) +
                   " p=" + short_num(spec.fraction) + " " + scope;
        case InterventionKind::Ablation: return "ablation " + src + " " + scope;
        case InterventionKind::Scale:
            return "scale " + std::string(to_string(spec.target)) + " k=" +
                   short_num(spec.scale_factor) + " " + scope;
        case InterventionKind::AdHH:
            return "adhh threshold=" + short_num(spec.adhh_threshold) + " " + scope;
        case InterventionKind::PAI:
            return "pai alpha=" + short_num(spec.pai_alpha) +
                   " image_scale=" + short_num(spec.pai_image_scale) + " " + scope;
    }
    return "?";
}

std::string encode_report_csv(const EvalReport& report) {
    std::ostringstream o;
    o << "# tool_version," << report.tool_version << '\n';
    o << "# config_hash," << hex(report.config_hash) << '\n';
    o << "# seed," << report.seed << '\n';
    o << "# param_checksum," << hex(report.param_checksum) << '\n';
    for (const auto& [name, seed] : report.dataset_seeds) {
        o << "# dataset_seed," << name << ',' << seed << '\n';
    }
    for (const auto& [name, text] : report.interventions) {
        o << "# intervention," << name << ',' << text << '\n';
    }
    o << "dataset,intervention,metric,value\n";
    for (const DatasetMasses& m : report.masses) {
        for (int q = 0; q < 4; ++q) {
            for (Modality mod : all_modalities) {
                o << m.dataset << ",-,mass_" << kQuarterNames[q] << '_' << to_string(mod) << ','
                  << num(m.quarter[q][mod]) << '\n';
            }
        }
        for (Modality mod : all_modalities) {
            o << m.dataset << ",-,mass_global_" << to_string(mod) << ',' << num(m.global[mod])
              << '\n';
        }
    }
    for (const ReportCell& c : report.cells) {
        const std::string prefix = c.dataset + "," + c.intervention + ",";
        const MetricBlock& b = c.metrics;
        o << prefix << "simple_accuracy," << num(b.simple_accuracy) << '\n';
        if (b.paired_accuracy) o << prefix << "paired_accuracy," << num(*b.paired_accuracy) << '\n';
        o << prefix << "yes_rate," << num(b.yes_rate) << '\n';
        o << prefix << "ground_truth_yes_fraction," << num(b.ground_truth_yes_fraction) << '\n';
        o << prefix << "yes_rate_delta_pp," << num(b.yes_rate_delta_pp) << '\n';
        o << prefix << "yes_rate_delta_rel," << num(b.yes_rate_delta_rel) << '\n';
        o << prefix << "n_prompts," << b.n_prompts << '\n';
        o << prefix << "n_pairs," << b.n_pairs << '\n';
        o << prefix << "rows_modified," << c.stats.rows_modified << '\n';
        o << prefix << "rows_skipped_zero_recipient," << c.stats.rows_skipped_zero_recipient << '\n';
        o << prefix << "rows_skipped_zero_source," << c.stats.rows_skipped_zero_source << '\n';
    }
    return o.str();
}

EvalReport decode_report_csv(std::string_view text) {
    EvalReport r;
    std::istringstream in{std::string(text)};
    std::string line;
    bool header = false;
    std::map<std::pair<std::string, std::string>, std::map<std::string, std::string>> values;
    std::vector<std::pair<std::string, std::string>> order;
    std::vector<std::string> mass_order;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (line.size() < 2 || line[1] != ' ') throw FormatError("bad metadata line: " + line);
            const std::vector<std::string> f = split(std::string_view(line).substr(2), ',');
            const std::string& key = f[0];
            if (key == "tool_version" && f.size() == 2) {
                r.tool_version = f[1];
            } else if (key == "config_hash" && f.size() == 2) {
                r.config_hash = parse_u64(f[1], 16);
            } else if (key == "seed" && f.size() == 2) {
                r.seed = parse_u64(f[1], 10);
            } else if (key == "param_checksum" && f.size() == 2) {
                r.param_checksum = parse_u64(f[1], 16);
            } else if (key == "dataset_seed" && f.size() == 3) {
                r.dataset_seeds.emplace_back(f[1], parse_u64(f[2], 10));
            } else if (key == "intervention" && f.size() == 3) {
                r.interventions.emplace_back(f[1], f[2]);
            } else {
                throw FormatError("unknown metadata line: " + line);
            }
            continue;
        }
        if (!header) {
            if (line != "dataset,intervention,metric,value") throw FormatError("missing CSV header");
            header = true;
            continue;
        }
        const std::vector<std::string> f = split(line, ',');
        if (f.size() != 4) throw FormatError("expected 4 fields: " + line);
        const auto key = std::make_pair(f[0], f[1]);
        if (!values.count(key)) {
            if (f[1] == "-") {
                mass_order.push_back(f[0]);
            } else {
                order.push_back(key);
            }
        }
        if (!values[key].emplace(f[2], f[3]).second) {
            throw FormatError("duplicate metric " + f[2] + " for " + f[0] + "/" + f[1]);
        }
    }
    if (!header) throw FormatError("missing CSV header");

    auto get = [&](const std::map<std::string, std::string>& m, const std::string& name,
                   const std::string& where) -> const std::string& {
        const auto it = m.find(name);
        if (it == m.end()) throw FormatError("missing metric " + name + " for " + where);
        return it->second;
    };

    for (const std::string& ds : mass_order) {
        const auto& m = values.at({ds, "-"});
        DatasetMasses dm;
        dm.dataset = ds;
        for (int q = 0; q < 4; ++q) {
            for (Modality mod : all_modalities) {
                dm.quarter[q][mod] = parse_double(
                    get(m, "mass_" + std::string(kQuarterNames[q]) + "_" + std::string(to_string(mod)), ds));
            }
        }
        for (Modality mod : all_modalities) {
            dm.global[mod] = parse_double(get(m, "mass_global_" + std::string(to_string(mod)), ds));
        }
        r.masses.push_back(dm);
    }
    for (const auto& key : order) {
        const auto& m = values.at(key);
        const std::string where = key.first + "/" + key.second;
        ReportCell c;
        c.dataset = key.first;
        c.intervention = key.second;
        MetricBlock& b = c.metrics;
        b.simple_accuracy = parse_double(get(m, "simple_accuracy", where));
        if (m.count("paired_accuracy")) b.paired_accuracy = parse_double(m.at("paired_accuracy"));
        b.yes_rate = parse_double(get(m, "yes_rate", where));
        b.ground_truth_yes_fraction = parse_double(get(m, "ground_truth_yes_fraction", where));
        b.yes_rate_delta_pp = parse_double(get(m, "yes_rate_delta_pp", where));
        b.yes_rate_delta_rel = parse_double(get(m, "yes_rate_delta_rel", where));
        b.n_prompts = parse_u64(get(m, "n_prompts", where), 10);
        b.n_pairs = parse_u64(get(m, "n_pairs", where), 10);
        c.stats.rows_modified = parse_u64(get(m, "rows_modified", where), 10);
        c.stats.rows_skipped_zero_recipient =
            parse_u64(get(m, "rows_skipped_zero_recipient", where), 10);
        c.stats.rows_skipped_zero_source = parse_u64(get(m, "rows_skipped_zero_source", where), 10);
        r.cells.push_back(std::move(c));
    }

    // Completeness: every dataset carries every listed intervention.
    std::vector<std::string> datasets;
    for (const ReportCell& c : r.cells) {
        if (std::find(datasets.begin(), datasets.end(), c.dataset) == datasets.end()) {
            datasets.push_back(c.dataset);
        }
    }
    for (const std::string& ds : datasets) {
        for (const auto& [name, text] : r.interventions) r.cell(ds, name);
    }
    return r;
}

std::string render_table(const EvalReport& report) {
    std::ostringstream o;
    o << report.tool_version << "  config " << hex(report.config_hash) << "  seed " << report.seed
      << "  params " << hex(report.param_checksum) << "\n";
    for (const auto& [name, text] : report.interventions) {
        o << "  " << name << ": " << text << '\n';
    }

    std::vector<std::string> datasets;
    for (const ReportCell& c : report.cells) {
        if (std::find(datasets.begin(), datasets.end(), c.dataset) == datasets.end()) {
            datasets.push_back(c.dataset);
        }
    }
    for (const std::string& ds : datasets) {
        const ReportCell& base = report.cell(ds, kBaselineName);
        const MetricBlock& bm = base.metrics;
        o << "\n== " << ds << ": " << bm.n_prompts << " prompts";
        if (bm.paired_accuracy) o << ", " << bm.n_pairs << " pairs";
        o << ", ground-truth yes " << pct(bm.ground_truth_yes_fraction) << "% ==\n";

        std::vector<std::vector<std::string>> rows;
        rows.push_back({""});
        rows.push_back({"Simple acc."});
        if (bm.paired_accuracy) rows.push_back({"Paired acc."});
        rows.push_back({"Yes-rate"});
        const bool degenerate =
            bm.ground_truth_yes_fraction <= 0.0 || bm.ground_truth_yes_fraction >= 1.0;
        for (const auto& [name, text] : report.interventions) {
            const MetricBlock& m = report.cell(ds, name).metrics;
            const bool is_base = name == kBaselineName;
            std::size_t row = 0;
            rows[row++].push_back(name);
            rows[row++].push_back(pct(m.simple_accuracy) +
                                  (is_base ? "" : relative(m.simple_accuracy, bm.simple_accuracy)));
            if (bm.paired_accuracy) {
                const double pa = m.paired_accuracy.value_or(0.0);
                rows[row++].push_back(pct(pa) +
                                      (is_base ? "" : relative(pa, *bm.paired_accuracy)));
            }
            rows[row++].push_back(pct(m.yes_rate) +
                                  (degenerate ? "" : " (" + signed_pct(m.yes_rate_delta_rel) + ")"));
        }
        std::vector<std::size_t> width(rows[0].size(), 0);
        for (const auto& r : rows) {
            for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
        }
        for (const auto& r : rows) {
            std::string line;
            for (std::size_t i = 0; i < r.size(); ++i) {
                line += r[i];
                if (i + 1 < r.size()) line += std::string(width[i] - r[i].size() + 2, ' ');
            }
            o << line << '\n';
        }

        for (const DatasetMasses& m : report.masses) {
            if (m.dataset != ds) continue;
            o << "attention mass before intervention (system / image / text)\n";
            char buf[128];
            for (int q = 0; q < 4; ++q) {
                std::snprintf(buf, sizeof buf, "  Q%d      %.4f / %.4f / %.4f\n", q + 1,
                              m.quarter[q][Modality::System], m.quarter[q][Modality::Image],
                              m.quarter[q][Modality::Text]);
                o << buf;
            }
            std::snprintf(buf, sizeof buf, "  global  %.4f / %.4f / %.4f\n",
                          m.global[Modality::System], m.global[Modality::Image],
                          m.global[Modality::Text]);
            o << buf;
        }
    }
    return o.str();
}

}  // namespace attnlab

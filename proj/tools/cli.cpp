#include "cli.hpp"

#include "weakiv/data.hpp"
#include "weakiv/design.hpp"
#include "weakiv/error.hpp"
#include "weakiv/estimators.hpp"
#include "weakiv/fstats.hpp"
#include "weakiv/grouped_sim.hpp"
#include "weakiv/weak_test.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <variant>

namespace weakiv {

namespace {

using Cell = std::variant<std::monostate, std::string, double, long long, bool>;

// A report is one rectangular table plus run metadata.
struct Report {
    std::vector<std::pair<std::string, Cell>> meta;
    std::vector<std::string> columns;
    std::vector<std::vector<Cell>> rows;
};

std::string full_precision(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string cell_text(const Cell& c, bool rounded) {
    return std::visit(
        [&](const auto& v) -> std::string {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::monostate>)
                return "";
            else if constexpr (std::is_same_v<T, std::string>)
                return v;
            else if constexpr (std::is_same_v<T, bool>)
                return v ? "true" : "false";
            else if constexpr (std::is_same_v<T, long long>)
                return std::to_string(v);
            else {
                if (!rounded || !std::isfinite(v)) return full_precision(v);
                char buf[48];
                std::snprintf(buf, sizeof buf, "%.3f", v);
                return buf;
            }
        },
        c);
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) {
        if (ch == '"') q += '"';
        q += ch;
    }
    return q + '"';
}

nlohmann::json cell_json(const Cell& c) {
    return std::visit(
        [](const auto& v) -> nlohmann::json {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::monostate>)
                return nullptr;
            else if constexpr (std::is_same_v<T, double>)
                return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(full_precision(v));
            else
                return v;
        },
        c);
}

void write_report(const Report& r, const std::string& format, std::ostream& os) {
    if (format == "json") {
        nlohmann::json meta = nlohmann::json::object();
        for (const auto& [k, v] : r.meta) meta[k] = cell_json(v);
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& row : r.rows) {
            nlohmann::json obj = nlohmann::json::object();
            for (std::size_t j = 0; j < r.columns.size(); ++j) obj[r.columns[j]] = cell_json(row[j]);
            rows.push_back(std::move(obj));
        }
        nlohmann::json doc = {{"meta", meta}, {"results", rows}};
        os << doc.dump(2) << '\n';
        return;
    }
    if (format == "csv") {
        for (const auto& [k, v] : r.meta) os << "# " << k << '=' << cell_text(v, false) << '\n';
        for (std::size_t j = 0; j < r.columns.size(); ++j) os << (j ? "," : "") << csv_escape(r.columns[j]);
        os << '\n';
        for (const auto& row : r.rows) {
            for (std::size_t j = 0; j < row.size(); ++j) os << (j ? "," : "") << csv_escape(cell_text(row[j], false));
            os << '\n';
        }
        return;
    }
    // Aligned table, numbers rounded for display.
    std::vector<std::vector<std::string>> text;
    std::vector<std::size_t> width(r.columns.size());
    for (std::size_t j = 0; j < r.columns.size(); ++j) width[j] = r.columns[j].size();
    for (const auto& row : r.rows) {
        std::vector<std::string> t;
        for (std::size_t j = 0; j < row.size(); ++j) {
            t.push_back(cell_text(row[j], true));
            width[j] = std::max(width[j], t.back().size());
        }
        text.push_back(std::move(t));
    }
    for (const auto& [k, v] : r.meta) {
        os << k << ": ";
        if (const double* d = std::get_if<double>(&v)) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6g", *d);
            os << buf << '\n';
        } else {
            os << cell_text(v, false) << '\n';
        }
    }
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t j = 0; j < cells.size(); ++j) {
            if (j) os << "  ";
            const bool left = j == 0;
            os << (left ? std::left : std::right) << std::setw(static_cast<int>(width[j])) << cells[j];
        }
        os << '\n';
    };
    line(r.columns);
    for (const auto& t : text) line(t);
}

struct DataArgs {
    std::string path;
    std::string y, x;
    std::vector<std::string> z, controls;
    std::string cluster;
    bool no_intercept = false;
};

struct TestArgs {
    double tau = 0.10;
    double alpha = 0.05;
    std::string benchmark = "ls";
    std::string method = "patnaik";
    std::string stat = "both";
    long long draws = 100000;
    int directions = 200;
};

struct OutArgs {
    std::string out;
    std::string format = "table";
};

void add_data_options(CLI::App* app, DataArgs& d) {
    app->add_option("--data", d.path, "CSV file with a header row")->required();
    app->add_option("--y", d.y, "outcome column")->required();
    app->add_option("--x", d.x, "endogenous regressor column")->required();
    app->add_option("--z", d.z, "instrument column(s), repeatable")->required();
    app->add_option("--controls", d.controls, "exogenous control column(s)");
    app->add_option("--cluster", d.cluster, "cluster id column; switches to cluster-robust W");
    app->add_flag("--no-intercept", d.no_intercept, "do not add a constant to the controls");
}

void add_test_options(CLI::App* app, TestArgs& t) {
    app->add_option("--tau", t.tau, "bias tolerance relative to the benchmark")->capture_default_str();
    app->add_option("--alpha", t.alpha, "test size")->capture_default_str();
    app->add_option("--benchmark", t.benchmark, "ls or mop")
        ->check(CLI::IsMember({"ls", "mop"}))
        ->capture_default_str();
    app->add_option("--method", t.method, "patnaik, mc or conservative")
        ->check(CLI::IsMember({"patnaik", "mc", "conservative"}))
        ->capture_default_str();
    app->add_option("--draws", t.draws, "Monte Carlo critical value draws")->capture_default_str();
    app->add_option("--directions", t.directions, "Monte Carlo critical value directions")->capture_default_str();
}

void add_out_options(CLI::App* app, OutArgs& o) {
    app->add_option("--out", o.out, "write the report here instead of stdout");
    app->add_option("--format", o.format, "csv, table or json")
        ->check(CLI::IsMember({"csv", "table", "json"}))
        ->capture_default_str();
}

WeakIvOptions test_options(const TestArgs& t, std::uint64_t seed) {
    if (!(t.tau > 0.0 && t.tau < 1.0)) throw InputError("--tau must lie in (0, 1)");
    if (!(t.alpha > 0.0 && t.alpha < 1.0)) throw InputError("--alpha must lie in (0, 1)");
    WeakIvOptions o;
    o.tau = t.tau;
    o.alpha = t.alpha;
    o.benchmark = t.benchmark == "mop" ? BenchmarkKind::Kind::MOP : BenchmarkKind::Kind::LS;
    o.method = t.method == "mc"             ? TestMethod::MonteCarlo
               : t.method == "conservative" ? TestMethod::ConservativeSimplified
                                            : TestMethod::Patnaik;
    o.mc.draws = static_cast<Index>(t.draws);
    o.mc.directions = t.directions;
    o.mc.seed = seed;
    o.sup.seed = seed;
    return o;
}

struct Loaded {
    Dataset raw;
    PartialledData pd;
    CovarianceOptions cov;
};

Loaded load_data(const DataArgs& d) {
    ColumnSchema schema;
    schema.y = d.y;
    schema.x = d.x;
    schema.z = d.z;
    schema.controls = d.controls;
    if (!d.cluster.empty()) schema.cluster = d.cluster;
    schema.intercept = !d.no_intercept;
    Dataset raw = load_csv(d.path, schema);
    PartialledData pd = partial_out(raw);
    CovarianceOptions cov;
    if (pd.cluster()) cov.flavor = CovarianceFlavor::Cluster;
    return {std::move(raw), std::move(pd), cov};
}

void common_meta(Report& r, const std::string& command) {
    r.meta.emplace_back("command", command);
    r.meta.emplace_back("version", std::string("1.0.0"));
}

Report cmd_estimate(const DataArgs& d) {
    const Loaded L = load_data(d);
    const WMatrix What = estimate_W(L.pd, L.cov);
    const FirstStageStats fs = first_stage_stats(L.pd, What);
    Report r;
    common_meta(r, "estimate");
    r.meta.emplace_back("data", d.path);
    r.meta.emplace_back("n", static_cast<long long>(L.pd.n()));
    r.meta.emplace_back("kz", static_cast<long long>(L.pd.kz()));
    r.meta.emplace_back("covariance", std::string(L.cov.flavor == CovarianceFlavor::Cluster ? "cluster" : "hc0"));
    r.meta.emplace_back("F", fs.f_nonrobust);
    r.meta.emplace_back("F_eff", fs.f_effective);
    r.meta.emplace_back("F_r", fs.f_robust);
    r.columns = {"estimator", "beta", "se_robust", "se_nonrobust", "F", "F_eff", "F_r"};
    auto add = [&](const std::string& name, const EstimateResult& e) {
        r.rows.push_back({name, e.beta_hat, e.se_robust, e.se_nonrobust, fs.f_nonrobust, fs.f_effective, fs.f_robust});
    };
    add("ols", estimate_ols(L.pd, L.cov));
    add("2sls", estimate(L.pd, WeightSpec::two_sls(), What.W2, L.cov));
    add("gmmf", estimate(L.pd, WeightSpec::gmmf(), What.W2, L.cov));
    return r;
}

Report cmd_weakivtest(const DataArgs& d, const TestArgs& t, std::uint64_t seed) {
    if (t.stat != "eff" && t.stat != "robust" && t.stat != "both")
        throw InputError("--stat must be eff, robust or both");
    const WeakIvOptions opts = test_options(t, seed);
    const Loaded L = load_data(d);
    const WMatrix What = estimate_W(L.pd, L.cov);
    const SigmaV sv = estimate_sigma_v(L.pd);
    Report r;
    common_meta(r, "weakivtest");
    r.meta.emplace_back("data", d.path);
    r.meta.emplace_back("n", static_cast<long long>(L.pd.n()));
    r.meta.emplace_back("kz", static_cast<long long>(L.pd.kz()));
    r.meta.emplace_back("tau", t.tau);
    r.meta.emplace_back("alpha", t.alpha);
    r.meta.emplace_back("benchmark", t.benchmark);
    r.meta.emplace_back("method", t.method);
    r.meta.emplace_back("seed", static_cast<long long>(seed));
    r.columns = {"statistic", "estimator", "value", "B", "d_tau", "keff", "cv", "reject", "warning"};
    auto add = [&](const std::string& name, const WeightSpec& spec) {
        const WeakIvResult w = weak_iv_test(L.pd, What, sv, spec, opts);
        r.rows.push_back({name, std::string(to_string(spec.kind)), w.statistic.value, w.B, w.d_tau, w.keff, w.cv,
                          w.reject, w.warning});
    };
    if (t.stat != "robust") add("F_eff", WeightSpec::two_sls());
    if (t.stat != "eff") add("F_r", WeightSpec::gmmf());
    return r;
}

SimOptions sim_options(const TestArgs& t, int reps, std::uint64_t seed, int threads) {
    if (reps < 1) throw InputError("--reps must be at least 1");
    SimOptions o;
    o.reps = reps;
    o.seed = seed;
    o.threads = threads;
    o.test = test_options(t, seed);
    o.test.mc.threads = 1;
    return o;
}

void sim_meta(Report& r, const std::string& command, const GroupedDesign& design, const std::string& path,
              const SimOptions& o, const TestArgs& t) {
    common_meta(r, command);
    r.meta.emplace_back("design", design.name);
    r.meta.emplace_back("design_file", path);
    r.meta.emplace_back("n", static_cast<long long>(design.n));
    r.meta.emplace_back("reps", static_cast<long long>(o.reps));
    r.meta.emplace_back("seed", static_cast<long long>(o.seed));
    r.meta.emplace_back("tau", t.tau);
    r.meta.emplace_back("alpha", t.alpha);
    r.meta.emplace_back("benchmark", t.benchmark);
    r.meta.emplace_back("method", t.method);
}

Report cmd_simulate(const std::string& path, const TestArgs& t, int reps, std::uint64_t seed, int threads,
                    std::optional<double> scale_e, std::optional<long> n) {
    GroupedDesign design = load_design(path);
    if (scale_e) design.scale_e = *scale_e;
    if (n) design.n = *n;
    const SimOptions o = sim_options(t, reps, seed, threads);
    const SimSummary s = run_sim(design, o);
    Report r;
    sim_meta(r, "simulate", design, path, o, t);
    r.meta.emplace_back("scale_e", design.scale_e);
    r.meta.emplace_back("failed", static_cast<long long>(s.failed));
    r.meta.emplace_back("unconverged", static_cast<long long>(s.unconverged));
    r.columns = {"quantity", "mean", "sd"};
    for (const auto& [k, m] : s.stats)
        r.rows.push_back({k, m.mean, m.sd ? Cell(*m.sd) : Cell(std::monostate{})});
    for (const auto& [k, v] : s.rates) r.rows.push_back({k, v, std::monostate{}});
    for (int g = 0; g < design.G(); ++g) {
        const std::string idx = "[" + std::to_string(g + 1) + "]";
        r.rows.push_back({"F_g" + idx, s.mean_F_g(g), std::monostate{}});
        r.rows.push_back({"w_2sls" + idx, s.mean_w_2sls(g), std::monostate{}});
        r.rows.push_back({"w_gmmf" + idx, s.mean_w_gmmf(g), std::monostate{}});
    }
    return r;
}

std::vector<double> parse_grid(const std::vector<std::string>& items) {
    std::vector<double> grid;
    for (const auto& item : items) {
        std::stringstream ss(item);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty()) continue;
            try {
                std::size_t used = 0;
                grid.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw InputError("--e: '" + tok + "' is not a number");
            }
        }
    }
    if (grid.empty()) throw InputError("--e needs at least one value");
    return grid;
}

Report cmd_curves(const std::string& path, const TestArgs& t, int reps, std::uint64_t seed, int threads,
                  const std::vector<std::string>& e_items, std::optional<long> n) {
    GroupedDesign design = load_design(path);
    if (n) design.n = *n;
    const std::vector<double> grid = parse_grid(e_items);
    const SimOptions o = sim_options(t, reps, seed, threads);
    const auto rows = sweep_scale(design, grid, o);
    Report r;
    sim_meta(r, "curves", design, path, o, t);
    r.columns = {"e",         "mean_F_r",  "mean_F_eff", "rel_bias_2sls", "rel_bias_gmmf", "rf_eff",
                 "rf_r",      "wald_2sls", "wald_gmmf",  "failed"};
    for (const auto& c : rows)
        r.rows.push_back({c.e, c.mean_F_r, c.mean_F_eff, c.rel_bias_2sls, c.rel_bias_gmmf, c.rf_eff, c.rf_r,
                          c.wald_2sls, c.wald_gmmf, static_cast<long long>(c.failed)});
    return r;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Weak-instrument diagnostics for linear IV with one endogenous regressor", "weakiv"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "1.0.0");

    DataArgs data;
    TestArgs test;
    OutArgs output;
    std::uint64_t seed = 20240601;
    int reps = 2000;
    int threads = 0;
    std::string design_path;
    std::vector<std::string> e_items;
    std::optional<double> scale_e;
    std::optional<long> n_override;

    auto* est = app.add_subcommand("estimate", "OLS, 2SLS and GMMf estimates with first-stage F statistics");
    add_data_options(est, data);
    add_out_options(est, output);

    auto* wt = app.add_subcommand("weakivtest", "weak-instrument tests based on F_eff and F_r");
    add_data_options(wt, data);
    add_test_options(wt, test);
    wt->add_option("--stat", test.stat, "eff, robust or both")
        ->check(CLI::IsMember({"eff", "robust", "both"}))
        ->capture_default_str();
    wt->add_option("--seed", seed, "seed for the optimizer starts and Monte Carlo draws")->capture_default_str();
    add_out_options(wt, output);

    auto* sim = app.add_subcommand("simulate", "Monte Carlo study of a grouped-data design");
    sim->add_option("--design", design_path, "design YAML file")->required();
    add_test_options(sim, test);
    sim->add_option("--reps", reps, "replications")->capture_default_str();
    sim->add_option("--seed", seed, "master seed")->capture_default_str();
    sim->add_option("--threads", threads, "worker threads (0: WEAKIV_THREADS or all cores)");
    sim->add_option("--scale-e", scale_e, "override the design's scale_e");
    sim->add_option("--n", n_override, "override the design's sample size");
    add_out_options(sim, output);

    auto* cur = app.add_subcommand("curves", "sweep the first-stage scale e of a grouped-data design");
    cur->add_option("--design", design_path, "design YAML file")->required();
    cur->add_option("--e", e_items, "e values, comma separated or repeated")->required();
    add_test_options(cur, test);
    cur->add_option("--reps", reps, "replications per e")->capture_default_str();
    cur->add_option("--seed", seed, "master seed")->capture_default_str();
    cur->add_option("--threads", threads, "worker threads (0: WEAKIV_THREADS or all cores)");
    cur->add_option("--n", n_override, "override the design's sample size");
    add_out_options(cur, output);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << "1.0.0\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        if (!app.get_subcommands().empty())
            err << "run with " << app.get_subcommands().front()->get_name() << " --help for usage\n";
        else
            err << "run with --help for usage\n";
        return 2;
    }

    try {
        Report report;
        if (est->parsed())
            report = cmd_estimate(data);
        else if (wt->parsed())
            report = cmd_weakivtest(data, test, seed);
        else if (sim->parsed())
            report = cmd_simulate(design_path, test, reps, seed, threads, scale_e, n_override);
        else
            report = cmd_curves(design_path, test, reps, seed, threads, e_items, n_override);

        if (output.out.empty()) {
            write_report(report, output.format, out);
        } else {
            std::ofstream f(output.out);
            if (!f) throw InputError("cannot write '" + output.out + "'");
            write_report(report, output.format, f);
            if (!f) throw InputError("write to '" + output.out + "' failed");
        }
        return 0;
    } catch (const InputError& e) {
        err << "input error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 3;
    }
}

}  // namespace weakiv

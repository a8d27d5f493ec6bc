#include "weakiv/grouped_sim.hpp"

#include "weakiv/error.hpp"
#include "weakiv/estimators.hpp"
#include "weakiv/fstats.hpp"
#include "weakiv/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace weakiv {

namespace {

constexpr int kMaxRegenerations = 10;

std::vector<long> fixed_counts(const GroupedDesign& d) {
    // Largest-remainder rounding of f_g n.
    const int G = d.G();
    std::vector<long> counts(static_cast<std::size_t>(G));
    std::vector<std::pair<double, int>> rem;
    long used = 0;
    for (int g = 0; g < G; ++g) {
        const double exact = d.groups[static_cast<std::size_t>(g)].prob * static_cast<double>(d.n);
        counts[static_cast<std::size_t>(g)] = static_cast<long>(std::floor(exact));
        used += counts[static_cast<std::size_t>(g)];
        rem.emplace_back(exact - std::floor(exact), g);
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; used < d.n; ++i, ++used) ++counts[static_cast<std::size_t>(rem[i % rem.size()].second)];
    return counts;
}

}  // namespace

GeneratedSample generate(const GroupedDesign& design, RngStream& rng) {
    design.validate();
    const int G = design.G();
    const Index n = design.n;
    GeneratedSample s;
    s.labels.resize(static_cast<std::size_t>(n));
    std::vector<double> cum(static_cast<std::size_t>(G));
    double acc = 0.0;
    for (int g = 0; g < G; ++g) cum[static_cast<std::size_t>(g)] = acc += design.groups[static_cast<std::size_t>(g)].prob;
    cum.back() = 1.0;

    std::vector<long> counts(static_cast<std::size_t>(G));
    for (int attempt = 0;; ++attempt) {
        std::fill(counts.begin(), counts.end(), 0L);
        if (design.sizes == GroupSizesMode::FixedShares) {
            counts = fixed_counts(design);
            Index i = 0;
            for (int g = 0; g < G; ++g)
                for (long j = 0; j < counts[static_cast<std::size_t>(g)]; ++j) s.labels[static_cast<std::size_t>(i++)] = g;
        } else {
            for (Index i = 0; i < n; ++i) {
                const double u = rng.uniform();
                const int g = static_cast<int>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
                const int gg = std::min(g, G - 1);
                s.labels[static_cast<std::size_t>(i)] = gg;
                ++counts[static_cast<std::size_t>(gg)];
            }
        }
        if (std::all_of(counts.begin(), counts.end(), [](long c) { return c > 0; })) break;
        if (attempt + 1 >= kMaxRegenerations)
            throw InputError("design '" + design.name + "' keeps producing an empty group; increase n");
        ++s.regenerations;
    }

    // (u, v2) = chol(Sigma_g) (xi1, xi2) with v2 drawn first.
    std::vector<double> sv(static_cast<std::size_t>(G)), su_v(static_cast<std::size_t>(G)), su_e(static_cast<std::size_t>(G));
    for (int g = 0; g < G; ++g) {
        const auto& p = design.groups[static_cast<std::size_t>(g)];
        sv[static_cast<std::size_t>(g)] = std::sqrt(p.sigma_v2sq);
        su_v[static_cast<std::size_t>(g)] = p.sigma_uv2 / std::sqrt(p.sigma_v2sq);
        su_e[static_cast<std::size_t>(g)] = std::sqrt(p.sigma_u2 - p.sigma_uv2 * p.sigma_uv2 / p.sigma_v2sq);
    }
    Dataset& d = s.data;
    d.y.resize(n);
    d.x.resize(n);
    d.Z = MatrixXd::Zero(n, G);
    for (Index i = 0; i < n; ++i) {
        const auto g = static_cast<std::size_t>(s.labels[static_cast<std::size_t>(i)]);
        const double xi1 = rng.normal();
        const double xi2 = rng.normal();
        const double v2 = sv[g] * xi1;
        const double u = su_v[g] * xi1 + su_e[g] * xi2;
        d.x(i) = design.pi(static_cast<int>(g)) + v2;
        d.y(i) = d.x(i) * design.beta + u;
        d.Z(i, static_cast<Index>(g)) = 1.0;
    }
    return s;
}

GroupStats group_stats(const PartialledData& pd, const std::vector<int>& labels, int G) {
    const Index n = pd.n();
    if (static_cast<Index>(labels.size()) != n) throw InputError("group labels do not match the sample size");
    GroupStats s;
    s.n_g = VectorXd::Zero(G);
    s.xbar = VectorXd::Zero(G);
    s.ybar = VectorXd::Zero(G);
    s.s2_v2 = VectorXd::Zero(G);
    for (Index i = 0; i < n; ++i) {
        const int g = labels[static_cast<std::size_t>(i)];
        s.n_g(g) += 1.0;
        s.xbar(g) += pd.x()(i);
        s.ybar(g) += pd.y()(i);
    }
    if (s.n_g.minCoeff() < 1.0) throw InputError("every group needs at least one observation");
    s.xbar.array() /= s.n_g.array();
    s.ybar.array() /= s.n_g.array();
    for (Index i = 0; i < n; ++i) {
        const int g = labels[static_cast<std::size_t>(i)];
        const double r = pd.x()(i) - s.xbar(g);
        s.s2_v2(g) += r * r;
    }
    s.s2_v2.array() /= s.n_g.array();
    if (!(s.s2_v2.minCoeff() > 0.0)) throw NumericalError("a group has zero first-stage residual variance");

    s.F_g = (s.n_g.array() * s.xbar.array().square() / s.s2_v2.array()).matrix();
    s.beta_g.resize(G);
    for (int g = 0; g < G; ++g)
        s.beta_g(g) = s.xbar(g) == 0.0 ? std::numeric_limits<double>::quiet_NaN() : s.ybar(g) / s.xbar(g);
    const VectorXd nx2 = (s.n_g.array() * s.xbar.array().square()).matrix();
    s.w_2sls = nx2 / nx2.sum();
    s.w_gmmf = s.F_g / s.F_g.sum();
    return s;
}

RepStats run_replication(const GroupedDesign& design, std::uint64_t rep, const SimOptions& opts) {
    RngStream rng(opts.seed, rep);
    GeneratedSample sample = generate(design, rng);
    const PartialledData pd(std::move(sample.data.y), std::move(sample.data.x), std::move(sample.data.Z));
    const WMatrix What = estimate_W(pd);
    const SigmaV sv = estimate_sigma_v(pd);

    RepStats r;
    const FirstStageStats fs = first_stage_stats(pd, What);
    r.F = fs.f_nonrobust;
    r.F_eff = fs.f_effective;
    r.F_r = fs.f_robust;

    const EstimateResult ols = estimate_ols(pd);
    const EstimateResult tsls = estimate(pd, WeightSpec::two_sls(), What.W2);
    const EstimateResult gmmf = estimate(pd, WeightSpec::gmmf(), What.W2);
    r.beta_ols = ols.beta_hat;
    r.beta_2sls = tsls.beta_hat;
    r.beta_gmmf = gmmf.beta_hat;
    const WaldResult w2 = wald_test(tsls, design.beta);
    const WaldResult wg = wald_test(gmmf, design.beta);
    r.wald_2sls = w2.statistic;
    r.wald_gmmf = wg.statistic;
    r.wald_2sls_reject = w2.pvalue < opts.test.alpha;
    r.wald_gmmf_reject = wg.pvalue < opts.test.alpha;

    const WeakIvResult te = weak_iv_test(pd, What, sv, WeightSpec::two_sls(), opts.test);
    const WeakIvResult tr = weak_iv_test(pd, What, sv, WeightSpec::gmmf(), opts.test);
    r.B_eff = te.B;
    r.B_r = tr.B;
    r.cv_eff_LS = te.cv;
    r.cv_r_LS = tr.cv;
    r.reject_eff = te.reject;
    r.reject_r = tr.reject;
    r.converged = te.converged && tr.converged;

    const GroupStats gs = group_stats(pd, sample.labels, design.G());
    r.F_g = gs.F_g;
    r.weights_2sls = gs.w_2sls;
    r.weights_gmmf = gs.w_gmmf;
    return r;
}

const Moments& SimSummary::stat(const std::string& name) const {
    for (const auto& [k, v] : stats)
        if (k == name) return v;
    throw InputError("unknown summary statistic '" + name + "'");
}

double SimSummary::rate(const std::string& name) const {
    for (const auto& [k, v] : rates)
        if (k == name) return v;
    throw InputError("unknown rejection frequency '" + name + "'");
}

namespace {

Moments moments(const std::vector<double>& v) {
    Moments m;
    if (v.empty()) {
        m.mean = std::numeric_limits<double>::quiet_NaN();
        return m;
    }
    m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - m.mean) * (x - m.mean);
        m.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return m;
}

}  // namespace

SimSummary run_sim(const GroupedDesign& design, const SimOptions& opts) {
    if (opts.reps < 1) throw InputError("reps must be at least 1");
    design.validate();
    const auto reps = static_cast<std::size_t>(opts.reps);
    std::vector<std::optional<RepStats>> results(reps);
    std::vector<std::string> errors(reps);
    parallel_for(reps, opts.threads, [&](std::size_t r) {
        try {
            results[r] = run_replication(design, r, opts);
        } catch (const std::exception& e) {
            errors[r] = e.what();
        }
    });

    SimSummary s;
    s.design = design.name;
    s.reps = opts.reps;
    s.seed = opts.seed;
    s.tau = opts.test.tau;
    s.alpha = opts.test.alpha;
    s.benchmark = opts.test.benchmark;

    const char* names[] = {"F",         "F_eff",     "F_r",       "cv_eff",   "cv_r",     "B_eff",   "B_r",
                           "beta_ols",  "beta_2sls", "beta_gmmf", "bias_ols", "bias_2sls", "bias_gmmf"};
    std::vector<std::vector<double>> cols(std::size(names));
    double rej_eff = 0, rej_r = 0, wald2 = 0, waldg = 0;
    const int G = design.G();
    s.mean_F_g = VectorXd::Zero(G);
    s.mean_w_2sls = VectorXd::Zero(G);
    s.mean_w_gmmf = VectorXd::Zero(G);
    int ok = 0;
    for (std::size_t r = 0; r < reps; ++r) {
        if (!results[r]) {
            ++s.failed;
            if (s.failures.size() < 5) s.failures.push_back("replication " + std::to_string(r) + ": " + errors[r]);
            continue;
        }
        const RepStats& x = *results[r];
        ++ok;
        const double vals[] = {x.F,         x.F_eff,     x.F_r,       x.cv_eff_LS,
                               x.cv_r_LS,   x.B_eff,     x.B_r,       x.beta_ols,
                               x.beta_2sls, x.beta_gmmf, x.beta_ols - design.beta, x.beta_2sls - design.beta,
                               x.beta_gmmf - design.beta};
        for (std::size_t j = 0; j < cols.size(); ++j) cols[j].push_back(vals[j]);
        rej_eff += x.reject_eff;
        rej_r += x.reject_r;
        wald2 += x.wald_2sls_reject;
        waldg += x.wald_gmmf_reject;
        s.mean_F_g += x.F_g;
        s.mean_w_2sls += x.weights_2sls;
        s.mean_w_gmmf += x.weights_gmmf;
        if (!x.converged) ++s.unconverged;
    }
    for (std::size_t j = 0; j < cols.size(); ++j) s.stats.emplace_back(names[j], moments(cols[j]));
    const double denom = ok > 0 ? static_cast<double>(ok) : std::numeric_limits<double>::quiet_NaN();
    s.rates = {{"rf_eff", rej_eff / denom}, {"rf_r", rej_r / denom}, {"wald_2sls", wald2 / denom},
               {"wald_gmmf", waldg / denom}};
    s.mean_F_g /= denom;
    s.mean_w_2sls /= denom;
    s.mean_w_gmmf /= denom;
    return s;
}

std::vector<CurveRow> sweep_scale(const GroupedDesign& design, const std::vector<double>& e_grid,
                                  const SimOptions& opts) {
    if (e_grid.empty()) throw InputError("the e grid is empty");
    std::vector<CurveRow> rows;
    for (double e : e_grid) {
        if (!std::isfinite(e)) throw InputError("e values must be finite");
        GroupedDesign d = design;
        d.scale_e = e;
        const SimSummary s = run_sim(d, opts);
        CurveRow row;
        row.e = e;
        row.mean_F_r = s.stat("F_r").mean;
        row.mean_F_eff = s.stat("F_eff").mean;
        const double bo = std::abs(s.stat("bias_ols").mean);
        row.rel_bias_2sls = std::abs(s.stat("bias_2sls").mean) / bo;
        row.rel_bias_gmmf = std::abs(s.stat("bias_gmmf").mean) / bo;
        row.rf_eff = s.rate("rf_eff");
        row.rf_r = s.rate("rf_r");
        row.wald_2sls = s.rate("wald_2sls");
        row.wald_gmmf = s.rate("wald_gmmf");
        row.failed = s.failed;
        rows.push_back(row);
    }
    return rows;
}

RandomDesignComparison random_design_comparison(const RandomDesignConstraints& cons, int count,
                                                std::uint64_t seed, long max_draws) {
    if (count < 1) throw InputError("count must be at least 1");
    if (cons.G < 2) throw InputError("random designs need G >= 2");
    RngStream rng(seed, 0);
    RandomDesignComparison out;
    GroupedDesign d;
    d.name = "random";
    d.n = cons.n;
    d.scale_e = 1.0;
    d.groups.resize(static_cast<std::size_t>(cons.G));
    const double sqrt_n = std::sqrt(static_cast<double>(cons.n));
    while (out.accepted < count) {
        if (out.draws >= max_draws)
            throw NumericalError("random design search hit the draw limit after " + std::to_string(out.accepted) +
                                 " accepted designs");
        ++out.draws;
        double suv = 0.0, su = 0.0, sv = 0.0;
        for (auto& p : d.groups) {
            const double c = cons.c_max * (2.0 * rng.uniform() - 1.0);
            p.pi0 = c / sqrt_n;
            p.sigma_u2 = cons.var_max * (1.0 - rng.uniform());
            p.sigma_v2sq = cons.var_max * (1.0 - rng.uniform());
            const double rho = 2.0 * rng.uniform() - 1.0;
            p.sigma_uv2 = rho * std::sqrt(p.sigma_u2 * p.sigma_v2sq);
            p.prob = 1.0 / cons.G;
            suv += p.sigma_uv2;
            su += p.sigma_u2;
            sv += p.sigma_v2sq;
        }
        if (!(std::abs(suv / std::sqrt(su * sv)) > cons.min_abs_rho)) continue;
        const GroupedNagar nb = nagar_bias_grouped(d);
        if (!(nb.mu2_2sls > cons.mu2_2sls_lo && nb.mu2_2sls < cons.mu2_2sls_hi)) continue;
        if (!(nb.mu2_gmmf > cons.mu2_gmmf_lo && nb.mu2_gmmf < cons.mu2_gmmf_hi)) continue;
        ++out.accepted;
        if (std::abs(nb.N_2sls) > std::abs(nb.N_gmmf)) ++out.larger_2sls;
    }
    out.proportion = static_cast<double>(out.larger_2sls) / out.accepted;
    return out;
}

}  // namespace weakiv

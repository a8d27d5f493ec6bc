#pragma once

#include "weakiv/data.hpp"
#include "weakiv/design.hpp"
#include "weakiv/distributions.hpp"
#include "weakiv/weak_test.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace weakiv {

struct GeneratedSample {
    Dataset data;             // Z holds the G group indicators, no controls
    std::vector<int> labels;  // 0-based group of each observation
    int regenerations = 0;    // redraws needed because a group came out empty
};

// One sample of size n from the grouped design. Empty groups are redrawn up to
// 10 times before InputError.
GeneratedSample generate(const GroupedDesign& design, RngStream& rng);

// Per-group first-stage quantities. beta_g is NaN where xbar_g == 0.
struct GroupStats {
    VectorXd n_g, xbar, ybar, s2_v2, F_g, beta_g, w_2sls, w_gmmf;
};

GroupStats group_stats(const PartialledData& pd, const std::vector<int>& labels, int G);

struct RepStats {
    double F = 0.0, F_eff = 0.0, F_r = 0.0;
    VectorXd F_g;
    double B_eff = 0.0, B_r = 0.0;
    double cv_eff_LS = 0.0, cv_r_LS = 0.0;
    bool reject_eff = false, reject_r = false;
    double beta_ols = 0.0, beta_2sls = 0.0, beta_gmmf = 0.0;
    double wald_2sls = 0.0, wald_gmmf = 0.0;  // statistics at beta0 = beta
    bool wald_2sls_reject = false, wald_gmmf_reject = false;
    VectorXd weights_2sls, weights_gmmf;
    bool converged = true;
};

struct SimOptions {
    int reps = 2000;
    std::uint64_t seed = 20240601;
    int threads = 0;  // 0: WEAKIV_THREADS or hardware
    WeakIvOptions test;  // benchmark LS, Patnaik cv by default
};

RepStats run_replication(const GroupedDesign& design, std::uint64_t rep, const SimOptions& opts);

struct Moments {
    double mean = 0.0;
    std::optional<double> sd;  // absent for a single replication
};

struct SimSummary {
    std::string design;
    int reps = 0;
    int failed = 0;
    std::uint64_t seed = 0;
    double tau = 0.0, alpha = 0.0;
    BenchmarkKind::Kind benchmark = BenchmarkKind::Kind::LS;
    std::vector<std::pair<std::string, Moments>> stats;  // fixed order
    std::vector<std::pair<std::string, double>> rates;   // rejection frequencies
    VectorXd mean_F_g, mean_w_2sls, mean_w_gmmf;
    int unconverged = 0;
    std::vector<std::string> failures;  // first few messages

    const Moments& stat(const std::string& name) const;
    double rate(const std::string& name) const;
};

// Replication r draws from RngStream(seed, r); the reduction runs in
// replication order, so the summary does not depend on the thread count.
SimSummary run_sim(const GroupedDesign& design, const SimOptions& opts);

struct CurveRow {
    double e = 0.0;
    double mean_F_r = 0.0, mean_F_eff = 0.0;
    double rel_bias_2sls = 0.0, rel_bias_gmmf = 0.0;  // |bias| / |OLS bias|
    double rf_eff = 0.0, rf_r = 0.0;
    double wald_2sls = 0.0, wald_gmmf = 0.0;
    int failed = 0;
};

std::vector<CurveRow> sweep_scale(const GroupedDesign& design, const std::vector<double>& e_grid,
                                  const SimOptions& opts);

// Sampling law for random designs: c_g ~ U[-c_max, c_max], variances
// U(0, var_max], per-group correlation U(-1, 1), equal shares.
struct RandomDesignConstraints {
    int G = 10;
    double c_max = 40.0;
    double var_max = 10.0;
    double min_abs_rho = 0.2;
    double mu2_2sls_lo = 5.0, mu2_2sls_hi = 10.0;
    double mu2_gmmf_lo = 40.0, mu2_gmmf_hi = 45.0;
    long n = 10000;
};

struct RandomDesignComparison {
    int accepted = 0;
    long draws = 0;
    int larger_2sls = 0;  // designs with |N_2sls| > |N_gmmf|
    double proportion = 0.0;
};

// Collects the first `count` designs meeting the constraints. Throws
// NumericalError if max_draws candidates are not enough.
RandomDesignComparison random_design_comparison(const RandomDesignConstraints& constraints, int count,
                                                std::uint64_t seed, long max_draws = 100000000L);

}  // namespace weakiv

#pragma once

#include "weakiv/data.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace weakiv {

// Weight matrix Omega_n of the linear GMM estimator
//   beta_hat = x'Z Omega_n Z'y / x'Z Omega_n Z'x.
struct WeightSpec {
    enum class Kind {
        TwoSLS,   // Omega_n = (Z'Z/n)^{-1}
        GMMf,     // Omega_n = W2_hat^{-1}, first-stage residual based
        Custom,   // user-supplied fixed SPD matrix
        TwoStep,  // beta-dependent weights; always refused
    };
    Kind kind = Kind::TwoSLS;
    MatrixXd omega;  // Custom only

    static WeightSpec two_sls() { return {Kind::TwoSLS, {}}; }
    static WeightSpec gmmf() { return {Kind::GMMf, {}}; }
    static WeightSpec custom(MatrixXd omega);
    static WeightSpec two_step() { return {Kind::TwoStep, {}}; }
};

const char* to_string(WeightSpec::Kind kind);

enum class CovarianceFlavor { HC0, Cluster };

struct CovarianceOptions {
    CovarianceFlavor flavor = CovarianceFlavor::HC0;
    // Opt-in small-sample scaling: n/(n - k_z) for HC0, G/(G - 1) for cluster.
    bool dof_correction = false;
};

// Estimate of the asymptotic covariance W of (Z'v1, Z'v2)/sqrt(n),
// partitioned into k_z x k_z blocks.
struct WMatrix {
    MatrixXd W1;
    MatrixXd W12;
    MatrixXd W2;
    CovarianceFlavor flavor = CovarianceFlavor::HC0;

    Index kz() const { return W1.rows(); }
    MatrixXd assembled() const;
};

// Covariance of the reduced-form and first-stage errors (v1, v2).
struct SigmaV {
    double s1sq = 0.0;
    double s12 = 0.0;
    double s2sq = 0.0;

    Eigen::Matrix2d matrix() const;
    double rho() const { return s12 / std::sqrt(s1sq * s2sq); }
    // Throws InputError unless positive definite with 1 - rho^2 > 1e-12.
    void check() const;
};

struct EstimateResult {
    double beta_hat = 0.0;
    double se_robust = 0.0;
    double se_nonrobust = 0.0;
    VectorXd residuals;
    WeightSpec weights_used;
    // x'Z Omega_n Z'x, the identification denominator.
    double denominator = 0.0;
};

// Moment covariance kernel (1/n) sum_i r_a,i r_b,i z_i z_i' (HC0) or its
// clustered analogue (1/n) sum_g s_a,g s_b,g' with s_g = sum_{i in g} z_i r_i.
MatrixXd moment_covariance(const MatrixXd& Z, const VectorXd& ra, const VectorXd& rb,
                           const CovarianceOptions& opts = {}, const ClusterIds* clusters = nullptr);

// W_hat from the reduced-form and first-stage residuals of pd.
WMatrix estimate_W(const PartialledData& pd, const CovarianceOptions& opts = {});
// Same kernel applied to arbitrary residual pairs.
WMatrix estimate_W(const PartialledData& pd, const VectorXd& v1, const VectorXd& v2,
                   const CovarianceOptions& opts = {});

SigmaV estimate_sigma_v(const PartialledData& pd);

// Omega_n implied by the spec (for GMMf this needs W2_hat).
MatrixXd weight_matrix(const PartialledData& pd, const WeightSpec& spec, const MatrixXd& W2hat);

EstimateResult estimate(const PartialledData& pd, const WeightSpec& spec, const CovarianceOptions& opts = {});
// Variant reusing an already estimated W2_hat (used by GMMf).
EstimateResult estimate(const PartialledData& pd, const WeightSpec& spec, const MatrixXd& W2hat,
                        const CovarianceOptions& opts = {});

// OLS of y on x (no instruments) with HC0/cluster standard error.
EstimateResult estimate_ols(const PartialledData& pd, const CovarianceOptions& opts = {});

struct WaldResult {
    double statistic = 0.0;
    double pvalue = 1.0;
};

WaldResult wald_test(const EstimateResult& res, double beta0);

}  // namespace weakiv

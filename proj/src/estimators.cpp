#include "weakiv/estimators.hpp"

#include "weakiv/distributions.hpp"
#include "weakiv/error.hpp"

#include <cmath>
#include <string>

namespace weakiv {

WeightSpec WeightSpec::custom(MatrixXd omega) { return {Kind::Custom, std::move(omega)}; }

const char* to_string(WeightSpec::Kind kind) {
    switch (kind) {
        case WeightSpec::Kind::TwoSLS: return "2sls";
        case WeightSpec::Kind::GMMf: return "gmmf";
        case WeightSpec::Kind::Custom: return "custom";
        case WeightSpec::Kind::TwoStep: return "two-step";
    }
    return "unknown";
}

MatrixXd WMatrix::assembled() const {
    const Index k = kz();
    MatrixXd W(2 * k, 2 * k);
    W << W1, W12, W12.transpose(), W2;
    return W;
}

Eigen::Matrix2d SigmaV::matrix() const {
    Eigen::Matrix2d m;
    m << s1sq, s12, s12, s2sq;
    return m;
}

void SigmaV::check() const {
    if (!(s1sq > 0.0) || !(s2sq > 0.0))
        throw InputError("residual covariance Sigma_v has a zero variance");
    const double one_minus_rho2 = 1.0 - s12 * s12 / (s1sq * s2sq);
    if (!(one_minus_rho2 > 1e-12))
        throw InputError(
            "reduced-form and first-stage residuals are (nearly) perfectly correlated; Sigma_v must be "
            "positive definite");
}

MatrixXd moment_covariance(const MatrixXd& Z, const VectorXd& ra, const VectorXd& rb, const CovarianceOptions& opts,
                           const ClusterIds* clusters) {
    const Index n = Z.rows(), k = Z.cols();
    if (ra.size() != n || rb.size() != n) throw InputError("moment_covariance: residual length mismatch");
    MatrixXd W;
    if (opts.flavor == CovarianceFlavor::HC0) {
        const MatrixXd weighted = Z.array().colwise() * (ra.array() * rb.array());
        W = Z.transpose() * weighted / static_cast<double>(n);
        if (opts.dof_correction) W *= static_cast<double>(n) / static_cast<double>(n - k);
    } else {
        if (!clusters) throw InputError("cluster-robust covariance requested but no cluster variable supplied");
        if (static_cast<Index>(clusters->id.size()) != n)
            throw InputError("cluster labels do not match the number of observations");
        const int G = clusters->count();
        MatrixXd Sa = MatrixXd::Zero(G, k), Sb = MatrixXd::Zero(G, k);
        for (Index i = 0; i < n; ++i) {
            const int g = clusters->id[static_cast<std::size_t>(i)];
            Sa.row(g) += ra(i) * Z.row(i);
            Sb.row(g) += rb(i) * Z.row(i);
        }
        W = Sa.transpose() * Sb / static_cast<double>(n);
        if (opts.dof_correction) {
            if (G < 2) throw InputError("cluster dof correction needs at least two clusters");
            W *= static_cast<double>(G) / static_cast<double>(G - 1);
        }
    }
    return W;
}

namespace {

const ClusterIds* clusters_of(const PartialledData& pd) { return pd.cluster() ? &*pd.cluster() : nullptr; }

MatrixXd symmetrized(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

WMatrix estimate_W(const PartialledData& pd, const VectorXd& v1, const VectorXd& v2, const CovarianceOptions& opts) {
    const auto* cl = clusters_of(pd);
    WMatrix W;
    W.flavor = opts.flavor;
    W.W1 = symmetrized(moment_covariance(pd.Z(), v1, v1, opts, cl));
    W.W2 = symmetrized(moment_covariance(pd.Z(), v2, v2, opts, cl));
    W.W12 = moment_covariance(pd.Z(), v1, v2, opts, cl);
    if (opts.flavor == CovarianceFlavor::HC0) W.W12 = symmetrized(W.W12);
    Eigen::LLT<MatrixXd> llt(W.assembled());
    if (llt.info() != Eigen::Success)
        throw NumericalError("estimated moment covariance W is not positive definite" +
                             std::string(opts.flavor == CovarianceFlavor::Cluster ? " (too few clusters?)" : ""));
    return W;
}

WMatrix estimate_W(const PartialledData& pd, const CovarianceOptions& opts) {
    return estimate_W(pd, pd.v1_hat(), pd.v2_hat(), opts);
}

SigmaV estimate_sigma_v(const PartialledData& pd) {
    const double n = static_cast<double>(pd.n());
    SigmaV s{pd.v1_hat().squaredNorm() / n, pd.v1_hat().dot(pd.v2_hat()) / n, pd.v2_hat().squaredNorm() / n};
    s.check();
    return s;
}

MatrixXd weight_matrix(const PartialledData& pd, const WeightSpec& spec, const MatrixXd& W2hat) {
    const Index k = pd.kz();
    switch (spec.kind) {
        case WeightSpec::Kind::TwoSLS:
            return static_cast<double>(pd.n()) * pd.solve_ZtZ(MatrixXd::Identity(k, k));
        case WeightSpec::Kind::GMMf: {
            if (W2hat.rows() != k || W2hat.cols() != k) throw InputError("GMMf weights need a k_z x k_z W2_hat");
            Eigen::LLT<MatrixXd> llt(W2hat);
            if (llt.info() != Eigen::Success) throw NumericalError("W2_hat is singular; GMMf weights undefined");
            return symmetrized(llt.solve(MatrixXd::Identity(k, k)));
        }
        case WeightSpec::Kind::Custom: {
            const MatrixXd& om = spec.omega;
            if (om.rows() != k || om.cols() != k)
                throw InputError("custom weight matrix must be " + std::to_string(k) + " x " + std::to_string(k));
            if ((om - om.transpose()).norm() > 1e-10 * std::max(1.0, om.norm()))
                throw InputError("custom weight matrix is not symmetric");
            Eigen::LLT<MatrixXd> llt(om);
            if (llt.info() != Eigen::Success) throw InputError("custom weight matrix is not positive definite");
            return om;
        }
        case WeightSpec::Kind::TwoStep:
            throw InputError(
                "two-step GMM with a beta-dependent weight matrix is not supported: under weak-instrument "
                "asymptotics the first-step estimate does not converge to a constant, so the weight matrix has "
                "no fixed full-rank limit");
    }
    throw InputError("unknown weight specification");
}

EstimateResult estimate(const PartialledData& pd, const WeightSpec& spec, const MatrixXd& W2hat,
                        const CovarianceOptions& opts) {
    const MatrixXd omega = weight_matrix(pd, spec, W2hat);
    const double n = static_cast<double>(pd.n());
    const VectorXd a = omega * pd.Ztx();
    const double den = pd.Ztx().dot(a);
    if (!(den > 0.0) || den <= 1e-14 * pd.Ztx().squaredNorm() * omega.norm())
        throw NumericalError("x'Z Omega Z'x is zero: the instruments carry no first-stage information");
    EstimateResult r;
    r.weights_used = spec;
    r.denominator = den;
    r.beta_hat = pd.Zty().dot(a) / den;
    r.residuals = pd.y() - pd.x() * r.beta_hat;

    const MatrixXd Wu = moment_covariance(pd.Z(), r.residuals, r.residuals, opts, clusters_of(pd));
    const double var_robust = n * a.dot(Wu * a) / (den * den);
    double s2u = r.residuals.squaredNorm() / n;
    if (opts.dof_correction) s2u *= n / (n - static_cast<double>(pd.kz()));
    const double var_nonrobust = s2u * a.dot(pd.ZtZ() * a) / (den * den);
    if (!(var_robust > 0.0) || !(var_nonrobust > 0.0))
        throw NumericalError("structural residuals are identically zero; standard errors undefined");
    r.se_robust = std::sqrt(var_robust);
    r.se_nonrobust = std::sqrt(var_nonrobust);
    return r;
}

EstimateResult estimate(const PartialledData& pd, const WeightSpec& spec, const CovarianceOptions& opts) {
    MatrixXd W2hat;
    if (spec.kind == WeightSpec::Kind::GMMf) W2hat = estimate_W(pd, opts).W2;
    return estimate(pd, spec, W2hat, opts);
}

EstimateResult estimate_ols(const PartialledData& pd, const CovarianceOptions& opts) {
    const double n = static_cast<double>(pd.n());
    const double xx = pd.x().squaredNorm();
    if (!(xx > 0.0)) throw NumericalError("x is identically zero");
    EstimateResult r;
    r.denominator = xx;
    r.beta_hat = pd.x().dot(pd.y()) / xx;
    r.residuals = pd.y() - pd.x() * r.beta_hat;
    const MatrixXd X = pd.x();
    const MatrixXd Wu = moment_covariance(X, r.residuals, r.residuals, opts, clusters_of(pd));
    r.se_robust = std::sqrt(n * Wu(0, 0)) / xx;
    r.se_nonrobust = std::sqrt(r.residuals.squaredNorm() / n / xx);
    return r;
}

WaldResult wald_test(const EstimateResult& res, double beta0) {
    if (!(res.se_robust > 0.0)) throw NumericalError("Wald test needs a positive robust standard error");
    const double t = (res.beta_hat - beta0) / res.se_robust;
    WaldResult w;
    w.statistic = t * t;
    w.pvalue = w.statistic > 0.0 ? gamma_q(0.5, 0.5 * w.statistic) : 1.0;
    return w;
}

}  // namespace weakiv

#include "weakiv/fstats.hpp"

#include "weakiv/error.hpp"

namespace weakiv {

const char* to_string(FStatValue::Kind kind) {
    switch (kind) {
        case FStatValue::Kind::NonRobust: return "F";
        case FStatValue::Kind::Robust: return "F_r";
        case FStatValue::Kind::Effective: return "F_eff";
        case FStatValue::Kind::GeneralizedEffective: return "F_geff";
    }
    return "?";
}

namespace {

void check_W2(const PartialledData& pd, const MatrixXd& W2hat) {
    if (W2hat.rows() != pd.kz() || W2hat.cols() != pd.kz()) throw InputError("W2_hat has the wrong dimension");
}

}  // namespace

FStatValue f_nonrobust(const PartialledData& pd) {
    const double s2 = pd.v2_hat().squaredNorm() / static_cast<double>(pd.n());
    if (!(s2 > 0.0)) throw NumericalError("first-stage residual variance is zero");
    return {FStatValue::Kind::NonRobust, pd.xPx() / (static_cast<double>(pd.kz()) * s2)};
}

FStatValue f_robust(const PartialledData& pd, const MatrixXd& W2hat) {
    check_W2(pd, W2hat);
    Eigen::LLT<MatrixXd> llt(W2hat);
    if (llt.info() != Eigen::Success) throw NumericalError("W2_hat is singular; robust F undefined");
    const double q = pd.Ztx().dot(llt.solve(pd.Ztx()));
    return {FStatValue::Kind::Robust, q / (static_cast<double>(pd.n()) * static_cast<double>(pd.kz()))};
}

FStatValue f_effective(const PartialledData& pd, const MatrixXd& W2hat) {
    check_W2(pd, W2hat);
    // tr(W2 (Z'Z/n)^{-1}) = n tr((Z'Z)^{-1} W2)
    const double tr = static_cast<double>(pd.n()) * pd.solve_ZtZ(W2hat).trace();
    if (!(tr > 0.0)) throw NumericalError("tr(W2 (Z'Z/n)^{-1}) is not positive");
    return {FStatValue::Kind::Effective, pd.xPx() / tr};
}

FStatValue f_generalized(const PartialledData& pd, const MatrixXd& W2hat, const MatrixXd& omega) {
    check_W2(pd, W2hat);
    if (omega.rows() != pd.kz() || omega.cols() != pd.kz()) throw InputError("Omega has the wrong dimension");
    Eigen::LLT<MatrixXd> llt(omega);
    if (llt.info() != Eigen::Success) throw InputError("Omega is not positive definite");
    const double tr = (W2hat * omega).trace();
    if (!(tr > 0.0)) throw NumericalError("tr(W2 Omega) is not positive");
    const double q = pd.Ztx().dot(omega * pd.Ztx());
    return {FStatValue::Kind::GeneralizedEffective, q / (static_cast<double>(pd.n()) * tr)};
}

FirstStageStats first_stage_stats(const PartialledData& pd, const WMatrix& What) {
    return {f_nonrobust(pd).value, f_effective(pd, What.W2).value, f_robust(pd, What.W2).value};
}

}  // namespace weakiv

#pragma once

#include "weakiv/data.hpp"
#include "weakiv/estimators.hpp"

namespace weakiv {

struct FStatValue {
    enum class Kind { NonRobust, Robust, Effective, GeneralizedEffective };
    Kind kind = Kind::NonRobust;
    double value = 0.0;
};

const char* to_string(FStatValue::Kind kind);

// x'P_Z x / (k_z sigma2_v2), sigma2_v2 = v2'v2/n.
FStatValue f_nonrobust(const PartialledData& pd);
// x'Z W2^{-1} Z'x / (n k_z).
FStatValue f_robust(const PartialledData& pd, const MatrixXd& W2hat);
// x'P_Z x / tr(W2 (Z'Z/n)^{-1}).
FStatValue f_effective(const PartialledData& pd, const MatrixXd& W2hat);
// x'Z Omega Z'x / (n tr(W2 Omega)); reduces to the effective F for
// Omega = (Z'Z/n)^{-1} and to the robust F for Omega = W2^{-1}.
FStatValue f_generalized(const PartialledData& pd, const MatrixXd& W2hat, const MatrixXd& omega);

// The three standard first-stage statistics from one W estimate.
struct FirstStageStats {
    double f_nonrobust = 0.0;
    double f_effective = 0.0;
    double f_robust = 0.0;
};

FirstStageStats first_stage_stats(const PartialledData& pd, const WMatrix& What);

}  // namespace weakiv

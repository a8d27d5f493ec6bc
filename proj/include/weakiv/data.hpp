#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace weakiv {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Singular values below this fraction of the largest are treated as zero.
inline constexpr double kRankTolerance = 1e-10;

struct ClusterIds {
    std::vector<int> id;             // dense ids, first-appearance order
    std::vector<std::string> labels;  // label of each dense id
    int count() const { return static_cast<int>(labels.size()); }
};

// Raw sample: outcome y, single endogenous regressor x, excluded instruments Z,
// optional included exogenous controls C and optional cluster labels.
struct Dataset {
    VectorXd y;
    VectorXd x;
    MatrixXd Z;
    std::optional<MatrixXd> C;
    std::optional<ClusterIds> cluster;

    Index n() const { return y.size(); }
    Index kz() const { return Z.cols(); }
    Index kc() const { return C ? C->cols() : 0; }
};

// The model after controls (including the constant) are projected out.
// Cross-products and first-stage/reduced-form residuals are computed once at
// construction so that every statistic of a report uses the same pass.
class PartialledData {
public:
    PartialledData(VectorXd y, VectorXd x, MatrixXd Z, std::optional<ClusterIds> cluster = std::nullopt);

    const VectorXd& y() const { return y_; }
    const VectorXd& x() const { return x_; }
    const MatrixXd& Z() const { return Z_; }
    const std::optional<ClusterIds>& cluster() const { return cluster_; }
    Index n() const { return y_.size(); }
    Index kz() const { return Z_.cols(); }

    const MatrixXd& ZtZ() const { return ZtZ_; }
    const VectorXd& Ztx() const { return Ztx_; }
    const VectorXd& Zty() const { return Zty_; }
    // OLS coefficients of the first stage (x on Z) and reduced form (y on Z).
    const VectorXd& pi_hat() const { return pi_hat_; }
    const VectorXd& pi_y_hat() const { return pi_y_hat_; }
    // (I - P_Z) y and (I - P_Z) x.
    const VectorXd& v1_hat() const { return v1_hat_; }
    const VectorXd& v2_hat() const { return v2_hat_; }
    // x'P_Z x
    double xPx() const { return xPx_; }
    // Solves (Z'Z) b = rhs.
    MatrixXd solve_ZtZ(const MatrixXd& rhs) const { return ZtZ_llt_.solve(rhs); }

private:
    VectorXd y_, x_;
    MatrixXd Z_;
    std::optional<ClusterIds> cluster_;
    MatrixXd ZtZ_;
    Eigen::LLT<MatrixXd> ZtZ_llt_;
    VectorXd Ztx_, Zty_, pi_hat_, pi_y_hat_, v1_hat_, v2_hat_;
    double xPx_ = 0.0;
};

// Column-role binding for CSV ingestion.
struct ColumnSchema {
    std::string y;
    std::string x;
    std::vector<std::string> z;
    std::vector<std::string> controls;
    std::optional<std::string> cluster;
    bool intercept = true;  // append a column of ones to the controls
};

Dataset load_csv(const std::string& path, const ColumnSchema& schema);

// Checks dimensions, finiteness and the rank conditions (C full column rank,
// partialled Z full column rank). Throws InputError.
void validate(const Dataset& d);

PartialledData partial_out(const Dataset& d);

// Numerical rank using the relative singular-value threshold kRankTolerance.
Index numerical_rank(const MatrixXd& m);

ClusterIds make_cluster_ids(const std::vector<std::string>& labels);

}  // namespace weakiv

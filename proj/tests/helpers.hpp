#pragma once

#include "weakiv/data.hpp"
#include "weakiv/distributions.hpp"
#include "weakiv/weak_test.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <string>

namespace testing_util {

using namespace weakiv;

inline MatrixXd random_spd(Index k, RngStream& rng, double ridge = 0.1) {
    MatrixXd A(k, k);
    for (Index i = 0; i < k; ++i)
        for (Index j = 0; j < k; ++j) A(i, j) = rng.normal();
    return A * A.transpose() / static_cast<double>(k) + ridge * MatrixXd::Identity(k, k);
}

// Heteroskedastic single-endogenous IV sample with an intercept control.
inline Dataset random_dataset(Index n, Index kz, RngStream& rng, bool with_controls = true) {
    Dataset d;
    d.Z.resize(n, kz);
    d.x.resize(n);
    d.y.resize(n);
    VectorXd pi(kz);
    for (Index j = 0; j < kz; ++j) pi(j) = 0.3 * rng.normal();
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < kz; ++j) d.Z(i, j) = rng.normal() + (j == 0 ? 0.5 : 0.0);
        const double scale = 1.0 + 0.8 * std::abs(d.Z(i, 0));
        const double v = scale * rng.normal();
        const double u = 0.6 * v + rng.normal();
        d.x(i) = 0.2 + d.Z.row(i).dot(pi) + v;
        d.y(i) = 1.0 - 0.5 * d.x(i) + u;
    }
    if (with_controls) {
        MatrixXd C(n, 2);
        for (Index i = 0; i < n; ++i) {
            C(i, 0) = rng.normal();
            C(i, 1) = 1.0;
        }
        d.C = C;
    }
    return d;
}

// Random SPD W assembled from blocks and returned as WOmega with Omega = I.
inline WOmega random_womega(Index k, RngStream& rng) {
    const MatrixXd W = random_spd(2 * k, rng, 0.05);
    WOmega w;
    w.W1 = W.topLeftCorner(k, k);
    w.W12 = W.topRightCorner(k, k);
    w.W2 = W.bottomRightCorner(k, k);
    return w;
}

// W = Sigma_v (x) Q.
inline WOmega kron_womega(const Eigen::Matrix2d& S, const MatrixXd& Q) {
    WOmega w;
    w.W1 = S(0, 0) * Q;
    w.W12 = S(0, 1) * Q;
    w.W2 = S(1, 1) * Q;
    return w;
}

inline std::string write_temp(const std::string& name, const std::string& content) {
    const std::string path = std::string(WEAKIV_TEST_TMP) + "/" + name;
    std::ofstream(path) << content;
    return path;
}

}  // namespace testing_util

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace weakiv {

// Regularized lower/upper incomplete gamma P(a, x), Q(a, x) = 1 - P(a, x).
// Series for x < a + 1, Lentz continued fraction otherwise.
double gamma_p(double a, double x);
double gamma_q(double a, double x);

// Noncentral chi-square law. df may be fractional (Patnaik effective degrees
// of freedom are generically non-integer); ncp = 0 is the central case.
class NoncentralChiSq {
public:
    NoncentralChiSq(double df, double ncp = 0.0);
    double df() const { return df_; }
    double ncp() const { return ncp_; }

private:
    double df_;
    double ncp_;
};

inline constexpr double kChiSqSeriesTolerance = 1e-13;

// Poisson mixture sum_j Pois(j; ncp/2) P(df/2 + j, x/2), summed outward from
// the Poisson mode until the neglected Poisson mass is below `tolerance`.
double chisq_cdf(const NoncentralChiSq& d, double x, double tolerance = kChiSqSeriesTolerance);
double chisq_sf(const NoncentralChiSq& d, double x, double tolerance = kChiSqSeriesTolerance);

// Lower quantile: x with CDF(x) = p, by bracketed bisection.
double chisq_quantile(const NoncentralChiSq& d, double p);
// Upper-alpha quantile, i.e. chisq_quantile(d, 1 - alpha) computed on the survival side.
double chisq_upper_quantile(const NoncentralChiSq& d, double alpha);

// A reproducible random stream. Identical (seed, stream) pairs give identical
// draws; distinct stream ids give independent-looking streams, so replication
// r can own stream r regardless of which worker thread runs it.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    double normal() { return normal_(engine_); }
    // Uniform on [0, 1).
    double uniform() { return uniform_(engine_); }
    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// count x d matrix of draws mean + L xi, L the lower Cholesky factor of cov.
Eigen::MatrixXd mvn_sample(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, RngStream& rng,
                           Eigen::Index count);

// Uniformly distributed point on the unit sphere in R^k.
Eigen::VectorXd random_unit_vector(Eigen::Index k, RngStream& rng);

}  // namespace weakiv

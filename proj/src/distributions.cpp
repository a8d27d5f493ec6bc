#include "weakiv/distributions.hpp"

#include "weakiv/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace weakiv {

namespace {

constexpr double kGammaEps = 1e-15;
constexpr int kGammaMaxIter = 100000;
constexpr double kTiny = 1e-300;

// glibc's lgamma writes the global signgam; lgamma_r does not.
double log_gamma(double a) {
#if defined(__GLIBC__)
    int sign = 0;
    return ::lgamma_r(a, &sign);
#else
    return std::lgamma(a);
#endif
}

double gamma_series(double a, double x) {
    double ap = a;
    double del = 1.0 / a;
    double sum = del;
    for (int n = 0; n < kGammaMaxIter; ++n) {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if (std::abs(del) < std::abs(sum) * kGammaEps) break;
    }
    return sum * std::exp(-x + a * std::log(x) - log_gamma(a));
}

// Upper tail Q(a, x) by the modified Lentz continued fraction.
double gamma_cont_frac(double a, double x) {
    double b = x + 1.0 - a;
    double c = 1.0 / kTiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < kGammaMaxIter; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < kTiny) d = kTiny;
        c = b + an / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kGammaEps) break;
    }
    return std::exp(-x + a * std::log(x) - log_gamma(a)) * h;
}

struct TailPair {
    double lower;
    double upper;
};

TailPair gamma_pq(double a, double x) {
    if (x <= 0.0) return {0.0, 1.0};
    if (x < a + 1.0) {
        const double p = gamma_series(a, x);
        return {p, 1.0 - p};
    }
    const double q = gamma_cont_frac(a, x);
    return {1.0 - q, q};
}

// CDF and survival function of the noncentral chi-square together. Both are
// Poisson mixtures over j of the central terms at shape a + j; the central
// terms for neighbouring j are linked by
//   P(a + j + 1, h) = P(a + j, h) - t_j,  t_j = h^(a+j) e^(-h) / Gamma(a + j + 1).
TailPair noncentral_tails(const NoncentralChiSq& d, double x, double tolerance) {
    if (x <= 0.0) return {0.0, 1.0};
    const double a = 0.5 * d.df();
    const double h = 0.5 * x;
    const double lam = 0.5 * d.ncp();
    if (lam == 0.0) return gamma_pq(a, h);

    const double m = std::floor(lam);
    const double log_h = std::log(h);
    const double w_mode = std::exp(-lam + m * std::log(lam) - log_gamma(m + 1.0));
    const TailPair pq_mode = gamma_pq(a + m, h);
    const double t_mode = std::exp((a + m) * log_h - h - log_gamma(a + m + 1.0));

    double lower = w_mode * pq_mode.lower;
    double upper = w_mode * pq_mode.upper;

    // Upward from the mode.
    {
        double w = w_mode, p = pq_mode.lower, q = pq_mode.upper, t = t_mode, j = m;
        for (;;) {
            p = std::max(p - t, 0.0);
            q = std::min(q + t, 1.0);
            t *= h / (a + j + 1.0);
            j += 1.0;
            w *= lam / j;
            lower += w * p;
            upper += w * q;
            const double r = lam / (j + 1.0);
            if (r < 1.0 && w * r / (1.0 - r) < tolerance) break;
            if (w == 0.0) break;
        }
    }
    // Downward from the mode.
    {
        double w = w_mode, p = pq_mode.lower, q = pq_mode.upper, t = t_mode, j = m;
        while (j > 0.0) {
            t *= (a + j) / h;  // t_{j-1}
            p = std::min(p + t, 1.0);
            q = std::max(q - t, 0.0);
            w *= j / lam;
            j -= 1.0;
            lower += w * p;
            upper += w * q;
            const double r = j / lam;
            if (w * r / (1.0 - r) < tolerance) break;
        }
    }
    return {std::clamp(lower, 0.0, 1.0), std::clamp(upper, 0.0, 1.0)};
}

void check_probability(double p, const char* what) {
    if (!(p > 0.0 && p < 1.0)) throw InputError(std::string(what) + " must lie strictly between 0 and 1");
}

}  // namespace

double gamma_p(double a, double x) {
    if (!(a > 0.0)) throw InputError("gamma_p: shape must be positive");
    return gamma_pq(a, x).lower;
}

double gamma_q(double a, double x) {
    if (!(a > 0.0)) throw InputError("gamma_q: shape must be positive");
    return gamma_pq(a, x).upper;
}

NoncentralChiSq::NoncentralChiSq(double df, double ncp) : df_(df), ncp_(ncp) {
    if (!(df > 0.0) || !std::isfinite(df)) throw InputError("chi-square degrees of freedom must be positive");
    if (!(ncp >= 0.0) || !std::isfinite(ncp)) throw InputError("chi-square noncentrality must be nonnegative");
}

double chisq_cdf(const NoncentralChiSq& d, double x, double tolerance) {
    return noncentral_tails(d, x, tolerance).lower;
}

double chisq_sf(const NoncentralChiSq& d, double x, double tolerance) {
    return noncentral_tails(d, x, tolerance).upper;
}

namespace {

// Bisection for the point where `tail(x)` crosses `target`. `increasing`
// tells whether tail is the CDF (true) or the survival function (false).
template <typename Tail>
double bisect_quantile(const NoncentralChiSq& d, double target, bool increasing, Tail tail) {
    double lo = 0.0;
    double hi = d.df() + d.ncp() + 10.0 * std::sqrt(2.0 * d.df() + 4.0 * d.ncp()) + 50.0;
    auto below = [&](double x) { return increasing ? tail(x) < target : tail(x) > target; };
    for (int i = 0; i < 200 && below(hi); ++i) {
        lo = hi;
        hi *= 2.0;
    }
    for (int i = 0; i < 400; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (below(mid))
            lo = mid;
        else
            hi = mid;
        if (hi - lo <= 1e-14 * std::max(1.0, hi)) break;
    }
    return 0.5 * (lo + hi);
}

}  // namespace

double chisq_quantile(const NoncentralChiSq& d, double p) {
    check_probability(p, "quantile probability");
    return bisect_quantile(d, p, true, [&](double x) { return chisq_cdf(d, x); });
}

double chisq_upper_quantile(const NoncentralChiSq& d, double alpha) {
    check_probability(alpha, "upper-tail probability");
    return bisect_quantile(d, alpha, false, [&](double x) { return chisq_sf(d, x); });
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      0x5eed5eedu};
    engine_.seed(seq);
}

Eigen::MatrixXd mvn_sample(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, RngStream& rng,
                           Eigen::Index count) {
    const Eigen::Index k = mean.size();
    if (cov.rows() != k || cov.cols() != k) throw InputError("mvn_sample: covariance dimension mismatch");
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericalError("mvn_sample: covariance is not positive definite");
    const Eigen::MatrixXd L = llt.matrixL();
    Eigen::MatrixXd out(count, k);
    Eigen::VectorXd xi(k);
    for (Eigen::Index i = 0; i < count; ++i) {
        for (Eigen::Index j = 0; j < k; ++j) xi(j) = rng.normal();
        out.row(i) = (mean + L * xi).transpose();
    }
    return out;
}

Eigen::VectorXd random_unit_vector(Eigen::Index k, RngStream& rng) {
    Eigen::VectorXd v(k);
    double norm = 0.0;
    do {
        for (Eigen::Index j = 0; j < k; ++j) v(j) = rng.normal();
        norm = v.norm();
    } while (norm < 1e-12);
    return v / norm;
}

}  // namespace weakiv

#include "weakiv/weak_test.hpp"

#include "weakiv/distributions.hpp"
#include "weakiv/error.hpp"
#include "weakiv/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

namespace weakiv {

MatrixXd WOmega::assembled() const {
    const Index k = kz();
    MatrixXd W(2 * k, 2 * k);
    W << W1, W12, W12.transpose(), W2;
    return W;
}

MatrixXd spd_sqrt(const MatrixXd& m) {
    if (m.rows() != m.cols() || m.rows() == 0) throw InputError("weight matrix must be square and non-empty");
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale) throw InputError("weight matrix is not symmetric");
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (m + m.transpose()));
    if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition of the weight matrix failed");
    const VectorXd& ev = es.eigenvalues();
    if (!(ev.minCoeff() > 1e-14 * std::max(ev.maxCoeff(), 0.0)) || !(ev.maxCoeff() > 0.0))
        throw InputError("weight matrix is not positive definite");
    return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

WOmega transform_W(const MatrixXd& W1, const MatrixXd& W12, const MatrixXd& W2, const MatrixXd& omega) {
    const Index k = W1.rows();
    if (W1.cols() != k || W12.rows() != k || W12.cols() != k || W2.rows() != k || W2.cols() != k ||
        omega.rows() != k || omega.cols() != k)
        throw InputError("W blocks and weight matrix must all be k_z x k_z");
    const MatrixXd R = spd_sqrt(omega);
    WOmega w;
    w.W1 = R * W1 * R;
    w.W1 = 0.5 * (w.W1 + w.W1.transpose()).eval();
    w.W12 = R * W12 * R;
    w.W2 = R * W2 * R;
    w.W2 = 0.5 * (w.W2 + w.W2.transpose()).eval();
    w.omega_used = WeightSpec::custom(omega);
    return w;
}

WOmega transform_W(const WMatrix& What, const MatrixXd& omega, WeightSpec used) {
    WOmega w = transform_W(What.W1, What.W12, What.W2, omega);
    if (used.kind == WeightSpec::Kind::Custom && used.omega.size() == 0) used.omega = omega;
    w.omega_used = std::move(used);
    return w;
}

SMatrices s_matrices(double beta, const WOmega& w) {
    SMatrices s;
    s.S1 = w.W1 - beta * (w.W12 + w.W12.transpose()) + beta * beta * w.W2;
    s.S12 = w.W12 - beta * w.W2;
    return s;
}

double nagar_n(double beta, const VectorXd& c0, const WOmega& w) {
    const MatrixXd S12 = w.W12 - beta * w.W2;
    return (S12.trace() - 2.0 * c0.dot(S12 * c0)) / w.W2.trace();
}

BenchmarkKind BenchmarkKind::ls(const SigmaV& s) {
    s.check();
    return {Kind::LS, s};
}

const char* to_string(BenchmarkKind::Kind kind) { return kind == BenchmarkKind::Kind::MOP ? "mop" : "ls"; }

namespace {

[[noreturn]] void radicand_error(double beta) {
    std::ostringstream os;
    os << "benchmark bias radicand is not positive at beta = " << beta << " (perfectly dependent errors)";
    throw NumericalError(os.str());
}

// Coefficients of BM^2 = q0 - q1 beta + beta^2.
struct BenchmarkQuadratic {
    double q0 = 0.0;
    double q1 = 0.0;
};

BenchmarkQuadratic benchmark_quadratic(const WOmega& w, const BenchmarkKind& kind) {
    if (kind.kind == BenchmarkKind::Kind::MOP) {
        const double t2 = w.W2.trace();
        return {w.W1.trace() / t2, 2.0 * w.W12.trace() / t2};
    }
    kind.sigma.check();
    return {kind.sigma.s1sq / kind.sigma.s2sq, 2.0 * kind.sigma.s12 / kind.sigma.s2sq};
}

}  // namespace

double benchmark(double beta, const WOmega& w, const BenchmarkKind& kind) {
    double r = 0.0;
    if (kind.kind == BenchmarkKind::Kind::MOP) {
        const double t2 = w.W2.trace();
        r = (w.W1.trace() - 2.0 * beta * w.W12.trace() + beta * beta * t2) / t2;
    } else {
        const auto& s = kind.sigma;
        r = (s.s1sq - 2.0 * beta * s.s12 + beta * beta * s.s2sq) / s.s2sq;
    }
    if (!(r > 0.0)) radicand_error(beta);
    return std::sqrt(r);
}

double nagar_ratio(double beta, const VectorXd& c0, const WOmega& w, const BenchmarkKind& kind) {
    return std::abs(nagar_n(beta, c0, w)) / benchmark(beta, w, kind);
}

namespace {

// With n = a(c) + b(c) beta and BM^2 = q0 - q1 beta + beta^2 = t'Dt for
// t = (1, beta), Cauchy-Schwarz gives sup_beta n^2/BM^2 = u'D^{-1}u, u = (a, b).
//   a(c) = tr W12 / tr W2 - 2 c'A c,  A = sym(W12) / tr W2
//   b(c) = -1 + 2 c'B c,              B = W2 / tr W2
struct SphereObjective {
    MatrixXd A, Bm;
    double a0 = 0.0;
    double q0 = 0.0, q1 = 0.0, det = 0.0;

    SphereObjective(const WOmega& w, const BenchmarkKind& kind) {
        const double t2 = w.W2.trace();
        if (!(t2 > 0.0)) throw InputError("W_Omega,2 must have positive trace");
        A = 0.5 * (w.W12 + w.W12.transpose()) / t2;
        Bm = w.W2 / t2;
        a0 = w.W12.trace() / t2;
        const auto q = benchmark_quadratic(w, kind);
        q0 = q.q0;
        q1 = q.q1;
        det = q0 - 0.25 * q1 * q1;
        if (!(det > 0.0)) radicand_error(0.5 * q1);
    }

    double a(const VectorXd& c) const { return a0 - 2.0 * c.dot(A * c); }
    double b(const VectorXd& c) const { return -1.0 + 2.0 * c.dot(Bm * c); }
    double g(double av, double bv) const { return (av * av + q1 * av * bv + q0 * bv * bv) / det; }
    double value(const VectorXd& c) const { return g(a(c), b(c)); }

    // Euclidean gradient of value at c.
    VectorXd gradient(const VectorXd& c, double& val) const {
        const VectorXd Ac = A * c;
        const VectorXd Bc = Bm * c;
        const double av = a0 - 2.0 * c.dot(Ac);
        const double bv = -1.0 + 2.0 * c.dot(Bc);
        val = g(av, bv);
        const double ga = (2.0 * av + q1 * bv) / det;
        const double gb = (q1 * av + 2.0 * q0 * bv) / det;
        return -4.0 * ga * Ac + 4.0 * gb * Bc;
    }

    double argmax_beta(const VectorXd& c) const {
        const double av = a(c), bv = b(c);
        const double t0 = av + 0.5 * q1 * bv;
        const double t1 = 0.5 * q1 * av + q0 * bv;
        if (t0 == 0.0 && t1 == 0.0) return 0.0;
        if (std::abs(t0) <= 1e-14 * std::abs(t1)) return std::numeric_limits<double>::infinity();
        return t1 / t0;
    }
};

struct AscentResult {
    VectorXd c;
    double value = 0.0;
    bool converged = false;
};

AscentResult ascend(const SphereObjective& obj, VectorXd c, const SupOptions& opts) {
    c.normalize();
    double val = 0.0;
    double step = 1.0;
    for (int it = 0; it < opts.max_iterations; ++it) {
        VectorXd grad = obj.gradient(c, val);
        grad -= c.dot(grad) * c;  // tangent component
        const double gnorm2 = grad.squaredNorm();
        if (std::sqrt(gnorm2) <= opts.tolerance * std::max(1.0, val)) return {c, val, true};
        bool accepted = false;
        while (step > 1e-18) {
            VectorXd trial = (c + step * grad).normalized();
            const double tv = obj.value(trial);
            if (tv >= val + 1e-4 * step * gnorm2) {
                c = std::move(trial);
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            // No further ascent at machine precision; accept a small residual gradient.
            return {c, val, std::sqrt(gnorm2) <= std::sqrt(opts.tolerance) * std::max(1.0, val)};
        }
    }
    double final_val = 0.0;
    VectorXd grad = obj.gradient(c, final_val);
    grad -= c.dot(grad) * c;
    return {c, final_val, grad.norm() <= std::sqrt(opts.tolerance) * std::max(1.0, final_val)};
}

void check_mop_bound(double B, const BenchmarkKind& kind) {
    if (kind.kind == BenchmarkKind::Kind::MOP && B > 1.0 + 1e-6) {
        std::ostringstream os;
        os << "B = " << B << " exceeds 1 under the MOP benchmark; the W estimate is inconsistent";
        throw NumericalError(os.str());
    }
}

VectorXd top_eigenvector(const MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(m);
    return es.eigenvectors().col(m.rows() - 1);
}

}  // namespace

SupResult sup_B(const WOmega& w, const BenchmarkKind& kind, const SupOptions& opts) {
    const Index k = w.kz();
    if (k < 1) throw InputError("sup_B needs k_z >= 1");
    const SphereObjective obj(w, kind);
    SupResult out;
    if (k == 1) {
        VectorXd c = VectorXd::Ones(1);
        out.B = std::sqrt(std::max(0.0, obj.value(c)));
        out.argmax_c0 = c;
        out.argmax_beta = obj.argmax_beta(c);
        out.restarts_used = 1;
        check_mop_bound(out.B, kind);
        return out;
    }

    std::vector<VectorXd> starts;
    // Supporting directions of the joint range of (c'Ac, c'Bc); the objective is
    // convex there, so its maximum is approached along these.
    {
        std::vector<std::pair<double, VectorXd>> sweep;
        const int m = std::max(8, opts.sweep_angles);
        sweep.reserve(static_cast<std::size_t>(m));
        for (int j = 0; j < m; ++j) {
            const double th = 2.0 * M_PI * j / m;
            VectorXd v = top_eigenvector(std::cos(th) * obj.A + std::sin(th) * obj.Bm);
            sweep.emplace_back(obj.value(v), std::move(v));
        }
        std::vector<std::pair<double, int>> peaks;
        for (int j = 0; j < m; ++j) {
            const double prev = sweep[static_cast<std::size_t>((j + m - 1) % m)].first;
            const double next = sweep[static_cast<std::size_t>((j + 1) % m)].first;
            const double cur = sweep[static_cast<std::size_t>(j)].first;
            if (cur >= prev && cur >= next) peaks.emplace_back(cur, j);
        }
        std::sort(peaks.begin(), peaks.end(), [](const auto& l, const auto& r) { return l.first > r.first; });
        for (std::size_t i = 0; i < peaks.size() && i < 8; ++i)
            starts.push_back(sweep[static_cast<std::size_t>(peaks[i].second)].second);
    }
    {
        Eigen::SelfAdjointEigenSolver<MatrixXd> ea(obj.A);
        Eigen::SelfAdjointEigenSolver<MatrixXd> eb(obj.Bm);
        for (Index j = 0; j < k; ++j) {
            starts.push_back(ea.eigenvectors().col(j));
            starts.push_back(eb.eigenvectors().col(j));
        }
    }
    RngStream rng(opts.seed, 0);
    for (int j = 0; j < opts.random_starts; ++j) starts.push_back(random_unit_vector(k, rng));

    AscentResult best;
    best.value = -1.0;
    for (const auto& s : starts) {
        AscentResult r = ascend(obj, s, opts);
        if (r.value > best.value) best = std::move(r);
    }
    out.B = std::sqrt(std::max(0.0, best.value));
    out.argmax_c0 = best.c;
    out.argmax_beta = obj.argmax_beta(best.c);
    out.restarts_used = static_cast<int>(starts.size());
    out.converged = best.converged;
    check_mop_bound(out.B, kind);
    return out;
}

SupResult sup_B_gmmf(const WOmega& w, const BenchmarkKind& kind) {
    const Index k = w.kz();
    if (k < 1) throw InputError("sup_B needs k_z >= 1");
    if ((w.W2 - MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff() > 1e-8)
        throw InputError("closed-form B requires W_Omega,2 = I");
    const SphereObjective obj(w, kind);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(obj.A);
    const VectorXd lo = es.eigenvectors().col(0);
    const VectorXd hi = es.eigenvectors().col(k - 1);
    const double vlo = obj.value(lo), vhi = obj.value(hi);
    SupResult out;
    out.argmax_c0 = vlo >= vhi ? lo : hi;
    out.B = std::sqrt(std::max(0.0, std::max(vlo, vhi)));
    out.argmax_beta = obj.argmax_beta(out.argmax_c0);
    out.restarts_used = 0;
    check_mop_bound(out.B, kind);
    return out;
}

double patnaik_keff(const MatrixXd& W2, double d) {
    if (!(d >= 0.0)) throw InputError("d must be non-negative");
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (W2 + W2.transpose()), Eigen::EigenvaluesOnly);
    const double tr = W2.trace();
    const double lmax = es.eigenvalues().maxCoeff();
    if (!(tr > 0.0) || !(es.eigenvalues().minCoeff() > 0.0)) throw InputError("W_Omega,2 must be positive definite");
    return tr * tr * (1.0 + 2.0 * d) / (W2.squaredNorm() + 2.0 * d * tr * lmax);
}

namespace {

void check_alpha(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw InputError("alpha must lie in (0, 1)");
}

}  // namespace

double critical_value_patnaik(const MatrixXd& W2, double d, double alpha) {
    check_alpha(alpha);
    const double k = patnaik_keff(W2, d);
    return chisq_upper_quantile(NoncentralChiSq(k, d * k), alpha) / k;
}

double critical_value_gmmf(Index kz, double d, double alpha) {
    check_alpha(alpha);
    if (!(d >= 0.0)) throw InputError("d must be non-negative");
    const double k = static_cast<double>(kz);
    return chisq_upper_quantile(NoncentralChiSq(k, d * k), alpha) / k;
}

namespace {

constexpr Index kDrawChunk = 8192;

// count x k matrix whose rows are L xi, xi ~ N(0, I), generated in fixed-size
// chunks with one stream per chunk so the output does not depend on threads.
MatrixXd correlated_draws(const MatrixXd& L, Index count, std::uint64_t seed, std::uint64_t stream_base,
                          int threads) {
    const Index k = L.rows();
    MatrixXd X(count, k);
    const Index chunks = (count + kDrawChunk - 1) / kDrawChunk;
    parallel_for(static_cast<std::size_t>(chunks), threads, [&](std::size_t ci) {
        RngStream rng(seed, stream_base + ci);
        const Index begin = static_cast<Index>(ci) * kDrawChunk;
        const Index end = std::min(count, begin + kDrawChunk);
        MatrixXd xi(k, end - begin);
        for (Index j = 0; j < xi.cols(); ++j)
            for (Index i = 0; i < k; ++i) xi(i, j) = rng.normal();
        X.middleRows(begin, end - begin) = (L * xi).transpose();
    });
    return X;
}

// Type-7 sample quantile of v at probability p; reorders v.
double sample_quantile(std::vector<double>& v, double p) {
    const double h = (static_cast<double>(v.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
    const double xlo = v[lo];
    if (lo + 1 >= v.size()) return xlo;
    const double xhi = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
    return xlo + (h - static_cast<double>(lo)) * (xhi - xlo);
}

std::vector<double> quadratic_values(const MatrixXd& X, const VectorXd& sq, const VectorXd& c) {
    const VectorXd proj = X * c;
    const double cc = c.squaredNorm();
    std::vector<double> v(static_cast<std::size_t>(X.rows()));
    for (Index i = 0; i < X.rows(); ++i) v[static_cast<std::size_t>(i)] = cc + 2.0 * proj(i) + sq(i);
    return v;
}

}  // namespace

MonteCarloCv critical_value_mc(const MatrixXd& W2, double d, double alpha, const MonteCarloCvOptions& opts) {
    check_alpha(alpha);
    if (!(d >= 0.0)) throw InputError("d must be non-negative");
    if (opts.draws < 100) throw InputError("Monte Carlo critical value needs at least 100 draws");
    if (opts.directions < 1) throw InputError("Monte Carlo critical value needs at least one direction");
    const Index k = W2.rows();
    const MatrixXd S = 0.5 * (W2 + W2.transpose());
    Eigen::LLT<MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) throw InputError("W_Omega,2 must be positive definite");
    const MatrixXd L = llt.matrixL();
    const double tr = S.trace();
    const double radius = std::sqrt(d * tr);

    // Direction grid: eigenvectors of W2 by decreasing variance, then random.
    std::vector<VectorXd> dirs;
    {
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
        for (Index j = k - 1; j >= 0 && static_cast<int>(dirs.size()) < opts.directions; --j)
            dirs.push_back(radius * es.eigenvectors().col(j));
        RngStream rng(opts.seed, 0);
        while (static_cast<int>(dirs.size()) < opts.directions) dirs.push_back(radius * random_unit_vector(k, rng));
    }

    // Selection batch: the direction with the largest empirical quantile.
    std::size_t chosen = 0;
    {
        const MatrixXd X = correlated_draws(L, opts.draws, opts.seed, 1ULL << 20, opts.threads);
        const VectorXd sq = X.rowwise().squaredNorm();
        std::vector<double> q(dirs.size());
        parallel_for(dirs.size(), opts.threads, [&](std::size_t j) {
            auto v = quadratic_values(X, sq, dirs[j]);
            q[j] = sample_quantile(v, 1.0 - alpha);
        });
        chosen = static_cast<std::size_t>(std::max_element(q.begin(), q.end()) - q.begin());
    }

    // Independent batch for the reported value, free of selection bias.
    const MatrixXd X = correlated_draws(L, opts.draws, opts.seed, 1ULL << 40, opts.threads);
    auto v = quadratic_values(X, X.rowwise().squaredNorm(), dirs[chosen]);
    std::sort(v.begin(), v.end());
    const double N = static_cast<double>(v.size());
    const double h = (N - 1.0) * (1.0 - alpha);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const double xhi = lo + 1 < v.size() ? v[lo + 1] : v[lo];
    MonteCarloCv out;
    out.cv = (v[lo] + (h - static_cast<double>(lo)) * (xhi - v[lo])) / tr;
    const auto m = static_cast<std::size_t>(std::max(1.0, std::floor(std::sqrt(N))));
    const std::size_t a = lo >= m ? lo - m : 0;
    const std::size_t b = std::min(v.size() - 1, lo + m);
    const double density = (static_cast<double>(b - a) / N) / ((v[b] - v[a]) / tr);
    out.std_error = std::sqrt(alpha * (1.0 - alpha) / N) / density;
    out.direction = dirs[chosen];
    return out;
}

double critical_value(const MatrixXd& W2, double d, double alpha, CvMethod method, const MonteCarloCvOptions& opts) {
    return method == CvMethod::Patnaik ? critical_value_patnaik(W2, d, alpha) : critical_value_mc(W2, d, alpha, opts).cv;
}

const char* to_string(TestMethod m) {
    switch (m) {
        case TestMethod::Patnaik: return "patnaik";
        case TestMethod::MonteCarlo: return "mc";
        case TestMethod::ConservativeSimplified: return "conservative";
    }
    return "?";
}

WeakIvResult weak_iv_test(const PartialledData& pd, const WMatrix& What, const SigmaV& sigma_v,
                          const WeightSpec& spec, const WeakIvOptions& opts) {
    if (!(opts.tau > 0.0 && opts.tau < 1.0)) throw InputError("tau must lie in (0, 1)");
    check_alpha(opts.alpha);
    const MatrixXd omega = weight_matrix(pd, spec, What.W2);

    WeakIvResult r;
    r.spec = spec;
    r.tau = opts.tau;
    r.alpha = opts.alpha;
    r.method = opts.method;
    switch (spec.kind) {
        case WeightSpec::Kind::TwoSLS: r.statistic = f_effective(pd, What.W2); break;
        case WeightSpec::Kind::GMMf: r.statistic = f_robust(pd, What.W2); break;
        default: r.statistic = f_generalized(pd, What.W2, omega); break;
    }
    r.benchmark = opts.benchmark == BenchmarkKind::Kind::LS ? BenchmarkKind::ls(sigma_v) : BenchmarkKind::mop();

    const bool fast = spec.kind == WeightSpec::Kind::GMMf && opts.gmmf_fast_path;
    WOmega w = transform_W(What, omega, spec);
    if (fast) w.W2 = MatrixXd::Identity(pd.kz(), pd.kz());

    if (opts.method == TestMethod::ConservativeSimplified) {
        if (opts.benchmark != BenchmarkKind::Kind::MOP)
            throw InputError("the simplified conservative test bounds B by 1, which only holds for the mop benchmark");
        r.B = 1.0;
    } else {
        const SupResult s = fast ? sup_B_gmmf(w, r.benchmark) : sup_B(w, r.benchmark, opts.sup);
        r.B = s.B;
        r.converged = s.converged;
        if (!s.converged) r.warning = "sphere optimizer did not fully converge; B is the best value found";
    }
    r.d_tau = r.B / opts.tau;
    r.keff = fast ? static_cast<double>(pd.kz()) : patnaik_keff(w.W2, r.d_tau);
    if (opts.method == TestMethod::MonteCarlo)
        r.cv = critical_value_mc(w.W2, r.d_tau, opts.alpha, opts.mc).cv;
    else
        r.cv = fast ? critical_value_gmmf(pd.kz(), r.d_tau, opts.alpha)
                    : critical_value_patnaik(w.W2, r.d_tau, opts.alpha);
    r.reject = r.statistic.value > r.cv;
    return r;
}

WeakIvResult weak_iv_test(const PartialledData& pd, const WeightSpec& spec, const WeakIvOptions& opts,
                          const CovarianceOptions& cov) {
    return weak_iv_test(pd, estimate_W(pd, cov), estimate_sigma_v(pd), spec, opts);
}

double concentration(const VectorXd& c, const MatrixXd& Q, const MatrixXd& W2, const MatrixXd& omega) {
    const VectorXd cw = spd_sqrt(omega) * (Q * c);
    return cw.squaredNorm() / (W2 * omega).trace();
}

GroupedNagar nagar_bias_grouped(const GroupedDesign& design) {
    design.validate();
    double s2 = 0.0, sg = 0.0, sv = 0.0;  // sum c^2 f, sum c^2 f / s_v^2, sum s_v^2
    for (int g = 0; g < design.G(); ++g) {
        const auto& p = design.groups[static_cast<std::size_t>(g)];
        const double cf = design.c(g) * design.c(g) * p.prob;
        s2 += cf;
        sg += cf / p.sigma_v2sq;
        sv += p.sigma_v2sq;
    }
    GroupedNagar out;
    out.mu2_2sls = s2 / sv;
    out.mu2_gmmf = sg / design.G();
    if (!(s2 > 0.0)) throw InputError("Nagar bias is undefined when every c_g is zero");
    double n2 = 0.0, ng = 0.0;
    for (int g = 0; g < design.G(); ++g) {
        const auto& p = design.groups[static_cast<std::size_t>(g)];
        const double cf = design.c(g) * design.c(g) * p.prob;
        n2 += (1.0 - 2.0 * cf / s2) * p.sigma_uv2;
        ng += (1.0 - 2.0 * (cf / p.sigma_v2sq) / sg) * p.sigma_uv2 / p.sigma_v2sq;
    }
    out.N_2sls = n2 / s2;
    out.N_gmmf = ng / sg;
    return out;
}

}  // namespace weakiv

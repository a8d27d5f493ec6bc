#include "weakiv/data.hpp"

#include "weakiv/error.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace weakiv {

namespace {

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur.push_back('"');
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(trim(cur));
    return out;
}

double parse_number(const std::string& cell, std::size_t row, const std::string& column) {
    if (cell.empty())
        throw InputError("empty cell at row " + std::to_string(row) + ", column '" + column +
                         "' (missing values are not supported)");
    double value = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last)
        throw InputError("non-numeric cell '" + cell + "' at row " + std::to_string(row) + ", column '" +
                         column + "'");
    if (!std::isfinite(value))
        throw InputError("non-finite value at row " + std::to_string(row) + ", column '" + column + "'");
    return value;
}

bool all_finite(const MatrixXd& m) { return m.allFinite(); }

}  // namespace

Index numerical_rank(const MatrixXd& m) {
    if (m.size() == 0) return 0;
    Eigen::JacobiSVD<MatrixXd> svd(m);
    const auto& s = svd.singularValues();
    if (s.size() == 0 || s(0) <= 0.0) return 0;
    Index r = 0;
    for (Index i = 0; i < s.size(); ++i)
        if (s(i) > kRankTolerance * s(0)) ++r;
    return r;
}

ClusterIds make_cluster_ids(const std::vector<std::string>& labels) {
    ClusterIds ids;
    std::unordered_map<std::string, int> seen;
    ids.id.reserve(labels.size());
    for (const auto& l : labels) {
        auto [it, inserted] = seen.try_emplace(l, static_cast<int>(ids.labels.size()));
        if (inserted) ids.labels.push_back(l);
        ids.id.push_back(it->second);
    }
    return ids;
}

Dataset load_csv(const std::string& path, const ColumnSchema& schema) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open data file '" + path + "'");
    if (schema.y.empty() || schema.x.empty()) throw InputError("outcome and endogenous columns must be named");
    if (schema.z.empty()) throw InputError("at least one instrument column is required");

    std::string line;
    if (!std::getline(in, line)) throw InputError("data file '" + path + "' is empty");
    auto header = split_csv_line(line);
    std::unordered_map<std::string, std::size_t> col;
    for (std::size_t j = 0; j < header.size(); ++j) col.emplace(header[j], j);

    auto index_of = [&](const std::string& name) {
        auto it = col.find(name);
        if (it == col.end()) throw InputError("column '" + name + "' not found in '" + path + "'");
        return it->second;
    };
    const std::size_t iy = index_of(schema.y);
    const std::size_t ix = index_of(schema.x);
    std::vector<std::size_t> iz, ic;
    for (const auto& z : schema.z) iz.push_back(index_of(z));
    for (const auto& c : schema.controls) ic.push_back(index_of(c));
    std::optional<std::size_t> icl;
    if (schema.cluster) icl = index_of(*schema.cluster);

    std::vector<double> ys, xs, zs, cs;
    std::vector<std::string> cl;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        ++row;
        auto cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw InputError("row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                             " cells, header has " + std::to_string(header.size()));
        ys.push_back(parse_number(cells[iy], row, schema.y));
        xs.push_back(parse_number(cells[ix], row, schema.x));
        for (std::size_t k = 0; k < iz.size(); ++k) zs.push_back(parse_number(cells[iz[k]], row, schema.z[k]));
        for (std::size_t k = 0; k < ic.size(); ++k)
            cs.push_back(parse_number(cells[ic[k]], row, schema.controls[k]));
        if (icl) {
            if (cells[*icl].empty())
                throw InputError("empty cluster label at row " + std::to_string(row));
            cl.push_back(cells[*icl]);
        }
    }

    const auto n = static_cast<Index>(ys.size());
    Dataset d;
    d.y = Eigen::Map<VectorXd>(ys.data(), n);
    d.x = Eigen::Map<VectorXd>(xs.data(), n);
    const auto kz = static_cast<Index>(iz.size());
    d.Z = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(zs.data(), n, kz);
    const auto kc = static_cast<Index>(ic.size()) + (schema.intercept ? 1 : 0);
    if (kc > 0) {
        MatrixXd C(n, kc);
        if (!ic.empty())
            C.leftCols(static_cast<Index>(ic.size())) =
                Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                    cs.data(), n, static_cast<Index>(ic.size()));
        if (schema.intercept) C.col(kc - 1).setOnes();
        d.C = std::move(C);
    }
    if (icl) d.cluster = make_cluster_ids(cl);
    validate(d);
    return d;
}

void validate(const Dataset& d) {
    const Index n = d.n();
    if (d.x.size() != n || d.Z.rows() != n || (d.C && d.C->rows() != n))
        throw InputError("inconsistent row counts between y, x, Z and controls");
    if (d.cluster && static_cast<Index>(d.cluster->id.size()) != n)
        throw InputError("cluster labels do not match the number of observations");
    if (d.kz() < 1) throw InputError("at least one excluded instrument is required");
    if (n < d.kz() + d.kc() + 2)
        throw InputError("need n >= k_z + k_c + 2 observations, have n = " + std::to_string(n));
    if (!all_finite(d.y) || !all_finite(d.x) || !all_finite(d.Z) || (d.C && !all_finite(*d.C)))
        throw InputError("data contain non-finite values");
    if (d.C && numerical_rank(*d.C) < d.kc()) throw InputError("control matrix C is rank deficient");
}

namespace {

// Residuals of the columns of m after least-squares projection on the column
// space of C, via Householder QR of C.
MatrixXd residualize(const Eigen::HouseholderQR<MatrixXd>& qr, Index kc, const MatrixXd& m) {
    MatrixXd qtm = qr.householderQ().adjoint() * m;
    qtm.topRows(kc).setZero();
    return qr.householderQ() * qtm;
}

}  // namespace

PartialledData partial_out(const Dataset& d) {
    validate(d);
    if (!d.C) {
        if (numerical_rank(d.Z) < d.kz()) throw InputError("instrument matrix Z is rank deficient");
        return PartialledData(d.y, d.x, d.Z, d.cluster);
    }
    const Index n = d.n(), kz = d.kz();
    Eigen::HouseholderQR<MatrixXd> qr(*d.C);
    MatrixXd stacked(n, kz + 2);
    stacked << d.y, d.x, d.Z;
    MatrixXd r = residualize(qr, d.kc(), stacked);
    MatrixXd Z = r.rightCols(kz);
    // Rank is judged relative to the scale of the raw instruments so that a
    // column lying in span(C) is caught even though its residual is tiny noise.
    const double zscale = d.Z.norm();
    Eigen::JacobiSVD<MatrixXd> svd(Z);
    const auto& s = svd.singularValues();
    for (Index i = 0; i < s.size(); ++i)
        if (!(s(i) > kRankTolerance * std::max(s(0), 1e-300)) || s(i) <= 1e-13 * zscale)
            throw InputError("instrument matrix Z is rank deficient after partialling out controls");
    return PartialledData(r.col(0), r.col(1), std::move(Z), d.cluster);
}

PartialledData::PartialledData(VectorXd y, VectorXd x, MatrixXd Z, std::optional<ClusterIds> cluster)
    : y_(std::move(y)), x_(std::move(x)), Z_(std::move(Z)), cluster_(std::move(cluster)) {
    if (x_.size() != y_.size() || Z_.rows() != y_.size())
        throw InputError("inconsistent row counts between y, x and Z");
    if (Z_.cols() < 1) throw InputError("at least one excluded instrument is required");
    ZtZ_ = Z_.transpose() * Z_;
    ZtZ_llt_.compute(ZtZ_);
    if (ZtZ_llt_.info() != Eigen::Success) throw InputError("Z'Z is singular");
    Ztx_ = Z_.transpose() * x_;
    Zty_ = Z_.transpose() * y_;
    pi_hat_ = ZtZ_llt_.solve(Ztx_);
    pi_y_hat_ = ZtZ_llt_.solve(Zty_);
    v2_hat_ = x_ - Z_ * pi_hat_;
    v1_hat_ = y_ - Z_ * pi_y_hat_;
    xPx_ = Ztx_.dot(pi_hat_);
}

}  // namespace weakiv

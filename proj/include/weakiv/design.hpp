#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace weakiv {

enum class GroupSizesMode { Multinomial, FixedShares };

// One group of the grouped-data IV design: first-stage coefficient
// pi_g = scale_e * pi0 and the conditional covariance of (u, v2) given the
// group, [[sigma_u2, sigma_uv2], [sigma_uv2, sigma_v2sq]].
struct GroupParams {
    double pi0 = 0.0;
    double sigma_u2 = 1.0;
    double sigma_uv2 = 0.0;
    double sigma_v2sq = 1.0;
    double prob = 0.0;  // P(z_i = e_g), or the fixed share f_g
};

struct GroupedDesign {
    std::string name;
    std::string description;
    std::vector<GroupParams> groups;
    double beta = 0.0;
    double scale_e = 1.0;
    long n = 10000;
    GroupSizesMode sizes = GroupSizesMode::Multinomial;

    int G() const { return static_cast<int>(groups.size()); }
    double pi(int g) const { return scale_e * groups[static_cast<std::size_t>(g)].pi0; }
    // Local-to-zero coefficient c_g = sqrt(n) pi_g.
    double c(int g) const;
    Eigen::Matrix2d sigma(int g) const;

    // Throws InputError: G >= 2, every Sigma_g positive definite,
    // probabilities in (0, 1) summing to one, n large enough.
    void validate() const;
};

// Design files are YAML:
//
//   name: a2
//   beta: 0
//   n: 10000
//   scale_e: 1          # pi_g = scale_e * pi0_g
//   group_sizes: multinomial   # or fixed
//   groups:
//     - {c: 20.6393, sigma_u2: 9.0052, sigma_uv2: 1.7135, sigma_v2sq: 4.2487}
//
// Each group gives exactly one of pi0, pi (already scaled) or c (pi = c/sqrt(n)),
// and optionally prob (default 1/G). A null structural entry marks a
// placeholder that must be filled in before the design can be used.
GroupedDesign parse_design(const std::string& yaml_text);
GroupedDesign load_design(const std::string& path);

}  // namespace weakiv

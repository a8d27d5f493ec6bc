#include "weakiv/design.hpp"

#include "weakiv/error.hpp"

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <fstream>
#include <sstream>

namespace weakiv {

double GroupedDesign::c(int g) const { return std::sqrt(static_cast<double>(n)) * pi(g); }

Eigen::Matrix2d GroupedDesign::sigma(int g) const {
    const auto& p = groups[static_cast<std::size_t>(g)];
    Eigen::Matrix2d s;
    s << p.sigma_u2, p.sigma_uv2, p.sigma_uv2, p.sigma_v2sq;
    return s;
}

void GroupedDesign::validate() const {
    if (G() < 2) throw InputError("design '" + name + "': need at least two groups");
    if (n < 2L * G() + 2) throw InputError("design '" + name + "': sample size too small for the group count");
    double total = 0.0;
    for (int g = 0; g < G(); ++g) {
        const auto& p = groups[static_cast<std::size_t>(g)];
        const std::string where = "design '" + name + "', group " + std::to_string(g + 1);
        if (!std::isfinite(p.pi0)) throw InputError(where + ": first-stage coefficient is not finite");
        if (!(p.sigma_u2 > 0.0) || !(p.sigma_v2sq > 0.0) ||
            !(p.sigma_u2 * p.sigma_v2sq - p.sigma_uv2 * p.sigma_uv2 > 0.0))
            throw InputError(where + ": Sigma_g is not positive definite");
        if (!(p.prob > 0.0 && p.prob < 1.0)) throw InputError(where + ": probability must lie in (0, 1)");
        total += p.prob;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InputError("design '" + name + "': group probabilities must sum to 1");
}

namespace {

double required_number(const YAML::Node& node, const std::string& key, const std::string& where) {
    const auto v = node[key];
    if (!v) throw InputError(where + ": missing '" + key + "'");
    if (v.IsNull())
        throw InputError(where + ": '" + key + "' is a placeholder; supply a value (see the reconstructed variant)");
    try {
        return v.as<double>();
    } catch (const YAML::Exception&) {
        throw InputError(where + ": '" + key + "' is not a number");
    }
}

}  // namespace

GroupedDesign parse_design(const std::string& yaml_text) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        throw InputError(std::string("design file is not valid YAML: ") + e.what());
    }
    if (!root.IsMap()) throw InputError("design file must be a mapping");
    GroupedDesign d;
    try {
        d.name = root["name"] ? root["name"].as<std::string>() : "unnamed";
        if (root["description"]) d.description = root["description"].as<std::string>();
        if (root["beta"]) d.beta = root["beta"].as<double>();
        if (root["scale_e"]) d.scale_e = root["scale_e"].as<double>();
        if (root["n"]) d.n = root["n"].as<long>();
        if (root["group_sizes"]) {
            const auto mode = root["group_sizes"].as<std::string>();
            if (mode == "multinomial")
                d.sizes = GroupSizesMode::Multinomial;
            else if (mode == "fixed")
                d.sizes = GroupSizesMode::FixedShares;
            else
                throw InputError("group_sizes must be 'multinomial' or 'fixed', got '" + mode + "'");
        }
    } catch (const YAML::Exception& e) {
        throw InputError(std::string("design header: ") + e.what());
    }
    const auto groups = root["groups"];
    if (!groups || !groups.IsSequence()) throw InputError("design file needs a 'groups' list");
    const double G = static_cast<double>(groups.size());
    int index = 0;
    for (const auto& node : groups) {
        ++index;
        const std::string where = "group " + std::to_string(index);
        GroupParams p;
        const int given = (node["pi0"] ? 1 : 0) + (node["pi"] ? 1 : 0) + (node["c"] ? 1 : 0);
        if (given != 1) throw InputError(where + ": give exactly one of pi0, pi, c");
        if (!(d.scale_e != 0.0) && !node["pi0"])
            throw InputError(where + ": pi or c cannot be combined with scale_e = 0");
        if (node["pi0"])
            p.pi0 = required_number(node, "pi0", where);
        else if (node["pi"])
            p.pi0 = required_number(node, "pi", where) / d.scale_e;
        else
            p.pi0 = required_number(node, "c", where) / (std::sqrt(static_cast<double>(d.n)) * d.scale_e);
        p.sigma_u2 = required_number(node, "sigma_u2", where);
        p.sigma_uv2 = required_number(node, "sigma_uv2", where);
        p.sigma_v2sq = required_number(node, "sigma_v2sq", where);
        p.prob = node["prob"] ? required_number(node, "prob", where) : 1.0 / G;
        d.groups.push_back(p);
    }
    d.validate();
    return d;
}

GroupedDesign load_design(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open design file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_design(ss.str());
}

}  // namespace weakiv

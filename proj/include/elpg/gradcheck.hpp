#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "elpg/error.hpp"
#include "elpg/rng.hpp"
#include "elpg/tensor.hpp"

namespace elpg {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    std::size_t coords_checked = 0;
    bool pass = false;
};

namespace detail {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

}  // namespace detail

/// Central-difference oracle for backward(). `f` must map a leaf tensor to a
/// scalar tensor by a pure computation. For large inputs, at most
/// `max_coords` coordinates are probed (a seeded random subset); 0 means all.
inline GradCheckReport check_gradient(const std::function<Tensor(const Tensor&)>& f,
                                      const Tensor& x, double h = 1e-5, double tol = 1e-4,
                                      std::size_t max_coords = 0) {
    if (h <= 0.0) throw ContractError("check_gradient: step must be positive");
    Tensor leaf = Tensor::param(x.shape(), x.data());
    Tensor loss = f(leaf);
    if (loss.size() != 1) throw ContractError("check_gradient: f must be scalar-valued");
    if (!std::isfinite(loss.item())) throw DomainError("check_gradient: f non-finite at x");
    backward(loss, {leaf});
    const std::vector<double> analytic = leaf.grad();

    std::vector<std::size_t> coords;
    if (max_coords == 0 || x.size() <= max_coords) {
        coords.resize(x.size());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
        Rng rng(0x9e3779b97f4a7c15ULL ^ x.size());
        std::vector<std::size_t> all(x.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        rng.shuffle(all);
        coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(max_coords));
    }

    GradCheckReport report;
    report.coords_checked = coords.size();
    Tensor probe = Tensor::from(x.shape(), x.data());
    for (std::size_t i : coords) {
        const double orig = probe.data()[i];
        probe.data()[i] = orig + h;
        const double fp = f(probe).item();
        probe.data()[i] = orig - h;
        const double fm = f(probe).item();
        probe.data()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw DomainError("check_gradient: f non-finite near x");
        }
        const double fd = (fp - fm) / (2.0 * h);
        const double e = detail::rel_err(analytic[i], fd);
        if (e > report.max_rel_err) {
            report.max_rel_err = e;
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace elpg

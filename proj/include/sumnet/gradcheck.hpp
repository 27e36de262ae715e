#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sumnet/tape.hpp"
#include "sumnet/tensor.hpp"

namespace sumnet {

// Scalar-valued function of one tensor, recorded on the given tape.
using TensorFn = std::function<Tensor(const Tensor&, Tape&)>;

namespace detail {

inline double rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

}  // namespace detail

// Central-difference check of the tape gradient at the given coordinates of x.
// x is perturbed in place and restored. Returns the worst relative error,
// with denominator max(|analytic|, |numeric|, 1e-8).
inline double grad_check_coords(const TensorFn& f, Tensor x, std::span<const std::int64_t> coords,
                                double eps = 1e-5) {
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = f(x, tape);
    tape.backward(y);
    std::vector<double> analytic(x.grad().begin(), x.grad().end());

    std::span<double> vals = x.mutable_data();
    double worst = 0.0;
    for (std::int64_t i : coords) {
        const double saved = vals[i];
        vals[i] = saved + eps;
        Tape t_plus;
        const double f_plus = f(x, t_plus).item();
        vals[i] = saved - eps;
        Tape t_minus;
        const double f_minus = f(x, t_minus).item();
        vals[i] = saved;
        const double numeric = (f_plus - f_minus) / (2.0 * eps);
        worst = std::max(worst, detail::rel_error(analytic[i], numeric));
    }
    return worst;
}

// Checks every coordinate of x.
inline double grad_check(const TensorFn& f, Tensor x, double eps = 1e-5) {
    std::vector<std::int64_t> coords(static_cast<std::size_t>(x.numel()));
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = static_cast<std::int64_t>(i);
    return grad_check_coords(f, std::move(x), coords, eps);
}

}  // namespace sumnet

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "sumnet/ops.hpp"
#include "sumnet/tape.hpp"
#include "sumnet/tensor.hpp"

namespace sumnet {

struct Pixel {
    int y = 0;
    int x = 0;
    bool operator==(const Pixel&) const = default;
};

namespace detail {

inline void check_binary(const Tensor& mask, const char* what) {
    for (double v : mask.data())
        if (v != 0.0 && v != 1.0)
            throw validation_error(std::string(what) + ": mask is not binary");
}

inline void check_single_frame(const Tensor& mask, const char* what) {
    if (mask.shape().n != 1 || mask.shape().c != 1)
        throw validation_error(std::string(what) + ": expected a (1,1,H,W) mask, got " +
                               mask.shape().str());
}

}  // namespace detail

// Contour of a binary mask: foreground pixels with at least one background
// 4-neighbor. Everything outside the image counts as background, so
// foreground pixels on the border are contour.
inline std::vector<Pixel> extract_contour(const Tensor& mask) {
    detail::check_single_frame(mask, "extract_contour");
    detail::check_binary(mask, "extract_contour");
    const int h = mask.shape().h, w = mask.shape().w;
    std::span<const double> m = mask.data();
    auto fg = [&](int y, int x) {
        return y >= 0 && y < h && x >= 0 && x < w &&
               m[static_cast<std::size_t>(y) * w + x] == 1.0;
    };
    std::vector<Pixel> contour;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!fg(y, x)) continue;
            if (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))
                contour.push_back({y, x});
        }
    return contour;
}

namespace detail {

// 1-D squared-distance transform of a sampled function (lower envelope of
// parabolas). f and out may not alias. Exact on integer-valued input.
inline void edt_1d(const double* f, int n, double* out, int* v, double* z) {
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        double s = ((f[q] + static_cast<double>(q) * q) -
                    (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
                   (2.0 * q - 2.0 * v[k]);
        while (s <= z[k]) {
            --k;
            s = ((f[q] + static_cast<double>(q) * q) -
                 (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
                (2.0 * q - 2.0 * v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = q - v[k];
        out[q] = dq * dq + f[v[k]];
    }
}

constexpr double kEdtInf = 1e20;

// Exact squared Euclidean distance to the nearest contour pixel, or an empty
// vector when the contour is empty. Two separable passes; every produced
// value is an exact integer (<= (H-1)^2 + (W-1)^2).
inline std::vector<double> squared_contour_distances(const std::vector<Pixel>& contour, int h,
                                                     int w) {
    if (contour.empty()) return {};
    std::vector<double> grid(static_cast<std::size_t>(h) * w, kEdtInf);
    for (const Pixel& p : contour) grid[static_cast<std::size_t>(p.y) * w + p.x] = 0.0;

    const int n_max = std::max(h, w);
    std::vector<double> f(n_max), d(n_max), z(n_max + 1);
    std::vector<int> v(n_max);

    for (int x = 0; x < w; ++x) {  // columns
        for (int y = 0; y < h; ++y) f[y] = grid[static_cast<std::size_t>(y) * w + x];
        edt_1d(f.data(), h, d.data(), v.data(), z.data());
        for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = d[y];
    }
    for (int y = 0; y < h; ++y) {  // rows
        double* row = grid.data() + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < w; ++x) f[x] = row[x];
        edt_1d(f.data(), w, row, v.data(), z.data());
    }
    return grid;
}

}  // namespace detail

// Euclidean distance from every pixel to the nearest contour pixel of the
// mask: zero on the contour itself. An empty contour yields the +infinity
// sentinel everywhere, which weight_map turns into all-ones.
inline Tensor distance_transform(const Tensor& mask) {
    detail::check_single_frame(mask, "distance_transform");
    detail::check_binary(mask, "distance_transform");
    const int h = mask.shape().h, w = mask.shape().w;
    Tensor out = Tensor::zeros({1, 1, h, w});
    const std::vector<double> d2 =
        detail::squared_contour_distances(extract_contour(mask), h, w);
    std::span<double> o = out.mutable_data();
    if (d2.empty()) {
        for (double& v : o) v = std::numeric_limits<double>::infinity();
    } else {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::sqrt(d2[i]);
    }
    return out;
}

// W(x) = 1 + w0 * exp(-d(x)^2 / (2 sigma^2)) with d the contour distance.
// Weights peak at 1 + w0 exactly on the contour and decay to 1 far from it;
// an empty contour gives a uniform all-ones map.
inline Tensor weight_map(const Tensor& mask, double w0, double sigma) {
    if (sigma <= 0.0) throw validation_error("weight_map: sigma must be positive");
    if (w0 < 0.0) throw validation_error("weight_map: w0 must be non-negative");
    detail::check_single_frame(mask, "weight_map");
    detail::check_binary(mask, "weight_map");
    const int h = mask.shape().h, w = mask.shape().w;
    Tensor out = Tensor::full({1, 1, h, w}, 1.0);
    const std::vector<double> d2 =
        detail::squared_contour_distances(extract_contour(mask), h, w);
    if (d2.empty()) return out;
    std::span<double> o = out.mutable_data();
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = 1.0 + w0 * std::exp(-d2[i] * inv);
    return out;
}

// Per-frame weight maps for a (F,1,H,W) mask stack.
inline Tensor weight_map_stack(const Tensor& masks, double w0, double sigma) {
    const TensorShape s = masks.shape();
    Tensor out = Tensor::zeros(s);
    const std::size_t map = static_cast<std::size_t>(s.h) * s.w;
    for (int f = 0; f < s.n; ++f) {
        Tensor frame = Tensor::zeros({1, 1, s.h, s.w});
        std::copy_n(masks.data().begin() + f * map, map, frame.mutable_data().begin());
        Tensor wm = weight_map(frame, w0, sigma);
        std::copy_n(wm.data().begin(), map, out.mutable_data().begin() + f * map);
    }
    return out;
}

inline constexpr double kWceClamp = 1e-7;

// Weighted binary cross-entropy, normalized by pixel count (not by the
// weight sum, so w0 = 0 reduces exactly to mean BCE):
//   L = -(1/(N*H*W)) * sum W * [y*ln(clamp(p)) + (1-y)*ln(1-clamp(p))]
// Differentiable in pred; target and weights are constants.
inline Tensor wce_loss(const Tensor& pred, const Tensor& target, const Tensor& weights,
                       Tape* tape = nullptr) {
    const TensorShape s = pred.shape();
    if (target.shape() != s || weights.shape() != s)
        throw validation_error("wce_loss: shape mismatch: pred " + s.str() + ", target " +
                               target.shape().str() + ", weights " + weights.shape().str());
    if (s.c != 1)
        throw validation_error("wce_loss: expected single-channel prediction, got " + s.str());
    detail::check_binary(target, "wce_loss");

    const double norm = 1.0 / (static_cast<double>(s.n) * s.h * s.w);
    std::span<const double> p = pred.data();
    std::span<const double> y = target.data();
    std::span<const double> wv = weights.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pc = std::clamp(p[i], kWceClamp, 1.0 - kWceClamp);
        acc += wv[i] * (y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc));
    }
    Tensor out = Tensor::scalar(-norm * acc);

    if (tape) {
        tape->record({pred}, out, [pred, target, weights, out, norm]() {
            if (!detail::grad_needed(pred)) return;
            std::span<double> dp = detail::grad_span(pred);
            std::span<const double> p = pred.data();
            std::span<const double> y = target.data();
            std::span<const double> wv = weights.data();
            const double dy = out.grad()[0];
            for (std::size_t i = 0; i < dp.size(); ++i) {
                if (p[i] <= kWceClamp || p[i] >= 1.0 - kWceClamp) continue;  // clamped flat
                dp[i] -= dy * norm * wv[i] * (y[i] / p[i] - (1.0 - y[i]) / (1.0 - p[i]));
            }
        });
    }
    return out;
}

}  // namespace sumnet

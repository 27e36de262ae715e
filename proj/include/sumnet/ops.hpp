#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstring>
#include <utility>
#include <vector>

#include "sumnet/detail/blas.hpp"
#include "sumnet/tape.hpp"
#include "sumnet/tensor.hpp"

namespace sumnet {

namespace detail {

inline void accumulate(std::span<double> dst, std::span<const double> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// im2col for one tile of output rows [r0, r1). Column k = (cin*kh + kh')*kW + kw'
// runs over the kernel support, columns run over (oh, ow) within the tile.
inline void im2col_tile(const double* in, int c_in, int h, int w, int k_h, int k_w, int pad,
                        int out_w, int r0, int r1, double* col) {
    const int tile_px = (r1 - r0) * out_w;
    double* dst = col;
    for (int ci = 0; ci < c_in; ++ci) {
        const double* plane = in + static_cast<std::size_t>(ci) * h * w;
        for (int kh = 0; kh < k_h; ++kh) {
            for (int kw = 0; kw < k_w; ++kw) {
                for (int oh = r0; oh < r1; ++oh) {
                    double* row = dst + static_cast<std::size_t>(oh - r0) * out_w;
                    const int ih = oh + kh - pad;
                    if (ih < 0 || ih >= h) {
                        std::memset(row, 0, sizeof(double) * out_w);
                        continue;
                    }
                    const int ow_lo = std::max(0, pad - kw);
                    const int ow_hi = std::min(out_w, w + pad - kw);
                    if (ow_lo > 0) std::memset(row, 0, sizeof(double) * ow_lo);
                    if (ow_hi > ow_lo)
                        std::memcpy(row + ow_lo, plane + static_cast<std::size_t>(ih) * w +
                                                     (ow_lo + kw - pad),
                                    sizeof(double) * (ow_hi - ow_lo));
                    if (ow_hi < out_w) std::memset(row + ow_hi, 0, sizeof(double) * (out_w - ow_hi));
                }
                dst += tile_px;
            }
        }
    }
}

// Transpose of im2col_tile: scatter-adds column gradients back onto the input.
inline void col2im_tile(const double* col, int c_in, int h, int w, int k_h, int k_w, int pad,
                        int out_w, int r0, int r1, double* din) {
    const int tile_px = (r1 - r0) * out_w;
    const double* src = col;
    for (int ci = 0; ci < c_in; ++ci) {
        double* plane = din + static_cast<std::size_t>(ci) * h * w;
        for (int kh = 0; kh < k_h; ++kh) {
            for (int kw = 0; kw < k_w; ++kw) {
                for (int oh = r0; oh < r1; ++oh) {
                    const double* row = src + static_cast<std::size_t>(oh - r0) * out_w;
                    const int ih = oh + kh - pad;
                    if (ih < 0 || ih >= h) continue;
                    const int ow_lo = std::max(0, pad - kw);
                    const int ow_hi = std::min(out_w, w + pad - kw);
                    double* in_row = plane + static_cast<std::size_t>(ih) * w + (kw - pad);
                    for (int ow = ow_lo; ow < ow_hi; ++ow) in_row[ow] += row[ow];
                }
                src += tile_px;
            }
        }
    }
}

// Output rows per im2col tile, sized to keep the scratch buffer modest.
inline int conv_tile_rows(int k, int out_w, int out_h) {
    constexpr std::int64_t kBudget = 4 << 20;  // doubles
    const std::int64_t rows = kBudget / (static_cast<std::int64_t>(k) * out_w);
    return static_cast<int>(std::clamp<std::int64_t>(rows, 1, out_h));
}

}  // namespace detail

// 2-D cross-correlation with zero padding, stride 1. kernel is
// (Cout, Cin, kH, kW); bias is (1, Cout, 1, 1). Lowered onto GEMM one tile of
// output rows at a time.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding,
                     Tape* tape = nullptr) {
    const TensorShape in_s = input.shape();
    const TensorShape k_s = kernel.shape();
    const int c_out = k_s.n, c_in = k_s.c, k_h = k_s.h, k_w = k_s.w;
    if (in_s.c != c_in)
        throw validation_error("conv2d: input has " + std::to_string(in_s.c) +
                               " channels, kernel expects " + std::to_string(c_in));
    if (bias.shape() != TensorShape{1, c_out, 1, 1})
        throw validation_error("conv2d: bias shape " + bias.shape().str() + " does not match " +
                               std::to_string(c_out) + " output channels");
    if (padding < 0) throw validation_error("conv2d: negative padding");
    const int out_h = in_s.h + 2 * padding - k_h + 1;
    const int out_w = in_s.w + 2 * padding - k_w + 1;
    if (out_h <= 0 || out_w <= 0)
        throw validation_error("conv2d: non-positive output dims for input " + in_s.str() +
                               ", kernel " + k_s.str());

    Tensor out = Tensor::zeros({in_s.n, c_out, out_h, out_w});
    const int k = c_in * k_h * k_w;
    const int tile_rows = detail::conv_tile_rows(k, out_w, out_h);
    std::vector<double> col(static_cast<std::size_t>(k) * tile_rows * out_w);

    const double* in_ptr = input.data().data();
    const double* k_ptr = kernel.data().data();
    double* out_ptr = out.mutable_data().data();
    const std::int64_t in_plane = static_cast<std::int64_t>(c_in) * in_s.h * in_s.w;
    const std::int64_t out_plane = static_cast<std::int64_t>(c_out) * out_h * out_w;
    const int out_map = out_h * out_w;

    for (int n = 0; n < in_s.n; ++n) {
        for (int r0 = 0; r0 < out_h; r0 += tile_rows) {
            const int r1 = std::min(out_h, r0 + tile_rows);
            const int tile_px = (r1 - r0) * out_w;
            detail::im2col_tile(in_ptr + n * in_plane, c_in, in_s.h, in_s.w, k_h, k_w, padding,
                                out_w, r0, r1, col.data());
            detail::dgemm(false, false, c_out, tile_px, k, 1.0, k_ptr, k, col.data(), tile_px,
                          0.0, out_ptr + n * out_plane + static_cast<std::int64_t>(r0) * out_w,
                          out_map);
        }
        double* sample = out_ptr + n * out_plane;
        for (int co = 0; co < c_out; ++co) {
            const double b = bias.data()[co];
            if (b == 0.0) continue;
            double* map = sample + static_cast<std::int64_t>(co) * out_map;
            for (int i = 0; i < out_map; ++i) map[i] += b;
        }
    }

    if (tape) {
        tape->record(
            {input, kernel, bias}, out, [input, kernel, bias, out, padding]() {
                const TensorShape in_s = input.shape();
                const TensorShape k_s = kernel.shape();
                const int c_out = k_s.n, c_in = k_s.c, k_h = k_s.h, k_w = k_s.w;
                const int out_h = out.shape().h, out_w = out.shape().w;
                const int k = c_in * k_h * k_w;
                std::span<const double> dout = out.grad();
                const std::int64_t in_plane = static_cast<std::int64_t>(c_in) * in_s.h * in_s.w;
                const std::int64_t out_plane = static_cast<std::int64_t>(c_out) * out_h * out_w;
                const int out_map = out_h * out_w;

                if (detail::grad_needed(bias)) {
                    std::span<double> dbias = detail::grad_span(bias);
                    for (int n = 0; n < in_s.n; ++n)
                        for (int co = 0; co < c_out; ++co) {
                            const double* map = dout.data() + n * out_plane +
                                                static_cast<std::int64_t>(co) * out_map;
                            double acc = 0.0;
                            for (int i = 0; i < out_map; ++i) acc += map[i];
                            dbias[co] += acc;
                        }
                }

                const bool need_dk = detail::grad_needed(kernel);
                const bool need_dx = detail::grad_needed(input);
                if (!need_dk && !need_dx) return;

                const int tile_rows = detail::conv_tile_rows(k, out_w, out_h);
                std::vector<double> col(static_cast<std::size_t>(k) * tile_rows * out_w);
                std::vector<double> col_grad(need_dx ? col.size() : 0);
                const double* in_ptr = input.data().data();

                for (int n = 0; n < in_s.n; ++n) {
                    for (int r0 = 0; r0 < out_h; r0 += tile_rows) {
                        const int r1 = std::min(out_h, r0 + tile_rows);
                        const int tile_px = (r1 - r0) * out_w;
                        const double* dout_tile =
                            dout.data() + n * out_plane + static_cast<std::int64_t>(r0) * out_w;
                        if (need_dk) {
                            detail::im2col_tile(in_ptr + n * in_plane, c_in, in_s.h, in_s.w, k_h,
                                                k_w, padding, out_w, r0, r1, col.data());
                            detail::dgemm(false, true, c_out, k, tile_px, 1.0, dout_tile, out_map,
                                          col.data(), tile_px, 1.0,
                                          detail::grad_span(kernel).data(), k);
                        }
                        if (need_dx) {
                            detail::dgemm(true, false, k, tile_px, c_out, 1.0,
                                          kernel.data().data(), k, dout_tile, out_map, 0.0,
                                          col_grad.data(), tile_px);
                            detail::col2im_tile(col_grad.data(), c_in, in_s.h, in_s.w, k_h, k_w,
                                                padding, out_w, r0, r1,
                                                detail::grad_span(input).data() + n * in_plane);
                        }
                    }
                }
            });
    }
    return out;
}

inline Tensor relu(const Tensor& x, Tape* tape = nullptr) {
    Tensor out = Tensor::zeros(x.shape());
    std::span<const double> in = x.data();
    std::span<double> o = out.mutable_data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
    if (tape) {
        tape->record({x}, out, [x, out]() {
            if (!detail::grad_needed(x)) return;
            std::span<double> dx = detail::grad_span(x);
            std::span<const double> dy = out.grad();
            std::span<const double> in = x.data();
            // subgradient at 0 is 0
            for (std::size_t i = 0; i < dx.size(); ++i)
                if (in[i] > 0.0) dx[i] += dy[i];
        });
    }
    return out;
}

inline Tensor sigmoid(const Tensor& x, Tape* tape = nullptr) {
    // Strictly inside (0,1) even where the quotient itself would round to a
    // boundary (|x| beyond ~37 and ~745 respectively).
    constexpr double kLo = std::numeric_limits<double>::min();
    constexpr double kHi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
    Tensor out = Tensor::zeros(x.shape());
    std::span<const double> in = x.data();
    std::span<double> o = out.mutable_data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        const double v = in[i];
        double s;
        if (v >= 0.0) {
            s = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);  // overflow-safe for very negative v
            s = e / (1.0 + e);
        }
        o[i] = std::clamp(s, kLo, kHi);
    }
    if (tape) {
        tape->record({x}, out, [x, out]() {
            if (!detail::grad_needed(x)) return;
            std::span<double> dx = detail::grad_span(x);
            std::span<const double> dy = out.grad();
            std::span<const double> s = out.data();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * s[i] * (1.0 - s[i]);
        });
    }
    return out;
}

// 2x2 max-pooling over disjoint windows. Ties break toward the smallest
// row-major offset, so constant inputs always record index 0.
inline std::pair<Tensor, PoolIndices> maxpool2x2(const Tensor& x, Tape* tape = nullptr) {
    const TensorShape s = x.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0)
        throw validation_error("maxpool2x2: H and W must be even, got " + s.str());
    const int oh = s.h / 2, ow = s.w / 2;
    Tensor out = Tensor::zeros({s.n, s.c, oh, ow});
    PoolIndices idx{{s.n, s.c, oh, ow},
                    std::vector<std::uint8_t>(static_cast<std::size_t>(out.numel()))};

    std::span<const double> in = x.data();
    std::span<double> o = out.mutable_data();
    std::size_t pos = 0;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const double* plane =
                in.data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j, ++pos) {
                    const double* win = plane + static_cast<std::size_t>(2 * i) * s.w + 2 * j;
                    double best = win[0];
                    int arg = 0;
                    if (win[1] > best) { best = win[1]; arg = 1; }
                    if (win[s.w] > best) { best = win[s.w]; arg = 2; }
                    if (win[s.w + 1] > best) { best = win[s.w + 1]; arg = 3; }
                    o[pos] = best;
                    idx.offsets[pos] = static_cast<std::uint8_t>(arg);
                }
        }

    if (tape) {
        std::vector<std::uint8_t> offsets = idx.offsets;
        tape->record({x}, out, [x, out, offsets = std::move(offsets)]() {
            if (!detail::grad_needed(x)) return;
            const TensorShape s = x.shape();
            const int oh = s.h / 2, ow = s.w / 2;
            std::span<double> dx = detail::grad_span(x);
            std::span<const double> dy = out.grad();
            std::size_t pos = 0;
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) {
                    double* plane =
                        dx.data() + (static_cast<std::size_t>(n) * s.c + c) * s.h * s.w;
                    for (int i = 0; i < oh; ++i)
                        for (int j = 0; j < ow; ++j, ++pos) {
                            const int arg = offsets[pos];
                            plane[static_cast<std::size_t>(2 * i + arg / 2) * s.w + 2 * j +
                                  arg % 2] += dy[pos];
                        }
                }
        });
    }
    return {out, std::move(idx)};
}

// Scatter each value to its recorded argmax position inside the 2x2 output
// window; every other output element is exactly zero.
inline Tensor maxunpool2x2(const Tensor& x, const PoolIndices& idx, Tape* tape = nullptr) {
    const TensorShape s = x.shape();
    if (s != idx.shape)
        throw validation_error("maxunpool2x2: input shape " + s.str() +
                               " does not match indices shape " + idx.shape.str());
    const int oh = s.h * 2, ow = s.w * 2;
    Tensor out = Tensor::zeros({s.n, s.c, oh, ow});

    std::span<const double> in = x.data();
    std::span<double> o = out.mutable_data();
    std::size_t pos = 0;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            double* plane = o.data() + (static_cast<std::size_t>(n) * s.c + c) * oh * ow;
            for (int i = 0; i < s.h; ++i)
                for (int j = 0; j < s.w; ++j, ++pos) {
                    const int arg = idx.offsets[pos];
                    plane[static_cast<std::size_t>(2 * i + arg / 2) * ow + 2 * j + arg % 2] =
                        in[pos];
                }
        }

    if (tape) {
        std::vector<std::uint8_t> offsets = idx.offsets;
        tape->record({x}, out, [x, out, offsets = std::move(offsets)]() {
            if (!detail::grad_needed(x)) return;
            const TensorShape s = x.shape();
            const int oh = s.h * 2, ow = s.w * 2;
            std::span<double> dx = detail::grad_span(x);
            std::span<const double> dy = out.grad();
            std::size_t pos = 0;
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) {
                    const double* plane =
                        dy.data() + (static_cast<std::size_t>(n) * s.c + c) * oh * ow;
                    for (int i = 0; i < s.h; ++i)
                        for (int j = 0; j < s.w; ++j, ++pos) {
                            const int arg = offsets[pos];
                            dx[pos] += plane[static_cast<std::size_t>(2 * i + arg / 2) * ow +
                                             2 * j + arg % 2];
                        }
                }
        });
    }
    return out;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    const TensorShape sa = a.shape(), sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
        throw validation_error("concat_channels: incompatible shapes " + sa.str() + " and " +
                               sb.str());
    Tensor out = Tensor::zeros({sa.n, sa.c + sb.c, sa.h, sa.w});
    const std::size_t map = static_cast<std::size_t>(sa.h) * sa.w;
    const std::size_t a_block = sa.c * map, b_block = sb.c * map;
    std::span<double> o = out.mutable_data();
    for (int n = 0; n < sa.n; ++n) {
        std::memcpy(o.data() + n * (a_block + b_block), a.data().data() + n * a_block,
                    sizeof(double) * a_block);
        std::memcpy(o.data() + n * (a_block + b_block) + a_block, b.data().data() + n * b_block,
                    sizeof(double) * b_block);
    }
    if (tape) {
        tape->record({a, b}, out, [a, b, out]() {
            const TensorShape sa = a.shape(), sb = b.shape();
            const std::size_t map = static_cast<std::size_t>(sa.h) * sa.w;
            const std::size_t a_block = sa.c * map, b_block = sb.c * map;
            std::span<const double> dy = out.grad();
            for (int n = 0; n < sa.n; ++n) {
                const double* src = dy.data() + n * (a_block + b_block);
                if (detail::grad_needed(a)) {
                    std::span<double> da = detail::grad_span(a);
                    for (std::size_t i = 0; i < a_block; ++i) da[n * a_block + i] += src[i];
                }
                if (detail::grad_needed(b)) {
                    std::span<double> db = detail::grad_span(b);
                    for (std::size_t i = 0; i < b_block; ++i)
                        db[n * b_block + i] += src[a_block + i];
                }
            }
        });
    }
    return out;
}

// Channels [c0, c1) of x.
inline Tensor slice_channels(const Tensor& x, int c0, int c1, Tape* tape = nullptr) {
    const TensorShape s = x.shape();
    if (c0 < 0 || c1 > s.c || c0 >= c1)
        throw validation_error("slice_channels: bad range [" + std::to_string(c0) + "," +
                               std::to_string(c1) + ") for " + s.str());
    Tensor out = Tensor::zeros({s.n, c1 - c0, s.h, s.w});
    const std::size_t map = static_cast<std::size_t>(s.h) * s.w;
    std::span<double> o = out.mutable_data();
    for (int n = 0; n < s.n; ++n)
        std::memcpy(o.data() + static_cast<std::size_t>(n) * (c1 - c0) * map,
                    x.data().data() + (static_cast<std::size_t>(n) * s.c + c0) * map,
                    sizeof(double) * (c1 - c0) * map);
    if (tape) {
        tape->record({x}, out, [x, out, c0, c1]() {
            if (!detail::grad_needed(x)) return;
            const TensorShape s = x.shape();
            const std::size_t map = static_cast<std::size_t>(s.h) * s.w;
            std::span<double> dx = detail::grad_span(x);
            std::span<const double> dy = out.grad();
            for (int n = 0; n < s.n; ++n) {
                double* dst = dx.data() + (static_cast<std::size_t>(n) * s.c + c0) * map;
                const double* src = dy.data() + static_cast<std::size_t>(n) * (c1 - c0) * map;
                for (std::size_t i = 0; i < (c1 - c0) * map; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    if (a.shape() != b.shape())
        throw validation_error("add: shape mismatch " + a.shape().str() + " vs " +
                               b.shape().str());
    Tensor out = Tensor::zeros(a.shape());
    std::span<double> o = out.mutable_data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
    if (tape) {
        tape->record({a, b}, out, [a, b, out]() {
            if (detail::grad_needed(a)) detail::accumulate(detail::grad_span(a), out.grad());
            if (detail::grad_needed(b)) detail::accumulate(detail::grad_span(b), out.grad());
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    if (a.shape() != b.shape())
        throw validation_error("mul: shape mismatch " + a.shape().str() + " vs " +
                               b.shape().str());
    Tensor out = Tensor::zeros(a.shape());
    std::span<double> o = out.mutable_data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
    if (tape) {
        tape->record({a, b}, out, [a, b, out]() {
            std::span<const double> dy = out.grad();
            if (detail::grad_needed(a)) {
                std::span<double> da = detail::grad_span(a);
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * b.data()[i];
            }
            if (detail::grad_needed(b)) {
                std::span<double> db = detail::grad_span(b);
                for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * a.data()[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& x, double k, Tape* tape = nullptr) {
    Tensor out = Tensor::zeros(x.shape());
    std::span<double> o = out.mutable_data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = k * x.data()[i];
    if (tape) {
        tape->record({x}, out, [x, out, k]() {
            if (!detail::grad_needed(x)) return;
            std::span<double> dx = detail::grad_span(x);
            std::span<const double> dy = out.grad();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += k * dy[i];
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x, Tape* tape = nullptr) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (tape) {
        tape->record({x}, out, [x, out]() {
            if (!detail::grad_needed(x)) return;
            std::span<double> dx = detail::grad_span(x);
            const double dy = out.grad()[0];
            for (double& v : dx) v += dy;
        });
    }
    return out;
}

}  // namespace sumnet

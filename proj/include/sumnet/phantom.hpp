#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sumnet/dataset.hpp"
#include "sumnet/rng.hpp"
#include "sumnet/tensor.hpp"

namespace sumnet {

enum class PhantomKind { Ring, Blob };

inline PhantomKind parse_phantom_kind(const std::string& s) {
    if (s == "ring") return PhantomKind::Ring;
    if (s == "blob") return PhantomKind::Blob;
    throw validation_error("unknown phantom kind: " + s + " (expected ring|blob)");
}

// One synthetic frame: a piecewise-constant anatomy map multiplied by
// Rayleigh speckle of unit mean, clipped to [0,1]. Masks are the noiseless
// generating regions, so speckle never touches the labels.
struct Phantom {
    Tensor image;                         // (1,1,H,W) in [0,1]
    std::map<std::string, Tensor> masks;  // (1,1,H,W), binary
};

namespace detail {

struct Ellipse {
    double cy, cx, a, b, theta;

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double c = std::cos(theta), s = std::sin(theta);
        const double u = dx * c + dy * s;
        const double v = -dx * s + dy * c;
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
};

}  // namespace detail

// Vessel-cross-section look: a dark lumen inside a bright wall annulus over
// mid-gray tissue. Masks: "lumen" is the inner ellipse, "eel" everything
// inside the outer boundary. Echogenicities are kept at or below ~0.55 so
// that clipping the speckle tail barely moves region means.
inline Phantom synth_ring_phantom(std::uint64_t seed, int h, int w) {
    Rng rng(seed);
    const double m = std::min(h, w);
    const detail::Ellipse lumen{
        h / 2.0 + rng.uniform(-0.08, 0.08) * m,
        w / 2.0 + rng.uniform(-0.08, 0.08) * m,
        rng.uniform(0.10, 0.16) * m,
        rng.uniform(0.10, 0.16) * m,
        rng.uniform(0.0, M_PI),
    };
    const double wall_a = rng.uniform(0.08, 0.14) * m;
    const double wall_b = rng.uniform(0.08, 0.14) * m;
    const detail::Ellipse outer{lumen.cy, lumen.cx, lumen.a + wall_a, lumen.b + wall_b,
                                lumen.theta};

    const double bg_level = 0.22, wall_level = 0.50, lumen_level = 0.08;
    Phantom ph;
    ph.image = Tensor::zeros({1, 1, h, w});
    Tensor lumen_mask = Tensor::zeros({1, 1, h, w});
    Tensor eel_mask = Tensor::zeros({1, 1, h, w});
    std::span<double> img = ph.image.mutable_data();
    std::span<double> lm = lumen_mask.mutable_data();
    std::span<double> em = eel_mask.mutable_data();
    std::size_t i = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x, ++i) {
            double level = bg_level;
            if (lumen.contains(y, x)) {
                level = lumen_level;
                lm[i] = 1.0;
                em[i] = 1.0;
            } else if (outer.contains(y, x)) {
                level = wall_level;
                em[i] = 1.0;
            }
            img[i] = std::clamp(level * rng.rayleigh_mean1(), 0.0, 1.0);
        }
    ph.masks["lumen"] = std::move(lumen_mask);
    ph.masks["eel"] = std::move(eel_mask);
    return ph;
}

// Organ-lobe look: one smooth star-convex bright region ("thyroid" mask)
// over darker surroundings. The radius profile r(angle) perturbs a base
// radius with low-order harmonics.
inline Phantom synth_blob_phantom(std::uint64_t seed, int h, int w) {
    Rng rng(seed);
    const double m = std::min(h, w);
    const double cy = h / 2.0 + rng.uniform(-0.08, 0.08) * m;
    const double cx = w / 2.0 + rng.uniform(-0.08, 0.08) * m;
    const double r0 = rng.uniform(0.17, 0.30) * m;
    double amp[3], phase[3];
    for (int k = 0; k < 3; ++k) {
        amp[k] = rng.uniform(0.0, 0.10);
        phase[k] = rng.uniform(0.0, 2.0 * M_PI);
    }
    auto radius = [&](double theta) {
        double r = 1.0;
        for (int k = 0; k < 3; ++k) r += amp[k] * std::cos((k + 2) * theta + phase[k]);
        return r0 * r;
    };

    const double bg_level = 0.22, blob_level = 0.50;
    Phantom ph;
    ph.image = Tensor::zeros({1, 1, h, w});
    Tensor mask = Tensor::zeros({1, 1, h, w});
    std::span<double> img = ph.image.mutable_data();
    std::span<double> mk = mask.mutable_data();
    std::size_t i = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x, ++i) {
            const double dy = y - cy, dx = x - cx;
            const double rho = std::sqrt(dy * dy + dx * dx);
            const bool inside = rho <= radius(std::atan2(dy, dx));
            if (inside) mk[i] = 1.0;
            img[i] = std::clamp((inside ? blob_level : bg_level) * rng.rayleigh_mean1(), 0.0, 1.0);
        }
    ph.masks["thyroid"] = std::move(mask);
    return ph;
}

inline Phantom synth_phantom(std::uint64_t seed, int h, int w, PhantomKind kind) {
    if (h % 32 != 0 || w % 32 != 0 || h <= 0 || w <= 0)
        throw validation_error("synth_phantom: dims must be positive multiples of 32, got " +
                               std::to_string(h) + "x" + std::to_string(w));
    return kind == PhantomKind::Ring ? synth_ring_phantom(seed, h, w)
                                     : synth_blob_phantom(seed, h, w);
}

// -------------------------------------------------------- dataset writer

inline std::uint8_t quantize_intensity(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Writes n_patients phantom volumes plus a manifest ready for training.
// Per-frame seeds derive from (seed, patient, frame), so any prefix of the
// dataset is stable as counts grow.
inline std::filesystem::path write_phantom_dataset(const std::filesystem::path& dir,
                                                   std::uint64_t seed, PhantomKind kind, int h,
                                                   int w, int n_patients, int frames_per) {
    if (n_patients < 1 || frames_per < 1)
        throw validation_error("write_phantom_dataset: need at least one patient and frame");
    std::filesystem::create_directories(dir);

    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest)
        throw validation_error("write_phantom_dataset: cannot write manifest in " + dir.string());

    for (int p = 0; p < n_patients; ++p) {
        char pid[16];
        std::snprintf(pid, sizeof(pid), "P%03d", p);
        RawVolume img{static_cast<std::uint32_t>(frames_per), static_cast<std::uint32_t>(h),
                      static_cast<std::uint32_t>(w), {}};
        img.bytes.resize(static_cast<std::size_t>(frames_per) * h * w);
        std::map<std::string, RawVolume> masks;

        for (int f = 0; f < frames_per; ++f) {
            const Phantom ph =
                synth_phantom(mix_seed(mix_seed(seed, p), static_cast<std::uint64_t>(f)), h, w,
                              kind);
            const std::size_t off = static_cast<std::size_t>(f) * h * w;
            for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i)
                img.bytes[off + i] = quantize_intensity(ph.image.data()[i]);
            for (const auto& [structure, mask] : ph.masks) {
                RawVolume& mv = masks[structure];
                if (mv.bytes.empty()) {
                    mv = {static_cast<std::uint32_t>(frames_per), static_cast<std::uint32_t>(h),
                          static_cast<std::uint32_t>(w), {}};
                    mv.bytes.resize(img.bytes.size());
                }
                for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i)
                    mv.bytes[off + i] = mask.data()[i] == 1.0 ? 255 : 0;
            }
        }

        const std::string img_name = std::string("vol_") + pid + ".usvl";
        write_usvl(dir / img_name, img);
        manifest << "patient=" << pid << "\n";
        manifest << "image=" << img_name << "\n";
        for (const auto& [structure, mv] : masks) {
            const std::string mask_name =
                std::string("mask_") + pid + "_" + structure + ".usvl";
            write_usvl(dir / mask_name, mv);
            manifest << "mask." << structure << "=" << mask_name << "\n";
        }
        manifest << "width=" << w << "\n";
        manifest << "height=" << h << "\n";
        manifest << "frames=" << frames_per << "\n";
        manifest << "\n";
    }
    manifest.close();
    return dir / "manifest.txt";
}

}  // namespace sumnet

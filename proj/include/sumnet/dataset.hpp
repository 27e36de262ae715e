#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sumnet/metrics.hpp"
#include "sumnet/rng.hpp"
#include "sumnet/tensor.hpp"

namespace sumnet {

// ---------------------------------------------------------------- USVL I/O

// Volume container: magic "USVL", version u32 LE, then F, H, W as u32 LE,
// then F*H*W bytes, unsigned 8-bit, frame-major row-major. Masks use the
// same container with values {0, 255}.
struct RawVolume {
    std::uint32_t frames = 0;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::uint8_t> bytes;
};

inline constexpr char kUsvlMagic[4] = {'U', 'S', 'V', 'L'};
inline constexpr std::uint32_t kUsvlVersion = 1;

inline void write_usvl(const std::filesystem::path& path, const RawVolume& vol) {
    if (vol.bytes.size() !=
        static_cast<std::size_t>(vol.frames) * vol.height * vol.width)
        throw validation_error("write_usvl: payload does not match header dims");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw validation_error("write_usvl: cannot open " + path.string());
    auto put_u32 = [&](std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
        out.write(reinterpret_cast<const char*>(b), 4);
    };
    out.write(kUsvlMagic, 4);
    put_u32(kUsvlVersion);
    put_u32(vol.frames);
    put_u32(vol.height);
    put_u32(vol.width);
    out.write(reinterpret_cast<const char*>(vol.bytes.data()),
              static_cast<std::streamsize>(vol.bytes.size()));
    if (!out) throw validation_error("write_usvl: write failed: " + path.string());
}

inline RawVolume read_usvl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw validation_error("read_usvl: cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kUsvlMagic, 4) != 0)
        throw validation_error("read_usvl: bad magic in " + path.string());
    auto get_u32 = [&]() {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
               static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
    };
    const std::uint32_t version = get_u32();
    RawVolume vol;
    vol.frames = get_u32();
    vol.height = get_u32();
    vol.width = get_u32();
    if (!in) throw validation_error("read_usvl: truncated header in " + path.string());
    if (version != kUsvlVersion)
        throw validation_error("read_usvl: unsupported version in " + path.string());
    const std::size_t n = static_cast<std::size_t>(vol.frames) * vol.height * vol.width;
    vol.bytes.resize(n);
    in.read(reinterpret_cast<char*>(vol.bytes.data()), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n))
        throw validation_error("read_usvl: truncated payload in " + path.string());
    return vol;
}

// ---------------------------------------------------------------- manifest

struct ManifestEntry {
    std::string patient_id;
    std::filesystem::path image_path;                      // resolved
    std::map<std::string, std::filesystem::path> mask_paths;  // structure -> path
    int width = 0;
    int height = 0;
    int n_frames = 0;
    std::optional<Spacing> spacing;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
};

// Line-oriented key=value blocks separated by blank lines. Keys: patient,
// image, mask.<structure>, width, height, frames, spacing_y, spacing_x.
// Relative paths resolve against the manifest location. Validates that
// referenced files exist and their headers match the declared dims.
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw validation_error("load_manifest: cannot open " + path.string());
    const std::filesystem::path base = path.parent_path();

    std::vector<std::map<std::string, std::string>> blocks(1);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            if (!blocks.back().empty()) blocks.emplace_back();
            continue;
        }
        if (line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw validation_error("load_manifest: line " + std::to_string(line_no) +
                                   " is not key=value: " + line);
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (blocks.back().count(key))
            throw validation_error("load_manifest: duplicate key '" + key + "' in one block");
        blocks.back()[key] = value;
    }
    if (blocks.back().empty()) blocks.pop_back();
    if (blocks.empty()) throw validation_error("load_manifest: no entries in " + path.string());

    auto to_int = [](const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            const int n = std::stoi(v, &pos);
            if (pos != v.size() || n <= 0) throw std::invalid_argument("");
            return n;
        } catch (const std::exception&) {
            throw validation_error("load_manifest: bad value for " + key + ": " + v);
        }
    };

    DatasetManifest manifest;
    for (auto& block : blocks) {
        ManifestEntry e;
        auto take = [&](const char* key) {
            auto it = block.find(key);
            if (it == block.end())
                throw validation_error("load_manifest: entry missing key '" + std::string(key) +
                                       "'");
            std::string v = it->second;
            block.erase(it);
            return v;
        };
        e.patient_id = take("patient");
        e.image_path = base / take("image");
        e.width = to_int("width", take("width"));
        e.height = to_int("height", take("height"));
        e.n_frames = to_int("frames", take("frames"));
        if (block.count("spacing_y") || block.count("spacing_x")) {
            Spacing sp;
            sp.sy = std::stod(take("spacing_y"));
            sp.sx = std::stod(take("spacing_x"));
            if (sp.sy <= 0 || sp.sx <= 0)
                throw validation_error("load_manifest: non-positive spacing for patient " +
                                       e.patient_id);
            e.spacing = sp;
        }
        for (auto& [key, value] : block) {
            if (key.rfind("mask.", 0) == 0 && key.size() > 5) {
                e.mask_paths[key.substr(5)] = base / value;
            } else {
                throw validation_error("load_manifest: unknown key '" + key + "'");
            }
        }
        if (e.mask_paths.empty())
            throw validation_error("load_manifest: patient " + e.patient_id + " has no masks");
        manifest.entries.push_back(std::move(e));
    }

    for (std::size_t i = 0; i < manifest.entries.size(); ++i)
        for (std::size_t j = i + 1; j < manifest.entries.size(); ++j)
            if (manifest.entries[i].patient_id == manifest.entries[j].patient_id)
                throw validation_error("load_manifest: duplicate patient_id " +
                                       manifest.entries[i].patient_id);

    for (const ManifestEntry& e : manifest.entries) {
        auto check_file = [&](const std::filesystem::path& p) {
            if (!std::filesystem::exists(p))
                throw validation_error("load_manifest: missing file " + p.string());
            const RawVolume v = read_usvl(p);
            if (static_cast<int>(v.frames) != e.n_frames ||
                static_cast<int>(v.height) != e.height || static_cast<int>(v.width) != e.width)
                throw validation_error(
                    "load_manifest: " + p.string() + " holds " + std::to_string(v.frames) + "x" +
                    std::to_string(v.height) + "x" + std::to_string(v.width) +
                    ", manifest declares " + std::to_string(e.n_frames) + "x" +
                    std::to_string(e.height) + "x" + std::to_string(e.width));
        };
        check_file(e.image_path);
        for (const auto& [structure, p] : e.mask_paths) check_file(p);
    }
    return manifest;
}

// ---------------------------------------------------------------- volumes

// A patient's frame stack, intensities in [0,1], masks in {0,1}, both
// zero-padded (bottom/right) to the next multiple of 32. The pre-padding
// dims are kept so inference can crop back.
struct VolumeRecord {
    std::string patient_id;
    Tensor frames;                        // (F,1,H,W)
    std::map<std::string, Tensor> masks;  // structure -> (F,1,H,W), binary
    std::optional<Spacing> spacing;
    int orig_h = 0;
    int orig_w = 0;
};

inline int pad_to_32(int v) { return (v + 31) / 32 * 32; }

namespace detail {

// u8 volume -> (F,1,Hp,Wp) doubles, padded, via the given per-byte map.
template <typename Map>
Tensor volume_to_tensor(const RawVolume& vol, Map&& map) {
    const int h = static_cast<int>(vol.height), w = static_cast<int>(vol.width);
    const int hp = pad_to_32(h), wp = pad_to_32(w);
    Tensor out = Tensor::zeros({static_cast<int>(vol.frames), 1, hp, wp});
    std::span<double> o = out.mutable_data();
    for (std::uint32_t f = 0; f < vol.frames; ++f) {
        const std::uint8_t* src = vol.bytes.data() + static_cast<std::size_t>(f) * h * w;
        double* dst = o.data() + static_cast<std::size_t>(f) * hp * wp;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                dst[static_cast<std::size_t>(y) * wp + x] =
                    map(src[static_cast<std::size_t>(y) * w + x]);
    }
    return out;
}

}  // namespace detail

inline Tensor intensities_to_tensor(const RawVolume& vol) {
    return detail::volume_to_tensor(vol, [](std::uint8_t b) { return b / 255.0; });
}

inline Tensor mask_to_tensor(const RawVolume& vol) {
    return detail::volume_to_tensor(vol, [](std::uint8_t b) { return b > 127 ? 1.0 : 0.0; });
}

// Drop the padding: (F,1,Hp,Wp) -> (F,1,h,w) keeping the top-left region.
inline Tensor crop_to(const Tensor& padded, int h, int w) {
    const TensorShape s = padded.shape();
    if (h > s.h || w > s.w)
        throw validation_error("crop_to: target exceeds source " + s.str());
    Tensor out = Tensor::zeros({s.n, s.c, h, w});
    std::span<double> o = out.mutable_data();
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < h; ++y) {
                const double* src =
                    padded.data().data() +
                    ((static_cast<std::size_t>(n) * s.c + c) * s.h + y) * s.w;
                std::copy_n(src, w,
                            o.data() + ((static_cast<std::size_t>(n) * s.c + c) * h + y) * w);
            }
    return out;
}

inline VolumeRecord load_volume(const ManifestEntry& entry) {
    VolumeRecord rec;
    rec.patient_id = entry.patient_id;
    rec.spacing = entry.spacing;
    rec.orig_h = entry.height;
    rec.orig_w = entry.width;
    rec.frames = intensities_to_tensor(read_usvl(entry.image_path));
    for (const auto& [structure, path] : entry.mask_paths)
        rec.masks[structure] = mask_to_tensor(read_usvl(path));
    return rec;
}

// ---------------------------------------------------------------- folds

// k-fold partition of the patient set; with k == #patients this is
// leave-one-patient-out. Deterministic in (ids, k, seed).
struct FoldSplit {
    struct Fold {
        std::vector<std::string> held_out;
        std::vector<std::string> training;
    };
    std::vector<Fold> folds;
};

inline FoldSplit make_folds(const std::vector<std::string>& patient_ids, int k,
                            std::uint64_t seed) {
    if (patient_ids.empty()) throw validation_error("make_folds: no patients");
    if (k < 1) throw validation_error("make_folds: k must be >= 1");
    if (k > static_cast<int>(patient_ids.size()))
        throw validation_error("make_folds: k=" + std::to_string(k) + " exceeds " +
                               std::to_string(patient_ids.size()) + " patients");
    for (std::size_t i = 0; i < patient_ids.size(); ++i)
        for (std::size_t j = i + 1; j < patient_ids.size(); ++j)
            if (patient_ids[i] == patient_ids[j])
                throw validation_error("make_folds: duplicate patient " + patient_ids[i]);

    std::vector<std::string> shuffled = patient_ids;
    Rng rng(mix_seed(seed, 0xF01D5));
    rng.shuffle(shuffled);

    FoldSplit split;
    split.folds.resize(k);
    for (std::size_t i = 0; i < shuffled.size(); ++i)
        split.folds[i % k].held_out.push_back(shuffled[i]);
    for (FoldSplit::Fold& fold : split.folds)
        for (const std::string& id : patient_ids)
            if (std::find(fold.held_out.begin(), fold.held_out.end(), id) ==
                fold.held_out.end())
                fold.training.push_back(id);
    return split;
}

// ---------------------------------------------------------------- batching

struct FrameRef {
    int record = 0;  // index into the record list
    int frame = 0;
    bool operator==(const FrameRef&) const = default;
};

// Shuffled batch schedule for one epoch over the training records. The
// shuffle seed mixes (seed, epoch), so epochs differ but reruns match; the
// last partial batch is kept.
inline std::vector<std::vector<FrameRef>> batch_plan(
    const std::vector<const VolumeRecord*>& training, int batch_size, std::uint64_t seed,
    int epoch) {
    if (batch_size < 1) throw validation_error("batch_plan: batch_size must be >= 1");
    std::vector<FrameRef> order;
    for (std::size_t r = 0; r < training.size(); ++r)
        for (int f = 0; f < training[r]->frames.shape().n; ++f)
            order.push_back({static_cast<int>(r), f});
    Rng rng(mix_seed(mix_seed(seed, 0xBA7C4), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    std::vector<std::vector<FrameRef>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        const std::size_t end = std::min(order.size(), i + batch_size);
        batches.emplace_back(order.begin() + i, order.begin() + end);
    }
    return batches;
}

// Copy frame f of a (F,1,H,W) stack into a fresh (1,1,H,W) tensor.
inline Tensor frame_of(const Tensor& stack, int f) {
    const TensorShape s = stack.shape();
    if (f < 0 || f >= s.n) throw validation_error("frame_of: frame index out of range");
    Tensor out = Tensor::zeros({1, 1, s.h, s.w});
    const std::size_t map = static_cast<std::size_t>(s.h) * s.w;
    std::copy_n(stack.data().begin() + f * map, map, out.mutable_data().begin());
    return out;
}

}  // namespace sumnet

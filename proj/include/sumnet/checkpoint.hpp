#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "sumnet/tensor.hpp"

namespace sumnet {

// CRC-32 (IEEE, reflected polynomial 0xEDB88320).
inline std::uint32_t crc32(std::span<const unsigned char> bytes) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (unsigned char b : bytes) crc = table[(crc ^ b) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

// One named array in a checkpoint file. Values are stored f64
// little-endian, row-major.
struct CheckpointEntry {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<double> values;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (std::uint32_t d : dims) n *= d;
        return n;
    }
};

namespace detail {

inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xFF));
    out.push_back(static_cast<unsigned char>(v >> 8));
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::vector<unsigned char>& out, double v) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
}

class ByteReader {
  public:
    ByteReader(std::span<const unsigned char> bytes, std::string file)
        : bytes_(bytes), file_(std::move(file)) {}

    std::uint16_t u16() { return static_cast<std::uint16_t>(u8() | (u8() << 8)); }

    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }

    double f64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return std::bit_cast<double>(v);
    }

    std::string str(std::size_t len) {
        need(len);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
        pos_ += len;
        return s;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    unsigned char u8() {
        need(1);
        return bytes_[pos_++];
    }

  private:

    void need(std::size_t n) {
        if (pos_ + n > bytes_.size())
            throw validation_error("checkpoint: truncated file " + file_);
    }

    std::span<const unsigned char> bytes_;
    std::string file_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'S', 'U', 'M', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::filesystem::path& path,
                             std::span<const CheckpointEntry> entries) {
    std::vector<unsigned char> buf;
    buf.insert(buf.end(), kCheckpointMagic, kCheckpointMagic + 4);
    detail::put_u32(buf, kCheckpointVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(entries.size()));
    for (const CheckpointEntry& e : entries) {
        if (e.name.size() > 0xFFFF)
            throw validation_error("checkpoint: entry name too long: " + e.name);
        if (e.numel() != static_cast<std::int64_t>(e.values.size()))
            throw validation_error("checkpoint: dims/payload mismatch for entry " + e.name);
        detail::put_u16(buf, static_cast<std::uint16_t>(e.name.size()));
        buf.insert(buf.end(), e.name.begin(), e.name.end());
        buf.push_back(static_cast<unsigned char>(e.dims.size()));
        for (std::uint32_t d : e.dims) detail::put_u32(buf, d);
        for (double v : e.values) detail::put_f64(buf, v);
    }
    detail::put_u32(buf, crc32(buf));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw validation_error("checkpoint: cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw validation_error("checkpoint: write failed: " + path.string());
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw validation_error("checkpoint: cannot open: " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());

    if (buf.size() < 16) throw validation_error("checkpoint: truncated file " + path.string());
    if (std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
        throw validation_error("checkpoint: bad magic in " + path.string());
    const std::uint32_t stored_crc = static_cast<std::uint32_t>(buf[buf.size() - 4]) |
                                     static_cast<std::uint32_t>(buf[buf.size() - 3]) << 8 |
                                     static_cast<std::uint32_t>(buf[buf.size() - 2]) << 16 |
                                     static_cast<std::uint32_t>(buf[buf.size() - 1]) << 24;
    if (crc32({buf.data(), buf.size() - 4}) != stored_crc)
        throw validation_error("checkpoint: CRC mismatch in " + path.string());

    detail::ByteReader r({buf.data(), buf.size() - 4}, path.string());
    r.str(4);  // magic
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw validation_error("checkpoint: unsupported version " + std::to_string(version) +
                               " in " + path.string());
    const std::uint32_t count = r.u32();
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name = r.str(r.u16());
        const std::uint32_t rank = r.u8();
        e.dims.resize(rank);
        for (std::uint32_t& d : e.dims) d = r.u32();
        const std::int64_t n = e.numel();
        if (n < 0 || static_cast<std::uint64_t>(n) * 8 > r.remaining())
            throw validation_error("checkpoint: truncated file " + path.string());
        e.values.resize(static_cast<std::size_t>(n));
        for (double& v : e.values) v = r.f64();
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace sumnet

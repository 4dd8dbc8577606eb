#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "loco/params.hpp"

namespace loco {

// Binary checkpoint layout (all integers little-endian):
//   magic "LOCO" | u32 version | u64 base_checksum | u32 shard_count
//   per shard: u32 kind (0 backbone, 1 task) | u32 task_id | u32 tensor_count
//              | u64 shard_checksum
//   per tensor: u32 name_len | name bytes | u8 dtype (1 = f64) | u32 rank
//               | u64 extents[rank] | payload
// base_checksum is always the backbone digest, including in task files, which
// ties every shard to the exact base model it was trained against. The
// per-shard checksum covers names and payloads in sorted-name order.

inline constexpr uint32_t kCheckpointVersion = 1;

struct Shard {
    uint32_t kind = 0;  // 0 backbone, 1 task
    uint32_t task_id = 0;
    ParamMap tensors;
};

struct Checkpoint {
    uint32_t version = kCheckpointVersion;
    uint64_t base_checksum = 0;
    std::vector<Shard> shards;
};

namespace detail {

class ByteWriter {
public:
    explicit ByteWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open for writing: " + path);
    }
    void u8(uint8_t v) { out_.put(static_cast<char>(v)); }
    void u32(uint32_t v) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        out_.write(b, 4);
    }
    void u64(uint64_t v) {
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        out_.write(b, 8);
    }
    void bytes(const void* p, size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void f64s(const double* p, size_t n) {
        if constexpr (std::endian::native == std::endian::little) {
            bytes(p, n * sizeof(double));
        } else {
            for (size_t i = 0; i < n; ++i) u64(std::bit_cast<uint64_t>(p[i]));
        }
    }
    void finish() {
        out_.flush();
        if (!out_) throw IoError("write failed: " + path_);
    }

private:
    std::string path_;
    std::ofstream out_;
};

class ByteReader {
public:
    explicit ByteReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open for reading: " + path);
    }
    uint8_t u8() {
        int c = in_.get();
        if (c == EOF) truncated();
        return static_cast<uint8_t>(c);
    }
    uint32_t u32() {
        unsigned char b[4];
        read(b, 4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        unsigned char b[8];
        read(b, 8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
        return v;
    }
    void read(void* p, size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(in_.gcount()) != n) truncated();
    }
    void f64s(double* p, size_t n) {
        if constexpr (std::endian::native == std::endian::little) {
            read(p, n * sizeof(double));
        } else {
            for (size_t i = 0; i < n; ++i) p[i] = std::bit_cast<double>(u64());
        }
    }
    [[noreturn]] void truncated() { throw FormatError("truncated file: " + path_); }

private:
    std::string path_;
    std::ifstream in_;
};

}  // namespace detail

inline void write_checkpoint(const std::string& path, uint64_t base_checksum,
                             const std::vector<Shard>& shards) {
    detail::ByteWriter w(path);
    w.bytes("LOCO", 4);
    w.u32(kCheckpointVersion);
    w.u64(base_checksum);
    w.u32(static_cast<uint32_t>(shards.size()));
    for (const auto& s : shards) {
        w.u32(s.kind);
        w.u32(s.task_id);
        w.u32(static_cast<uint32_t>(s.tensors.size()));
        w.u64(checksum_params(s.tensors));
        for (const auto& [name, t] : s.tensors) {
            w.u32(static_cast<uint32_t>(name.size()));
            w.bytes(name.data(), name.size());
            w.u8(1);  // f64
            w.u32(static_cast<uint32_t>(t.ndim()));
            for (size_t i = 0; i < t.ndim(); ++i) w.u64(t.dim(i));
            w.f64s(t.raw(), t.numel());
        }
    }
    w.finish();
}

inline Checkpoint read_checkpoint(const std::string& path) {
    detail::ByteReader r(path);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, "LOCO", 4) != 0) throw FormatError("bad magic in " + path);
    Checkpoint cp;
    cp.version = r.u32();
    if (cp.version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(cp.version) + " in " +
                          path);
    cp.base_checksum = r.u64();
    const uint32_t shard_count = r.u32();
    for (uint32_t si = 0; si < shard_count; ++si) {
        Shard s;
        s.kind = r.u32();
        if (s.kind > 1) throw FormatError("unknown shard kind in " + path);
        s.task_id = r.u32();
        const uint32_t tensor_count = r.u32();
        const uint64_t want_sum = r.u64();
        for (uint32_t ti = 0; ti < tensor_count; ++ti) {
            const uint32_t name_len = r.u32();
            if (name_len == 0 || name_len > 4096) throw FormatError("implausible name length in " + path);
            std::string name(name_len, '\0');
            r.read(name.data(), name_len);
            if (r.u8() != 1) throw FormatError("unknown dtype for tensor " + name + " in " + path);
            const uint32_t rank = r.u32();
            if (rank == 0 || rank > 8) throw FormatError("implausible rank for tensor " + name);
            Shape shape(rank);
            size_t numel = 1;
            for (uint32_t d = 0; d < rank; ++d) {
                const uint64_t e = r.u64();
                if (e == 0 || e > (1ull << 32)) throw FormatError("implausible extent for " + name);
                shape[d] = static_cast<size_t>(e);
                numel *= shape[d];
            }
            Tensor t = Tensor::zeros(shape);
            r.f64s(t.raw(), numel);
            if (!s.tensors.emplace(name, std::move(t)).second)
                throw FormatError("duplicate tensor name " + name + " in " + path);
        }
        if (checksum_params(s.tensors) != want_sum)
            throw ChecksumError("shard " + std::to_string(si) + " checksum mismatch in " + path);
        cp.shards.push_back(std::move(s));
    }
    return cp;
}

// Copies values from src into the live destination tensors by name. The name
// sets must match exactly; shapes must agree element for element.
inline void load_params(ParamMap& dst, const ParamMap& src) {
    for (const auto& [name, t] : dst)
        if (!src.count(name)) throw FormatError("checkpoint is missing tensor " + name);
    for (const auto& [name, t] : src) {
        auto it = dst.find(name);
        if (it == dst.end()) throw FormatError("checkpoint has unexpected tensor " + name);
        Tensor& d = it->second;
        if (d.shape() != t.shape())
            throw ShapeError("shape mismatch for " + name + ": model " + shape_str(d.shape()) +
                             " vs file " + shape_str(t.shape()));
        d.data() = t.data();
    }
}

}  // namespace loco

#pragma once

#include <map>
#include <string>

#include "loco/rng.hpp"
#include "loco/tensor.hpp"

namespace loco {

// Named parameter registry. std::map keeps iteration name-sorted, which fixes
// the byte order for checksums and serialization.
using ParamMap = std::map<std::string, Tensor>;

inline void put_param(ParamMap& m, const std::string& name, const Tensor& t) {
    if (!m.emplace(name, t).second) throw ContractError("duplicate parameter name: " + name);
}

// FNV-1a over name bytes and raw f64 payloads in sorted-name order. Stable
// across runs and platforms with the same endianness.
inline uint64_t checksum_params(const ParamMap& m) {
    uint64_t h = 14695981039346656037ull;
    for (const auto& [name, t] : m) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(t.raw(), t.numel() * sizeof(double), h);
    }
    return h;
}

inline void set_trainable(ParamMap& m, bool trainable) {
    for (auto& [name, t] : m) const_cast<Tensor&>(t).set_requires_grad(trainable);
}

inline size_t count_elements(const ParamMap& m) {
    size_t n = 0;
    for (const auto& [name, t] : m) n += t.numel();
    return n;
}

}  // namespace loco

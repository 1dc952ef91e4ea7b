#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace duet {

// Raised when a caller violates an operation's preconditions.
class InvalidInput : public std::runtime_error {
public:
    explicit InvalidInput(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a non-finite value shows up in a forward/backward pass.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised by the CTC loss when no blank-expanded alignment fits the input.
class NoAlignment : public std::runtime_error {
public:
    explicit NoAlignment(const std::string& msg) : std::runtime_error(msg) {}
};

// Reserved token ids shared by the text vocabulary and the decoder output space.
enum ReservedId : int {
    PAD = 0,
    BOS = 1,
    EOS = 2,
    MASK = 3,
    UNK = 4,
    NUM_RESERVED = 5,
};

// FNV-1a over a byte string; used for config digests and directory checksums.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(s.data(), s.size());
}

}  // namespace duet

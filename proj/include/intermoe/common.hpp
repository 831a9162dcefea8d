#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace intermoe {

// ----------------------------- errors -----------------------------

// Shape conformance failures in tensor ops; message names the op and both shapes.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf produced by a forward op on finite inputs.
struct NumericsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad user-supplied configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A referenced checkpoint/corpus/file does not exist (CLI exit code 3).
struct MissingArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Motion file (.mot) format errors, one type per failure mode.
struct MotFormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MotBadMagicError : MotFormatError {
    using MotFormatError::MotFormatError;
};
struct MotTruncatedError : MotFormatError {
    using MotFormatError::MotFormatError;
};
struct MotShapeError : MotFormatError {
    using MotFormatError::MotFormatError;
};

// ----------------------------- rng -----------------------------

// splitmix64; used to derive independent substreams from one base seed.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    return splitmix64(base ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

inline std::mt19937_64 make_rng(uint64_t seed) {
    return std::mt19937_64(seed);
}

// ----------------------------- hashing -----------------------------

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string fnv1a64_hex(const std::string& s) {
    static const char* digits = "0123456789abcdef";
    uint64_t h = fnv1a64(s);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

// ----------------------------- misc -----------------------------

inline std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

}  // namespace intermoe

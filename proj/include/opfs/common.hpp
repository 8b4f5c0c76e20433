#pragma once
// Shared basics: error taxonomy (mapped to CLI exit codes), float formatting
// for byte-reproducible artifacts, and a small FNV-1a content hash.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace opfs {

inline constexpr const char* kToolVersion = "0.1.0";

// Exit-code taxonomy: 0 success, 1 usage, 2 data/validation, 3 solver, 4 training.
struct Error : std::runtime_error {
    int exit_code;
    Error(int code, const std::string& msg) : std::runtime_error(msg), exit_code(code) {}
};
struct UsageError : Error {
    explicit UsageError(const std::string& msg) : Error(1, msg) {}
};
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(2, msg) {}
};
struct SolverError : Error {
    explicit SolverError(const std::string& msg) : Error(3, msg) {}
};
struct TrainError : Error {
    explicit TrainError(const std::string& msg) : Error(4, msg) {}
};

// 17 significant digits: shortest representation that round-trips any double,
// so identical runs produce byte-identical CSV/JSON artifacts.
std::string fmt17(double v);

// FNV-1a 64-bit over bytes; used for content hashes (case hash, dataset hashes).
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}
std::string fnv1a_hex(std::string_view bytes);

} // namespace opfs

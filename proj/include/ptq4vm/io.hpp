// Little-endian binary stream helpers shared by the clip, flow-cache and
// checkpoint formats. All readers throw on short or malformed input.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ptq4vm/common.hpp"

namespace ptq4vm::io {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    check(os.good(), "write failed after ", n, " bytes");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    check(is.gcount() == static_cast<std::streamsize>(n), "truncated input, wanted ", n, " bytes");
}

template <class T>
void write_pod(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    write_bytes(os, &v, sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    static_assert(std::is_trivially_copyable_v<T>);
    T v;
    read_bytes(is, &v, sizeof(T));
    return v;
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_pod(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_pod(os, v); }
inline void write_i32(std::ostream& os, std::int32_t v) { write_pod(os, v); }
inline void write_f32(std::ostream& os, float v) { write_pod(os, v); }
inline void write_f64(std::ostream& os, double v) { write_pod(os, v); }

inline std::uint32_t read_u32(std::istream& is) { return read_pod<std::uint32_t>(is); }
inline std::uint64_t read_u64(std::istream& is) { return read_pod<std::uint64_t>(is); }
inline std::int32_t read_i32(std::istream& is) { return read_pod<std::int32_t>(is); }
inline float read_f32(std::istream& is) { return read_pod<float>(is); }
inline double read_f64(std::istream& is) { return read_pod<double>(is); }

inline void write_f32v(std::ostream& os, std::span<const float> v) {
    write_u64(os, v.size());
    if (!v.empty()) write_bytes(os, v.data(), v.size() * sizeof(float));
}

inline std::vector<float> read_f32v(std::istream& is) {
    std::uint64_t n = read_u64(is);
    check(n < (1ull << 32), "implausible array length ", n);
    std::vector<float> v(n);
    if (n) read_bytes(is, v.data(), n * sizeof(float));
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    if (!s.empty()) write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
    std::uint32_t n = read_u32(is);
    check(n < (1u << 20), "implausible string length ", n);
    std::string s(n, '\0');
    if (n) read_bytes(is, s.data(), n);
    return s;
}

// 8-byte format tags at the head of every binary file.
inline void write_magic(std::ostream& os, const char* magic) {
    check(std::strlen(magic) == 8, "magic must be 8 bytes");
    write_bytes(os, magic, 8);
}

inline void expect_magic(std::istream& is, const char* magic, const char* what) {
    char got[9] = {0};
    read_bytes(is, got, 8);
    check(std::memcmp(got, magic, 8) == 0, "bad ", what, " header: expected ", magic, ", got ",
          std::string(got, 8));
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    check(os.is_open(), "cannot open ", path, " for writing");
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.is_open(), "cannot open ", path, " for reading");
    return is;
}

}  // namespace ptq4vm::io

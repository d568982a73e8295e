#pragma once

// TNSR binary tensor format.
//
//   bytes 0..3   magic "TNSR"
//   byte  4      version, 0x01
//   byte  5      dtype: 0x01 = f32, 0x02 = f64
//   bytes 6..9   ndim, unsigned 32-bit little-endian
//   then         ndim dimension sizes, unsigned 64-bit little-endian
//   then         row-major payload, little-endian scalars
//
// Readers reject unknown magic, version, or dtype, ndim == 0, zero
// dimensions, and truncated payloads, reporting the byte offset.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "cagevit/error.hpp"
#include "cagevit/tensor.hpp"

namespace cagevit::tnsr {

inline constexpr std::uint8_t kVersion = 0x01;
inline constexpr std::uint8_t kDtypeF32 = 0x01;
inline constexpr std::uint8_t kDtypeF64 = 0x02;

namespace detail {

template <typename U>
void put_le(std::ostream& os, U value) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i)
        buf[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& is, std::size_t& offset, const char* what) {
    unsigned char buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (!is) throw ParseError(std::string("TNSR truncated while reading ") + what, offset);
    offset += sizeof(U);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(buf[i]) << (8 * i);
    return value;
}

inline std::uint32_t f32_bits(float v) {
    std::uint32_t b;
    std::memcpy(&b, &v, 4);
    return b;
}
inline float f32_from_bits(std::uint32_t b) {
    float v;
    std::memcpy(&v, &b, 4);
    return v;
}
inline std::uint64_t f64_bits(double v) {
    std::uint64_t b;
    std::memcpy(&b, &v, 8);
    return b;
}
inline double f64_from_bits(std::uint64_t b) {
    double v;
    std::memcpy(&v, &b, 8);
    return v;
}

template <typename T>
constexpr std::uint8_t dtype_byte() {
    return sizeof(T) == 4 ? kDtypeF32 : kDtypeF64;
}

}  // namespace detail

template <typename T>
void write(std::ostream& os, const Tensor<T>& t) {
    os.write("TNSR", 4);
    os.put(static_cast<char>(kVersion));
    os.put(static_cast<char>(detail::dtype_byte<T>()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(os, d);
    for (const T v : t.data()) {
        if constexpr (sizeof(T) == 4)
            detail::put_le<std::uint32_t>(os, detail::f32_bits(static_cast<float>(v)));
        else
            detail::put_le<std::uint64_t>(os, detail::f64_bits(static_cast<double>(v)));
    }
    if (!os) throw IoError("TNSR write failed");
}

template <typename T>
void write_file(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    write(os, t);
}

// Dtype recorded in a stream, without consuming it past the header.
struct Header {
    std::uint8_t dtype;
    std::vector<std::size_t> shape;
};

inline Header read_header(std::istream& is, std::size_t& offset) {
    char magic[4];
    is.read(magic, 4);
    if (!is) throw ParseError("TNSR truncated while reading magic", offset);
    if (std::memcmp(magic, "TNSR", 4) != 0) throw ParseError("bad TNSR magic", offset);
    offset += 4;

    const auto version = detail::get_le<std::uint8_t>(is, offset, "version");
    if (version != kVersion)
        throw ParseError("unsupported TNSR version " + std::to_string(version), offset - 1);
    const auto dtype = detail::get_le<std::uint8_t>(is, offset, "dtype");
    if (dtype != kDtypeF32 && dtype != kDtypeF64)
        throw ParseError("unsupported TNSR dtype " + std::to_string(dtype), offset - 1);

    const auto ndim = detail::get_le<std::uint32_t>(is, offset, "ndim");
    if (ndim == 0) throw ParseError("TNSR with empty shape rejected", offset - 4);
    if (ndim > 8) throw ParseError("TNSR ndim " + std::to_string(ndim) + " not supported", offset - 4);

    Header h;
    h.dtype = dtype;
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        const auto d = detail::get_le<std::uint64_t>(is, offset, "dimension");
        if (d == 0) throw ParseError("TNSR zero dimension rejected", offset - 8);
        if (d > std::numeric_limits<std::size_t>::max() / numel)
            throw ParseError("TNSR dimensions overflow", offset - 8);
        numel *= static_cast<std::size_t>(d);
        h.shape.push_back(static_cast<std::size_t>(d));
    }
    return h;
}

// Reads a tensor, converting the stored dtype to T.
template <typename T>
Tensor<T> read(std::istream& is, std::size_t& offset) {
    const Header h = read_header(is, offset);
    std::size_t numel = 1;
    for (std::size_t d : h.shape) numel *= d;
    std::vector<T> data(numel);
    for (std::size_t i = 0; i < numel; ++i) {
        if (h.dtype == kDtypeF32)
            data[i] = static_cast<T>(
                detail::f32_from_bits(detail::get_le<std::uint32_t>(is, offset, "payload")));
        else
            data[i] = static_cast<T>(
                detail::f64_from_bits(detail::get_le<std::uint64_t>(is, offset, "payload")));
    }
    return Tensor<T>(h.shape, std::move(data));
}

template <typename T>
Tensor<T> read(std::istream& is) {
    std::size_t offset = 0;
    return read<T>(is, offset);
}

template <typename T>
Tensor<T> read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    return read<T>(is);
}

inline std::uint8_t file_dtype(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    std::size_t offset = 0;
    return read_header(is, offset).dtype;
}

}  // namespace cagevit::tnsr

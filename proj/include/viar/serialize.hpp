#pragma once

#include <bit>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "viar/errors.hpp"

namespace viar::io {

// All on-disk integers are unsigned 32-bit little-endian; all numeric payloads
// are little-endian fp32 (or raw u32 words for metadata sections).

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("read_u32: stream truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_magic(std::ostream& os, std::string_view magic) {
    os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& is, std::string_view magic) {
    std::string got(magic.size(), '\0');
    is.read(got.data(), static_cast<std::streamsize>(magic.size()));
    if (!is || got != magic)
        throw IoError("bad magic: expected \"" + std::string(magic) + "\", got \"" + got + "\"");
}

inline void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_u32(is)); }

template <std::floating_point Real>
void write_f32_values(std::ostream& os, const std::vector<Real>& v) {
    for (Real x : v) write_f32(os, static_cast<float>(x));
}

template <std::floating_point Real>
std::vector<Real> read_f32_values(std::istream& is, std::size_t count) {
    std::vector<Real> v(count);
    for (std::size_t i = 0; i < count; ++i) v[i] = static_cast<Real>(read_f32(is));
    return v;
}

// ---------------------------------------------------------------------------
// Portable float image: magic "VIARIM1", H, W, C as u32, then H*W*C fp32
// pixels, row-major with channel fastest.

template <std::floating_point Real>
struct Image {
    std::size_t height = 0, width = 0, channels = 0;
    std::vector<Real> pixels;

    Real& at(std::size_t y, std::size_t x, std::size_t c) {
        return pixels[(y * width + x) * channels + c];
    }
    Real at(std::size_t y, std::size_t x, std::size_t c) const {
        return pixels[(y * width + x) * channels + c];
    }
};

inline constexpr std::string_view kImageMagic = "VIARIM1";

template <std::floating_point Real>
void write_image(std::ostream& os, const Image<Real>& im) {
    write_magic(os, kImageMagic);
    write_u32(os, static_cast<std::uint32_t>(im.height));
    write_u32(os, static_cast<std::uint32_t>(im.width));
    write_u32(os, static_cast<std::uint32_t>(im.channels));
    write_f32_values(os, im.pixels);
}

template <std::floating_point Real>
Image<Real> read_image(std::istream& is) {
    expect_magic(is, kImageMagic);
    Image<Real> im;
    im.height = read_u32(is);
    im.width = read_u32(is);
    im.channels = read_u32(is);
    im.pixels = read_f32_values<Real>(is, im.height * im.width * im.channels);
    return im;
}

template <std::floating_point Real>
void save_image(const std::string& path, const Image<Real>& im) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    write_image(os, im);
}

template <std::floating_point Real>
Image<Real> load_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path);
    return read_image<Real>(is);
}

// ---------------------------------------------------------------------------
// Named binary sections, the unit of the checkpoint format. A section is
// name-length, name bytes, word count, then that many 4-byte little-endian
// words (fp32 bit patterns for parameters, raw u32 for counters).

struct Section {
    std::string name;
    std::vector<std::uint32_t> words;
};

inline void write_section(std::ostream& os, const Section& s) {
    write_u32(os, static_cast<std::uint32_t>(s.name.size()));
    os.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    write_u32(os, static_cast<std::uint32_t>(s.words.size()));
    for (std::uint32_t w : s.words) write_u32(os, w);
}

inline Section read_section(std::istream& is) {
    Section s;
    const std::uint32_t name_len = read_u32(is);
    s.name.resize(name_len);
    is.read(s.name.data(), name_len);
    if (!is) throw IoError("read_section: truncated name");
    const std::uint32_t count = read_u32(is);
    s.words.resize(count);
    for (std::uint32_t& w : s.words) w = read_u32(is);
    return s;
}

template <std::floating_point Real>
Section make_f32_section(std::string name, const std::vector<Real>& values) {
    Section s;
    s.name = std::move(name);
    s.words.reserve(values.size());
    for (Real x : values) s.words.push_back(std::bit_cast<std::uint32_t>(static_cast<float>(x)));
    return s;
}

template <std::floating_point Real>
std::vector<Real> section_f32_values(const Section& s) {
    std::vector<Real> v(s.words.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = static_cast<Real>(std::bit_cast<float>(s.words[i]));
    return v;
}

inline Section make_u64_section(std::string name, const std::vector<std::uint64_t>& values) {
    Section s;
    s.name = std::move(name);
    for (std::uint64_t v : values) {
        s.words.push_back(static_cast<std::uint32_t>(v & 0xFFFFFFFFull));
        s.words.push_back(static_cast<std::uint32_t>(v >> 32));
    }
    return s;
}

inline std::vector<std::uint64_t> section_u64_values(const Section& s) {
    if (s.words.size() % 2 != 0) throw IoError("u64 section with odd word count: " + s.name);
    std::vector<std::uint64_t> v(s.words.size() / 2);
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = static_cast<std::uint64_t>(s.words[2 * i]) |
               (static_cast<std::uint64_t>(s.words[2 * i + 1]) << 32);
    return v;
}

} // namespace viar::io

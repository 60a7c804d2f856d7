// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "dprobe/error.hpp"

namespace dprobe::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 15]);
    }
    return out;
}

inline std::string file_sha256(const std::filesystem::path& path) {
    auto bytes = read_file(path);
    return sha256_hex({bytes.data(), bytes.size()});
}

/// Append-only little-endian byte sink.
class Writer {
public:
    template <class T>
        requires std::is_trivially_copyable_v<T>
    void put(T v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.append(p, sizeof(T));
    }
    template <class T>
    void put_span(std::span<const T> v) {
        buf_.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
    }
    void put_bytes(std::string_view s) { buf_.append(s); }

    const std::string& bytes() const { return buf_; }
    std::size_t size() const { return buf_.size(); }

private:
    std::string buf_;
};

/// Bounds-checked little-endian reader over a byte buffer.
class Reader {
public:
    Reader(const char* data, std::size_t size, std::string context)
        : data_(data), size_(size), context_(std::move(context)) {}

    template <class T>
        requires std::is_trivially_copyable_v<T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_ + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    template <class T>
    void get_into(std::span<T> out) {
        need(out.size_bytes());
        std::memcpy(out.data(), data_ + pos_, out.size_bytes());
        pos_ += out.size_bytes();
    }
    std::string_view get_bytes(std::size_t n) {
        need(n);
        std::string_view s(data_ + pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }
    void seek(std::size_t p) {
        if (p > size_) throw IoError(context_ + ": seek past end");
        pos_ = p;
    }

private:
    void need(std::size_t n) const {
        if (pos_ + n > size_) throw IoError(context_ + ": truncated file");
    }
    const char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
    std::string context_;
};

}  // namespace dprobe::io

#pragma once

// Little-endian packing for weight blobs. Host must be little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace amal::detail {

static_assert(std::endian::native == std::endian::little, "weight blobs assume a little-endian host");

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    template <typename T>
    void array(std::span<const T> v) {
        u64(v.size());
        raw(v.data(), v.size() * sizeof(T));
    }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view in) : in_(in) {}

    void raw(void* p, std::size_t n) {
        if (n > in_.size() - pos_) throw std::runtime_error("unexpected end of data");
        std::memcpy(p, in_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32() { std::uint32_t v; raw(&v, sizeof v); return v; }
    std::uint64_t u64() { std::uint64_t v; raw(&v, sizeof v); return v; }
    double f64() { double v; raw(&v, sizeof v); return v; }
    std::string str() {
        std::uint32_t n = u32();
        if (n > in_.size() - pos_) throw std::runtime_error("unexpected end of data");
        std::string s(in_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    template <typename T>
    std::vector<T> array() {
        std::uint64_t n = u64();
        if (n > (in_.size() - pos_) / sizeof(T)) throw std::runtime_error("unexpected end of data");
        std::vector<T> v(n);
        raw(v.data(), n * sizeof(T));
        return v;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    std::string_view in_;
    std::size_t pos_ = 0;
};

}  // namespace amal::detail

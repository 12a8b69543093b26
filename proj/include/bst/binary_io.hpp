#pragma once

// Little-endian primitives shared by the checkpoint and dataset formats.

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>

#include "bst/errors.hpp"

namespace bst::io {

template <typename T>
concept Scalar = std::is_arithmetic_v<T>;

template <Scalar T>
void write_le(std::ostream& out, T value) {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
    auto bits = std::bit_cast<U>(value);
    std::array<char, sizeof(T)> bytes{};
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    }
    out.write(bytes.data(), bytes.size());
}

// Reads with byte-offset tracking so that format errors can say where a file
// went wrong.
class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}

    std::size_t offset() const noexcept { return offset_; }

    template <Scalar T>
    T read(std::string_view what) {
        using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
        std::array<unsigned char, sizeof(T)> bytes{};
        in_.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
        if (in_.gcount() != static_cast<std::streamsize>(sizeof(T))) {
            throw FormatError("truncated " + std::string(what), offset_ + static_cast<std::size_t>(in_.gcount()));
        }
        U bits = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            bits |= static_cast<U>(static_cast<U>(bytes[i]) << (8 * i));
        }
        offset_ += sizeof(T);
        return std::bit_cast<T>(bits);
    }

    void expect_magic(std::string_view magic) {
        std::string got(magic.size(), '\0');
        in_.read(got.data(), static_cast<std::streamsize>(got.size()));
        if (in_.gcount() != static_cast<std::streamsize>(magic.size()) || got != magic) {
            throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", offset_);
        }
        offset_ += magic.size();
    }

private:
    std::istream& in_;
    std::size_t offset_ = 0;
};

}  // namespace bst::io

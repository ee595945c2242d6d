#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "oucovit/errors.hpp"

namespace oucovit {

/// Incremental SHA-256 over arbitrary byte ranges.
class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
            throw Error("sha256: init failed");
        }
    }

    Sha256& update(std::span<const std::byte> bytes) {
        EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size());
        return *this;
    }

    Sha256& update(std::string_view s) { return update(std::as_bytes(std::span(s.data(), s.size()))); }

    template <typename T>
    Sha256& update_values(std::span<const T> values) {
        return update(std::as_bytes(values));
    }

    std::array<std::uint8_t, 32> finish() {
        std::array<std::uint8_t, 32> out{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), out.data(), &len);
        return out;
    }

    std::string hex() {
        static constexpr char digits[] = "0123456789abcdef";
        std::string s;
        for (auto b : finish()) {
            s.push_back(digits[b >> 4]);
            s.push_back(digits[b & 0xF]);
        }
        return s;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view s) { return Sha256().update(s).hex(); }

/// Short digest used to stamp artifacts with the producing configuration.
inline std::string short_digest(std::string_view s) { return sha256_hex(s).substr(0, 16); }

}  // namespace oucovit

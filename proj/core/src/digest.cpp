#include "kvguard/digest.hpp"

#include <openssl/evp.h>

#include <stdexcept>

namespace kvguard {

std::string Digest::hex() const {
    static const char* kDigits = "0123456789abcdef";
    std::string out;
    out.reserve(64);
    for (uint8_t b : bytes) {
        out.push_back(kDigits[b >> 4]);
        out.push_back(kDigits[b & 0xF]);
    }
    return out;
}

Digest sha256(std::span<const uint8_t> data) {
    Digest d;
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), d.bytes.data(), &len, EVP_sha256(), nullptr) != 1 ||
        len != d.bytes.size()) {
        throw std::runtime_error("sha256: EVP_Digest failed");
    }
    return d;
}

Sha256Stream::Sha256Stream() {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("sha256: init failed");
    }
    ctx_ = ctx;
}

Sha256Stream::~Sha256Stream() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256Stream::update(std::span<const uint8_t> data) {
    if (EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data.data(), data.size()) != 1) {
        throw std::runtime_error("sha256: update failed");
    }
}

void Sha256Stream::update_u64_le(uint64_t v) {
    uint8_t buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<uint8_t>(v >> (8 * i));
    update(std::span<const uint8_t>(buf, 8));
}

Digest Sha256Stream::finish() {
    Digest d;
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), d.bytes.data(), &len) != 1 ||
        len != d.bytes.size()) {
        throw std::runtime_error("sha256: final failed");
    }
    return d;
}

}  // namespace kvguard

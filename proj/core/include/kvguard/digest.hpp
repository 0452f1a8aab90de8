#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

namespace kvguard {

// A SHA-256 digest value. Comparable, hashable, hex-printable.
struct Digest {
    std::array<uint8_t, 32> bytes{};

    friend bool operator==(const Digest&, const Digest&) = default;
    friend auto operator<=>(const Digest&, const Digest&) = default;

    std::string hex() const;
};

Digest sha256(std::span<const uint8_t> data);

// Incremental variant for hashing composite records without concatenating
// them into one buffer first.
class Sha256Stream {
  public:
    Sha256Stream();
    ~Sha256Stream();
    Sha256Stream(const Sha256Stream&) = delete;
    Sha256Stream& operator=(const Sha256Stream&) = delete;

    void update(std::span<const uint8_t> data);
    void update_u64_le(uint64_t v);
    Digest finish();

  private:
    void* ctx_;  // EVP_MD_CTX, kept opaque to avoid leaking OpenSSL headers
};

struct DigestHasher {
    size_t operator()(const Digest& d) const {
        // digests are uniform; the first 8 bytes are already a good hash
        uint64_t h = 0;
        for (int i = 0; i < 8; ++i) h = (h << 8) | d.bytes[static_cast<size_t>(i)];
        return static_cast<size_t>(h);
    }
};

}  // namespace kvguard

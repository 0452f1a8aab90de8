#include <doctest.h>

#include "kvguard/digest.hpp"

#include <cstring>
#include <string>
#include <vector>

using namespace kvguard;

namespace {
std::vector<uint8_t> bytes_of(const std::string& s) {
    return std::vector<uint8_t>(s.begin(), s.end());
}
}  // namespace

TEST_CASE("sha256 matches the published test vectors") {
    CHECK(sha256({}).hex() ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256(bytes_of("abc")).hex() ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256(bytes_of("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")).hex() ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST_CASE("digest equality and ordering follow the byte array") {
    Digest a = sha256(bytes_of("x"));
    Digest b = sha256(bytes_of("y"));
    CHECK(a == a);
    CHECK(a != b);
    CHECK(((a < b) || (b < a)));
}

TEST_CASE("streaming digest equals one-shot digest") {
    std::string msg = "the quick brown fox jumps over the lazy dog";
    Sha256Stream stream;
    // feed in awkward chunk sizes
    auto data = bytes_of(msg);
    stream.update(std::span<const uint8_t>(data.data(), 7));
    stream.update(std::span<const uint8_t>(data.data() + 7, 1));
    stream.update(std::span<const uint8_t>(data.data() + 8, data.size() - 8));
    CHECK(stream.finish() == sha256(data));
}

TEST_CASE("update_u64_le appends exactly eight little-endian bytes") {
    Sha256Stream a;
    a.update_u64_le(0x0123456789ABCDEFull);
    const uint8_t raw[8] = {0xEF, 0xCD, 0xAB, 0x89, 0x67, 0x45, 0x23, 0x01};
    Sha256Stream b;
    b.update(raw);
    CHECK(a.finish() == b.finish());
}

TEST_CASE("hasher folds the leading bytes") {
    Digest d{};
    for (size_t i = 0; i < d.bytes.size(); ++i) d.bytes[i] = static_cast<uint8_t>(i + 1);
    CHECK(DigestHasher{}(d) == 0x0102030405060708ull);
}

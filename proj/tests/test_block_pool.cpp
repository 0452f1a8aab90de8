#include <doctest.h>

#include "kvguard/block_pool.hpp"

#include <nlohmann/json.hpp>

#include <stdexcept>
#include <vector>

using namespace kvguard;

namespace {

Digest hash_of(std::initializer_list<TokenId> toks,
               std::optional<Digest> parent = std::nullopt, ExtraKeys extra = {}) {
    std::vector<TokenId> v(toks);
    return compute_block_hash(ChainHashInput{parent, v, extra});
}

}  // namespace

TEST_CASE("chain hash separates parents, tokens, salts and lora ids") {
    Digest root = hash_of({1, 2, 3, 4});
    CHECK(root == hash_of({1, 2, 3, 4}));  // deterministic
    CHECK(root != hash_of({1, 2, 3, 5}));
    CHECK(root != hash_of({1, 2, 3}));

    // same tokens under different parents
    CHECK(hash_of({5, 6}, root) != hash_of({5, 6}));
    CHECK(hash_of({5, 6}, root) != hash_of({5, 6}, hash_of({9})));

    // an absent salt, an empty salt and a 1-byte salt all differ
    ExtraKeys none{};
    ExtraKeys empty{std::vector<uint8_t>{}, std::nullopt};
    ExtraKeys one{std::vector<uint8_t>{0x00}, std::nullopt};
    CHECK(hash_of({1, 2}, std::nullopt, none) != hash_of({1, 2}, std::nullopt, empty));
    CHECK(hash_of({1, 2}, std::nullopt, empty) != hash_of({1, 2}, std::nullopt, one));

    // lora id is part of the key
    ExtraKeys lora{std::nullopt, 7};
    CHECK(hash_of({1, 2}, std::nullopt, lora) != hash_of({1, 2}));
    CHECK(hash_of({1, 2}, std::nullopt, lora) !=
          hash_of({1, 2}, std::nullopt, ExtraKeys{std::nullopt, 8}));

    // token boundaries are length-prefixed: [1|2,3] vs [1,2|3] parents differ
    Digest p1 = hash_of({1});
    Digest p2 = hash_of({1, 2});
    CHECK(hash_of({2, 3}, p1) != hash_of({3}, p2));

    CHECK_THROWS_AS(compute_block_hash(ChainHashInput{std::nullopt, {}, {}}),
                    std::invalid_argument);
}

TEST_CASE("chain_hashes walks full blocks only") {
    BlockPool pool(8, 4);
    std::vector<TokenId> toks{1, 2, 3, 4, 5, 6, 7, 8, 9};  // 2 full blocks + 1 spare
    auto hs = pool.chain_hashes(toks, {});
    REQUIRE(hs.size() == 2);
    CHECK(hs[0] == hash_of({1, 2, 3, 4}));
    CHECK(hs[1] == hash_of({5, 6, 7, 8}, hs[0]));
}

TEST_CASE("free queue starts full in id order and allocation is fifo") {
    BlockPool pool(4, 16);
    CHECK(pool.free_count() == 4);
    CHECK(pool.free_queue_snapshot() == std::vector<int>{0, 1, 2, 3});

    CHECK(pool.allocate_block() == 0);
    CHECK(pool.allocate_block() == 1);
    CHECK(pool.meta(0).ref_cnt == 1);
    CHECK(pool.free_count() == 2);

    // releases append at the tail: 2, 3, then 1, then 0
    pool.release(1);
    pool.release(0);
    CHECK(pool.free_queue_snapshot() == std::vector<int>{2, 3, 1, 0});
    CHECK(pool.allocate_block() == 2);

    pool.allocate_block();
    pool.allocate_block();
    pool.allocate_block();
    CHECK(pool.free_count() == 0);
    CHECK_THROWS_AS(pool.allocate_block(), PoolExhaustedError);
}

TEST_CASE("sealing maps the hash; released blocks stay hittable until reallocated") {
    BlockPool pool(2, 2);
    Digest h = hash_of({1, 2});
    int b = pool.allocate_block();
    CHECK_FALSE(pool.lookup(h).has_value());
    pool.seal_block(b, h);
    CHECK(pool.lookup(h) == b);
    CHECK(pool.meta(b).sealed);

    // double seal and duplicate hash are contract violations
    CHECK_THROWS_AS(pool.seal_block(b, h), std::logic_error);
    int b2 = pool.allocate_block();
    CHECK_THROWS_AS(pool.seal_block(b2, h), std::logic_error);

    // release keeps the mapping (free but hittable)
    pool.release(b);
    CHECK(pool.lookup(h) == b);
    CHECK(pool.in_free_queue(b));

    // touch revives it from the free queue
    pool.touch(b);
    CHECK_FALSE(pool.in_free_queue(b));
    CHECK(pool.meta(b).ref_cnt == 1);
    CHECK(pool.meta(b).hit_count == 1);

    // reallocation of a free sealed block drops its mapping
    pool.release(b);
    pool.release(b2);
    CHECK(pool.allocate_block() == b);  // fifo: b re-entered the queue first
    CHECK_FALSE(pool.lookup(h).has_value());
    CHECK_FALSE(pool.meta(b).sealed);
}

TEST_CASE("touch requires a sealed block and stacks references") {
    BlockPool pool(2, 2);
    int b = pool.allocate_block();
    CHECK_THROWS_AS(pool.touch(b), std::logic_error);  // unsealed
    pool.seal_block(b, hash_of({4, 2}));
    pool.touch(b);
    CHECK(pool.meta(b).ref_cnt == 2);  // allocation ref + touch
    pool.release(b);
    CHECK_FALSE(pool.in_free_queue(b));  // still referenced once
    pool.release(b);
    CHECK(pool.in_free_queue(b));
}

TEST_CASE("find_longest_cached_prefix stops at the first miss") {
    BlockPool pool(8, 2);
    std::vector<TokenId> toks{1, 2, 3, 4, 5, 6};
    auto hs = pool.chain_hashes(toks, {});

    // seal only the first two chain links
    int b0 = pool.allocate_block();
    pool.seal_block(b0, hs[0]);
    int b1 = pool.allocate_block();
    pool.seal_block(b1, hs[1]);

    auto m = pool.find_longest_cached_prefix(toks, {});
    CHECK(m.hit_blocks == std::vector<int>{b0, b1});
    CHECK(m.miss_from == 4);

    // a salt changes every chain hash, so nothing hits
    auto salted = pool.find_longest_cached_prefix(
        toks, ExtraKeys{std::vector<uint8_t>{1}, std::nullopt});
    CHECK(salted.hit_blocks.empty());
    CHECK(salted.miss_from == 0);

    // middle link invalidated: the walk must stop there even though the
    // third link is still mapped
    int b2 = pool.allocate_block();
    pool.seal_block(b2, hs[2]);
    pool.release(b1);
    pool.invalidate(b1);
    auto after = pool.find_longest_cached_prefix(toks, {});
    CHECK(after.hit_blocks == std::vector<int>{b0});
    CHECK(after.miss_from == 2);
}

TEST_CASE("invalidate unmaps but keeps the queue position") {
    BlockPool pool(3, 2);
    Digest h = hash_of({1, 2});
    int b = pool.allocate_block();
    pool.seal_block(b, h);

    CHECK_THROWS_AS(pool.invalidate(b), std::logic_error);  // still referenced
    pool.release(b);
    auto queue_before = pool.free_queue_snapshot();
    pool.invalidate(b);
    CHECK(pool.free_queue_snapshot() == queue_before);
    CHECK_FALSE(pool.lookup(h).has_value());
    CHECK_FALSE(pool.meta(b).sealed);
    CHECK_FALSE(pool.meta(b).digest.has_value());
}

TEST_CASE("digest records live and die with the block") {
    BlockPool pool(2, 2);
    int b = pool.allocate_block();
    pool.seal_block(b, hash_of({8, 9}));
    BlockDigest d;
    d.block_id = b;
    d.sealed_at = 3;
    pool.set_digest(b, d);
    pool.bump_hits_since_seal(b);
    pool.bump_hits_since_seal(b);
    CHECK(pool.meta(b).digest->hits_since_seal == 2);
    CHECK(pool.meta(b).digest->sealed_at == 3);

    pool.release(b);
    pool.invalidate(b);
    CHECK_FALSE(pool.meta(b).digest.has_value());
}

TEST_CASE("state_json reports per-block metadata") {
    BlockPool pool(2, 2);
    int b = pool.allocate_block();
    pool.seal_block(b, hash_of({1, 2}));
    auto j = pool.state_json();
    REQUIRE(j.is_array());
    REQUIRE(j.size() == 2);
    CHECK(j[0].at("block_id") == 0);
    CHECK(j[0].at("ref_cnt") == 1);
    CHECK(j[0].at("sealed") == true);
    CHECK(j[1].at("sealed") == false);
}

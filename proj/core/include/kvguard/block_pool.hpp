#pragma once

#include "kvguard/digest.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace kvguard {

using TokenId = uint32_t;

// Cache-key material beyond the tokens themselves. Requests with different
// salts (or lora ids) must never share blocks, so both are folded into the
// chain hash. An absent salt and an empty salt hash differently on purpose.
struct ExtraKeys {
    std::optional<std::vector<uint8_t>> salt;
    std::optional<uint64_t> lora_id;

    friend bool operator==(const ExtraKeys&, const ExtraKeys&) = default;
};

struct ChainHashInput {
    std::optional<Digest> parent_hash;  // absent for the first block
    std::span<const TokenId> token_ids;
    ExtraKeys extra;
};

// SHA-256 over a canonical length-prefixed encoding of
// (parent_hash, token_ids, extra_keys). Throws on empty token_ids.
Digest compute_block_hash(const ChainHashInput& in);

// Integrity digest record, installed by the integrity layer once a sealed
// block's tensor bytes have been digested (deferred to the end of the
// sealing cycle). Lives in pool metadata so eviction clears it naturally.
struct BlockDigest {
    int block_id = -1;
    Digest digest;
    uint64_t sealed_at = 0;        // scheduling-cycle counter at digest time
    uint64_t hits_since_seal = 0;  // cache hits served since the digest
};

struct BlockMeta {
    int block_id = -1;
    int ref_cnt = 0;
    std::optional<Digest> chain_hash;
    bool sealed = false;
    std::optional<BlockDigest> digest;
    uint64_t hit_count = 0;  // lifetime cache hits while mapped
};

class PoolExhaustedError : public std::runtime_error {
  public:
    PoolExhaustedError() : std::runtime_error("block pool exhausted: free queue is empty") {}
};

struct PrefixMatch {
    std::vector<int> hit_blocks;
    size_t miss_from = 0;  // first token index not covered by a hit
};

// CPU-side prefix-cache metadata: hash->block map, ref counting, and an LRU
// free queue. Blocks with ref_cnt = 0 sit in the queue (initially all of
// them, in id order) but keep their hash until reallocated, so they stay
// hittable until evicted.
class BlockPool {
  public:
    BlockPool(int n_blocks, int block_size);

    int n_blocks() const { return static_cast<int>(blocks_.size()); }
    int block_size() const { return block_size_; }

    const BlockMeta& meta(int block_id) const { return blocks_.at(static_cast<size_t>(block_id)); }

    std::optional<int> lookup(const Digest& chain_hash) const;

    // Chain hashes of every full block of token_ids, in order.
    std::vector<Digest> chain_hashes(std::span<const TokenId> token_ids,
                                     const ExtraKeys& extra) const;

    // Walks full-block chain hashes from block 0; stops at the first miss.
    PrefixMatch find_longest_cached_prefix(std::span<const TokenId> token_ids,
                                           const ExtraKeys& extra) const;

    // Cache hit: increments ref_cnt and hit_count; removes the block from
    // the free queue on the 0 -> 1 transition. The block must be sealed.
    void touch(int block_id);

    // Drops one reference each; blocks reaching ref_cnt 0 are appended to
    // the free-queue tail in the order given, hash retained.
    void release(std::span<const int> block_ids);
    void release(int block_id) { release(std::span<const int>(&block_id, 1)); }

    // Pops the least recently released free block, clearing its hash-map
    // entry, sealed flag, digest and hit count. The block is handed out
    // with ref_cnt = 1. Throws PoolExhaustedError when nothing is free.
    int allocate_block();

    // Registers chain_hash in the map and marks the block sealed. The block
    // must be fully written; double-sealing is a logic error, as is sealing
    // under a hash that is already mapped to another block.
    void seal_block(int block_id, const Digest& chain_hash);

    // Eviction on integrity mismatch or TTL expiry: unmap, unseal, drop the
    // digest. Only legal while no request holds the block (ref_cnt = 0);
    // the block keeps its free-queue position.
    void invalidate(int block_id);

    // Integrity-layer access to the digest slot.
    void set_digest(int block_id, const BlockDigest& d);
    void bump_hits_since_seal(int block_id);

    size_t free_count() const { return free_queue_.size(); }
    bool in_free_queue(int block_id) const;
    std::vector<int> free_queue_snapshot() const;

    // (block_id, ref_cnt, hash hex or null, sealed, queue position or -1,
    // digest presence) for harness assertions.
    nlohmann::json state_json() const;

  private:
    BlockMeta& meta_mut(int block_id) { return blocks_.at(static_cast<size_t>(block_id)); }

    int block_size_;
    std::vector<BlockMeta> blocks_;
    std::unordered_map<Digest, int, DigestHasher> hash_map_;
    std::deque<int> free_queue_;
};

}  // namespace kvguard

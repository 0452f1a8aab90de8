#pragma once

#include "kvguard/block_pool.hpp"
#include "kvguard/kv_store.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace kvguard {

struct IntegrityConfig {
    bool enabled = false;                      // seal-time digests + hit-time verification
    std::optional<uint64_t> ttl_requests;      // N_TTL: forced recompute after this many hits
    std::string digest_algorithm = "SHA-256";  // fixed; recorded in outputs

    void validate() const;  // throws on ttl_requests == 0 or unknown algorithm
};

struct DetectionEvent {
    uint64_t cycle = 0;
    int block_id = -1;
    std::string cause;   // "checksum" | "ttl"
    std::string action;  // "evict-recompute"
};

enum class VerifyResult { Ok, Mismatch };
enum class TtlResult { Keep, Recompute };

// The countermeasure layer: digests sealed blocks, verifies them on cache
// hits, and evicts on mismatch or TTL expiry. Digest records live in pool
// metadata; this class owns the policy, the counters and the event log.
// Driven only by the engine's sequential scheduler.
class IntegrityManager {
  public:
    explicit IntegrityManager(const IntegrityConfig& cfg);

    const IntegrityConfig& config() const { return cfg_; }

    // Digest records are maintained when verification is enabled, and also
    // when only the TTL arm is active (hit counting needs the seal record).
    bool tracks_digests() const { return cfg_.enabled || cfg_.ttl_requests.has_value(); }

    // Digests block_bytes and installs the record. Called at the end of the
    // sealing cycle, after the model step has returned; sealing an unsealed
    // pool block is a contract violation (pool enforces it).
    BlockDigest seal(const KvStore& store, BlockPool& pool, int block_id, uint64_t cycle);

    // Recomputes the digest over the current bytes and compares. Pure read;
    // counts one verified hit. The block must carry a digest record.
    VerifyResult verify(const KvStore& store, const BlockPool& pool, int block_id);

    // Mismatch handling: unmap + unseal the block so the triggering request
    // (and everyone after it) treats it as a miss and recomputes.
    void on_mismatch(BlockPool& pool, int block_id, uint64_t cycle);

    // Recompute when hits_since_seal >= N_TTL. Keep when TTL is unset or the
    // block has no digest record yet.
    TtlResult ttl_check(const BlockPool& pool, int block_id) const;
    void on_ttl_expiry(BlockPool& pool, int block_id, uint64_t cycle);

    // Served cache hit on a sealed block: bumps hits_since_seal, or the
    // pre-seal-hit counter if the digest record does not exist yet (the
    // deferred-digest window).
    void note_hit(BlockPool& pool, int block_id);

    uint64_t seals() const { return seals_; }
    uint64_t verified_hits() const { return verified_hits_; }
    uint64_t mismatches() const { return mismatches_; }
    uint64_t ttl_recomputes() const { return ttl_recomputes_; }
    uint64_t preseal_hits() const { return preseal_hits_; }
    const std::vector<DetectionEvent>& events() const { return events_; }

  private:
    IntegrityConfig cfg_;
    uint64_t seals_ = 0;
    uint64_t verified_hits_ = 0;
    uint64_t mismatches_ = 0;
    uint64_t ttl_recomputes_ = 0;
    uint64_t preseal_hits_ = 0;
    std::vector<DetectionEvent> events_;
};

}  // namespace kvguard

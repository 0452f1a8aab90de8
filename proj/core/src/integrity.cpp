#include "kvguard/integrity.hpp"

#include <stdexcept>

namespace kvguard {

void IntegrityConfig::validate() const {
    if (ttl_requests && *ttl_requests == 0) {
        throw std::invalid_argument("integrity: ttl_requests must be >= 1 when set");
    }
    if (digest_algorithm != "SHA-256") {
        throw std::invalid_argument("integrity: unsupported digest algorithm " + digest_algorithm);
    }
}

IntegrityManager::IntegrityManager(const IntegrityConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

BlockDigest IntegrityManager::seal(const KvStore& store, BlockPool& pool, int block_id,
                                   uint64_t cycle) {
    auto bytes = store.block_bytes(block_id);
    BlockDigest d{block_id, sha256(bytes), cycle, 0};
    pool.set_digest(block_id, d);
    ++seals_;
    return d;
}

VerifyResult IntegrityManager::verify(const KvStore& store, const BlockPool& pool, int block_id) {
    const auto& rec = pool.meta(block_id).digest;
    if (!rec) throw std::logic_error("verify: block has no digest record");
    ++verified_hits_;
    auto bytes = store.block_bytes(block_id);
    return sha256(bytes) == rec->digest ? VerifyResult::Ok : VerifyResult::Mismatch;
}

void IntegrityManager::on_mismatch(BlockPool& pool, int block_id, uint64_t cycle) {
    pool.invalidate(block_id);
    ++mismatches_;
    events_.push_back(DetectionEvent{cycle, block_id, "checksum", "evict-recompute"});
}

TtlResult IntegrityManager::ttl_check(const BlockPool& pool, int block_id) const {
    if (!cfg_.ttl_requests) return TtlResult::Keep;
    const auto& rec = pool.meta(block_id).digest;
    if (!rec) return TtlResult::Keep;
    return rec->hits_since_seal >= *cfg_.ttl_requests ? TtlResult::Recompute : TtlResult::Keep;
}

void IntegrityManager::on_ttl_expiry(BlockPool& pool, int block_id, uint64_t cycle) {
    pool.invalidate(block_id);
    ++ttl_recomputes_;
    events_.push_back(DetectionEvent{cycle, block_id, "ttl", "evict-recompute"});
}

void IntegrityManager::note_hit(BlockPool& pool, int block_id) {
    if (!tracks_digests()) return;
    if (pool.meta(block_id).digest) {
        pool.bump_hits_since_seal(block_id);
    } else {
        ++preseal_hits_;
    }
}

}  // namespace kvguard

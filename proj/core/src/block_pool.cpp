#include "kvguard/block_pool.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>

namespace kvguard {

Digest compute_block_hash(const ChainHashInput& in) {
    if (in.token_ids.empty()) {
        throw std::invalid_argument("compute_block_hash: token_ids must be non-empty");
    }
    // Canonical encoding: every variable-length or optional field is
    // length- or presence-prefixed, so distinct inputs cannot collide as
    // byte strings.
    Sha256Stream h;
    uint8_t present = in.parent_hash.has_value() ? 1 : 0;
    h.update(std::span<const uint8_t>(&present, 1));
    if (in.parent_hash) {
        h.update(std::span<const uint8_t>(in.parent_hash->bytes.data(), in.parent_hash->bytes.size()));
    }
    h.update_u64_le(in.token_ids.size());
    for (TokenId t : in.token_ids) {
        uint8_t buf[4];
        for (int i = 0; i < 4; ++i) buf[i] = static_cast<uint8_t>(t >> (8 * i));
        h.update(std::span<const uint8_t>(buf, 4));
    }
    present = in.extra.salt.has_value() ? 1 : 0;
    h.update(std::span<const uint8_t>(&present, 1));
    if (in.extra.salt) {
        h.update_u64_le(in.extra.salt->size());
        h.update(std::span<const uint8_t>(in.extra.salt->data(), in.extra.salt->size()));
    }
    present = in.extra.lora_id.has_value() ? 1 : 0;
    h.update(std::span<const uint8_t>(&present, 1));
    if (in.extra.lora_id) {
        h.update_u64_le(*in.extra.lora_id);
    }
    return h.finish();
}

BlockPool::BlockPool(int n_blocks, int block_size) : block_size_(block_size) {
    if (n_blocks <= 0 || block_size <= 0) {
        throw std::invalid_argument("block pool: n_blocks and block_size must be positive");
    }
    blocks_.resize(static_cast<size_t>(n_blocks));
    for (int i = 0; i < n_blocks; ++i) {
        blocks_[static_cast<size_t>(i)].block_id = i;
        free_queue_.push_back(i);
    }
}

std::optional<int> BlockPool::lookup(const Digest& chain_hash) const {
    auto it = hash_map_.find(chain_hash);
    if (it == hash_map_.end()) return std::nullopt;
    return it->second;
}

std::vector<Digest> BlockPool::chain_hashes(std::span<const TokenId> token_ids,
                                            const ExtraKeys& extra) const {
    std::vector<Digest> out;
    size_t n_full = token_ids.size() / static_cast<size_t>(block_size_);
    out.reserve(n_full);
    std::optional<Digest> parent;
    for (size_t b = 0; b < n_full; ++b) {
        ChainHashInput in{parent,
                          token_ids.subspan(b * static_cast<size_t>(block_size_),
                                            static_cast<size_t>(block_size_)),
                          extra};
        parent = compute_block_hash(in);
        out.push_back(*parent);
    }
    return out;
}

PrefixMatch BlockPool::find_longest_cached_prefix(std::span<const TokenId> token_ids,
                                                  const ExtraKeys& extra) const {
    PrefixMatch m;
    for (const Digest& h : chain_hashes(token_ids, extra)) {
        auto hit = lookup(h);
        if (!hit) break;
        m.hit_blocks.push_back(*hit);
    }
    m.miss_from = m.hit_blocks.size() * static_cast<size_t>(block_size_);
    return m;
}

void BlockPool::touch(int block_id) {
    BlockMeta& b = meta_mut(block_id);
    if (!b.sealed || !b.chain_hash) {
        throw std::logic_error("touch: block is not sealed");
    }
    if (b.ref_cnt == 0) {
        auto it = std::find(free_queue_.begin(), free_queue_.end(), block_id);
        if (it == free_queue_.end()) {
            throw std::logic_error("touch: ref_cnt 0 block missing from free queue");
        }
        free_queue_.erase(it);
    }
    ++b.ref_cnt;
    ++b.hit_count;
}

void BlockPool::release(std::span<const int> block_ids) {
    for (int id : block_ids) {
        BlockMeta& b = meta_mut(id);
        if (b.ref_cnt <= 0) {
            throw std::logic_error("release: block has no outstanding references");
        }
        if (--b.ref_cnt == 0) {
            free_queue_.push_back(id);
        }
    }
}

int BlockPool::allocate_block() {
    if (free_queue_.empty()) throw PoolExhaustedError{};
    int id = free_queue_.front();
    free_queue_.pop_front();
    BlockMeta& b = meta_mut(id);
    if (b.chain_hash) hash_map_.erase(*b.chain_hash);
    b.chain_hash.reset();
    b.sealed = false;
    b.digest.reset();
    b.hit_count = 0;
    b.ref_cnt = 1;
    return id;
}

void BlockPool::seal_block(int block_id, const Digest& chain_hash) {
    BlockMeta& b = meta_mut(block_id);
    if (b.sealed) throw std::logic_error("seal_block: block already sealed");
    if (hash_map_.contains(chain_hash)) {
        throw std::logic_error("seal_block: chain hash already mapped to another block");
    }
    b.sealed = true;
    b.chain_hash = chain_hash;
    hash_map_.emplace(chain_hash, block_id);
}

void BlockPool::invalidate(int block_id) {
    BlockMeta& b = meta_mut(block_id);
    if (b.ref_cnt != 0) {
        throw std::logic_error("invalidate: block is still referenced");
    }
    if (b.chain_hash) hash_map_.erase(*b.chain_hash);
    b.chain_hash.reset();
    b.sealed = false;
    b.digest.reset();
}

void BlockPool::set_digest(int block_id, const BlockDigest& d) {
    BlockMeta& b = meta_mut(block_id);
    if (!b.sealed) throw std::logic_error("set_digest: block is not sealed");
    b.digest = d;
}

void BlockPool::bump_hits_since_seal(int block_id) {
    BlockMeta& b = meta_mut(block_id);
    if (!b.digest) throw std::logic_error("bump_hits_since_seal: block has no digest");
    ++b.digest->hits_since_seal;
}

bool BlockPool::in_free_queue(int block_id) const {
    return std::find(free_queue_.begin(), free_queue_.end(), block_id) != free_queue_.end();
}

std::vector<int> BlockPool::free_queue_snapshot() const {
    return std::vector<int>(free_queue_.begin(), free_queue_.end());
}

nlohmann::json BlockPool::state_json() const {
    std::vector<int> queue_pos(blocks_.size(), -1);
    int pos = 0;
    for (int id : free_queue_) queue_pos[static_cast<size_t>(id)] = pos++;
    nlohmann::json arr = nlohmann::json::array();
    for (const BlockMeta& b : blocks_) {
        nlohmann::json j{
            {"block_id", b.block_id},
            {"ref_cnt", b.ref_cnt},
            {"hash", b.chain_hash ? nlohmann::json(b.chain_hash->hex()) : nlohmann::json(nullptr)},
            {"sealed", b.sealed},
            {"queue_position", queue_pos[static_cast<size_t>(b.block_id)]},
            {"has_digest", b.digest.has_value()},
            {"hit_count", b.hit_count},
        };
        arr.push_back(std::move(j));
    }
    return arr;
}

}  // namespace kvguard

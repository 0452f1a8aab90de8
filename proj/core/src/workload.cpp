#include "kvguard/workload.hpp"

#include "kvguard/rng.hpp"

#include <stdexcept>

namespace kvguard {

void WorkloadConfig::validate() const {
    if (prefix_tokens <= 0) throw std::invalid_argument("workload: prefix_tokens must be positive");
    if (suffix_min < 1 || suffix_max < suffix_min) {
        throw std::invalid_argument("workload: need 1 <= suffix_min <= suffix_max");
    }
}

std::vector<TokenId> make_token_seq(uint64_t seed, size_t n, int vocab_size) {
    if (vocab_size < 2) throw std::invalid_argument("workload: vocab_size must be >= 2");
    Rng rng(seed);
    std::vector<TokenId> out(n);
    for (size_t i = 0; i < n; ++i) {
        // ids in [1, vocab): 0 is the collapse marker
        out[i] = static_cast<TokenId>(1 + rng.next_below(static_cast<uint64_t>(vocab_size - 1)));
    }
    return out;
}

std::vector<TokenId> make_prefix(uint64_t seed, const WorkloadConfig& cfg, int vocab_size) {
    cfg.validate();
    return make_token_seq(seed, static_cast<size_t>(cfg.prefix_tokens), vocab_size);
}

Request make_request(uint64_t seed, uint64_t request_index, std::vector<TokenId> prefix,
                     const WorkloadConfig& cfg, int vocab_size) {
    cfg.validate();
    Rng rng(counter_hash(seed, request_index));
    size_t len = static_cast<size_t>(cfg.suffix_min) +
                 rng.next_below(static_cast<uint64_t>(cfg.suffix_max - cfg.suffix_min + 1));
    Request r;
    r.request_id = request_index;
    r.prefix_tokens = std::move(prefix);
    r.suffix_tokens = make_token_seq(rng.fork(7), len, vocab_size);
    return r;
}

}  // namespace kvguard

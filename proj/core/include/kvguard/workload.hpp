#pragma once

#include "kvguard/engine.hpp"

#include <cstdint>
#include <vector>

namespace kvguard {

// Seeded stand-in for a chat workload: one fixed system-prompt prefix per
// experiment, per-request suffixes with lengths uniform in
// [suffix_min, suffix_max]. Token id 0 is reserved for the collapse marker
// and never appears in generated prompts.
struct WorkloadConfig {
    int prefix_tokens = 103;
    int suffix_min = 8;
    int suffix_max = 32;

    void validate() const;  // throws std::invalid_argument
};

std::vector<TokenId> make_token_seq(uint64_t seed, size_t n, int vocab_size);

std::vector<TokenId> make_prefix(uint64_t seed, const WorkloadConfig& cfg, int vocab_size);

// Request request_index under a fixed prefix; the suffix stream is derived
// from (seed, request_index) so request sets are reproducible and distinct.
Request make_request(uint64_t seed, uint64_t request_index, std::vector<TokenId> prefix,
                     const WorkloadConfig& cfg, int vocab_size);

}  // namespace kvguard

#pragma once

#include "kvguard/block_pool.hpp"
#include "kvguard/integrity.hpp"
#include "kvguard/kv_store.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace kvguard {

struct ToyModelConfig {
    int vocab_size = 256;
    int n_layers = 2;
    int n_kv_heads = 2;
    int head_dim = 16;
    int hidden_dim = 64;
    uint64_t weight_seed = 1;
    int max_new_tokens = 128;

    void validate() const;  // throws std::invalid_argument
};

// Dense toy transformer weights, fully determined by weight_seed. Matrices
// are row-major with the output unit as the row.
struct Model {
    ToyModelConfig cfg;
    std::vector<float> embedding;  // [vocab][hidden]
    struct Layer {
        std::vector<float> wq, wk, wv;  // [heads*head_dim][hidden]
        std::vector<float> wo;          // [hidden][heads*head_dim]
    };
    std::vector<Layer> layers;
    std::vector<float> w_logits;  // [vocab][hidden]
    float inv_sqrt_head_dim = 0.0f;
};

Model build_model(const ToyModelConfig& cfg);

// Additive deterministic positional offset for (position, channel), the
// only positional signal; a pure function of the weight seed.
float position_offset(const Model& m, int position, int channel);

struct Request {
    uint64_t request_id = 0;
    std::vector<TokenId> prefix_tokens;  // shared system prompt
    std::vector<TokenId> suffix_tokens;  // per-request
    std::optional<std::vector<uint8_t>> salt;
};

struct GenerationOutput {
    uint64_t request_id = 0;
    std::vector<TokenId> tokens;
    std::vector<bool> served_from_cache;  // one flag per full prompt block
    bool degenerate = false;              // NaN/inf logits hit the collapse rule
};

// Collapse token emitted for the rest of the generation once any logit goes
// NaN or +-inf.
inline constexpr TokenId kCollapseToken = 0;

// One head's attention read at a single step: scores q.k_j/sqrt(D), softmax
// via det_exp, output sum_j alpha_j v_j. keys/values are [n_ctx][head_dim]
// row-major. Exposed separately so the value-side propagation arithmetic
// (an alpha_j-weighted shift per perturbed channel) is directly probeable;
// the engine's decode path calls exactly this function.
struct AttnResult {
    std::vector<float> weights;  // alpha, length n_ctx
    std::vector<float> output;   // length head_dim
};
AttnResult attend_head(std::span<const float> q, std::span<const float> keys,
                       std::span<const float> values, size_t n_ctx, int head_dim,
                       float inv_sqrt_head_dim);

// Allocation-free core of attend_head; weights_out has n_ctx slots, out has
// head_dim. The engine's hot loop uses this form directly.
void attend_head_inplace(std::span<const float> q, std::span<const float> keys,
                         std::span<const float> values, size_t n_ctx, int head_dim,
                         float inv_sqrt_head_dim, float* weights_out, float* out);

// Per-request scheduling result: the physical block table, the hit/miss
// split, and decode state. Produced by the schedule phase, consumed by
// execution.
struct ScheduledContext {
    Request req;
    std::vector<TokenId> prompt;      // prefix + suffix
    ExtraKeys extra;
    std::vector<int> block_table;     // grows during decode
    size_t n_hit_blocks = 0;
    size_t miss_from = 0;             // first prompt position to compute
    std::vector<bool> hit_flags;      // per full prompt block
    std::vector<TokenId> all_tokens;  // prompt + generated (chain-hash input)
    std::vector<Digest> block_hashes; // chain hashes of full blocks so far
    std::vector<float> last_logits;   // logits of the last prefill position
    bool executed = false;
};

// Deterministic single-threaded serving loop over one store + pool. A cycle
// mirrors a scheduler step: schedule all requests (prefix lookup, integrity
// verification, TTL check, touch/allocate), then execute them in order
// (compute K/V, decode greedily), then run end-of-cycle sealing (deferred
// integrity digests) and release every request's blocks.
class Engine {
  public:
    Engine(const ToyModelConfig& model_cfg, const KvGeometry& geom, const IntegrityConfig& icfg);

    // Invoked between the scheduling pass and execution; the window where a
    // flip evades the current cycle's verification (the TOCTOU demo hook).
    using MidCycleHook = std::function<void(Engine&)>;

    std::vector<GenerationOutput> run_cycle(std::span<const Request> reqs,
                                            const MidCycleHook& hook = {});
    GenerationOutput run_request(const Request& req);

    // Phase access for tests and probes. prefill = schedule + K/V compute
    // for one request; decode_greedy consumes the context. Neither seals
    // digests nor releases blocks; finish_cycle does both.
    ScheduledContext prefill(const Request& req);
    GenerationOutput decode_greedy(ScheduledContext& ctx);
    void finish_cycle(std::span<ScheduledContext> contexts);

    const Model& model() const { return model_; }
    KvStore& store() { return store_; }
    const KvStore& store() const { return store_; }
    BlockPool& pool() { return pool_; }
    const BlockPool& pool() const { return pool_; }
    IntegrityManager& integrity() { return integrity_; }
    const IntegrityManager& integrity() const { return integrity_; }
    uint64_t cycle() const { return cycle_; }

  private:
    ScheduledContext schedule_one(const Request& req);
    void execute_prefill(ScheduledContext& ctx);
    // Runs token `tok` at `position`, writing K/V and returning the final
    // hidden state. Logits are computed only when `logits` is non-null.
    void forward_token(ScheduledContext& ctx, TokenId tok, size_t position, float* logits);
    int physical_block(ScheduledContext& ctx, size_t position);
    void seal_if_complete(ScheduledContext& ctx, size_t position);

    Model model_;
    KvGeometry geom_;
    KvStore store_;
    BlockPool pool_;
    IntegrityManager integrity_;
    uint64_t cycle_ = 0;
    std::vector<int> sealed_this_cycle_;

    // reusable forward-pass buffers (the engine is single-threaded)
    struct Scratch {
        std::vector<float> x, q, k, v, attn, y, logits, keys, vals, weights;
    };
    Scratch scratch_;
};

}  // namespace kvguard

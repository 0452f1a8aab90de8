#include "kvguard/engine.hpp"

#include "kvguard/detmath.hpp"
#include "kvguard/rng.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace kvguard {

namespace {

// Initialization scales. kValueScale places stored |V| magnitudes so the
// damage bands separate: a mid-exponent flip (x256) lands well inside the
// residual tanh's linear regime and can only divert decoding, while an
// upper-exponent flip (x65536 and beyond) or NaN/inf saturates it and can
// lock decode into a repetitive attractor. 0.35 left the x256 band grazing
// the attractor threshold (rare collapse at bit 10); 0.25 keeps it clear.
// kQkScale keeps softmax weights diffuse over a ~100-token context.
constexpr float kEmbedScale = 1.0f;
constexpr float kPosScale = 0.3f;
constexpr float kQkScale = 0.125f;
constexpr float kValueScale = 0.25f;
constexpr float kOutScale = 0.18f;
constexpr float kLogitScale = 0.5f;

uint64_t stream_seed(uint64_t weight_seed, uint64_t stream) {
    return mix64(weight_seed ^ counter_hash(0xC0FFEEull, stream));
}

// stream ids: embedding, then 4 per layer (q,k,v,o), then logits, positions
constexpr uint64_t kEmbeddingStream = 0;
uint64_t layer_stream(int layer, int which) {
    return 1 + static_cast<uint64_t>(layer) * 4 + static_cast<uint64_t>(which);
}

std::vector<float> filled(size_t n, uint64_t seed, float scale) {
    std::vector<float> v(n);
    for (size_t i = 0; i < n; ++i) {
        v[i] = unit_symmetric(counter_hash(seed, i)) * scale;
    }
    return v;
}

// y = W x with W row-major [rows][cols]; summation order frozen (the source
// of the engine's bit-identical outputs, together with detmath)
void matvec(const float* w, const float* x, float* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const float* row = w + static_cast<size_t>(r) * static_cast<size_t>(cols);
        float acc = 0.0f;
        for (int c = 0; c < cols; ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
}

}  // namespace

void ToyModelConfig::validate() const {
    if (vocab_size < 2) throw std::invalid_argument("model: vocab_size must be >= 2");
    if (n_layers <= 0 || n_kv_heads <= 0 || head_dim <= 0 || hidden_dim <= 0) {
        throw std::invalid_argument("model: dimensions must be positive");
    }
    if (max_new_tokens <= 0) throw std::invalid_argument("model: max_new_tokens must be positive");
}

Model build_model(const ToyModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    size_t hid = static_cast<size_t>(cfg.hidden_dim);
    size_t kv = static_cast<size_t>(cfg.n_kv_heads) * static_cast<size_t>(cfg.head_dim);
    m.embedding = filled(static_cast<size_t>(cfg.vocab_size) * hid,
                         stream_seed(cfg.weight_seed, kEmbeddingStream), kEmbedScale);
    m.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& layer = m.layers[static_cast<size_t>(l)];
        layer.wq = filled(kv * hid, stream_seed(cfg.weight_seed, layer_stream(l, 0)), kQkScale);
        layer.wk = filled(kv * hid, stream_seed(cfg.weight_seed, layer_stream(l, 1)), kQkScale);
        layer.wv = filled(kv * hid, stream_seed(cfg.weight_seed, layer_stream(l, 2)), kValueScale);
        layer.wo = filled(hid * kv, stream_seed(cfg.weight_seed, layer_stream(l, 3)), kOutScale);
    }
    m.w_logits = filled(static_cast<size_t>(cfg.vocab_size) * hid,
                        stream_seed(cfg.weight_seed, layer_stream(cfg.n_layers, 0)), kLogitScale);
    m.inv_sqrt_head_dim = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));
    return m;
}

float position_offset(const Model& m, int position, int channel) {
    uint64_t seed = stream_seed(m.cfg.weight_seed, layer_stream(m.cfg.n_layers, 1));
    uint64_t idx = static_cast<uint64_t>(position) * static_cast<uint64_t>(m.cfg.hidden_dim) +
                   static_cast<uint64_t>(channel);
    return unit_symmetric(counter_hash(seed, idx)) * kPosScale;
}

void attend_head_inplace(std::span<const float> q, std::span<const float> keys,
                         std::span<const float> values, size_t n_ctx, int head_dim,
                         float inv_sqrt_head_dim, float* weights_out, float* out) {
    if (n_ctx == 0) throw std::invalid_argument("attend_head: empty context");
    // scores; NaN scores poison max via the exp path, not the comparison
    float max_s = -std::numeric_limits<float>::infinity();
    for (size_t j = 0; j < n_ctx; ++j) {
        const float* kj = keys.data() + j * static_cast<size_t>(head_dim);
        float s = 0.0f;
        for (int d = 0; d < head_dim; ++d) s += q[static_cast<size_t>(d)] * kj[d];
        s *= inv_sqrt_head_dim;
        weights_out[j] = s;
        if (s > max_s) max_s = s;
    }
    float denom = 0.0f;
    for (size_t j = 0; j < n_ctx; ++j) {
        float e = det_exp(weights_out[j] - max_s);
        weights_out[j] = e;
        denom += e;
    }
    for (size_t j = 0; j < n_ctx; ++j) weights_out[j] /= denom;
    for (int d = 0; d < head_dim; ++d) out[d] = 0.0f;
    for (size_t j = 0; j < n_ctx; ++j) {
        const float* vj = values.data() + j * static_cast<size_t>(head_dim);
        float a = weights_out[j];
        for (int d = 0; d < head_dim; ++d) out[d] += a * vj[d];
    }
}

AttnResult attend_head(std::span<const float> q, std::span<const float> keys,
                       std::span<const float> values, size_t n_ctx, int head_dim,
                       float inv_sqrt_head_dim) {
    AttnResult r;
    r.weights.resize(n_ctx);
    r.output.resize(static_cast<size_t>(head_dim));
    attend_head_inplace(q, keys, values, n_ctx, head_dim, inv_sqrt_head_dim, r.weights.data(),
                        r.output.data());
    return r;
}

Engine::Engine(const ToyModelConfig& model_cfg, const KvGeometry& geom,
               const IntegrityConfig& icfg)
    : model_(build_model(model_cfg)),
      geom_(geom),
      store_(geom),
      pool_(geom.n_blocks, geom.block_size),
      integrity_(icfg) {
    if (geom.n_layers != model_cfg.n_layers || geom.n_kv_heads != model_cfg.n_kv_heads ||
        geom.head_dim != model_cfg.head_dim) {
        throw std::invalid_argument("engine: kv geometry disagrees with model dimensions");
    }
    size_t hid = static_cast<size_t>(model_cfg.hidden_dim);
    size_t kv = static_cast<size_t>(model_cfg.n_kv_heads) * static_cast<size_t>(model_cfg.head_dim);
    scratch_.x.resize(hid);
    scratch_.q.resize(kv);
    scratch_.k.resize(kv);
    scratch_.v.resize(kv);
    scratch_.attn.resize(kv);
    scratch_.y.resize(hid);
    scratch_.logits.resize(static_cast<size_t>(model_cfg.vocab_size));
}

int Engine::physical_block(ScheduledContext& ctx, size_t position) {
    size_t bidx = position / static_cast<size_t>(geom_.block_size);
    while (ctx.block_table.size() <= bidx) {
        ctx.block_table.push_back(pool_.allocate_block());
    }
    return ctx.block_table[bidx];
}

void Engine::seal_if_complete(ScheduledContext& ctx, size_t position) {
    size_t block_size = static_cast<size_t>(geom_.block_size);
    if ((position + 1) % block_size != 0) return;
    size_t bidx = position / block_size;
    if (bidx == ctx.block_hashes.size()) {
        // extend the chain with this newly filled block's tokens
        ChainHashInput in{
            bidx == 0 ? std::optional<Digest>{} : std::optional<Digest>{ctx.block_hashes[bidx - 1]},
            std::span<const TokenId>(ctx.all_tokens).subspan(bidx * block_size, block_size),
            ctx.extra};
        ctx.block_hashes.push_back(compute_block_hash(in));
    }
    const Digest& h = ctx.block_hashes[bidx];
    if (pool_.lookup(h)) {
        // an earlier request in this cycle sealed identical content; our
        // copy stays transient and returns to the queue at cycle end
        return;
    }
    pool_.seal_block(ctx.block_table[bidx], h);
    sealed_this_cycle_.push_back(ctx.block_table[bidx]);
}

void Engine::forward_token(ScheduledContext& ctx, TokenId tok, size_t position, float* logits) {
    const ToyModelConfig& cfg = model_.cfg;
    if (tok >= static_cast<TokenId>(cfg.vocab_size)) {
        throw std::out_of_range("forward: token id outside vocabulary");
    }
    int hid = cfg.hidden_dim;
    int heads = cfg.n_kv_heads;
    int dim = cfg.head_dim;
    size_t block_size = static_cast<size_t>(geom_.block_size);
    int block = physical_block(ctx, position);
    int slot = static_cast<int>(position % block_size);

    float* x = scratch_.x.data();
    const float* emb = model_.embedding.data() + static_cast<size_t>(tok) * static_cast<size_t>(hid);
    for (int i = 0; i < hid; ++i) {
        x[i] = emb[i] + position_offset(model_, static_cast<int>(position), i);
    }

    size_t n_ctx = position + 1;
    scratch_.keys.resize(n_ctx * static_cast<size_t>(dim));
    scratch_.vals.resize(n_ctx * static_cast<size_t>(dim));
    scratch_.weights.resize(n_ctx);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const Model::Layer& layer = model_.layers[static_cast<size_t>(l)];
        matvec(layer.wq.data(), x, scratch_.q.data(), heads * dim, hid);
        matvec(layer.wk.data(), x, scratch_.k.data(), heads * dim, hid);
        matvec(layer.wv.data(), x, scratch_.v.data(), heads * dim, hid);

        // write this position's K/V through the BF16 codec; cached reads and
        // fresh computes then see bit-identical patterns
        for (int h = 0; h < heads; ++h) {
            auto kd = store_.slot_span_mut(l, KvSide::Key, block, slot, h);
            auto vd = store_.slot_span_mut(l, KvSide::Value, block, slot, h);
            for (int d = 0; d < dim; ++d) {
                size_t r = static_cast<size_t>(h) * static_cast<size_t>(dim) +
                           static_cast<size_t>(d);
                kd[static_cast<size_t>(d)] = encode(scratch_.k[r]);
                vd[static_cast<size_t>(d)] = encode(scratch_.v[r]);
            }
        }

        for (int h = 0; h < heads; ++h) {
            for (size_t j = 0; j < n_ctx; ++j) {
                int bj = ctx.block_table[j / block_size];
                int sj = static_cast<int>(j % block_size);
                auto ks = store_.slot_span(l, KvSide::Key, bj, sj, h);
                auto vs = store_.slot_span(l, KvSide::Value, bj, sj, h);
                float* krow = scratch_.keys.data() + j * static_cast<size_t>(dim);
                float* vrow = scratch_.vals.data() + j * static_cast<size_t>(dim);
                for (int d = 0; d < dim; ++d) {
                    krow[d] = decode(ks[static_cast<size_t>(d)]);
                    vrow[d] = decode(vs[static_cast<size_t>(d)]);
                }
            }
            attend_head_inplace(
                std::span<const float>(scratch_.q.data() + static_cast<size_t>(h) * dim,
                                       static_cast<size_t>(dim)),
                scratch_.keys, scratch_.vals, n_ctx, dim, model_.inv_sqrt_head_dim,
                scratch_.weights.data(), scratch_.attn.data() + static_cast<size_t>(h) * dim);
        }

        matvec(layer.wo.data(), scratch_.attn.data(), scratch_.y.data(), hid, heads * dim);
        for (int i = 0; i < hid; ++i) {
            x[i] = det_tanh(x[i] + scratch_.y[i]);
        }
    }

    if (logits != nullptr) {
        matvec(model_.w_logits.data(), x, logits, cfg.vocab_size, hid);
    }
    seal_if_complete(ctx, position);
}

ScheduledContext Engine::schedule_one(const Request& req) {
    ScheduledContext ctx;
    ctx.req = req;
    ctx.prompt = req.prefix_tokens;
    ctx.prompt.insert(ctx.prompt.end(), req.suffix_tokens.begin(), req.suffix_tokens.end());
    if (ctx.prompt.empty()) throw std::invalid_argument("request: empty prompt");
    ctx.extra = ExtraKeys{req.salt, std::nullopt};
    ctx.all_tokens = ctx.prompt;

    size_t block_size = static_cast<size_t>(geom_.block_size);
    size_t n_full = ctx.prompt.size() / block_size;
    ctx.block_hashes = pool_.chain_hashes(ctx.prompt, ctx.extra);

    // Never serve the entire prompt from cache: the last prompt position is
    // always recomputed so its logits exist.
    size_t max_hits = (ctx.prompt.size() % block_size == 0) ? n_full - 1 : n_full;

    size_t hits = 0;
    for (size_t b = 0; b < max_hits; ++b) {
        auto found = pool_.lookup(ctx.block_hashes[b]);
        if (!found) break;
        int id = *found;
        const bool has_digest = pool_.meta(id).digest.has_value();
        if (integrity_.config().enabled && has_digest) {
            if (integrity_.verify(store_, pool_, id) == VerifyResult::Mismatch) {
                integrity_.on_mismatch(pool_, id, cycle_);
                break;  // treat as a miss from here on
            }
        }
        if (integrity_.ttl_check(pool_, id) == TtlResult::Recompute) {
            integrity_.on_ttl_expiry(pool_, id, cycle_);
            break;
        }
        pool_.touch(id);
        integrity_.note_hit(pool_, id);
        ctx.block_table.push_back(id);
        ++hits;
    }
    ctx.n_hit_blocks = hits;
    ctx.miss_from = hits * block_size;
    ctx.hit_flags.assign(n_full, false);
    for (size_t b = 0; b < hits; ++b) ctx.hit_flags[b] = true;

    // allocate the rest of the prompt's blocks now; decode blocks are
    // allocated lazily as generation crosses block boundaries
    size_t prompt_blocks = (ctx.prompt.size() + block_size - 1) / block_size;
    for (size_t b = hits; b < prompt_blocks; ++b) {
        ctx.block_table.push_back(pool_.allocate_block());
    }
    return ctx;
}

void Engine::execute_prefill(ScheduledContext& ctx) {
    if (ctx.executed) throw std::logic_error("prefill: context already executed");
    ctx.last_logits.resize(static_cast<size_t>(model_.cfg.vocab_size));
    for (size_t p = ctx.miss_from; p < ctx.prompt.size(); ++p) {
        bool last = (p + 1 == ctx.prompt.size());
        forward_token(ctx, ctx.prompt[p], p, last ? ctx.last_logits.data() : nullptr);
    }
    ctx.executed = true;
}

GenerationOutput Engine::decode_greedy(ScheduledContext& ctx) {
    if (!ctx.executed) throw std::logic_error("decode: prefill has not run");
    const ToyModelConfig& cfg = model_.cfg;
    GenerationOutput out;
    out.request_id = ctx.req.request_id;
    out.served_from_cache = ctx.hit_flags;
    out.tokens.reserve(static_cast<size_t>(cfg.max_new_tokens));

    const float* logits = ctx.last_logits.data();
    for (int step = 0; step < cfg.max_new_tokens; ++step) {
        bool finite = true;
        for (int t = 0; t < cfg.vocab_size; ++t) {
            if (!std::isfinite(logits[t])) {
                finite = false;
                break;
            }
        }
        if (!finite) {
            // collapse rule: this and every remaining step emit token 0
            out.degenerate = true;
            while (out.tokens.size() < static_cast<size_t>(cfg.max_new_tokens)) {
                out.tokens.push_back(kCollapseToken);
            }
            break;
        }
        TokenId best = 0;
        float best_v = logits[0];
        for (int t = 1; t < cfg.vocab_size; ++t) {
            if (logits[t] > best_v) {  // strict: ties keep the lowest id
                best_v = logits[t];
                best = static_cast<TokenId>(t);
            }
        }
        out.tokens.push_back(best);
        ctx.all_tokens.push_back(best);
        if (step + 1 == cfg.max_new_tokens) break;
        forward_token(ctx, best, ctx.prompt.size() + static_cast<size_t>(step),
                      scratch_.logits.data());
        logits = scratch_.logits.data();
    }
    return out;
}

void Engine::finish_cycle(std::span<ScheduledContext> contexts) {
    // deferred integrity digests: computed only now, after the cycle's model
    // steps have returned
    if (integrity_.tracks_digests()) {
        for (int id : sealed_this_cycle_) {
            integrity_.seal(store_, pool_, id, cycle_);
        }
    }
    sealed_this_cycle_.clear();
    for (ScheduledContext& ctx : contexts) {
        pool_.release(ctx.block_table);
        ctx.block_table.clear();
    }
}

std::vector<GenerationOutput> Engine::run_cycle(std::span<const Request> reqs,
                                                const MidCycleHook& hook) {
    ++cycle_;
    sealed_this_cycle_.clear();
    std::vector<ScheduledContext> ctxs;
    ctxs.reserve(reqs.size());
    for (const Request& r : reqs) ctxs.push_back(schedule_one(r));
    if (hook) hook(*this);
    std::vector<GenerationOutput> outs;
    outs.reserve(reqs.size());
    for (ScheduledContext& ctx : ctxs) {
        execute_prefill(ctx);
        outs.push_back(decode_greedy(ctx));
    }
    finish_cycle(ctxs);
    return outs;
}

GenerationOutput Engine::run_request(const Request& req) {
    return run_cycle(std::span<const Request>(&req, 1)).front();
}

ScheduledContext Engine::prefill(const Request& req) {
    ++cycle_;
    sealed_this_cycle_.clear();
    ScheduledContext ctx = schedule_one(req);
    execute_prefill(ctx);
    return ctx;
}

}  // namespace kvguard
